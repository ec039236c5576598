//! Flat `key = value` run configuration with dotted keys.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ls3d_core::{DataSpec, NetworkSpec, Task, TrainConfig};

use crate::error::{CliError, CliResult};

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "task",
    "net.channels",
    "net.num_resblocks",
    "net.ls3d_blocks",
    "net.temporal_deconv_after",
    "net.in_channels",
    "net.encoder_activation",
    "net.branch_kernel",
    "net.global_residual",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.grad_clip",
    "train.seed",
    "train.eval_every",
    "data.train_clips",
    "data.test_clips",
    "data.height",
    "data.width",
    "data.frames",
    "data.motion_min",
    "data.motion_max",
    "data.objects",
    "data.noise_sigma",
    "data.test_seed",
    "eval.checkpoint",
    "viz.checkpoint",
    "viz.clip",
    "viz.frame",
    "viz.row",
    "viz.col",
    "gradcheck.configs",
    "gradcheck.seed",
    "gradcheck.tolerance",
    "gradcheck.max_entries",
    "gradcheck.step",
    "ablate.seeds",
    "bench.size",
    "bench.channels",
    "bench.frames",
    "bench.iters",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub configs: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_entries: usize,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizOptions {
    pub checkpoint: String,
    pub clip: usize,
    /// `None` picks the middle output frame / centre pixel.
    pub frame: Option<usize>,
    pub row: Option<usize>,
    pub col: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub size: usize,
    pub channels: usize,
    pub frames: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkSpec,
    pub train: TrainConfig,
    pub eval_checkpoint: String,
    pub viz: VizOptions,
    pub gradcheck: GradcheckOptions,
    pub ablate_seeds: Vec<u64>,
    pub bench: BenchOptions,
    explicit: HashSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetworkSpec::default(),
            train: TrainConfig {
                epochs: 40,
                batch_size: 1,
                data: DataSpec {
                    train_clips: 128,
                    test_clips: 32,
                    ..DataSpec::default()
                },
                ..TrainConfig::default()
            },
            eval_checkpoint: String::new(),
            viz: VizOptions {
                checkpoint: String::new(),
                clip: 0,
                frame: None,
                row: None,
                col: None,
            },
            gradcheck: GradcheckOptions {
                configs: 20,
                seed: 0,
                tolerance: 1e-4,
                max_entries: 24,
                step: 1e-5,
            },
            ablate_seeds: vec![0, 1, 2],
            bench: BenchOptions {
                size: 32,
                channels: 8,
                frames: 4,
                iters: 5,
            },
            explicit: HashSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_set(key: &str, value: &str) -> CliResult<BTreeSet<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(BTreeSet::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_auto(key: &str, value: &str) -> CliResult<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_set(set: &BTreeSet<usize>) -> String {
    if set.is_empty() {
        "none".into()
    } else {
        set.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".into(), |v| v.to_string())
}

impl RunConfig {
    /// Parses `#`-commented `key = value` lines over the defaults.
    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let n = &mut self.net;
        let t = &mut self.train;
        let d = &mut t.data;
        match key {
            "task" => {
                let task: Task = parse(key, value)?;
                n.task = task;
                t.task = task;
            }
            "net.channels" => n.channels = parse(key, value)?,
            "net.num_resblocks" => n.num_resblocks = parse(key, value)?,
            "net.ls3d_blocks" => n.ls3d_blocks = parse_set(key, value)?,
            "net.temporal_deconv_after" => n.temporal_deconv_after = parse_set(key, value)?,
            "net.in_channels" => n.in_channels = parse(key, value)?,
            "net.encoder_activation" => n.encoder_activation = parse(key, value)?,
            "net.branch_kernel" => n.branch_kernel = parse(key, value)?,
            "net.global_residual" => n.global_residual = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.grad_clip" => t.grad_clip = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "data.train_clips" => d.train_clips = parse(key, value)?,
            "data.test_clips" => d.test_clips = parse(key, value)?,
            "data.height" => d.height = parse(key, value)?,
            "data.width" => d.width = parse(key, value)?,
            "data.frames" => d.frames = parse(key, value)?,
            "data.motion_min" => d.motion_min = parse(key, value)?,
            "data.motion_max" => d.motion_max = parse(key, value)?,
            "data.objects" => d.objects = parse(key, value)?,
            "data.noise_sigma" => d.noise_sigma = parse(key, value)?,
            "data.test_seed" => d.test_seed = parse(key, value)?,
            "eval.checkpoint" => self.eval_checkpoint = value.to_string(),
            "viz.checkpoint" => self.viz.checkpoint = value.to_string(),
            "viz.clip" => self.viz.clip = parse(key, value)?,
            "viz.frame" => self.viz.frame = parse_auto(key, value)?,
            "viz.row" => self.viz.row = parse_auto(key, value)?,
            "viz.col" => self.viz.col = parse_auto(key, value)?,
            "gradcheck.configs" => self.gradcheck.configs = parse(key, value)?,
            "gradcheck.seed" => self.gradcheck.seed = parse(key, value)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, value)?,
            "gradcheck.max_entries" => self.gradcheck.max_entries = parse(key, value)?,
            "gradcheck.step" => self.gradcheck.step = parse(key, value)?,
            "ablate.seeds" => {
                self.ablate_seeds = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<CliResult<_>>()?
            }
            "bench.size" => self.bench.size = parse(key, value)?,
            "bench.channels" => self.bench.channels = parse(key, value)?,
            "bench.frames" => self.bench.frames = parse(key, value)?,
            "bench.iters" => self.bench.iters = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let n = &self.net;
        let t = &self.train;
        let d = &t.data;
        Some(match key {
            "task" => n.task.to_string(),
            "net.channels" => n.channels.to_string(),
            "net.num_resblocks" => n.num_resblocks.to_string(),
            "net.ls3d_blocks" => show_set(&n.ls3d_blocks),
            "net.temporal_deconv_after" => show_set(&n.temporal_deconv_after),
            "net.in_channels" => n.in_channels.to_string(),
            "net.encoder_activation" => n.encoder_activation.to_string(),
            "net.branch_kernel" => n.branch_kernel.to_string(),
            "net.global_residual" => n.global_residual.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.grad_clip" => t.grad_clip.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "data.train_clips" => d.train_clips.to_string(),
            "data.test_clips" => d.test_clips.to_string(),
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.frames" => d.frames.to_string(),
            "data.motion_min" => d.motion_min.to_string(),
            "data.motion_max" => d.motion_max.to_string(),
            "data.objects" => d.objects.to_string(),
            "data.noise_sigma" => d.noise_sigma.to_string(),
            "data.test_seed" => d.test_seed.to_string(),
            "eval.checkpoint" => self.eval_checkpoint.clone(),
            "viz.checkpoint" => self.viz.checkpoint.clone(),
            "viz.clip" => self.viz.clip.to_string(),
            "viz.frame" => show_auto(self.viz.frame),
            "viz.row" => show_auto(self.viz.row),
            "viz.col" => show_auto(self.viz.col),
            "gradcheck.configs" => self.gradcheck.configs.to_string(),
            "gradcheck.seed" => self.gradcheck.seed.to_string(),
            "gradcheck.tolerance" => self.gradcheck.tolerance.to_string(),
            "gradcheck.max_entries" => self.gradcheck.max_entries.to_string(),
            "gradcheck.step" => self.gradcheck.step.to_string(),
            "ablate.seeds" => self
                .ablate_seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "bench.size" => self.bench.size.to_string(),
            "bench.channels" => self.bench.channels.to_string(),
            "bench.frames" => self.bench.frames.to_string(),
            "bench.iters" => self.bench.iters.to_string(),
            _ => return None,
        })
    }

    /// Fills task-dependent defaults the user did not set, then validates.
    pub fn resolve(&mut self) -> CliResult<()> {
        if self.net.task == Task::Denoise && !self.explicit.contains("net.temporal_deconv_after") {
            self.net.temporal_deconv_after.clear();
        }
        self.net.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut cfg =
            RunConfig::from_text("# header\nnet.channels = 8 # narrow\n\ntask=denoise\nnet.ls3d_blocks = 1, 3\n")
                .unwrap();
        cfg.set_pair("net.channels=16").unwrap();
        cfg.resolve().unwrap();
        assert_eq!(cfg.net.channels, 16);
        assert_eq!(cfg.train.task, Task::Denoise);
        assert!(cfg.net.temporal_deconv_after.is_empty());
        assert_eq!(cfg.net.ls3d_blocks, [1, 3].into_iter().collect());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("net.numblocks = 3").unwrap_err();
        assert!(err.to_string().contains("net.numblocks"));
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn bad_value_and_missing_equals() {
        assert!(RunConfig::from_text("train.epochs = many").is_err());
        assert!(RunConfig::from_text("train.epochs").is_err());
    }

    #[test]
    fn echo_roundtrips_every_key() {
        let mut cfg = RunConfig::default();
        cfg.set("viz.row", "7").unwrap();
        cfg.set("net.ls3d_blocks", "none").unwrap();
        cfg.set("train.learning_rate", "0.0025").unwrap();
        let echo = cfg.echo();
        assert_eq!(echo.lines().count(), KEYS.len());
        let back = RunConfig::from_text(&echo).unwrap();
        assert_eq!(back.echo(), echo);
        assert_eq!(back.net, cfg.net);
        assert_eq!(back.train, cfg.train);
        for k in KEYS {
            assert!(cfg.get(k).is_some(), "{k} has no getter");
        }
    }
}
