//! Adam optimisation, the training/evaluation loop over synthetic clips, and
//! checkpoint persistence.
//!
//! Checkpoint layout: magic `LS3D`, `u32` version, `u32` entry count, then per
//! entry a `u16` name length, the name, a `u8` rank, rank x `u32` dims, a `u8`
//! dtype tag (0 = f32, 1 = f64, 2 = raw bytes) and little-endian data.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::metrics::{l1_loss, EvalReport};
use crate::module::{Module, ParamMut};
use crate::net::{build_net, NetworkSpec, Task, VINet};
use crate::scalar::{DType, Scalar};
use crate::synth::{add_gaussian_noise, gen_clip, ClipSpec};
use crate::tensor::Tensor5;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LS3D";
pub const CHECKPOINT_VERSION: u32 = 1;
const BYTES_TAG: u8 = 2;

/// SplitMix64 finaliser; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub train_clips: usize,
    pub test_clips: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Object speed range in px/frame.
    pub motion_min: f64,
    pub motion_max: f64,
    pub objects: usize,
    /// Denoise only, on the 8-bit scale.
    pub noise_sigma: f64,
    /// The held-out set depends only on this seed.
    pub test_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            train_clips: 64,
            test_clips: 16,
            height: 32,
            width: 32,
            frames: 5,
            motion_min: 4.0,
            motion_max: 4.0,
            objects: 2,
            noise_sigma: 25.0,
            test_seed: 0x7E57,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    pub task: Task,
    pub data: DataSpec,
    /// Evaluate every this many epochs (0 = only after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
            seed: 0,
            task: Task::Interpolate,
            data: DataSpec::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || d.train_clips == 0 || d.test_clips == 0 {
            return fail("epochs, batch_size, train_clips and test_clips must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0 && self.grad_clip > 0.0) {
            return fail("eps and grad_clip must be positive".into());
        }
        if !(0.0 <= d.motion_min && d.motion_min <= d.motion_max) {
            return fail(format!("motion range [{}, {}] is empty", d.motion_min, d.motion_max));
        }
        let bound = d.height.min(d.width) as f64 / d.frames.max(1) as f64;
        if d.motion_max > bound {
            return fail(format!(
                "motion_max {} px/frame exceeds {bound} (frame size / frames)",
                d.motion_max
            ));
        }
        if self.task == Task::Interpolate && d.frames != 5 {
            return fail(format!("interpolation clips need 5 frames, got {}", d.frames));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are kept per parameter in `params()` order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.names
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(n, (m, v))| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    fn ensure_slots(&mut self, params: &[ParamMut<'_, T>]) -> Result<()> {
        if self.names.is_empty() {
            self.names = params.iter().map(|p| p.name.clone()).collect();
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
            return Ok(());
        }
        if self.names.len() != params.len() {
            return Err(Error::shape("adam", "parameter count", self.names.len(), params.len()));
        }
        for ((name, m), p) in self.names.iter().zip(&self.m).zip(params) {
            if *name != p.name || m.len() != p.value.len() {
                return Err(Error::Config(format!(
                    "optimizer state for {name} ({} values) does not match parameter {} ({} values)",
                    m.len(),
                    p.name,
                    p.value.len()
                )));
            }
        }
        Ok(())
    }

    /// One update from the gradients stored alongside `params`.
    pub fn step(&mut self, mut params: Vec<ParamMut<'_, T>>) -> Result<()> {
        self.ensure_slots(&params)?;
        for p in &params {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::non_finite("gradient", format!("{}[{i}]", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = self.learning_rate * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                p.value[j] = T::from_f64(p.value[j].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [ParamMut<'_, T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub input: Tensor5<T>,
    pub target: Tensor5<T>,
}

/// Pre-rendered train and held-out clips.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    task: Task,
    noise_sigma: f64,
    train: Vec<Tensor5<T>>,
    test: Vec<Sample<T>>,
}

fn render_clips<T: Scalar>(spec: &DataSpec, count: usize, seed: u64) -> Result<Vec<Tensor5<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let clip = ClipSpec::random(
                &mut rng,
                (spec.height, spec.width),
                spec.frames,
                (spec.motion_min, spec.motion_max),
                spec.objects,
            );
            gen_clip(&clip)
        })
        .collect()
}

fn key_frames<T: Scalar>(clip: &Tensor5<T>) -> Result<Tensor5<T>> {
    let last = clip.shape().t - 1;
    Tensor5::concat_time(&[&clip.slice_time(0, 1)?, &clip.slice_time(last, 1)?])
}

impl<T: Scalar> Dataset<T> {
    /// Training clips come from `seed`, the held-out set from `spec.test_seed`.
    pub fn generate(task: Task, spec: &DataSpec, seed: u64) -> Result<Self> {
        let train = render_clips(spec, spec.train_clips, mix_seed(seed, 1))?;
        let test = render_clips::<T>(spec, spec.test_clips, mix_seed(spec.test_seed, 2))?
            .into_iter()
            .enumerate()
            .map(|(i, clip)| {
                let input = match task {
                    Task::Interpolate => key_frames(&clip)?,
                    Task::Denoise => {
                        add_gaussian_noise(&clip, spec.noise_sigma, mix_seed(spec.test_seed, 3 + i as u64))?
                    }
                };
                Ok(Sample { input, target: clip })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            task,
            noise_sigma: spec.noise_sigma,
            train,
            test,
        })
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn test(&self) -> &[Sample<T>] {
        &self.test
    }

    /// Training example `index`; denoise noise is redrawn from `noise_seed`.
    pub fn train_sample(&self, index: usize, noise_seed: u64) -> Result<Sample<T>> {
        let clip = &self.train[index];
        let input = match self.task {
            Task::Interpolate => key_frames(clip)?,
            Task::Denoise => add_gaussian_noise(clip, self.noise_sigma, noise_seed)?,
        };
        Ok(Sample {
            input,
            target: clip.clone(),
        })
    }
}

/// Time window of the output that evaluation scores: the three in-between
/// frames for interpolation, everything for denoising.
fn eval_window(task: Task, t: usize) -> (usize, usize) {
    match task {
        Task::Interpolate => (1, t - 2),
        Task::Denoise => (0, t),
    }
}

fn stack<T: Scalar>(parts: &[Tensor5<T>]) -> Result<Tensor5<T>> {
    Tensor5::concat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Scores `net` on the held-out set; predictions are clamped to `[0, 1]`.
pub fn evaluate<T: Scalar>(net: &mut VINet<T>, data: &Dataset<T>, batch_size: usize) -> Result<EvalReport> {
    let mut reports = Vec::new();
    for (b, chunk) in data.test.chunks(batch_size.max(1)).enumerate() {
        let input = stack(&chunk.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let target = stack(&chunk.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?;
        let pred = net.forward(&input, false)?.map(|v| v.max(T::zero()).min(T::one()));
        let (t0, len) = eval_window(data.task, target.shape().t);
        reports.push(EvalReport::score(
            &pred.slice_time(t0, len)?,
            &target.slice_time(t0, len)?,
            b * batch_size.max(1),
        )?);
    }
    Ok(EvalReport::merge(&reports))
}

/// Scores the network inputs themselves against the clean clips (denoise only).
pub fn noisy_input_report<T: Scalar>(data: &Dataset<T>) -> Result<EvalReport> {
    let reports = data
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| EvalReport::score(&s.input, &s.target, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::merge(&reports))
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: Option<EvalReport>,
}

/// Owns the network, optimizer and data for one run.
pub struct Trainer<T: Scalar> {
    pub net: VINet<T>,
    pub config: TrainConfig,
    pub adam: Adam<T>,
    pub data: Dataset<T>,
    /// Loss of every optimisation step.
    pub history: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    last_good: Option<Checkpoint>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: VINet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if net.spec().task != config.task {
            return Err(Error::TaskMismatch {
                network: net.spec().task.to_string(),
                requested: config.task.to_string(),
            });
        }
        let data = Dataset::generate(config.task, &config.data, config.seed)?;
        Ok(Trainer {
            adam: Adam::from_config(&config),
            net,
            config,
            data,
            history: Vec::new(),
            epochs: Vec::new(),
            last_good: None,
        })
    }

    /// One optimisation step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Sample<T>) -> Result<f64> {
        let pred = self.net.forward(&batch.input, true)?;
        let (loss, grad) = l1_loss(&pred, &batch.target)?;
        if !loss.is_finite() {
            self.net.clear_state();
            return Err(Error::non_finite("loss", format!("step {}", self.history.len())));
        }
        self.net.backward(&grad)?;
        let mut params = self.net.params();
        clip_grad_norm(&mut params, self.config.grad_clip);
        self.adam.step(params)?;
        for p in self.net.params() {
            if let Some(i) = p.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite("parameter", format!("{}[{i}]", p.name)));
            }
        }
        self.history.push(loss);
        Ok(loss)
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epochs.len();
        if self.last_good.is_none() {
            self.last_good = Some(Checkpoint::capture(&mut self.net, Some(&self.adam), ""));
        }
        let mut order: Vec<usize> = (0..self.data.train_len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            self.config.seed,
            100 + epoch as u64,
        )));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let noise = mix_seed(self.config.seed, ((epoch as u64) << 32) | i as u64);
                    self.data.train_sample(i, noise)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Sample {
                input: stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?,
                target: stack(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?,
            };
            total += self.step(&batch)?;
            steps += 1;
        }
        let last = epoch + 1 == self.config.epochs;
        let due = self.config.eval_every > 0 && (epoch + 1).is_multiple_of(self.config.eval_every);
        let eval = if last || due { Some(self.evaluate()?) } else { None };
        let summary = EpochSummary {
            epoch,
            mean_loss: total / steps as f64,
            eval,
        };
        self.epochs.push(summary.clone());
        self.last_good = Some(Checkpoint::capture(&mut self.net, Some(&self.adam), ""));
        Ok(summary)
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        evaluate(&mut self.net, &self.data, self.config.batch_size)
    }

    /// Runs the remaining epochs, reporting each one to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(&EpochSummary)) -> Result<()> {
        while self.epochs.len() < self.config.epochs {
            let summary = self.run_epoch()?;
            observe(&summary);
        }
        Ok(())
    }

    /// Parameters and optimizer state at the end of the last finished epoch
    /// (or at the start, before any epoch finished).
    pub fn last_good(&self) -> Option<&Checkpoint> {
        self.last_good.as_ref()
    }

    pub fn checkpoint(&mut self, config_echo: &str) -> Checkpoint {
        Checkpoint::capture(&mut self.net, Some(&self.adam), config_echo)
    }

    /// The final evaluation, if any epoch has run.
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

/// Loss history as `step,loss` CSV with 1-based steps.
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub net: VINet<T>,
    pub history: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

/// Trains `net` for `config.epochs` epochs.
pub fn train_loop<T: Scalar>(net: VINet<T>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(net, config.clone())?;
    trainer.run(|_| {})?;
    Ok(TrainOutcome {
        net: trainer.net,
        history: trainer.history,
        epochs: trainer.epochs,
    })
}

/// One network configuration of the placement / depth ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub ls3d_blocks: BTreeSet<usize>,
}

/// Baseline, LS3D pairs at three depths, then 2, 4 and 6 LS3D blocks.
/// `2-LS3D` places its pair at blocks 5 and 6, same as `res5,6`.
pub fn ablation_variants() -> Vec<Variant> {
    let v = |name, blocks: &[usize]| Variant {
        name,
        ls3d_blocks: blocks.iter().copied().collect(),
    };
    vec![
        v("baseline", &[]),
        v("res1,2", &[1, 2]),
        v("res3,4", &[3, 4]),
        v("res5,6", &[5, 6]),
        v("2-LS3D", &[5, 6]),
        v("4-LS3D", &[3, 4, 5, 6]),
        v("6-LS3D", &[1, 2, 3, 4, 5, 6]),
    ]
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub runs: Vec<SeedResult>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Trains one network per (distinct block set, seed) and averages the final
/// held-out scores over seeds. Up to `threads` runs proceed concurrently;
/// results do not depend on `threads`. `observe` sees every finished run.
pub fn run_ablation(
    base: &NetworkSpec,
    config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
    observe: impl Fn(&BTreeSet<usize>, &SeedResult) + Sync,
) -> Result<Vec<VariantResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut sets: Vec<&BTreeSet<usize>> = Vec::new();
    for v in variants {
        if !sets.contains(&&v.ls3d_blocks) {
            sets.push(&v.ls3d_blocks);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..sets.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let run_job = |&(set, seed): &(usize, u64)| -> Result<SeedResult> {
        let spec = NetworkSpec {
            ls3d_blocks: sets[set].clone(),
            ..base.clone()
        };
        let cfg = TrainConfig { seed, ..config.clone() };
        let mut trainer = Trainer::new(build_net::<f32>(&spec, seed)?, cfg)?;
        trainer.run(|_| {})?;
        let eval = trainer.final_eval().cloned().unwrap_or_default();
        let result = SeedResult {
            seed,
            psnr_db: eval.mean_psnr,
            ssim: eval.mean_ssim,
            history: trainer.history,
        };
        observe(sets[set], &result);
        Ok(result)
    };
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<SeedResult>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= jobs.len() {
            break;
        }
        let r = run_job(&jobs[i]);
        *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
    };
    thread::scope(|s| {
        for _ in 1..threads.clamp(1, jobs.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let mut results: Vec<SeedResult> = Vec::with_capacity(jobs.len());
    for slot in slots {
        results.push(
            slot.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every job ran")?,
        );
    }
    Ok(variants
        .iter()
        .map(|v| {
            let set = sets.iter().position(|s| **s == v.ls3d_blocks).expect("set registered");
            let runs: Vec<SeedResult> = jobs
                .iter()
                .zip(&results)
                .filter(|((s, _), _)| *s == set)
                .map(|(_, r)| r.clone())
                .collect();
            let n = runs.len() as f64;
            VariantResult {
                variant: v.clone(),
                mean_psnr: runs.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                mean_ssim: runs.iter().map(|r| r.ssim).sum::<f64>() / n,
                runs,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }

    fn from_scalars<T: Scalar>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn copy_into<T: Scalar>(&self, out: &mut [T], name: &str) -> Result<()> {
        match self {
            Payload::F32(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = T::from_f64(x as f64)),
            Payload::F64(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = T::from_f64(x)),
            Payload::Bytes(_) => return Err(Error::Format(format!("entry {name} holds bytes, not numbers"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Payload,
}

/// Named tensors: parameters, `adam.m.*` / `adam.v.*` moments, `adam.step`
/// and an opaque `config` text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn capture<T: Scalar, M: Module<T> + ?Sized>(net: &mut M, adam: Option<&Adam<T>>, config: &str) -> Self {
        let mut entries: Vec<CheckpointEntry> = net
            .params()
            .into_iter()
            .map(|p| CheckpointEntry {
                name: p.name,
                dims: p.dims,
                data: Payload::from_scalars(p.value),
            })
            .collect();
        if let Some(adam) = adam {
            entries.push(CheckpointEntry {
                name: "adam.step".into(),
                dims: vec![1],
                data: Payload::F64(vec![adam.step as f64]),
            });
            for (name, m, v) in adam.moments() {
                for (kind, values) in [("m", m), ("v", v)] {
                    entries.push(CheckpointEntry {
                        name: format!("adam.{kind}.{name}"),
                        dims: vec![values.len()],
                        data: Payload::from_scalars(values),
                    });
                }
            }
        }
        entries.push(CheckpointEntry {
            name: "config".into(),
            dims: vec![config.len()],
            data: Payload::Bytes(config.as_bytes().to_vec()),
        });
        Checkpoint { entries }
    }

    /// Replaces the stored config text.
    pub fn with_config(mut self, config: &str) -> Self {
        self.entries.retain(|e| e.name != "config");
        self.entries.push(CheckpointEntry {
            name: "config".into(),
            dims: vec![config.len()],
            data: Payload::Bytes(config.as_bytes().to_vec()),
        });
        self
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn config(&self) -> Option<&str> {
        match &self.get("config")?.data {
            Payload::Bytes(b) => std::str::from_utf8(b).ok(),
            _ => None,
        }
    }

    pub fn step(&self) -> Option<u64> {
        match &self.get("adam.step")?.data {
            Payload::F64(v) => v.first().map(|&s| s as u64),
            _ => None,
        }
    }

    /// Copies stored parameters (and optimizer state, when given) into place.
    /// Every entry is validated before anything is written.
    pub fn restore<T: Scalar, M: Module<T> + ?Sized>(&self, net: &mut M, adam: Option<&mut Adam<T>>) -> Result<()> {
        let mut params = net.params();
        let mut sources = Vec::with_capacity(params.len());
        for p in &params {
            let e = self
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if e.dims != p.dims || e.data.len() != p.value.len() {
                return Err(Error::Format(format!(
                    "parameter {} has dims {:?} in the checkpoint, expected {:?}",
                    p.name, e.dims, p.dims
                )));
            }
            sources.push(e);
        }
        let mut state = None;
        if let Some(adam) = adam {
            let step = self
                .step()
                .ok_or_else(|| Error::Format("checkpoint lacks adam.step".into()))?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in &params {
                for (kind, out) in [("m", &mut m), ("v", &mut v)] {
                    let name = format!("adam.{kind}.{}", p.name);
                    let e = self
                        .get(&name)
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                    if e.data.len() != p.value.len() {
                        return Err(Error::Format(format!(
                            "{name} has {} values, expected {}",
                            e.data.len(),
                            p.value.len()
                        )));
                    }
                    let mut buf = vec![T::zero(); p.value.len()];
                    e.data.copy_into(&mut buf, &name)?;
                    out.push(buf);
                }
            }
            state = Some((adam, step, m, v));
        }
        for (p, e) in params.iter_mut().zip(&sources) {
            e.data.copy_into(p.value, &e.name)?;
        }
        if let Some((adam, step, m, v)) = state {
            adam.step = step;
            adam.names = params.iter().map(|p| p.name.clone()).collect();
            adam.m = m;
            adam.v = v;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len()).map_err(|_| Error::Format(format!("rank too high: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim too large: {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                Payload::F32(v) => {
                    out.push(DType::F32.tag());
                    v.iter().for_each(|x| x.write_le(&mut out));
                }
                Payload::F64(v) => {
                    out.push(DType::F64.tag());
                    v.iter().for_each(|x| x.write_le(&mut out));
                }
                Payload::Bytes(v) => {
                    out.push(BYTES_TAG);
                    out.extend_from_slice(v);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected LS3D)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry {name} is too large")))?;
            let tag = r.u8()?;
            let data = match (tag, DType::from_tag(tag)) {
                (_, Some(DType::F32)) => Payload::F32(r.elements(DType::F32, len)?),
                (_, Some(DType::F64)) => Payload::F64(r.elements(DType::F64, len)?),
                (BYTES_TAG, None) => Payload::Bytes(r.take(len)?.to_vec()),
                _ => return Err(Error::Format(format!("unknown dtype tag {tag} for {name}"))),
            };
            entries.push(CheckpointEntry { name, dims, data });
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{Conv3d, Conv3dParams};
    use crate::tensor::Shape5;

    fn tiny_config(task: Task) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            task,
            data: DataSpec {
                train_clips: 4,
                test_clips: 2,
                height: 16,
                width: 16,
                frames: if task == Task::Interpolate { 5 } else { 3 },
                motion_min: 1.0,
                motion_max: 2.0,
                objects: 1,
                ..DataSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_spec(task: Task) -> NetworkSpec {
        let mut spec = match task {
            Task::Interpolate => NetworkSpec::interpolation([2]),
            Task::Denoise => NetworkSpec::denoise([2]),
        };
        spec.channels = 4;
        spec.num_resblocks = 2;
        if task == Task::Interpolate {
            spec.temporal_deconv_after = [1, 2].into_iter().collect();
        }
        spec
    }

    fn single_param(value: f64) -> Conv3d<f64> {
        let mut p = Conv3dParams::<f64>::zeros(1, 1, [1; 3], [1; 3], [0; 3]).unwrap();
        p.weight.data_mut()[0] = value;
        Conv3d::new(p)
    }

    fn set_grad(layer: &mut Conv3d<f64>, g: f64) {
        for p in layer.params() {
            p.grad.iter_mut().for_each(|x| *x = g);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut layer = single_param(0.7);
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            set_grad(&mut layer, 0.0);
            adam.step(layer.params()).unwrap();
        }
        assert_eq!(layer.params()[0].value[0], 0.7);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn constant_gradient_moves_by_at_most_lr() {
        let mut layer = single_param(0.0);
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let mut prev = 0.0;
        for _ in 0..200 {
            set_grad(&mut layer, 3.0);
            adam.step(layer.params()).unwrap();
            let now = layer.params()[0].value[0];
            let delta = prev - now;
            assert!(delta > 0.0 && delta <= 1e-3 * (1.0 + 1e-6), "delta {delta}");
            prev = now;
        }
        assert!((prev + 0.2).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut layer = single_param(0.0);
        set_grad(&mut layer, f64::NAN);
        let err = Adam::new(1e-3, 0.9, 0.999, 1e-8).step(layer.params()).unwrap_err();
        assert!(err.to_string().contains("weight"), "{err}");
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut layer = single_param(0.0);
        set_grad(&mut layer, 30.0);
        let mut params = layer.params();
        // weight and bias both hold 30
        let before = clip_grad_norm(&mut params, 10.0);
        assert!((before - 30.0 * 2f64.sqrt()).abs() < 1e-9);
        let after: f64 = params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!((after - 10.0).abs() < 1e-9);
    }

    #[test]
    fn interpolation_training_reduces_loss_and_is_deterministic() {
        let mut cfg = tiny_config(Task::Interpolate);
        cfg.epochs = 1;
        cfg.batch_size = 1;
        cfg.data.train_clips = 1;
        let run = || {
            let net = build_net::<f32>(&tiny_spec(Task::Interpolate), 3).unwrap();
            let mut trainer = Trainer::new(net, cfg.clone()).unwrap();
            for _ in 0..50 {
                let sample = trainer.data.train_sample(0, 0).unwrap();
                trainer.step(&sample).unwrap();
            }
            trainer.history
        };
        let a = run();
        assert!(a[49] < a[0], "loss {} -> {}", a[0], a[49]);
        assert_eq!(a, run());
    }

    #[test]
    fn zero_learning_rate_freezes() {
        let mut cfg = tiny_config(Task::Denoise);
        cfg.learning_rate = 0.0;
        cfg.batch_size = 1;
        cfg.data.noise_sigma = 0.0;
        let mut net = build_net::<f32>(&tiny_spec(Task::Denoise), 4).unwrap();
        let before = Checkpoint::capture(&mut net, None, "");
        let outcome = train_loop(net, &cfg).unwrap();
        let mut trained = outcome.net;
        assert_eq!(Checkpoint::capture(&mut trained, None, ""), before);
        // clean inputs and a frozen net: every epoch sees the same per-clip losses
        let per_epoch = outcome.history.len() / 2;
        let mut first: Vec<f64> = outcome.history[..per_epoch].to_vec();
        let mut second: Vec<f64> = outcome.history[per_epoch..].to_vec();
        first.sort_by(f64::total_cmp);
        second.sort_by(f64::total_cmp);
        assert_eq!(first, second);
    }

    #[test]
    fn task_mismatch_rejected() {
        let net = build_net::<f32>(&tiny_spec(Task::Denoise), 0).unwrap();
        assert!(matches!(
            Trainer::new(net, tiny_config(Task::Interpolate)),
            Err(Error::TaskMismatch { .. })
        ));
    }

    #[test]
    fn evaluation_scores_middle_frames() {
        let cfg = tiny_config(Task::Interpolate);
        let mut net = build_net::<f32>(&tiny_spec(Task::Interpolate), 1).unwrap();
        let data = Dataset::generate(cfg.task, &cfg.data, 0).unwrap();
        let report = evaluate(&mut net, &data, 2).unwrap();
        assert_eq!(report.frames.len(), 2 * 3);
        assert!(report.mean_psnr.is_finite());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut cfg = tiny_config(Task::Interpolate);
        cfg.epochs = 1;
        let net = build_net::<f32>(&tiny_spec(Task::Interpolate), 5).unwrap();
        let mut trainer = Trainer::new(net, cfg).unwrap();
        trainer.run(|_| {}).unwrap();
        let ckpt = trainer.checkpoint("net.channels=4\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.config(), Some("net.channels=4\n"));
        assert_eq!(loaded.step(), Some(2));

        let mut fresh = build_net::<f32>(&tiny_spec(Task::Interpolate), 99).unwrap();
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        loaded.restore(&mut fresh, Some(&mut adam)).unwrap();
        assert_eq!(Checkpoint::capture(&mut fresh, Some(&adam), "net.channels=4\n"), ckpt);
        let x = trainer.data.test()[0].input.clone();
        assert_eq!(
            fresh.forward(&x, false).unwrap(),
            trainer.net.forward(&x, false).unwrap()
        );
    }

    #[test]
    fn checkpoint_corruption_is_reported() {
        let mut net = build_net::<f32>(&tiny_spec(Task::Denoise), 5).unwrap();
        let bytes = Checkpoint::capture(&mut net, None, "x").encode().unwrap();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&newer),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn restore_rejects_mismatched_network_without_writing() {
        let mut small = build_net::<f32>(&tiny_spec(Task::Denoise), 5).unwrap();
        let ckpt = Checkpoint::capture(&mut small, None, "");
        let mut spec = tiny_spec(Task::Denoise);
        spec.channels = 6;
        let mut other = build_net::<f32>(&spec, 6).unwrap();
        let before = Checkpoint::capture(&mut other, None, "");
        assert!(ckpt.restore(&mut other, None).is_err());
        assert_eq!(Checkpoint::capture(&mut other, None, ""), before);
    }

    #[test]
    fn ablation_lists_seven_rows_and_shares_runs() {
        let names: Vec<&str> = ablation_variants().iter().map(|v| v.name).collect();
        assert_eq!(
            names,
            ["baseline", "res1,2", "res3,4", "res5,6", "2-LS3D", "4-LS3D", "6-LS3D"]
        );

        let mut cfg = tiny_config(Task::Denoise);
        cfg.epochs = 1;
        let variants = vec![
            Variant {
                name: "a",
                ls3d_blocks: [1].into_iter().collect(),
            },
            Variant {
                name: "b",
                ls3d_blocks: [1].into_iter().collect(),
            },
            Variant {
                name: "c",
                ls3d_blocks: BTreeSet::new(),
            },
        ];
        let runs = AtomicUsize::new(0);
        let count = |_: &BTreeSet<usize>, _: &SeedResult| {
            runs.fetch_add(1, Ordering::Relaxed);
        };
        let serial = run_ablation(&tiny_spec(Task::Denoise), &cfg, &variants, &[1, 2], 1, count).unwrap();
        assert_eq!(runs.load(Ordering::Relaxed), 4);
        assert_eq!(serial[0].mean_psnr, serial[1].mean_psnr);
        let parallel = run_ablation(&tiny_spec(Task::Denoise), &cfg, &variants, &[1, 2], 3, |_, _| {}).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(
                a.runs.iter().map(|r| &r.history).collect::<Vec<_>>(),
                b.runs.iter().map(|r| &r.history).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn loss_csv_format() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "step,loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn denoise_dataset_noise_is_fixed_for_test_set() {
        let cfg = tiny_config(Task::Denoise);
        let a = Dataset::<f32>::generate(Task::Denoise, &cfg.data, 1).unwrap();
        let b = Dataset::<f32>::generate(Task::Denoise, &cfg.data, 2).unwrap();
        assert_eq!(a.test()[0].input, b.test()[0].input);
        assert_eq!(a.test()[0].input.shape(), Shape5::new(1, 3, 3, 16, 16).unwrap());
        assert_ne!(
            a.train_sample(0, 0).unwrap().target,
            b.train_sample(0, 0).unwrap().target
        );
    }
}
