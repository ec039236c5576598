//! Subcommand implementations. Every file written is announced on stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ls3d_core::conv::{conv3d, conv3d_ref};
use ls3d_core::gradcheck::{gradcheck_with, random_ls3d_case, tiny_network_case, GradCheckConfig};
use ls3d_core::ls3d::{ls3d_forward, predict_offsets_masks};
use ls3d_core::metrics::EvalReport;
use ls3d_core::train::{ablation_variants, evaluate, noisy_input_report, run_ablation, Adam, Dataset};
use ls3d_core::viz::{emit_map_image, sampling_map};
use ls3d_core::{
    build_net, Checkpoint, Conv3dParams, Ls3dLayer, Module, OutputCoord, Shape5, Task, Tensor5, Trainer, VINet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Shared command context.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents)?;
        announce(&path);
        Ok(path)
    }
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn echo_config(cfg: &RunConfig) {
    println!("# resolved config");
    print!("{}", cfg.echo());
    println!("# end config");
}

fn report_line(r: &EvalReport) -> String {
    format!(
        "psnr {:.3} dB  ssim {:.4}  l1 {:.5}",
        r.mean_psnr, r.mean_ssim, r.mean_l1
    )
}

pub fn train(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    echo_config(cfg);
    ctx.write("config.txt", cfg.echo())?;
    let net = build_net::<f32>(&cfg.net, cfg.train.seed)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let outcome = trainer.run(|e| {
        let mut line = format!("epoch {:>4}  loss {:.6}", e.epoch + 1, e.mean_loss);
        if let Some(r) = &e.eval {
            let _ = write!(line, "  {}", report_line(r));
        }
        println!("{line}");
    });
    ctx.write("loss.csv", trainer.loss_csv())?;
    if let Err(e) = outcome {
        if let Some(good) = trainer.last_good() {
            let path = ctx.path("last_good.ckpt");
            good.clone().with_config(&cfg.echo()).save(&path)?;
            announce(&path);
        }
        return Err(e.into());
    }
    let path = ctx.path("model.ckpt");
    trainer.checkpoint(&cfg.echo()).save(&path)?;
    announce(&path);
    if let Some(r) = trainer.final_eval() {
        println!("final {}", report_line(r));
        let p = ctx.path("eval.csv");
        r.write_csv(&p)?;
        announce(&p);
    }
    Ok(())
}

/// Rebuilds the network stored in a checkpoint from its embedded config.
fn load_network(path: &str) -> CliResult<(VINet<f32>, RunConfig)> {
    if path.is_empty() {
        return Err(CliError::Config("no checkpoint given".into()));
    }
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: PathBuf::from(path),
        source,
    })?;
    let ckpt = Checkpoint::decode(&bytes)?;
    let text = ckpt
        .config()
        .ok_or_else(|| ls3d_core::Error::Format(format!("{path} carries no config echo")))?;
    let mut stored = RunConfig::from_text(text)?;
    stored.resolve()?;
    let mut net = build_net::<f32>(&stored.net, 0)?;
    ckpt.restore(&mut net, None::<&mut Adam<f32>>)?;
    Ok((net, stored))
}

fn ensure_task(net: &VINet<f32>, task: Task) -> CliResult<()> {
    if net.spec().task != task {
        return Err(ls3d_core::Error::TaskMismatch {
            network: net.spec().task.to_string(),
            requested: task.to_string(),
        }
        .into());
    }
    Ok(())
}

pub fn eval(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    echo_config(cfg);
    let (mut net, _) = load_network(&cfg.eval_checkpoint)?;
    ensure_task(&net, cfg.train.task)?;
    let data = Dataset::<f32>::generate(cfg.train.task, &cfg.train.data, cfg.train.seed)?;
    let report = evaluate(&mut net, &data, cfg.train.batch_size)?;
    println!("model {}", report_line(&report));
    if cfg.train.task == Task::Denoise {
        println!("noisy input {}", report_line(&noisy_input_report(&data)?));
    }
    let p = ctx.path("eval.csv");
    report.write_csv(&p)?;
    announce(&p);
    Ok(())
}

pub fn gradcheck(ctx: &Context) -> CliResult<()> {
    let g = &ctx.config.gradcheck;
    echo_config(&ctx.config);
    let mut csv = String::from("case,max_rel_error,worst_group\n");
    let mut worst = 0.0f64;
    let check =
        |name: String, module: &mut dyn Module<f64>, x: &Tensor5<f64>, seed: u64, csv: &mut String| -> CliResult<f64> {
            let cfg = GradCheckConfig {
                step: g.step,
                max_entries: g.max_entries,
                seed,
            };
            let report = gradcheck_with(module, x, &cfg)?;
            let group = report.worst_group().map(|w| w.name.clone()).unwrap_or_default();
            println!("{name:<12} max relative error {:.3e} ({group})", report.max_error);
            let _ = writeln!(csv, "{name},{:e},{group}", report.max_error);
            Ok(report.max_error)
        };
    for i in 0..g.configs {
        let seed = g.seed.wrapping_add(i as u64);
        let (mut layer, x) = random_ls3d_case(seed)?;
        worst = worst.max(check(format!("ls3d{i}"), &mut layer, &x, seed, &mut csv)?);
    }
    let (mut net, x) = tiny_network_case(g.seed)?;
    worst = worst.max(check("tiny_net".into(), &mut net, &x, g.seed, &mut csv)?);
    ctx.write("gradcheck.csv", csv)?;
    let verdict = if worst < g.tolerance { "PASS" } else { "FAIL" };
    println!(
        "max relative error {worst:.3e} (tolerance {:e}): {verdict}",
        g.tolerance
    );
    if worst < g.tolerance {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient error {worst:e} exceeds {:e}",
            g.tolerance
        )))
    }
}

pub fn ablate(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    echo_config(cfg);
    let variants = ablation_variants();
    let results = run_ablation(
        &cfg.net,
        &cfg.train,
        &variants,
        &cfg.ablate_seeds,
        ctx.threads,
        |blocks, r| {
            println!(
                "run ls3d_blocks={:?} seed={} psnr {:.3} ssim {:.4}",
                blocks, r.seed, r.psnr_db, r.ssim
            );
        },
    )?;
    let mut table = String::from("variant,ls3d_blocks,psnr_db,ssim\n");
    let mut runs = String::from("variant,seed,psnr_db,ssim\n");
    println!("{:<10} {:>10} {:>8}", "variant", "PSNR(dB)", "SSIM");
    for r in &results {
        let blocks = r
            .variant
            .ls3d_blocks
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        println!("{:<10} {:>10.3} {:>8.4}", r.variant.name, r.mean_psnr, r.mean_ssim);
        let _ = writeln!(
            table,
            "\"{}\",{blocks},{:.6},{:.6}",
            r.variant.name, r.mean_psnr, r.mean_ssim
        );
        for s in &r.runs {
            let _ = writeln!(runs, "\"{}\",{},{:.6},{:.6}", r.variant.name, s.seed, s.psnr_db, s.ssim);
        }
    }
    ctx.write("ablation.csv", table)?;
    ctx.write("ablation_runs.csv", runs)?;
    Ok(())
}

pub fn viz(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    echo_config(cfg);
    let mut net = if cfg.viz.checkpoint.is_empty() {
        build_net::<f32>(&cfg.net, cfg.train.seed)?
    } else {
        load_network(&cfg.viz.checkpoint)?.0
    };
    let task = net.spec().task;
    let data = Dataset::<f32>::generate(task, &cfg.train.data, cfg.train.seed)?;
    let sample = data
        .test()
        .get(cfg.viz.clip)
        .ok_or_else(|| ls3d_core::Error::OutOfRange {
            what: "viz.clip",
            detail: format!("{} of {} test clips", cfg.viz.clip, data.test().len()),
        })?;
    let s = sample.input.shape();
    let out_t = net.spec().output_frames(s.t);
    let coord = OutputCoord {
        frame: cfg.viz.frame.unwrap_or(out_t / 2),
        row: cfg.viz.row.unwrap_or(s.h / 2),
        col: cfg.viz.col.unwrap_or(s.w / 2),
    };
    let map = sampling_map(&mut net, &sample.input, coord)?;
    if map.is_disconnected() {
        eprintln!("warning: sampling map is all zero; the output pixel is disconnected from the input");
    }
    println!(
        "output (frame {}, row {}, col {}): max {:.4e}, {} positive entries",
        coord.frame,
        coord.row,
        coord.col,
        map.max,
        map.support().len()
    );
    if let Some((r, c)) = map.centroid() {
        println!("centroid row {r:.2} col {c:.2}");
    }
    for path in emit_map_image(&map, &ctx.out, "sampling")? {
        announce(&path);
    }
    Ok(())
}

pub fn bench(ctx: &Context) -> CliResult<()> {
    let b = &ctx.config.bench;
    echo_config(&ctx.config);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.train.seed);
    let shape = Shape5::new(1, b.channels, b.frames, b.size, b.size)?;
    let x = Tensor5::<f32>::uniform(shape, 1.0, &mut rng);
    let mut params = Conv3dParams::<f32>::zeros(b.channels, b.channels, [3; 3], [1; 3], [1; 3])?;
    params.init_uniform(&mut rng);
    let mut layer = Ls3dLayer::<f32>::new(b.channels, b.channels, 3, &mut rng)?;
    layer.offset_branch.weight = Tensor5::uniform(layer.offset_branch.weight.shape(), 0.05, &mut rng);
    layer.shift_offsets(0.4);
    let (offsets, masks) = predict_offsets_masks(&x, &layer)?;
    let iters = b.iters.max(1);
    let time = |f: &dyn Fn() -> ls3d_core::Result<Tensor5<f32>>| -> CliResult<f64> {
        f()?;
        let start = Instant::now();
        for _ in 0..iters {
            f()?;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let rows = [
        ("conv3d_ref", time(&|| conv3d_ref(&x, &params))?),
        ("conv3d_im2col", time(&|| conv3d(&x, &params))?),
        (
            "ls3d_forward",
            time(&|| ls3d_forward(&x, &layer.main, &offsets, Some(&masks)))?,
        ),
    ];
    let mut csv = String::from("kernel,iters,seconds,ops_per_sec\n");
    for (name, secs) in rows {
        let ops = iters as f64 / secs;
        println!("{name:<14} {ops:>10.2} ops/sec");
        let _ = writeln!(csv, "{name},{iters},{secs:.6},{ops:.4}");
    }
    ctx.write("bench.csv", csv)?;
    Ok(())
}
