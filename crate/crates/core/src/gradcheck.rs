//! Central finite-difference validation of layer backward passes.
//!
//! The scalar probed is `L = <r, f(x)>` with a fixed random projection `r`,
//! so `dL/dy = r` is fed to the analytic backward. Each parameter group and
//! the input are probed at up to `max_entries` randomly chosen coordinates.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ls3d::{Ls3dConv, Ls3dLayer};
use crate::module::Module;
use crate::net::{build_net, NetworkSpec, VINet};
use crate::tensor::{Shape5, Tensor5};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_entries: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(1, |numeric|)` over all probes.
    pub max_error: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn worst_group(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn probe_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

fn finite_or_err(v: f64, context: &str, location: String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(context, location))
    }
}

/// Central difference of `f` at 0. A probe whose estimates at `h` and `h/2`
/// disagree straddles a kink (a ReLU or bilinear cell edge within `h`); the
/// step then shrinks tenfold, up to four times, until the two agree.
fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let mut diff = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let mut h = step;
    let mut coarse = diff(h)?;
    for _ in 0..4 {
        let fine = diff(h / 2.0)?;
        if (coarse - fine).abs() <= 1e-6 * fine.abs().max(1.0) {
            return Ok(fine);
        }
        h /= 10.0;
        coarse = diff(h)?;
    }
    Ok(coarse)
}

pub fn gradcheck<M: Module<f64> + ?Sized>(module: &mut M, input: &Tensor5<f64>, seed: u64) -> Result<GradCheckReport> {
    gradcheck_with(
        module,
        input,
        &GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        },
    )
}

pub fn gradcheck_with<M: Module<f64> + ?Sized>(
    module: &mut M,
    input: &Tensor5<f64>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    input.ensure_finite("gradcheck input")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let y = module.forward(input, true)?;
    y.ensure_finite("gradcheck forward output")?;
    let proj = Tensor5::uniform(y.shape(), 1.0, &mut rng);
    let grad_input = module.backward(&proj)?;
    grad_input.ensure_finite("analytic input gradient")?;
    let analytic: Vec<(String, Vec<f64>)> = module.params().into_iter().map(|p| (p.name, p.grad.to_vec())).collect();
    for (name, g) in &analytic {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("analytic gradient", format!("{name}[{i}]")));
        }
    }
    module.clear_state();

    let h = config.step;
    let loss = |m: &mut M, x: &Tensor5<f64>| -> Result<f64> { m.forward(x, false)?.dot(&proj) };

    let mut groups = Vec::new();
    let mut x = input.clone();
    let mut worst = 0.0f64;
    let mut report = GroupReport {
        name: "input".into(),
        checked: 0,
        max_error: 0.0,
    };
    for i in probe_indices(x.len(), config.max_entries, &mut rng) {
        let orig = x.data()[i];
        let numeric = central_difference(
            |d| {
                x.data_mut()[i] = orig + d;
                let l = loss(module, &x);
                x.data_mut()[i] = orig;
                l
            },
            h,
        )?;
        let numeric = finite_or_err(numeric, "numeric gradient", format!("input{:?}", x.shape().unravel(i)))?;
        report.max_error = report.max_error.max(relative_error(grad_input.data()[i], numeric));
        report.checked += 1;
    }
    worst = worst.max(report.max_error);
    groups.push(report);

    for (gi, (name, grad)) in analytic.iter().enumerate() {
        let picks = probe_indices(grad.len(), config.max_entries, &mut rng);
        let mut report = GroupReport {
            name: name.clone(),
            checked: 0,
            max_error: 0.0,
        };
        for i in picks {
            let orig = module.params()[gi].value[i];
            let numeric = central_difference(
                |d| {
                    module.params()[gi].value[i] = orig + d;
                    let l = loss(module, input);
                    module.params()[gi].value[i] = orig;
                    l
                },
                h,
            )?;
            let numeric = finite_or_err(numeric, "numeric gradient", format!("{name}[{i}]"))?;
            report.max_error = report.max_error.max(relative_error(grad[i], numeric));
            report.checked += 1;
        }
        worst = worst.max(report.max_error);
        groups.push(report);
    }
    Ok(GradCheckReport {
        max_error: worst,
        groups,
    })
}

/// A randomly sized LS3D layer (main kernel 1 or 3, branch kernel 1 or 3)
/// with random branch weights and offsets moved off the integer grid, plus a
/// matching random input.
pub fn random_ls3d_case(seed: u64) -> Result<(Ls3dConv<f64>, Tensor5<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let k = if rng.random_bool(0.75) { 3 } else { 1 };
    let bk = if rng.random_bool(0.5) { 3 } else { 1 };
    let mut layer = Ls3dLayer::with_kernel(ci, co, [k; 3], bk, &mut rng)?;
    layer.offset_branch.weight = Tensor5::uniform(layer.offset_branch.weight.shape(), 0.05, &mut rng);
    layer.mask_branch.weight = Tensor5::uniform(layer.mask_branch.weight.shape(), 0.3, &mut rng);
    for b in layer.offset_branch.bias.iter_mut() {
        *b = rng.random_range(-1.8..1.8);
    }
    for b in layer.main.bias.iter_mut() {
        *b = rng.random_range(-0.3..0.3);
    }
    let shape = Shape5::new(
        rng.random_range(1..=2),
        ci,
        rng.random_range(1..=3),
        rng.random_range(3..=6),
        rng.random_range(3..=6),
    )?;
    let x = Tensor5::uniform(shape, 1.0, &mut rng);
    Ok((Ls3dConv::new(layer), x))
}

/// Interpolation network with 4 channels, 2 LS3D blocks and 16x16 input, with
/// perturbed branches and fractional offsets, plus a random input.
pub fn tiny_network_case(seed: u64) -> Result<(VINet<f64>, Tensor5<f64>)> {
    let spec = NetworkSpec {
        channels: 4,
        num_resblocks: 2,
        ls3d_blocks: [1, 2].into_iter().collect(),
        temporal_deconv_after: [1, 2].into_iter().collect(),
        ..NetworkSpec::default()
    };
    let mut net = build_net(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for p in net.params() {
        let range = if p.name.ends_with("offset.weight") {
            0.02
        } else if p.name.ends_with("mask.weight") {
            0.2
        } else if p.name.ends_with("bias") {
            0.1
        } else {
            continue;
        };
        let shift = if p.name.ends_with("offset.bias") { 0.3 } else { 0.0 };
        p.value
            .iter_mut()
            .for_each(|v| *v = shift + rng.random_range(-range..range));
    }
    let x = Tensor5::uniform(Shape5::new(1, 3, 2, 16, 16)?, 1.0, &mut rng);
    Ok((net, x))
}
