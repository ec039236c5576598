//! Residual blocks and the frame-interpolation network.
//!
//! Layout (interpolation task, default spec):
//!
//! ```text
//! enc1  conv 3x3x3 stride (1,2,2) + ReLU
//! enc2  conv 3x3x3 stride (1,2,2) + ReLU
//! block1, block2
//! tdeconv1  transposed conv stride (2,1,1) + ReLU     T: 2 -> 3
//! block3, block4
//! tdeconv2  transposed conv stride (2,1,1) + ReLU     T: 3 -> 5
//! block5, block6
//! dec1  transposed conv stride (1,2,2) + ReLU
//! dec2  transposed conv stride (1,2,2)
//! ```
//!
//! A block computes `relu(x + conv2(relu(conv1(x))))`, where `conv1` is a
//! learnable-sampling layer for blocks listed in `ls3d_blocks`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{Conv3d, Conv3dParams};
use crate::error::{Error, Result};
use crate::ls3d::{Ls3dConv, Ls3dLayer};
use crate::module::{Module, ParamMut};
use crate::scalar::Scalar;
use crate::tensor::Tensor5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Interpolate,
    Denoise,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Interpolate => "interpolate",
            Task::Denoise => "denoise",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolate" => Ok(Task::Interpolate),
            "denoise" => Ok(Task::Denoise),
            other => Err(Error::Config(format!("unknown task {other:?} (interpolate|denoise)"))),
        }
    }
}

/// Declarative description of a [`VINet`]. Block indices are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub channels: usize,
    pub num_resblocks: usize,
    pub ls3d_blocks: BTreeSet<usize>,
    pub temporal_deconv_after: BTreeSet<usize>,
    pub task: Task,
    pub in_channels: usize,
    pub encoder_activation: bool,
    pub branch_kernel: usize,
    /// Denoise only: predict a correction added to the input.
    pub global_residual: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            channels: 32,
            num_resblocks: 6,
            ls3d_blocks: (1..=6).collect(),
            temporal_deconv_after: [2, 4].into_iter().collect(),
            task: Task::Interpolate,
            in_channels: 3,
            encoder_activation: true,
            branch_kernel: 3,
            global_residual: false,
        }
    }
}

impl NetworkSpec {
    pub fn interpolation(ls3d_blocks: impl IntoIterator<Item = usize>) -> Self {
        NetworkSpec {
            ls3d_blocks: ls3d_blocks.into_iter().collect(),
            ..NetworkSpec::default()
        }
    }

    pub fn denoise(ls3d_blocks: impl IntoIterator<Item = usize>) -> Self {
        NetworkSpec {
            ls3d_blocks: ls3d_blocks.into_iter().collect(),
            temporal_deconv_after: BTreeSet::new(),
            task: Task::Denoise,
            ..NetworkSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let range = 1..=self.num_resblocks;
        if let Some(b) = self.ls3d_blocks.iter().find(|b| !range.contains(b)) {
            return Err(Error::Config(format!(
                "ls3d block {b} outside 1..={}",
                self.num_resblocks
            )));
        }
        if let Some(b) = self.temporal_deconv_after.iter().find(|b| !range.contains(b)) {
            return Err(Error::Config(format!(
                "temporal deconv after block {b} outside 1..={}",
                self.num_resblocks
            )));
        }
        if self.task == Task::Denoise && !self.temporal_deconv_after.is_empty() {
            return Err(Error::Config(
                "denoise task must not upsample time (temporal_deconv_after must be empty)".into(),
            ));
        }
        if self.branch_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "branch kernel must be odd, got {}",
                self.branch_kernel
            )));
        }
        Ok(())
    }

    /// Output frame count for `t_in` input frames.
    pub fn output_frames(&self, t_in: usize) -> usize {
        self.temporal_deconv_after.iter().fold(t_in, |t, _| 2 * t - 1)
    }

    /// Input frame count the task requires, if fixed.
    pub fn required_input_frames(&self) -> Option<usize> {
        match self.task {
            Task::Interpolate => Some(2),
            Task::Denoise => None,
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum FirstConv<T> {
    Plain(Conv3d<T>),
    Ls3d(Ls3dConv<T>),
}

impl<T: Scalar> FirstConv<T> {
    fn forward(&mut self, x: &Tensor5<T>, keep: bool) -> Result<Tensor5<T>> {
        match self {
            FirstConv::Plain(c) => c.forward(x, keep),
            FirstConv::Ls3d(c) => c.forward(x, keep),
        }
    }

    fn backward(&mut self, g: &Tensor5<T>) -> Result<Tensor5<T>> {
        match self {
            FirstConv::Plain(c) => c.backward(g),
            FirstConv::Ls3d(c) => c.backward(g),
        }
    }

    fn clear_state(&mut self) {
        match self {
            FirstConv::Plain(c) => c.clear_state(),
            FirstConv::Ls3d(c) => c.clear_state(),
        }
    }

    pub fn is_ls3d(&self) -> bool {
        matches!(self, FirstConv::Ls3d(_))
    }
}

#[derive(Debug, Clone)]
struct BlockState<T> {
    first_out: Tensor5<T>,
    sum: Tensor5<T>,
}

/// `relu(x + conv2(relu(conv1(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub first: FirstConv<T>,
    pub second: Conv3d<T>,
    state: Option<BlockState<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(first: FirstConv<T>, second: Conv3d<T>) -> Self {
        ResBlock {
            first,
            second,
            state: None,
        }
    }

    fn named_params(&mut self, prefix: &str) -> Vec<ParamMut<'_, T>> {
        let mut out = match &mut self.first {
            FirstConv::Plain(c) => c.named_params(&format!("{prefix}.conv1")).into(),
            FirstConv::Ls3d(c) => c.named_params(&format!("{prefix}.conv1")),
        };
        out.extend(self.second.named_params(&format!("{prefix}.conv2")));
        out
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn forward(&mut self, x: &Tensor5<T>, keep: bool) -> Result<Tensor5<T>> {
        let a = self.first.forward(x, keep)?;
        let z = self.second.forward(&a.relu(), keep)?;
        let s = x.add(&z)?;
        let out = s.relu();
        self.state = keep.then_some(BlockState { first_out: a, sum: s });
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor5<T>) -> Result<Tensor5<T>> {
        let st = self.state.as_ref().ok_or(Error::MissingState("ResBlock"))?;
        let gs = Tensor5::relu_backward(&st.sum, g)?;
        let gh = self.second.backward(&gs)?;
        let ga = Tensor5::relu_backward(&st.first_out, &gh)?;
        let mut gx = self.first.backward(&ga)?;
        gx.add_assign(&gs)?;
        Ok(gx)
    }

    fn params(&mut self) -> Vec<ParamMut<'_, T>> {
        self.named_params("block")
    }

    fn clear_state(&mut self) {
        self.state = None;
        self.first.clear_state();
        self.second.clear_state();
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Layer<T> {
    Conv(Conv3d<T>),
    Block(ResBlock<T>),
}

#[derive(Debug, Clone)]
struct Stage<T> {
    name: String,
    layer: Layer<T>,
    relu: bool,
    pre_activation: Option<Tensor5<T>>,
}

/// The interpolation / denoising network.
#[derive(Debug, Clone)]
pub struct VINet<T> {
    spec: NetworkSpec,
    stages: Vec<Stage<T>>,
    has_state: bool,
}

fn conv_stage<T: Scalar>(name: &str, params: Conv3dParams<T>, relu: bool) -> Stage<T> {
    Stage {
        name: name.into(),
        layer: Layer::Conv(Conv3d::new(params)),
        relu,
        pre_activation: None,
    }
}

/// Input index interval reaching output interval `iv` through one layer.
fn back_through<T: Scalar>(p: &Conv3dParams<T>, iv: [(isize, isize); 3]) -> [(isize, isize); 3] {
    let k = p.kernel();
    std::array::from_fn(|d| {
        let (lo, hi) = iv[d];
        let (k, s, pad) = (k[d] as isize, p.stride[d] as isize, p.padding[d] as isize);
        if p.transposed {
            // o = i * s - pad + kk
            (
                (lo + pad - k + 1).div_euclid(s) + ((lo + pad - k + 1).rem_euclid(s) != 0) as isize,
                (hi + pad).div_euclid(s),
            )
        } else {
            (lo * s - pad, hi * s - pad + k - 1)
        }
    })
}

/// Deterministically initialises a network from `seed`: plain and main
/// kernels `uniform(±1/sqrt(fan_in))`, predictor branches and biases zero.
pub fn build_net<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<VINet<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.channels;
    let k3 = [3; 3];
    let conv = |cin, cout, stride, rng: &mut ChaCha8Rng| -> Result<Conv3dParams<T>> {
        let mut p = Conv3dParams::zeros(cin, cout, k3, stride, [1; 3])?;
        p.init_uniform(rng);
        Ok(p)
    };
    let deconv = |cin, cout, stride, out_pad, rng: &mut ChaCha8Rng| -> Result<Conv3dParams<T>> {
        let mut p = Conv3dParams::zeros_transposed(cin, cout, k3, stride, [1; 3], out_pad)?;
        p.init_uniform(rng);
        Ok(p)
    };

    let mut stages = vec![
        conv_stage(
            "enc1",
            conv(spec.in_channels, c, [1, 2, 2], &mut rng)?,
            spec.encoder_activation,
        ),
        conv_stage("enc2", conv(c, c, [1, 2, 2], &mut rng)?, spec.encoder_activation),
    ];
    let mut tdeconv = 0;
    for b in 1..=spec.num_resblocks {
        let first = if spec.ls3d_blocks.contains(&b) {
            FirstConv::Ls3d(Ls3dConv::new(Ls3dLayer::new(c, c, spec.branch_kernel, &mut rng)?))
        } else {
            FirstConv::Plain(Conv3d::new(conv(c, c, [1; 3], &mut rng)?))
        };
        let second = Conv3d::new(conv(c, c, [1; 3], &mut rng)?);
        stages.push(Stage {
            name: format!("block{b}"),
            layer: Layer::Block(ResBlock::new(first, second)),
            relu: false,
            pre_activation: None,
        });
        if spec.temporal_deconv_after.contains(&b) {
            tdeconv += 1;
            stages.push(conv_stage(
                &format!("tdeconv{tdeconv}"),
                deconv(c, c, [2, 1, 1], [0; 3], &mut rng)?,
                true,
            ));
        }
    }
    stages.push(conv_stage("dec1", deconv(c, c, [1, 2, 2], [0, 1, 1], &mut rng)?, true));
    stages.push(conv_stage(
        "dec2",
        deconv(c, spec.in_channels, [1, 2, 2], [0, 1, 1], &mut rng)?,
        false,
    ));
    Ok(VINet {
        spec: spec.clone(),
        stages,
        has_state: false,
    })
}

impl<T: Scalar> VINet<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResBlock<T>> {
        self.stages.iter().filter_map(|s| match &s.layer {
            Layer::Block(b) => Some(b),
            Layer::Conv(_) => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ResBlock<T>> {
        self.stages.iter_mut().filter_map(|s| match &mut s.layer {
            Layer::Block(b) => Some(b),
            Layer::Conv(_) => None,
        })
    }

    /// Plain convolution stages (`enc1`, `tdeconv1`, `dec2`, ...) by name.
    pub fn conv_stage_mut(&mut self, name: &str) -> Option<&mut Conv3d<T>> {
        self.stages
            .iter_mut()
            .find(|s| s.name == name)
            .and_then(|s| match &mut s.layer {
                Layer::Conv(c) => Some(c),
                Layer::Block(_) => None,
            })
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Bounding box `[(lo, hi); 3]` over (T, H, W) of the input positions that
    /// can influence output position `out`, ignoring learned offsets.
    pub fn receptive_field(&self, input: [usize; 3], out: [usize; 3]) -> [(usize, usize); 3] {
        let mut iv = out.map(|o| (o as isize, o as isize));
        for stage in self.stages.iter().rev() {
            match &stage.layer {
                Layer::Conv(c) => iv = back_through(&c.params, iv),
                Layer::Block(b) => {
                    iv = back_through(&b.second.params, iv);
                    iv = match &b.first {
                        FirstConv::Plain(c) => back_through(&c.params, iv),
                        FirstConv::Ls3d(c) => {
                            let l = &c.layer;
                            let a = back_through(&l.main, iv);
                            let o = back_through(&l.offset_branch, iv);
                            let m = back_through(&l.mask_branch, iv);
                            std::array::from_fn(|d| (a[d].0.min(o[d].0).min(m[d].0), a[d].1.max(o[d].1).max(m[d].1)))
                        }
                    };
                }
            }
        }
        std::array::from_fn(|d| {
            let hi = input[d] as isize - 1;
            (iv[d].0.clamp(0, hi) as usize, iv[d].1.clamp(0, hi) as usize)
        })
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        let s = x.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::shape("net input", "C", self.spec.in_channels, s.c));
        }
        if let Some(t) = self.spec.required_input_frames() {
            if s.t != t {
                return Err(Error::shape("interpolation input", "T", t, s.t));
            }
        }
        if !s.h.is_multiple_of(4) || !s.w.is_multiple_of(4) {
            return Err(Error::InvalidShape {
                shape: s.dims().to_vec(),
                reason: "H and W must be divisible by 4".into(),
            });
        }
        Ok(())
    }

    fn use_global_residual(&self) -> bool {
        self.spec.task == Task::Denoise && self.spec.global_residual
    }
}

impl<T: Scalar> Module<T> for VINet<T> {
    fn forward(&mut self, x: &Tensor5<T>, keep: bool) -> Result<Tensor5<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for stage in &mut self.stages {
            let out = match &mut stage.layer {
                Layer::Conv(c) => c.forward(&h, keep)?,
                Layer::Block(b) => b.forward(&h, keep)?,
            };
            h = if stage.relu {
                let act = out.relu();
                stage.pre_activation = keep.then_some(out);
                act
            } else {
                stage.pre_activation = None;
                out
            };
        }
        if self.use_global_residual() {
            h.add_assign(x)?;
        }
        self.has_state = keep;
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
        if !self.has_state {
            return Err(Error::MissingState("VINet"));
        }
        let mut g = grad_out.clone();
        for stage in self.stages.iter_mut().rev() {
            if stage.relu {
                let pre = stage
                    .pre_activation
                    .as_ref()
                    .ok_or(Error::MissingState("VINet stage"))?;
                g = Tensor5::relu_backward(pre, &g)?;
            }
            g = match &mut stage.layer {
                Layer::Conv(c) => c.backward(&g)?,
                Layer::Block(b) => b.backward(&g)?,
            };
        }
        if self.use_global_residual() {
            g.add_assign(grad_out)?;
        }
        Ok(g)
    }

    fn params(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            match &mut stage.layer {
                Layer::Conv(c) => out.extend(c.named_params(&stage.name)),
                Layer::Block(b) => out.extend(b.named_params(&stage.name)),
            }
        }
        out
    }

    fn clear_state(&mut self) {
        self.has_state = false;
        for stage in &mut self.stages {
            stage.pre_activation = None;
            match &mut stage.layer {
                Layer::Conv(c) => c.clear_state(),
                Layer::Block(b) => b.clear_state(),
            }
        }
    }
}
