//! Learnable-sampling 3D convolution.
//!
//! Every kernel tap `(tau, pn)` of output location `(t, p)` reads frame
//! `t + tau` at the fractional point `p + pn + offset`, bilinearly
//! interpolated, scales it by an importance mask in `[0, 1]` and fuses the
//! samples with an ordinary 3D kernel:
//!
//! ```text
//! y_t(p) = sum_tau sum_n  m[t,p,k] * w_tau(pn) * x_{t+tau}(p + pn + dp[t,p,k]) + b
//! ```
//!
//! Offsets and masks are predicted from the layer input by two plain 3D
//! convolution branches and are shared by all output channels. Offsets are
//! spatial only; the temporal tap positions are fixed.

use rand::Rng;

use crate::conv::{self, Conv3dParams};
use crate::error::{Error, Result};
use crate::module::{Module, ParamMut};
use crate::scalar::Scalar;
use crate::tensor::{Shape5, Tensor5};

/// Per-location, per-tap 2D offsets. Channel `2k` holds the row offset and
/// `2k + 1` the column offset of tap `k` (see [`crate::TapIndex`]).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T>(Tensor5<T>);

/// Per-location, per-tap importance scalars in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskField<T>(Tensor5<T>);

impl<T: Scalar> OffsetField<T> {
    pub fn new(values: Tensor5<T>) -> Result<Self> {
        if !values.shape().c.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                shape: values.shape().dims().to_vec(),
                reason: "offset channel count must be even (row, col per tap)".into(),
            });
        }
        values.ensure_finite("offset field")?;
        Ok(OffsetField(values))
    }

    /// Every tap of every location displaced by `(d_row, d_col)`.
    pub fn constant(shape: Shape5, taps: usize, d_row: T, d_col: T) -> Result<Self> {
        let shape = Shape5::new(shape.n, 2 * taps, shape.t, shape.h, shape.w)?;
        Self::new(Tensor5::from_fn(
            shape,
            |[_, c, ..]| if c % 2 == 0 { d_row } else { d_col },
        ))
    }

    pub fn taps(&self) -> usize {
        self.0.shape().c / 2
    }

    pub fn tensor(&self) -> &Tensor5<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor5<T> {
        self.0
    }
}

impl<T: Scalar> MaskField<T> {
    pub fn new(values: Tensor5<T>) -> Result<Self> {
        if let Some(i) = values.data().iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::OutOfRange {
                what: "mask value",
                detail: format!("{} at {:?}", values.data()[i], values.shape().unravel(i)),
            });
        }
        Ok(MaskField(values))
    }

    pub fn constant(shape: Shape5, taps: usize, value: T) -> Result<Self> {
        let shape = Shape5::new(shape.n, taps, shape.t, shape.h, shape.w)?;
        Self::new(Tensor5::filled(shape, value))
    }

    pub fn tensor(&self) -> &Tensor5<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor5<T> {
        self.0
    }
}

/// A borrowed (H, W) frame.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a, T> {
    pub data: &'a [T],
    pub height: usize,
    pub width: usize,
}

impl<'a, T: Scalar> Frame<'a, T> {
    pub fn new(data: &'a [T], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Frame", "H*W", height * width, data.len()));
        }
        Ok(Frame { data, height, width })
    }
}

/// The four integral neighbours of a fractional point, with zero padding
/// outside the frame. Corner order: (r0,c0), (r0,c1), (r1,c0), (r1,c1).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corners<T> {
    pub idx: [usize; 4],
    pub valid: [bool; 4],
    pub frac_row: T,
    pub frac_col: T,
}

impl<T: Scalar> Corners<T> {
    fn outside() -> Self {
        Corners {
            idx: [0; 4],
            valid: [false; 4],
            frac_row: T::zero(),
            frac_col: T::zero(),
        }
    }

    /// `base` is added to every in-frame index (frame offset in a volume).
    #[inline]
    pub fn locate(row: T, col: T, height: usize, width: usize, base: usize) -> Self {
        let r0 = row.floor();
        let c0 = col.floor();
        let (rf, cf) = (r0.as_f64(), c0.as_f64());
        if !(rf >= -1.0 && rf < height as f64 && cf >= -1.0 && cf < width as f64) {
            return Self::outside();
        }
        let (r0i, c0i) = (rf as isize, cf as isize);
        let mut idx = [0; 4];
        let mut valid = [false; 4];
        for (i, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (r, c) = (r0i + dr, c0i + dc);
            if r >= 0 && r < height as isize && c >= 0 && c < width as isize {
                valid[i] = true;
                idx[i] = base + r as usize * width + c as usize;
            }
        }
        Corners {
            idx,
            valid,
            frac_row: row - r0,
            frac_col: col - c0,
        }
    }

    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let (ly, lx) = (self.frac_row, self.frac_col);
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        [hy * hx, hy * lx, ly * hx, ly * lx]
    }

    #[inline]
    pub fn values(&self, data: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for i in 0..4 {
            if self.valid[i] {
                v[i] = data[self.idx[i]];
            }
        }
        v
    }

    #[inline]
    pub fn sample(&self, data: &[T]) -> T {
        let v = self.values(data);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    /// Derivative of the interpolated value w.r.t. (row, col). At integral
    /// coordinates this is the right-sided derivative.
    #[inline]
    pub fn point_grad(&self, v: [T; 4]) -> (T, T) {
        let (ly, lx) = (self.frac_row, self.frac_col);
        let d_row = (T::one() - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
        let d_col = (T::one() - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
        (d_row, d_col)
    }

    #[inline]
    pub fn scatter(&self, upstream: T, data: &mut [T]) {
        let w = self.weights();
        for i in 0..4 {
            if self.valid[i] {
                data[self.idx[i]] += upstream * w[i];
            }
        }
    }
}

/// Bilinear interpolation of `frame` at a fractional `(row, col)`; points
/// outside the frame read zeros.
pub fn bilinear_sample<T: Scalar>(frame: Frame<'_, T>, row: T, col: T) -> T {
    Corners::locate(row, col, frame.height, frame.width, 0).sample(frame.data)
}

/// Contributions of one bilinear sample to the frame and point gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrad<T> {
    /// `(row, col, d_value)` for each in-frame neighbour.
    pub cells: Vec<(usize, usize, T)>,
    pub d_row: T,
    pub d_col: T,
}

pub fn bilinear_backward<T: Scalar>(frame: Frame<'_, T>, row: T, col: T, upstream: T) -> BilinearGrad<T> {
    let corners = Corners::locate(row, col, frame.height, frame.width, 0);
    let weights = corners.weights();
    let cells = (0..4)
        .filter(|&i| corners.valid[i])
        .map(|i| {
            let idx = corners.idx[i];
            (idx / frame.width, idx % frame.width, upstream * weights[i])
        })
        .collect();
    let (d_row, d_col) = corners.point_grad(corners.values(frame.data));
    BilinearGrad {
        cells,
        d_row: upstream * d_row,
        d_col: upstream * d_col,
    }
}

/// Tap geometry of the main kernel: `(tau, row, col)` offsets of tap `k`.
fn tap_offsets(kernel: [usize; 3]) -> Vec<(isize, isize, isize)> {
    let half = kernel.map(|k| (k / 2) as isize);
    let mut taps = Vec::with_capacity(kernel.iter().product());
    for dt in 0..kernel[0] as isize {
        for dh in 0..kernel[1] as isize {
            for dw in 0..kernel[2] as isize {
                taps.push((dt - half[0], dh - half[1], dw - half[2]));
            }
        }
    }
    taps
}

fn validate_main<T: Scalar>(main: &Conv3dParams<T>) -> Result<()> {
    main.validate()?;
    let k = main.kernel();
    let same =
        k.iter().all(|&k| k % 2 == 1) && !main.transposed && main.stride == [1; 3] && main.padding == k.map(|k| k / 2);
    if !same {
        return Err(Error::Config(format!(
            "learnable-sampling kernel must be odd, stride 1, same padding (kernel {k:?}, stride {:?}, padding {:?})",
            main.stride, main.padding
        )));
    }
    Ok(())
}

fn check_field_shape(field: Shape5, x: Shape5, channels: usize, what: &'static str) -> Result<()> {
    let pairs = [
        ("N", x.n, field.n),
        ("C", channels, field.c),
        ("T", x.t, field.t),
        ("H", x.h, field.h),
        ("W", x.w, field.w),
    ];
    for (dim, expected, actual) in pairs {
        if expected != actual {
            return Err(Error::shape(what, dim, expected, actual));
        }
    }
    Ok(())
}

/// Sampling positions of every (tap, output location) of batch item `n`.
fn build_plan<T: Scalar>(
    offsets: &Tensor5<T>,
    n: usize,
    taps: &[(isize, isize, isize)],
    xs: Shape5,
) -> Vec<Corners<T>> {
    let (t_len, h_len, w_len) = (xs.t, xs.h, xs.w);
    let l = xs.volume();
    let mut plan = Vec::with_capacity(taps.len() * l);
    for (k, &(tau, pr, pc)) in taps.iter().enumerate() {
        let d_row = offsets.volume(n, 2 * k);
        let d_col = offsets.volume(n, 2 * k + 1);
        for t in 0..t_len {
            let frame = t as isize + tau;
            let in_time = frame >= 0 && frame < t_len as isize;
            for h in 0..h_len {
                for w in 0..w_len {
                    let o = (t * h_len + h) * w_len + w;
                    if !in_time {
                        plan.push(Corners::outside());
                        continue;
                    }
                    let row = T::from_f64((h as isize + pr) as f64) + d_row[o];
                    let col = T::from_f64((w as isize + pc) as f64) + d_col[o];
                    plan.push(Corners::locate(row, col, h_len, w_len, frame as usize * h_len * w_len));
                }
            }
        }
    }
    plan
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Ls3dState<T> {
    x: Tensor5<T>,
    main: Conv3dParams<T>,
    offsets: Tensor5<T>,
    masks: Option<MaskField<T>>,
    plans: Vec<Vec<Corners<T>>>,
    /// Unmasked samples per batch item, laid out `(C_in * K, L)`.
    samples: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Ls3dGrads<T> {
    pub input: Tensor5<T>,
    pub weight: Tensor5<T>,
    pub bias: Vec<T>,
    pub offsets: Tensor5<T>,
    /// `None` when the forward ran without masks.
    pub masks: Option<Tensor5<T>>,
}

/// Forward pass. `masks = None` is the unmodulated form (every importance
/// scalar exactly 1).
pub fn ls3d_forward<T: Scalar>(
    x: &Tensor5<T>,
    main: &Conv3dParams<T>,
    offsets: &OffsetField<T>,
    masks: Option<&MaskField<T>>,
) -> Result<Tensor5<T>> {
    ls3d_forward_saved(x, main, offsets, masks).map(|(y, _)| y)
}

pub fn ls3d_forward_saved<T: Scalar>(
    x: &Tensor5<T>,
    main: &Conv3dParams<T>,
    offsets: &OffsetField<T>,
    masks: Option<&MaskField<T>>,
) -> Result<(Tensor5<T>, Ls3dState<T>)> {
    validate_main(main)?;
    let xs = x.shape();
    let ys = main.output_shape(xs)?;
    let taps = tap_offsets(main.kernel());
    let k = taps.len();
    check_field_shape(offsets.tensor().shape(), xs, 2 * k, "offset field")?;
    offsets.tensor().ensure_finite("offset field")?;
    if let Some(m) = masks {
        check_field_shape(m.tensor().shape(), xs, k, "mask field")?;
    }
    let (ci, co, l) = (xs.c, ys.c, xs.volume());
    let mut y = Tensor5::zeros(ys);
    let mut plans = Vec::with_capacity(xs.n);
    let mut samples = Vec::with_capacity(xs.n);
    let mut cols = vec![T::zero(); ci * k * l];
    for n in 0..xs.n {
        let plan = build_plan(offsets.tensor(), n, &taps, xs);
        let mut vals = vec![T::zero(); ci * k * l];
        for c in 0..ci {
            let vol = x.volume(n, c);
            let block = &mut vals[c * k * l..(c + 1) * k * l];
            for (v, corners) in block.iter_mut().zip(&plan) {
                *v = corners.sample(vol);
            }
        }
        let fused: &[T] = match masks {
            Some(m) => {
                let mvals = m.tensor().item(n);
                for c in 0..ci {
                    let dst = &mut cols[c * k * l..(c + 1) * k * l];
                    let src = &vals[c * k * l..(c + 1) * k * l];
                    for ((d, &v), &mv) in dst.iter_mut().zip(src).zip(mvals) {
                        *d = v * mv;
                    }
                }
                &cols
            }
            None => &vals,
        };
        T::gemm(
            co,
            ci * k,
            l,
            T::one(),
            main.weight.data(),
            (ci * k) as isize,
            1,
            fused,
            l as isize,
            1,
            T::zero(),
            y.item_mut(n),
            l as isize,
            1,
        );
        plans.push(plan);
        samples.push(vals);
    }
    for n in 0..ys.n {
        for (c, &b) in main.bias.iter().enumerate() {
            y.volume_mut(n, c).iter_mut().for_each(|v| *v += b);
        }
    }
    let state = Ls3dState {
        x: x.clone(),
        main: main.clone(),
        offsets: offsets.tensor().clone(),
        masks: masks.cloned(),
        plans,
        samples,
    };
    Ok((y, state))
}

/// Exact reverse-mode gradients of [`ls3d_forward`].
pub fn ls3d_backward<T: Scalar>(state: &Ls3dState<T>, grad_y: &Tensor5<T>) -> Result<Ls3dGrads<T>> {
    let xs = state.x.shape();
    let ys = state.main.output_shape(xs)?;
    grad_y.check_same_shape(&Tensor5::zeros(ys), "ls3d_backward grad")?;
    let k = state.main.kernel_volume();
    let (ci, co, l) = (xs.c, ys.c, xs.volume());
    let mut gx = Tensor5::zeros(xs);
    let mut gw = Tensor5::zeros(state.main.weight.shape());
    let mut goff = Tensor5::zeros(Shape5::new(xs.n, 2 * k, xs.t, xs.h, xs.w)?);
    let mut gmask = state.masks.as_ref().map(|_| Tensor5::zeros(Shape5 { c: k, ..xs }));
    let mut gcols = vec![T::zero(); ci * k * l];
    let mut cols = vec![T::zero(); ci * k * l];
    for n in 0..xs.n {
        let gy = grad_y.item(n);
        let plan = &state.plans[n];
        let vals = &state.samples[n];
        let ones;
        let mvals: &[T] = match &state.masks {
            Some(m) => m.tensor().item(n),
            None => {
                ones = vec![T::one(); k * l];
                &ones
            }
        };
        // d/d(samples) = W^T * gy, then weight gradient from masked samples.
        T::gemm(
            ci * k,
            co,
            l,
            T::one(),
            state.main.weight.data(),
            1,
            (ci * k) as isize,
            gy,
            l as isize,
            1,
            T::zero(),
            &mut gcols,
            l as isize,
            1,
        );
        for c in 0..ci {
            let dst = &mut cols[c * k * l..(c + 1) * k * l];
            for ((d, &v), &mv) in dst.iter_mut().zip(&vals[c * k * l..(c + 1) * k * l]).zip(mvals) {
                *d = v * mv;
            }
        }
        T::gemm(
            co,
            l,
            ci * k,
            T::one(),
            gy,
            l as isize,
            1,
            &cols,
            1,
            l as isize,
            T::one(),
            gw.data_mut(),
            (ci * k) as isize,
            1,
        );

        let goff_n = goff.item_mut(n);
        let mut gm_n = vec![T::zero(); k * l];
        for c in 0..ci {
            let vol = state.x.volume(n, c);
            let gblock = &gcols[c * k * l..(c + 1) * k * l];
            let vblock = &vals[c * k * l..(c + 1) * k * l];
            let gx_vol = gx.volume_mut(n, c);
            for kk in 0..k {
                for o in 0..l {
                    let j = kk * l + o;
                    let g = gblock[j];
                    if g == T::zero() {
                        continue;
                    }
                    let corners = &plan[j];
                    if !corners.valid.iter().any(|&v| v) {
                        continue;
                    }
                    gm_n[j] += g * vblock[j];
                    let gm = g * mvals[j];
                    let (dr, dc) = corners.point_grad(corners.values(vol));
                    goff_n[2 * kk * l + o] += gm * dr;
                    goff_n[(2 * kk + 1) * l + o] += gm * dc;
                    corners.scatter(gm, gx_vol);
                }
            }
        }
        if let Some(gmask) = gmask.as_mut() {
            gmask.item_mut(n).copy_from_slice(&gm_n);
        }
    }
    let bias = (0..co)
        .map(|c| (0..xs.n).map(|n| grad_y.volume(n, c).iter().copied().sum::<T>()).sum())
        .collect();
    Ok(Ls3dGrads {
        input: gx,
        weight: gw,
        bias,
        offsets: goff,
        masks: gmask,
    })
}

/// Parameters of one learnable-sampling layer: the fusing kernel plus the
/// offset and mask predictor branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Ls3dLayer<T> {
    pub main: Conv3dParams<T>,
    pub offset_branch: Conv3dParams<T>,
    pub mask_branch: Conv3dParams<T>,
}

impl<T: Scalar> Ls3dLayer<T> {
    /// 3x3x3 main kernel with `uniform(±1/sqrt(fan_in))` weights; branches
    /// use a cubic `branch_kernel` and start at zero (offsets 0, masks 0.5).
    pub fn new(in_channels: usize, out_channels: usize, branch_kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_kernel(in_channels, out_channels, [3; 3], branch_kernel, rng)
    }

    pub fn with_kernel(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        branch_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if branch_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("branch kernel must be odd, got {branch_kernel}")));
        }
        let mut main = Conv3dParams::zeros(in_channels, out_channels, kernel, [1; 3], kernel.map(|k| k / 2))?;
        main.init_uniform(rng);
        validate_main(&main)?;
        let taps = main.kernel_volume();
        let bk = [branch_kernel; 3];
        let bp = [branch_kernel / 2; 3];
        Ok(Ls3dLayer {
            main,
            offset_branch: Conv3dParams::zeros(in_channels, 2 * taps, bk, [1; 3], bp)?,
            mask_branch: Conv3dParams::zeros(in_channels, taps, bk, [1; 3], bp)?,
        })
    }

    pub fn taps(&self) -> usize {
        self.main.kernel_volume()
    }

    pub fn zeros_like(&self) -> Self {
        Ls3dLayer {
            main: self.main.zeros_like(),
            offset_branch: self.offset_branch.zeros_like(),
            mask_branch: self.mask_branch.zeros_like(),
        }
    }

    /// Adds `delta` to every predicted offset (row and column) through the
    /// offset branch bias.
    pub fn shift_offsets(&mut self, delta: T) {
        self.offset_branch.bias.iter_mut().for_each(|b| *b += delta);
    }

    /// Injects a constant `(d_row, d_col)` offset: zero branch weights and a
    /// matching bias.
    pub fn set_constant_offsets(&mut self, d_row: T, d_col: T) {
        self.offset_branch
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = T::zero());
        for (c, b) in self.offset_branch.bias.iter_mut().enumerate() {
            *b = if c % 2 == 0 { d_row } else { d_col };
        }
    }

    fn validate(&self) -> Result<()> {
        validate_main(&self.main)?;
        let taps = self.taps();
        if self.offset_branch.out_channels() != 2 * taps {
            return Err(Error::shape(
                "offset branch",
                "C_out",
                2 * taps,
                self.offset_branch.out_channels(),
            ));
        }
        if self.mask_branch.out_channels() != taps {
            return Err(Error::shape(
                "mask branch",
                "C_out",
                taps,
                self.mask_branch.out_channels(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Offsets are the raw offset-branch output; masks are the sigmoid of the
/// mask-branch output.
pub fn predict_offsets_masks<T: Scalar>(
    x: &Tensor5<T>,
    layer: &Ls3dLayer<T>,
) -> Result<(OffsetField<T>, MaskField<T>)> {
    layer.validate()?;
    let offsets = OffsetField::new(conv::conv3d(x, &layer.offset_branch)?)?;
    let masks = MaskField::new(conv::conv3d(x, &layer.mask_branch)?.map(sigmoid))?;
    Ok((offsets, masks))
}

#[derive(Debug, Clone)]
struct Ls3dConvState<T> {
    x: Tensor5<T>,
    masks: Tensor5<T>,
    inner: Ls3dState<T>,
}

/// Trainable learnable-sampling layer (main kernel and both branches).
#[derive(Debug, Clone)]
pub struct Ls3dConv<T> {
    pub layer: Ls3dLayer<T>,
    pub grad: Ls3dLayer<T>,
    state: Option<Ls3dConvState<T>>,
}

impl<T: Scalar> Ls3dConv<T> {
    pub fn new(layer: Ls3dLayer<T>) -> Self {
        let grad = layer.zeros_like();
        Ls3dConv {
            layer,
            grad,
            state: None,
        }
    }

    /// Offsets and masks used by the last stateful forward.
    pub fn last_fields(&self) -> Option<(&Tensor5<T>, &Tensor5<T>)> {
        self.state.as_ref().map(|s| (&s.inner.offsets, &s.masks))
    }

    pub(crate) fn named_params(&mut self, prefix: &str) -> Vec<ParamMut<'_, T>> {
        let Ls3dLayer {
            main,
            offset_branch,
            mask_branch,
        } = &mut self.layer;
        let g = &mut self.grad;
        let mut out = Vec::with_capacity(6);
        out.extend(main.named_params(&mut g.main, &format!("{prefix}.main")));
        out.extend(offset_branch.named_params(&mut g.offset_branch, &format!("{prefix}.offset")));
        out.extend(mask_branch.named_params(&mut g.mask_branch, &format!("{prefix}.mask")));
        out
    }
}

impl<T: Scalar> Module<T> for Ls3dConv<T> {
    fn forward(&mut self, x: &Tensor5<T>, keep_state: bool) -> Result<Tensor5<T>> {
        let (offsets, masks) = predict_offsets_masks(x, &self.layer)?;
        let (y, inner) = ls3d_forward_saved(x, &self.layer.main, &offsets, Some(&masks))?;
        self.state = keep_state.then(|| Ls3dConvState {
            x: x.clone(),
            masks: masks.into_tensor(),
            inner,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
        let state = self.state.as_ref().ok_or(Error::MissingState("Ls3dConv"))?;
        let g = ls3d_backward(&state.inner, grad_out)?;
        let gm = g.masks.ok_or(Error::MissingState("Ls3dConv masks"))?;
        let mut g_pre = gm;
        for (gp, &m) in g_pre.data_mut().iter_mut().zip(state.masks.data()) {
            *gp *= m * (T::one() - m);
        }
        let off = conv::conv3d_backward(&state.x, &self.layer.offset_branch, &g.offsets)?;
        let mask = conv::conv3d_backward(&state.x, &self.layer.mask_branch, &g_pre)?;
        let mut gx = g.input;
        gx.add_assign(&off.input)?;
        gx.add_assign(&mask.input)?;
        self.grad.main.weight = g.weight;
        self.grad.main.bias = g.bias;
        self.grad.offset_branch.weight = off.weight;
        self.grad.offset_branch.bias = off.bias;
        self.grad.mask_branch.weight = mask.weight;
        self.grad.mask_branch.bias = mask.bias;
        Ok(gx)
    }

    fn params(&mut self) -> Vec<ParamMut<'_, T>> {
        self.named_params("ls3d")
    }

    fn clear_state(&mut self) {
        self.state = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv3d_backward, conv3d_ref};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FRAME: [f64; 4] = [0.0, 1.0, 2.0, 3.0];

    fn frame() -> Frame<'static, f64> {
        Frame::new(&FRAME, 2, 2).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        assert_eq!(bilinear_sample(frame(), 0.5, 0.5), 1.5);
        assert_eq!(bilinear_sample(frame(), 0.0, 1.0), 1.0);
        assert_eq!(bilinear_sample(frame(), 0.25, 0.0), 0.5);
        assert_eq!(bilinear_sample(frame(), -5.0, -5.0), 0.0);
        assert_eq!(bilinear_sample(frame(), 1e30, 0.0), 0.0);
        // half a pixel outside the top edge reads half of row 0
        assert_eq!(bilinear_sample(frame(), -0.5, 1.0), 0.5);
    }

    #[test]
    fn bilinear_backward_examples() {
        let g = bilinear_backward(frame(), 0.5, 0.5, 1.0);
        assert_eq!(g.cells.len(), 4);
        assert!(g.cells.iter().all(|&(_, _, v)| v == 0.25));
        assert_eq!((g.d_row, g.d_col), (2.0, 1.0));

        let far = bilinear_backward(frame(), -5.0, -5.0, 1.0);
        assert!(far.cells.is_empty());
        assert_eq!((far.d_row, far.d_col), (0.0, 0.0));
    }

    #[test]
    fn integer_point_uses_right_sided_derivative() {
        let g = bilinear_backward(frame(), 0.0, 0.0, 1.0);
        assert_eq!((g.d_row, g.d_col), (2.0, 1.0));
    }

    fn random_main(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Conv3dParams<f64> {
        let mut p = Conv3dParams::zeros(ci, co, [3; 3], [1; 3], [1; 3]).unwrap();
        p.init_uniform(rng);
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        p
    }

    #[test]
    fn zero_offsets_reduce_to_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor5::<f64>::uniform(Shape5::new(2, 2, 3, 5, 4).unwrap(), 1.0, &mut rng);
        let main = random_main(2, 3, &mut rng);
        let off = OffsetField::constant(x.shape(), 27, 0.0, 0.0).unwrap();
        let ones = MaskField::constant(x.shape(), 27, 1.0).unwrap();
        let y = ls3d_forward(&x, &main, &off, Some(&ones)).unwrap();
        let y_plain = ls3d_forward(&x, &main, &off, None).unwrap();
        assert_eq!(y, y_plain);
        let r = conv3d_ref(&x, &main).unwrap();
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn half_masks_halve_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor5::<f64>::uniform(Shape5::new(1, 2, 2, 4, 4).unwrap(), 1.0, &mut rng);
        let mut main = random_main(2, 2, &mut rng);
        main.bias.fill(0.0);
        let off = OffsetField::constant(x.shape(), 27, 0.0, 0.0).unwrap();
        let half = MaskField::constant(x.shape(), 27, 0.5).unwrap();
        let y = ls3d_forward(&x, &main, &off, Some(&half)).unwrap();
        let r = conv3d_ref(&x, &main).unwrap();
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_translation_with_unit_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor5::<f64>::uniform(Shape5::new(1, 1, 2, 4, 7).unwrap(), 1.0, &mut rng);
        let mut main = Conv3dParams::zeros(1, 1, [1; 3], [1; 3], [0; 3]).unwrap();
        main.weight.data_mut()[0] = 1.0;
        let off = OffsetField::constant(x.shape(), 1, 0.0, 3.0).unwrap();
        let y = ls3d_forward(&x, &main, &off, None).unwrap();
        for t in 0..2 {
            for h in 0..4 {
                for w in 0..7 {
                    let expected = if w + 3 < 7 { x.get(0, 0, t, h, w + 3) } else { 0.0 };
                    assert_eq!(y.get(0, 0, t, h, w), expected);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_fields() {
        let x = Tensor5::<f64>::zeros(Shape5::new(1, 1, 2, 4, 4).unwrap());
        let main = Conv3dParams::zeros(1, 1, [3; 3], [1; 3], [1; 3]).unwrap();
        let off = OffsetField::constant(x.shape(), 9, 0.0, 0.0).unwrap();
        let err = ls3d_forward(&x, &main, &off, None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Shape {
                    dim: "C",
                    expected: 54,
                    actual: 18,
                    ..
                }
            ),
            "{err}"
        );

        let mut bad = OffsetField::constant(x.shape(), 27, 0.0, 0.0).unwrap().into_tensor();
        bad.data_mut()[5] = f64::NAN;
        assert!(OffsetField::new(bad).is_err());

        let over = Tensor5::filled(Shape5::new(1, 27, 2, 4, 4).unwrap(), 1.5);
        assert!(MaskField::new(over).is_err());

        let strided = Conv3dParams::<f64>::zeros(1, 1, [3; 3], [1, 2, 2], [1; 3]).unwrap();
        let off = OffsetField::constant(x.shape(), 27, 0.0, 0.0).unwrap();
        assert!(ls3d_forward(&x, &strided, &off, None).is_err());
    }

    #[test]
    fn backward_matches_plain_conv_at_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor5::<f64>::uniform(Shape5::new(2, 2, 3, 4, 5).unwrap(), 1.0, &mut rng);
        let main = random_main(2, 3, &mut rng);
        let off = OffsetField::constant(x.shape(), 27, 0.0, 0.0).unwrap();
        let ones = MaskField::constant(x.shape(), 27, 1.0).unwrap();
        let (y, state) = ls3d_forward_saved(&x, &main, &off, Some(&ones)).unwrap();
        let gy = Tensor5::uniform(y.shape(), 1.0, &mut rng);
        let g = ls3d_backward(&state, &gy).unwrap();
        let r = conv3d_backward(&x, &main, &gy).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(a, b)| (a - b).abs() <= 1e-10 * b.abs().max(1.0));
        assert!(close(g.input.data(), r.input.data()));
        assert!(close(g.weight.data(), r.weight.data()));
        assert!(close(&g.bias, &r.bias));
    }

    #[test]
    fn mask_gradient_sign() {
        // single channel, unit centre weight, positive input and upstream
        let x = Tensor5::<f64>::filled(Shape5::new(1, 1, 1, 3, 3).unwrap(), 2.0);
        let mut main = Conv3dParams::zeros(1, 1, [3; 3], [1; 3], [1; 3]).unwrap();
        main.weight.set(0, 0, 1, 1, 1, 1.0);
        let off = OffsetField::constant(x.shape(), 27, 0.25, 0.25).unwrap();
        let masks = MaskField::constant(x.shape(), 27, 0.5).unwrap();
        let (y, state) = ls3d_forward_saved(&x, &main, &off, Some(&masks)).unwrap();
        let g = ls3d_backward(&state, &Tensor5::filled(y.shape(), 1.0)).unwrap();
        let gm = g.masks.unwrap();
        assert!(gm.get(0, 13, 0, 1, 1) > 0.0);
    }

    #[test]
    fn zero_branches_predict_zero_offsets_and_half_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = Ls3dLayer::<f64>::new(3, 4, 3, &mut rng).unwrap();
        let x = Tensor5::uniform(Shape5::new(1, 3, 2, 5, 5).unwrap(), 1.0, &mut rng);
        let (off, m) = predict_offsets_masks(&x, &layer).unwrap();
        assert_eq!(off.tensor().shape().c, 54);
        assert_eq!(m.tensor().shape().c, 27);
        assert!(off.tensor().data().iter().all(|&v| v == 0.0));
        assert!(m.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn backward_without_state_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = Ls3dConv::new(Ls3dLayer::<f64>::new(1, 1, 3, &mut rng).unwrap());
        let gy = Tensor5::zeros(Shape5::new(1, 1, 2, 3, 3).unwrap());
        assert!(matches!(layer.backward(&gy), Err(Error::MissingState(_))));
    }
}
