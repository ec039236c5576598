//! 3D convolution and transposed convolution.
//!
//! Two routes are provided for each operator:
//!
//! * `conv3d_ref` / `conv3d_transpose_ref`: direct nested loops. These are the
//!   correctness oracles and are never used on the training path.
//! * `conv3d` / `conv3d_transpose` and their backward passes: gathered
//!   ("im2col") columns multiplied by the weight matrix with a GEMM.
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding.
//! Weights are `(C_out, C_in, K_t, K_h, K_w)` for a plain convolution and
//! `(C_in, C_out, K_t, K_h, K_w)` for a transposed one, so the same weight
//! tensor serves a convolution and its adjoint.

use rand::Rng;

use crate::error::{Error, Result};
use crate::module::{Module, ParamMut};
use crate::scalar::Scalar;
use crate::tensor::{Shape5, Tensor5};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dParams<T> {
    pub weight: Tensor5<T>,
    pub bias: Vec<T>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub transposed: bool,
    pub output_padding: [usize; 3],
}

impl<T: Scalar> Conv3dParams<T> {
    /// Zero-initialised plain convolution.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let weight = Tensor5::zeros(Shape5::new(out_channels, in_channels, kernel[0], kernel[1], kernel[2])?);
        let p = Conv3dParams {
            weight,
            bias: vec![T::zero(); out_channels],
            stride,
            padding,
            transposed: false,
            output_padding: [0; 3],
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-initialised transposed convolution.
    pub fn zeros_transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<Self> {
        let weight = Tensor5::zeros(Shape5::new(in_channels, out_channels, kernel[0], kernel[1], kernel[2])?);
        let p = Conv3dParams {
            weight,
            bias: vec![T::zero(); out_channels],
            stride,
            padding,
            transposed: true,
            output_padding,
        };
        p.validate()?;
        Ok(p)
    }

    /// Fills the weight with `uniform(±1/sqrt(fan_in))` and zeroes the bias.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        self.weight = Tensor5::uniform(self.weight.shape(), bound, rng);
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.kernel_volume()
    }

    /// Same geometry, all-zero values. Used as the gradient container.
    pub fn zeros_like(&self) -> Self {
        Conv3dParams {
            weight: Tensor5::zeros(self.weight.shape()),
            bias: vec![T::zero(); self.bias.len()],
            ..self.clone()
        }
    }

    pub fn in_channels(&self) -> usize {
        let s = self.weight.shape();
        if self.transposed {
            s.n
        } else {
            s.c
        }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.weight.shape();
        if self.transposed {
            s.c
        } else {
            s.n
        }
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s.t, s.h, s.w]
    }

    pub fn kernel_volume(&self) -> usize {
        self.weight.shape().volume()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias.len() != self.out_channels() {
            return Err(Error::shape(
                "Conv3dParams",
                "bias",
                self.out_channels(),
                self.bias.len(),
            ));
        }
        for axis in 0..3 {
            if self.stride[axis] == 0 {
                return Err(Error::Config("convolution stride must be at least 1".into()));
            }
            if self.transposed && self.output_padding[axis] >= self.stride[axis] {
                return Err(Error::Config(format!(
                    "output_padding {:?} must be smaller than stride {:?}",
                    self.output_padding, self.stride
                )));
            }
        }
        if !self.transposed && self.output_padding != [0; 3] {
            return Err(Error::Config(
                "output_padding only applies to transposed convolution".into(),
            ));
        }
        Ok(())
    }

    /// Output shape for an input of `input` shape.
    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        if input.c != self.in_channels() {
            return Err(Error::shape("conv3d", "C", self.in_channels(), input.c));
        }
        let k = self.kernel();
        let dims = [input.t, input.h, input.w];
        let names = ["T", "H", "W"];
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let (len, s, p) = (dims[axis], self.stride[axis], self.padding[axis]);
            out[axis] = if self.transposed {
                let full = (len - 1) * s + k[axis] + self.output_padding[axis];
                if full <= 2 * p {
                    return Err(Error::InvalidShape {
                        shape: input.dims().to_vec(),
                        reason: format!("transposed convolution collapses axis {}", names[axis]),
                    });
                }
                full - 2 * p
            } else {
                if len + 2 * p < k[axis] {
                    return Err(Error::InvalidShape {
                        shape: input.dims().to_vec(),
                        reason: format!("axis {} smaller than the kernel", names[axis]),
                    });
                }
                (len + 2 * p - k[axis]) / s + 1
            };
        }
        Shape5::new(input.n, self.out_channels(), out[0], out[1], out[2])
    }

    fn expect_transposed(&self, transposed: bool, context: &'static str) -> Result<()> {
        if self.transposed != transposed {
            return Err(Error::Config(format!(
                "{context} called with transposed = {}",
                self.transposed
            )));
        }
        self.validate()
    }

    pub(crate) fn named_params<'a>(&'a mut self, grad: &'a mut Self, prefix: &str) -> [ParamMut<'a, T>; 2] {
        let dims = self.weight.shape().dims().to_vec();
        let bias_len = self.bias.len();
        [
            ParamMut {
                name: format!("{prefix}.weight"),
                dims,
                value: self.weight.data_mut(),
                grad: grad.weight.data_mut(),
            },
            ParamMut {
                name: format!("{prefix}.bias"),
                dims: vec![bias_len],
                value: &mut self.bias,
                grad: &mut grad.bias,
            },
        ]
    }
}

/// Direct cross-correlation by nested loops. The oracle for every other
/// convolution path in the crate.
pub fn conv3d_ref<T: Scalar>(x: &Tensor5<T>, params: &Conv3dParams<T>) -> Result<Tensor5<T>> {
    params.expect_transposed(false, "conv3d_ref")?;
    let xs = x.shape();
    let ys = params.output_shape(xs)?;
    let [kt, kh, kw] = params.kernel();
    let [st, sh, sw] = params.stride;
    let [pt, ph, pw] = params.padding.map(|p| p as isize);
    let w = &params.weight;
    let mut y = Tensor5::zeros(ys);
    for n in 0..ys.n {
        for co in 0..ys.c {
            for ot in 0..ys.t {
                for oh in 0..ys.h {
                    for ow in 0..ys.w {
                        let mut acc = params.bias[co];
                        for ci in 0..xs.c {
                            for dt in 0..kt {
                                let it = (ot * st + dt) as isize - pt;
                                if it < 0 || it >= xs.t as isize {
                                    continue;
                                }
                                for dh in 0..kh {
                                    let ih = (oh * sh + dh) as isize - ph;
                                    if ih < 0 || ih >= xs.h as isize {
                                        continue;
                                    }
                                    for dw in 0..kw {
                                        let iw = (ow * sw + dw) as isize - pw;
                                        if iw < 0 || iw >= xs.w as isize {
                                            continue;
                                        }
                                        acc += w.get(co, ci, dt, dh, dw)
                                            * x.get(n, ci, it as usize, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        y.set(n, co, ot, oh, ow, acc);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Direct transposed convolution: every input element scatters its
/// weighted kernel footprint into the output.
pub fn conv3d_transpose_ref<T: Scalar>(x: &Tensor5<T>, params: &Conv3dParams<T>) -> Result<Tensor5<T>> {
    params.expect_transposed(true, "conv3d_transpose_ref")?;
    let xs = x.shape();
    let ys = params.output_shape(xs)?;
    let [kt, kh, kw] = params.kernel();
    let [st, sh, sw] = params.stride;
    let [pt, ph, pw] = params.padding.map(|p| p as isize);
    let w = &params.weight;
    let mut y = Tensor5::zeros(ys);
    for n in 0..ys.n {
        for co in 0..ys.c {
            for t in 0..ys.t {
                for h in 0..ys.h {
                    for wi in 0..ys.w {
                        y.set(n, co, t, h, wi, params.bias[co]);
                    }
                }
            }
        }
        for ci in 0..xs.c {
            for it in 0..xs.t {
                for ih in 0..xs.h {
                    for iw in 0..xs.w {
                        let v = x.get(n, ci, it, ih, iw);
                        for co in 0..ys.c {
                            for dt in 0..kt {
                                let ot = (it * st + dt) as isize - pt;
                                if ot < 0 || ot >= ys.t as isize {
                                    continue;
                                }
                                for dh in 0..kh {
                                    let oh = (ih * sh + dh) as isize - ph;
                                    if oh < 0 || oh >= ys.h as isize {
                                        continue;
                                    }
                                    for dw in 0..kw {
                                        let ow = (iw * sw + dw) as isize - pw;
                                        if ow < 0 || ow >= ys.w as isize {
                                            continue;
                                        }
                                        let (ot, oh, ow) = (ot as usize, oh as usize, ow as usize);
                                        let cur = y.get(n, co, ot, oh, ow);
                                        y.set(n, co, ot, oh, ow, cur + v * w.get(ci, co, dt, dh, dw));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Sliding-window geometry of a plain convolution from `input` extents to
/// `output` extents. Transposed convolutions use the geometry of the
/// convolution they are the adjoint of.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Range of output indices `o` for which `o * stride + k - pad` lands in
/// `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let s = stride as isize;
    let lo = (-off + s - 1).div_euclid(s).max(0);
    let hi = ((len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl Geometry {
    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (row, output-row-segment, input-row-segment) triple of
    /// the column matrix for one channel. `f(col_start, src_start, len, step)`
    /// copies `len` elements; source advances by `step` per column.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [it, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let mut row = 0;
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(dt, pt, st, it, ot);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(dh, ph, sh, ih, oh);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(dw, pw, sw, iw, ow);
                    if w_lo < w_hi {
                        for t in t_lo..t_hi {
                            let src_t = t * st + dt - pt;
                            for h in h_lo..h_hi {
                                let src_h = h * sh + dh - ph;
                                let col = (t * oh + h) * ow + w_lo;
                                let src = (src_t * ih + src_h) * iw + w_lo * sw + dw - pw;
                                f(row, col, src, w_hi - w_lo, sw);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Gathers `channels` input volumes into a `(channels*K, L_out)` matrix.
    pub fn im2col<T: Scalar>(&self, src: &[T], channels: usize, cols: &mut [T]) {
        let vin = self.in_volume();
        let l = self.out_volume();
        let k = self.kernel_volume();
        debug_assert_eq!(src.len(), channels * vin);
        debug_assert_eq!(cols.len(), channels * k * l);
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..channels {
            let plane = &src[c * vin..(c + 1) * vin];
            let block = &mut cols[c * k * l..(c + 1) * k * l];
            self.for_each_segment(|row, col, s, len, step| {
                let dst = &mut block[row * l + col..row * l + col + len];
                if step == 1 {
                    dst.copy_from_slice(&plane[s..s + len]);
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = plane[s + i * step];
                    }
                }
            });
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters-and-adds columns into `dst`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], channels: usize, dst: &mut [T]) {
        let vin = self.in_volume();
        let l = self.out_volume();
        let k = self.kernel_volume();
        debug_assert_eq!(dst.len(), channels * vin);
        debug_assert_eq!(cols.len(), channels * k * l);
        for c in 0..channels {
            let plane = &mut dst[c * vin..(c + 1) * vin];
            let block = &cols[c * k * l..(c + 1) * k * l];
            self.for_each_segment(|row, col, s, len, step| {
                let src = &block[row * l + col..row * l + col + len];
                if step == 1 {
                    for (d, &v) in plane[s..s + len].iter_mut().zip(src) {
                        *d += v;
                    }
                } else {
                    for (i, &v) in src.iter().enumerate() {
                        plane[s + i * step] += v;
                    }
                }
            });
        }
    }
}

fn geometry_for<T: Scalar>(params: &Conv3dParams<T>, conv_in: Shape5, conv_out: Shape5) -> Geometry {
    Geometry {
        input: [conv_in.t, conv_in.h, conv_in.w],
        output: [conv_out.t, conv_out.h, conv_out.w],
        kernel: params.kernel(),
        stride: params.stride,
        padding: params.padding,
    }
}

/// `y_n = W * cols_n`, `W` viewed as `(rows, inner)` row-major.
fn weight_times<T: Scalar>(w: &[T], rows: usize, inner: usize, cols: &[T], l: usize, out: &mut [T], beta: T) {
    T::gemm(
        rows,
        inner,
        l,
        T::one(),
        w,
        inner as isize,
        1,
        cols,
        l as isize,
        1,
        beta,
        out,
        l as isize,
        1,
    );
}

/// `out = W^T * g`, `W` stored as `(rows, inner)` row-major, `g` as `(rows, l)`.
fn weight_t_times<T: Scalar>(w: &[T], rows: usize, inner: usize, g: &[T], l: usize, out: &mut [T]) {
    T::gemm(
        inner,
        rows,
        l,
        T::one(),
        w,
        1,
        inner as isize,
        g,
        l as isize,
        1,
        T::zero(),
        out,
        l as isize,
        1,
    );
}

/// `acc += a * b^T`, `a` as `(m, l)` and `b` as `(p, l)`.
fn accumulate_outer<T: Scalar>(a: &[T], m: usize, b: &[T], p: usize, l: usize, acc: &mut [T]) {
    T::gemm(
        m,
        l,
        p,
        T::one(),
        a,
        l as isize,
        1,
        b,
        1,
        l as isize,
        T::one(),
        acc,
        p as isize,
        1,
    );
}

fn add_bias<T: Scalar>(y: &mut Tensor5<T>, bias: &[T]) {
    let s = y.shape();
    for n in 0..s.n {
        for (c, &b) in bias.iter().enumerate() {
            if b != T::zero() {
                y.volume_mut(n, c).iter_mut().for_each(|v| *v += b);
            }
        }
    }
}

fn bias_grad<T: Scalar>(gy: &Tensor5<T>) -> Vec<T> {
    let s = gy.shape();
    (0..s.c)
        .map(|c| (0..s.n).map(|n| gy.volume(n, c).iter().copied().sum::<T>()).sum())
        .collect()
}

/// Gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor5<T>,
    pub weight: Tensor5<T>,
    pub bias: Vec<T>,
}

/// Fast plain convolution (gathered columns + GEMM).
pub fn conv3d<T: Scalar>(x: &Tensor5<T>, params: &Conv3dParams<T>) -> Result<Tensor5<T>> {
    params.expect_transposed(false, "conv3d")?;
    let xs = x.shape();
    let ys = params.output_shape(xs)?;
    let g = geometry_for(params, xs, ys);
    let (ci, co, k, l) = (xs.c, ys.c, g.kernel_volume(), g.out_volume());
    let mut cols = vec![T::zero(); ci * k * l];
    let mut y = Tensor5::zeros(ys);
    for n in 0..xs.n {
        g.im2col(x.item(n), ci, &mut cols);
        weight_times(params.weight.data(), co, ci * k, &cols, l, y.item_mut(n), T::zero());
    }
    add_bias(&mut y, &params.bias);
    Ok(y)
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    params: &Conv3dParams<T>,
    grad_y: &Tensor5<T>,
) -> Result<ConvGrads<T>> {
    params.expect_transposed(false, "conv3d_backward")?;
    let xs = x.shape();
    let ys = params.output_shape(xs)?;
    grad_y.check_same_shape(&Tensor5::zeros(ys), "conv3d_backward grad")?;
    let g = geometry_for(params, xs, ys);
    let (ci, co, k, l) = (xs.c, ys.c, g.kernel_volume(), g.out_volume());
    let mut cols = vec![T::zero(); ci * k * l];
    let mut gcols = vec![T::zero(); ci * k * l];
    let mut gx = Tensor5::zeros(xs);
    let mut gw = Tensor5::zeros(params.weight.shape());
    for n in 0..xs.n {
        let gy = grad_y.item(n);
        weight_t_times(params.weight.data(), co, ci * k, gy, l, &mut gcols);
        g.col2im(&gcols, ci, gx.item_mut(n));
        g.im2col(x.item(n), ci, &mut cols);
        accumulate_outer(gy, co, &cols, ci * k, l, gw.data_mut());
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: bias_grad(grad_y),
    })
}

/// Fast transposed convolution: the adjoint of [`conv3d`] plus bias.
pub fn conv3d_transpose<T: Scalar>(x: &Tensor5<T>, params: &Conv3dParams<T>) -> Result<Tensor5<T>> {
    params.expect_transposed(true, "conv3d_transpose")?;
    let xs = x.shape();
    let ys = params.output_shape(xs)?;
    let g = geometry_for(params, ys, xs);
    let (ci, co, k, l) = (xs.c, ys.c, g.kernel_volume(), g.out_volume());
    let mut cols = vec![T::zero(); co * k * l];
    let mut y = Tensor5::zeros(ys);
    for n in 0..xs.n {
        weight_t_times(params.weight.data(), ci, co * k, x.item(n), l, &mut cols);
        g.col2im(&cols, co, y.item_mut(n));
    }
    add_bias(&mut y, &params.bias);
    Ok(y)
}

pub fn conv3d_transpose_backward<T: Scalar>(
    x: &Tensor5<T>,
    params: &Conv3dParams<T>,
    grad_y: &Tensor5<T>,
) -> Result<ConvGrads<T>> {
    params.expect_transposed(true, "conv3d_transpose_backward")?;
    let xs = x.shape();
    let ys = params.output_shape(xs)?;
    grad_y.check_same_shape(&Tensor5::zeros(ys), "conv3d_transpose_backward grad")?;
    let g = geometry_for(params, ys, xs);
    let (ci, co, k, l) = (xs.c, ys.c, g.kernel_volume(), g.out_volume());
    let mut gcols = vec![T::zero(); co * k * l];
    let mut gx = Tensor5::zeros(xs);
    let mut gw = Tensor5::zeros(params.weight.shape());
    for n in 0..xs.n {
        g.im2col(grad_y.item(n), co, &mut gcols);
        weight_times(params.weight.data(), ci, co * k, &gcols, l, gx.item_mut(n), T::zero());
        accumulate_outer(x.item(n), ci, &gcols, co * k, l, gw.data_mut());
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: bias_grad(grad_y),
    })
}

/// Dispatches on `params.transposed` to the fast forward path.
pub fn forward<T: Scalar>(x: &Tensor5<T>, params: &Conv3dParams<T>) -> Result<Tensor5<T>> {
    if params.transposed {
        conv3d_transpose(x, params)
    } else {
        conv3d(x, params)
    }
}

pub fn backward<T: Scalar>(x: &Tensor5<T>, params: &Conv3dParams<T>, grad_y: &Tensor5<T>) -> Result<ConvGrads<T>> {
    if params.transposed {
        conv3d_transpose_backward(x, params, grad_y)
    } else {
        conv3d_backward(x, params, grad_y)
    }
}

/// Trainable (possibly transposed) convolution layer.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub params: Conv3dParams<T>,
    pub grad: Conv3dParams<T>,
    input: Option<Tensor5<T>>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(params: Conv3dParams<T>) -> Self {
        let grad = params.zeros_like();
        Conv3d {
            params,
            grad,
            input: None,
        }
    }

    pub(crate) fn named_params(&mut self, prefix: &str) -> [ParamMut<'_, T>; 2] {
        self.params.named_params(&mut self.grad, prefix)
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn forward(&mut self, x: &Tensor5<T>, keep_state: bool) -> Result<Tensor5<T>> {
        let y = forward(x, &self.params)?;
        self.input = keep_state.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
        let x = self.input.as_ref().ok_or(Error::MissingState("Conv3d"))?;
        let g = backward(x, &self.params, grad_out)?;
        self.grad.weight = g.weight;
        self.grad.bias = g.bias;
        Ok(g.input)
    }

    fn params(&mut self) -> Vec<ParamMut<'_, T>> {
        self.named_params("conv").into()
    }

    fn clear_state(&mut self) {
        self.input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(n, c, t, h, w).unwrap()
    }

    #[test]
    fn hand_computed_row() {
        let x = Tensor5::from_vec(shape(1, 1, 1, 1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut p = Conv3dParams::zeros(1, 1, [1, 1, 3], [1, 1, 1], [0, 0, 1]).unwrap();
        p.weight.data_mut().fill(1.0);
        assert_eq!(conv3d_ref(&x, &p).unwrap().data(), &[3.0, 6.0, 5.0]);
        assert_eq!(conv3d(&x, &p).unwrap().data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor5::<f64>::uniform(shape(1, 2, 3, 5, 4), 1.0, &mut rng);
        let p = Conv3dParams::zeros(2, 3, [3, 3, 3], [1, 2, 2], [1, 1, 1]).unwrap();
        let y = conv3d_ref(&x, &p).unwrap();
        assert_eq!(y.shape(), shape(1, 3, 3, 3, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor5::<f64>::uniform(shape(2, 1, 2, 4, 3), 1.0, &mut rng);
        let mut p = Conv3dParams::zeros(1, 1, [1, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
        p.weight.data_mut()[0] = 1.0;
        assert_eq!(conv3d_ref(&x, &p).unwrap(), x);
        assert_eq!(conv3d(&x, &p).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor5::<f64>::zeros(shape(1, 2, 3, 3, 3));
        let p = Conv3dParams::zeros(3, 1, [3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap();
        let err = conv3d_ref(&x, &p).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Shape {
                    dim: "C",
                    expected: 3,
                    actual: 2,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn transposed_time_arithmetic() {
        let p = Conv3dParams::<f64>::zeros_transposed(1, 1, [3, 1, 1], [2, 1, 1], [1, 0, 0], [0; 3]).unwrap();
        let x = Tensor5::zeros(shape(1, 1, 2, 4, 4));
        let y = conv3d_transpose_ref(&x, &p).unwrap();
        assert_eq!(y.shape().t, 3);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(conv3d_transpose_ref(&y, &p).unwrap().shape().t, 5);
    }

    #[test]
    fn output_padding_must_be_below_stride() {
        assert!(Conv3dParams::<f32>::zeros_transposed(1, 1, [3; 3], [1, 2, 2], [1; 3], [0, 2, 1]).is_err());
        assert!(Conv3dParams::<f32>::zeros_transposed(1, 1, [3; 3], [1, 2, 2], [1; 3], [0, 1, 1]).is_ok());
    }

    #[test]
    fn wrong_direction_rejected() {
        let p = Conv3dParams::<f64>::zeros(1, 1, [3; 3], [1; 3], [1; 3]).unwrap();
        let x = Tensor5::zeros(shape(1, 1, 3, 3, 3));
        assert!(conv3d_transpose_ref(&x, &p).is_err());
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for k in 0..3 {
            for pad in 0..3 {
                for stride in 1..4 {
                    for len in 1..7 {
                        for out_len in 1..7 {
                            let (lo, hi) = valid_range(k, pad, stride, len, out_len);
                            for o in 0..out_len {
                                let i = (o * stride + k) as isize - pad as isize;
                                let inside = i >= 0 && i < len as isize;
                                assert_eq!(inside, o >= lo && o < hi, "k{k} p{pad} s{stride} len{len} o{o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
