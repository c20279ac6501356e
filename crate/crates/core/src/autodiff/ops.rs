//! Forward operations. Each records its inputs for the adjoint pass.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Real, Tensor};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    /// Tanh-approximated Gaussian error linear unit.
    Gelu,
    Sigmoid,
    Softplus,
    Abs,
    Square,
    Exp,
    Clamp(T, T),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Unary<T> {
    pub(crate) fn apply(self, x: T) -> T {
        match self {
            Unary::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let half = T::lit(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub(crate) fn derivative(self, x: T, y: T) -> T {
        match self {
            Unary::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Abs => x.signum() * if x == T::zero() { T::zero() } else { T::one() },
            Unary::Square => x + x,
            Unary::Exp => y,
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            op,
            "shape",
            format!("{:?}", tape.shape(a)),
            format!("{:?}", tape.shape(b)),
        ));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_binary<T: Real>(op: &'static str, target: &[T]) -> Result<()> {
    if let Some(v) = target.iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Domain {
            op,
            msg: format!("target must be 0 or 1, found {v}"),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// `x[l, ...] * w[0, ...]` where `w` has a leading extent of 1.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != xs.len() || ws[0] != 1 || ws[1..] != xs[1..] {
            return Err(Error::dim(
                "mul_broadcast",
                "trailing axes",
                format!("[1, {:?}]", &xs[1..]),
                format!("{ws:?}"),
            ));
        }
        let wv = self.value(w).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(wv.len())
            .flat_map(|row| row.iter().zip(&wv).map(|(&a, &b)| a * b))
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        Ok(self.push(v, Op::MulBroadcast(x, w), &[x, w]))
    }

    pub fn unary(&mut self, a: Var, f: Unary<T>) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Unary(a, f), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            &[r, c] => (r, c),
            s => return Err(Error::dim("transpose", "rank", 2, s.len())),
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", "axis", format!("< {}", base.len()), axis));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", "non-concat axes", format!("{base:?}"), format!("{s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis}"),
                format!("range within {shape:?}"),
                format!("{start}..{}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    /// 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw("conv2d")?;
        let (c_out, wc, kh, kw) = match self.shape(w) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::dim("conv2d", "weight rank", 4, s.len())),
        };
        if wc != c_in {
            return Err(Error::dim("conv2d", "input channels (axis 1 of weight)", c_in, wc));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh {
            return Err(Error::dim("conv2d", "height (axis 1)", format!(">= {}", kh - 2 * pad), h));
        }
        if wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", "width (axis 2)", format!(">= {}", kw - 2 * pad), wd));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dim("conv2d", "bias", c_out, format!("{:?}", self.shape(b))));
            }
        }
        let g = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
        };
        let mut out = vec![T::zero(); c_out * g.out_h() * g.out_w()];
        kernels::conv2d(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let v = Tensor::new(&[c_out, g.out_h(), g.out_w()], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Per-channel convolution with a `[C,1,k,k]` filter bank.
    /// `pad` must equal `(k-1)/2` so the spatial size is preserved.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw("depthwise_conv2d")?;
        let (wc, one, k, k2) = match self.shape(w) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::dim("depthwise_conv2d", "weight rank", 4, s.len())),
        };
        if k % 2 == 0 || k != k2 {
            return Err(Error::Config(format!(
                "depthwise kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if wc != c || one != 1 {
            return Err(Error::dim("depthwise_conv2d", "weight axes 0..2", format!("[{c}, 1]"), format!("[{wc}, {one}]")));
        }
        if pad != (k - 1) / 2 {
            return Err(Error::Config(format!(
                "depthwise padding must be {} for kernel {k}, got {pad}",
                (k - 1) / 2
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::dim("depthwise_conv2d", "bias", c, format!("{:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); c * h * wd];
        kernels::depthwise(
            c,
            h,
            wd,
            k,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let v = Tensor::new(&[c, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Depthwise { x, w, b }, &inputs))
    }

    /// Per-pixel channel mixing with a `[C_out,C_in,1,1]` weight.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match self.shape(w) {
            &[_, _, 1, 1] => self.conv2d(x, w, b, 1, 0),
            s => Err(Error::dim("pointwise_conv2d", "kernel extent", "1x1", format!("{s:?}"))),
        }
    }

    /// Matrix product of rank-2 tensors, optionally transposing either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let dims = |s: &[usize], t: bool| match *s {
            [r, c] => Ok(if t { (c, r) } else { (r, c) }),
            _ => Err(Error::dim("matmul", "rank", 2, s.len())),
        };
        let (m, k) = dims(self.shape(a), ta)?;
        let (k2, n) = dims(self.shape(b), tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", "inner dimension", k, k2));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// Affine map `x[N,C_in] · w[C_in,C_out] + b[C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let cols = self.shape(y)[1];
                if self.shape(b) != [cols] {
                    return Err(Error::dim("linear", "bias", cols, format!("{:?}", self.shape(b))));
                }
                let bv = self.value(b).data().to_vec();
                let mut v = self.value(y).clone();
                for row in v.data_mut().chunks_mut(cols) {
                    row.iter_mut().zip(&bv).for_each(|(o, &bb)| *o += bb);
                }
                Ok(self.push(v, Op::BiasRows(y, b), &[y, b]))
            }
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", "axis", format!("< {}", shape.len()), axis));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * n * inner];
        kernels::softmax(outer, n, inner, self.value(x).data(), &mut out);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        for (name, p) in [("gain", gain), ("shift", shift)] {
            if self.shape(p) != [c] {
                return Err(Error::dim("layer_norm", name, c, format!("{:?}", self.shape(p))));
            }
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::layer_norm(
            self.value(x).data(),
            c,
            self.value(gain).data(),
            self.value(shift).data(),
            eps,
            &mut out,
        );
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, shift, eps }, &[x, gain, shift]))
    }

    /// Align-corners-false bilinear resize of `[C,H,W]` by an integer factor.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = self.value(x).chw("bilinear_upsample")?;
        let mut out = vec![T::zero(); c * h * w * factor * factor];
        kernels::upsample(c, h, w, factor, self.value(x).data(), &mut out);
        let v = Tensor::new(&[c, h * factor, w * factor], out)?;
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    /// Unbiased per-element variance across equally shaped samples.
    pub fn sample_variance(&mut self, samples: &[Var]) -> Result<Var> {
        if samples.len() < 2 {
            return Err(Error::Config(format!(
                "variance needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        for s in &samples[1..] {
            same_shape(self, "sample_variance", samples[0], *s)?;
        }
        let t = T::from_usize(samples.len()).unwrap();
        let n = self.value(samples[0]).numel();
        // Deviations are taken from the first sample, so identical samples
        // give exactly zero rather than rounding residue from the mean.
        let first = self.value(samples[0]).data().to_vec();
        let mut mean = vec![T::zero(); n];
        for s in samples {
            for ((m, &v), &f) in mean.iter_mut().zip(self.value(*s).data()).zip(&first) {
                *m += v - f;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t);
        let mut var = vec![T::zero(); n];
        for s in samples {
            for (((acc, &v), &m), &f) in var.iter_mut().zip(self.value(*s).data()).zip(&mean).zip(&first) {
                let d = v - f - m;
                *acc += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= t - T::one());
        let v = Tensor::new(self.shape(samples[0]), var)?;
        Ok(self.push(v, Op::SampleVariance(samples.to_vec()), samples))
    }

    /// Affine rescale to `[0,1]` by the tensor's own extremes. A flat input
    /// maps to all zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.data();
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in d.iter().enumerate() {
            if v < d[argmin] {
                argmin = i;
            }
            if v > d[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (d[argmin], d[argmax]);
        let v = if hi > lo {
            xv.map(|v| (v - lo) / (hi - lo))
        } else {
            Tensor::zeros(xv.shape())
        };
        self.push(v, Op::MinMax { x, argmin, argmax }, &[x])
    }

    /// Mean binary cross-entropy on logits, in the stable
    /// `max(x,0) - x*y + log(1 + exp(-|x|))` form. Masked-out positions are
    /// excluded from both the sum and the count.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim("bce_with_logits", "shape", format!("{:?}", self.shape(x)), format!("{:?}", target.shape())));
        }
        check_binary("bce_with_logits", target.data())?;
        let (sum, count) = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
            .fold((T::zero(), 0usize), |(s, c), (_, (&l, &y))| {
                (s + l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p(), c + 1)
            });
        let loss = if count == 0 { T::zero() } else { sum / T::from_usize(count).unwrap() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                target: target.data().to_vec(),
                mask: mask.map(<[bool]>::to_vec),
            },
            &[x],
        ))
    }

    /// Mean binary cross-entropy on probabilities clamped to `[eps, 1-eps]`.
    pub fn bce_prob(&mut self, p: Var, target: &Tensor<T>, mask: Option<&[bool]>, eps: T) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::dim("bce_prob", "shape", format!("{:?}", self.shape(p)), format!("{:?}", target.shape())));
        }
        check_binary("bce_prob", target.data())?;
        let hi = T::one() - eps;
        let (sum, count) = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
            .fold((T::zero(), 0usize), |(s, c), (_, (&pv, &y))| {
                let q = pv.max(eps).min(hi);
                (s - (y * q.ln() + (T::one() - y) * (T::one() - q).ln()), c + 1)
            });
        let loss = if count == 0 { T::zero() } else { sum / T::from_usize(count).unwrap() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceProb {
                p,
                target: target.data().to_vec(),
                mask: mask.map(<[bool]>::to_vec),
                eps,
            },
            &[p],
        ))
    }

    /// Soft dice loss on sigmoid probabilities of `x`.
    pub fn dice_with_logits(&mut self, x: Var, target: &Tensor<T>, smooth: T) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim("dice", "shape", format!("{:?}", self.shape(x)), format!("{:?}", target.shape())));
        }
        let (mut inter, mut psum, mut ysum) = (T::zero(), T::zero(), T::zero());
        for (&l, &y) in self.value(x).data().iter().zip(target.data()) {
            let p = sigmoid(l);
            inter += p * y;
            psum += p;
            ysum += y;
        }
        let two = T::lit(2.0);
        let loss = T::one() - (two * inter + smooth) / (psum + ysum + smooth);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                x,
                target: target.data().to_vec(),
                smooth,
            },
            &[x],
        ))
    }

    /// Mean over positions of `KL(N(mu, sigma^2) || N(0, 1))`.
    pub fn kl_standard_normal(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        same_shape(self, "kl_standard_normal", mu, sigma)?;
        if let Some(s) = self.value(sigma).data().iter().find(|&&s| s <= T::zero()) {
            return Err(Error::Domain {
                op: "kl_standard_normal",
                msg: format!("sigma must be positive, found {s}"),
            });
        }
        let half = T::lit(0.5);
        let n = T::from_usize(self.value(mu).numel()).unwrap();
        let total: T = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(sigma).data())
            .map(|(&m, &s)| half * (m * m + s * s - T::one() - (s * s).ln()))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::KlStdNormal { mu, sigma },
            &[mu, sigma],
        ))
    }
}
