//! Adjoint rules, one arm per [`Op`].

use super::ops::sigmoid;
use super::{Op, Tape, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Real};

type Adjoints<T> = Vec<Option<Vec<T>>>;

/// Mutable adjoint buffer for `v`, or `None` when `v` needs no gradient.
fn slot<'a, T: Real>(tape: &Tape<T>, adj: &'a mut Adjoints<T>, v: Var) -> Option<&'a mut [T]> {
    if !tape.nodes[v.0].requires_grad {
        return None;
    }
    let n = tape.nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

fn accumulate<T: Real>(tape: &Tape<T>, adj: &mut Adjoints<T>, v: Var, g: impl Iterator<Item = T>) {
    if let Some(dst) = slot(tape, adj, v) {
        dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
    }
}

/// Disjoint mutable slots for several distinct inputs of one node.
fn slots<'a, T: Real, const N: usize>(
    tape: &Tape<T>,
    adj: &'a mut Adjoints<T>,
    vars: [Option<Var>; N],
) -> [Option<&'a mut [T]>; N] {
    for v in vars.iter().flatten() {
        slot(tape, adj, *v);
    }
    let mut out: [Option<&'a mut [T]>; N] = std::array::from_fn(|_| None);
    let mut rest: &'a mut [Option<Vec<T>>] = adj.as_mut_slice();
    let mut offset = 0;
    let mut order: Vec<(usize, usize)> = vars
        .iter()
        .enumerate()
        .filter_map(|(k, v)| v.map(|v| (v.0, k)))
        .collect();
    order.sort_unstable();
    for (idx, k) in order {
        let (_, tail) = std::mem::take(&mut rest).split_at_mut(idx - offset);
        let (head, tail) = tail.split_at_mut(1);
        out[k] = head[0].as_mut().map(Vec::as_mut_slice);
        rest = tail;
        offset = idx + 1;
    }
    out
}

pub(super) fn propagate<T: Real>(tape: &Tape<T>, i: usize, g: &[T], adj: &mut Adjoints<T>) {
    let node = &tape.nodes[i];
    let val = |v: Var| tape.nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(tape, adj, *a, g.iter().copied());
            accumulate(tape, adj, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate(tape, adj, *a, g.iter().copied());
            accumulate(tape, adj, *b, g.iter().map(|&x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(tape, adj, *a, g.iter().zip(bv).map(|(&x, &y)| x * y));
            accumulate(tape, adj, *b, g.iter().zip(av).map(|(&x, &y)| x * y));
        }
        Op::Scale(a, c) => accumulate(tape, adj, *a, g.iter().map(|&x| x * *c)),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(tape, adj, *a, g.iter().copied()),
        Op::MulBroadcast(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let r = wv.len();
            accumulate(tape, adj, *x, g.iter().enumerate().map(|(k, &gv)| gv * wv[k % r]));
            if let Some(dw) = slot(tape, adj, *w) {
                for (gr, xr) in g.chunks(r).zip(xv.chunks(r)) {
                    for j in 0..r {
                        dw[j] += gr[j] * xr[j];
                    }
                }
            }
        }
        Op::Unary(a, f) => {
            let (xv, yv) = (val(*a), node.value.data());
            accumulate(
                tape,
                adj,
                *a,
                g.iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gv, (&x, &y))| gv * f.derivative(x, y)),
            );
        }
        Op::Sum(a) => accumulate(tape, adj, *a, std::iter::repeat(g[0])),
        Op::Mean(a) => {
            let n = T::from_usize(tape.nodes[a.0].value.numel()).unwrap();
            accumulate(tape, adj, *a, std::iter::repeat(g[0] / n));
        }
        Op::Transpose(a) => {
            let s = tape.nodes[a.0].value.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(d) = slot(tape, adj, *a) {
                for p in 0..r {
                    for q in 0..c {
                        d[p * c + q] += g[q * r + p];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let block = tape.nodes[p.0].value.shape()[*axis] * inner;
                if let Some(d) = slot(tape, adj, *p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + block];
                        d[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                offset += block;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = tape.nodes[x.0].value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let n = in_shape[*axis];
            let len = node.value.shape()[*axis];
            if let Some(d) = slot(tape, adj, *x) {
                for o in 0..outer {
                    let dst = &mut d[(o * n + start) * inner..][..len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = tape.nodes[x.0].value.shape();
            let ws = tape.nodes[w.0].value.shape();
            let geom = ConvGeom {
                c_in: xs[0],
                h: xs[1],
                w: xs[2],
                c_out: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride: *stride,
                pad: *pad,
            };
            let [dx, dw, db] = slots(tape, adj, [Some(*x), Some(*w), *b]);
            kernels::conv2d_backward(&geom, val(*x), val(*w), g, dx, dw, db);
        }
        Op::Depthwise { x, w, b } => {
            let xs = tape.nodes[x.0].value.shape();
            let k = tape.nodes[w.0].value.shape()[2];
            let (c, h, wd) = (xs[0], xs[1], xs[2]);
            let [dx, dw, db] = slots(tape, adj, [Some(*x), Some(*w), *b]);
            kernels::depthwise_backward(c, h, wd, k, val(*x), val(*w), g, dx, dw, db);
        }
        Op::MatMul { a, b, ta, tb } => {
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let sa = tape.nodes[a.0].value.shape();
            let k = if *ta { sa[0] } else { sa[1] };
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(tape, adj, *a) {
                match ta {
                    false => gemm(m, n, k, g, false, bv, !tb, da, true),
                    true => gemm(k, n, m, bv, *tb, g, true, da, true),
                }
            }
            if let Some(db) = slot(tape, adj, *b) {
                match tb {
                    false => gemm(k, m, n, av, !ta, g, false, db, true),
                    true => gemm(n, m, k, g, true, av, *ta, db, true),
                }
            }
        }
        Op::BiasRows(y, b) => {
            accumulate(tape, adj, *y, g.iter().copied());
            if let Some(db) = slot(tape, adj, *b) {
                let c = db.len();
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            if let Some(dx) = slot(tape, adj, *x) {
                kernels::softmax_backward(outer, s[*axis], inner, node.value.data(), g, dx);
            }
        }
        Op::LayerNorm { x, gain, shift, eps } => {
            let c = *node.value.shape().last().unwrap();
            let [dx, dg, ds] = slots(tape, adj, [Some(*x), Some(*gain), Some(*shift)]);
            kernels::layer_norm_backward(val(*x), c, val(*gain), *eps, g, dx, dg, ds);
        }
        Op::Upsample { x, factor } => {
            let s = tape.nodes[x.0].value.shape();
            if let Some(dx) = slot(tape, adj, *x) {
                kernels::upsample_backward(s[0], s[1], s[2], *factor, g, dx);
            }
        }
        Op::SampleVariance(samples) => {
            let t = T::from_usize(samples.len()).unwrap();
            let n = node.value.numel();
            let mut mean = vec![T::zero(); n];
            for s in samples {
                mean.iter_mut().zip(val(*s)).for_each(|(m, &v)| *m += v / t);
            }
            let two = T::lit(2.0) / (t - T::one());
            for s in samples {
                let sv = val(*s);
                accumulate(
                    tape,
                    adj,
                    *s,
                    g.iter()
                        .zip(sv.iter().zip(&mean))
                        .map(|(&gv, (&v, &m))| gv * two * (v - m)),
                );
            }
        }
        Op::MinMax { x, argmin, argmax } => {
            let xv = val(*x);
            let (lo, hi) = (xv[*argmin], xv[*argmax]);
            if hi > lo {
                let d = hi - lo;
                let u = node.value.data();
                let to_min: T = g.iter().zip(u).map(|(&gv, &uv)| gv * (uv - T::one())).sum();
                let to_max: T = g.iter().zip(u).map(|(&gv, &uv)| -gv * uv).sum();
                if let Some(dx) = slot(tape, adj, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, &gv)| *a += gv / d);
                    dx[*argmin] += to_min / d;
                    dx[*argmax] += to_max / d;
                }
            }
        }
        Op::BceLogits { x, target, mask } => {
            let count = mask
                .as_ref()
                .map_or(target.len(), |m| m.iter().filter(|&&b| b).count());
            if count > 0 {
                let scale = g[0] / T::from_usize(count).unwrap();
                let xv = val(*x);
                accumulate(
                    tape,
                    adj,
                    *x,
                    (0..xv.len()).map(|k| {
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            scale * (sigmoid(xv[k]) - target[k])
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
        }
        Op::BceProb { p, target, mask, eps } => {
            let count = mask
                .as_ref()
                .map_or(target.len(), |m| m.iter().filter(|&&b| b).count());
            if count > 0 {
                let scale = g[0] / T::from_usize(count).unwrap();
                let pv = val(*p);
                let hi = T::one() - *eps;
                accumulate(
                    tape,
                    adj,
                    *p,
                    (0..pv.len()).map(|k| {
                        let q = pv[k];
                        if mask.as_ref().is_none_or(|m| m[k]) && q > *eps && q < hi {
                            let y = target[k];
                            scale * (-y / q + (T::one() - y) / (T::one() - q))
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
        }
        Op::Dice { x, target, smooth } => {
            let xv = val(*x);
            let probs: Vec<T> = xv.iter().map(|&l| sigmoid(l)).collect();
            let inter: T = probs.iter().zip(target).map(|(&p, &y)| p * y).sum();
            let denom = probs.iter().copied().sum::<T>() + target.iter().copied().sum::<T>() + *smooth;
            let numer = T::lit(2.0) * inter + *smooth;
            let two = T::lit(2.0);
            accumulate(
                tape,
                adj,
                *x,
                probs.iter().zip(target).map(|(&p, &y)| {
                    let dl_dp = -(two * y * denom - numer) / (denom * denom);
                    g[0] * dl_dp * p * (T::one() - p)
                }),
            );
        }
        Op::KlStdNormal { mu, sigma } => {
            let n = T::from_usize(node_numel(tape, *mu)).unwrap();
            let scale = g[0] / n;
            let (mv, sv) = (val(*mu), val(*sigma));
            accumulate(tape, adj, *mu, mv.iter().map(|&m| scale * m));
            accumulate(tape, adj, *sigma, sv.iter().map(|&s| scale * (s - s.recip())));
        }
    }
}

fn node_numel<T: Real>(tape: &Tape<T>, v: Var) -> usize {
    tape.nodes[v.0].value.numel()
}
