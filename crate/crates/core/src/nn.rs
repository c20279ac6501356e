//! Named parameters, their initialization, and the layer primitives the
//! network stages are assembled from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar counts grouped by the first `depth` dot-separated name parts.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, v) in self.iter() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += v.numel(),
                None => out.push((key, v.numel())),
            }
        }
        out
    }

    /// Replaces every value with the same-named entry of `other`, failing on
    /// missing names or mismatched shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            other.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = (*src).clone();
        }
        Ok(())
    }
}

/// Seeded initializer that registers parameters under a dotted prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.into());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(leaf);
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(leaf);
        self.store.insert(name, Tensor::ones(shape))
    }

    /// Normal draw with variance `1 / fan_in`.
    pub fn lecun(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (1.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        let name = self.full_name(leaf);
        self.store
            .insert(name, Tensor::new(shape, data).expect("init shape"))
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) -> Conv {
        self.scope(name, |s| Conv {
            weight: s.lecun("weight", &[c_out, c_in, k, k], c_in * k * k),
            bias: bias.then(|| s.zeros("bias", &[c_out])),
        })
    }

    /// A conv whose weight and bias start at exactly zero.
    pub fn conv_zeroed(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Conv {
        self.scope(name, |s| Conv {
            weight: s.zeros("weight", &[c_out, c_in, k, k]),
            bias: Some(s.zeros("bias", &[c_out])),
        })
    }

    pub fn depthwise(&mut self, name: &str, channels: usize, k: usize) -> Depthwise {
        self.scope(name, |s| Depthwise {
            weight: s.lecun("weight", &[channels, 1, k, k], k * k),
            bias: Some(s.zeros("bias", &[channels])),
            kernel: k,
        })
    }

    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize) -> Linear {
        self.scope(name, |s| Linear {
            weight: s.lecun("weight", &[c_in, c_out], c_in),
            bias: Some(s.zeros("bias", &[c_out])),
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        self.scope(name, |s| Norm {
            gain: s.ones("gain", &[channels]),
            shift: s.zeros("shift", &[channels]),
        })
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// A forward pass in progress: a tape plus lazily bound parameters.
pub struct Graph<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    /// Enables stochastic depth.
    pub training: bool,
    drop_rng: ChaCha8Rng,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, training: bool, seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            training,
            drop_rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Tape variable for a parameter, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Gradient for each parameter after `backward`; unused parameters get
    /// `None`.
    pub fn param_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        let bound = self.bound.clone();
        bound
            .into_iter()
            .map(|v| v.and_then(|v| self.tape.take_grad(v)))
            .collect()
    }

    /// Stochastic depth on a residual branch: during training the branch is
    /// dropped with probability `rate`, otherwise rescaled by `1/(1-rate)`.
    pub fn drop_path(&mut self, branch: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return branch;
        }
        let keep = self.drop_rng.random::<f64>() >= rate;
        let factor = if keep { 1.0 / (1.0 - rate) } else { 0.0 };
        self.tape.scale(branch, T::lit(factor))
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.p(self.weight);
        let b = self.bias.map(|b| g.p(b));
        g.conv2d(x, w, b, stride, pad)
    }

    pub fn num_scalars<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).numel() + self.bias.map_or(0, |b| store.get(b).numel())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Depthwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl Depthwise {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let b = self.bias.map(|b| g.p(b));
        g.depthwise_conv2d(x, w, b, (self.kernel - 1) / 2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let b = self.bias.map(|b| g.p(b));
        g.linear(x, w, b)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    /// Normalizes the last axis of a token matrix `[N,C]`.
    pub fn tokens<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gain, shift) = (g.p(self.gain), g.p(self.shift));
        g.layer_norm(x, gain, shift, T::lit(NORM_EPS))
    }

    /// Normalizes the channel axis of a `[C,H,W]` map at every pixel.
    pub fn chw<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).chw("norm")?;
        let t = to_tokens(g, x)?;
        let n = self.tokens(g, t)?;
        to_chw(g, n, h, w)
    }
}

/// `[C,H,W]` to row-per-pixel tokens `[H*W, C]`.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw("to_tokens")?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// Tokens `[H*W, C]` back to a `[C,H,W]` map.
pub fn to_chw<T: Real>(tape: &mut Tape<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = match tape.shape(t) {
        &[n, c] if n == h * w => c,
        s => return Err(Error::dim("to_chw", "token count", h * w, format!("{s:?}"))),
    };
    let cm = tape.transpose(t)?;
    tape.reshape(cm, &[c, h, w])
}
