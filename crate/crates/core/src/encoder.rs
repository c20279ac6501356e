//! Four-stage cooperative encoder.
//!
//! | stage | stride | blocks                               |
//! |-------|--------|--------------------------------------|
//! | 1     | 4      | 3x3/2 + 2x2/2 stem, MKFM blocks      |
//! | 2     | 8      | 3x3/2 conv, MKFM blocks              |
//! | 3     | 16     | 3x3/2 conv, cooperative interaction  |
//! | 4     | 32     | 3x3/2 conv, transformer blocks       |
//!
//! Attention scores are scaled by `1/sqrt(C)` with `C` the full stage
//! width, not the per-head width. No positional encoding is added, so
//! attention is equivariant to token permutations.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{to_chw, to_tokens, Conv, Depthwise, Graph, Init, Linear, Norm};
use crate::tensor::Real;

/// Stage strides of the pyramid.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    /// MKFM group count `n`; the largest kernel is `2n+1`.
    pub mkfm_groups: usize,
    pub heads: [usize; 2],
    pub ffn_ratios: [usize; 4],
    /// Peak stochastic-depth rate, reached by the last block.
    pub drop_path: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: [64, 128, 256, 512],
            depths: [2, 2, 4, 1],
            mkfm_groups: 4,
            heads: [8, 16],
            ffn_ratios: [4, 4, 4, 2],
            drop_path: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.mkfm_groups;
        if n == 0 {
            return Err(Error::Config("mkfm_groups must be positive".into()));
        }
        for (i, &c) in self.widths.iter().enumerate() {
            if c == 0 {
                return Err(Error::Config(format!("stage {} width must be positive", i + 1)));
            }
            if i < 3 && c % n != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} is not divisible by mkfm_groups {n}",
                    i + 1
                )));
            }
        }
        for (stage, heads) in [(2, self.heads[0]), (3, self.heads[1])] {
            if heads == 0 || self.widths[stage] % heads != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {} is not divisible by {heads} heads",
                    stage + 1,
                    self.widths[stage]
                )));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config("drop_path must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Multi-kernel feature modulator parameters.
#[derive(Clone, Debug)]
pub struct MkfmParams {
    /// Group `j` (1-based) uses a `(2j+1) x (2j+1)` depthwise kernel.
    pub groups: Vec<Depthwise>,
    /// Point-wise combination `W_p`.
    pub combine: Conv,
    /// Linear embedding `phi`, a 1x1 projection `C -> C`.
    pub embed: Conv,
}

impl MkfmParams {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, n: usize) -> Self {
        let width = channels / n;
        init.scope(name, |s| MkfmParams {
            groups: (1..=n)
                .map(|j| s.depthwise(&format!("dw{}", 2 * j + 1), width, 2 * j + 1))
                .collect(),
            combine: s.conv("combine", channels, channels, 1, true),
            embed: s.conv("embed", channels, channels, 1, true),
        })
    }

    pub fn largest_kernel(&self) -> usize {
        self.groups.last().map_or(0, |d| d.kernel)
    }
}

/// `M = W_p * Cat(DW_3(Z_1), ..., DW_k(Z_n))`.
pub fn mkfm_modulator<T: Real>(g: &mut Graph<T>, z: Var, p: &MkfmParams) -> Result<Var> {
    let (c, _, _) = g.value(z).chw("mkfm_modulator")?;
    let n = p.groups.len();
    if n == 0 || c % n != 0 {
        return Err(Error::Config(format!(
            "mkfm: {c} channels cannot be split into {n} groups"
        )));
    }
    let width = c / n;
    let mut parts = Vec::with_capacity(n);
    for (j, dw) in p.groups.iter().enumerate() {
        let zj = if n == 1 { z } else { g.narrow(z, 0, j * width, width)? };
        parts.push(dw.forward(g, zj)?);
    }
    let cat = if n == 1 { parts[0] } else { g.concat(&parts, 0)? };
    p.combine.forward(g, cat, 1, 0)
}

/// `MKFM(F) = M ⊗ phi(F)` with `M` computed from `F`.
pub fn mkfm_apply<T: Real>(g: &mut Graph<T>, f: Var, p: &MkfmParams) -> Result<Var> {
    let m = mkfm_modulator(g, f, p)?;
    let e = p.embed.forward(g, f, 1, 0)?;
    g.mul(m, e)
}

/// Position-wise two-layer MLP on tokens `[N,C]`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, ratio: usize) -> Self {
        init.scope(name, |s| Ffn {
            fc1: s.linear("fc1", channels, channels * ratio),
            fc2: s.linear("fc2", channels * ratio, channels),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let h = self.fc1.forward(g, tokens)?;
        let a = g.gelu(h);
        self.fc2.forward(g, a)
    }
}

/// Residual MKFM sub-block followed by a residual FFN sub-block.
#[derive(Clone, Debug)]
pub struct MkfmBlock {
    pub norm1: Norm,
    pub mkfm: MkfmParams,
    pub norm2: Norm,
    pub ffn: Ffn,
    pub drop_path: f64,
}

impl MkfmBlock {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        channels: usize,
        n: usize,
        ratio: usize,
        drop_path: f64,
    ) -> Self {
        init.scope(name, |s| MkfmBlock {
            norm1: s.norm("norm1", channels),
            mkfm: MkfmParams::new(s, "mkfm", channels, n),
            norm2: s.norm("norm2", channels),
            ffn: Ffn::new(s, "ffn", channels, ratio),
            drop_path,
        })
    }

    /// `X* = X + MKFM(Norm(X))`, `out = X* + FFN(Norm(X*))`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).chw("mkfm_block")?;
        let n1 = self.norm1.chw(g, x)?;
        let m = mkfm_apply(g, n1, &self.mkfm)?;
        let m = g.drop_path(m, self.drop_path);
        let mid = g.add(x, m)?;
        let t = to_tokens(g, mid)?;
        let n2 = self.norm2.tokens(g, t)?;
        let f = self.ffn.forward(g, n2)?;
        let f = to_chw(g, f, h, w)?;
        let f = g.drop_path(f, self.drop_path);
        g.add(mid, f)
    }
}

/// Multi-head self-attention parameters.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Output projection `W^O`.
    pub out: Linear,
    pub heads: usize,
}

impl MhsaParams {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, heads: usize) -> Self {
        init.scope(name, |s| MhsaParams {
            query: s.linear("query", channels, channels),
            key: s.linear("key", channels, channels),
            value: s.linear("value", channels, channels),
            out: s.linear("out", channels, channels),
            heads,
        })
    }
}

/// `Concat[head_1..head_h] W^O` with
/// `head_j = Softmax(Q_j K_jᵀ / sqrt(C)) V_j` over tokens `x: [N,C]`.
pub fn mhsa<T: Real>(g: &mut Graph<T>, x: Var, p: &MhsaParams) -> Result<Var> {
    let c = match g.shape(x) {
        &[_, c] => c,
        s => return Err(Error::dim("mhsa", "rank", "2 ([N,C])", s.len())),
    };
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::Config(format!(
            "mhsa: {} heads do not divide {c} channels",
            p.heads
        )));
    }
    let d = c / p.heads;
    let scale = T::lit(1.0 / (c as f64).sqrt());
    let q = p.query.forward(g, x)?;
    let k = p.key.forward(g, x)?;
    let v = p.value.forward(g, x)?;
    let mut heads = Vec::with_capacity(p.heads);
    for j in 0..p.heads {
        let (qj, kj, vj) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.narrow(q, 1, j * d, d)?,
                g.narrow(k, 1, j * d, d)?,
                g.narrow(v, 1, j * d, d)?,
            )
        };
        let scores = g.matmul_nt(qj, kj)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, vj)?);
    }
    let cat = if p.heads == 1 { heads[0] } else { g.concat(&heads, 1)? };
    p.out.forward(g, cat)
}

/// Residual MHSA sub-block followed by a residual FFN sub-block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm1: Norm,
    pub attn: MhsaParams,
    pub norm2: Norm,
    pub ffn: Ffn,
    pub drop_path: f64,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        channels: usize,
        heads: usize,
        ratio: usize,
        drop_path: f64,
    ) -> Self {
        init.scope(name, |s| AttentionBlock {
            norm1: s.norm("norm1", channels),
            attn: MhsaParams::new(s, "attn", channels, heads),
            norm2: s.norm("norm2", channels),
            ffn: Ffn::new(s, "ffn", channels, ratio),
            drop_path,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).chw("attention_block")?;
        let t = to_tokens(g, x)?;
        let n1 = self.norm1.tokens(g, t)?;
        let a = mhsa(g, n1, &self.attn)?;
        let a = g.drop_path(a, self.drop_path);
        let mid = g.add(t, a)?;
        let n2 = self.norm2.tokens(g, mid)?;
        let f = self.ffn.forward(g, n2)?;
        let f = g.drop_path(f, self.drop_path);
        let out = g.add(mid, f)?;
        to_chw(g, out, h, w)
    }
}

/// Cooperative interaction block: an MKFM block then an attention block.
#[derive(Clone, Debug)]
pub struct Cib {
    pub local: MkfmBlock,
    pub global: AttentionBlock,
}

impl Cib {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.local.forward(g, x)?;
        self.global.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Mkfm(MkfmBlock),
    Cib(Cib),
    Attention(AttentionBlock),
}

impl Block {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Block::Mkfm(b) => b.forward(g, x),
            Block::Cib(b) => b.forward(g, x),
            Block::Attention(b) => b.forward(g, x),
        }
    }
}

/// Stride-2 3x3 convolution, plus the extra 2x2 stride-2 conv in the stem.
#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Vec<(Conv, usize, usize)>,
    pub blocks: Vec<Block>,
}

impl Stage {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for (conv, stride, pad) in &self.down {
            x = conv.forward(g, x, *stride, *pad)?;
        }
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    pub fn strides(&self) -> [usize; 4] {
        STRIDES
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real>(init: &mut Init<T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let total: usize = config.depths.iter().sum();
        let rate_at = |idx: usize| {
            if total > 1 {
                config.drop_path * idx as f64 / (total - 1) as f64
            } else {
                config.drop_path
            }
        };
        let [c1, c2, c3, c4] = config.widths;
        let n = config.mkfm_groups;
        let mut block_idx = 0;
        let mut next_rate = || {
            let r = rate_at(block_idx);
            block_idx += 1;
            r
        };
        let stages = init.scope("encoder", |s| {
            let mut stages = Vec::with_capacity(4);
            stages.push(s.scope("stage1", |s| Stage {
                down: vec![
                    (s.conv("stem1", c1, 3, 3, true), 2, 1),
                    (s.conv("stem2", c1, c1, 2, true), 2, 0),
                ],
                blocks: (0..config.depths[0])
                    .map(|b| {
                        Block::Mkfm(MkfmBlock::new(s, &format!("block{b}"), c1, n, config.ffn_ratios[0], next_rate()))
                    })
                    .collect(),
            }));
            stages.push(s.scope("stage2", |s| Stage {
                down: vec![(s.conv("down", c2, c1, 3, true), 2, 1)],
                blocks: (0..config.depths[1])
                    .map(|b| {
                        Block::Mkfm(MkfmBlock::new(s, &format!("block{b}"), c2, n, config.ffn_ratios[1], next_rate()))
                    })
                    .collect(),
            }));
            stages.push(s.scope("stage3", |s| Stage {
                down: vec![(s.conv("down", c3, c2, 3, true), 2, 1)],
                blocks: (0..config.depths[2])
                    .map(|b| {
                        let rate = next_rate();
                        s.scope(format!("block{b}"), |s| {
                            Block::Cib(Cib {
                                local: MkfmBlock::new(s, "local", c3, n, config.ffn_ratios[2], rate),
                                global: AttentionBlock::new(s, "global", c3, config.heads[0], config.ffn_ratios[2], rate),
                            })
                        })
                    })
                    .collect(),
            }));
            stages.push(s.scope("stage4", |s| Stage {
                down: vec![(s.conv("down", c4, c3, 3, true), 2, 1)],
                blocks: (0..config.depths[3])
                    .map(|b| {
                        Block::Attention(AttentionBlock::new(
                            s,
                            &format!("block{b}"),
                            c4,
                            config.heads[1],
                            config.ffn_ratios[3],
                            next_rate(),
                        ))
                    })
                    .collect(),
            }));
            stages
        });
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    /// Stem only: the stride-4 embedding `Z` of stage 1.
    pub fn stem_embed<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        check_input(g, image)?;
        let mut x = image;
        for (conv, stride, pad) in &self.stages[0].down {
            x = conv.forward(g, x, *stride, *pad)?;
        }
        Ok(x)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<FeaturePyramid> {
        check_input(g, image)?;
        let mut x = image;
        let mut levels = [image; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(g, x)?;
            levels[i] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}

fn check_input<T: Real>(g: &Graph<T>, image: Var) -> Result<()> {
    let (c, h, w) = g.value(image).chw("encoder")?;
    if c != 3 {
        return Err(Error::dim("encoder", "channels (axis 0)", 3, c));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} is not divisible by 32"
        )));
    }
    Ok(())
}
