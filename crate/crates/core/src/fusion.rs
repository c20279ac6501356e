//! Global-local fusion of the feature pyramid.
//!
//! Every level is first refined residually. A *branch* then fuses a set of
//! refined levels top-down: starting from the deepest level it repeatedly
//! lifts the running feature by 2x with an [`UpConv`], concatenates the next
//! shallower level, and finally lands at stride 4 with `D_f` channels.
//!
//! The default branches use levels `{1,2,3}` (local) and `{3,4}` (global),
//! so level 3 feeds both.

use crate::autodiff::Var;
use crate::encoder::{FeaturePyramid, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{Conv, Depthwise, Graph, Init, Norm};
use crate::tensor::Real;

/// Which pyramid levels (1-based) feed each branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionStrategy {
    pub local: Vec<usize>,
    pub global: Vec<usize>,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        FusionStrategy {
            local: vec![1, 2, 3],
            global: vec![3, 4],
        }
    }
}

impl FusionStrategy {
    /// The four level assignments compared in the fusion ablation, in order:
    /// `{1,2}/{4}`, `{1,2,3}/{4}`, `{1,2}/{3,4}`, `{1,2,3}/{3,4}`.
    pub fn ablation_rows() -> [FusionStrategy; 4] {
        let s = |l: &[usize], g: &[usize]| FusionStrategy {
            local: l.to_vec(),
            global: g.to_vec(),
        };
        [
            s(&[1, 2], &[4]),
            s(&[1, 2, 3], &[4]),
            s(&[1, 2], &[3, 4]),
            s(&[1, 2, 3], &[3, 4]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, levels) in [("local", &self.local), ("global", &self.global)] {
            if levels.is_empty() {
                return Err(Error::Config(format!("{name} fusion branch has no levels")));
            }
            if levels.iter().any(|&l| !(1..=4).contains(&l)) {
                return Err(Error::Config(format!("{name} fusion levels must be in 1..=4")));
            }
            let mut sorted = levels.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != levels.len() {
                return Err(Error::Config(format!("{name} fusion levels repeat")));
            }
        }
        Ok(())
    }
}

/// `F̂ = F + DWConv(F)`, where DWConv is two depthwise-separable layers
/// (3x3 depthwise then point-wise, each followed by GELU) and a final
/// point-wise projection.
#[derive(Clone, Debug)]
pub struct Refine {
    pub dw1: Depthwise,
    pub pw1: Conv,
    pub dw2: Depthwise,
    pub pw2: Conv,
    pub proj: Conv,
}

impl Refine {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize) -> Self {
        init.scope(name, |s| Refine {
            dw1: s.depthwise("dw1", channels, 3),
            pw1: s.conv("pw1", channels, channels, 1, true),
            dw2: s.depthwise("dw2", channels, 3),
            pw2: s.conv("pw2", channels, channels, 1, true),
            proj: s.conv("proj", channels, channels, 1, true),
        })
    }
}

pub fn residual_refine<T: Real>(g: &mut Graph<T>, f: Var, p: &Refine) -> Result<Var> {
    let mut x = p.dw1.forward(g, f)?;
    x = p.pw1.forward(g, x, 1, 0)?;
    x = g.gelu(x);
    x = p.dw2.forward(g, x)?;
    x = p.pw2.forward(g, x, 1, 0)?;
    x = g.gelu(x);
    x = p.proj.forward(g, x, 1, 0)?;
    g.add(f, x)
}

/// Bilinear 2x upsample, 3x3 conv, channel norm, GELU.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub conv: Conv,
    pub norm: Norm,
    pub c_in: usize,
    pub c_out: usize,
}

impl UpConv {
    fn new<T: Real>(init: &mut Init<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        init.scope(name, |s| UpConv {
            conv: s.conv("conv", c_out, c_in, 3, false),
            norm: s.norm("norm", c_out),
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let up = g.bilinear_upsample(x, 2)?;
        let c = self.conv.forward(g, up, 1, 1)?;
        let n = self.norm.chw(g, c)?;
        Ok(g.gelu(n))
    }
}

/// 3x3 conv, channel norm, GELU; projects the final stride-4 concatenation.
#[derive(Clone, Debug)]
pub struct ProjConv {
    pub conv: Conv,
    pub norm: Norm,
}

impl ProjConv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = self.conv.forward(g, x, 1, 1)?;
        let n = self.norm.chw(g, c)?;
        Ok(g.gelu(n))
    }
}

#[derive(Clone, Debug)]
pub enum Step {
    Up(UpConv),
    /// Concatenate the refined level (1-based) in front of the running map.
    Cat(usize),
    Proj(ProjConv),
}

/// One fusion branch, compiled into a straight-line list of steps.
#[derive(Clone, Debug)]
pub struct Branch {
    pub levels: Vec<usize>,
    pub steps: Vec<Step>,
}

impl Branch {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        levels: &[usize],
        widths: [usize; 4],
        out_channels: usize,
    ) -> Self {
        let mut order = levels.to_vec();
        order.sort_unstable_by(|a, b| b.cmp(a));
        init.scope(name, |s| {
            let mut steps = Vec::new();
            let mut level = order[0];
            let mut width = widths[level - 1];
            let mut ups = 0;
            for &next in &order[1..] {
                while level > next {
                    level -= 1;
                    let out = widths[level - 1];
                    steps.push(Step::Up(UpConv::new(s, &format!("up{ups}"), width, out)));
                    ups += 1;
                    width = out;
                }
                steps.push(Step::Cat(next));
                width += widths[next - 1];
            }
            if level == 1 {
                steps.push(Step::Proj(s.scope("proj", |s| ProjConv {
                    conv: s.conv("conv", out_channels, width, 3, false),
                    norm: s.norm("norm", out_channels),
                })));
            } else {
                while level > 1 {
                    level -= 1;
                    let out = if level == 1 { out_channels } else { widths[level - 1] };
                    steps.push(Step::Up(UpConv::new(s, &format!("up{ups}"), width, out)));
                    ups += 1;
                    width = out;
                }
            }
            Branch {
                levels: order,
                steps,
            }
        })
    }

    /// Runs the branch over refined levels indexed `0..4`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, refined: &[Option<Var>; 4]) -> Result<Var> {
        let fetch = |l: usize| {
            refined[l - 1].ok_or_else(|| Error::Config(format!("fusion level {l} was not provided")))
        };
        let mut x = fetch(self.levels[0])?;
        for step in &self.steps {
            x = match step {
                Step::Up(u) => u.forward(g, x)?,
                Step::Cat(l) => {
                    let skip = fetch(*l)?;
                    let (xs, ss) = (g.shape(x).to_vec(), g.shape(skip).to_vec());
                    if xs[1..] != ss[1..] {
                        return Err(Error::dim(
                            "fusion",
                            format!("spatial extent at level {l} (stride {})", STRIDES[l - 1]),
                            format!("{:?}", &ss[1..]),
                            format!("{:?}", &xs[1..]),
                        ));
                    }
                    g.concat(&[skip, x], 0)?
                }
                Step::Proj(p) => p.forward(g, x)?,
            };
        }
        Ok(x)
    }

    pub fn upconvs(&self) -> impl Iterator<Item = &UpConv> {
        self.steps.iter().filter_map(|s| match s {
            Step::Up(u) => Some(u),
            _ => None,
        })
    }
}

/// Local and global branch outputs; equal shape `[D_f, H/4, W/4]`.
#[derive(Clone, Copy, Debug)]
pub struct FusedPair {
    pub local: Var,
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct Glf {
    pub refine: Vec<Refine>,
    pub local: Branch,
    pub global: Branch,
    pub out_channels: usize,
}

impl Glf {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        widths: [usize; 4],
        out_channels: usize,
        strategy: &FusionStrategy,
    ) -> Result<Self> {
        strategy.validate()?;
        if out_channels == 0 {
            return Err(Error::Config("fusion width must be positive".into()));
        }
        Ok(init.scope("fusion", |s| Glf {
            refine: (0..4)
                .map(|i| Refine::new(s, &format!("refine{}", i + 1), widths[i]))
                .collect(),
            local: Branch::new(s, "local", &strategy.local, widths, out_channels),
            global: Branch::new(s, "global", &strategy.global, widths, out_channels),
            out_channels,
        }))
    }

    /// Refines every pyramid level.
    pub fn refine_all<T: Real>(&self, g: &mut Graph<T>, pyramid: &FeaturePyramid) -> Result<[Option<Var>; 4]> {
        check_strides(g, pyramid)?;
        let mut out = [None; 4];
        for (i, r) in self.refine.iter().enumerate() {
            out[i] = Some(residual_refine(g, pyramid.levels[i], r)?);
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pyramid: &FeaturePyramid) -> Result<FusedPair> {
        let refined = self.refine_all(g, pyramid)?;
        let local = self.local.forward(g, &refined)?;
        let global = self.global.forward(g, &refined)?;
        if g.shape(local) != g.shape(global) {
            return Err(Error::dim(
                "fusion",
                "branch shape",
                format!("{:?}", g.shape(local)),
                format!("{:?}", g.shape(global)),
            ));
        }
        Ok(FusedPair { local, global })
    }
}

/// `F_L = Conv(Cat(F̂1, UpConv(Cat(F̂2, UpConv(F̂3)))))` for a branch built
/// over levels `{1,2,3}`.
pub fn fuse_local<T: Real>(g: &mut Graph<T>, branch: &Branch, f1: Var, f2: Var, f3: Var) -> Result<Var> {
    branch.forward(g, &[Some(f1), Some(f2), Some(f3), None])
}

/// `F_G = UpConv(Cat(F̂3, UpConv(F̂4)))` for a branch built over `{3,4}`,
/// where the outer lift is two 2x steps ending at stride 4.
pub fn fuse_global<T: Real>(g: &mut Graph<T>, branch: &Branch, f3: Var, f4: Var) -> Result<Var> {
    branch.forward(g, &[None, None, Some(f3), Some(f4)])
}

fn check_strides<T: Real>(g: &Graph<T>, pyramid: &FeaturePyramid) -> Result<()> {
    let (_, h1, w1) = g.value(pyramid.levels[0]).chw("fusion")?;
    for (i, lv) in pyramid.levels.iter().enumerate().skip(1) {
        let (_, h, w) = g.value(*lv).chw("fusion")?;
        let f = 1 << i;
        if h * f != h1 || w * f != w1 {
            return Err(Error::dim(
                "fusion",
                format!("level {} extent (stride {})", i + 1, STRIDES[i]),
                format!("{}x{}", h1 / f, w1 / f),
                format!("{h}x{w}"),
            ));
        }
    }
    Ok(())
}
