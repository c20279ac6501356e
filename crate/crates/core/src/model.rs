//! The assembled network: encoder, fusion, uncertainty-aggregated decoder
//! and segmentation head.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{FusedPair, FusionStrategy, Glf};
use crate::nn::{Conv, Graph, Init, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::uad::{
    aggregate, predict_distribution, reparameterize, reparameterized_samples, segmentation_head, uncertainty_map,
    GaussianField, GaussianHead,
};

/// Which branches carry an uncertainty estimate. A branch without one is
/// aggregated with `U = 0`; `Off` therefore reduces the decoder to
/// `F_L + F_G`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UadMode {
    Off,
    LocalOnly,
    GlobalOnly,
    Full,
}

impl UadMode {
    pub fn local(self) -> bool {
        matches!(self, UadMode::LocalOnly | UadMode::Full)
    }

    pub fn global(self) -> bool {
        matches!(self, UadMode::GlobalOnly | UadMode::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UadMode::Off => "off",
            UadMode::LocalOnly => "local",
            UadMode::GlobalOnly => "global",
            UadMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "off" => UadMode::Off,
            "local" => UadMode::LocalOnly,
            "global" => UadMode::GlobalOnly,
            "full" => UadMode::Full,
            other => return Err(Error::Config(format!("unknown uad mode {other:?} (off|local|global|full)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Fused feature width `D_f`.
    pub fusion_width: usize,
    pub strategy: FusionStrategy,
    /// Reparameterized samples per uncertainty map.
    pub samples: usize,
    pub uad: UadMode,
    /// Stop gradients through `U` in the aggregation.
    pub detach_uncertainty: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion_width: 64,
            strategy: FusionStrategy::default(),
            samples: 8,
            uad: UadMode::Full,
            detach_uncertainty: true,
        }
    }
}

impl ModelConfig {
    /// Reduced widths `16/32/64/128` with `D_f = 16` and the default block
    /// structure, small enough to train on one CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                widths: [16, 32, 64, 128],
                ..EncoderConfig::default()
            },
            fusion_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.strategy.validate()?;
        if self.fusion_width == 0 {
            return Err(Error::Config("fusion_width must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config(format!("samples must be at least 2, got {}", self.samples)));
        }
        Ok(())
    }
}

/// How the decoder draws its reparameterization noise.
pub enum Noise<'a> {
    Random(&'a mut ChaCha8Rng),
    /// `eps = 0`: every sample equals `mu`, so both uncertainty maps are 0.
    Zero,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[1,H,W]` logits.
    pub logits: Var,
    pub pyramid: FeaturePyramid,
    pub fused: FusedPair,
    pub local: Option<GaussianField>,
    pub global: Option<GaussianField>,
    /// `[1,H/4,W/4]` in `[0,1]`.
    pub u_local: Option<Var>,
    pub u_global: Option<Var>,
    pub decoded: Var,
}

#[derive(Clone, Debug)]
pub struct Uaglnet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Glf,
    pub local_head: Option<GaussianHead>,
    pub global_head: Option<GaussianHead>,
    pub seg_head: Conv,
}

impl Uaglnet {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(store, seed);
        let encoder = Encoder::new(&mut init, &config.encoder)?;
        let fusion = Glf::new(&mut init, config.encoder.widths, config.fusion_width, &config.strategy)?;
        let d = config.fusion_width;
        let (local_head, global_head) = init.scope("uad", |s| {
            (
                config.uad.local().then(|| GaussianHead::new(s, "local", d)),
                config.uad.global().then(|| GaussianHead::new(s, "global", d)),
            )
        });
        // A zero head starts every pixel at probability 0.5.
        let seg_head = init.scope("head", |s| s.conv_zeroed("seg", 1, d, 1));
        Ok(Uaglnet {
            config: config.clone(),
            encoder,
            fusion,
            local_head,
            global_head,
            seg_head,
        })
    }

    /// Builds a model and its freshly initialized parameters.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config, seed)?;
        Ok((model, store))
    }

    fn uncertainty<T: Real>(&self, g: &mut Graph<T>, field: &GaussianField, noise: &mut Noise) -> Result<Var> {
        let samples = match noise {
            Noise::Random(rng) => reparameterized_samples(g, field, self.config.samples, *rng)?,
            Noise::Zero => {
                let shape = g.shape(field.mu).to_vec();
                (0..self.config.samples)
                    .map(|_| reparameterize(g, field, Tensor::zeros(&shape)))
                    .collect::<Result<_>>()?
            }
        };
        let u = uncertainty_map(g, &samples)?;
        Ok(if self.config.detach_uncertainty { g.detach(u) } else { u })
    }

    /// Forward pass for one `[3,H,W]` image.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var, mut noise: Noise) -> Result<ForwardOutput> {
        let (_, h, w) = g.value(image).chw("model")?;
        let pyramid = self.encoder.forward(g, image)?;
        let fused = self.fusion.forward(g, &pyramid)?;
        let mut fields = [None, None];
        let mut maps = [None, None];
        for (i, (head, f)) in [(&self.local_head, fused.local), (&self.global_head, fused.global)]
            .into_iter()
            .enumerate()
        {
            if let Some(head) = head {
                let field = predict_distribution(g, f, head)?;
                maps[i] = Some(self.uncertainty(g, &field, &mut noise)?);
                fields[i] = Some(field);
            }
        }
        let zero = || Tensor::zeros(&[1, h / 4, w / 4]);
        let u_local = match maps[0] {
            Some(u) => u,
            None => g.constant(zero()),
        };
        let u_global = match maps[1] {
            Some(u) => u,
            None => g.constant(zero()),
        };
        let decoded = aggregate(g, fused.local, fused.global, u_local, u_global)?;
        let logits = segmentation_head(g, decoded, &self.seg_head, (h, w))?;
        Ok(ForwardOutput {
            logits,
            pyramid,
            fused,
            local: fields[0],
            global: fields[1],
            u_local: maps[0],
            u_global: maps[1],
            decoded,
        })
    }
}

/// Trainable scalar count for `config`, in total and per top-level module.
pub fn count_parameters(config: &ModelConfig) -> Result<(usize, Vec<(String, usize)>)> {
    let (_, store) = Uaglnet::build::<f32>(config, 0)?;
    Ok((store.num_scalars(), store.breakdown(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                widths: [8, 16, 16, 32],
                depths: [1, 1, 1, 1],
                mkfm_groups: 2,
                heads: [2, 4],
                ffn_ratios: [2, 2, 2, 2],
                drop_path: 0.1,
            },
            fusion_width: 8,
            samples: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn untrained_logits_are_zero() {
        let (model, store) = Uaglnet::build::<f64>(&tiny(), 1).unwrap();
        let mut g = Graph::new(&store, false, 0);
        let x = g.constant(Tensor::full(&[3, 32, 32], 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut g, x, Noise::Random(&mut rng)).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 32, 32]);
        assert!(g.value(out.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_noise_gives_zero_uncertainty() {
        let (model, store) = Uaglnet::build::<f64>(&tiny(), 2).unwrap();
        let mut g = Graph::new(&store, false, 0);
        let x = g.constant(Tensor::full(&[3, 32, 32], 0.7));
        let out = model.forward(&mut g, x, Noise::Zero).unwrap();
        for u in [out.u_local.unwrap(), out.u_global.unwrap()] {
            assert!(g.value(u).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uad_off_registers_no_gaussian_heads() {
        let mut cfg = tiny();
        let full = count_parameters(&cfg).unwrap().0;
        cfg.uad = UadMode::Off;
        let (total, breakdown) = count_parameters(&cfg).unwrap();
        assert_eq!(full - total, 2 * 2 * (cfg.fusion_width + 1));
        assert!(breakdown.iter().all(|(k, _)| k != "uad"));
    }

    #[test]
    fn mode_round_trips_through_text() {
        for m in [UadMode::Off, UadMode::LocalOnly, UadMode::GlobalOnly, UadMode::Full] {
            assert_eq!(UadMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(UadMode::parse("maybe").is_err());
    }
}
