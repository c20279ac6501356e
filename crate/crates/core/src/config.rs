//! Flat `key = value` configuration.
//!
//! A file holds one assignment per line; `#` starts a comment. Command-line
//! overrides use the same keys as `--key=value`. The optional `preset` key
//! (`full` or `desk`) selects the starting values and is applied before
//! every other key regardless of where it appears.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetSpec, Difficulty};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::{ModelConfig, UadMode};
use crate::objectives::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Hard step budget; 0 means `epochs * steps_per_epoch`.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// First cosine cycle length in epochs; later cycles grow by `restart_mult`.
    pub restart_epochs: usize,
    pub restart_mult: usize,
    pub val_every: usize,
    pub threshold: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Side of generated scenes.
    pub scene_size: usize,
    /// Side of training crops; 0 trains on whole scenes.
    pub crop_size: usize,
    pub tile: usize,
    pub noise_std: f64,
    pub degrade: usize,
    pub occlusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            lr_min: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            steps: 0,
            batch_size: 8,
            seed: 0,
            restart_epochs: 10,
            restart_mult: 2,
            val_every: 50,
            threshold: DEFAULT_THRESHOLD,
            train_scenes: 400,
            val_scenes: 32,
            scene_size: 512,
            crop_size: 0,
            tile: 512,
            noise_std: 0.0,
            degrade: 1,
            occlusion: false,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> usize {
        self.train_scenes.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * self.steps_per_epoch()
        }
    }

    pub fn difficulty(&self) -> Difficulty {
        Difficulty {
            noise_std: self.noise_std,
            degrade: self.degrade,
            occlusion: self.occlusion,
        }
    }

    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: crate::data::derive_seed(&[self.seed, 1]),
            count: self.train_scenes,
            size: self.scene_size,
            difficulty: self.difficulty(),
        }
    }

    /// Held-out split: a disjoint seed stream from the training scenes.
    pub fn val_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: crate::data::derive_seed(&[self.seed, 2]),
            count: self.val_scenes,
            size: self.scene_size,
            difficulty: self.difficulty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = parse_vec(key, value)?;
    items
        .try_into()
        .map_err(|v: Vec<usize>| Error::Config(format!("{key}: expected {N} values, got {}", v.len())))
}

fn parse_vec(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Full-size architecture with desk-scale training defaults.
    pub fn full() -> Self {
        Self::default()
    }

    /// Reduced model on 64x64 scenes, sized for a single CPU.
    pub fn desk() -> Self {
        Config {
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            train: TrainConfig {
                lr: 4e-3,
                scene_size: 64,
                tile: 64,
                steps: 500,
                ..TrainConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (full|desk)"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "widths" => m.encoder.widths = parse_list(key, v)?,
            "depths" => m.encoder.depths = parse_list(key, v)?,
            "mkfm_groups" => m.encoder.mkfm_groups = parse(key, v)?,
            "heads" => m.encoder.heads = parse_list(key, v)?,
            "ffn_ratios" => m.encoder.ffn_ratios = parse_list(key, v)?,
            "drop_path" => m.encoder.drop_path = parse(key, v)?,
            "fusion_width" => m.fusion_width = parse(key, v)?,
            "local_levels" => m.strategy.local = parse_vec(key, v)?,
            "global_levels" => m.strategy.global = parse_vec(key, v)?,
            "samples" => m.samples = parse(key, v)?,
            "uad" => m.uad = UadMode::parse(v)?,
            "detach_uncertainty" => m.detach_uncertainty = parse(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "eta" => self.loss.eta = parse(key, v)?,
            "lambda1" => self.loss.lambda1 = parse(key, v)?,
            "lambda2" => self.loss.lambda2 = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_min" => t.lr_min = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "restart_epochs" => t.restart_epochs = parse(key, v)?,
            "restart_mult" => t.restart_mult = parse(key, v)?,
            "val_every" => t.val_every = parse(key, v)?,
            "threshold" => t.threshold = parse(key, v)?,
            "train_scenes" => t.train_scenes = parse(key, v)?,
            "val_scenes" => t.val_scenes = parse(key, v)?,
            "scene_size" => t.scene_size = parse(key, v)?,
            "crop_size" => t.crop_size = parse(key, v)?,
            "tile" => t.tile = parse(key, v)?,
            "noise_std" => t.noise_std = parse(key, v)?,
            "degrade" => t.degrade = parse(key, v)?,
            "occlusion" => t.occlusion = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        vec![
            ("widths", join(&m.encoder.widths)),
            ("depths", join(&m.encoder.depths)),
            ("mkfm_groups", m.encoder.mkfm_groups.to_string()),
            ("heads", join(&m.encoder.heads)),
            ("ffn_ratios", join(&m.encoder.ffn_ratios)),
            ("drop_path", m.encoder.drop_path.to_string()),
            ("fusion_width", m.fusion_width.to_string()),
            ("local_levels", join(&m.strategy.local)),
            ("global_levels", join(&m.strategy.global)),
            ("samples", m.samples.to_string()),
            ("uad", m.uad.as_str().to_string()),
            ("detach_uncertainty", m.detach_uncertainty.to_string()),
            ("gamma", l.gamma.to_string()),
            ("eta", l.eta.to_string()),
            ("lambda1", l.lambda1.to_string()),
            ("lambda2", l.lambda2.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_min", t.lr_min.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("restart_epochs", t.restart_epochs.to_string()),
            ("restart_mult", t.restart_mult.to_string()),
            ("val_every", t.val_every.to_string()),
            ("threshold", t.threshold.to_string()),
            ("train_scenes", t.train_scenes.to_string()),
            ("val_scenes", t.val_scenes.to_string()),
            ("scene_size", t.scene_size.to_string()),
            ("crop_size", t.crop_size.to_string()),
            ("tile", t.tile.to_string()),
            ("noise_std", t.noise_std.to_string()),
            ("degrade", t.degrade.to_string()),
            ("occlusion", t.occlusion.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    /// Builds a config from `(key, value)` pairs, honouring `preset` first.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let mut cfg = match pairs.iter().rev().find(|(k, _)| *k == "preset") {
            Some((_, v)) => Self::preset(v.trim())?,
            None => Self::default(),
        };
        for (k, v) in pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Splits config text into `(key, value)` pairs.
    pub fn pairs_from_text(text: &str) -> Result<Vec<(&str, &str)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            out.push((k.trim(), v.trim()));
        }
        Ok(out)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_pairs(Self::pairs_from_text(text)?)
    }

    /// Splits `--key=value` arguments into pairs.
    pub fn pairs_from_args(args: &[String]) -> Result<Vec<(&str, &str)>> {
        args.iter()
            .map(|a| {
                a.strip_prefix("--")
                    .and_then(|kv| kv.split_once('='))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "override {a:?} is not of the form --key=value \
                             (named options such as --out must come before the overrides)"
                        ))
                    })
            })
            .collect()
    }

    /// Loads an optional file, then applies `--key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut pairs = Self::pairs_from_text(&text)?;
        pairs.extend(Self::pairs_from_args(overrides)?);
        Self::from_pairs(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        let positive = [
            ("batch_size", t.batch_size),
            ("train_scenes", t.train_scenes),
            ("val_scenes", t.val_scenes),
            ("restart_epochs", t.restart_epochs),
            ("restart_mult", t.restart_mult),
            ("val_every", t.val_every),
            ("degrade", t.degrade),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(t.lr >= 0.0 && t.lr_min >= 0.0 && t.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be nonnegative".into()));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2) && t.adam_eps > 0.0) {
            return Err(Error::Config("betas must lie in [0,1) and adam_eps must be positive".into()));
        }
        if !(t.threshold > 0.0 && t.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        for (k, v) in [("scene_size", t.scene_size), ("tile", t.tile)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::Config(format!("{k} must be a positive multiple of 32, got {v}")));
            }
        }
        if t.crop_size != 0 && (t.crop_size % 32 != 0 || t.crop_size > t.scene_size) {
            return Err(Error::Config(format!(
                "crop_size must be 0 or a multiple of 32 no larger than scene_size, got {}",
                t.crop_size
            )));
        }
        if t.scene_size % t.degrade != 0 {
            return Err(Error::Config("degrade must divide scene_size".into()));
        }
        Ok(())
    }

    /// Fusion strategy shortcut.
    pub fn strategy(&self) -> &FusionStrategy {
        &self.model.strategy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [Config::full(), Config::desk()] {
            assert_eq!(Config::parse_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_win_and_preset_applies_first() {
        let args = vec!["--lr=0.01".to_string(), "--preset=desk".to_string()];
        let cfg = Config::load(None, &args).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.encoder.widths, [16, 32, 64, 128]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse_text("# hi\n\nwidths = 32,64,128,256 # trailing\nuad=off\n").unwrap();
        assert_eq!(cfg.model.encoder.widths, [32, 64, 128, 256]);
        assert_eq!(cfg.model.uad, UadMode::Off);
    }

    #[test]
    fn errors_are_descriptive() {
        let e = Config::parse_text("nope = 1").unwrap_err().to_string();
        assert!(e.contains("nope"));
        assert!(Config::parse_text("widths = 1,2").unwrap_err().to_string().contains("expected 4"));
        assert!(Config::parse_text("widths = 62,128,256,512").is_err());
        assert!(Config::pairs_from_args(&["lr=1".into()]).is_err());
    }

    #[test]
    fn step_budget() {
        let mut t = TrainConfig {
            train_scenes: 400,
            batch_size: 8,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(t.total_steps(), 150);
        t.steps = 7;
        assert_eq!(t.total_steps(), 7);
    }
}
