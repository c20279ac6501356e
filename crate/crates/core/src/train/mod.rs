//! Optimization loop, checkpoints and the file-level entry points used by
//! the command-line tool.
//!
//! Every random choice in a step (batch order, crops, flips, drop-path,
//! sampling noise) is drawn from a generator seeded by mixing the run seed
//! with the step and item index. No generator state is carried between
//! steps, so a run resumed from a checkpoint replays the uninterrupted run
//! exactly.

mod checkpoint;
mod infer;
mod optim;

pub use checkpoint::{Archive, Array, MAGIC, VERSION};
pub use infer::{evaluate_scenes, infer_image, infer_tile, threshold_mask, TileOutput};
pub use optim::{AdamW, CosineRestarts};

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{augment, derive_seed, load_image, save_gray, save_mask, Scene};
use crate::error::{Error, Result};
use crate::metrics::Report;
use crate::model::{Noise, Uaglnet};
use crate::nn::{Graph, ParamStore};
use crate::objectives::total_loss;
use crate::tensor::{Real, Tensor};

// Stream tags mixed into per-step seeds.
const INIT: u64 = 0;
const SHUFFLE: u64 = 3;
const AUGMENT: u64 = 4;
const DROP: u64 = 5;
const SAMPLE: u64 = 6;
const LOSS: u64 = 7;
const EVAL: u64 = 8;

/// Loss components of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seg: f64,
    pub dice: f64,
    pub bce: f64,
    pub boundary: f64,
    pub unc_global: Option<f64>,
    pub unc_local: Option<f64>,
    pub val_iou: Option<f64>,
}

impl StepRecord {
    /// One `key=value` record, space separated.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} epoch={} lr={:.6e} loss={:.6} seg={:.6} dice={:.6} bce={:.6} boundary={:.6}",
            self.step, self.epoch, self.lr, self.loss, self.seg, self.dice, self.bce, self.boundary
        );
        if let Some(v) = self.unc_global {
            write!(s, " unc_global={v:.6}").expect("string write");
        }
        if let Some(v) = self.unc_local {
            write!(s, " unc_local={v:.6}").expect("string write");
        }
        if let Some(v) = self.val_iou {
            write!(s, " val_iou={v:.4}").expect("string write");
        }
        s
    }
}

pub struct Trainer<T> {
    pub config: Config,
    pub model: Uaglnet,
    pub params: ParamStore<T>,
    pub optim: AdamW<T>,
    /// Completed optimization steps.
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (model, params) = Uaglnet::build(&config.model, derive_seed(&[config.train.seed, INIT]))?;
        let t = &config.train;
        let optim = AdamW::new(&params, t.beta1, t.beta2, t.adam_eps, t.weight_decay);
        Ok(Trainer {
            config,
            model,
            params,
            optim,
            step: 0,
        })
    }

    pub fn schedule(&self) -> CosineRestarts {
        let t = &self.config.train;
        CosineRestarts {
            lr_max: t.lr,
            lr_min: t.lr_min,
            period: t.restart_epochs * t.steps_per_epoch(),
            mult: t.restart_mult,
        }
    }

    /// Training-scene indices for `step`: a per-epoch shuffle, cut into
    /// consecutive batches.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let t = &self.config.train;
        let spe = t.steps_per_epoch();
        let epoch = step as usize / spe;
        let mut order: Vec<usize> = (0..t.train_scenes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[t.seed, SHUFFLE, epoch as u64])));
        let start = (step as usize % spe) * t.batch_size;
        order[start..(start + t.batch_size).min(order.len())].to_vec()
    }

    /// The augmented training batch for `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<Scene<T>>> {
        let t = &self.config.train;
        let spec = t.train_spec();
        let crop = if t.crop_size == 0 { t.scene_size } else { t.crop_size };
        self.batch_indices(step)
            .into_iter()
            .enumerate()
            .map(|(item, idx)| {
                let scene = spec.scene(idx)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[t.seed, AUGMENT, step, item as u64]));
                augment(&scene, &mut rng, crop)
            })
            .collect()
    }

    /// One optimization step on the batch for the current step counter.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let seed = self.config.train.seed;
        let batch = self.batch(step)?;
        let lr = self.schedule().lr(step as usize);
        let mut g = Graph::new(&self.params, true, derive_seed(&[seed, DROP, step]));
        let mut logits = Vec::with_capacity(batch.len());
        let mut local = Vec::new();
        let mut global = Vec::new();
        for (item, scene) in batch.iter().enumerate() {
            let x = g.constant(scene.image.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, SAMPLE, step, item as u64]));
            let out = self.model.forward(&mut g, x, Noise::Random(&mut rng))?;
            logits.push(out.logits);
            local.extend(out.local);
            global.extend(out.global);
        }
        let targets: Vec<&Tensor<T>> = batch.iter().map(|s| &s.mask).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, LOSS, step]));
        let terms = total_loss(
            &mut g,
            &logits,
            &targets,
            self.model.local_head.as_ref().map(|_| local.as_slice()),
            self.model.global_head.as_ref().map(|_| global.as_slice()),
            &self.config.loss,
            &mut rng,
        )?;
        let scalar = |g: &Graph<T>, v| g.value(v).item().as_f64();
        let loss = scalar(&g, terms.total);
        let non_finite = |detail: String| Error::NonFinite {
            step,
            batch_seed: derive_seed(&[seed, step]),
            detail: format!(
                "{detail}; scene seeds {:?}",
                batch.iter().map(|s| s.seed).collect::<Vec<_>>()
            ),
        };
        if !loss.is_finite() {
            return Err(non_finite(format!("loss = {loss}")));
        }
        g.backward(terms.total)?;
        let grads = g.param_grads();
        if let Some(i) = grads.iter().position(|gr| gr.as_ref().is_some_and(|t| !t.all_finite())) {
            let name = self.params.name(self.params.ids().nth(i).expect("index in range")).to_string();
            return Err(non_finite(format!("gradient of {name}")));
        }
        let record = StepRecord {
            step,
            epoch: step as usize / self.config.train.steps_per_epoch(),
            lr,
            loss,
            seg: scalar(&g, terms.seg.total),
            dice: scalar(&g, terms.seg.dice),
            bce: scalar(&g, terms.seg.bce),
            boundary: scalar(&g, terms.seg.boundary),
            unc_global: terms.unc_global.map(|u| scalar(&g, u.total)),
            unc_local: terms.unc_local.map(|u| scalar(&g, u.total)),
            val_iou: None,
        };
        drop(g);
        self.optim.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    /// Report on the held-out split.
    pub fn validate(&self) -> Result<Report> {
        let t = &self.config.train;
        let spec = t.val_spec();
        evaluate_scenes(
            &self.model,
            &self.params,
            (0..spec.count).map(|i| spec.scene(i)),
            t.tile,
            t.threshold,
            derive_seed(&[t.seed, EVAL]),
        )
    }

    /// Trains until `total_steps`, appending one record per step to `log`
    /// and validating every `val_every` steps and after the last one.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        let total = self.config.train.total_steps() as u64;
        let every = self.config.train.val_every as u64;
        let mut records = Vec::new();
        while self.step < total {
            let mut r = self.train_step()?;
            if self.step % every == 0 || self.step == total {
                r.val_iou = Some(self.validate()?.metrics.iou);
            }
            writeln!(log, "{}", r.to_line()).map_err(|e| Error::io("<log>", e))?;
            records.push(r);
        }
        Ok(records)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        let text = self.config.to_text();
        a.push("config", Array::U8(vec![text.len()], text.into_bytes()));
        a.push("state.step", Array::U64(vec![1], vec![self.step]));
        a.push("adam.t", Array::U64(vec![1], vec![self.optim.t]));
        for (i, (name, p)) in self.params.iter().enumerate() {
            a.push(format!("param.{name}"), Array::from_tensor(p));
            a.push(format!("adam.m.{name}"), Array::from_tensor(&self.optim.m[i]));
            a.push(format!("adam.v.{name}"), Array::from_tensor(&self.optim.v[i]));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config = Config::parse_text(&a.text("config")?)?;
        let mut tr = Trainer::new(config)?;
        load_params(&mut tr.params, a)?;
        tr.step = a.u64_scalar("state.step")?;
        tr.optim.t = a.u64_scalar("adam.t")?;
        let names: Vec<String> = tr.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            tr.optim.m[i] = moment(a, &format!("adam.m.{name}"), tr.optim.m[i].shape())?;
            tr.optim.v[i] = moment(a, &format!("adam.v.{name}"), tr.optim.v[i].shape())?;
        }
        Ok(tr)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn moment<T: Real>(a: &Archive, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t: Tensor<T> = a.require(name)?.to_tensor()?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "{name}: shape {:?} does not match {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Copies every `param.*` entry into `params` by name.
pub fn load_params<T: Real>(params: &mut ParamStore<T>, a: &Archive) -> Result<()> {
    let entries = a
        .entries
        .iter()
        .filter_map(|(n, arr)| n.strip_prefix("param.").map(|n| (n.to_string(), arr)))
        .map(|(n, arr)| {
            arr.to_tensor()
                .map(|t| (n.clone(), t))
                .map_err(|e| Error::Checkpoint(format!("parameter {n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    params.load_from(&entries)
}

/// A model restored from a checkpoint, ready for inference.
pub struct Loaded<T> {
    pub config: Config,
    pub model: Uaglnet,
    pub params: ParamStore<T>,
    /// Sample with `eps = 0`, which makes both uncertainty maps zero.
    pub zero_noise: bool,
}

/// Restores model weights. `overrides` (as `--key=value`) may change
/// inference settings; architecture changes surface as a parameter-shape
/// error naming the offending parameter.
pub fn load_model<T: Real>(path: impl AsRef<Path>, overrides: &[String]) -> Result<Loaded<T>> {
    let a = Archive::load(path)?;
    let text = a.text("config")?;
    let mut pairs = Config::pairs_from_text(&text)?;
    pairs.extend(Config::pairs_from_args(overrides)?);
    let config = Config::from_pairs(pairs)?;
    let (model, mut params) = Uaglnet::build(&config.model, 0)?;
    load_params(&mut params, &a)?;
    Ok(Loaded {
        config,
        model,
        params,
        zero_noise: false,
    })
}

impl<T: Real> Loaded<T> {
    /// Held-out split report; `train = true` scores the training split.
    pub fn evaluate(&self, train: bool) -> Result<Report> {
        let t = &self.config.train;
        let spec = if train { t.train_spec() } else { t.val_spec() };
        evaluate_scenes(
            &self.model,
            &self.params,
            (0..spec.count).map(|i| spec.scene(i)),
            t.tile,
            t.threshold,
            derive_seed(&[t.seed, EVAL]),
        )
    }

    pub fn infer(&self, image: &Tensor<T>) -> Result<TileOutput<T>> {
        infer_image(
            &self.model,
            &self.params,
            image,
            self.config.train.tile,
            (!self.zero_noise).then(|| derive_seed(&[self.config.train.seed, EVAL])),
        )
    }

    /// Reads an image, predicts and writes the thresholded mask.
    pub fn predict_file(&self, image: impl AsRef<Path>, out_mask: impl AsRef<Path>) -> Result<Tensor<T>> {
        let img = load_image::<T>(image)?;
        let mask = threshold_mask(&self.infer(&img)?.logits, self.config.train.threshold);
        save_mask(out_mask, &mask)?;
        Ok(mask)
    }

    /// Writes `<prefix>_local.pgm` and `<prefix>_global.pgm`.
    pub fn export_uncertainty(&self, image: impl AsRef<Path>, out_prefix: &str) -> Result<(Tensor<T>, Tensor<T>)> {
        let img = load_image::<T>(image)?;
        let out = self.infer(&img)?;
        save_gray(format!("{out_prefix}_local.pgm"), &out.u_local)?;
        save_gray(format!("{out_prefix}_global.pgm"), &out.u_global)?;
        Ok((out.u_local, out.u_global))
    }
}
