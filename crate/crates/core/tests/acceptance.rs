//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p uaglnet --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uaglnet::autodiff::gradcheck::{self, TOLERANCE};
use uaglnet::config::Config;
use uaglnet::data::{DatasetSpec, Difficulty};
use uaglnet::encoder::{Encoder, EncoderConfig};
use uaglnet::fusion::{FusionStrategy, Glf};
use uaglnet::metrics::{confusion_counts, metrics_from_counts, Report};
use uaglnet::model::{ModelConfig, Noise, UadMode, Uaglnet};
use uaglnet::nn::{Graph, Init, ParamStore};
use uaglnet::objectives::{bce_loss, dice_loss, kl_standard_normal};
use uaglnet::train::{evaluate_scenes, Trainer};
use uaglnet::uad::{aggregate, reparameterized_samples, GaussianField};
use uaglnet::{Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, || format!("took {elapsed:.1?}, limit {limit_s}s"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_suite(10, 20_240_601).map_err(|e| e.to_string())?;
    let (worst_name, worst) = results
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("empty registry")?;
    ensure(worst < TOLERANCE, || format!("{worst_name}: relative error {worst:.2e}"))?;
    within(start.elapsed(), 120)?;
    Ok(format!(
        "{} cases x 10 instances, worst {worst:.2e} ({worst_name}), {:.1?}",
        results.len(),
        start.elapsed()
    ))
}

fn full_size_shapes() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::<f32>::new();
    let (encoder, glf) = {
        let mut init = Init::new(&mut store, 0);
        let e = Encoder::new(&mut init, &cfg).map_err(|e| e.to_string())?;
        let g = Glf::new(&mut init, cfg.widths, 64, &FusionStrategy::default()).map_err(|e| e.to_string())?;
        (e, g)
    };
    let mut g = Graph::new(&store, false, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pixels: Vec<f64> = (0..3 * 512 * 512).map(|_| rng.random::<f64>()).collect();
    let x = g.constant(Tensor::from_f64(&[3, 512, 512], &pixels).map_err(|e| e.to_string())?);
    let pyramid = encoder.forward(&mut g, x).map_err(|e| e.to_string())?;
    let expected = [[64, 128, 128], [128, 64, 64], [256, 32, 32], [512, 16, 16]];
    for (lv, shape) in pyramid.levels.iter().zip(expected) {
        ensure(g.shape(*lv) == shape, || format!("level shape {:?}, expected {shape:?}", g.shape(*lv)))?;
    }
    let fused = glf.forward(&mut g, &pyramid).map_err(|e| e.to_string())?;
    let (fl, fg) = (g.shape(fused.local).to_vec(), g.shape(fused.global).to_vec());
    ensure(fl == fg && fl == [64, 128, 128], || format!("F_L {fl:?}, F_G {fg:?}"))?;
    within(start.elapsed(), 60)?;
    Ok(format!("64x128², 128x64², 256x32², 512x16²; F_L = F_G = {fl:?}; {:.1?}", start.elapsed()))
}

fn parameter_oracle() -> Outcome {
    let mut store = ParamStore::<f32>::new();
    Encoder::new(&mut Init::new(&mut store, 0), &EncoderConfig::default()).map_err(|e| e.to_string())?;
    let (got, want) = (store.num_scalars(), common::full_encoder());
    ensure(got == want, || format!("encoder has {got} parameters, analytic sum {want}"))?;
    Ok(format!("encoder parameters {got} = analytic {want}"))
}

fn uad_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::new();
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()).unwrap()
    };
    let (fl, fg) = (rand_t(&[16, 32, 32]), rand_t(&[16, 32, 32]));
    let (l, g) = (tape.constant(fl.clone()), tape.constant(fg.clone()));
    let zero = tape.constant(Tensor::zeros(&[1, 32, 32]));
    let one = tape.constant(Tensor::ones(&[1, 32, 32]));
    let sum = aggregate(&mut tape, l, g, zero, zero).map_err(|e| e.to_string())?;
    let expected: Vec<f64> = fl.data().iter().zip(fg.data()).map(|(a, b)| b + a).collect();
    ensure(tape.value(sum).data() == expected.as_slice(), || "U = 0 is not the exact branch sum".into())?;
    let off = aggregate(&mut tape, l, g, one, one).map_err(|e| e.to_string())?;
    ensure(tape.value(off).data().iter().all(|&v| v == 0.0), || "U = 1 is not exactly zero".into())?;

    let mut cfg = ModelConfig::desk();
    cfg.uad = UadMode::Off;
    let (model, store) = Uaglnet::build::<f64>(&cfg, 5).map_err(|e| e.to_string())?;
    let mut graph = Graph::new(&store, false, 0);
    let x = graph.constant(Tensor::full(&[3, 64, 64], 0.4));
    let out = model.forward(&mut graph, x, Noise::Zero).map_err(|e| e.to_string())?;
    let (a, b) = (graph.value(out.fused.local), graph.value(out.fused.global));
    let branch_sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(a, b)| b + a).collect();
    ensure(graph.value(out.decoded).data() == branch_sum.as_slice(), || {
        "disabled UAD does not decode to F_L + F_G".into()
    })?;
    Ok("U=0 gives F_L+F_G bitwise, U=1 gives 0, UAD-off model decodes the branch sum".into())
}

fn reparameterization_statistics() -> Outcome {
    let mu = [0.0, -1.5, 3.0, 0.25, 10.0, -7.0];
    let sigma = [1.0, 0.5, 2.0, 0.01, 4.0, 1e-4];
    let mut tape = Tape::<f64>::new();
    let field = GaussianField {
        mu: tape.constant(Tensor::from_f64(&[1, 2, 3], &mu).unwrap()),
        sigma: tape.constant(Tensor::from_f64(&[1, 2, 3], &sigma).unwrap()),
    };
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples = reparameterized_samples(&mut tape, &field, n, &mut rng).map_err(|e| e.to_string())?;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for p in 0..mu.len() {
        let xs: Vec<f64> = samples.iter().map(|s| tape.value(*s).data()[p]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mean_err = (mean - mu[p]).abs() / (sigma[p] / (n as f64).sqrt());
        let var_err = (var / (sigma[p] * sigma[p]) - 1.0).abs();
        ensure(mean_err < 4.0, || format!("pixel {p}: mean off by {mean_err:.2} standard errors"))?;
        ensure(var_err < 0.1, || format!("pixel {p}: variance off by {:.1}%", 100.0 * var_err))?;
        worst_mean = worst_mean.max(mean_err);
        worst_var = worst_var.max(var_err);
    }
    Ok(format!(
        "{} pixels x {n} draws; worst mean {worst_mean:.2} SE, worst variance {:.2}%",
        mu.len(),
        100.0 * worst_var
    ))
}

fn loss_closed_forms() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let mut kl = |m: f64, s: f64| {
        let f = GaussianField {
            mu: tape.constant(Tensor::from_f64(&[1, 1, 1], &[m]).unwrap()),
            sigma: tape.constant(Tensor::from_f64(&[1, 1, 1], &[s]).unwrap()),
        };
        let v = kl_standard_normal(&mut tape, &[f]).unwrap();
        tape.value(v).item()
    };
    let values = [(kl(0.0, 1.0), 0.0), (kl(1.0, 1.0), 0.5), (kl(0.0, 2.0), 0.8069)];
    for (i, (got, want)) in values.iter().enumerate() {
        let tol = if i == 2 { 1e-4 } else { 1e-6 };
        ensure((got - want).abs() < tol, || format!("KL case {i}: {got} vs {want}"))?;
    }
    let exact = 0.5 * (4.0 - 1.0 - 4f64.ln());
    ensure((values[2].0 - exact).abs() < 1e-6, || format!("KL(0,2) = {} vs {exact}", values[2].0))?;

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let y = Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let bce = bce_loss(&mut tape, &[x], &[&y]).unwrap();
    let bce = tape.value(bce).item();
    ensure((bce - std::f64::consts::LN_2).abs() < 1e-9, || format!("BCE at logit 0 = {bce}"))?;
    let half = Tensor::full(&[1, 2, 2], 0.5);
    let dice = dice_loss(&mut tape, &[x], &[&half]).unwrap();
    let dice = tape.value(dice).item();
    ensure((dice - 0.4).abs() < 1e-9, || format!("dice example = {dice}"))?;
    Ok(format!(
        "KL {:.6}/{:.6}/{:.6}, BCE {bce:.9}, dice {dice:.9}",
        values[0].0, values[1].0, values[2].0
    ))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let density: f64 = rng.random();
        let pred: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
        let target: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
        let logits: Vec<f64> = pred.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
        let mask: Vec<f64> = target.iter().map(|&t| f64::from(u8::from(t))).collect();
        let c = confusion_counts(
            &Tensor::<f64>::from_f64(&[1, 16, 16], &logits).unwrap(),
            &Tensor::from_f64(&[1, 16, 16], &mask).unwrap(),
            0.5,
        )
        .map_err(|e| e.to_string())?;
        let m = metrics_from_counts(&c);
        let count = |f: &dyn Fn(bool, bool) -> bool| pred.iter().zip(&target).filter(|(p, t)| f(**p, **t)).count() as f64;
        let both = count(&|p, t| p && t);
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let p = div(both, count(&|p, _| p));
        let r = div(both, count(&|_, t| t));
        let f1 = div(2.0 * p * r, p + r);
        let iou = div(both, count(&|p, t| p || t));
        for (a, b) in [(m.precision, p), (m.recall, r), (m.f1, f1), (m.iou, iou)] {
            worst = worst.max((a - b).abs());
        }
        let identity = (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs();
        ensure(identity < 1e-12, || format!("case {case}: F1/IoU identity off by {identity:e}"))?;
    }
    ensure(worst <= 1e-12, || format!("worst disagreement {worst:e}"))?;
    Ok(format!("1000 random 16x16 pairs, worst disagreement {worst:e}"))
}

struct DeskRun {
    trainer: Trainer<f32>,
    report: Report,
    elapsed: Duration,
    first_loss: f64,
    last_loss: f64,
}

fn desk_run(uad: UadMode) -> Result<DeskRun, String> {
    let mut config = Config::desk();
    config.model.uad = uad;
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(config).map_err(|e| e.to_string())?;
    let mut sink = std::io::sink();
    let records = trainer.run(&mut sink).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let report = trainer.validate().map_err(|e| e.to_string())?;
    let mean = |r: &[uaglnet::train::StepRecord]| r.iter().map(|r| r.loss).sum::<f64>() / r.len() as f64;
    Ok(DeskRun {
        first_loss: mean(&records[..10]),
        last_loss: mean(&records[records.len() - 10..]),
        trainer,
        report,
        elapsed,
    })
}

fn desk_convergence(on: &DeskRun, off: &DeskRun) -> Outcome {
    println!("    {:<10} {:>9} {:>9} {:>9} {:>9} {:>10} {:>9}", "UAD", "IoU", "F1", "P", "R", "loss", "time");
    for (name, r) in [("on", on), ("off", off)] {
        let m = &r.report.metrics;
        println!(
            "    {name:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>4.2}->{:<4.2} {:>8.1?}",
            m.iou, m.f1, m.precision, m.recall, r.first_loss, r.last_loss, r.elapsed
        );
    }
    let steps = on.trainer.step;
    ensure(steps <= 500, || format!("ran {steps} steps"))?;
    ensure(on.report.metrics.iou >= 0.85, || format!("UAD-on IoU {:.4} < 0.85", on.report.metrics.iou))?;
    ensure(off.report.metrics.iou >= 0.85, || format!("UAD-off IoU {:.4} < 0.85", off.report.metrics.iou))?;
    within(on.elapsed, 900)?;
    within(off.elapsed, 900)?;
    Ok(format!(
        "{steps} steps; IoU on {:.4} ({:.0?}), off {:.4} ({:.0?})",
        on.report.metrics.iou, on.elapsed, off.report.metrics.iou, off.elapsed
    ))
}

fn robustness(on: &DeskRun, off: &DeskRun) -> Outcome {
    let base = Config::desk().train;
    let settings = [
        ("clean", Difficulty::clean()),
        ("noise std 5", Difficulty::noisy(5.0)),
        ("degrade x16", Difficulty::degraded(16)),
    ];
    println!("    {:<12} {:>9} {:>9}", "condition", "IoU on", "IoU off");
    let mut summary = Vec::new();
    for (name, difficulty) in settings {
        let spec = DatasetSpec { difficulty, ..base.val_spec() };
        let mut ious = [0.0; 2];
        for (slot, run) in ious.iter_mut().zip([on, off]) {
            let tr = &run.trainer;
            let report = evaluate_scenes(
                &tr.model,
                &tr.params,
                (0..spec.count).map(|i| spec.scene(i)),
                base.tile,
                base.threshold,
                0,
            )
            .map_err(|e| format!("{name}: {e}"))?;
            let iou = report.metrics.iou;
            ensure((0.0..=1.0).contains(&iou), || format!("{name}: IoU {iou}"))?;
            *slot = iou;
        }
        println!("    {name:<12} {:>9.4} {:>9.4}", ious[0], ious[1]);
        summary.push(format!("{name} {:.3}/{:.3}", ious[0], ious[1]));
    }
    Ok(format!("on/off IoU: {}", summary.join(", ")))
}

fn determinism(on: &DeskRun) -> Outcome {
    let again = desk_run(UadMode::Full)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    on.trainer.save(&a).map_err(|e| e.to_string())?;
    again.trainer.save(&b).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    ensure(a == b, || "checkpoints differ".into())?;
    Ok(format!("two seeded desk runs wrote identical {}-byte checkpoints", a.len()))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "full-size shapes", full_size_shapes());
    report(3, "encoder parameter count", parameter_oracle());
    report(4, "UAD reduction", uad_reduction());
    report(5, "reparameterization statistics", reparameterization_statistics());
    report(6, "loss closed forms", loss_closed_forms());
    report(7, "metrics oracle", metrics_oracle());

    let runs = desk_run(UadMode::Full).and_then(|on| desk_run(UadMode::Off).map(|off| (on, off)));
    match &runs {
        Ok((on, off)) => {
            report(8, "desk convergence", desk_convergence(on, off));
            report(9, "robustness", robustness(on, off));
            report(10, "determinism", determinism(on));
        }
        Err(e) => {
            for (n, name) in [(8, "desk convergence"), (9, "robustness"), (10, "determinism")] {
                report(n, name, Err(format!("desk training failed: {e}")));
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
