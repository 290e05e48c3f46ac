//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset: `cargo test -p zsla-core --test acceptance -- 1 2 7`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsla_core::detector::{loss_bce, loss_umc, Batch, Detection, Objective, Pooling, ResponseMap};
use zsla_core::evalkit::{
    ap_at_50, auroc, build_class_attribute_matrix, eszsl_fit, eszsl_predict, eszsl_solve, evaluate_detections,
    gzsl_evaluate, indicator_targets, localization_accuracy, localization_correct, stationarity_residual, Provenance,
};
use zsla_core::numerics::{Bindings, Graph, Tensor};
use zsla_core::pipeline::{
    evaluate_bank, run_pipeline, train_seen, walr_sweep, write_run, DataBundle, Logger, PipelineConfig, RunOutcome,
};
use zsla_core::synthdata::{build_vocabulary_with, FeatureMap, LabelSet};
use zsla_core::synthesis::{rec_loss_and_grad, union, IntersectionNet, NetConfig, RecStep};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Components where both gradients are below this magnitude are compared in
/// absolute terms.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_RUNTIME: Duration = Duration::from_secs(60);

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between `grad` and central differences of `f`
/// around `x`.
fn fd_check(x: &[f64], grad: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn bce_error(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=12);
    let logits = uniform(rng, n, -6.0, 6.0);
    let phi: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let targets: Vec<f64> = phi.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mut g = Graph::new();
    let x = g.param("logits");
    let t = g.input("targets");
    let loss = g.bce_with_logits(x, t);
    let (xt, tt) = (Tensor::vector(logits.clone()).unwrap(), Tensor::vector(targets).unwrap());
    g.forward(&Bindings::new().bind("logits", &xt).bind("targets", &tt), loss).unwrap();
    let grad = g.backward(loss, &Tensor::scalar(1.0)).unwrap().remove("logits").unwrap();
    fd_check(&logits, grad.data(), |v| loss_bce(v, &phi))
}

fn umc_error(rng: &mut ChaCha8Rng) -> f64 {
    let (w, h) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let n = rng.random_range(1..=4);
    let cal = uniform(rng, w * h * n, -5.0, 5.0);
    let mut g = Graph::new();
    let x = g.param("cal");
    let dist = g.argmax_sq_dist(x, w, h);
    let prob = g.sigmoid(x);
    let mass = g.mul(prob, dist);
    let loss = g.sum_all(mass);
    let xt = Tensor::new(vec![1, w * h, n], cal.clone()).unwrap();
    g.forward(&Bindings::new().bind("cal", &xt), loss).unwrap();
    let grad = g.backward(loss, &Tensor::scalar(1.0)).unwrap().remove("cal").unwrap();
    fd_check(&cal, grad.data(), |v| loss_umc(&ResponseMap::from_calibrated(w, h, n, v.to_vec(), 5.0)))
}

fn rec_error(rng: &mut ChaCha8Rng) -> f64 {
    let c = 8;
    let config = NetConfig {
        heads: 2,
        head_dim: 4,
        ffn_mult: 2,
        dropout: 0.1,
    };
    let mut net = IntersectionNet::new(c, config, rng.random()).unwrap();
    let step = RecStep {
        adjective_pair: (uniform(rng, c, 0.0, 1.0), uniform(rng, c, 0.0, 1.0)),
        part_pair: (uniform(rng, c, 0.0, 1.0), uniform(rng, c, 0.0, 1.0)),
        target: uniform(rng, c, 0.0, 1.0),
    };
    let masks = (net.sample_masks(rng), net.sample_masks(rng));
    let (_, grads) = rec_loss_and_grad(&net, &step, Some(&masks)).unwrap();
    let names: Vec<String> = net.params().keys().cloned().collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let x = net.params()[&name].data().to_vec();
        let grad = grads.get(&name).map_or_else(|| vec![0.0; x.len()], |t| t.data().to_vec());
        let err = fd_check(&x, &grad, |v| {
            net.params_mut().get_mut(&name).unwrap().data_mut().copy_from_slice(v);
            rec_loss_and_grad(&net, &step, Some(&masks)).unwrap().0
        });
        net.params_mut().get_mut(&name).unwrap().data_mut().copy_from_slice(&x);
        worst = worst.max(err);
    }
    worst
}

fn seen_loss_error(rng: &mut ChaCha8Rng, pooling: Pooling, lambda: f64) -> f64 {
    let (w, h, c) = (3, 3, 5);
    let b = rng.random_range(1..=3);
    let attributes: Vec<usize> = (0..4).collect();
    let features: Vec<FeatureMap> = (0..b)
        .map(|_| FeatureMap {
            width: w,
            height: h,
            channels: c,
            data: uniform(rng, w * h * c, -1.0, 1.0),
        })
        .collect();
    let labels: Vec<LabelSet> = (0..b)
        .map(|_| {
            let mut placed = Vec::new();
            for &a in &attributes {
                if rng.random_bool(0.5) {
                    placed.push((a, (rng.random_range(0..w), rng.random_range(0..h))));
                }
            }
            LabelSet::from_assignments(4, placed)
        })
        .collect();
    let batch = Batch::new(&features.iter().collect::<Vec<_>>(), &labels.iter().collect::<Vec<_>>(), &attributes).unwrap();
    // small gamma keeps the calibrated logits inside the unclamped range
    let objective = Objective {
        gamma: 1.5,
        lambda,
        pooling,
    };
    let bank = Tensor::new(vec![c, attributes.len()], uniform(rng, c * attributes.len(), -1.0, 1.0)).unwrap();
    let (_, grad) = objective.loss_and_grad(&bank, &batch).unwrap();
    fd_check(bank.data(), grad.data(), |v| {
        let t = Tensor::new(vec![c, attributes.len()], v.to_vec()).unwrap();
        objective.loss_and_grad(&t, &batch).unwrap().0
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = BTreeMap::new();
    let mut note = |name: &str, e: f64| {
        let w = worst.entry(name.to_string()).or_insert(0.0f64);
        *w = w.max(e);
    };
    for _ in 0..20 {
        note("L_bce", bce_error(&mut rng));
        note("L_umc", umc_error(&mut rng));
    }
    for _ in 0..3 {
        note("L_rec", rec_error(&mut rng));
    }
    for _ in 0..5 {
        note("seen/lg+umc", seen_loss_error(&mut rng, Pooling::LocationGuided, 0.2));
        note("seen/max+umc", seen_loss_error(&mut rng, Pooling::Max, 0.2));
        note("seen/max", seen_loss_error(&mut rng, Pooling::Max, 0.0));
    }
    let elapsed = start.elapsed();
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.values().all(|&e| e < GRAD_REL_TOL), || {
        format!("max relative error above {GRAD_REL_TOL:e}: {summary}")
    })?;
    ensure(elapsed < GRAD_RUNTIME, || format!("took {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!("{summary}; {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

const METRIC_INSTANCES: usize = 200;
const METRIC_TOL: f64 = 1e-12;

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn brute_ap50(scores: &[f64], labels: &[bool]) -> f64 {
    // rank of image i: images with a higher score, or equal score and lower index
    let rank = |i: usize| {
        (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let positives = labels.iter().filter(|l| **l).count();
    let mut sum = 0.0;
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        let r = rank(i);
        if r < 50 {
            let hits = (0..scores.len()).filter(|&j| labels[j] && rank(j) <= r).count();
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / positives.min(50) as f64
}

fn hand_mla() -> Result<(), String> {
    let vocab = build_vocabulary_with(&PipelineConfig::default().vocabulary).map_err(|e| e.to_string())?;
    let attributes = vec![0, 1];
    let det = |cells: Vec<(usize, usize)>| Detection {
        logits: vec![1.0, 1.0],
        posteriors: vec![0.5, 0.5],
        cells,
    };
    // attribute 0: positives at (2,3) [pred (2,3)] and (3,4) [pred (2,3)]
    // attribute 1: positives at (4,3) [pred (2,3)] and (0,0) [pred (5,5)]
    let dets = [
        det(vec![(2, 3), (0, 0)]),
        det(vec![(2, 3), (2, 3)]),
        det(vec![(2, 3), (5, 5)]),
        det(vec![(1, 1), (1, 1)]),
    ];
    let labels = [
        LabelSet::from_assignments(vocab.len(), [(0, (2, 3))]),
        LabelSet::from_assignments(vocab.len(), [(0, (3, 4)), (1, (4, 3))]),
        LabelSet::from_assignments(vocab.len(), [(1, (0, 0))]),
        LabelSet::from_assignments(vocab.len(), []),
    ];
    let report = evaluate_detections(
        zsla_core::detector::BankRole::Seen,
        "hand",
        &vocab,
        &attributes,
        &dets.iter().collect::<Vec<_>>(),
        &labels.iter().collect::<Vec<_>>(),
    )
    .map_err(|e| e.to_string())?;
    ensure(report.attributes[0].la == Some(1.0), || format!("LA(0) = {:?}", report.attributes[0].la))?;
    ensure(report.attributes[1].la == Some(0.0), || format!("LA(1) = {:?}", report.attributes[1].la))?;
    ensure(report.mla == 0.5, || format!("mLA = {}", report.mla))?;
    ensure(
        localization_accuracy(&[((2, 3), (2, 3)), ((2, 3), (3, 4)), ((2, 3), (4, 3))]) == Some(2.0 / 3.0),
        || "three-example LA".into(),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for inst in 0..METRIC_INSTANCES {
        let n = rng.random_range(2..=100);
        // half the instances draw from a coarse grid to force ties
        let coarse = inst % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..8) as f64 / 8.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let p = ap_at_50(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((a - brute_auroc(&scores, &labels)).abs());
        worst = worst.max((p - brute_ap50(&scores, &labels)).abs());
    }
    ensure(worst <= METRIC_TOL, || format!("max deviation {worst:e}"))?;
    ensure(localization_correct((2, 3), (2, 3)), || "(2,3)/(2,3) should be correct".into())?;
    ensure(localization_correct((2, 3), (3, 4)), || "(2,3)/(3,4) should be correct".into())?;
    ensure(!localization_correct((2, 3), (4, 3)), || "(2,3)/(4,3) should be incorrect".into())?;
    hand_mla()?;
    Ok(format!("{METRIC_INSTANCES} instances, max deviation {worst:.1e}; localization cases match"))
}

// ---------------------------------------------------------------- criterion 3

const INTERSECT_INPUTS: usize = 1000;
const INVARIANCE_TOL: f64 = 1e-9;

fn check_net(net: &IntersectionNet, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let c = net.channels();
    let mut worst: f64 = 0.0;
    for _ in 0..INTERSECT_INPUTS {
        let a = uniform(rng, c, -1.0, 1.0);
        let b = uniform(rng, c, -1.0, 1.0);
        let ab = net.intersect(&a, &b).map_err(|e| e.to_string())?;
        let ba = net.intersect(&b, &a).map_err(|e| e.to_string())?;
        let u = union(&ab, &net.intersect(&a, &a).map_err(|e| e.to_string())?);
        for v in [&ab, &ba, &u] {
            ensure(v.iter().all(|&x| x >= 0.0), || "negative output entry".into())?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure((norm - 1.0).abs() < INVARIANCE_TOL, || format!("output norm {norm}"))?;
        }
        let d = ab.iter().zip(&ba).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    ensure(worst < INVARIANCE_TOL, || format!("order changes the intersection by {worst:e}"))?;
    Ok(worst)
}

fn criterion_3(trained: &RunOutcome) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let fresh = IntersectionNet::new(64, NetConfig::default(), 17).map_err(|e| e.to_string())?;
    let untrained = check_net(&fresh, &mut rng)?;
    let trained = check_net(&trained.net.net, &mut rng)?;
    Ok(format!(
        "{INTERSECT_INPUTS} inputs per net; max order difference {untrained:.1e} untrained, {trained:.1e} trained"
    ))
}

// ---------------------------------------------------------------- criterion 4

const SEEN_MAUROC_MIN: f64 = 0.95;
const UNSEEN_MAUROC_MIN: f64 = 0.85;
const RANDOM_GAP_MIN: f64 = 0.30;
const DIRECT_COSINE_MIN: f64 = 0.7;
const PIPELINE_RUNTIME: Duration = Duration::from_secs(15 * 60);

fn criterion_4(run: &RunOutcome, elapsed: Duration) -> Outcome {
    let e = &run.report.evaluation;
    let (seen, synth, random) = (e.seen.mauroc, e.synthesized.mauroc, e.random.mauroc);
    let cosine = e.cosine_to_direct.ok_or("no direct reference bank")?;
    let line = format!(
        "seen {seen:.4}, synthesized {synth:.4}, random {random:.4}, cosine to direct {cosine:.4}, {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure(seen >= SEEN_MAUROC_MIN, || format!("seen mAUROC below {SEEN_MAUROC_MIN}: {line}"))?;
    ensure(synth >= UNSEEN_MAUROC_MIN, || format!("synthesized mAUROC below {UNSEEN_MAUROC_MIN}: {line}"))?;
    ensure(synth - random >= RANDOM_GAP_MIN, || format!("gap to random below {RANDOM_GAP_MIN}: {line}"))?;
    ensure(cosine >= DIRECT_COSINE_MIN, || format!("cosine below {DIRECT_COSINE_MIN}: {line}"))?;
    ensure(elapsed <= PIPELINE_RUNTIME, || format!("too slow: {line}"))?;
    Ok(line)
}

// ---------------------------------------------------------------- criterion 5

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_MAUROC_SPREAD: f64 = 0.05;

fn criterion_5(bundle: &DataBundle) -> Outcome {
    let arms = [
        ("umc+lg", Pooling::LocationGuided, true),
        ("umc", Pooling::Max, true),
        ("neither", Pooling::Max, false),
    ];
    let scenes = bundle.eval_scenes();
    let mut mla = [0.0; 3];
    let mut mauroc = [0.0; 3];
    for &seed in &ABLATION_SEEDS {
        let cfg = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        }
        .with_stage_seeds();
        for (k, &(_, pooling, umc)) in arms.iter().enumerate() {
            let mut det = cfg.detector.clone();
            det.pooling = pooling;
            det.umc = umc;
            let bank = train_seen(bundle, &bundle.dataset.labels, &det).map_err(|e| e.to_string())?.bank;
            let r = evaluate_bank(bundle, &bank, &scenes, "eval", det.gamma).map_err(|e| e.to_string())?;
            mla[k] += r.mla / ABLATION_SEEDS.len() as f64;
            mauroc[k] += r.mauroc / ABLATION_SEEDS.len() as f64;
        }
    }
    let line = arms
        .iter()
        .enumerate()
        .map(|(k, (name, _, _))| format!("{name} mLA {:.4} mAUROC {:.4}", mla[k], mauroc[k]))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(mla[0] > mla[1] && mla[1] > mla[2], || format!("mLA ordering violated: {line}"))?;
    let spread = mauroc.iter().cloned().fold(f64::MIN, f64::max) - mauroc.iter().cloned().fold(f64::MAX, f64::min);
    ensure(spread <= ABLATION_MAUROC_SPREAD, || format!("mAUROC spread {spread:.4}: {line}"))?;
    Ok(line)
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(bundle: &DataBundle) -> Outcome {
    let cfg = PipelineConfig::default();
    let report = walr_sweep(bundle, &cfg, &Logger::silent()).map_err(|e| e.to_string())?;
    let levels = &report.levels;
    ensure(levels.len() == 4 && levels.iter().all(|l| l.unseen_mauroc.n == 5), || {
        "expected 5 runs at each of 4 levels".into()
    })?;
    let line = levels
        .iter()
        .map(|l| {
            format!(
                "walr {}: mAUROC {:.4} [{:.4}, {:.4}] H zsla {:.4} manual {:.4}",
                l.walr,
                l.unseen_mauroc.mean,
                l.unseen_mauroc.lower(),
                l.unseen_mauroc.upper(),
                l.h_zsla.mean,
                l.h_manual.mean
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    for pair in levels.windows(2) {
        let (a, b) = (&pair[0].unseen_mauroc, &pair[1].unseen_mauroc);
        ensure(b.mean <= a.mean || a.overlaps(b), || {
            format!("mAUROC rises beyond CI between walr {} and {}: {line}", pair[0].walr, pair[1].walr)
        })?;
    }
    let (first, last) = (&levels[0], &levels[levels.len() - 1]);
    let drop_zsla = first.h_zsla.mean - last.h_zsla.mean;
    let drop_manual = first.h_manual.mean - last.h_manual.mean;
    ensure(drop_zsla < drop_manual, || {
        format!("ZSLA H drops {drop_zsla:.4}, manual {drop_manual:.4}: {line}")
    })?;
    ensure(last.h_zsla.mean >= last.h_manual.mean, || format!("ZSLA below manual at walr 0.5: {line}"))?;
    Ok(format!("{line}; H drop zsla {drop_zsla:.4} vs manual {drop_manual:.4}"))
}

// ---------------------------------------------------------------- criterion 7

const RESIDUAL_INSTANCES: usize = 50;
const RESIDUAL_TOL: f64 = 1e-8;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn criterion_7(bundle: &DataBundle) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for _ in 0..RESIDUAL_INSTANCES {
        let (d, n, a, z) = (
            rng.random_range(2..=12),
            rng.random_range(5..=40),
            rng.random_range(2..=10),
            rng.random_range(2..=8),
        );
        let x = random_matrix(&mut rng, d, n);
        let s = random_matrix(&mut rng, a, z);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..z)).collect();
        let y = indicator_targets(&classes, z).map_err(|e| e.to_string())?;
        let gamma = 10f64.powi(rng.random_range(-3..=3));
        let lambda = 10f64.powi(rng.random_range(-3..=3));
        let v = eszsl_solve(&x, &y, &s, gamma, lambda).map_err(|e| e.to_string())?;
        worst = worst.max(stationarity_residual(&x, &y, &s, gamma, lambda, &v).map_err(|e| e.to_string())?);
    }
    ensure(worst < RESIDUAL_TOL, || format!("stationarity residual {worst:e}"))?;

    // oracle features: every image is described by its class's clean row
    let ds = &bundle.dataset;
    let class_of = bundle.class_of();
    let clean: Vec<Vec<bool>> = ds.labels.iter().map(|l| l.phi.clone()).collect();
    let matrix = build_class_attribute_matrix(&clean, &class_of, ds.classes.len(), Provenance::Manual, None)
        .map_err(|e| e.to_string())?;
    let descriptors: Vec<Vec<f64>> = class_of.iter().map(|&c| matrix.row(c).to_vec()).collect();
    let oracle = gzsl_evaluate(&descriptors, ds, &matrix, &PipelineConfig::default().evaluation.gzsl)
        .map_err(|e| e.to_string())?;
    ensure(oracle.s == 1.0 && oracle.u == 1.0 && oracle.h == 1.0, || {
        format!("oracle case S {} U {} H {}", oracle.s, oracle.u, oracle.h)
    })?;

    // scaling features by c with γ scaled by c² rescales V by 1/c and leaves
    // every score unchanged
    let mut flips = 0;
    for _ in 0..RESIDUAL_INSTANCES {
        let (d, n, a, z) = (8, 30, 6, 5);
        let x = random_matrix(&mut rng, d, n);
        let s = random_matrix(&mut rng, a, z);
        let classes: Vec<usize> = (0..n).map(|i| i % z).collect();
        let test = random_matrix(&mut rng, d, 20);
        let c: f64 = rng.random_range(0.1..10.0);
        let (gamma, lambda) = (0.5, 0.1);
        let v = eszsl_fit(&x, &classes, &s, gamma, lambda).map_err(|e| e.to_string())?;
        let vc = eszsl_fit(&(&x * c), &classes, &s, gamma * c * c, lambda).map_err(|e| e.to_string())?;
        if eszsl_predict(&v, &test, &s) != eszsl_predict(&vc, &(&test * c), &s) {
            flips += 1;
        }
    }
    ensure(flips == 0, || format!("{flips} scaled instances changed their argmax"))?;
    Ok(format!(
        "residual {worst:.1e} over {RESIDUAL_INSTANCES}; oracle S=U=H=1 (γ {}, λ {}); scaling keeps argmax",
        oracle.gamma, oracle.lambda
    ))
}

// ---------------------------------------------------------------- criterion 8

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("run dir") {
        let path = entry.expect("dir entry").path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, fs::read(&path).expect("artifact"));
    }
    out
}

fn criterion_8(bundle: &DataBundle, first: &RunOutcome) -> Outcome {
    let second = run_pipeline(bundle, &first.config, &Logger::silent()).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_run(&a, bundle, first).map_err(|e| e.to_string())?;
    write_run(&b, bundle, &second).map_err(|e| e.to_string())?;
    let (fa, fb) = (files(&a), files(&b));
    ensure(fa.keys().eq(fb.keys()), || "runs wrote different file sets".into())?;
    let differing: Vec<&String> = fa.keys().filter(|k| fa[*k] != fb[*k]).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    Ok(format!("{} artifacts byte-identical", fa.len()))
}

// ---------------------------------------------------------------- driver

struct Shared {
    bundle: DataBundle,
    run: RunOutcome,
    elapsed: Duration,
}

fn shared() -> Result<Shared, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let start = Instant::now();
        let cfg = PipelineConfig::default();
        let bundle = DataBundle::generate(&cfg).map_err(|e| e.to_string())?;
        let run = run_pipeline(&bundle, &cfg, &Logger::silent()).map_err(|e| e.to_string())?;
        Ok(Shared {
            bundle,
            run,
            elapsed: start.elapsed(),
        })
    })
}

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n} ({name}): PASS {detail}");
            true
        }
        Err(reason) => {
            println!("criterion {n} ({name}): FAIL {reason}");
            false
        }
    }
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut ok = true;
    if wanted(1) {
        ok &= report(1, "gradient correctness", criterion_1());
    }
    if wanted(2) {
        ok &= report(2, "metric oracles", criterion_2());
    }
    if !(3..=8).any(wanted) {
        return if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    }
    let shared = match shared() {
        Ok(s) => s,
        Err(e) => {
            for n in (3..=8).filter(|&n| wanted(n)) {
                report(n, "pipeline", Err(format!("default pipeline run failed: {e}")));
            }
            return ExitCode::FAILURE;
        }
    };
    let checks: [(usize, &str, &dyn Fn() -> Outcome); 6] = [
        (3, "intersection invariants", &|| criterion_3(&shared.run)),
        (4, "pipeline quality", &|| criterion_4(&shared.run, shared.elapsed)),
        (5, "ablation trend", &|| criterion_5(&shared.bundle)),
        (6, "WALR robustness", &|| criterion_6(&shared.bundle)),
        (7, "ESZSL correctness", &|| criterion_7(&shared.bundle)),
        (8, "reproducibility", &|| criterion_8(&shared.bundle, &shared.run)),
    ];
    for (n, name, check) in checks {
        if wanted(n) {
            ok &= report(n, name, check());
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
