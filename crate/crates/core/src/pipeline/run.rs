use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, ThresholdMode};
use super::log::Logger;
use super::PipelineError;
use crate::detector::{detect_all, train_detectors, BankRole, Detection, DetectorBank, DetectorConfig, TrainedBank};
use crate::evalkit::{
    annotate, build_class_attribute_matrix, choose_threshold, evaluate_detections, gzsl_evaluate, ClassAttributeMatrix,
    GzslReport, MetricReport, Provenance, ThresholdChoice,
};
use crate::synthdata::{
    build_vocabulary_with, derive_seed, generate_dataset, inject_walr_noise, io, AttributeVocabulary, Dataset,
    FeatureMap, FeatureOracle, LabelSet, SplitRole, WalrOutcome,
};
use crate::synthesis::{reconstruction_losses, synthesize_unseen, train_dnr, BaseAttributeBank, TrainedNet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const NOISY_LABELS_FILE: &str = "noisy_labels.csv";

const NOISE_SEED: u64 = 3;
const RANDOM_BANK_SEED: u64 = 4;

/// Vocabulary, scenes and rendered features.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub vocab: AttributeVocabulary,
    pub dataset: Dataset,
    pub features: Vec<FeatureMap>,
}

impl DataBundle {
    pub fn generate(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let vocab = build_vocabulary_with(&config.vocabulary)?;
        let dataset = generate_dataset(&vocab, &config.dataset)?;
        let oracle = FeatureOracle::new(&vocab, config.dataset.channels, config.dataset.oracle)?;
        let features = oracle.render_dataset(&dataset);
        Ok(Self {
            vocab,
            dataset,
            features,
        })
    }

    /// Scenes of the given roles, ascending.
    pub fn scenes(&self, roles: &[SplitRole]) -> Vec<usize> {
        self.dataset.scenes_with_roles(roles)
    }

    /// Held-out scenes used to score every bank: the isolated-novel and
    /// GZSL-unseen splits, which no detector is trained on.
    pub fn eval_scenes(&self) -> Vec<usize> {
        self.scenes(&[SplitRole::IsolatedNovel, SplitRole::GzslUnseen])
    }

    /// `manifest.json`, `features.bin` and `labels.csv` in `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        io::save_manifest(&dir.join(MANIFEST_FILE), &self.dataset)?;
        io::save_features(&dir.join(FEATURES_FILE), &self.features)?;
        io::save_labels(&dir.join(LABELS_FILE), &self.dataset.labels)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(PipelineError::Missing(format!(
                "{} not found; run gen-data first",
                manifest.display()
            )));
        }
        let dataset = io::load_manifest(&manifest)?;
        let features = io::load_features(&dir.join(FEATURES_FILE))?;
        io::check_features(&features, &dataset)?;
        Ok(Self {
            vocab: dataset.vocab.clone(),
            dataset,
            features,
        })
    }

    pub fn class_of(&self) -> Vec<usize> {
        self.dataset.scenes.iter().map(|s| s.class_id).collect()
    }
}

/// Label noise seed of a run.
pub fn noise_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, NOISE_SEED)
}

/// Labels available to ZSLA training: the ZSLA train and validation scenes
/// corrupted at rate `walr`; every other scene keeps its clean labels.
pub fn training_labels(bundle: &DataBundle, walr: f64, run_seed: u64) -> Result<WalrOutcome, PipelineError> {
    let scenes = bundle.scenes(&[SplitRole::ZslaTrain, SplitRole::ZslaVal]);
    Ok(inject_walr_noise(&bundle.dataset, walr, noise_seed(run_seed), &scenes)?)
}

/// Manual labels for every scene at the same corruption rate. Scenes that
/// [`training_labels`] corrupts receive the identical corruption here.
pub fn manual_labels(bundle: &DataBundle, walr: f64, run_seed: u64) -> Result<WalrOutcome, PipelineError> {
    let all: Vec<usize> = (0..bundle.dataset.scenes.len()).collect();
    Ok(inject_walr_noise(&bundle.dataset, walr, noise_seed(run_seed), &all)?)
}

pub fn train_seen(bundle: &DataBundle, labels: &[LabelSet], config: &DetectorConfig) -> Result<TrainedBank, PipelineError> {
    let scenes = bundle.scenes(&[SplitRole::ZslaTrain]);
    Ok(train_detectors(&bundle.features, labels, &scenes, bundle.vocab.seen(), BankRole::Seen, config)?)
}

/// Unseen detectors trained on the clean labels of the held-out scenes; a
/// reference for the synthesized ones, never used by the method itself.
pub fn train_direct(bundle: &DataBundle, config: &DetectorConfig) -> Result<TrainedBank, PipelineError> {
    Ok(train_detectors(
        &bundle.features,
        &bundle.dataset.labels,
        &bundle.eval_scenes(),
        bundle.vocab.unseen(),
        BankRole::Direct,
        config,
    )?)
}

pub fn random_bank(bundle: &DataBundle, run_seed: u64) -> DetectorBank {
    let mut bank = DetectorBank::random(
        BankRole::Random,
        bundle.vocab.unseen().to_vec(),
        bundle.dataset.config.channels,
        derive_seed(run_seed, RANDOM_BANK_SEED),
    );
    bank.quantize();
    bank
}

/// Scores `bank` on `scenes` against clean labels.
pub fn evaluate_bank(
    bundle: &DataBundle,
    bank: &DetectorBank,
    scenes: &[usize],
    split: &str,
    gamma: f64,
) -> Result<MetricReport, PipelineError> {
    let feats: Vec<FeatureMap> = scenes.iter().map(|&s| bundle.features[s].clone()).collect();
    let dets = detect_all(&feats, bank, gamma)?;
    let drefs: Vec<&Detection> = dets.iter().collect();
    let lrefs: Vec<&LabelSet> = scenes.iter().map(|&s| &bundle.dataset.labels[s]).collect();
    Ok(evaluate_detections(bank.role, split, &bundle.vocab, &bank.attributes, &drefs, &lrefs)?)
}

/// Mean cosine between matching columns of two banks over the same
/// attributes.
pub fn mean_column_cosine(a: &DetectorBank, b: &DetectorBank) -> Result<f64, PipelineError> {
    if a.attributes != b.attributes || a.is_empty() {
        return Err(PipelineError::Config("banks cover different attributes".into()));
    }
    let total: f64 = (0..a.len())
        .map(|k| {
            let (x, y) = (a.abs_column(k), b.abs_column(k));
            let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Threshold(s) for binarizing posteriors of the merged bank, chosen on the
/// seen detectors' posteriors over the ZSLA training scenes and the labels
/// available there.
pub fn choose_thresholds(
    bundle: &DataBundle,
    seen: &DetectorBank,
    merged: &DetectorBank,
    labels: &[LabelSet],
    gamma: f64,
    mode: ThresholdMode,
) -> Result<(ThresholdChoice, Vec<f64>), PipelineError> {
    let scenes = bundle.scenes(&[SplitRole::ZslaTrain]);
    let feats: Vec<FeatureMap> = scenes.iter().map(|&s| bundle.features[s].clone()).collect();
    let dets = detect_all(&feats, seen, gamma)?;
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    let mut per_attr: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); seen.len()];
    for (d, &s) in dets.iter().zip(&scenes) {
        for (k, &a) in seen.attributes.iter().enumerate() {
            let (p, l) = (d.posteriors[k], labels[s].phi[a]);
            scores.push(p);
            truth.push(l);
            per_attr[k].0.push(p);
            per_attr[k].1.push(l);
        }
    }
    let global = choose_threshold(&scores, &truth)?;
    let thresholds = match mode {
        ThresholdMode::Global => vec![global.threshold],
        ThresholdMode::PerAttribute => merged
            .attributes
            .iter()
            .map(|&a| match seen.position(a) {
                Some(k) => choose_threshold(&per_attr[k].0, &per_attr[k].1)
                    .map(|c| c.threshold)
                    .unwrap_or(global.threshold),
                None => global.threshold,
            })
            .collect(),
    };
    Ok((global, thresholds))
}

/// Mean F1 over seen attributes of binary annotations against clean labels.
pub fn annotation_f1(bundle: &DataBundle, merged: &DetectorBank, annotations: &[Vec<bool>]) -> f64 {
    let seen = bundle.vocab.seen();
    let mut total = 0.0;
    for &a in seen {
        let k = merged.position(a).expect("merged bank covers seen attributes");
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (ann, lab) in annotations.iter().zip(&bundle.dataset.labels) {
            match (ann[k], lab.phi[a]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        total += if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    total / seen.len() as f64
}

/// GZSL image descriptor: max-pooled calibrated responses of every
/// detector in the merged bank.
pub fn descriptors(detections: &[Detection]) -> Vec<Vec<f64>> {
    detections.iter().map(|d| d.logits.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeLoss {
    pub attribute: usize,
    pub name: String,
    pub loss: f64,
}

/// Attribute metrics of every bank on the held-out scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen: MetricReport,
    pub synthesized: MetricReport,
    pub random: MetricReport,
    pub direct: Option<MetricReport>,
    pub cosine_to_direct: Option<f64>,
    pub reconstruction_mean: f64,
    pub reconstruction: Vec<AttributeLoss>,
}

impl EvalReport {
    pub fn reports(&self) -> Vec<&MetricReport> {
        let mut v = vec![&self.seen, &self.synthesized, &self.random];
        v.extend(self.direct.as_ref());
        v
    }
}

fn tag(mut r: MetricReport, seed: u64, walr: f64) -> MetricReport {
    r.seed = Some(seed);
    r.walr = Some(walr);
    r
}

/// Scores the seen, synthesized, random and (optionally) direct banks on
/// the held-out scenes, plus the reconstruction of every seen attribute from
/// the extracted bases.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_banks(
    bundle: &DataBundle,
    seen: &DetectorBank,
    synthesized: &DetectorBank,
    bases: &BaseAttributeBank,
    direct: Option<&DetectorBank>,
    seed: u64,
    walr: f64,
    gamma: f64,
) -> Result<EvalReport, PipelineError> {
    let eval = bundle.eval_scenes();
    let score = |bank: &DetectorBank| -> Result<MetricReport, PipelineError> {
        Ok(tag(evaluate_bank(bundle, bank, &eval, "held_out", gamma)?, seed, walr))
    };
    let random = random_bank(bundle, seed);
    let reconstruction: Vec<AttributeLoss> = reconstruction_losses(bases, seen, &bundle.vocab)?
        .into_iter()
        .map(|(a, loss)| AttributeLoss {
            attribute: a,
            name: bundle.vocab.attribute_name(a),
            loss,
        })
        .collect();
    let reconstruction_mean = reconstruction.iter().map(|r| r.loss).sum::<f64>() / reconstruction.len() as f64;
    Ok(EvalReport {
        seen: score(seen)?,
        synthesized: score(synthesized)?,
        random: score(&random)?,
        direct: direct.map(score).transpose()?,
        cosine_to_direct: direct.map(|d| mean_column_cosine(synthesized, d)).transpose()?,
        reconstruction_mean,
        reconstruction,
    })
}

/// Threshold, annotation quality and GZSL results of both arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub threshold: ThresholdChoice,
    pub thresholds: Vec<f64>,
    /// Mean F1 over seen attributes of the annotations against clean labels.
    pub annotation_f1_seen: f64,
    pub gzsl_zsla: GzslReport,
    pub gzsl_manual: GzslReport,
}

#[derive(Clone, Debug)]
pub struct AnnotationOutcome {
    pub report: AnnotationReport,
    pub annotations: Vec<Vec<bool>>,
    pub zsla_matrix: ClassAttributeMatrix,
    pub manual_matrix: ClassAttributeMatrix,
}

/// Annotates every scene with the merged seen + synthesized bank, builds
/// the annotated and manual class-attribute matrices and runs GZSL on both.
/// `training` holds the labels the detectors were trained with (used to
/// pick the threshold) and `manual` the manual-arm labels of every scene.
pub fn annotate_and_gzsl(
    bundle: &DataBundle,
    seen: &DetectorBank,
    synthesized: &DetectorBank,
    training: &[LabelSet],
    manual: &[LabelSet],
    config: &PipelineConfig,
) -> Result<AnnotationOutcome, PipelineError> {
    let gamma = config.detector.gamma;
    let merged = DetectorBank::merge(BankRole::Annotation, &[seen, synthesized])?;
    let (threshold, thresholds) =
        choose_thresholds(bundle, seen, &merged, training, gamma, config.evaluation.threshold_mode)?;
    let detections = detect_all(&bundle.features, &merged, gamma)?;
    let annotations = annotate(&detections, &thresholds)?;
    let annotation_f1_seen = annotation_f1(bundle, &merged, &annotations);
    let class_of = bundle.class_of();
    let n_classes = bundle.dataset.classes.len();
    let zsla_matrix = build_class_attribute_matrix(
        &annotations,
        &class_of,
        n_classes,
        Provenance::Annotated,
        Some(threshold.threshold),
    )?;
    let manual_phi: Vec<Vec<bool>> = manual.iter().map(|l| l.phi.clone()).collect();
    let manual_matrix = build_class_attribute_matrix(&manual_phi, &class_of, n_classes, Provenance::Manual, None)?;
    let desc = descriptors(&detections);
    let gzsl_zsla = gzsl_evaluate(&desc, &bundle.dataset, &zsla_matrix, &config.evaluation.gzsl)?;
    let gzsl_manual = gzsl_evaluate(&desc, &bundle.dataset, &manual_matrix, &config.evaluation.gzsl)?;
    Ok(AnnotationOutcome {
        report: AnnotationReport {
            threshold,
            thresholds,
            annotation_f1_seen,
            gzsl_zsla,
            gzsl_manual,
        },
        annotations,
        zsla_matrix,
        manual_matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub walr: f64,
    pub corrupted_labels: usize,
    pub training_objects: usize,
    pub evaluation: EvalReport,
    pub annotation: AnnotationReport,
}

/// Every artifact of one run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: PipelineConfig,
    pub report: RunReport,
    pub seen: TrainedBank,
    pub net: TrainedNet,
    pub synthesized: DetectorBank,
    pub bases: BaseAttributeBank,
    pub direct: Option<DetectorBank>,
    pub annotation: AnnotationOutcome,
}

pub(crate) fn log_flagged(log: &Logger, report: &MetricReport) {
    for f in &report.flagged {
        log.event("flagged_attribute", &[("role", &report.role.as_str()), ("detail", f)]);
    }
}

/// Noise injection, seen training, decompose-and-reassemble, synthesis,
/// evaluation, annotation and GZSL for one run seed (`config.seed`) at
/// noise level `config.walr`.
pub fn run_pipeline(bundle: &DataBundle, config: &PipelineConfig, log: &Logger) -> Result<RunOutcome, PipelineError> {
    let config = config.clone().with_stage_seeds();
    config.validate()?;
    let (seed, walr) = (config.seed, config.walr);
    let gamma = config.detector.gamma;
    let stage = |name: &str, t: Instant| {
        log.event(
            name,
            &[("seed", &seed), ("walr", &walr), ("secs", &format!("{:.2}", t.elapsed().as_secs_f64()))],
        );
    };

    let t = Instant::now();
    let noisy = training_labels(bundle, walr, seed)?;
    let manual = manual_labels(bundle, walr, seed)?;
    let seen = train_seen(bundle, &noisy.labels, &config.detector)?;
    stage("train_seen", t);

    let t = Instant::now();
    let net = train_dnr(&seen.bank, &bundle.vocab, &config.synthesis)?;
    let (synthesized, bases) = synthesize_unseen(&net.net, &seen.bank, &bundle.vocab, &config.synthesis)?;
    stage("train_dnr", t);

    let t = Instant::now();
    let direct = if config.evaluation.direct_reference {
        Some(train_direct(bundle, &config.detector)?.bank)
    } else {
        None
    };
    let evaluation = evaluate_banks(bundle, &seen.bank, &synthesized, &bases, direct.as_ref(), seed, walr, gamma)?;
    log_flagged(log, &evaluation.seen);
    log_flagged(log, &evaluation.synthesized);
    stage("evaluate", t);

    let t = Instant::now();
    let annotation = annotate_and_gzsl(bundle, &seen.bank, &synthesized, &noisy.labels, &manual.labels, &config)?;
    if annotation.report.threshold.flagged {
        log.event("threshold_flagged", &[("youden_j", &annotation.report.threshold.youden_j)]);
    }
    stage("annotate_gzsl", t);

    let report = RunReport {
        seed,
        walr,
        corrupted_labels: noisy.corrupted,
        training_objects: noisy.objects,
        evaluation,
        annotation: annotation.report.clone(),
    };
    log.event(
        "run_done",
        &[
            ("seed", &seed),
            ("walr", &walr),
            ("seen_mauroc", &format!("{:.4}", report.evaluation.seen.mauroc)),
            ("unseen_mauroc", &format!("{:.4}", report.evaluation.synthesized.mauroc)),
            ("unseen_mla", &format!("{:.4}", report.evaluation.synthesized.mla)),
            ("h_zsla", &format!("{:.4}", report.annotation.gzsl_zsla.h)),
            ("h_manual", &format!("{:.4}", report.annotation.gzsl_manual.h)),
        ],
    );
    Ok(RunOutcome {
        config,
        report,
        seen,
        net,
        synthesized,
        bases,
        direct,
        annotation,
    })
}
