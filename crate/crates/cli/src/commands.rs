use std::path::{Path, PathBuf};

use zsla_core::detector::DetectorBank;
use zsla_core::pipeline::{
    annotate_and_gzsl, evaluate_banks, manual_labels, train_direct, walr_sweep, write_annotation_outputs, write_bases,
    write_curve_csv, write_json, write_metrics_csv, write_sweep, DataBundle, Logger, PipelineConfig, PipelineError,
    LABELS_FILE, NOISY_LABELS_FILE,
};
use zsla_core::synthdata::{io, LabelSet};
use zsla_core::synthesis::{extract_bases, synthesize_unseen, IntersectionNet};

pub const CONFIG_FILE: &str = "config.json";
const SEEN_BANK: &str = "seen_bank.bin";
const NET: &str = "net.bin";
const SYNTH_BANK: &str = "synthesized_bank.bin";

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

fn stage_dir(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

/// Writes the effective configuration next to a stage's outputs.
fn record_config(cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    cfg.save(&dir.join(CONFIG_FILE))
}

fn require(path: &Path, producer: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing(format!("{} not found; run {producer} first", path.display())))
    }
}

fn load_bundle(cfg: &PipelineConfig) -> Result<DataBundle, PipelineError> {
    DataBundle::load(&data_dir(&cfg.output_dir))
}

/// Training labels: the corrupted labels written by `gen-data --walr` when
/// present, the clean ones otherwise.
fn training_labels(cfg: &PipelineConfig, bundle: &DataBundle, log: &Logger) -> Result<Vec<LabelSet>, PipelineError> {
    let noisy = data_dir(&cfg.output_dir).join(NOISY_LABELS_FILE);
    if noisy.exists() {
        log.event("labels", &[("source", &noisy.display())]);
        Ok(io::load_labels(&noisy, bundle.dataset.scenes.len(), bundle.vocab.len())?)
    } else {
        Ok(bundle.dataset.labels.clone())
    }
}

fn load_bank(cfg: &PipelineConfig, bundle: &DataBundle, stage: &str, file: &str, producer: &str) -> Result<DetectorBank, PipelineError> {
    let path = stage_dir(cfg, stage).join(file);
    require(&path, producer)?;
    Ok(DetectorBank::load(&path, &bundle.vocab)?)
}

fn load_net(cfg: &PipelineConfig) -> Result<IntersectionNet, PipelineError> {
    let path = stage_dir(cfg, "dnr").join(NET);
    require(&path, "train-dnr")?;
    Ok(IntersectionNet::load(&path)?)
}

pub fn gen_data(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let dir = data_dir(&cfg.output_dir);
    let bundle = DataBundle::generate(cfg)?;
    bundle.save(&dir)?;
    if cfg.walr > 0.0 {
        let noisy = manual_labels(&bundle, cfg.walr, cfg.seed)?;
        io::save_labels(&dir.join(NOISY_LABELS_FILE), &noisy.labels)?;
        log.event(
            "noisy_labels",
            &[("walr", &cfg.walr), ("corrupted", &noisy.corrupted), ("objects", &noisy.objects)],
        );
    }
    record_config(cfg, &dir)?;
    log.event(
        "gen_data",
        &[
            ("scenes", &bundle.dataset.scenes.len()),
            ("classes", &bundle.dataset.classes.len()),
            ("attributes", &bundle.vocab.len()),
            ("labels", &dir.join(LABELS_FILE).display()),
        ],
    );
    Ok(())
}

pub fn train_seen(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let bundle = load_bundle(cfg)?;
    let labels = training_labels(cfg, &bundle, log)?;
    let trained = zsla_core::pipeline::train_seen(&bundle, &labels, &cfg.detector)?;
    let dir = stage_dir(cfg, "seen");
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    trained.bank.save(&dir.join(SEEN_BANK), &bundle.vocab)?;
    write_curve_csv(
        &dir.join("seen_curve.csv"),
        "mean_loss",
        trained.curve.iter().map(|e| (e.epoch, e.mean_loss)),
    )?;
    record_config(cfg, &dir)?;
    let last = trained.curve.last().map_or(f64::NAN, |e| e.mean_loss);
    log.event("train_seen", &[("detectors", &trained.bank.len()), ("final_loss", &last)]);
    Ok(())
}

pub fn train_dnr(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let bundle = load_bundle(cfg)?;
    let seen = load_bank(cfg, &bundle, "seen", SEEN_BANK, "train-seen")?;
    let trained = zsla_core::synthesis::train_dnr(&seen, &bundle.vocab, &cfg.synthesis)?;
    let dir = stage_dir(cfg, "dnr");
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    trained.net.save(&dir.join(NET))?;
    write_curve_csv(
        &dir.join("dnr_curve.csv"),
        "mean_rec",
        trained.curve.iter().map(|e| (e.epoch, e.mean_rec)),
    )?;
    record_config(cfg, &dir)?;
    let last = trained.curve.last().map_or(f64::NAN, |e| e.mean_rec);
    log.event("train_dnr", &[("params", &trained.net.n_params()), ("final_rec", &last)]);
    Ok(())
}

pub fn synthesize(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let bundle = load_bundle(cfg)?;
    let seen = load_bank(cfg, &bundle, "seen", SEEN_BANK, "train-seen")?;
    let net = load_net(cfg)?;
    let (bank, bases) = synthesize_unseen(&net, &seen, &bundle.vocab, &cfg.synthesis)?;
    let dir = stage_dir(cfg, "synth");
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    bank.save(&dir.join(SYNTH_BANK), &bundle.vocab)?;
    write_bases(&dir.join("bases.csv"), &bases, &bundle.vocab)?;
    record_config(cfg, &dir)?;
    log.event("synthesize", &[("detectors", &bank.len()), ("bases", &bases.embeddings.len())]);
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let bundle = load_bundle(cfg)?;
    let seen = load_bank(cfg, &bundle, "seen", SEEN_BANK, "train-seen")?;
    let synthesized = load_bank(cfg, &bundle, "synth", SYNTH_BANK, "synthesize")?;
    let net = load_net(cfg)?;
    let bases = extract_bases(&net, &seen, &bundle.vocab, cfg.synthesis.single_pair, cfg.synthesis.seed)?;
    let direct = if cfg.evaluation.direct_reference {
        Some(train_direct(&bundle, &cfg.detector)?.bank)
    } else {
        None
    };
    let report = evaluate_banks(
        &bundle,
        &seen,
        &synthesized,
        &bases,
        direct.as_ref(),
        cfg.seed,
        cfg.walr,
        cfg.detector.gamma,
    )?;
    let dir = stage_dir(cfg, "eval");
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    if let Some(d) = &direct {
        d.save(&dir.join("direct_bank.bin"), &bundle.vocab)?;
    }
    write_metrics_csv(&dir.join("metrics.csv"), &report.reports())?;
    write_json(&dir.join("report.json"), &report)?;
    record_config(cfg, &dir)?;
    for r in report.reports() {
        for f in &r.flagged {
            log.event("flagged_attribute", &[("role", &r.role.as_str()), ("detail", f)]);
        }
        log.event(
            "evaluate",
            &[
                ("role", &r.role.as_str()),
                ("mauroc", &format!("{:.4}", r.mauroc)),
                ("map50", &format!("{:.4}", r.map50)),
                ("mla", &format!("{:.4}", r.mla)),
            ],
        );
    }
    Ok(())
}

pub fn gzsl(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let bundle = load_bundle(cfg)?;
    let seen = load_bank(cfg, &bundle, "seen", SEEN_BANK, "train-seen")?;
    let synthesized = load_bank(cfg, &bundle, "synth", SYNTH_BANK, "synthesize")?;
    let labels = training_labels(cfg, &bundle, log)?;
    let outcome = annotate_and_gzsl(&bundle, &seen, &synthesized, &labels, &labels, cfg)?;
    let dir = stage_dir(cfg, "gzsl");
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    write_annotation_outputs(&dir, &bundle, &outcome)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    record_config(cfg, &dir)?;
    let r = &outcome.report;
    if r.threshold.flagged {
        log.event("threshold_flagged", &[("youden_j", &r.threshold.youden_j)]);
    }
    for (arm, g) in [("zsla", &r.gzsl_zsla), ("manual", &r.gzsl_manual)] {
        log.event(
            "gzsl",
            &[
                ("arm", &arm),
                ("s", &format!("{:.4}", g.s)),
                ("u", &format!("{:.4}", g.u)),
                ("h", &format!("{:.4}", g.h)),
            ],
        );
    }
    Ok(())
}

pub fn sweep(cfg: &PipelineConfig, log: &Logger) -> Result<(), PipelineError> {
    let data = data_dir(&cfg.output_dir);
    let bundle = if data.join(zsla_core::pipeline::MANIFEST_FILE).exists() {
        DataBundle::load(&data)?
    } else {
        DataBundle::generate(cfg)?
    };
    let report = walr_sweep(&bundle, cfg, log)?;
    let dir = stage_dir(cfg, "sweep");
    write_sweep(&dir, &report)?;
    record_config(cfg, &dir)?;
    log.event("sweep", &[("runs", &report.runs.len()), ("dir", &dir.display())]);
    Ok(())
}
