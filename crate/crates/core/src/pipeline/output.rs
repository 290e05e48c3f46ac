use std::fs;
use std::path::Path;

use serde::Serialize;

use super::run::{AnnotationOutcome, DataBundle, RunOutcome};
use super::PipelineError;
use crate::evalkit::{ClassAttributeMatrix, MetricReport};
use crate::synthdata::{AttributeVocabulary, BaseKind};
use crate::synthesis::BaseAttributeBank;

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `epoch,<column>` rows.
pub fn write_curve_csv(path: &Path, column: &str, rows: impl IntoIterator<Item = (usize, f64)>) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["epoch", column]).map_err(err)?;
    for (epoch, v) in rows {
        w.write_record([epoch.to_string(), v.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

/// One row per (report, attribute) plus one aggregate row per report with
/// attribute `*`.
pub fn write_metrics_csv(path: &Path, reports: &[&MetricReport]) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["role", "split", "seed", "walr", "attribute", "positives", "negatives", "auroc", "ap50", "la"])
        .map_err(err)?;
    for r in reports {
        let head = [
            r.role.as_str().to_string(),
            r.split.clone(),
            r.seed.map_or_else(String::new, |s| s.to_string()),
            opt(r.walr),
        ];
        for a in &r.attributes {
            let mut rec = head.to_vec();
            rec.extend([
                a.name.clone(),
                a.positives.to_string(),
                a.negatives.to_string(),
                opt(a.auroc),
                opt(a.ap50),
                opt(a.la),
            ]);
            w.write_record(&rec).map_err(err)?;
        }
        let mut rec = head.to_vec();
        rec.extend([
            "*".to_string(),
            String::new(),
            String::new(),
            r.mauroc.to_string(),
            r.map50.to_string(),
            r.mla.to_string(),
        ]);
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

/// `class,<attribute names...>` with one row per class.
pub fn write_class_matrix(path: &Path, matrix: &ClassAttributeMatrix, vocab: &AttributeVocabulary) -> Result<(), PipelineError> {
    if matrix.n_attributes != vocab.len() {
        return Err(PipelineError::Config("class-attribute matrix does not match the vocabulary".into()));
    }
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    let mut header = vec!["class".to_string()];
    header.extend((0..vocab.len()).map(|a| vocab.attribute_name(a)));
    w.write_record(&header).map_err(err)?;
    for y in 0..matrix.n_classes {
        let mut rec = vec![y.to_string()];
        rec.extend(matrix.row(y).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

fn write_annotations(path: &Path, bundle: &DataBundle, annotations: &[Vec<bool>]) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["scene", "class", "attributes"]).map_err(err)?;
    for (scene, ann) in bundle.dataset.scenes.iter().zip(annotations) {
        let names: Vec<String> = ann
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(a, _)| bundle.vocab.attribute_name(a))
            .collect();
        w.write_record([scene.id.to_string(), scene.class_id.to_string(), names.join(";")])
            .map_err(err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn write_bases(path: &Path, bases: &BaseAttributeBank, vocab: &AttributeVocabulary) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    let channels = bases.embeddings.values().next().map_or(0, Vec::len);
    let mut header = vec!["kind".to_string(), "name".to_string(), "pairs".to_string()];
    header.extend((0..channels).map(|c| format!("c{c}")));
    w.write_record(&header).map_err(err)?;
    for (base, emb) in &bases.embeddings {
        let (kind, name) = match base.kind {
            BaseKind::Adjective => ("adjective", vocab.adjective_name(base.index)),
            BaseKind::Part => ("part", vocab.part_name(base.index)),
        };
        let pairs: Vec<String> = bases.provenance[base]
            .iter()
            .map(|&(a, b)| format!("{}+{}", vocab.attribute_name(a), vocab.attribute_name(b)))
            .collect();
        let mut rec = vec![kind.to_string(), name.to_string(), pairs.join(";")];
        rec.extend(emb.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

/// Writes every artifact of a run into `dir`.
pub fn write_run(dir: &Path, bundle: &DataBundle, outcome: &RunOutcome) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let vocab = &bundle.vocab;
    outcome.config.save(&dir.join("config.json"))?;
    outcome.seen.bank.save(&dir.join("seen_bank.bin"), vocab)?;
    outcome.synthesized.save(&dir.join("synthesized_bank.bin"), vocab)?;
    if let Some(direct) = &outcome.direct {
        direct.save(&dir.join("direct_bank.bin"), vocab)?;
    }
    outcome.net.net.save(&dir.join("net.bin"))?;
    write_curve_csv(
        &dir.join("seen_curve.csv"),
        "mean_loss",
        outcome.seen.curve.iter().map(|e| (e.epoch, e.mean_loss)),
    )?;
    write_curve_csv(
        &dir.join("dnr_curve.csv"),
        "mean_rec",
        outcome.net.curve.iter().map(|e| (e.epoch, e.mean_rec)),
    )?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.report.evaluation.reports())?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    write_bases(&dir.join("bases.csv"), &outcome.bases, vocab)?;
    write_annotation_outputs(dir, bundle, &outcome.annotation)
}

/// `annotations.csv` and both class-attribute matrices.
pub fn write_annotation_outputs(dir: &Path, bundle: &DataBundle, outcome: &AnnotationOutcome) -> Result<(), PipelineError> {
    let vocab = &bundle.vocab;
    write_annotations(&dir.join("annotations.csv"), bundle, &outcome.annotations)?;
    write_class_matrix(&dir.join("class_attributes_zsla.csv"), &outcome.zsla_matrix, vocab)?;
    write_class_matrix(&dir.join("class_attributes_manual.csv"), &outcome.manual_matrix, vocab)?;
    Ok(())
}
