use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::log::Logger;
use super::output::write_json;
use super::run::{run_pipeline, DataBundle};
use super::PipelineError;
use crate::evalkit::{t_interval, GzslReport, Interval};

/// Outcome of one (noise level, run) cell of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub walr: f64,
    pub run: usize,
    pub seed: u64,
    pub seen_mauroc: f64,
    pub unseen_mauroc: f64,
    pub unseen_map50: f64,
    pub unseen_mla: f64,
    pub zsla: GzslReport,
    pub manual: GzslReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub walr: f64,
    pub unseen_mauroc: Interval,
    pub unseen_map50: Interval,
    pub unseen_mla: Interval,
    pub seen_mauroc: Interval,
    pub h_zsla: Interval,
    pub h_manual: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub ci_level: f64,
    pub runs: Vec<SweepRun>,
    pub levels: Vec<LevelSummary>,
}

/// Mean and confidence interval of every sweep metric per noise level, in
/// the order of `levels`.
pub fn summarize_sweep(runs: &[SweepRun], levels: &[f64], ci_level: f64) -> Vec<LevelSummary> {
    levels
        .iter()
        .map(|&walr| {
            let at: Vec<&SweepRun> = runs.iter().filter(|r| r.walr == walr).collect();
            let ci = |f: fn(&SweepRun) -> f64| t_interval(&at.iter().map(|r| f(r)).collect::<Vec<_>>(), ci_level);
            LevelSummary {
                walr,
                unseen_mauroc: ci(|r| r.unseen_mauroc),
                unseen_map50: ci(|r| r.unseen_map50),
                unseen_mla: ci(|r| r.unseen_mla),
                seen_mauroc: ci(|r| r.seen_mauroc),
                h_zsla: ci(|r| r.zsla.h),
                h_manual: ci(|r| r.manual.h),
            }
        })
        .collect()
}

/// Runs the pipeline `config.sweep.runs` times at every noise level of
/// `config.sweep.levels`. Run `j` uses seed `config.seed + j` at every
/// level, so levels are compared on matched initializations. The direct
/// reference is skipped. At most `config.sweep.workers` runs execute at once
/// (0: one per core).
pub fn walr_sweep(bundle: &DataBundle, config: &PipelineConfig, log: &Logger) -> Result<SweepReport, PipelineError> {
    config.validate()?;
    let mut base = config.clone();
    base.evaluation.direct_reference = false;
    let jobs: Vec<(f64, usize)> = config
        .sweep
        .levels
        .iter()
        .flat_map(|&l| (0..config.sweep.runs).map(move |j| (l, j)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.sweep.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(walr, j)| {
                let seed = config.seed.wrapping_add(j as u64);
                let mut cfg = base.for_seed(seed);
                cfg.walr = walr;
                let r = run_pipeline(bundle, &cfg, log)?.report;
                Ok(SweepRun {
                    walr,
                    run: j,
                    seed,
                    seen_mauroc: r.evaluation.seen.mauroc,
                    unseen_mauroc: r.evaluation.synthesized.mauroc,
                    unseen_map50: r.evaluation.synthesized.map50,
                    unseen_mla: r.evaluation.synthesized.mla,
                    zsla: r.annotation.gzsl_zsla,
                    manual: r.annotation.gzsl_manual,
                })
            })
            .collect::<Result<_, PipelineError>>()
    })?;
    let levels = summarize_sweep(&runs, &config.sweep.levels, config.evaluation.ci_level);
    for l in &levels {
        log.event(
            "sweep_level",
            &[
                ("walr", &l.walr),
                ("unseen_mauroc", &format!("{:.4}", l.unseen_mauroc.mean)),
                ("h_zsla", &format!("{:.4}", l.h_zsla.mean)),
                ("h_manual", &format!("{:.4}", l.h_manual.mean)),
            ],
        );
    }
    Ok(SweepReport {
        ci_level: config.evaluation.ci_level,
        runs,
        levels,
    })
}

/// `sweep.json`, `sweep_runs.csv` and `sweep_summary.csv` in `dir`.
pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    write_json(&dir.join("sweep.json"), report)?;
    let csv_err = |path: &Path, e: csv::Error| PipelineError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let path = dir.join("sweep_runs.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "walr",
        "run",
        "seed",
        "seen_mauroc",
        "unseen_mauroc",
        "unseen_map50",
        "unseen_mla",
        "s_zsla",
        "u_zsla",
        "h_zsla",
        "s_manual",
        "u_manual",
        "h_manual",
    ])
    .map_err(|e| csv_err(&path, e))?;
    for r in &report.runs {
        w.write_record([
            r.walr.to_string(),
            r.run.to_string(),
            r.seed.to_string(),
            r.seen_mauroc.to_string(),
            r.unseen_mauroc.to_string(),
            r.unseen_map50.to_string(),
            r.unseen_mla.to_string(),
            r.zsla.s.to_string(),
            r.zsla.u.to_string(),
            r.zsla.h.to_string(),
            r.manual.s.to_string(),
            r.manual.u.to_string(),
            r.manual.h.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(&path, e))?;

    let path = dir.join("sweep_summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["walr", "metric", "n", "mean", "lower", "upper"])
        .map_err(|e| csv_err(&path, e))?;
    for l in &report.levels {
        for (name, iv) in [
            ("unseen_mauroc", l.unseen_mauroc),
            ("unseen_map50", l.unseen_map50),
            ("unseen_mla", l.unseen_mla),
            ("seen_mauroc", l.seen_mauroc),
            ("h_zsla", l.h_zsla),
            ("h_manual", l.h_manual),
        ] {
            w.write_record([
                l.walr.to_string(),
                name.to_string(),
                iv.n.to_string(),
                iv.mean.to_string(),
                iv.lower().to_string(),
                iv.upper().to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| PipelineError::io(&path, e))
}
