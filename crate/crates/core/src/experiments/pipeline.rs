//! Single-seed steps behind `generate`, `train` and `eval`, exchanging
//! files through a data directory.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::artifacts::{
    write_data_files, CHECKPOINT_FILE, DATASET_FILE, GRAPH_FILE, SPLIT_FILE, TRACE_FILE, VIEWS_FILE,
    VIEWS_SIDECAR_FILE,
};
use super::config::{ExperimentConfig, Variant};
use super::run::{evaluate, fit, prepare_data, PreparedData, Split};
use crate::error::{check_dim, Error, Result};
use crate::evalmetrics::{aggregate_seeds, write_reliability_csv, EvalReport};
use crate::model::ModelParams;
use crate::objective::{write_trace_csv, TrainOutcome};
use crate::ontology::LabelGraph;
use crate::supervision::{ViewSet, ViewSidecar};
use crate::synthgen::Dataset;

/// Generates data for `seed` (default: the first configured seed) with
/// every operator and the configured corruption, and writes it to `out`.
pub fn generate_step(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<PreparedData> {
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let data = prepare_data(cfg, seed, &cfg.operators, cfg.corruption_rho)?;
    write_data_files(out, &data)?;
    Ok(data)
}

pub fn load_data(dir: &Path) -> Result<PreparedData> {
    let dataset = Dataset::read_jsonl(&dir.join(DATASET_FILE))?;
    let graph = LabelGraph::read_json(&dir.join(GRAPH_FILE))?;
    let views = ViewSet::read_binary(&dir.join(VIEWS_FILE))?;
    let sidecar = ViewSidecar::read(&dir.join(VIEWS_SIDECAR_FILE))?;
    let split = Split::read(&dir.join(SPLIT_FILE))?;
    check_dim("views vs dataset records", dataset.records.len(), views.num_records())?;
    check_dim("views vs graph nodes", graph.num_nodes(), views.num_nodes())?;
    check_dim("views vs sidecar operators", sidecar.operators.len(), views.num_views())?;
    let n = dataset.records.len();
    if split.train.iter().chain(&split.test).any(|&i| i >= n) {
        return Err(Error::format(dir.join(SPLIT_FILE), "split index out of range"));
    }
    Ok(PreparedData {
        dataset,
        graph,
        views,
        sidecar,
        split,
    })
}

/// Trains the full model on the data directory's training split. The run
/// seed is the one the data was generated with.
pub fn train_step(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    let data = load_data(data_dir)?;
    check_dim("config feature_dim", cfg.gen.feature_dim, data.dataset.config.feature_dim)?;
    let outcome = fit(cfg, &data, Variant::Full)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    outcome.params.write_checkpoint(&out.join(CHECKPOINT_FILE))?;
    write_trace_csv(&outcome.trace, &out.join(TRACE_FILE))?;
    Ok(outcome)
}

/// Evaluates a checkpoint on the data directory's test split, writing the
/// report to `out` and the reliability curve next to it.
pub fn eval_step(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<EvalReport> {
    let data = load_data(data_dir)?;
    let params = ModelParams::read_checkpoint(checkpoint)?;
    let outcome = TrainOutcome {
        params,
        trace: Vec::new(),
    };
    let seed = data.sidecar.seed;
    let (metrics, bins) = evaluate(&data, &outcome)?;
    let mut report = aggregate_seeds(vec![(seed, Ok(metrics))])?;

    let mut h = Sha256::new();
    h.update(fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?);
    h.update(serde_json::to_vec(&data.split)?);
    h.update(serde_json::to_vec(&data.sidecar)?);
    report.metadata.run_id = hex::encode(&h.finalize()[..8]);
    report.metadata.config = serde_json::to_value(&data.sidecar)?;
    report
        .metadata
        .notes
        .insert("test_records".into(), data.split.test.len().to_string());

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    report.write_json(out)?;
    write_reliability_csv(&bins, &reliability_path(out))?;
    Ok(report)
}

pub fn reliability_path(report: &Path) -> PathBuf {
    report.with_extension("reliability.csv")
}
