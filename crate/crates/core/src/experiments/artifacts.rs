use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Protocol, Variant};
use super::run::{Cell, ProtocolOutput, Split};
use crate::error::{Error, Result};
use crate::evalmetrics::{write_reliability_csv, EvalReport};
use crate::model::ModelParams;
use crate::objective::{read_trace_csv, write_trace_csv};
use crate::ontology::LabelGraph;
use crate::supervision::{ViewSet, ViewSidecar};
use crate::synthgen::Dataset;

pub const RUN_FORMAT: &str = "run-v1";
pub const SUMMARY_FORMAT: &str = "sweep-v1";

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const GRAPH_FILE: &str = "graph.json";
pub const SPLIT_FILE: &str = "split.json";
pub const VIEWS_FILE: &str = "views.bin";
pub const VIEWS_SIDECAR_FILE: &str = "views.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const ARTIFACT_FILE: &str = "artifact.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Metric columns shown in rendered tables, in order.
pub const TABLE_METRICS: [&str; 7] = [
    "auroc",
    "auroc_class0",
    "auprc_class0",
    "macro_f1",
    "ece",
    "ari",
    "recall_at_10",
];

/// Paths are relative to the output root and use `/` separators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedArtifact {
    pub seed: u64,
    pub dataset: String,
    pub graph: String,
    pub split: String,
    pub views: String,
    pub views_sidecar: String,
    pub checkpoint: String,
    pub loss_trace: String,
    pub reliability: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArtifact {
    pub format: String,
    pub protocol: Protocol,
    pub cell: Cell,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedArtifact>,
    pub report: EvalReport,
}

impl RunArtifact {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let a: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if a.format != RUN_FORMAT {
            return Err(Error::format(path, format!("unknown artifact version {:?}", a.format)));
        }
        Ok(a)
    }

    /// Checks that every referenced file exists and parses.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for s in &self.seeds {
            Dataset::read_jsonl(&root.join(&s.dataset))?;
            LabelGraph::read_json(&root.join(&s.graph))?;
            Split::read(&root.join(&s.split))?;
            ViewSet::read_binary(&root.join(&s.views))?;
            ViewSidecar::read(&root.join(&s.views_sidecar))?;
            ModelParams::read_checkpoint(&root.join(&s.checkpoint))?;
            read_trace_csv(&root.join(&s.loss_trace))?;
            let rel = root.join(&s.reliability);
            if !rel.is_file() {
                return Err(Error::format(rel, "missing reliability curve"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub cell: String,
    pub variant: Variant,
    pub rho: f64,
    pub k: usize,
    pub artifact: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSummary {
    pub format: String,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SweepSummary {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if s.format != SUMMARY_FORMAT {
            return Err(Error::format(path, format!("unknown summary version {:?}", s.format)));
        }
        Ok(s)
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a dataset, its ontology, views and split into `dir`.
pub fn write_data_files(dir: &Path, data: &super::run::PreparedData) -> Result<()> {
    mkdir(dir)?;
    data.dataset.write_jsonl(&dir.join(DATASET_FILE))?;
    data.graph.write_json(&dir.join(GRAPH_FILE))?;
    data.split.write(&dir.join(SPLIT_FILE))?;
    data.views.write_binary(&dir.join(VIEWS_FILE))?;
    data.sidecar.write(&dir.join(VIEWS_SIDECAR_FILE))
}

/// Writes every artifact of a protocol run under `root`:
///
/// ```text
/// root/config.json
/// root/seed-<s>/{dataset.jsonl, graph.json, split.json}
/// root/cells/<cell>/artifact.json
/// root/cells/<cell>/seed-<s>/{views.bin, views.json, checkpoint.ckpt, loss_trace.csv, reliability.csv}
/// root/summary.json, root/summary.csv
/// ```
pub fn write_protocol_output(root: &Path, out: &ProtocolOutput) -> Result<Vec<RunArtifact>> {
    mkdir(root)?;
    write_json(&out.config, &root.join("config.json"))?;
    let mut shared_written = BTreeSet::new();
    let mut artifacts = Vec::with_capacity(out.cells.len());
    let mut rows = Vec::with_capacity(out.cells.len());

    for cell in &out.cells {
        let cell_rel = format!("cells/{}", cell.cell.name);
        let mut seeds = Vec::with_capacity(cell.runs.len());
        for run in &cell.runs {
            let seed_rel = format!("seed-{}", run.seed);
            let shared = root.join(&seed_rel);
            if shared_written.insert(run.seed) {
                mkdir(&shared)?;
                run.data.dataset.write_jsonl(&shared.join(DATASET_FILE))?;
                run.data.graph.write_json(&shared.join(GRAPH_FILE))?;
                run.data.split.write(&shared.join(SPLIT_FILE))?;
            }
            let run_rel = format!("{cell_rel}/{seed_rel}");
            let dir = root.join(&run_rel);
            mkdir(&dir)?;
            run.data.views.write_binary(&dir.join(VIEWS_FILE))?;
            run.data.sidecar.write(&dir.join(VIEWS_SIDECAR_FILE))?;
            run.outcome.params.write_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            write_trace_csv(&run.outcome.trace, &dir.join(TRACE_FILE))?;
            write_reliability_csv(&run.reliability, &dir.join(RELIABILITY_FILE))?;
            seeds.push(SeedArtifact {
                seed: run.seed,
                dataset: format!("{seed_rel}/{DATASET_FILE}"),
                graph: format!("{seed_rel}/{GRAPH_FILE}"),
                split: format!("{seed_rel}/{SPLIT_FILE}"),
                views: format!("{run_rel}/{VIEWS_FILE}"),
                views_sidecar: format!("{run_rel}/{VIEWS_SIDECAR_FILE}"),
                checkpoint: format!("{run_rel}/{CHECKPOINT_FILE}"),
                loss_trace: format!("{run_rel}/{TRACE_FILE}"),
                reliability: format!("{run_rel}/{RELIABILITY_FILE}"),
            });
        }
        let artifact = RunArtifact {
            format: RUN_FORMAT.into(),
            protocol: out.protocol,
            cell: cell.cell.clone(),
            config: out.config.clone(),
            seeds,
            report: cell.report.clone(),
        };
        let artifact_rel = format!("{cell_rel}/{ARTIFACT_FILE}");
        write_json(&artifact, &root.join(&artifact_rel))?;
        rows.push(SummaryRow {
            cell: cell.cell.name.clone(),
            variant: cell.cell.variant,
            rho: cell.cell.rho,
            k: cell.cell.k,
            artifact: artifact_rel,
            report: cell.report.clone(),
        });
        artifacts.push(artifact);
    }

    let summary = SweepSummary {
        format: SUMMARY_FORMAT.into(),
        protocol: out.protocol,
        seeds: out.config.seeds.clone(),
        rows,
        warnings: out.warnings.clone(),
    };
    write_json(&summary, &root.join(SUMMARY_JSON))?;
    write_summary_csv(&summary, &root.join(SUMMARY_CSV))?;
    Ok(artifacts)
}

/// Long format: one line per (cell, metric).
pub fn write_summary_csv(summary: &SweepSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["protocol", "cell", "variant", "rho", "k", "metric", "mean", "std", "n_seeds", "per_seed"])?;
    for row in &summary.rows {
        for (metric, m) in &row.report.metrics {
            let per_seed: Vec<String> = m.per_seed.iter().map(f64::to_string).collect();
            w.write_record([
                summary.protocol.name().to_string(),
                row.cell.clone(),
                row.variant.name().to_string(),
                row.rho.to_string(),
                row.k.to_string(),
                metric.clone(),
                m.mean.to_string(),
                m.std.to_string(),
                m.per_seed.len().to_string(),
                per_seed.join(";"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summaries_under(dir: &Path) -> Result<Vec<(PathBuf, SweepSummary)>> {
    let direct = dir.join(SUMMARY_JSON);
    if direct.is_file() {
        return Ok(vec![(dir.to_path_buf(), SweepSummary::read(&direct)?)]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_JSON).is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let s = SweepSummary::read(&p.join(SUMMARY_JSON))?;
            Ok((p, s))
        })
        .collect()
}

/// Markdown tables of mean ± std per cell for every sweep found in `dir`
/// (either a sweep output itself or a directory of them).
pub fn render_markdown(dir: &Path) -> Result<String> {
    let sweeps = summaries_under(dir)?;
    if sweeps.is_empty() {
        return Err(Error::config(format!("no {SUMMARY_JSON} found under {}", dir.display())));
    }
    let mut md = String::new();
    for (path, s) in sweeps {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(md, "## {} ({name})\n", s.protocol);
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(md, "Seeds: {}. Entries are mean ± sample std across seeds.\n", seeds.join(", "));
        let _ = write!(md, "| Cell | Variant | rho | K |");
        for m in TABLE_METRICS {
            let _ = write!(md, " {m} |");
        }
        md.push('\n');
        md.push_str(&"|---".repeat(4 + TABLE_METRICS.len()));
        md.push_str("|\n");
        for row in &s.rows {
            let _ = write!(md, "| {} | {} | {:.2} | {} |", row.cell, row.variant.name(), row.rho, row.k);
            for m in TABLE_METRICS {
                match row.report.metrics.get(m) {
                    Some(v) => {
                        let _ = write!(md, " {:.3} ± {:.3} |", v.mean, v.std);
                    }
                    None => md.push_str(" n/a |"),
                }
            }
            md.push('\n');
        }
        let failures: usize = s.rows.iter().map(|r| r.report.metadata.failures.len()).sum();
        if failures > 0 {
            let _ = writeln!(md, "\n{failures} seed run(s) failed and are excluded.");
        }
        for w in &s.warnings {
            let _ = writeln!(md, "\nWarning: {w}");
        }
        md.push('\n');
    }
    Ok(md)
}
