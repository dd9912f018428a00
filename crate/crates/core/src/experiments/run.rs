use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Protocol, Variant};
use crate::error::{Error, Result};
use crate::evalmetrics::{aggregate_seeds, evaluate_model, EvalReport, LabeledSplit, Metrics, ReliabilityBin};
use crate::model::init_params;
use crate::objective::{train, TrainOutcome};
use crate::ontology::{build_tree_ontology, laplacian, LabelGraph};
use crate::rng::{stream, Purpose};
use crate::supervision::{build_views, corrupt_views, OperatorSpec, ViewSet, ViewSidecar, VIEWS_SIDECAR_FORMAT};
use crate::synthgen::Dataset;

pub const SPLIT_FORMAT: &str = "split-v1";
pub const HOLDOUT_TRAIN_FRACTION: f64 = 0.8;
pub const THREADS_ENV: &str = "WISTERIA_THREADS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub format: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded 80/20 holdout; both index lists are sorted.
    pub fn holdout(num_records: usize, seed: u64) -> Result<Self> {
        let n_train = (num_records as f64 * HOLDOUT_TRAIN_FRACTION).round() as usize;
        if n_train == 0 || n_train == num_records {
            return Err(Error::config(format!("{num_records} records are too few for an 80/20 split")));
        }
        let mut idx: Vec<usize> = (0..num_records).collect();
        idx.shuffle(&mut stream(seed, Purpose::Split, &[]));
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            format: SPLIT_FORMAT.into(),
            train,
            test,
        })
    }

    /// Every record of `train_sites` for training, every record of
    /// `test_sites` for evaluation.
    pub fn by_site(dataset: &Dataset, train_sites: &[usize], test_sites: &[usize]) -> Result<Self> {
        let pick = |sites: &[usize]| -> Vec<usize> {
            (0..dataset.records.len())
                .filter(|&i| sites.contains(&dataset.records[i].site_id))
                .collect()
        };
        let (train, test) = (pick(train_sites), pick(test_sites));
        if train.is_empty() || test.is_empty() {
            return Err(Error::config("a transfer site set has no records"));
        }
        Ok(Self {
            format: SPLIT_FORMAT.into(),
            train,
            test,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if s.format != SPLIT_FORMAT {
            return Err(Error::format(path, format!("unknown split version {:?}", s.format)));
        }
        Ok(s)
    }
}

/// Everything needed to train one model for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub graph: LabelGraph,
    pub views: ViewSet,
    pub sidecar: ViewSidecar,
    pub split: Split,
}

/// Generates the dataset and ontology for `seed`, simulates `operators`,
/// applies corruption at `rho` and splits the records.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64, operators: &[OperatorSpec], rho: f64) -> Result<PreparedData> {
    let dataset = Dataset::generate(cfg.gen_for(seed), cfg.sites_for(seed)?)?;
    let graph = build_tree_ontology(cfg.graph.branching, cfg.graph.depth, cfg.gen.num_classes)?;
    let views = build_views(&dataset, operators, &graph, seed)?;
    let views = corrupt_views(&views, rho, graph.leaf_ids(), seed)?;
    let split = match cfg.protocol {
        Protocol::Transfer => {
            let p = &cfg.protocol_params;
            let train = p.train_sites.as_deref().unwrap_or_default();
            let test = p.test_sites.as_deref().unwrap_or_default();
            Split::by_site(&dataset, train, test)?
        }
        _ => Split::holdout(dataset.records.len(), seed)?,
    };
    let sidecar = ViewSidecar {
        format: VIEWS_SIDECAR_FORMAT.into(),
        seed,
        corruption_rho: rho,
        operators: operators.to_vec(),
    };
    Ok(PreparedData {
        dataset,
        graph,
        views,
        sidecar,
        split,
    })
}

/// Trains on the training split only.
pub fn fit(cfg: &ExperimentConfig, data: &PreparedData, variant: Variant) -> Result<TrainOutcome> {
    let seed = data.sidecar.seed;
    let (loss, _) = variant.apply(&cfg.loss_for(seed), data.views.num_views());
    let inputs: Vec<&[f64]> = data.split.train.iter().map(|&i| data.dataset.records[i].x.as_slice()).collect();
    let views = data.views.select_records(&data.split.train);
    let params = init_params(
        &cfg.model_for(seed),
        cfg.gen.feature_dim,
        data.graph.num_nodes(),
        views.num_views(),
    )?;
    train(&params, &inputs, &views, &laplacian(&data.graph), &loss)
}

pub fn evaluate(data: &PreparedData, outcome: &TrainOutcome) -> Result<(Metrics, Vec<ReliabilityBin>)> {
    let gather = |idx: &[usize]| -> (Vec<&[f64]>, Vec<usize>) {
        idx.iter()
            .map(|&i| {
                let r = &data.dataset.records[i];
                (r.x.as_slice(), r.truth_class)
            })
            .unzip()
    };
    let (test_x, test_y) = gather(&data.split.test);
    let (ref_x, ref_y) = gather(&data.split.train);
    evaluate_model(
        &outcome.params,
        data.graph.leaf_ids(),
        LabeledSplit {
            inputs: &test_x,
            truths: &test_y,
        },
        LabeledSplit {
            inputs: &ref_x,
            truths: &ref_y,
        },
    )
}

/// One configuration within a protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub variant: Variant,
    pub rho: f64,
    /// Number of operators (heads) used.
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub data: PreparedData,
    pub outcome: TrainOutcome,
    pub metrics: Metrics,
    pub reliability: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub report: EvalReport,
    /// Successful runs in seed order.
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub protocol: Protocol,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub warnings: Vec<String>,
}

impl ProtocolOutput {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.name == name)
    }
}

/// The cells a protocol evaluates, in report order.
pub fn cells_for(cfg: &ExperimentConfig) -> Vec<Cell> {
    let all = cfg.operators.len();
    let make = |name: String, variant: Variant, rho: f64| {
        let k = if variant == Variant::SingleView { 1 } else { all };
        Cell { name, variant, rho, k }
    };
    let base_rho = cfg.corruption_rho;
    match cfg.protocol {
        Protocol::Main => vec![make("main".into(), Variant::Full, base_rho)],
        Protocol::NoiseSweep => {
            let rhos = cfg.protocol_params.rhos.clone().unwrap_or_default();
            rhos.iter()
                .flat_map(|&rho| {
                    cfg.variants()
                        .into_iter()
                        .map(move |v| make(format!("rho-{rho:.2}_{}", v.name()), v, rho))
                })
                .collect()
        }
        Protocol::Transfer | Protocol::Ablation => cfg
            .variants()
            .into_iter()
            .map(|v| make(v.name().into(), v, base_rho))
            .collect(),
        Protocol::KScaling => cfg
            .protocol_params
            .ks
            .clone()
            .unwrap_or_default()
            .into_iter()
            .map(|k| {
                // A single head is the supervised baseline, not a one-head
                // model with the graph penalty still on.
                let variant = if k == 1 { Variant::SingleView } else { Variant::Full };
                Cell {
                    name: format!("k-{k}"),
                    variant,
                    rho: base_rho,
                    k,
                }
            })
            .collect(),
    }
}

pub fn run_seed(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> Result<SeedRun> {
    let data = prepare_data(cfg, seed, &cfg.operators[..cell.k], cell.rho)?;
    let outcome = fit(cfg, &data, cell.variant)?;
    let (metrics, reliability) = evaluate(&data, &outcome)?;
    log::debug!(
        "cell {} seed {seed}: auroc {:.4} ({} train / {} test records)",
        cell.name,
        metrics.get("auroc").copied().unwrap_or(f64::NAN),
        data.split.train.len(),
        data.split.test.len()
    );
    Ok(SeedRun {
        seed,
        data,
        outcome,
        metrics,
        reliability,
    })
}

/// Rayon pool whose width is capped by `WISTERIA_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Numerical(format!("cannot start thread pool: {e}")))
}

/// Stable identifier of a (config, cell, seeds) triple.
pub fn run_id(cfg: &ExperimentConfig, cell: &Cell) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(serde_json::to_vec(cell)?);
    for s in &cfg.seeds {
        h.update(s.to_le_bytes());
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

fn task_mapping() -> BTreeMap<String, String> {
    [
        ("auroc", "diagnosis analog: macro one-vs-rest AUROC over the latent classes"),
        ("auroc_class0", "binary analog: class 0 vs rest"),
        ("auprc_class0", "binary analog: class 0 vs rest, average precision"),
        ("macro_f1", "multiclass analog: argmax over class leaves"),
        ("accuracy", "multiclass analog: argmax over class leaves"),
        ("ece", "top-label confidence, 10 right-closed bins"),
        ("ari", "embeddings assigned to nearest training-split class centroid"),
        ("recall_at_10", "embedding neighbors sharing the latent class"),
    ]
    .into_iter()
    .map(|(k, v)| (format!("task.{k}"), v.to_string()))
    .collect()
}

/// Runs every (cell, seed) job of the configured protocol.
pub fn run_protocol(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    cfg.validate()?;
    let cells = cells_for(cfg);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<Result<SeedRun>> =
        pool.install(|| jobs.par_iter().map(|&(c, s)| run_seed(cfg, &cells[c], s)).collect());

    let mut out = ProtocolOutput {
        protocol: cfg.protocol,
        config: cfg.clone(),
        cells: Vec::with_capacity(cells.len()),
        warnings: Vec::new(),
    };
    let mut results = results.into_iter();
    for cell in cells {
        let mut per_seed = Vec::new();
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            match results.next().expect("one result per job") {
                Ok(run) => {
                    per_seed.push((seed, Ok(run.metrics.clone())));
                    runs.push(run);
                }
                Err(e) => {
                    if e.is_config_error() {
                        return Err(e);
                    }
                    log::warn!("cell {} seed {seed} failed: {e}", cell.name);
                    per_seed.push((seed, Err(e)));
                }
            }
        }
        let mut report = aggregate_seeds(per_seed)?;
        report.metadata.run_id = run_id(cfg, &cell)?;
        report.metadata.config = serde_json::to_value(cfg)?;
        let mut notes = task_mapping();
        notes.insert("protocol".into(), cfg.protocol.name().into());
        notes.insert("cell".into(), cell.name.clone());
        notes.insert("variant".into(), cell.variant.name().into());
        notes.insert("rho".into(), cell.rho.to_string());
        notes.insert("k".into(), cell.k.to_string());
        if let Some(r) = runs.first() {
            notes.insert("train_records".into(), r.data.split.train.len().to_string());
            notes.insert("test_records".into(), r.data.split.test.len().to_string());
        }
        report.metadata.notes = notes;
        out.cells.push(CellResult { cell, report, runs });
    }
    if cfg.protocol == Protocol::NoiseSweep {
        out.warnings = monotonicity_warnings(&out);
        for w in &out.warnings {
            log::warn!("{w}");
        }
    }
    if cfg.protocol == Protocol::Transfer {
        if let Some(r) = out.cells.first().and_then(|c| c.runs.first()) {
            log::info!(
                "transfer: {} training records from sites {:?}, {} evaluation records from sites {:?}",
                r.data.split.train.len(),
                cfg.protocol_params.train_sites.as_deref().unwrap_or_default(),
                r.data.split.test.len(),
                cfg.protocol_params.test_sites.as_deref().unwrap_or_default()
            );
        }
    }
    Ok(out)
}

/// Flags a variant whose mean AUROC rises with rho by more than the later
/// cell's seed std.
fn monotonicity_warnings(out: &ProtocolOutput) -> Vec<String> {
    let mut by_variant: BTreeMap<Variant, Vec<&CellResult>> = BTreeMap::new();
    for c in &out.cells {
        by_variant.entry(c.cell.variant).or_default().push(c);
    }
    let mut warnings = Vec::new();
    for (variant, cells) in by_variant {
        for w in cells.windows(2) {
            let (Some(a), Some(b)) = (w[0].report.metrics.get("auroc"), w[1].report.metrics.get("auroc")) else {
                continue;
            };
            if b.mean - a.mean > b.std {
                warnings.push(format!(
                    "{}: mean AUROC rises from {:.4} at rho {} to {:.4} at rho {}",
                    variant.name(),
                    a.mean,
                    w[0].cell.rho,
                    b.mean,
                    w[1].cell.rho
                ));
            }
        }
    }
    warnings
}

fn run_as(cfg: &ExperimentConfig, protocol: Protocol) -> Result<ProtocolOutput> {
    if cfg.protocol != protocol {
        return Err(Error::config(format!(
            "config declares protocol {}, expected {protocol}",
            cfg.protocol
        )));
    }
    run_protocol(cfg)
}

pub fn run_main(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    run_as(cfg, Protocol::Main)
}

pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    run_as(cfg, Protocol::NoiseSweep)
}

pub fn run_transfer(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    run_as(cfg, Protocol::Transfer)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    run_as(cfg, Protocol::Ablation)
}

pub fn run_k_scaling(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    run_as(cfg, Protocol::KScaling)
}
