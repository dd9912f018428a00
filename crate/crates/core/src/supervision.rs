//! Weak supervision operators and the pseudo-label views they emit.
//!
//! Three operator families are provided:
//!
//! * `channel`: passes the record's latent class through a confusion matrix
//!   and emits a one-hot (or, in soft mode, the full row) on the class leaves.
//!   This simulates a labeling process and therefore reads `truth_class`.
//! * `ontology_prop`: a channel draw smeared over the label graph with
//!   geometric decay in hop distance.
//! * `cooccurrence`: a linear-score heuristic on the features alone, smoothed
//!   toward uniform over the leaves.
//!
//! Each `(operator, record)` pair draws from its own random stream, so errors
//! of different operators are independent given the latent class.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confusion::{ConfusionMatrix, ConfusionSpec};
use crate::error::{check_dim, Error, Result};
use crate::ontology::{propagate_mass, LabelGraph};
use crate::rng::{stream, Purpose, StreamRng};
use crate::synthgen::{make_prototypes, Dataset, PatientRecord};

pub const VIEWS_MAGIC: &[u8; 4] = b"WSTV";
pub const VIEWS_VERSION: u32 = 1;
pub const VIEWS_SIDECAR_FORMAT: &str = "views-v1";

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub operator_id: u64,
    pub confusion: ConfusionSpec,
    /// Replaces `site.confusion ∘ confusion` with an explicit matrix per site.
    #[serde(default)]
    pub per_site: Option<Vec<ConfusionSpec>>,
    #[serde(default)]
    pub soft: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OntologyPropSpec {
    pub operator_id: u64,
    pub alpha: f64,
    pub base: ConfusionSpec,
    #[serde(default)]
    pub per_site: Option<Vec<ConfusionSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub class: usize,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSet {
    /// One rule per class scoring along the unit prototype direction.
    #[default]
    Prototype,
    Explicit(Vec<Rule>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooccurrenceSpec {
    pub operator_id: u64,
    pub epsilon: f64,
    #[serde(default)]
    pub rules: RuleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Channel(ChannelSpec),
    OntologyProp(OntologyPropSpec),
    Cooccurrence(CooccurrenceSpec),
}

impl OperatorSpec {
    pub fn operator_id(&self) -> u64 {
        match self {
            OperatorSpec::Channel(s) => s.operator_id,
            OperatorSpec::OntologyProp(s) => s.operator_id,
            OperatorSpec::Cooccurrence(s) => s.operator_id,
        }
    }

    pub fn channel(operator_id: u64, confusion: ConfusionSpec) -> Self {
        OperatorSpec::Channel(ChannelSpec {
            operator_id,
            confusion,
            per_site: None,
            soft: false,
        })
    }

    /// Resolves matrices and rules against a concrete dataset configuration.
    pub fn resolve(&self, dataset: &Dataset) -> Result<Operator> {
        let c = dataset.config.num_classes;
        let site_channels = |own: &ConfusionSpec, per_site: &Option<Vec<ConfusionSpec>>| -> Result<Vec<ConfusionMatrix>> {
            match per_site {
                Some(list) => {
                    check_dim("per-site confusion list", dataset.sites.len(), list.len())?;
                    list.iter().map(|s| s.resolve(c)).collect()
                }
                None => {
                    let own = own.resolve(c)?;
                    dataset.sites.iter().map(|s| s.confusion.then(&own)).collect()
                }
            }
        };
        Ok(match self {
            OperatorSpec::Channel(s) => Operator::Channel {
                operator_id: s.operator_id,
                site_confusion: site_channels(&s.confusion, &s.per_site)?,
                soft: s.soft,
            },
            OperatorSpec::OntologyProp(s) => {
                if !(s.alpha > 0.0 && s.alpha < 1.0) {
                    return Err(Error::config(format!("ontology_prop alpha {} outside (0,1)", s.alpha)));
                }
                Operator::OntologyProp {
                    operator_id: s.operator_id,
                    site_confusion: site_channels(&s.base, &s.per_site)?,
                    alpha: s.alpha,
                }
            }
            OperatorSpec::Cooccurrence(s) => {
                if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
                    return Err(Error::config(format!("cooccurrence epsilon {} outside (0,1)", s.epsilon)));
                }
                let rules = match &s.rules {
                    RuleSet::Explicit(r) => r.clone(),
                    RuleSet::Prototype => make_prototypes(&dataset.config)?
                        .into_iter()
                        .map(|p| {
                            let norm = p.prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let weights = if norm > 0.0 {
                                p.prototype.iter().map(|v| v / norm).collect()
                            } else {
                                p.prototype.clone()
                            };
                            Rule {
                                class: p.class_index,
                                weights,
                                threshold: 0.0,
                            }
                        })
                        .collect(),
                };
                validate_rules(&rules, c, dataset.config.feature_dim)?;
                Operator::Cooccurrence {
                    operator_id: s.operator_id,
                    rules,
                    epsilon: s.epsilon,
                }
            }
        })
    }
}

fn validate_rules(rules: &[Rule], num_classes: usize, dim: usize) -> Result<()> {
    if rules.is_empty() {
        return Err(Error::config("cooccurrence rule list is empty"));
    }
    let mut covered = vec![false; num_classes];
    for r in rules {
        if r.class >= num_classes {
            return Err(Error::config(format!("rule class {} out of range", r.class)));
        }
        check_dim("rule weights", dim, r.weights.len())?;
        covered[r.class] = true;
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::config("cooccurrence rules do not cover every class"));
    }
    Ok(())
}

/// An operator with every matrix and rule resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Channel {
        operator_id: u64,
        site_confusion: Vec<ConfusionMatrix>,
        soft: bool,
    },
    OntologyProp {
        operator_id: u64,
        site_confusion: Vec<ConfusionMatrix>,
        alpha: f64,
    },
    Cooccurrence {
        operator_id: u64,
        rules: Vec<Rule>,
        epsilon: f64,
    },
}

impl Operator {
    pub fn operator_id(&self) -> u64 {
        match self {
            Operator::Channel { operator_id, .. }
            | Operator::OntologyProp { operator_id, .. }
            | Operator::Cooccurrence { operator_id, .. } => *operator_id,
        }
    }

    pub fn apply(&self, record: &PatientRecord, graph: &LabelGraph, rng: &mut StreamRng) -> Result<Vec<f64>> {
        match self {
            Operator::Channel {
                site_confusion, soft, ..
            } => {
                let m = &site_confusion[record.site_id];
                if *soft {
                    Ok(graph.classes_to_nodes(m.row(record.truth_class)))
                } else {
                    apply_channel(record, m, graph, rng)
                }
            }
            Operator::OntologyProp {
                site_confusion, alpha, ..
            } => {
                let base = apply_channel(record, &site_confusion[record.site_id], graph, rng)?;
                apply_ontology_prop(&base, graph, *alpha)
            }
            Operator::Cooccurrence { rules, epsilon, .. } => apply_cooccurrence(record, rules, *epsilon, graph),
        }
    }
}

fn sample_index(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws an observed class from `confusion[truth_class]` and returns the
/// one-hot on its leaf.
pub fn apply_channel(
    record: &PatientRecord,
    confusion: &ConfusionMatrix,
    graph: &LabelGraph,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    check_dim("channel confusion", graph.num_classes(), confusion.num_classes())?;
    if record.truth_class >= confusion.num_classes() {
        return Err(Error::config("record class outside confusion matrix"));
    }
    let observed = sample_index(confusion.row(record.truth_class), rng);
    Ok(graph.one_hot_leaf(observed))
}

/// Mixes `propagate_mass` from every supported node, weighted by its base mass.
pub fn apply_ontology_prop(base_view: &[f64], graph: &LabelGraph, alpha: f64) -> Result<Vec<f64>> {
    check_dim("ontology_prop base view", graph.num_nodes(), base_view.len())?;
    let mut out = vec![0.0; graph.num_nodes()];
    for (node, &mass) in base_view.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let spread = propagate_mass(graph, node, alpha)?;
        for (o, s) in out.iter_mut().zip(spread) {
            *o += mass * s;
        }
    }
    Ok(out)
}

/// `(1-ε)·onehot(argmax score) + ε·uniform(leaves)`, with
/// `score_c = max(w_c·x - t_c, 0)`. Ties go to the lowest class index; a class
/// with several rules takes its best score.
pub fn apply_cooccurrence(record: &PatientRecord, rules: &[Rule], epsilon: f64, graph: &LabelGraph) -> Result<Vec<f64>> {
    if rules.is_empty() {
        return Err(Error::config("cooccurrence rule list is empty"));
    }
    let c = graph.num_classes();
    let mut scores = vec![f64::NEG_INFINITY; c];
    for r in rules {
        check_dim("rule weights", record.x.len(), r.weights.len())?;
        let s = (r.weights.iter().zip(&record.x).map(|(w, x)| w * x).sum::<f64>() - r.threshold).max(0.0);
        if r.class >= c {
            return Err(Error::config(format!("rule class {} out of range", r.class)));
        }
        scores[r.class] = scores[r.class].max(s);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let mut class_probs = vec![epsilon / c as f64; c];
    class_probs[best] += 1.0 - epsilon;
    Ok(graph.classes_to_nodes(&class_probs))
}

/// Pseudo-label distributions, `[record][operator][node]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    num_records: usize,
    num_views: usize,
    num_nodes: usize,
    data: Vec<f64>,
}

impl ViewSet {
    pub fn from_data(num_records: usize, num_views: usize, num_nodes: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("view data length", num_records * num_views * num_nodes, data.len())?;
        if num_views == 0 {
            return Err(Error::config("view set needs at least one operator"));
        }
        let vs = Self {
            num_records,
            num_views,
            num_nodes,
            data,
        };
        vs.validate()?;
        Ok(vs)
    }

    pub fn validate(&self) -> Result<()> {
        for (idx, v) in self.data.chunks(self.num_nodes.max(1)).enumerate() {
            let sum: f64 = v.iter().sum();
            if v.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::config(format!(
                    "view {} of record {} is not a distribution (sum {sum})",
                    idx % self.num_views,
                    idx / self.num_views
                )));
            }
        }
        Ok(())
    }

    pub fn num_records(&self) -> usize {
        self.num_records
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn view(&self, record: usize, k: usize) -> &[f64] {
        let start = (record * self.num_views + k) * self.num_nodes;
        &self.data[start..start + self.num_nodes]
    }

    /// All `K` views of one record, contiguous.
    pub fn record_views(&self, record: usize) -> &[f64] {
        let w = self.num_views * self.num_nodes;
        &self.data[record * w..(record + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows for the given records, in the given order.
    pub fn select_records(&self, indices: &[usize]) -> ViewSet {
        let mut data = Vec::with_capacity(indices.len() * self.num_views * self.num_nodes);
        for &i in indices {
            data.extend_from_slice(self.record_views(i));
        }
        ViewSet {
            num_records: indices.len(),
            num_views: self.num_views,
            num_nodes: self.num_nodes,
            data,
        }
    }

    /// Keeps only the first `k` operators.
    pub fn first_views(&self, k: usize) -> Result<ViewSet> {
        if k == 0 || k > self.num_views {
            return Err(Error::config(format!(
                "requested {k} views but only {} available",
                self.num_views
            )));
        }
        let mut data = Vec::with_capacity(self.num_records * k * self.num_nodes);
        for r in 0..self.num_records {
            for j in 0..k {
                data.extend_from_slice(self.view(r, j));
            }
        }
        Ok(ViewSet {
            num_records: self.num_records,
            num_views: k,
            num_nodes: self.num_nodes,
            data,
        })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(VIEWS_MAGIC).map_err(io)?;
        w.write_all(&VIEWS_VERSION.to_le_bytes()).map_err(io)?;
        for n in [self.num_records, self.num_views, self.num_nodes] {
            w.write_all(&(n as u64).to_le_bytes()).map_err(io)?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_binary(path: &Path) -> Result<ViewSet> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != VIEWS_MAGIC {
            return Err(Error::format(path, "bad view file magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let version = u32::from_le_bytes(b4);
        if version != VIEWS_VERSION {
            return Err(Error::format(path, format!("unknown view file version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let expected = dims[0] * dims[1] * dims[2] * 8;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("view payload is {} bytes, expected {expected}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ViewSet::from_data(dims[0], dims[1], dims[2], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSidecar {
    pub format: String,
    pub seed: u64,
    pub corruption_rho: f64,
    pub operators: Vec<OperatorSpec>,
}

impl ViewSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: ViewSidecar = serde_json::from_slice(&bytes)?;
        if s.format != VIEWS_SIDECAR_FORMAT {
            return Err(Error::format(path, format!("unknown sidecar version {:?}", s.format)));
        }
        Ok(s)
    }
}

pub fn build_views(dataset: &Dataset, specs: &[OperatorSpec], graph: &LabelGraph, seed: u64) -> Result<ViewSet> {
    if specs.is_empty() {
        return Err(Error::config("at least one supervision operator is required"));
    }
    check_dim("graph leaves vs classes", dataset.config.num_classes, graph.num_classes())?;
    let ops: Vec<Operator> = specs.iter().map(|s| s.resolve(dataset)).collect::<Result<_>>()?;
    let v = graph.num_nodes();
    let mut data = Vec::with_capacity(dataset.records.len() * ops.len() * v);
    for (i, rec) in dataset.records.iter().enumerate() {
        for op in &ops {
            let mut rng = stream(seed, Purpose::Operator, &[op.operator_id(), i as u64]);
            data.extend(op.apply(rec, graph, &mut rng)?);
        }
    }
    ViewSet::from_data(dataset.records.len(), ops.len(), v, data)
}

/// With probability `rho`, independently per `(record, operator)`, replaces
/// the view by a one-hot on a uniformly drawn leaf.
pub fn corrupt_views(views: &ViewSet, rho: f64, leaf_ids: &[usize], seed: u64) -> Result<ViewSet> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("corruption rate {rho} outside [0,1]")));
    }
    let mut out = views.clone();
    let v = views.num_nodes;
    for r in 0..views.num_records {
        for k in 0..views.num_views {
            let mut rng = stream(seed, Purpose::Corruption, &[r as u64, k as u64]);
            let u: f64 = rng.random();
            let leaf = leaf_ids[rng.random_range(0..leaf_ids.len())];
            if u < rho {
                let start = (r * views.num_views + k) * v;
                let slot = &mut out.data[start..start + v];
                slot.fill(0.0);
                slot[leaf] = 1.0;
            }
        }
    }
    Ok(out)
}
