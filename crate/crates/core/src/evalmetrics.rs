//! Evaluation metrics and seed-level aggregation.
//!
//! Conventions that are easy to get subtly wrong:
//!
//! * AUROC counts tied positive/negative pairs as ½.
//! * AUPRC is average precision; a group of tied scores enters as one
//!   threshold, so every positive in the group gets the group's precision.
//! * Macro-F1 gives a class with no predictions and no truths an F1 of 0.
//! * ECE uses equal-width, right-closed bins (`[0, 1/B]`, `(1/B, 2/B]`, ...)
//!   and skips empty bins.
//! * Recall@k counts a query as a hit if any of its k nearest neighbors
//!   (self excluded, distance ties broken by index) shares its class.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{encode, forward, ModelParams};

pub const DEFAULT_ECE_BINS: usize = 10;
pub const RECALL_K: usize = 10;

/// Arithmetic mean of the K head distributions, restricted to the class
/// leaves and renormalized.
pub fn ensemble_predict(params: &ModelParams, x: &[f64], leaf_ids: &[usize]) -> Result<Vec<f64>> {
    let fwd = forward(params, x)?;
    let k = fwd.probs.len() as f64;
    let mut out: Vec<f64> = leaf_ids
        .iter()
        .map(|&l| fwd.probs.iter().map(|p| p[l]).sum::<f64>() / k)
        .collect();
    let s: f64 = out.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Numerical("ensemble assigns no mass to class leaves".into()));
    }
    for v in &mut out {
        *v /= s;
    }
    Ok(out)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    check_dim("metric labels", scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUROC from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &t in &idx[i..=j] {
            if labels[t] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Average precision over descending-score tie groups.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..=j].iter().filter(|&&t| labels[t]).count();
        tp += group_pos;
        seen += j - i + 1;
        if group_pos > 0 {
            ap += group_pos as f64 * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(ap / pos as f64)
}

pub fn confusion_counts(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_dim("macro-F1 inputs", pred.len(), truth.len())?;
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::config(format!("class index outside [0, {num_classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion_counts(pred, truth, num_classes)?;
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = m[c][c];
        let fn_ = m[c].iter().sum::<usize>() - tp;
        let fp = (0..num_classes).map(|t| m[t][c]).sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / num_classes as f64)
}

/// Right-closed bin index: bin 0 is `[0, 1/B]`, bin b > 0 is `(b/B, (b+1)/B]`.
pub fn ece_bin(p: f64, num_bins: usize) -> usize {
    let edge = |b: usize| b as f64 / num_bins as f64;
    let mut b = ((p * num_bins as f64).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    while b > 0 && p <= edge(b) {
        b -= 1;
    }
    while b + 1 < num_bins && p > edge(b + 1) {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

pub fn reliability_bins(probs: &[f64], labels: &[bool], num_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_dim("ECE labels", probs.len(), labels.len())?;
    if num_bins == 0 {
        return Err(Error::config("ECE needs at least one bin"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("ECE confidences must lie in [0,1]"));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&p, &l) in probs.iter().zip(labels) {
        let b = ece_bin(p, num_bins);
        count[b] += 1;
        conf[b] += p;
        hits[b] += l as usize;
    }
    Ok((0..num_bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: n,
                confidence: if n > 0 { conf[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits[b] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect())
}

pub fn ece(probs: &[f64], labels: &[bool], num_bins: usize) -> Result<f64> {
    let bins = reliability_bins(probs, labels, num_bins)?;
    let n = probs.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.accuracy - b.confidence).abs())
        .sum())
}

pub fn write_reliability_csv(bins: &[ReliabilityBin], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lower", "bin_upper", "confidence", "accuracy", "count"])?;
    for b in bins {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.confidence.to_string(),
            b.accuracy.to_string(),
            b.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn comb2(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index from the contingency table. Two trivial partitions
/// that coincide (both a single cluster, or both all singletons) score 1.
pub fn ari(assignments: &[usize], truths: &[usize]) -> Result<f64> {
    check_dim("ARI inputs", assignments.len(), truths.len())?;
    if assignments.len() < 2 {
        return Err(Error::UndefinedMetric("ARI needs at least two points".into()));
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &t) in assignments.iter().zip(truths) {
        *table.entry((a, t)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    // ARI = 2(T·I − A·B) / (T(A + B) − 2AB) with I, A, B, T the pair counts
    // (same cluster in both, in the assignment, in the truth, total). Kept in
    // integers so the only rounding is the final division.
    let index = table.values().map(|&n| comb2(n)).sum::<u64>() as i128;
    let sum_a = rows.values().map(|&n| comb2(n)).sum::<u64>() as i128;
    let sum_b = cols.values().map(|&n| comb2(n)).sum::<u64>() as i128;
    let total = comb2(assignments.len()) as i128;
    let num = 2 * (total * index - sum_a * sum_b);
    let den = total * (sum_a + sum_b) - 2 * sum_a * sum_b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn recall_at_k(embeddings: &[Vec<f64>], classes: &[usize], k: usize) -> Result<f64> {
    check_dim("recall@k classes", embeddings.len(), classes.len())?;
    let n = embeddings.len();
    if k == 0 || k >= n {
        return Err(Error::config(format!("recall@k needs 1 <= k < n (k = {k}, n = {n})")));
    }
    let mut hits = 0usize;
    let mut neigh: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        neigh.clear();
        neigh.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(&embeddings[i], &embeddings[j]), j)));
        neigh.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if neigh[..k].iter().any(|&(_, j)| classes[j] == classes[i]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Assigns each embedding to the nearest class centroid (ties to the lower
/// class). Centroids of empty classes are skipped.
pub fn nearest_centroid(embeddings: &[Vec<f64>], centroids: &[Option<Vec<f64>>]) -> Vec<usize> {
    embeddings
        .iter()
        .map(|e| {
            let mut best = (f64::INFINITY, 0usize);
            for (c, cent) in centroids.iter().enumerate() {
                if let Some(cent) = cent {
                    let d = sq_dist(e, cent);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
            }
            best.1
        })
        .collect()
}

pub fn class_centroids(embeddings: &[Vec<f64>], classes: &[usize], num_classes: usize) -> Vec<Option<Vec<f64>>> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (e, &c) in embeddings.iter().zip(classes) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(e) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

pub type Metrics = BTreeMap<String, f64>;

/// Labeled records used for evaluation only.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSplit<'a> {
    pub inputs: &'a [&'a [f64]],
    pub truths: &'a [usize],
}

/// Every reported metric for a trained model on `test`.
///
/// `reference` supplies the embedding class centroids used for the ARI
/// cluster assignment; it should be the training split.
pub fn evaluate_model(
    params: &ModelParams,
    leaf_ids: &[usize],
    test: LabeledSplit<'_>,
    reference: LabeledSplit<'_>,
) -> Result<(Metrics, Vec<ReliabilityBin>)> {
    check_dim("test truths", test.inputs.len(), test.truths.len())?;
    let c = leaf_ids.len();
    let probs: Vec<Vec<f64>> = test
        .inputs
        .iter()
        .map(|x| ensemble_predict(params, x, leaf_ids))
        .collect::<Result<_>>()?;
    let pred: Vec<usize> = probs
        .iter()
        .map(|p| {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            best
        })
        .collect();

    let mut m = Metrics::new();
    let mut ovr = Vec::new();
    for class in 0..c {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let labels: Vec<bool> = test.truths.iter().map(|&t| t == class).collect();
        if let Ok(a) = auroc(&scores, &labels) {
            ovr.push(a);
        }
        if class == 0 {
            m.insert("auroc_class0".into(), auroc(&scores, &labels)?);
            m.insert("auprc_class0".into(), auprc(&scores, &labels)?);
        }
    }
    if ovr.is_empty() {
        return Err(Error::UndefinedMetric("no class has both positives and negatives".into()));
    }
    m.insert("auroc".into(), ovr.iter().sum::<f64>() / ovr.len() as f64);
    m.insert("macro_f1".into(), macro_f1(&pred, test.truths, c)?);
    let correct = pred.iter().zip(test.truths).filter(|(p, t)| p == t).count();
    m.insert("accuracy".into(), correct as f64 / pred.len() as f64);

    let conf: Vec<f64> = probs.iter().zip(&pred).map(|(p, &k)| p[k].clamp(0.0, 1.0)).collect();
    let hit: Vec<bool> = pred.iter().zip(test.truths).map(|(p, t)| p == t).collect();
    let bins = reliability_bins(&conf, &hit, DEFAULT_ECE_BINS)?;
    m.insert("ece".into(), ece(&conf, &hit, DEFAULT_ECE_BINS)?);

    let embed = |xs: &[&[f64]]| -> Result<Vec<Vec<f64>>> { xs.iter().map(|x| encode(params, x)).collect() };
    let test_emb = embed(test.inputs)?;
    let ref_emb = embed(reference.inputs)?;
    let centroids = class_centroids(&ref_emb, reference.truths, c);
    let assign = nearest_centroid(&test_emb, &centroids);
    m.insert("ari".into(), ari(&assign, test.truths)?);
    if test_emb.len() > RECALL_K {
        m.insert("recall_at_10".into(), recall_at_k(&test_emb, test.truths, RECALL_K)?);
    }
    Ok((m, bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    /// Mean and sample standard deviation (n−1 denominator, 0 for one value).
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            per_seed: values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub run_id: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub failures: Vec<SeedFailure>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricSummary>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }

    pub fn per_seed(&self, metric: &str) -> Option<&[f64]> {
        self.metrics.get(metric).map(|m| m.per_seed.as_slice())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Runs `run_fn` for every seed (in parallel on the current rayon pool) and
/// aggregates each metric in seed order. Seeds that fail are listed in the
/// metadata and excluded; an error is returned only if every seed fails or
/// the surviving seeds disagree on the metric set.
pub fn seeded_report<F>(run_fn: F, seeds: &[u64]) -> Result<EvalReport>
where
    F: Fn(u64) -> Result<Metrics> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let results: Vec<(u64, Result<Metrics>)> = seeds.par_iter().map(|&s| (s, run_fn(s))).collect();
    aggregate_seeds(results)
}

/// Builds a report from per-seed outcomes given in seed order.
pub fn aggregate_seeds(results: Vec<(u64, Result<Metrics>)>) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut ok_seeds = Vec::new();
    let mut failures = Vec::new();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut first_error = None;
    for (seed, res) in results {
        match res {
            Ok(m) => {
                if !ok_seeds.is_empty() && (m.len() != columns.len() || m.keys().any(|k| !columns.contains_key(k))) {
                    return Err(Error::Numerical(format!("seed {seed} produced a different metric set")));
                }
                for (name, v) in m {
                    columns.entry(name).or_default().push(v);
                }
                ok_seeds.push(seed);
            }
            Err(e) => {
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if ok_seeds.is_empty() {
        return Err(first_error.expect("at least one failure"));
    }
    Ok(EvalReport {
        metrics: columns
            .into_iter()
            .map(|(k, v)| (k, MetricSummary::from_values(v)))
            .collect(),
        metadata: ReportMetadata {
            seeds: ok_seeds,
            failures,
            ..Default::default()
        },
    })
}
