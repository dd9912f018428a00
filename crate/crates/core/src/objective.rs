//! Multi-view consistency objective and its optimizer.
//!
//! Per record `x` with views `ỹ_1..ỹ_K` and head outputs `ŷ_k`:
//!
//! ```text
//! fit       = Σ_k CE(ŷ_k, ỹ_k)
//! agreement = Σ_{k≠k'} D(ŷ_k, ŷ_k')      (ordered pairs)
//! graph     = Σ_k ŷ_kᵀ L ŷ_k
//! total     = fit + λ·agreement + γ·graph
//! ```
//!
//! Each term is averaged over the batch. A term whose weight is zero (or the
//! agreement term when `K = 1`) is skipped entirely and reported as 0.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{backward, forward, ModelParams};
use crate::ontology::{smoothness, Laplacian};
use crate::rng::{stream, Purpose};
use crate::supervision::ViewSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    SymKl,
    SqDist,
}

fn default_eps_clamp() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub agreement_kind: AgreementKind,
    #[serde(default = "default_eps_clamp")]
    pub eps_clamp: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda) || !finite_nonneg(self.gamma) {
            return Err(Error::config("lambda and gamma must be finite and >= 0"));
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 1.0) {
            return Err(Error::config("eps_clamp must be in (0,1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !finite_nonneg(self.learning_rate) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fit: f64,
    pub agreement: f64,
    pub graph: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("fit", self.fit),
            ("agreement", self.agreement),
            ("graph", self.graph),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `-Σ t_i·ln(max(p_i, ε))` and its gradient with respect to `pred`.
pub fn cross_entropy(pred: &[f64], target: &[f64], eps_clamp: f64) -> Result<(f64, Vec<f64>)> {
    check_dim("cross-entropy target", pred.len(), target.len())?;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let t = target[i];
        if t == 0.0 {
            continue;
        }
        let p = pred[i].max(eps_clamp);
        value -= t * p.ln();
        if pred[i] > eps_clamp {
            grad[i] = -t / p;
        }
    }
    Ok((value, grad))
}

/// Divergence between two head distributions and its gradients
/// `(value, ∂/∂p, ∂/∂q)`.
///
/// `SymKl` is `½(KL(p‖q) + KL(q‖p)) = ½ Σ (p_i - q_i)(ln p̃_i - ln q̃_i)` with
/// `p̃ = max(p, ε)`; `SqDist` is `‖p - q‖²`.
pub fn agreement(p: &[f64], q: &[f64], kind: AgreementKind, eps_clamp: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dim("agreement operands", p.len(), q.len())?;
    let n = p.len();
    let mut gp = vec![0.0; n];
    let mut gq = vec![0.0; n];
    let mut value = 0.0;
    match kind {
        AgreementKind::SqDist => {
            for i in 0..n {
                let d = p[i] - q[i];
                value += d * d;
                gp[i] = 2.0 * d;
                gq[i] = -2.0 * d;
            }
        }
        AgreementKind::SymKl => {
            for i in 0..n {
                let lp = p[i].max(eps_clamp).ln();
                let lq = q[i].max(eps_clamp).ln();
                let d = p[i] - q[i];
                let dl = lp - lq;
                value += 0.5 * d * dl;
                let inv_p = if p[i] > eps_clamp { 1.0 / p[i] } else { 0.0 };
                let inv_q = if q[i] > eps_clamp { 1.0 / q[i] } else { 0.0 };
                gp[i] = 0.5 * (dl + d * inv_p);
                gq[i] = 0.5 * (-dl - d * inv_q);
            }
        }
    }
    Ok((value, gp, gq))
}

/// Loss and (optionally) gradient over the rows `batch` of `inputs`/`views`.
pub fn batch_loss(
    params: &ModelParams,
    inputs: &[&[f64]],
    views: &ViewSet,
    batch: &[usize],
    lap: &Laplacian,
    cfg: &LossConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let k_heads = params.num_heads();
    check_dim("views per record", k_heads, views.num_views())?;
    check_dim("view width", params.dims().num_nodes, views.num_nodes())?;
    check_dim("laplacian size", params.dims().num_nodes, lap.dim())?;
    check_dim("inputs vs views", inputs.len(), views.num_records())?;
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    if let Some(g) = grad.as_deref_mut() {
        check_dim("gradient buffer", params.as_slice().len(), g.len())?;
        g.fill(0.0);
    }
    let use_agreement = cfg.lambda != 0.0 && k_heads > 1;
    let use_graph = cfg.gamma != 0.0;

    let mut sum = LossBreakdown::default();
    for &r in batch {
        let x = inputs[r];
        let fwd = forward(params, x)?;
        let mut upstream = Vec::with_capacity(k_heads);
        for k in 0..k_heads {
            let (v, g) = cross_entropy(&fwd.probs[k], views.view(r, k), cfg.eps_clamp)?;
            sum.fit += v;
            upstream.push(g);
        }
        if use_agreement {
            for k in 0..k_heads {
                for j in 0..k_heads {
                    if j == k {
                        continue;
                    }
                    let (v, gp, gq) = agreement(&fwd.probs[k], &fwd.probs[j], cfg.agreement_kind, cfg.eps_clamp)?;
                    sum.agreement += v;
                    for i in 0..gp.len() {
                        upstream[k][i] += cfg.lambda * gp[i];
                        upstream[j][i] += cfg.lambda * gq[i];
                    }
                }
            }
        }
        if use_graph {
            for k in 0..k_heads {
                let (v, g) = smoothness(&fwd.probs[k], lap)?;
                sum.graph += v;
                for (u, gi) in upstream[k].iter_mut().zip(g) {
                    *u += cfg.gamma * gi;
                }
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            backward(params, x, &fwd, &upstream, g);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let fit = sum.fit * inv;
    let agreement = sum.agreement * inv;
    let graph = sum.graph * inv;
    let out = LossBreakdown {
        fit,
        agreement,
        graph,
        total: fit + cfg.lambda * agreement + cfg.gamma * graph,
    };
    if let Some(g) = grad {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Loss over every row with the full parameter gradient.
pub fn wisteria_loss(
    params: &ModelParams,
    inputs: &[&[f64]],
    views: &ViewSet,
    lap: &Laplacian,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let batch: Vec<usize> = (0..inputs.len()).collect();
    let mut grad = vec![0.0; params.as_slice().len()];
    let bd = batch_loss(params, inputs, views, &batch, lap, cfg, Some(&mut grad))?;
    Ok((bd, grad))
}

/// Loss value only.
pub fn evaluate_loss(
    params: &ModelParams,
    inputs: &[&[f64]],
    views: &ViewSet,
    lap: &Laplacian,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let batch: Vec<usize> = (0..inputs.len()).collect();
    batch_loss(params, inputs, views, &batch, lap, cfg, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Batch-size-weighted mean of the minibatch losses seen in each epoch.
    pub trace: Vec<LossBreakdown>,
}

/// Minibatch SGD with momentum: `v ← μ·v − η·∇`, `θ ← θ + v`. The record order
/// of epoch `e` is a shuffle drawn from `(cfg.seed, e)`.
pub fn train(
    params: &ModelParams,
    inputs: &[&[f64]],
    views: &ViewSet,
    lap: &Laplacian,
    cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dim("inputs vs views", inputs.len(), views.num_records())?;
    if inputs.is_empty() {
        return Err(Error::config("no training records"));
    }
    let mut params = params.clone();
    let n_params = params.as_slice().len();
    let mut velocity = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let mut acc = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let bd = batch_loss(&params, inputs, views, batch, lap, cfg, Some(&mut grad))?;
            if let Some(term) = bd.first_non_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite {term} loss in epoch {epoch} (fit {}, agreement {}, graph {})",
                    bd.fit, bd.agreement, bd.graph
                )));
            }
            let w = batch.len() as f64;
            acc.fit += w * bd.fit;
            acc.agreement += w * bd.agreement;
            acc.graph += w * bd.graph;
            for ((theta, v), g) in params.as_mut_slice().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *theta += *v;
            }
        }
        let n = inputs.len() as f64;
        let fit = acc.fit / n;
        let agreement = acc.agreement / n;
        let graph = acc.graph / n;
        trace.push(LossBreakdown {
            fit,
            agreement,
            graph,
            total: fit + cfg.lambda * agreement + cfg.gamma * graph,
        });
        if params.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameters became non-finite in epoch {epoch}")));
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut loss_fn: F, theta: &[f64], h_step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h_step) {
        return Err(Error::config(format!("finite-difference step {h_step} outside [1e-7, 1e-3]")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h_step;
        let up = loss_fn(&probe);
        probe[i] = theta[i] - h_step;
        let down = loss_fn(&probe);
        probe[i] = theta[i];
        out.push((up - down) / (2.0 * h_step));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn write_trace_csv(trace: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "fit", "agreement", "graph", "total"])?;
    for (e, b) in trace.iter().enumerate() {
        w.write_record([
            e.to_string(),
            b.fit.to_string(),
            b.agreement.to_string(),
            b.graph.to_string(),
            b.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad trace field {i}")))
        };
        out.push(LossBreakdown {
            fit: num(1)?,
            agreement: num(2)?,
            graph: num(3)?,
            total: num(4)?,
        });
    }
    Ok(out)
}
