//! Shared encoder and per-operator prediction heads.
//!
//! `h = act(W_enc·x + b_enc)` and `ŷ_k = softmax(W_k·h + b_k)` over every
//! ontology node. Parameters live in one flat buffer laid out as
//! `enc_W (row-major), enc_b, head_W[0..K], head_b[0..K]`, which is also the
//! checkpoint order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, Purpose};

pub const CHECKPOINT_FORMAT: &str = "ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_nodes: usize,
    pub num_heads: usize,
}

impl ModelDims {
    fn enc_w_len(&self) -> usize {
        self.hidden_dim * self.input_dim
    }
    fn head_w_len(&self) -> usize {
        self.num_nodes * self.hidden_dim
    }
    fn head_w_offset(&self, k: usize) -> usize {
        self.enc_w_len() + self.hidden_dim + k * self.head_w_len()
    }
    fn head_b_offset(&self, k: usize) -> usize {
        self.head_w_offset(self.num_heads) + k * self.num_nodes
    }
    pub fn num_params(&self) -> usize {
        self.head_b_offset(self.num_heads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d_h`.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be >= 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    activation: Activation,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, activation: Activation) -> Result<Self> {
        if dims.input_dim == 0 || dims.hidden_dim == 0 || dims.num_nodes == 0 || dims.num_heads == 0 {
            return Err(Error::config(format!("degenerate model dimensions {dims:?}")));
        }
        Ok(Self {
            dims,
            activation,
            data: vec![0.0; dims.num_params()],
        })
    }

    pub fn from_vec(dims: ModelDims, activation: Activation, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dims, activation)?;
        check_dim("parameter vector", dims.num_params(), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        p.data = data;
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn num_heads(&self) -> usize {
        self.dims.num_heads
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn enc_w(&self) -> &[f64] {
        &self.data[..self.dims.enc_w_len()]
    }
    pub fn enc_b(&self) -> &[f64] {
        let s = self.dims.enc_w_len();
        &self.data[s..s + self.dims.hidden_dim]
    }
    pub fn head_w(&self, k: usize) -> &[f64] {
        let s = self.dims.head_w_offset(k);
        &self.data[s..s + self.dims.head_w_len()]
    }
    pub fn head_b(&self, k: usize) -> &[f64] {
        let s = self.dims.head_b_offset(k);
        &self.data[s..s + self.dims.num_nodes]
    }
    pub fn enc_w_mut(&mut self) -> &mut [f64] {
        let e = self.dims.enc_w_len();
        &mut self.data[..e]
    }
    pub fn head_w_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.dims.head_w_offset(k);
        let e = s + self.dims.head_w_len();
        &mut self.data[s..e]
    }
    pub fn head_b_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.dims.head_b_offset(k);
        let e = s + self.dims.num_nodes;
        &mut self.data[s..e]
    }

    /// Copy restricted to the first `k` heads.
    pub fn first_heads(&self, k: usize) -> Result<ModelParams> {
        if k == 0 || k > self.dims.num_heads {
            return Err(Error::config(format!("cannot keep {k} of {} heads", self.dims.num_heads)));
        }
        let dims = ModelDims { num_heads: k, ..self.dims };
        let mut out = ModelParams::zeros(dims, self.activation)?;
        let enc = self.dims.enc_w_len() + self.dims.hidden_dim;
        out.data[..enc].copy_from_slice(&self.data[..enc]);
        for j in 0..k {
            out.head_w_mut(j).copy_from_slice(self.head_w(j));
            out.head_b_mut(j).copy_from_slice(self.head_b(j));
        }
        Ok(out)
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = CheckpointHeader {
            dims: CheckpointDims {
                d_x: self.dims.input_dim,
                d_h: self.dims.hidden_dim,
                num_nodes: self.dims.num_nodes,
            },
            k: self.dims.num_heads,
            activation: self.activation,
            format: CHECKPOINT_FORMAT.to_string(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_slice(&line)?;
        match raw.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(Error::format(path, format!("unknown checkpoint version {other:?}"))),
        }
        let header: CheckpointHeader = serde_json::from_value(raw)?;
        let dims = ModelDims {
            input_dim: header.dims.d_x,
            hidden_dim: header.dims.d_h,
            num_nodes: header.dims.num_nodes,
            num_heads: header.k,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != dims.num_params() * 8 {
            return Err(Error::format(path, "checkpoint payload size does not match header"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ModelParams::from_vec(dims, header.activation, data)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDims {
    d_x: usize,
    d_h: usize,
    num_nodes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    dims: CheckpointDims,
    #[serde(rename = "K")]
    k: usize,
    activation: Activation,
    format: String,
}

/// Uniform(±init_scale/√fan_in) weights, zero biases. Each layer draws from
/// its own stream so head `k`'s values do not depend on how many heads exist.
pub fn init_params(config: &ModelConfig, input_dim: usize, num_nodes: usize, num_heads: usize) -> Result<ModelParams> {
    config.validate()?;
    let dims = ModelDims {
        input_dim,
        hidden_dim: config.hidden_dim,
        num_nodes,
        num_heads,
    };
    let mut p = ModelParams::zeros(dims, config.activation)?;
    let fill = |slot: &mut [f64], fan_in: usize, layer: u64| {
        let bound = config.init_scale / (fan_in as f64).sqrt();
        let mut rng = stream(config.seed, Purpose::Init, &[layer]);
        for v in slot {
            *v = rng.random_range(-bound..=bound);
        }
    };
    fill(p.enc_w_mut(), input_dim, 0);
    for k in 0..num_heads {
        fill(p.head_w_mut(k), config.hidden_dim, 1 + k as u64);
    }
    Ok(p)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn mat_vec(w: &[f64], rows: usize, v: &[f64], bias: &[f64]) -> Vec<f64> {
    let cols = v.len();
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            let mut acc = bias[i];
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            acc
        })
        .collect()
}

pub fn encode(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("encoder input", params.dims.input_dim, x.len())?;
    let pre = mat_vec(params.enc_w(), params.dims.hidden_dim, x, params.enc_b());
    Ok(pre.into_iter().map(|v| params.activation.apply(v)).collect())
}

/// `∂h/∂x`, row-major `d_h × d_x`.
pub fn encode_jacobian(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let h = encode(params, x)?;
    let dx = params.dims.input_dim;
    let w = params.enc_w();
    let mut jac = vec![0.0; h.len() * dx];
    for (i, hi) in h.iter().enumerate() {
        let d = params.activation.derivative_from_output(*hi);
        for j in 0..dx {
            jac[i * dx + j] = d * w[i * dx + j];
        }
    }
    Ok(jac)
}

pub fn head_forward(params: &ModelParams, k: usize, h: &[f64]) -> Result<Vec<f64>> {
    if k >= params.dims.num_heads {
        return Err(Error::config(format!("head {k} out of range (K = {})", params.dims.num_heads)));
    }
    check_dim("head input", params.dims.hidden_dim, h.len())?;
    Ok(softmax(&mat_vec(params.head_w(k), params.dims.num_nodes, h, params.head_b(k))))
}

/// Embedding and all head distributions from one encoder evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Forward> {
    let hidden = encode(params, x)?;
    let probs = (0..params.dims.num_heads)
        .map(|k| head_forward(params, k, &hidden))
        .collect::<Result<_>>()?;
    Ok(Forward { hidden, probs })
}

pub fn forward_all(params: &ModelParams, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    Ok(forward(params, x)?.probs)
}

/// Accumulates `Σ_k (∂ŷ_k/∂θ)ᵀ·upstream_k` into `grad`.
///
/// `upstream[k]` is the loss gradient with respect to head `k`'s probability
/// vector; the softmax Jacobian is applied here.
pub fn backward(params: &ModelParams, x: &[f64], fwd: &Forward, upstream: &[Vec<f64>], grad: &mut [f64]) {
    let dims = params.dims;
    let dh_len = dims.hidden_dim;
    let mut d_hidden = vec![0.0; dh_len];
    for k in 0..dims.num_heads {
        let p = &fwd.probs[k];
        let g = &upstream[k];
        let mut inner = 0.0;
        for (gi, pi) in g.iter().zip(p) {
            inner += gi * pi;
        }
        let dz: Vec<f64> = p.iter().zip(g).map(|(pi, gi)| pi * (gi - inner)).collect();

        let w_off = dims.head_w_offset(k);
        let b_off = dims.head_b_offset(k);
        let w = params.head_w(k);
        for (i, dzi) in dz.iter().enumerate() {
            let row = w_off + i * dh_len;
            for j in 0..dh_len {
                grad[row + j] += dzi * fwd.hidden[j];
                d_hidden[j] += dzi * w[i * dh_len + j];
            }
            grad[b_off + i] += dzi;
        }
    }
    let dx = dims.input_dim;
    let b_off = dims.enc_w_len();
    for (i, dhi) in d_hidden.iter().enumerate() {
        let da = dhi * params.activation.derivative_from_output(fwd.hidden[i]);
        for j in 0..dx {
            grad[i * dx + j] += da * x[j];
        }
        grad[b_off + i] += da;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(activation: Activation, seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            hidden_dim: 4,
            activation,
            init_scale: 1.0,
            seed,
        };
        init_params(&cfg, 5, 7, 3).unwrap()
    }

    #[test]
    fn init_contract() {
        let p = small(Activation::Tanh, 4);
        assert_eq!(p, small(Activation::Tanh, 4));
        assert_ne!(p, small(Activation::Tanh, 5));
        assert!(p.enc_b().iter().all(|&b| b == 0.0));
        for k in 0..3 {
            assert!(p.head_b(k).iter().all(|&b| b == 0.0));
            assert!(p.head_w(k).iter().all(|w| w.abs() <= 1.0 / 2.0));
        }
        assert!(p.enc_w().iter().all(|w| w.abs() <= 1.0 / 5f64.sqrt()));
        assert_eq!(p.as_slice().len(), 4 * 5 + 4 + 3 * (7 * 4 + 7));
    }

    #[test]
    fn identity_encoder() {
        let dims = ModelDims { input_dim: 3, hidden_dim: 3, num_nodes: 2, num_heads: 1 };
        let mut p = ModelParams::zeros(dims, Activation::Identity).unwrap();
        for i in 0..3 {
            p.enc_w_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(encode(&p, &[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);
        assert!(encode(&p, &[1.0]).is_err());
    }

    #[test]
    fn tanh_is_bounded() {
        let p = small(Activation::Tanh, 1);
        let h = encode(&p, &[50.0, -40.0, 30.0, 9.0, -70.0]).unwrap();
        assert!(h.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn encoder_jacobian_finite_difference() {
        let p = small(Activation::Tanh, 2);
        let x = [0.3, -0.7, 1.1, 0.2, -0.4];
        let jac = encode_jacobian(&p, &x).unwrap();
        let eps = 1e-6;
        let mut num = vec![0.0; jac.len()];
        for j in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += eps;
            xm[j] -= eps;
            let hp = encode(&p, &xp).unwrap();
            let hm = encode(&p, &xm).unwrap();
            for i in 0..4 {
                num[i * 5 + j] = (hp[i] - hm[i]) / (2.0 * eps);
            }
        }
        let diff = jac.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = jac.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-5);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0; 5]);
        assert!(u.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let big = softmax(&[1000.0, 0.0, -3.0, 2.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!(big[0] > 1.0 - 1e-9);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heads_and_forward() {
        let p = small(Activation::Tanh, 3);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        let h = encode(&p, &x).unwrap();
        let all = forward_all(&p, &x).unwrap();
        for (k, probs) in all.iter().enumerate() {
            assert_eq!(probs, &head_forward(&p, k, &h).unwrap());
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(head_forward(&p, 3, &h).is_err());

        let mut tied = p.clone();
        let (w0, b0) = (p.head_w(0).to_vec(), p.head_b(0).to_vec());
        for k in 1..3 {
            tied.head_w_mut(k).copy_from_slice(&w0);
            tied.head_b_mut(k).copy_from_slice(&b0);
        }
        let out = forward_all(&tied, &x).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[1], out[2]);

        let single = p.first_heads(1).unwrap();
        assert_eq!(forward_all(&single, &x).unwrap(), vec![head_forward(&p, 0, &h).unwrap()]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = small(Activation::Identity, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.write_checkpoint(&path).unwrap();
        assert_eq!(ModelParams::read_checkpoint(&path).unwrap(), p);
        let mut bytes = std::fs::read(&path).unwrap();
        let pos = bytes.windows(7).position(|w| w == b"ckpt-v1").unwrap();
        bytes[pos + 6] = b'2';
        std::fs::write(&path, bytes).unwrap();
        assert!(ModelParams::read_checkpoint(&path).is_err());
    }
}
