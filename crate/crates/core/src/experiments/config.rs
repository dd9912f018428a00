use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confusion::ConfusionSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::supervision::OperatorSpec;
use crate::synthgen::{GenConfig, SiteSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Main,
    NoiseSweep,
    Transfer,
    Ablation,
    KScaling,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Main => "main",
            Protocol::NoiseSweep => "noise_sweep",
            Protocol::Transfer => "transfer",
            Protocol::Ablation => "ablation",
            Protocol::KScaling => "k_scaling",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "main" => Protocol::Main,
            "noise_sweep" => Protocol::NoiseSweep,
            "transfer" => Protocol::Transfer,
            "ablation" => Protocol::Ablation,
            "k_scaling" => Protocol::KScaling,
            other => return Err(Error::config(format!("unknown protocol {other:?}"))),
        })
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss/model variants compared by the protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The configured λ, γ and every operator.
    Full,
    /// λ = 0.
    NoAgreement,
    /// γ = 0.
    NoOntology,
    /// First operator only, λ = γ = 0: plain supervised cross-entropy.
    SingleView,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoAgreement, Variant::NoOntology, Variant::SingleView];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAgreement => "no_agreement",
            Variant::NoOntology => "no_ontology",
            Variant::SingleView => "single_view",
        }
    }

    /// Loss configuration and head count for this variant.
    pub fn apply(self, loss: &LossConfig, num_operators: usize) -> (LossConfig, usize) {
        let mut l = loss.clone();
        let k = match self {
            Variant::Full => num_operators,
            Variant::NoAgreement => {
                l.lambda = 0.0;
                num_operators
            }
            Variant::NoOntology => {
                l.gamma = 0.0;
                num_operators
            }
            Variant::SingleView => {
                l.lambda = 0.0;
                l.gamma = 0.0;
                1
            }
        };
        (l, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSpec {
    /// Length-`norm` shift in a direction drawn from the run seed.
    Random { norm: f64 },
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub site_id: usize,
    #[serde(default)]
    pub feature_shift: Option<ShiftSpec>,
    /// Site-level labeling channel applied before each channel operator's own.
    #[serde(default = "identity_spec")]
    pub confusion: ConfusionSpec,
}

fn identity_spec() -> ConfusionSpec {
    ConfusionSpec::Identity
}

impl SiteConfig {
    pub fn resolve(&self, gen: &GenConfig, seed: u64) -> Result<SiteSpec> {
        let feature_shift = match &self.feature_shift {
            None => vec![0.0; gen.feature_dim],
            Some(ShiftSpec::Random { norm }) => {
                if !(norm.is_finite() && *norm >= 0.0) {
                    return Err(Error::config("site shift norm must be finite and >= 0"));
                }
                SiteSpec::random_shift(self.site_id, gen.feature_dim, *norm, seed)
            }
            Some(ShiftSpec::Explicit(v)) => v.clone(),
        };
        Ok(SiteSpec {
            site_id: self.site_id,
            feature_shift,
            confusion: self.confusion.resolve(gen.num_classes)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub branching: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    /// Corruption rates for `noise_sweep`, ascending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhos: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_sites: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_sites: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Variant>>,
    /// Head counts for `k_scaling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<Vec<usize>>,
}

/// A complete, strictly parsed experiment description. The `seed` fields of
/// `gen`, `model` and `loss` are ignored: every run sets all three to the
/// run seed taken from `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    /// Empty means `num_sites` neutral sites.
    #[serde(default)]
    pub sites: Vec<SiteConfig>,
    pub operators: Vec<OperatorSpec>,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub protocol: Protocol,
    #[serde(default)]
    pub protocol_params: ProtocolParams,
    pub seeds: Vec<u64>,
    /// Corruption applied to every view set outside `noise_sweep`.
    #[serde(default)]
    pub corruption_rho: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The same configuration under another protocol. Fails if the
    /// parameters do not fit the new protocol.
    pub fn with_protocol(&self, protocol: Protocol) -> Result<Self> {
        let mut c = self.clone();
        c.protocol = protocol;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.operators.is_empty() {
            return Err(Error::config("at least one operator is required"));
        }
        let ids: BTreeSet<u64> = self.operators.iter().map(OperatorSpec::operator_id).collect();
        if ids.len() != self.operators.len() {
            return Err(Error::config("operator ids must be distinct"));
        }
        if !(0.0..=1.0).contains(&self.corruption_rho) {
            return Err(Error::config("corruption_rho must be in [0,1]"));
        }
        if !self.sites.is_empty() {
            if self.sites.len() != self.gen.num_sites {
                return Err(Error::config(format!(
                    "{} sites configured but gen.num_sites = {}",
                    self.sites.len(),
                    self.gen.num_sites
                )));
            }
            for (i, s) in self.sites.iter().enumerate() {
                if s.site_id != i {
                    return Err(Error::config("sites must be listed in site_id order starting at 0"));
                }
                if let Some(ShiftSpec::Explicit(v)) = &s.feature_shift {
                    if v.len() != self.gen.feature_dim {
                        return Err(Error::config(format!("site {i} shift has the wrong length")));
                    }
                }
            }
        }
        self.validate_params()
    }

    fn validate_params(&self) -> Result<()> {
        let p = &self.protocol_params;
        let proto = self.protocol;
        let forbid = |present: bool, field: &str| -> Result<()> {
            if present {
                Err(Error::config(format!("protocol_params.{field} does not apply to protocol {proto}")))
            } else {
                Ok(())
            }
        };
        forbid(p.rhos.is_some() && proto != Protocol::NoiseSweep, "rhos")?;
        forbid(p.train_sites.is_some() && proto != Protocol::Transfer, "train_sites")?;
        forbid(p.test_sites.is_some() && proto != Protocol::Transfer, "test_sites")?;
        forbid(p.ks.is_some() && proto != Protocol::KScaling, "ks")?;
        forbid(
            p.variants.is_some() && matches!(proto, Protocol::Main | Protocol::KScaling),
            "variants",
        )?;

        if let Some(vs) = &p.variants {
            if vs.is_empty() || vs.iter().collect::<BTreeSet<_>>().len() != vs.len() {
                return Err(Error::config("variants must be non-empty and distinct"));
            }
        }
        match proto {
            Protocol::Main | Protocol::Ablation => {}
            Protocol::NoiseSweep => {
                let rhos = p.rhos.as_ref().ok_or_else(|| Error::config("noise_sweep needs protocol_params.rhos"))?;
                if rhos.is_empty() {
                    return Err(Error::config("rhos must not be empty"));
                }
                if rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
                    return Err(Error::config("every rho must be in [0,1]"));
                }
                if rhos.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::config("rhos must be sorted ascending"));
                }
            }
            Protocol::Transfer => {
                let (train, test) = match (&p.train_sites, &p.test_sites) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::config("transfer needs train_sites and test_sites")),
                };
                if train.is_empty() || test.is_empty() {
                    return Err(Error::config("train_sites and test_sites must be non-empty"));
                }
                if let Some(s) = train.iter().chain(test).find(|&&s| s >= self.gen.num_sites) {
                    return Err(Error::config(format!("site {s} does not exist")));
                }
                let a: BTreeSet<_> = train.iter().collect();
                if let Some(s) = test.iter().find(|s| a.contains(s)) {
                    return Err(Error::config(format!("site {s} is in both train_sites and test_sites")));
                }
            }
            Protocol::KScaling => {
                let ks = p.ks.as_ref().ok_or_else(|| Error::config("k_scaling needs protocol_params.ks"))?;
                if ks.is_empty() || ks.contains(&0) {
                    return Err(Error::config("ks must be non-empty and every K >= 1"));
                }
                if let Some(k) = ks.iter().find(|&&k| k > self.operators.len()) {
                    return Err(Error::config(format!(
                        "K = {k} exceeds the {} configured operators",
                        self.operators.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<Variant> {
        if let Some(v) = &self.protocol_params.variants {
            return v.clone();
        }
        match self.protocol {
            Protocol::Main | Protocol::KScaling => vec![Variant::Full],
            Protocol::NoiseSweep => vec![Variant::Full, Variant::SingleView],
            Protocol::Transfer => vec![Variant::Full, Variant::NoAgreement],
            Protocol::Ablation => Variant::ALL.to_vec(),
        }
    }

    /// Generator config with the run seed applied.
    pub fn gen_for(&self, seed: u64) -> GenConfig {
        GenConfig { seed, ..self.gen.clone() }
    }

    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig { seed, ..self.model.clone() }
    }

    pub fn loss_for(&self, seed: u64) -> LossConfig {
        LossConfig { seed, ..self.loss.clone() }
    }

    pub fn sites_for(&self, seed: u64) -> Result<Vec<SiteSpec>> {
        let gen = self.gen_for(seed);
        if self.sites.is_empty() {
            return Ok((0..gen.num_sites).map(|s| SiteSpec::neutral(s, &gen)).collect());
        }
        self.sites.iter().map(|s| s.resolve(&gen, seed)).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_config_json() -> String {
        r#"{
            "gen": {"num_records": 60, "num_classes": 4, "feature_dim": 6, "num_sites": 2,
                    "prototype_separation": 4.0, "feature_noise_sd": 0.5},
            "sites": [{"site_id": 0}, {"site_id": 1, "feature_shift": {"random": {"norm": 0.5}},
                       "confusion": {"symmetric": {"flip_rate": 0.1}}}],
            "operators": [
                {"kind": "channel", "operator_id": 0, "confusion": {"symmetric": {"flip_rate": 0.2}}},
                {"kind": "channel", "operator_id": 1, "confusion": {"symmetric": {"flip_rate": 0.2}}},
                {"kind": "channel", "operator_id": 2, "confusion": {"symmetric": {"flip_rate": 0.2}}}
            ],
            "graph": {"branching": 2, "depth": 2},
            "model": {"hidden_dim": 4, "activation": "tanh", "init_scale": 0.5},
            "loss": {"lambda": 1.0, "gamma": 0.1, "agreement_kind": "sym_kl", "batch_size": 16,
                     "learning_rate": 0.1, "momentum": 0.5, "epochs": 5},
            "protocol": "main",
            "seeds": [1, 2]
        }"#
        .to_string()
    }

    fn patched(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(&small_config_json()).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn parses_and_roundtrips() {
        let c = ExperimentConfig::from_json(&small_config_json()).unwrap();
        assert_eq!(c.variants(), vec![Variant::Full]);
        let again = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, again);
        let sites = c.sites_for(7).unwrap();
        let norm: f64 = sites[1].feature_shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(sites[0].feature_shift, vec![0.0; 6]);
    }

    #[test]
    fn rejects_unknown_keys() {
        let top = patched(|v| v["bogus"] = 1.into());
        assert!(ExperimentConfig::from_json(&top).unwrap_err().is_config_error());
        let nested = patched(|v| v["loss"]["lr"] = 0.1.into());
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let op = patched(|v| v["operators"][0]["flip"] = 0.1.into());
        assert!(ExperimentConfig::from_json(&op).is_err());
    }

    #[test]
    fn protocol_params_must_match() {
        let stray = patched(|v| v["protocol_params"] = serde_json::json!({"rhos": [0.0]}));
        assert!(ExperimentConfig::from_json(&stray).is_err());
        let missing = patched(|v| v["protocol"] = "noise_sweep".into());
        assert!(ExperimentConfig::from_json(&missing).is_err());
        let unsorted = patched(|v| {
            v["protocol"] = "noise_sweep".into();
            v["protocol_params"] = serde_json::json!({"rhos": [0.4, 0.0]});
        });
        assert!(ExperimentConfig::from_json(&unsorted).is_err());
        let overlap = patched(|v| {
            v["protocol"] = "transfer".into();
            v["protocol_params"] = serde_json::json!({"train_sites": [0, 1], "test_sites": [1]});
        });
        assert!(ExperimentConfig::from_json(&overlap).unwrap_err().to_string().contains("both"));
        let too_many = patched(|v| {
            v["protocol"] = "k_scaling".into();
            v["protocol_params"] = serde_json::json!({"ks": [1, 4]});
        });
        assert!(ExperimentConfig::from_json(&too_many).is_err());
        let ok = patched(|v| {
            v["protocol"] = "transfer".into();
            v["protocol_params"] = serde_json::json!({"train_sites": [0], "test_sites": [1]});
        });
        let c = ExperimentConfig::from_json(&ok).unwrap();
        assert_eq!(c.variants(), vec![Variant::Full, Variant::NoAgreement]);
        assert!(c.with_protocol(Protocol::NoiseSweep).is_err());
    }

    #[test]
    fn variant_application() {
        let c = ExperimentConfig::from_json(&small_config_json()).unwrap();
        let (l, k) = Variant::SingleView.apply(&c.loss, 3);
        assert_eq!((l.lambda, l.gamma, k), (0.0, 0.0, 1));
        let (l, k) = Variant::NoOntology.apply(&c.loss, 3);
        assert_eq!((l.lambda, l.gamma, k), (1.0, 0.0, 3));
        let (l, _) = Variant::NoAgreement.apply(&c.loss, 3);
        assert_eq!((l.lambda, l.gamma), (0.0, 0.1));
    }
}
