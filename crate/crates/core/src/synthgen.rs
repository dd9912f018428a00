//! Seeded synthetic patient records drawn from a latent class.
//!
//! Each record's class is the latent state; its features are the class
//! prototype plus the site's additive shift plus isotropic Gaussian noise.
//! Prototypes are scaled orthogonal axes in the first `C` coordinates, so the
//! classes are linearly separable when the noise is zero.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::confusion::ConfusionMatrix;
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, Purpose};

pub const DATASET_FORMAT: &str = "synth-v1";

fn default_jitter() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_records: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_sites: usize,
    pub prototype_separation: f64,
    pub feature_noise_sd: f64,
    /// Standard deviation of the prototype jitter placed in coordinates
    /// `C..d_x`. Zero disables it.
    #[serde(default = "default_jitter")]
    pub prototype_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_records == 0 {
            return Err(Error::config("num_records must be > 0"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::config(format!(
                "feature_dim {} < num_classes {}: cannot place orthogonal prototypes",
                self.feature_dim, self.num_classes
            )));
        }
        if self.num_sites == 0 {
            return Err(Error::config("num_sites must be >= 1"));
        }
        for (name, v) in [
            ("prototype_separation", self.prototype_separation),
            ("feature_noise_sd", self.feature_noise_sd),
            ("prototype_jitter", self.prototype_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub class_index: usize,
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub x: Vec<f64>,
    pub site_id: usize,
    /// Generating class. Read only by evaluation and by channel operators that
    /// simulate a labeling process; never passed to training.
    pub truth_class: usize,
}

/// One institution: how its records are shifted and how it labels them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: usize,
    pub feature_shift: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

impl SiteSpec {
    /// A site with no feature shift and a noiseless labeling channel.
    pub fn neutral(site_id: usize, config: &GenConfig) -> Self {
        Self {
            site_id,
            feature_shift: vec![0.0; config.feature_dim],
            confusion: ConfusionMatrix::identity(config.num_classes),
        }
    }

    /// A shift of Euclidean length `norm` in a seeded random direction.
    pub fn random_shift(site_id: usize, dim: usize, norm: f64, seed: u64) -> Vec<f64> {
        if norm == 0.0 {
            return vec![0.0; dim];
        }
        let mut rng = stream(seed, Purpose::SiteShift, &[site_id as u64]);
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.into_iter().map(|v| norm * v / len).collect()
    }
}

/// `C` prototypes at pairwise distance at least `prototype_separation`.
pub fn make_prototypes(config: &GenConfig) -> Result<Vec<LatentState>> {
    config.validate()?;
    let scale = config.prototype_separation / std::f64::consts::SQRT_2;
    let jitter = if config.prototype_jitter > 0.0 {
        Some(Normal::new(0.0, config.prototype_jitter).expect("validated sd"))
    } else {
        None
    };
    let mut rng = stream(config.seed, Purpose::Prototypes, &[]);
    let mut out = Vec::with_capacity(config.num_classes);
    for c in 0..config.num_classes {
        let mut p = vec![0.0; config.feature_dim];
        p[c] = scale;
        if let Some(j) = &jitter {
            for v in p.iter_mut().skip(config.num_classes) {
                *v = j.sample(&mut rng);
            }
        }
        out.push(LatentState {
            class_index: c,
            prototype: p,
        });
    }
    Ok(out)
}

pub fn validate_sites(config: &GenConfig, sites: &[SiteSpec]) -> Result<()> {
    check_dim("site list", config.num_sites, sites.len())?;
    for (i, s) in sites.iter().enumerate() {
        if s.site_id != i {
            return Err(Error::config(format!("site at position {i} has site_id {}", s.site_id)));
        }
        check_dim("site feature_shift", config.feature_dim, s.feature_shift.len())?;
        check_dim("site confusion", config.num_classes, s.confusion.num_classes())?;
        if s.feature_shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("site feature_shift has non-finite entries"));
        }
    }
    Ok(())
}

pub fn generate_dataset(config: &GenConfig, sites: &[SiteSpec]) -> Result<Vec<PatientRecord>> {
    validate_sites(config, sites)?;
    let prototypes = make_prototypes(config)?;
    let records = (0..config.num_records)
        .map(|i| {
            let mut rng = stream(config.seed, Purpose::Records, &[i as u64]);
            let class = rng.random_range(0..config.num_classes);
            let site = rng.random_range(0..config.num_sites);
            let proto = &prototypes[class].prototype;
            let shift = &sites[site].feature_shift;
            let x = (0..config.feature_dim)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    proto[j] + shift[j] + config.feature_noise_sd * z
                })
                .collect();
            PatientRecord {
                x,
                site_id: site,
                truth_class: class,
            }
        })
        .collect();
    Ok(records)
}

/// A generated dataset together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub sites: Vec<SiteSpec>,
    pub records: Vec<PatientRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    config: GenConfig,
    sites: Vec<SiteSpec>,
}

impl Dataset {
    pub fn generate(config: GenConfig, sites: Vec<SiteSpec>) -> Result<Self> {
        let records = generate_dataset(&config, &sites)?;
        Ok(Self {
            config,
            sites,
            records,
        })
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.x.as_slice()).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            config: self.config.clone(),
            sites: self.sites.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty dataset file"))?
            .map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&first)?;
        match raw.get("format").and_then(|f| f.as_str()) {
            Some(DATASET_FORMAT) => {}
            Some(other) => return Err(Error::format(path, format!("unknown dataset version {other:?}"))),
            None => return Err(Error::format(path, "missing dataset format header")),
        }
        let header: DatasetHeader = serde_json::from_value(raw)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: PatientRecord = serde_json::from_str(&line)?;
            check_dim("record features", header.config.feature_dim, r.x.len())?;
            if r.truth_class >= header.config.num_classes || r.site_id >= header.config.num_sites {
                return Err(Error::format(path, "record class or site out of range"));
            }
            records.push(r);
        }
        check_dim("record count", header.config.num_records, records.len())?;
        Ok(Self {
            config: header.config,
            sites: header.sites,
            records,
        })
    }
}
