use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// A C×C row-stochastic matrix: `row[true_class][observed_class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ConfusionMatrix {
    rows: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = rows.len();
        if c == 0 {
            return Err(Error::config("confusion matrix has no rows"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::config(format!(
                    "confusion row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::config(format!("confusion row {i} has entries outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::config(format!("confusion row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self { rows })
    }

    pub fn identity(num_classes: usize) -> Self {
        let rows = (0..num_classes)
            .map(|i| (0..num_classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { rows }
    }

    /// Keeps the true class with probability `1 - flip_rate`, otherwise moves
    /// to one of the other classes uniformly.
    pub fn symmetric(num_classes: usize, flip_rate: f64) -> Result<Self> {
        check_flip(flip_rate)?;
        if num_classes < 2 {
            return Err(Error::config("symmetric confusion needs at least 2 classes"));
        }
        let off = flip_rate / (num_classes - 1) as f64;
        let rows = (0..num_classes)
            .map(|i| {
                (0..num_classes)
                    .map(|j| if i == j { 1.0 - flip_rate } else { off })
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    /// Systematic bias: class `c` is reported as `(c + offset) mod C` with
    /// probability `flip_rate`.
    pub fn cyclic(num_classes: usize, flip_rate: f64, offset: usize) -> Result<Self> {
        check_flip(flip_rate)?;
        if offset.is_multiple_of(num_classes) {
            return Err(Error::config("cyclic confusion offset must not be a multiple of C"));
        }
        let rows = (0..num_classes)
            .map(|i| {
                let mut row = vec![0.0; num_classes];
                row[i] = 1.0 - flip_rate;
                row[(i + offset) % num_classes] += flip_rate;
                row
            })
            .collect();
        Self::new(rows)
    }

    pub fn uniform(num_classes: usize) -> Self {
        let p = 1.0 / num_classes as f64;
        Self {
            rows: vec![vec![p; num_classes]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, true_class: usize) -> &[f64] {
        &self.rows[true_class]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// The channel obtained by passing through `self` first and `next` second.
    pub fn then(&self, next: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        let c = self.num_classes();
        if next.num_classes() != c {
            return Err(Error::Dimension {
                context: "confusion composition",
                expected: c,
                actual: next.num_classes(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| (0..c).map(|m| self.rows[i][m] * next.rows[m][j]).sum())
                    .collect()
            })
            .collect();
        // Renormalize so products of valid matrices never drift past the tolerance.
        let rows = rows
            .into_iter()
            .map(|r: Vec<f64>| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        ConfusionMatrix::new(rows)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.num_classes())
    }
}

/// Declarative description of a confusion matrix, resolved once the class
/// count is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfusionSpec {
    Identity,
    Uniform,
    Symmetric { flip_rate: f64 },
    Cyclic { flip_rate: f64, offset: usize },
    Matrix(ConfusionMatrix),
}

impl ConfusionSpec {
    pub fn resolve(&self, num_classes: usize) -> Result<ConfusionMatrix> {
        let m = match self {
            ConfusionSpec::Identity => ConfusionMatrix::identity(num_classes),
            ConfusionSpec::Uniform => ConfusionMatrix::uniform(num_classes),
            ConfusionSpec::Symmetric { flip_rate } => ConfusionMatrix::symmetric(num_classes, *flip_rate)?,
            ConfusionSpec::Cyclic { flip_rate, offset } => {
                ConfusionMatrix::cyclic(num_classes, *flip_rate, *offset)?
            }
            ConfusionSpec::Matrix(m) => m.clone(),
        };
        if m.num_classes() != num_classes {
            return Err(Error::Dimension {
                context: "confusion matrix",
                expected: num_classes,
                actual: m.num_classes(),
            });
        }
        Ok(m)
    }
}

fn check_flip(flip_rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&flip_rate) {
        Ok(())
    } else {
        Err(Error::config(format!("flip rate {flip_rate} outside [0,1]")))
    }
}

impl TryFrom<Vec<Vec<f64>>> for ConfusionMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        ConfusionMatrix::new(rows)
    }
}

impl From<ConfusionMatrix> for Vec<Vec<f64>> {
    fn from(m: ConfusionMatrix) -> Self {
        m.rows
    }
}
