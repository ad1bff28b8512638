use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureVector, Protocol, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-column standardization fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub protocol: Protocol,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: String,
}

impl ScalerParams {
    /// Fits column means and population standard deviations.
    pub fn fit(vectors: &[FeatureVector], split: &str) -> Result<Self> {
        let first = vectors.first().ok_or(FeatureError::EmptyFit)?;
        let protocol = first.protocol;
        let dim = protocol.dim();
        if let Some(v) = vectors.iter().find(|v| v.protocol != protocol || v.scaled) {
            return Err(FeatureError::ProtocolMismatch {
                expected: protocol,
                got: v.protocol,
            });
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            mean.iter_mut().zip(&v.values).for_each(|(m, x)| *m += x / n);
        }
        let mut std = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in std.iter_mut().zip(&v.values).zip(&mean) {
                *s += (x - m).powi(2) / n;
            }
        }
        let std = std.into_iter().map(|s| s.sqrt().max(STD_FLOOR)).collect();
        Ok(Self {
            protocol,
            mean,
            std,
            fitted_on: split.to_string(),
        })
    }

    fn check(&self, v: &FeatureVector) -> Result<()> {
        if v.protocol != self.protocol {
            return Err(FeatureError::ProtocolMismatch {
                expected: self.protocol,
                got: v.protocol,
            });
        }
        Ok(())
    }

    pub fn apply(&self, v: &FeatureVector) -> Result<FeatureVector> {
        self.check(v)?;
        if v.scaled {
            return Err(FeatureError::AlreadyScaled);
        }
        let values = v
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        Ok(FeatureVector {
            protocol: v.protocol,
            values,
            scaled: true,
        })
    }

    pub fn invert(&self, v: &FeatureVector) -> Result<FeatureVector> {
        self.check(v)?;
        let values = v
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect();
        Ok(FeatureVector {
            protocol: v.protocol,
            values,
            scaled: false,
        })
    }
}
