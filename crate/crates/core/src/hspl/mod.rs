//! Hard sample prototype learning: balanced crop sampling, coordinate
//! selection, feature vectors, the prototype pair and all training losses.

mod io;
mod losses;
mod sampling;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{FeatureDumpWriter, LossLogWriter};
pub use losses::{
    concentration_loss, concentration_loss_grad, focal_loss, focal_loss_grad, focal_loss_logits, regression_loss,
    regression_loss_grad, total_loss, ConcentrationGrad, FocalNorm, RegTarget,
};
pub use sampling::{sample_balanced_crops, select_coordinate, CmbTarget, TrainingCrop, TrainingSubject};
pub use train::{train_step, StepOptions, StepOutput};

use crate::error::{Error, Result};
use crate::nn::{Dims, Module, Param, Tensor};

/// Trainable CMB and mimic class centres.
#[derive(Clone, Debug)]
pub struct PrototypePair {
    pub cmb: Param,
    pub mimic: Param,
}

impl PrototypePair {
    /// Independent draws from N(0, 0.01^2).
    pub fn new<R: Rng + ?Sized>(n_ch: usize, rng: &mut R) -> Self {
        Self {
            cmb: Param::normal("proto.cmb", vec![n_ch], 0.01, rng),
            mimic: Param::normal("proto.mimic", vec![n_ch], 0.01, rng),
        }
    }

    pub fn from_values(cmb: Vec<f32>, mimic: Vec<f32>) -> Self {
        Self {
            cmb: Param::new("proto.cmb", vec![cmb.len()], cmb),
            mimic: Param::new("proto.mimic", vec![mimic.len()], mimic),
        }
    }

    pub fn len(&self) -> usize {
        self.cmb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cmb.is_empty()
    }

    /// `(M_a, M_b)`: same-class prototype first.
    pub fn roles(&self, is_cmb: bool) -> (&[f32], &[f32]) {
        if is_cmb {
            (&self.cmb.value, &self.mimic.value)
        } else {
            (&self.mimic.value, &self.cmb.value)
        }
    }
}

impl Module for PrototypePair {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.cmb);
        f(&mut self.mimic);
    }
}

/// Feature column at one voxel of the fused map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub source_coord: Dims,
    pub source_is_cmb: bool,
}

pub fn extract_feature_vector(f: &Tensor, c: Dims, is_cmb: bool) -> Result<FeatureVector> {
    let d = f.dims();
    if (0..3).any(|i| c[i] >= d[i]) {
        return Err(Error::CoordinateOutOfGrid {
            coord: c.map(|v| v as f64),
            grid: d,
        });
    }
    let values = (0..f.channels()).map(|k| f.at(k, c[0], c[1], c[2])).collect();
    Ok(FeatureVector {
        values,
        source_coord: c,
        source_is_cmb: is_cmb,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_con: f64,
    pub margin_n: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_reg: 0.001,
            lambda_con: 0.01,
            margin_n: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_reg,
            self.lambda_con,
            self.margin_n,
            self.focal_gamma,
            self.focal_alpha,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("losses", "weights must be finite and non-negative"));
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::invalid("focal_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Individual loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_con")]
    pub l_con: f64,
    #[serde(rename = "L_final")]
    pub l_final: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn feature_vector_reads_columns() {
        let mut f = Tensor::zeros(2, [4, 4, 4]);
        f.set(0, 1, 2, 3, 3.0);
        f.set(1, 1, 2, 3, -1.0);
        let v = extract_feature_vector(&f, [1, 2, 3], true).unwrap();
        assert_eq!(v.values, vec![3.0, -1.0]);
        let ones = Tensor::filled(3, [2, 2, 2], 1.0);
        let a = extract_feature_vector(&ones, [0, 0, 0], false).unwrap();
        let b = extract_feature_vector(&ones, [1, 1, 1], false).unwrap();
        assert_eq!(a.values, vec![1.0; 3]);
        assert_eq!(a.values, b.values);
        assert!(extract_feature_vector(&ones, [2, 0, 0], false).is_err());
    }

    #[test]
    fn prototypes_are_small_and_distinct() {
        let p = PrototypePair::new(16, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        assert_ne!(p.cmb.value, p.mimic.value);
        assert!(p.cmb.value.iter().chain(&p.mimic.value).all(|v| v.abs() < 0.06));
        let (a, b) = p.roles(false);
        assert_eq!(a, &p.mimic.value[..]);
        assert_eq!(b, &p.cmb.value[..]);
    }

    #[test]
    fn loss_breakdown_uses_term_names() {
        let v = serde_json::to_value(LossBreakdown::default()).unwrap();
        assert!(v.get("L_con").is_some() && v.get("L_final").is_some());
    }
}
