use crate::error::{dim_err, Result};
use crate::linalg::Mat;
use crate::neural::FeatureMap;

/// Parameter gradients shaped like a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_for(fm: &FeatureMap) -> Self {
        Self {
            weights: fm
                .layers()
                .iter()
                .map(|l| Mat::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: fm
                .layers()
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    pub fn matches(&self, fm: &FeatureMap) -> bool {
        self.weights.len() == fm.layers().len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(fm.layers())
                .all(|((w, b), l)| w.shape() == l.weight.shape() && b.len() == l.bias.len())
    }

    pub fn zero(&mut self) {
        self.weights
            .iter_mut()
            .for_each(|w| w.as_mut_slice().fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, alpha: f64) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(dim_err(
                "GradBuffer::add_scaled",
                self.weights.len(),
                other.weights.len(),
            ));
        }
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            w.add_assign_scaled(ow, alpha)?;
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            if b.len() != ob.len() {
                return Err(dim_err("GradBuffer::add_scaled bias", b.len(), ob.len()));
            }
            b.iter_mut().zip(ob).for_each(|(x, y)| *x += alpha * y);
        }
        Ok(())
    }

    /// Same layout as [`FeatureMap::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Mat::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}
