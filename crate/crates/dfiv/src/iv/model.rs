//! Fitted structural function `f̂(x) = ûᵀ ψ(x)`, optionally with observed
//! confounders entering through `ûᵀ (ψ(x) ⊗ ξ(o))`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::iv::confounded::row_tensor;
use crate::iv::features::Features;
use crate::linalg::{dot, Mat};
use crate::textio::{push_floats, Tokens};

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralModel {
    pub u: Vec<f64>,
    pub psi: Features,
    /// Observable features; when present, predictions use the tensor
    /// product of treatment and observable features.
    pub xi: Option<Features>,
}

impl StructuralModel {
    pub fn new(u: Vec<f64>, psi: Features) -> Result<Self> {
        if u.len() != psi.dim() {
            return Err(dim_err("StructuralModel u", psi.dim(), u.len()));
        }
        Ok(Self { u, psi, xi: None })
    }

    pub fn with_observables(u: Vec<f64>, psi: Features, xi: Features) -> Result<Self> {
        if u.len() != psi.dim() * xi.dim() {
            return Err(dim_err("StructuralModel u", psi.dim() * xi.dim(), u.len()));
        }
        Ok(Self {
            u,
            psi,
            xi: Some(xi),
        })
    }

    pub fn has_observables(&self) -> bool {
        self.xi.is_some()
    }

    /// Structural-function predictions for each row of `x` (and `o`).
    pub fn predict(&self, x: &Mat, o: Option<&Mat>) -> Result<Vec<f64>> {
        let feats = self.psi.eval(x)?;
        let design = match (&self.xi, o) {
            (None, _) => feats,
            (Some(xi), Some(o)) => {
                if o.rows() != x.rows() {
                    return Err(dim_err("predict observable rows", x.rows(), o.rows()));
                }
                row_tensor(&feats, &xi.eval(o)?)?
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "model needs observables to predict".into(),
                ))
            }
        };
        if design.cols() != self.u.len() {
            return Err(dim_err(
                "predict feature width",
                self.u.len(),
                design.cols(),
            ));
        }
        Ok((0..design.rows())
            .map(|i| dot(design.row(i), &self.u))
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("structural 1\n");
        let _ = writeln!(out, "tensor {}", u8::from(self.xi.is_some()));
        let _ = writeln!(out, "ulen {}", self.u.len());
        push_floats(&mut out, "u", &self.u);
        out.push_str("psi\n");
        self.psi.write_text(&mut out);
        if let Some(xi) = &self.xi {
            out.push_str("xi\n");
            xi.write_text(&mut out);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tok = Tokens::new(text);
        tok.expect("structural")?;
        tok.expect("1")?;
        tok.expect("tensor")?;
        let tensor = tok.parse::<u8>()? == 1;
        tok.expect("ulen")?;
        let k: usize = tok.parse()?;
        tok.expect("u")?;
        let u = tok.floats(k)?;
        tok.expect("psi")?;
        let psi = Features::read_tokens(&mut tok)?;
        let model = if tensor {
            tok.expect("xi")?;
            let xi = Features::read_tokens(&mut tok)?;
            Self::with_observables(u, psi, xi)?
        } else {
            Self::new(u, psi)?
        };
        tok.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;
    use crate::neural::{Activation, FeatureMap};

    #[test]
    fn zero_weights_predict_zero() {
        let m = StructuralModel::new(vec![0.0; 3], Features::identity(3)).unwrap();
        let x = RngStream::new(1, 0).gaussian_mat(5, 3, 1.0);
        assert_eq!(m.predict(&x, None).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn scalar_linear_model() {
        let m = StructuralModel::new(vec![2.0], Features::identity(1)).unwrap();
        let p = m.predict(&Mat::from_rows(&[[1.5], [-3.0]]), None).unwrap();
        assert_eq!(p, vec![3.0, -6.0]);
    }

    #[test]
    fn wrong_u_length_is_rejected() {
        assert!(StructuralModel::new(vec![1.0; 2], Features::identity(3)).is_err());
        let m = StructuralModel::new(vec![1.0; 3], Features::identity(3)).unwrap();
        assert!(m.predict(&Mat::zeros(2, 2), None).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = RngStream::new(4, 0);
        let fm = FeatureMap::relu_mlp(&[2, 5, 3], Activation::Identity, &mut rng).unwrap();
        let psi = Features::mlp(fm)
            .with_intercept()
            .standardized_on(&rng.gaussian_mat(10, 2, 2.0));
        let u: Vec<f64> = (0..psi.dim() * 2).map(|_| rng.gaussian()).collect();
        let m = StructuralModel::with_observables(u, psi, Features::identity(1).with_intercept())
            .unwrap();
        let back = StructuralModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let x = rng.gaussian_mat(4, 2, 1.0);
        let o = rng.gaussian_mat(4, 1, 1.0);
        assert_eq!(
            back.predict(&x, Some(&o)).unwrap(),
            m.predict(&x, Some(&o)).unwrap()
        );
    }
}
