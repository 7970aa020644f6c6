use crate::error::{dim_err, Error, Result};
use crate::linalg::Mat;

/// Complete `(x, y, z[, o])` observations kept out of training and used
/// for out-of-sample stage losses.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub x: Mat,
    pub y: Vec<f64>,
    pub z: Mat,
    pub o: Option<Mat>,
}

/// Two-sample IV data: `m` stage-1 pairs `(x, z)` and `n` stage-2 pairs
/// `(ỹ, z̃)`, optionally with observed confounders in both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct IvDataset {
    pub stage1_x: Mat,
    pub stage1_z: Mat,
    pub stage2_y: Vec<f64>,
    pub stage2_z: Mat,
    pub stage1_o: Option<Mat>,
    pub stage2_o: Option<Mat>,
    pub holdout: Option<JointSample>,
}

impl IvDataset {
    pub fn new(stage1_x: Mat, stage1_z: Mat, stage2_y: Vec<f64>, stage2_z: Mat) -> Result<Self> {
        let ds = Self {
            stage1_x,
            stage1_z,
            stage2_y,
            stage2_z,
            stage1_o: None,
            stage2_o: None,
            holdout: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_observables(mut self, stage1_o: Mat, stage2_o: Mat) -> Result<Self> {
        self.stage1_o = Some(stage1_o);
        self.stage2_o = Some(stage2_o);
        self.validate()?;
        Ok(self)
    }

    pub fn with_holdout(mut self, holdout: JointSample) -> Result<Self> {
        self.holdout = Some(holdout);
        self.validate()?;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.stage1_x.rows()
    }

    pub fn n(&self) -> usize {
        self.stage2_y.len()
    }

    pub fn has_observables(&self) -> bool {
        self.stage1_o.is_some() && self.stage2_o.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.m(), self.n());
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument(
                "both stages need at least one row".into(),
            ));
        }
        if self.stage1_z.rows() != m {
            return Err(dim_err("IvDataset stage-1 z rows", m, self.stage1_z.rows()));
        }
        if self.stage2_z.rows() != n {
            return Err(dim_err("IvDataset stage-2 z rows", n, self.stage2_z.rows()));
        }
        if self.stage1_z.cols() != self.stage2_z.cols() {
            return Err(dim_err(
                "IvDataset instrument width",
                self.stage1_z.cols(),
                self.stage2_z.cols(),
            ));
        }
        match (&self.stage1_o, &self.stage2_o) {
            (None, None) => {}
            (Some(o1), Some(o2)) => {
                if o1.rows() != m || o2.rows() != n {
                    return Err(dim_err(
                        "IvDataset observable rows",
                        format!("{m}/{n}"),
                        format!("{}/{}", o1.rows(), o2.rows()),
                    ));
                }
                if o1.cols() != o2.cols() {
                    return Err(dim_err("IvDataset observable width", o1.cols(), o2.cols()));
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "observables must be present in both stages or neither".into(),
                ))
            }
        }
        let finite = self.stage1_x.is_finite()
            && self.stage1_z.is_finite()
            && self.stage2_z.is_finite()
            && self.stage2_y.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("IvDataset"));
        }
        if let Some(h) = &self.holdout {
            let k = h.y.len();
            if h.x.rows() != k || h.z.rows() != k || h.o.as_ref().is_some_and(|o| o.rows() != k) {
                return Err(dim_err("IvDataset holdout rows", k, h.x.rows()));
            }
            if h.x.cols() != self.stage1_x.cols() || h.z.cols() != self.stage1_z.cols() {
                return Err(dim_err(
                    "IvDataset holdout widths",
                    self.stage1_x.cols(),
                    h.x.cols(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_inconsistent_rows() {
        let ok = IvDataset::new(
            Mat::zeros(3, 1),
            Mat::zeros(3, 2),
            vec![0.0; 2],
            Mat::zeros(2, 2),
        );
        assert!(ok.is_ok());
        assert!(IvDataset::new(
            Mat::zeros(3, 1),
            Mat::zeros(2, 2),
            vec![0.0; 2],
            Mat::zeros(2, 2)
        )
        .is_err());
        assert!(IvDataset::new(
            Mat::zeros(3, 1),
            Mat::zeros(3, 2),
            vec![0.0; 2],
            Mat::zeros(2, 1)
        )
        .is_err());
        assert!(IvDataset::new(
            Mat::zeros(0, 1),
            Mat::zeros(0, 2),
            vec![0.0; 2],
            Mat::zeros(2, 2)
        )
        .is_err());
        assert!(IvDataset::new(
            Mat::zeros(1, 1),
            Mat::zeros(1, 1),
            vec![f64::NAN],
            Mat::zeros(1, 1)
        )
        .is_err());
        let obs = ok
            .unwrap()
            .with_observables(Mat::zeros(3, 2), Mat::zeros(3, 2));
        assert!(obs.is_err());
    }
}
