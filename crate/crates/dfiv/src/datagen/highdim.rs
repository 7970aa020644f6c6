//! High-dimensional treatment built from four latent factors.
//!
//! Latents `(scale, rotation, posX, posY)` are mapped to a `d`-dimensional
//! treatment through a fixed random embedding, plus Gaussian noise. The
//! embedding behaves like a rendered image: every coordinate is a
//! non-negative intensity, the pattern depends on orientation and
//! position, and overall brightness grows with the squared scale.
//! The outcome is a calibrated quadratic form of the treatment plus a
//! direct effect of the hidden latent `posY`; the instrument is the other
//! three latents.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iv::IvDataset;
use crate::linalg::{Mat, RngStream};

const EMBED_STREAM: u64 = 0x656d_6264;
const CALIB_STREAM: u64 = 0x6361_6c69;
const SAMPLE_STREAM: u64 = 0x6869_6464;
const CALIB_DRAWS: usize = 20_000;
const OUTPUT_ROWS: usize = 10;
/// Spread of the embedding frequencies; larger is less smooth.
const FREQ_SD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighDimConfig {
    pub treatment_dim: usize,
    pub embed_seed: u64,
    /// Standard deviation of the per-coordinate treatment noise.
    pub eta_sd: f64,
    /// Standard deviation of the outcome noise.
    pub eps_sd: f64,
    pub c0: f64,
    pub c1: f64,
}

impl HighDimConfig {
    /// Default noise levels (variances 0.1 and 0.5) with `c0`, `c1` set so
    /// that the structural function has mean 0 and variance 1 over the
    /// treatment distribution.
    pub fn calibrated(treatment_dim: usize, embed_seed: u64) -> Result<Self> {
        let mut cfg = Self {
            treatment_dim,
            embed_seed,
            eta_sd: 0.1f64.sqrt(),
            eps_sd: 0.5f64.sqrt(),
            c0: 0.0,
            c1: 1.0,
        };
        cfg.calibrate()?;
        Ok(cfg)
    }

    /// Re-estimates `c0` and `c1` by Monte Carlo at the current noise level.
    pub fn calibrate(&mut self) -> Result<()> {
        self.c0 = 0.0;
        self.c1 = 1.0;
        let emb = HighDimEmbedding::new(self)?;
        let mut rng = RngStream::new(self.embed_seed, CALIB_STREAM);
        let raw: Vec<f64> = (0..CALIB_DRAWS)
            .map(|_| {
                let lat = Latents::sample(&mut rng);
                let x = emb.treatment(&lat, self.eta_sd, &mut rng);
                emb.quadratic(&x)
            })
            .collect();
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidArgument(
                "structural function is constant".into(),
            ));
        }
        self.c0 = mean;
        self.c1 = sd;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.treatment_dim < 4 {
            return Err(Error::InvalidArgument(
                "treatment dimension must be >= 4".into(),
            ));
        }
        if !(self.c1 > 0.0) || !(self.eta_sd >= 0.0) || !(self.eps_sd >= 0.0) {
            return Err(Error::InvalidArgument(
                "c1 must be positive and noise scales non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latents {
    pub scale: f64,
    pub rotation: f64,
    pub pos_x: f64,
    pub pos_y: f64,
}

impl Latents {
    fn sample(rng: &mut RngStream) -> Self {
        Self {
            scale: rng.uniform_range(0.5, 1.0),
            rotation: rng.uniform_range(0.0, TAU),
            pos_x: rng.uniform(),
            pos_y: rng.uniform(),
        }
    }

    /// Pattern input; rotation enters through its sine and cosine.
    fn coords(&self) -> [f64; 4] {
        [
            self.rotation.cos(),
            self.rotation.sin(),
            2.0 * (self.pos_x - 0.5),
            2.0 * (self.pos_y - 0.5),
        ]
    }
}

/// The fixed maps of a [`HighDimConfig`]: latent embedding and outcome
/// matrix `A`.
#[derive(Debug, Clone)]
pub struct HighDimEmbedding {
    freqs: Mat,
    phases: Vec<f64>,
    a: Mat,
    c0: f64,
    c1: f64,
}

impl HighDimEmbedding {
    pub fn new(cfg: &HighDimConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.treatment_dim;
        let mut rng = RngStream::new(cfg.embed_seed, EMBED_STREAM);
        let freqs = rng.gaussian_mat(d, 4, FREQ_SD);
        let phases = (0..d).map(|_| rng.uniform_range(0.0, TAU)).collect();
        let a = Mat::from_fn(OUTPUT_ROWS, d, |_, _| rng.uniform());
        Ok(Self {
            freqs,
            phases,
            a,
            c0: cfg.c0,
            c1: cfg.c1,
        })
    }

    pub fn dim(&self) -> usize {
        self.freqs.rows()
    }

    /// Noise-free treatment for the given latents.
    pub fn embed(&self, lat: &Latents) -> Vec<f64> {
        let c = lat.coords();
        let brightness = (lat.scale / 0.75).powi(2);
        (0..self.dim())
            .map(|j| {
                let w = self.freqs.row(j);
                let arg: f64 = w.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() + self.phases[j];
                brightness * 0.5 * (1.0 + arg.cos())
            })
            .collect()
    }

    fn treatment(&self, lat: &Latents, eta_sd: f64, rng: &mut RngStream) -> Vec<f64> {
        let mut x = self.embed(lat);
        for v in &mut x {
            *v += eta_sd * rng.gaussian();
        }
        x
    }

    fn quadratic(&self, x: &[f64]) -> f64 {
        self.a
            .mul_vec(x)
            .expect("dimension checked")
            .iter()
            .map(|v| v * v)
            .sum()
    }

    /// Structural function `(‖Ax‖² − c0) / c1`.
    pub fn fstruct(&self, x: &[f64]) -> f64 {
        (self.quadratic(x) - self.c0) / self.c1
    }
}

#[derive(Debug, Clone)]
pub struct HighDimData {
    pub dataset: IvDataset,
    pub latents: Vec<Latents>,
    /// Treatments of all samples in draw order (stage 1 first).
    pub x_all: Mat,
    pub y_all: Vec<f64>,
    pub fstruct_all: Vec<f64>,
}

/// Draws `n_total` samples and splits them evenly between the stages.
/// `pos_y` overrides the hidden latent for every sample when set.
pub fn highdim_generate_with(
    cfg: &HighDimConfig,
    n_total: usize,
    seed: u64,
    pos_y: Option<f64>,
) -> Result<HighDimData> {
    if n_total < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let emb = HighDimEmbedding::new(cfg)?;
    let mut rng = RngStream::new(seed, SAMPLE_STREAM);
    let d = cfg.treatment_dim;
    let mut x_all = Mat::zeros(n_total, d);
    let mut z_all = Mat::zeros(n_total, 3);
    let (mut y_all, mut f_all, mut latents) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_total {
        let mut lat = Latents::sample(&mut rng);
        if let Some(py) = pos_y {
            lat.pos_y = py;
        }
        let x = emb.treatment(&lat, cfg.eta_sd, &mut rng);
        let f = emb.fstruct(&x);
        let y = f + 32.0 * (lat.pos_y - 0.5) + cfg.eps_sd * rng.gaussian();
        x_all.row_mut(i).copy_from_slice(&x);
        z_all
            .row_mut(i)
            .copy_from_slice(&[lat.scale, lat.rotation, lat.pos_x]);
        y_all.push(y);
        f_all.push(f);
        latents.push(lat);
    }
    let m = n_total / 2;
    let first: Vec<usize> = (0..m).collect();
    let second: Vec<usize> = (m..n_total).collect();
    let dataset = IvDataset::new(
        x_all.select_rows(&first),
        z_all.select_rows(&first),
        y_all[m..].to_vec(),
        z_all.select_rows(&second),
    )?;
    Ok(HighDimData {
        dataset,
        latents,
        x_all,
        y_all,
        fstruct_all: f_all,
    })
}

pub fn highdim_generate(cfg: &HighDimConfig, n_total: usize, seed: u64) -> Result<HighDimData> {
    highdim_generate_with(cfg, n_total, seed, None)
}

/// Noise-free treatments on a latent grid (7 posX × 7 posY × 3 scale × 4
/// rotation = 588 points) with their structural values.
pub fn highdim_test_grid(cfg: &HighDimConfig) -> Result<(Mat, Vec<f64>)> {
    let emb = HighDimEmbedding::new(cfg)?;
    let lin = |lo: f64, hi: f64, k: usize| {
        (0..k).map(move |i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
    };
    let mut rows = Vec::with_capacity(588);
    let mut truth = Vec::with_capacity(588);
    for pos_x in lin(0.0, 1.0, 7) {
        for pos_y in lin(0.0, 1.0, 7) {
            for scale in lin(0.5, 1.0, 3) {
                // four orientations spread over the full turn
                for rotation in (0..4).map(|k| TAU * k as f64 / 4.0) {
                    let x = emb.embed(&Latents {
                        scale,
                        rotation,
                        pos_x,
                        pos_y,
                    });
                    truth.push(emb.fstruct(&x));
                    rows.push(x);
                }
            }
        }
    }
    Ok((Mat::from_rows(&rows), truth))
}
