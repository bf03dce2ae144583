//! Per-vertex linear Kalman filters that predict where each vertex will be
//! in the next frame.
//!
//! Every vertex runs an independent filter with decoupled axes. Because all
//! filters share the noise model, the initial covariance and the
//! observation schedule, their covariances are identical: the bank keeps a
//! single `d x d` per-axis covariance (`d` = 2 for constant velocity, 3 for
//! constant acceleration). The full per-vertex covariance is the
//! block-diagonal `I₃ ⊗ P`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::container::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::mesh::Vec3;

const MAGIC: &[u8; 4] = b"KBNK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StateModel {
    #[default]
    ConstantVelocity,
    ConstantAcceleration,
}

impl StateModel {
    pub fn dim(self) -> usize {
        match self {
            Self::ConstantVelocity => 2,
            Self::ConstantAcceleration => 3,
        }
    }

    fn code(self) -> u32 {
        match self {
            Self::ConstantVelocity => 0,
            Self::ConstantAcceleration => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Self::ConstantVelocity),
            1 => Ok(Self::ConstantAcceleration),
            _ => Err(Error::Parse(format!("unknown state model code {c}"))),
        }
    }

    /// Unit-step transition matrix.
    fn transition(self) -> DMatrix<f64> {
        match self {
            Self::ConstantVelocity => DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            Self::ConstantAcceleration => DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            ),
        }
    }

    /// Continuous white-noise discretisation over one frame, scaled by `q`.
    fn process_noise(self, q: f64) -> DMatrix<f64> {
        let m = match self {
            Self::ConstantVelocity => {
                DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0])
            }
            Self::ConstantAcceleration => DMatrix::from_row_slice(
                3,
                3,
                &[
                    1.0 / 20.0,
                    1.0 / 8.0,
                    1.0 / 6.0,
                    1.0 / 8.0,
                    1.0 / 3.0,
                    0.5,
                    1.0 / 6.0,
                    0.5,
                    1.0,
                ],
            ),
        };
        m * q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    pub model: StateModel,
    pub process_noise: f64,
    pub measurement_noise: f64,
    /// Prior variance of velocity (and acceleration) at the first
    /// observation. The default is effectively diffuse, so the second
    /// observation fixes the velocity almost exactly.
    pub initial_velocity_variance: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            model: StateModel::ConstantVelocity,
            process_noise: 1e-4,
            measurement_noise: 1e-3,
            initial_velocity_variance: 1e4,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.process_noise) || !ok(self.measurement_noise) || !ok(self.initial_velocity_variance)
        {
            return Err(Error::InvalidParameter(format!(
                "noise parameters must be positive and finite (q={}, r={}, v0={})",
                self.process_noise, self.measurement_noise, self.initial_velocity_variance
            )));
        }
        Ok(())
    }
}

/// A bank of `n` synchronised per-vertex filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    config: KalmanConfig,
    /// `n` rows of `3 * d` values: axis-major `[x-state, y-state, z-state]`.
    states: Vec<f64>,
    covariance: DMatrix<f64>,
    observed: u64,
    n: usize,
}

impl FilterBank {
    pub fn new(n: usize, config: KalmanConfig) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::InvalidParameter("filter bank needs at least one vertex".into()));
        }
        let d = config.model.dim();
        Ok(Self {
            config,
            states: vec![0.0; n * 3 * d],
            covariance: DMatrix::zeros(d, d),
            observed: 0,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn config(&self) -> &KalmanConfig {
        &self.config
    }

    pub fn frames_observed(&self) -> u64 {
        self.observed
    }

    /// Per-axis covariance shared by every filter.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    fn dim(&self) -> usize {
        self.config.model.dim()
    }

    fn axis_state(&self, i: usize, axis: usize) -> &[f64] {
        let d = self.dim();
        &self.states[(3 * i + axis) * d..(3 * i + axis + 1) * d]
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from_fn(|a, _| self.axis_state(i, a)[0])
    }

    pub fn velocity(&self, i: usize) -> Vec3 {
        Vec3::from_fn(|a, _| self.axis_state(i, a)[1])
    }

    /// One predict-update cycle for every vertex. The first observation
    /// initialises position to the measurement with zero velocity.
    pub fn observe(&mut self, positions: &[Vec3]) -> Result<()> {
        if positions.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "{} observations for {} filters",
                positions.len(),
                self.n
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidParameter("non-finite observation".into()));
        }
        let d = self.dim();
        let r = self.config.measurement_noise;
        if self.observed == 0 {
            for (i, p) in positions.iter().enumerate() {
                for a in 0..3 {
                    let s = &mut self.states[(3 * i + a) * d..(3 * i + a + 1) * d];
                    s.fill(0.0);
                    s[0] = p[a];
                }
            }
            self.covariance = DMatrix::from_diagonal_element(d, d, self.config.initial_velocity_variance);
            self.covariance[(0, 0)] = r;
            self.observed = 1;
            return Ok(());
        }
        let f = self.config.model.transition();
        let prior = &f * &self.covariance * f.transpose() + self.config.model.process_noise(self.config.process_noise);
        // H = [1 0 ...]: innovation variance and gain from the first column.
        let s = prior[(0, 0)] + r;
        let gain: DVector<f64> = prior.column(0) / s;
        let mut i_kh = DMatrix::identity(d, d);
        for k in 0..d {
            i_kh[(k, 0)] -= gain[k];
        }
        // Joseph form keeps the update PSD under rounding.
        let post = &i_kh * &prior * i_kh.transpose() + &gain * gain.transpose() * r;
        self.covariance = symmetrize_psd(post);

        for (i, p) in positions.iter().enumerate() {
            for a in 0..3 {
                let s = &mut self.states[(3 * i + a) * d..(3 * i + a + 1) * d];
                let x = &f * DVector::from_column_slice(s);
                let innovation = p[a] - x[0];
                for k in 0..d {
                    s[k] = x[k] + gain[k] * innovation;
                }
            }
        }
        self.observed += 1;
        Ok(())
    }

    /// One-step-ahead positions. Does not touch the filter state.
    pub fn predict(&self) -> Result<Vec<Vec3>> {
        if self.observed == 0 {
            return Err(Error::NoHistory);
        }
        let f = self.config.model.transition();
        Ok((0..self.n)
            .map(|i| {
                Vec3::from_fn(|a, _| {
                    let s = self.axis_state(i, a);
                    (0..s.len()).map(|k| f[(0, k)] * s[k]).sum()
                })
            })
            .collect())
    }

    /// Little-endian container: magic `KBNK`, u32 version, u32 model code,
    /// u64 vertex count, f64 q, r, initial velocity variance, u64 frames
    /// observed, `d x d` covariance row-major, then `n x 3 x d` states.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.config.model.code());
        w.usize(self.n);
        w.f64(self.config.process_noise);
        w.f64(self.config.measurement_noise);
        w.f64(self.config.initial_velocity_variance);
        w.u64(self.observed);
        for r in 0..d {
            for c in 0..d {
                w.f64(self.covariance[(r, c)]);
            }
        }
        w.f64s(self.states.iter().copied());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported filter bank version {version}")));
        }
        let model = StateModel::from_code(r.u32()?)?;
        let n = r.usize()?;
        let config = KalmanConfig {
            model,
            process_noise: r.f64()?,
            measurement_noise: r.f64()?,
            initial_velocity_variance: r.f64()?,
        };
        let observed = r.u64()?;
        let d = model.dim();
        let cov = r.f64s(d * d)?;
        let count = n
            .checked_mul(3 * d)
            .ok_or_else(|| Error::Parse("filter bank size overflow".into()))?;
        let states = r.f64s(count)?;
        r.finish()?;
        let mut bank = Self::new(n, config)?;
        bank.covariance = DMatrix::from_row_slice(d, d, &cov);
        bank.states = states;
        bank.observed = observed;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `(P + Pᵀ)/2` with negative eigenvalues clamped to zero.
fn symmetrize_psd(p: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    (&out + out.transpose()) * 0.5
}
