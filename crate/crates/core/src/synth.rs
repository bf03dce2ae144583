//! Synthetic deforming sequences with exact ground truth.
//!
//! Frame `k` is the base mesh, bent by a low-frequency sinusoid and pushed
//! out by a slowly ramping local bulge, then moved by an accumulated
//! similarity drift and finally perturbed with i.i.d. Gaussian noise. The
//! noise-free positions are the ground truth, and landmark positions are
//! taken from the ground truth.

use std::f64::consts::PI;
use std::path::PathBuf;

use nalgebra::{Rotation3, Unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::load_mesh;
use crate::mesh::{grid_mesh, LandmarkSet, Mesh, Vec3};
use crate::similarity::SimilarityTransform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseShape {
    /// Spherical cap of unit radius over a `rows x cols` grid spanning the
    /// unit square.
    SphereCap { rows: usize, cols: usize },
    /// Flat grid over the unit square.
    Grid { rows: usize, cols: usize },
    /// Any OBJ/PLY mesh.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub base: BaseShape,
    pub frames: usize,
    /// Peak bending displacement.
    pub bend_amplitude: f64,
    /// Spatial wave number of the bend across the base extent.
    pub bend_frequency: f64,
    /// Temporal period of the bend, in frames.
    pub bend_period: f64,
    /// Peak bulge displacement along the base normal, reached at the last
    /// frame.
    pub bulge_amplitude: f64,
    /// Bulge radius as a fraction of the base extent.
    pub bulge_radius: f64,
    /// Per-frame drift: rotation angle (radians) about `drift_axis`,
    /// relative scale change and translation. Accumulated over frames.
    pub drift_angle: f64,
    pub drift_axis: [f64; 3],
    pub drift_scale: f64,
    pub drift_translation: [f64; 3],
    pub noise_sigma: f64,
    pub landmark_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base: BaseShape::SphereCap { rows: 45, cols: 45 },
            frames: 20,
            bend_amplitude: 0.03,
            bend_frequency: 1.0,
            bend_period: 16.0,
            bulge_amplitude: 0.05,
            bulge_radius: 0.15,
            drift_angle: 0.01,
            drift_axis: [0.2, 1.0, 0.1],
            drift_scale: 0.002,
            drift_translation: [0.003, -0.002, 0.001],
            noise_sigma: 1e-3,
            landmark_count: 51,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.bend_amplitude,
            self.bend_frequency,
            self.bend_period,
            self.bulge_amplitude,
            self.bulge_radius,
            self.drift_angle,
            self.drift_scale,
            self.noise_sigma,
        ]
        .iter()
        .chain(&self.drift_axis)
        .chain(&self.drift_translation)
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("synth parameters must be finite".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidParameter("at least one frame required".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise sigma must be non-negative".into()));
        }
        if self.bend_period <= 0.0 || self.bulge_radius <= 0.0 || self.drift_scale <= -1.0 {
            return Err(Error::InvalidParameter(
                "bend period and bulge radius must be positive, drift scale > -1".into(),
            ));
        }
        if self.drift_angle != 0.0 && Vec3::from(self.drift_axis).norm() == 0.0 {
            return Err(Error::InvalidParameter("drift axis must be non-zero".into()));
        }
        Ok(())
    }

    /// Upper bound on any vertex's frame-to-frame deformation (before drift
    /// and noise): the bend and bulge are sinusoids in time, so each moves
    /// at most amplitude times temporal angular rate per frame.
    pub fn deformation_step_bound(&self) -> f64 {
        let bend = self.bend_amplitude.abs() * 2.0 * PI / self.bend_period;
        let bulge = if self.frames > 1 {
            self.bulge_amplitude.abs() * PI / (2.0 * (self.frames - 1) as f64)
        } else {
            0.0
        };
        bend + bulge
    }

    /// Accumulated similarity for frame `k`: rotation by `k θ` about the
    /// drift axis through the base centroid, scale `(1 + ds)^k`, shift `k t`.
    pub fn drift(&self, k: usize, centroid: &Vec3) -> SimilarityTransform {
        let rotation = if self.drift_angle == 0.0 {
            nalgebra::Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(
                &Unit::new_normalize(Vec3::from(self.drift_axis)),
                self.drift_angle * k as f64,
            )
            .matrix()
        };
        let scale = (1.0 + self.drift_scale).powi(k as i32);
        let translation = centroid - scale * (rotation * centroid) + Vec3::from(self.drift_translation) * k as f64;
        SimilarityTransform {
            rotation,
            translation,
            scale,
        }
    }
}

pub fn build_base(shape: &BaseShape) -> Result<Mesh> {
    match shape {
        BaseShape::SphereCap { rows, cols } | BaseShape::Grid { rows, cols } => {
            if *rows < 2 || *cols < 2 {
                return Err(Error::InvalidParameter("base grid needs at least 2x2 vertices".into()));
            }
            let grid = grid_mesh(*rows, *cols, 1.0);
            let (sx, sy) = (1.0 / (*cols - 1) as f64, 1.0 / (*rows - 1) as f64);
            let cap = matches!(shape, BaseShape::SphereCap { .. });
            grid.with_vertices(
                grid.vertices()
                    .iter()
                    .map(|v| {
                        let (x, y) = (v.x * sx, v.y * sy);
                        let z = if cap {
                            (1.0 - (x - 0.5).powi(2) - (y - 0.5).powi(2)).sqrt() - 0.5f64.sqrt()
                        } else {
                            0.0
                        };
                        Vec3::new(x, y, z)
                    })
                    .collect(),
            )
        }
        BaseShape::File { path } => load_mesh(path),
    }
}

/// `count` well-spread vertex indices by farthest-point sampling, starting
/// from the vertex nearest the centroid. Ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], count: usize) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot pick {count} landmarks from {} vertices",
            points.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let argmin = |f: &dyn Fn(usize) -> f64| {
        (0..points.len()).fold(0, |best, i| if f(i) < f(best) { i } else { best })
    };
    let first = argmin(&|i| (points[i] - centroid).norm_squared());
    let mut picked = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while picked.len() < count {
        let next = argmin(&|i| -dist[i]);
        picked.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub base: Mesh,
    /// Noisy observations.
    pub frames: Vec<Mesh>,
    /// Noise-free positions per frame, same vertex order as `base`.
    pub truth: Vec<Vec<Vec3>>,
    pub landmarks: Vec<LandmarkSet>,
    pub landmark_indices: Vec<usize>,
    /// Drift applied at each frame.
    pub transforms: Vec<SimilarityTransform>,
}

/// Noise added to frame `k`, regenerated from the seed. Each frame draws
/// from its own ChaCha stream, so frames are independent of evaluation
/// order.
pub fn frame_noise(cfg: &SynthConfig, k: usize, n: usize) -> Result<Vec<Vec3>> {
    if cfg.noise_sigma == 0.0 {
        return Ok(vec![Vec3::zeros(); n]);
    }
    let normal = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64 + 1);
    Ok((0..n)
        .map(|_| Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect())
}

/// Deformed (pre-drift, noise-free) base for frame `k`.
pub fn deform(cfg: &SynthConfig, base: &Mesh, normals: &[Vec3], k: usize) -> Vec<Vec3> {
    let (lo, hi) = base.bounding_box().unwrap_or((Vec3::zeros(), Vec3::zeros()));
    let extent = (hi - lo).max().max(f64::MIN_POSITIVE);
    let centre = (lo + hi) / 2.0;
    let tau = if cfg.frames > 1 {
        k as f64 / (cfg.frames - 1) as f64
    } else {
        0.0
    };
    let bend_t = (2.0 * PI * k as f64 / cfg.bend_period).sin();
    let bulge_t = (PI * tau / 2.0).sin();
    let bulge_centre = centre + Vec3::new(0.0, -0.25 * extent, 0.0);
    let radius = cfg.bulge_radius * extent;
    base.vertices()
        .iter()
        .zip(normals)
        .map(|(v, n)| {
            let u = (v.x - lo.x) / extent;
            let bend = cfg.bend_amplitude * bend_t * (PI * cfg.bend_frequency * u).sin();
            let r2 = (v - bulge_centre).norm_squared();
            let bulge = cfg.bulge_amplitude * bulge_t * (-r2 / (2.0 * radius * radius)).exp();
            v + Vec3::new(0.0, 0.0, bend) + n * bulge
        })
        .collect()
}

pub fn generate_sequence(cfg: &SynthConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let base = build_base(&cfg.base)?;
    let n = base.vertex_count();
    let landmark_indices = farthest_point_sample(base.vertices(), cfg.landmark_count)?;
    let normals = base.normals().normals;
    let centroid = base.vertices().iter().sum::<Vec3>() / n as f64;
    let per_frame: Vec<(Mesh, Vec<Vec3>, SimilarityTransform)> = (0..cfg.frames)
        .into_par_iter()
        .map(|k| {
            let drift = cfg.drift(k, &centroid);
            let truth: Vec<Vec3> = deform(cfg, &base, &normals, k).iter().map(|p| drift.apply(p)).collect();
            let noise = frame_noise(cfg, k, n)?;
            let noisy = truth.iter().zip(&noise).map(|(t, e)| t + e).collect();
            Ok((base.with_vertices(noisy)?, truth, drift))
        })
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut truth = Vec::with_capacity(cfg.frames);
    let mut transforms = Vec::with_capacity(cfg.frames);
    let mut landmarks = Vec::with_capacity(cfg.frames);
    for (mesh, t, d) in per_frame {
        landmarks.push(LandmarkSet::new(landmark_indices.iter().map(|&i| (i, t[i])).collect()));
        frames.push(mesh);
        truth.push(t);
        transforms.push(d);
    }
    Ok(SyntheticSequence {
        base,
        frames,
        truth,
        landmarks,
        landmark_indices,
        transforms,
    })
}
