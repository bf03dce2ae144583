//! Non-rigid ICP with a motion-history term.
//!
//! Every template vertex `v_i` carries its own 3x4 affine transform `X_i`;
//! the stacked unknown is the `4n x 3` matrix `X = [X_1 ... X_n]ᵀ`. For fixed
//! correspondences the cost is a sparse linear least-squares problem
//! `|AX - B|_F^2` with the row blocks
//!
//! ```text
//!     [ W D      ]       [ W U      ]
//! A = [ α M ⊗ G  ]   B = [ 0        ]
//!     [ β D_L    ]       [ β U_L    ]
//!     [ γ D      ]       [ γ U_m    ]
//! ```
//!
//! where `D` places `[v_iᵀ 1]` in row `i`, `M` is the node-arc incidence
//! matrix of the template edges and `G = diag(1, 1, 1, λ)`. The fit walks a
//! ladder of decreasing `(α, β, γ)` and, at each rung, alternates closest
//! point search with exact solves until `X` stops moving.
//!
//! Since the coefficients scale rows of `A`, they enter the energy squared:
//! `E = E_d + α² E_s + β² E_l + γ² E_m`, and `E_d` weighs each residual by
//! `w_i²` (identical to `w_i` for the binary weights the gating produces).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix4x3, Vector4};
use serde::{Deserialize, Serialize};

use crate::container::{ByteReader, ByteWriter};
use crate::correspondence::{
    find_correspondences, CorrespondenceSet, Gating, TargetSurface, DEFAULT_MAX_DISTANCE_FRACTION,
    DEFAULT_MAX_NORMAL_ANGLE,
};
use crate::error::{Error, Result};
use crate::mesh::{build_edge_list, LandmarkSet, Mesh, Vec3};
use crate::sparse::{solve_least_squares, CholeskySymbolic, CsrMatrix};

/// Per-vertex affine transforms stored as the stacked `4n x 3` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    x: DMatrix<f64>,
}

impl DeformationField {
    /// Every block `[I | 0]`.
    pub fn identity(n: usize) -> Self {
        let mut x = DMatrix::zeros(4 * n, 3);
        for i in 0..n {
            for k in 0..3 {
                x[(4 * i + k, k)] = 1.0;
            }
        }
        Self { x }
    }

    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() % 4 != 0 || x.ncols() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "deformation field must be 4n x 3, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(Self { x })
    }

    /// Sets vertex `i`'s transform from a 3x4 matrix `[R | t]`.
    pub fn set_affine(&mut self, i: usize, affine: &nalgebra::Matrix3x4<f64>) {
        self.x
            .view_mut((4 * i, 0), (4, 3))
            .copy_from(&affine.transpose());
    }

    pub fn vertex_count(&self) -> usize {
        self.x.nrows() / 4
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Block `i` as stored: `X_iᵀ`, 4x3.
    pub fn block(&self, i: usize) -> Matrix4x3<f64> {
        self.x.fixed_view::<4, 3>(4 * i, 0).into_owned()
    }

    /// `X_i [v; 1]`.
    pub fn transform(&self, i: usize, v: &Vec3) -> Vec3 {
        let h = Vector4::new(v.x, v.y, v.z, 1.0);
        self.block(i).transpose() * h
    }

    pub fn apply(&self, template: &Mesh) -> Result<Mesh> {
        if template.vertex_count() != self.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "field has {} blocks, template has {} vertices",
                self.vertex_count(),
                template.vertex_count()
            )));
        }
        template.with_vertices(
            template
                .vertices()
                .iter()
                .enumerate()
                .map(|(i, v)| self.transform(i, v))
                .collect(),
        )
    }

    /// Frobenius norm of the difference.
    pub fn distance(&self, other: &DeformationField) -> f64 {
        (&self.x - &other.x).norm()
    }

    /// `n` as u64 LE, then the `4n x 3` values row-major as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.usize(self.vertex_count());
        for r in 0..self.x.nrows() {
            for c in 0..3 {
                w.f64(self.x[(r, c)]);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let n = r.usize()?;
        let vals = r.f64s(n.checked_mul(12).ok_or_else(|| Error::Parse("size overflow".into()))?)?;
        r.finish()?;
        Ok(Self {
            x: DMatrix::from_row_slice(4 * n, 3, &vals),
        })
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

/// Coefficients of one ladder rung.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub stiffness: f64,
    pub landmark: f64,
    pub motion: f64,
    /// λ in `G = diag(1, 1, 1, λ)`.
    pub skew: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NicpConfig {
    pub stiffness: Vec<f64>,
    pub landmark: Vec<f64>,
    pub motion: Vec<f64>,
    pub skew_weight: f64,
    pub epsilon: f64,
    pub max_inner_iters: usize,
    pub max_normal_angle: f64,
    pub max_distance_fraction: f64,
}

fn ladder(start: f64, step: f64, len: usize) -> Vec<f64> {
    (0..len).map(|k| start - step * k as f64).collect()
}

impl Default for NicpConfig {
    fn default() -> Self {
        Self {
            stiffness: ladder(100.0, 10.0, 10),
            landmark: ladder(100.0, 10.0, 10),
            motion: ladder(5.0, 0.5, 10),
            skew_weight: 1.0,
            epsilon: 1e-4,
            max_inner_iters: 20,
            max_normal_angle: DEFAULT_MAX_NORMAL_ANGLE,
            max_distance_fraction: DEFAULT_MAX_DISTANCE_FRACTION,
        }
    }
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] > w[1])
}

impl NicpConfig {
    /// Checks the ladder rules: equal lengths, strictly decreasing
    /// stiffness and landmark weights (all positive), motion weights
    /// strictly decreasing and non-negative or all zero (the ablation).
    pub fn validate(&self) -> Result<()> {
        let n = self.stiffness.len();
        if n == 0 {
            return Err(Error::InvalidParameter("empty coefficient ladder".into()));
        }
        if self.landmark.len() != n || self.motion.len() != n {
            return Err(Error::InvalidParameter(format!(
                "ladder lengths differ: stiffness {}, landmark {}, motion {}",
                n,
                self.landmark.len(),
                self.motion.len()
            )));
        }
        if !self.stiffness.iter().all(|&a| a > 0.0) || !strictly_decreasing(&self.stiffness) {
            return Err(Error::InvalidParameter(
                "stiffness weights must be positive and strictly decreasing".into(),
            ));
        }
        if !self.landmark.iter().all(|&b| b > 0.0) || !strictly_decreasing(&self.landmark) {
            return Err(Error::InvalidParameter(
                "landmark weights must be positive and strictly decreasing".into(),
            ));
        }
        let all_zero = self.motion.iter().all(|&g| g == 0.0);
        if !all_zero
            && (!self.motion.iter().all(|&g| g >= 0.0) || !strictly_decreasing(&self.motion))
        {
            return Err(Error::InvalidParameter(
                "motion weights must be non-negative and strictly decreasing (or all zero)".into(),
            ));
        }
        if !(self.skew_weight > 0.0) || !(self.epsilon > 0.0) || self.max_inner_iters == 0 {
            return Err(Error::InvalidParameter(
                "skew weight, epsilon and inner iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn rungs(&self) -> impl Iterator<Item = Weights> + '_ {
        self.stiffness
            .iter()
            .zip(&self.landmark)
            .zip(&self.motion)
            .map(|((&a, &b), &g)| Weights {
                stiffness: a,
                landmark: b,
                motion: g,
                skew: self.skew_weight,
            })
    }

    /// Copy with every motion weight multiplied by `factor`.
    pub fn with_motion_scale(&self, factor: f64) -> Self {
        Self {
            motion: self.motion.iter().map(|g| g * factor).collect(),
            ..self.clone()
        }
    }

    pub fn gating_for(&self, target: &Mesh) -> Gating {
        Gating::for_target(target, self.max_normal_angle, self.max_distance_fraction)
    }
}

/// Raw terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyTerms {
    pub data: f64,
    pub stiffness: f64,
    pub landmark: f64,
    pub motion: f64,
    pub total: f64,
}

fn check_dims(
    template: &Mesh,
    corr: &CorrespondenceSet,
    landmarks: &LandmarkSet,
    predictions: Option<&[Vec3]>,
) -> Result<()> {
    let n = template.vertex_count();
    if corr.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} correspondences for {} vertices",
            corr.len(),
            n
        )));
    }
    if let Some(p) = predictions {
        if p.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} vertices",
                p.len(),
                n
            )));
        }
    }
    landmarks.validate(n)
}

/// Term-by-term evaluation of the cost at `x`.
pub fn energy(
    x: &DeformationField,
    template: &Mesh,
    edges: &[(usize, usize)],
    corr: &CorrespondenceSet,
    landmarks: &LandmarkSet,
    predictions: Option<&[Vec3]>,
    w: Weights,
) -> Result<EnergyTerms> {
    check_dims(template, corr, landmarks, predictions)?;
    if x.vertex_count() != template.vertex_count() {
        return Err(Error::DimensionMismatch("field / template size".into()));
    }
    let verts = template.vertices();
    let moved: Vec<Vec3> = verts
        .iter()
        .enumerate()
        .map(|(i, v)| x.transform(i, v))
        .collect();
    let data = corr
        .entries
        .iter()
        .zip(&moved)
        .map(|(c, p)| c.weight * c.weight * (p - c.point).norm_squared())
        .sum::<f64>();
    let g = Vector4::new(1.0, 1.0, 1.0, w.skew);
    let stiffness = edges
        .iter()
        .map(|&(i, j)| {
            let diff = x.block(i) - x.block(j);
            // Rows of the stored block are columns of X_i, so G scales rows.
            (0..4)
                .map(|r| (g[r] * g[r]) * diff.row(r).norm_squared())
                .sum::<f64>()
        })
        .sum::<f64>();
    let landmark = landmarks
        .entries
        .iter()
        .map(|(i, l)| (moved[*i] - l).norm_squared())
        .sum::<f64>();
    let motion = match predictions {
        Some(p) if w.motion != 0.0 => moved
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>(),
        _ => 0.0,
    };
    let total = data
        + w.stiffness * w.stiffness * stiffness
        + w.landmark * w.landmark * landmark
        + w.motion * w.motion * motion;
    Ok(EnergyTerms {
        data,
        stiffness,
        landmark,
        motion,
        total,
    })
}

fn homogeneous(v: &Vec3) -> [f64; 4] {
    [v.x, v.y, v.z, 1.0]
}

/// The stacked sparse system for fixed correspondences. Motion rows are
/// present only when `w.motion != 0` and predictions are given.
pub fn assemble_system(
    template: &Mesh,
    edges: &[(usize, usize)],
    corr: &CorrespondenceSet,
    landmarks: &LandmarkSet,
    predictions: Option<&[Vec3]>,
    w: Weights,
) -> Result<(CsrMatrix, DMatrix<f64>)> {
    check_dims(template, corr, landmarks, predictions)?;
    let n = template.vertex_count();
    let verts = template.vertices();
    let motion = predictions.filter(|_| w.motion != 0.0);
    let rows = n + 4 * edges.len() + landmarks.len() + motion.map_or(0, |_| n);
    let mut t = Vec::with_capacity(8 * rows);
    let mut b = DMatrix::zeros(rows, 3);
    let mut row = 0;

    // W D, W U: gated rows stay in place with zero weight.
    for (i, (v, c)) in verts.iter().zip(&corr.entries).enumerate() {
        for (k, h) in homogeneous(v).into_iter().enumerate() {
            t.push((row, 4 * i + k, c.weight * h));
        }
        for k in 0..3 {
            b[(row, k)] = c.weight * c.point[k];
        }
        row += 1;
    }
    // α (M ⊗ G): one row per (edge, homogeneous component).
    let g = [1.0, 1.0, 1.0, w.skew];
    for &(i, j) in edges {
        for (k, gk) in g.iter().enumerate() {
            t.push((row, 4 * i + k, -w.stiffness * gk));
            t.push((row, 4 * j + k, w.stiffness * gk));
            row += 1;
        }
    }
    // β D_L, β U_L.
    for (i, l) in &landmarks.entries {
        for (k, h) in homogeneous(&verts[*i]).into_iter().enumerate() {
            t.push((row, 4 * i + k, w.landmark * h));
        }
        for k in 0..3 {
            b[(row, k)] = w.landmark * l[k];
        }
        row += 1;
    }
    // γ D, γ U_m.
    if let Some(p) = motion {
        for (i, (v, target)) in verts.iter().zip(p).enumerate() {
            for (k, h) in homogeneous(v).into_iter().enumerate() {
                t.push((row, 4 * i + k, w.motion * h));
            }
            for k in 0..3 {
                b[(row, k)] = w.motion * target[k];
            }
            row += 1;
        }
    }
    debug_assert_eq!(row, rows);
    Ok((CsrMatrix::from_triplets(rows, 4 * n, &t)?, b))
}

/// Baseline system without any motion term (plain optimal-step NICP),
/// assembled independently of [`assemble_system`].
pub fn assemble_nicp_system(
    template: &Mesh,
    edges: &[(usize, usize)],
    corr: &CorrespondenceSet,
    landmarks: &LandmarkSet,
    stiffness: f64,
    landmark_weight: f64,
    skew: f64,
) -> Result<(CsrMatrix, DMatrix<f64>)> {
    check_dims(template, corr, landmarks, None)?;
    let n = template.vertex_count();
    let (m, k) = (edges.len(), landmarks.len());
    let rows = n + 4 * m + k;
    let mut t = Vec::new();
    let mut b = DMatrix::zeros(rows, 3);
    for i in 0..n {
        let v = template.vertices()[i];
        let c = &corr.entries[i];
        t.push((i, 4 * i, c.weight * v.x));
        t.push((i, 4 * i + 1, c.weight * v.y));
        t.push((i, 4 * i + 2, c.weight * v.z));
        t.push((i, 4 * i + 3, c.weight));
        b.row_mut(i)
            .copy_from(&(c.point * c.weight).transpose());
    }
    for (r, &(i, j)) in edges.iter().enumerate() {
        for d in 0..4 {
            let gd = if d == 3 { skew } else { 1.0 };
            t.push((n + 4 * r + d, 4 * i + d, -stiffness * gd));
            t.push((n + 4 * r + d, 4 * j + d, stiffness * gd));
        }
    }
    for (r, (i, l)) in landmarks.entries.iter().enumerate() {
        let v = template.vertices()[*i];
        let row = n + 4 * m + r;
        t.push((row, 4 * i, landmark_weight * v.x));
        t.push((row, 4 * i + 1, landmark_weight * v.y));
        t.push((row, 4 * i + 2, landmark_weight * v.z));
        t.push((row, 4 * i + 3, landmark_weight));
        b.row_mut(row)
            .copy_from(&(l * landmark_weight).transpose());
    }
    Ok((CsrMatrix::from_triplets(rows, 4 * n, &t)?, b))
}

#[derive(Debug, Clone)]
pub struct StepSolution {
    pub field: DeformationField,
    /// Relative residual of the normal equations.
    pub normal_residual: f64,
}

/// Exact minimizer of `|AX - B|_F^2` via sparse Cholesky on `AᵀA`.
pub fn solve_step(
    a: &CsrMatrix,
    b: &DMatrix<f64>,
    cache: &mut Option<CholeskySymbolic>,
) -> Result<StepSolution> {
    if a.ncols() % 4 != 0 || b.ncols() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "system must be (rows x 4n, rows x 3), got {}x{} / {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let sol = solve_least_squares(a, b, 4, cache)?;
    Ok(StepSolution {
        field: DeformationField::from_matrix(sol.x)?,
        normal_residual: sol.normal_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRecord {
    pub ladder_step: usize,
    pub inner_iter: usize,
    pub terms: EnergyTerms,
    /// `|X_j - X_{j-1}|_F` for this iteration.
    pub change: f64,
}

#[derive(Debug, Clone)]
pub struct NicpFit {
    pub deformed: Mesh,
    pub field: DeformationField,
    pub report: Vec<EnergyRecord>,
    /// Ladder steps that hit the inner iteration cap before converging.
    pub capped_steps: Vec<usize>,
}

impl NicpFit {
    pub fn converged(&self) -> bool {
        self.capped_steps.is_empty()
    }
}

pub const REPORT_HEADER: &str = "ladder_step,inner_iter,E_d,E_s,E_l,E_m,E_total";

/// Energy report as CSV with [`REPORT_HEADER`].
pub fn report_csv(report: &[EnergyRecord]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in report {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            r.ladder_step,
            r.inner_iter,
            r.terms.data,
            r.terms.stiffness,
            r.terms.landmark,
            r.terms.motion,
            r.terms.total
        );
    }
    out
}

/// Fits `template` to `target` over the coefficient ladder of `config`.
/// `predictions` are per-vertex motion targets in target coordinates.
pub fn fit(
    template: &Mesh,
    target: &TargetSurface,
    landmarks: &LandmarkSet,
    predictions: Option<&[Vec3]>,
    config: &NicpConfig,
) -> Result<NicpFit> {
    config.validate()?;
    landmarks.validate(template.vertex_count())?;
    let edges = build_edge_list(template);
    let gating = config.gating_for(&target.mesh);
    let mut field = DeformationField::identity(template.vertex_count());
    let mut report = Vec::new();
    let mut capped_steps = Vec::new();
    let mut cache = None;
    for (step, w) in config.rungs().enumerate() {
        let mut converged = false;
        for inner in 0..config.max_inner_iters {
            let deformed = field.apply(template)?;
            let corr = find_correspondences(&deformed, &deformed.normals(), target, gating)?;
            let (a, b) = assemble_system(template, &edges, &corr, landmarks, predictions, w)?;
            let next = solve_step(&a, &b, &mut cache)?.field;
            let change = next.distance(&field);
            let terms = energy(&next, template, &edges, &corr, landmarks, predictions, w)?;
            report.push(EnergyRecord {
                ladder_step: step,
                inner_iter: inner,
                terms,
                change,
            });
            field = next;
            if change <= config.epsilon {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("ladder step {step} hit the inner iteration cap");
            capped_steps.push(step);
        }
    }
    Ok(NicpFit {
        deformed: field.apply(template)?,
        field,
        report,
        capped_steps,
    })
}
