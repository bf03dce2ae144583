//! Linear shape model with separate identity and expression bases, a
//! weak-perspective camera, and landmark-driven fitting.
//!
//! Shapes are stacked `3n` vectors `S = S̄ + A_id α_id + A_exp α_exp`. The
//! camera maps a vertex `v` to `f P R (v + t)` where `P` keeps the first two
//! rows. Depth translation is invisible to that camera, so fitted
//! translations are returned in canonical form with `(R t)_z = 0`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::similarity::estimate_similarity;

pub type Vec2 = Vector2<f64>;

const MAGIC: &[u8; 4] = b"MMDL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean: DVector<f64>,
    triangles: Vec<[usize; 3]>,
    basis_id: DMatrix<f64>,
    basis_exp: DMatrix<f64>,
    std_id: DVector<f64>,
    std_exp: DVector<f64>,
}

impl MorphableModel {
    pub fn new(
        mean: &Mesh,
        basis_id: DMatrix<f64>,
        basis_exp: DMatrix<f64>,
        std_id: DVector<f64>,
        std_exp: DVector<f64>,
    ) -> Result<Self> {
        let rows = 3 * mean.vertex_count();
        if basis_id.nrows() != rows || basis_exp.nrows() != rows {
            return Err(Error::DimensionMismatch(format!(
                "bases have {}/{} rows, mean shape needs {rows}",
                basis_id.nrows(),
                basis_exp.nrows()
            )));
        }
        if std_id.len() != basis_id.ncols() || std_exp.len() != basis_exp.ncols() {
            return Err(Error::DimensionMismatch(
                "one standard deviation per basis column required".into(),
            ));
        }
        if std_id.iter().chain(std_exp.iter()).any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("standard deviations must be positive".into()));
        }
        let flat: Vec<f64> = mean.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        Ok(Self {
            mean: DVector::from_vec(flat),
            triangles: mean.triangles().to_vec(),
            basis_id,
            basis_exp,
            std_id,
            std_exp,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn k_id(&self) -> usize {
        self.basis_id.ncols()
    }

    pub fn k_exp(&self) -> usize {
        self.basis_exp.ncols()
    }

    pub fn basis_id(&self) -> &DMatrix<f64> {
        &self.basis_id
    }

    pub fn basis_exp(&self) -> &DMatrix<f64> {
        &self.basis_exp
    }

    pub fn std_id(&self) -> &DVector<f64> {
        &self.std_id
    }

    pub fn std_exp(&self) -> &DVector<f64> {
        &self.std_exp
    }

    pub fn mean_vector(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_mesh(&self) -> Mesh {
        self.to_mesh(&self.mean).expect("model topology validated at construction")
    }

    fn to_mesh(&self, flat: &DVector<f64>) -> Result<Mesh> {
        Mesh::new(
            flat.as_slice()
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
            self.triangles.clone(),
        )
    }

    fn check_coefficients(&self, id: &DVector<f64>, exp: &DVector<f64>) -> Result<()> {
        if id.len() != self.k_id() || exp.len() != self.k_exp() {
            return Err(Error::DimensionMismatch(format!(
                "coefficients ({}, {}) vs basis widths ({}, {})",
                id.len(),
                exp.len(),
                self.k_id(),
                self.k_exp()
            )));
        }
        Ok(())
    }

    /// Stacked shape vector for the given coefficients.
    pub fn shape_vector(&self, id: &DVector<f64>, exp: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_coefficients(id, exp)?;
        Ok(&self.mean + &self.basis_id * id + &self.basis_exp * exp)
    }

    pub fn synthesize(&self, id: &DVector<f64>, exp: &DVector<f64>) -> Result<Mesh> {
        self.to_mesh(&self.shape_vector(id, exp)?)
    }

    /// Least-squares coefficients of `mesh - mean`. Exact inverse of
    /// [`Self::synthesize`] for orthonormal bases.
    pub fn project_coefficients(&self, mesh: &Mesh) -> Result<(DVector<f64>, DVector<f64>)> {
        if mesh.vertex_count() != self.vertex_count() {
            return Err(Error::DimensionMismatch("mesh / model vertex count".into()));
        }
        let flat = DVector::from_iterator(
            self.mean.len(),
            mesh.vertices().iter().flat_map(|v| [v.x, v.y, v.z]),
        );
        let d = flat - &self.mean;
        Ok((self.basis_id.tr_mul(&d), self.basis_exp.tr_mul(&d)))
    }

    /// Container: magic `MMDL`, u32 version, u64 n, u64 triangle count,
    /// u64 k_id, u64 k_exp, mean (3n f64), triangles (u64 triples), A_id and
    /// A_exp row-major, then the two standard-deviation vectors. All
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.usize(self.vertex_count());
        w.usize(self.triangles.len());
        w.usize(self.k_id());
        w.usize(self.k_exp());
        w.f64s(self.mean.iter().copied());
        for t in &self.triangles {
            t.iter().for_each(|&i| w.usize(i));
        }
        for m in [&self.basis_id, &self.basis_exp] {
            for r in 0..m.nrows() {
                w.f64s(m.row(r).iter().copied());
            }
        }
        w.f64s(self.std_id.iter().copied());
        w.f64s(self.std_exp.iter().copied());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported model version {version}")));
        }
        let (n, nt, kid, kexp) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let too_big = || Error::Parse("model size overflow".into());
        let rows = n.checked_mul(3).ok_or_else(too_big)?;
        let mean = r.f64s(rows)?;
        let mut triangles = Vec::with_capacity(nt.min(r.remaining() / 24));
        for _ in 0..nt {
            triangles.push([r.usize()?, r.usize()?, r.usize()?]);
        }
        let a_id = r.f64s(rows.checked_mul(kid).ok_or_else(too_big)?)?;
        let a_exp = r.f64s(rows.checked_mul(kexp).ok_or_else(too_big)?)?;
        let s_id = r.f64s(kid)?;
        let s_exp = r.f64s(kexp)?;
        r.finish()?;
        let mesh = Mesh::new(
            mean.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            triangles,
        )?;
        Self::new(
            &mesh,
            DMatrix::from_row_slice(rows, kid, &a_id),
            DMatrix::from_row_slice(rows, kexp, &a_exp),
            DVector::from_vec(s_id),
            DVector::from_vec(s_exp),
        )
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

/// Shape coefficients and weak-perspective pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub alpha_id: DVector<f64>,
    pub alpha_exp: DVector<f64>,
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl FitParams {
    pub fn identity(model: &MorphableModel) -> Self {
        Self {
            alpha_id: DVector::zeros(model.k_id()),
            alpha_exp: DVector::zeros(model.k_exp()),
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidParameter(format!("scale {} must be positive", self.scale)));
        }
        let r = &self.rotation;
        if (r.transpose() * r - Matrix3::identity()).norm() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("rotation is not proper orthonormal".into()));
        }
        Ok(())
    }

    /// Same projection, translation with no component along the viewing
    /// axis `R₃`.
    pub fn canonical(&self) -> Self {
        let axis = self.rotation.row(2).transpose();
        Self {
            translation: self.translation - axis * axis.dot(&self.translation),
            ..self.clone()
        }
    }

    /// `f P R t`: the image-plane offset.
    fn image_offset(&self) -> Vec2 {
        let rt = self.rotation * self.translation;
        Vec2::new(rt.x, rt.y) * self.scale
    }

    fn camera(&self) -> Matrix2x3<f64> {
        self.rotation.fixed_rows::<2>(0) * self.scale
    }
}

/// `f P R (v + t)` for every vertex.
pub fn project_weak_perspective(points: &[Vec3], params: &FitParams) -> Vec<Vec2> {
    let m = params.camera();
    let b = params.image_offset();
    points.iter().map(|v| m * v + b).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub reg_id: f64,
    pub reg_exp: f64,
    pub max_outer_iters: usize,
    /// Stop when the objective changes by less than this between outer
    /// iterations.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            reg_id: 1e-3,
            reg_exp: 1e-3,
            max_outer_iters: 200,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelFit {
    pub params: FitParams,
    /// Objective after initialisation and after every outer iteration.
    pub objective_history: Vec<f64>,
    /// Sum of squared 2D landmark residuals at the returned parameters.
    pub residual: f64,
}

struct Problem {
    vertices: Vec<usize>,
    targets: Vec<Vec2>,
    /// Mean and stacked basis rows restricted to landmark vertices.
    mean: Vec<Vec3>,
    basis: DMatrix<f64>,
    /// Ridge weight per coefficient: λ / σ².
    ridge: DVector<f64>,
}

impl Problem {
    fn new(model: &MorphableModel, observed: &[(usize, Vec2)], opts: &FitOptions) -> Result<Self> {
        let k = model.k_id() + model.k_exp();
        let mut basis = DMatrix::zeros(3 * observed.len(), k);
        let mut mean = Vec::with_capacity(observed.len());
        for (j, (v, _)) in observed.iter().enumerate() {
            for c in 0..3 {
                let row = 3 * v + c;
                for (col, val) in model
                    .basis_id
                    .row(row)
                    .iter()
                    .chain(model.basis_exp.row(row).iter())
                    .enumerate()
                {
                    basis[(3 * j + c, col)] = *val;
                }
            }
            mean.push(Vec3::new(model.mean[3 * v], model.mean[3 * v + 1], model.mean[3 * v + 2]));
        }
        let ridge = DVector::from_iterator(
            k,
            model
                .std_id
                .iter()
                .map(|s| opts.reg_id / (s * s))
                .chain(model.std_exp.iter().map(|s| opts.reg_exp / (s * s))),
        );
        Ok(Self {
            vertices: observed.iter().map(|o| o.0).collect(),
            targets: observed.iter().map(|o| o.1).collect(),
            mean,
            basis,
            ridge,
        })
    }

    fn shape_points(&self, alpha: &DVector<f64>) -> Vec<Vec3> {
        let d = &self.basis * alpha;
        self.mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + Vec3::new(d[3 * j], d[3 * j + 1], d[3 * j + 2]))
            .collect()
    }

    fn reprojection(&self, alpha: &DVector<f64>, camera: &Matrix2x3<f64>, offset: &Vec2) -> f64 {
        self.shape_points(alpha)
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| (y - (camera * x + offset)).norm_squared())
            .sum()
    }

    fn objective(&self, s: &State) -> f64 {
        self.reprojection(&s.alpha, &s.camera(), &s.offset) + self.prior(&s.alpha)
    }

    fn prior(&self, alpha: &DVector<f64>) -> f64 {
        alpha.iter().zip(self.ridge.iter()).map(|(a, l)| l * a * a).sum()
    }
}

/// Internal parametrisation: image-plane offset instead of `t`.
#[derive(Debug, Clone)]
struct State {
    alpha: DVector<f64>,
    scale: f64,
    rotation: Matrix3<f64>,
    offset: Vec2,
}

impl State {
    fn camera(&self) -> Matrix2x3<f64> {
        self.rotation.fixed_rows::<2>(0) * self.scale
    }

    fn into_params(self, model: &MorphableModel) -> FitParams {
        let t = self.rotation.transpose() * Vec3::new(self.offset.x, self.offset.y, 0.0) / self.scale;
        FitParams {
            alpha_id: self.alpha.rows(0, model.k_id()).into_owned(),
            alpha_exp: self.alpha.rows(model.k_id(), model.k_exp()).into_owned(),
            scale: self.scale,
            rotation: self.rotation,
            translation: t,
        }
    }
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Affine camera by least squares, then the nearest scaled rotation.
fn initial_pose(points: &[Vec3], targets: &[Vec2]) -> Result<(f64, Matrix3<f64>, Vec2)> {
    let n = points.len();
    let mut a = DMatrix::zeros(n, 4);
    let mut b = DMatrix::zeros(n, 2);
    for (j, (p, y)) in points.iter().zip(targets).enumerate() {
        a.row_mut(j).copy_from_slice(&[p.x, p.y, p.z, 1.0]);
        b.row_mut(j).copy_from_slice(&[y.x, y.y]);
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Degenerate(format!("affine camera fit: {e}")))?;
    let m = sol.rows(0, 3).transpose();
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let q = &u * &vt;
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return Err(Error::Degenerate("landmarks collapse to a point".into()));
    }
    let r1 = Vec3::new(q[(0, 0)], q[(0, 1)], q[(0, 2)]);
    let r2 = Vec3::new(q[(1, 0)], q[(1, 1)], q[(1, 2)]);
    let rotation = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r1.cross(&r2).transpose()]);
    Ok((scale, rotation, Vec2::new(sol[(3, 0)], sol[(3, 1)])))
}

/// Pose update by depth lifting: borrow each point's current depth, solve
/// the 3D similarity, repeat. Never increases the reprojection error.
fn pose_step(points: &[Vec3], targets: &[Vec2], s: &mut State, iters: usize) -> Result<()> {
    let mut current: f64 = points
        .iter()
        .zip(targets)
        .map(|(x, y)| (y - (s.camera() * x + s.offset)).norm_squared())
        .sum();
    for _ in 0..iters {
        let pairs: Vec<(Vec3, Vec3)> = points
            .iter()
            .zip(targets)
            .map(|(x, y)| {
                let depth = s.scale * s.rotation.row(2).transpose().dot(x);
                (*x, Vec3::new(y.x, y.y, depth))
            })
            .collect();
        let sim = estimate_similarity(&pairs)?;
        let next = State {
            alpha: s.alpha.clone(),
            scale: sim.scale,
            rotation: sim.rotation,
            offset: Vec2::new(sim.translation.x, sim.translation.y),
        };
        let err: f64 = points
            .iter()
            .zip(targets)
            .map(|(x, y)| (y - (next.camera() * x + next.offset)).norm_squared())
            .sum();
        if !(err <= current) {
            break;
        }
        let gain = current - err;
        *s = next;
        current = err;
        if gain <= 1e-15 * (1.0 + current) {
            break;
        }
    }
    Ok(())
}

/// Ridge solve for all coefficients at a fixed pose.
fn shape_step(p: &Problem, s: &mut State) -> Result<()> {
    let m = s.camera();
    let l = p.vertices.len();
    let k = p.ridge.len();
    let mut jac = DMatrix::zeros(2 * l, k);
    let mut rhs = DVector::zeros(2 * l);
    for j in 0..l {
        let block = m * p.basis.rows(3 * j, 3);
        jac.rows_mut(2 * j, 2).copy_from(&block);
        let r = p.targets[j] - (m * p.mean[j] + s.offset);
        rhs[2 * j] = r.x;
        rhs[2 * j + 1] = r.y;
    }
    let mut lhs = jac.tr_mul(&jac);
    for c in 0..k {
        lhs[(c, c)] += p.ridge[c];
    }
    let chol = lhs.cholesky().ok_or_else(|| {
        Error::Degenerate("shape step is rank deficient; increase the ridge weights".into())
    })?;
    s.alpha = chol.solve(&jac.tr_mul(&rhs));
    Ok(())
}

/// Joint damped Gauss-Newton over every parameter. Steps are only accepted
/// when the objective drops.
fn joint_refine(p: &Problem, s: &mut State, iters: usize) -> Result<()> {
    let k = p.ridge.len();
    let l = p.vertices.len();
    let dim = k + 6;
    let mut obj = p.objective(s);
    let mut damping = 1e-6;
    for _ in 0..iters {
        let points = p.shape_points(&s.alpha);
        let m = s.camera();
        let top = s.rotation.fixed_rows::<2>(0).into_owned();
        let mut jac = DMatrix::zeros(2 * l + k, dim);
        let mut res = DVector::zeros(2 * l + k);
        for (j, x) in points.iter().enumerate() {
            let r = p.targets[j] - (m * x + s.offset);
            res[2 * j] = r.x;
            res[2 * j + 1] = r.y;
            // d(model)/dα, d/df, d/dω (right-multiplied rotation), d/db.
            jac.view_mut((2 * j, 0), (2, k)).copy_from(&(m * p.basis.rows(3 * j, 3)));
            jac.view_mut((2 * j, k), (2, 1)).copy_from(&(top * x));
            jac.view_mut((2 * j, k + 1), (2, 3)).copy_from(&(-(m * skew(x))));
            jac[(2 * j, k + 4)] = 1.0;
            jac[(2 * j + 1, k + 5)] = 1.0;
        }
        for c in 0..k {
            let w = p.ridge[c].sqrt();
            jac[(2 * l + c, c)] = w;
            res[2 * l + c] = -w * s.alpha[c];
        }
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&res);
        if jtr.norm() <= 1e-15 * (1.0 + obj) {
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for c in 0..dim {
                a[(c, c)] += damping * (1.0 + jtj[(c, c)]);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&jtr);
            let omega = Vec3::new(delta[k + 1], delta[k + 2], delta[k + 3]);
            let trial = State {
                alpha: &s.alpha + delta.rows(0, k),
                scale: s.scale + delta[k],
                rotation: s.rotation * *nalgebra::Rotation3::new(omega).matrix(),
                offset: s.offset + Vec2::new(delta[k + 4], delta[k + 5]),
            };
            let t_obj = if trial.scale > 0.0 { p.objective(&trial) } else { f64::INFINITY };
            if t_obj <= obj {
                let gain = obj - t_obj;
                *s = trial;
                obj = t_obj;
                damping = (damping * 0.1).max(1e-12);
                accepted = gain > 1e-16 * (1.0 + obj);
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(())
}

/// Fits coefficients and pose to 2D landmark observations `(vertex, xy)`.
///
/// Alternates a depth-lifting pose step with a ridge shape step until the
/// objective settles, then polishes jointly. The objective is the squared
/// reprojection error plus `λ Σ (α/σ)²`; the recorded history never
/// increases.
pub fn fit_to_landmarks(
    model: &MorphableModel,
    observed: &[(usize, Vec2)],
    opts: &FitOptions,
) -> Result<ModelFit> {
    if observed.len() < 4 {
        return Err(Error::Insufficient(format!(
            "model fitting needs at least 4 landmarks, got {}",
            observed.len()
        )));
    }
    if let Some((v, _)) = observed.iter().find(|(v, _)| *v >= model.vertex_count()) {
        return Err(Error::IndexOutOfRange {
            index: *v,
            len: model.vertex_count(),
        });
    }
    if !(opts.reg_id >= 0.0 && opts.reg_exp >= 0.0) {
        return Err(Error::InvalidParameter("ridge weights must be non-negative".into()));
    }
    let p = Problem::new(model, observed, opts)?;
    let k = p.ridge.len();
    let (scale, rotation, offset) = initial_pose(&p.mean, &p.targets)?;
    let mut s = State {
        alpha: DVector::zeros(k),
        scale,
        rotation,
        offset,
    };
    let mut history = vec![p.objective(&s)];
    for _ in 0..opts.max_outer_iters {
        let before = s.clone();
        pose_step(&p.shape_points(&s.alpha), &p.targets, &mut s, 50)?;
        let mut shaped = s.clone();
        shape_step(&p, &mut shaped)?;
        // The ridge solve is the exact block minimiser, but guard rounding.
        if p.objective(&shaped) <= p.objective(&s) {
            s = shaped;
        }
        let mut obj = p.objective(&s);
        if obj > *history.last().unwrap() {
            s = before;
            obj = *history.last().unwrap();
        }
        let change = history.last().unwrap() - obj;
        history.push(obj);
        if change < opts.tol * (1.0 + obj) {
            break;
        }
    }
    joint_refine(&p, &mut s, 100)?;
    let last = *history.last().unwrap();
    history.push(p.objective(&s).min(last));
    let residual = p.reprojection(&s.alpha, &s.camera(), &s.offset);
    Ok(ModelFit {
        params: s.into_params(model),
        objective_history: history,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticModelConfig {
    pub k_id: usize,
    pub k_exp: usize,
    /// RBF width as a fraction of the base bounding-box diagonal.
    pub smoothness: f64,
    /// RMS vertex displacement of one standard deviation of the leading
    /// identity component, as a fraction of the bounding-box diagonal.
    pub displacement_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticModelConfig {
    fn default() -> Self {
        Self {
            k_id: 40,
            k_exp: 20,
            smoothness: 0.1,
            displacement_scale: 0.05,
            seed: 0,
        }
    }
}

/// Number of RBF centres summed into each raw field.
const CENTRES_PER_FIELD: usize = 6;

/// Bases from smooth random displacement fields (sums of Gaussian bumps
/// with random 3D amplitudes), orthonormalised jointly so identity and
/// expression columns are mutually orthogonal. Standard deviations decay
/// as `1/sqrt(1 + i)` from the level set by `displacement_scale`;
/// expression ones are scaled by 0.5.
pub fn build_synthetic_model(base: &Mesh, cfg: &SyntheticModelConfig) -> Result<MorphableModel> {
    let n = base.vertex_count();
    let k = cfg.k_id + cfg.k_exp;
    if k >= 3 * n {
        return Err(Error::InvalidParameter(format!(
            "{k} basis vectors do not fit a {}-dimensional shape space",
            3 * n
        )));
    }
    if !(cfg.smoothness > 0.0) || !(cfg.displacement_scale > 0.0) {
        return Err(Error::InvalidParameter(
            "smoothness and displacement scale must be positive".into(),
        ));
    }
    let width = cfg.smoothness * base.bbox_diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let verts = base.vertices();
    let mut q = DMatrix::<f64>::zeros(3 * n, k);
    let mut col = 0;
    let mut attempts = 0;
    while col < k {
        attempts += 1;
        if attempts > 20 * k + 100 {
            return Err(Error::Degenerate(
                "could not draw enough independent smooth fields".into(),
            ));
        }
        let centres: Vec<(Vec3, Vec3)> = (0..CENTRES_PER_FIELD)
            .map(|_| {
                let c = verts[rng.random_range(0..n)];
                let a = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                (c, a)
            })
            .collect();
        let mut v = DVector::from_iterator(
            3 * n,
            verts.iter().flat_map(|p| {
                let d: Vec3 = centres
                    .iter()
                    .map(|(c, a)| a * (-(p - c).norm_squared() / (2.0 * width * width)).exp())
                    .sum();
                [d.x, d.y, d.z]
            }),
        );
        let raw = v.norm();
        // Modified Gram-Schmidt, twice for stability.
        for _ in 0..2 {
            for j in 0..col {
                let qj = q.column(j);
                let proj = qj.dot(&v);
                v.axpy(-proj, &qj, 1.0);
            }
        }
        let rest = v.norm();
        if rest <= 1e-8 * raw {
            continue;
        }
        q.set_column(col, &(v / rest));
        col += 1;
    }
    // A unit column moves the RMS vertex by 1/sqrt(n).
    let lead = cfg.displacement_scale * base.bbox_diagonal() * (n as f64).sqrt();
    let std = |i: usize| lead / (1.0 + i as f64).sqrt();
    MorphableModel::new(
        base,
        q.columns(0, cfg.k_id).into_owned(),
        q.columns(cfg.k_id, cfg.k_exp).into_owned(),
        DVector::from_fn(cfg.k_id, |i, _| std(i)),
        DVector::from_fn(cfg.k_exp, |i, _| 0.5 * std(i)),
    )
}
