//! Similarity transforms (rotation, uniform scale, translation): closed-form
//! estimation from point pairs, unit-cube normalization, and rigid ICP with
//! scale seeded by landmark pairs.

use nalgebra::{Matrix3, Matrix3x4};
use serde::{Deserialize, Serialize};

use crate::correspondence::{find_correspondences, Gating, TargetSurface};
use crate::error::{Error, Result};
use crate::mesh::{LandmarkSet, Mesh, Vec3};

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    pub fn apply_mesh(&self, mesh: &Mesh) -> Mesh {
        mesh.with_vertices(self.apply_all(mesh.vertices()))
            .expect("same vertex count")
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation * first.rotation,
            translation: self.scale * (self.rotation * first.translation) + self.translation,
            scale: self.scale * first.scale,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `[sR | t]`.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.set_column(3, &self.translation);
        m
    }

    /// Sum of squared residuals `|b - sRa - t|^2` over the pairs.
    pub fn objective(&self, pairs: &[(Vec3, Vec3)]) -> f64 {
        pairs
            .iter()
            .map(|(a, b)| (b - self.apply(a)).norm_squared())
            .sum()
    }
}

/// Closed-form least-squares similarity mapping sources `a` onto
/// destinations `b`. The rotation is projected onto SO(3) with the
/// `diag(1, 1, det(UV^T))` correction so a reflection is never returned.
pub fn estimate_similarity(pairs: &[(Vec3, Vec3)]) -> Result<SimilarityTransform> {
    if pairs.len() < 3 {
        return Err(Error::Degenerate(format!(
            "similarity needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let inv = 1.0 / pairs.len() as f64;
    let a_bar = pairs.iter().map(|(a, _)| a).sum::<Vec3>() * inv;
    let b_bar = pairs.iter().map(|(_, b)| b).sum::<Vec3>() * inv;
    let mut k = Matrix3::zeros();
    for (a, b) in pairs {
        k += (b - b_bar) * (a - a_bar).transpose();
    }
    let svd = k.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let min_i = sv.imin();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|x, y| y.total_cmp(x));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::Degenerate(
            "point pairs are collinear or coincident (rank-deficient cross-covariance)".into(),
        ));
    }
    let mut flip = Matrix3::identity();
    flip[(min_i, min_i)] = (u * v_t).determinant().signum();
    let rotation = u * flip * v_t;

    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in pairs {
        let at = rotation * (a - a_bar);
        num += (b - b_bar).dot(&at);
        den += at.norm_squared();
    }
    let scale = num / den;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate(format!(
            "non-positive scale estimate {scale}"
        )));
    }
    Ok(SimilarityTransform {
        rotation,
        translation: b_bar - scale * (rotation * a_bar),
        scale,
    })
}

/// Uniformly scales and shifts a mesh into `[0,1]^3`: the longest
/// bounding-box axis maps exactly onto `[0,1]`, the other axes are centered.
/// Returns the normalized mesh and the original-to-normalized transform.
pub fn rescale_to_unit_cube(mesh: &Mesh) -> Result<(Mesh, SimilarityTransform)> {
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| Error::Degenerate("empty mesh has no bounding box".into()))?;
    let extent = hi - lo;
    let longest = extent.max();
    if !(longest > 0.0) || !longest.is_finite() {
        return Err(Error::Degenerate("zero-extent bounding box".into()));
    }
    let scale = 1.0 / longest;
    let offset = extent.map(|e| (1.0 - e * scale) * 0.5);
    let transform = SimilarityTransform {
        rotation: Matrix3::identity(),
        translation: offset - lo * scale,
        scale,
    };
    let vertices = mesh
        .vertices()
        .iter()
        .map(|v| {
            // (v - lo) * s keeps the longest axis exactly on [0, 1].
            let mut p = (v - lo) * scale + offset;
            for k in 0..3 {
                p[k] = p[k].clamp(0.0, 1.0);
            }
            p
        })
        .collect();
    Ok((mesh.with_vertices(vertices)?, transform))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigidParams {
    /// Closest-point iterations after the landmark-only solve. 0 keeps the
    /// landmark solution.
    pub max_iters: usize,
    /// Stop when the Frobenius change of `[sR | t]` drops below this.
    pub tol: f64,
    pub max_normal_angle: f64,
    pub max_distance_fraction: f64,
}

impl Default for RigidParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-7,
            max_normal_angle: crate::correspondence::DEFAULT_MAX_NORMAL_ANGLE,
            max_distance_fraction: crate::correspondence::DEFAULT_MAX_DISTANCE_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidFit {
    pub transform: SimilarityTransform,
    /// Closest-point iterations performed after the landmark solve.
    pub iterations: usize,
    pub converged: bool,
}

/// Rigid ICP with scale. Iteration 0 solves from the landmark pairs alone;
/// each further iteration re-matches every template vertex to its closest
/// target vertex (gated) and re-solves with the landmark pairs retained.
pub fn rigid_icp_with_scale(
    template: &Mesh,
    target: &TargetSurface,
    landmarks: &LandmarkSet,
    params: &RigidParams,
) -> Result<RigidFit> {
    if landmarks.len() < 3 {
        return Err(Error::Insufficient(format!(
            "rigid alignment needs at least 3 landmarks, got {}",
            landmarks.len()
        )));
    }
    landmarks.validate(template.vertex_count())?;
    let landmark_pairs: Vec<(Vec3, Vec3)> = landmarks
        .entries
        .iter()
        .map(|(i, l)| (template.vertices()[*i], *l))
        .collect();
    let mut transform = estimate_similarity(&landmark_pairs)?;
    let gating = Gating::for_target(
        &target.mesh,
        params.max_normal_angle,
        params.max_distance_fraction,
    );
    let mut converged = params.max_iters == 0;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        let moved = transform.apply_mesh(template);
        let corr = find_correspondences(&moved, &moved.normals(), target, gating)?;
        let mut pairs: Vec<(Vec3, Vec3)> = template
            .vertices()
            .iter()
            .zip(&corr.entries)
            .filter(|(_, c)| c.weight > 0.0)
            .map(|(v, c)| (*v, c.point))
            .collect();
        pairs.extend_from_slice(&landmark_pairs);
        let next = estimate_similarity(&pairs)?;
        let change = (next.matrix() - transform.matrix()).norm();
        transform = next;
        if change < params.tol {
            converged = true;
            break;
        }
    }
    Ok(RigidFit {
        transform,
        iterations,
        converged,
    })
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    // acos loses precision near 0; use the axis-angle atan2 form.
    let skew = Vec3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin2 = skew.norm();
    let cos2 = rel.trace() - 1.0;
    sin2.atan2(cos2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{icosphere, Mesh};
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn tetra() -> Vec<Vec3> {
        vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()]
    }

    pub(crate) fn random_similarity(rng: &mut impl Rng) -> SimilarityTransform {
        let axis = Unit::new_normalize(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        SimilarityTransform {
            rotation: *Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1)).matrix(),
            translation: Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
            scale: rng.random_range(0.1..10.0),
        }
    }

    #[test]
    fn identity_pairs() {
        let pairs: Vec<_> = tetra().into_iter().map(|a| (a, a)).collect();
        let t = estimate_similarity(&pairs).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
        assert!((t.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_scale_and_shift() {
        let shift = Vec3::new(1.0, 2.0, 3.0);
        let pairs: Vec<_> = tetra().into_iter().map(|a| (a, 2.0 * a + shift)).collect();
        let t = estimate_similarity(&pairs).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!((t.translation - shift).norm() < 1e-12);
        assert!((t.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_random_transform_from_50_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let mut truth = random_similarity(&mut rng);
        truth.scale = 0.37;
        let pairs: Vec<_> = src.iter().map(|a| (*a, truth.apply(a))).collect();
        let t = estimate_similarity(&pairs).unwrap();
        assert!(rotation_angle_between(&t.rotation, &truth.rotation) < 1e-8);
        assert!((t.scale - 0.37).abs() < 1e-8);
        assert!((t.translation - truth.translation).norm() < 1e-8);
    }

    #[test]
    fn degenerate_inputs_reported() {
        let collinear: Vec<_> = (0..5)
            .map(|i| {
                let p = Vec3::new(i as f64, 0.0, 0.0);
                (p, p)
            })
            .collect();
        assert!(matches!(
            estimate_similarity(&collinear),
            Err(Error::Degenerate(_))
        ));
        let coincident = vec![(Vec3::x(), Vec3::y()); 4];
        assert!(estimate_similarity(&coincident).is_err());
        assert!(estimate_similarity(&collinear[..2]).is_err());
    }

    #[test]
    fn reflection_never_returned() {
        // Destination is a mirror image: best orthogonal fit is a reflection.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<Vec3> = (0..20)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let pairs: Vec<_> = src.iter().map(|a| (*a, Vec3::new(-a.x, a.y, a.z))).collect();
        let t = estimate_similarity(&pairs).unwrap();
        assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn apply_basics_and_composition() {
        let p = Vec3::new(1.0, 1.0, 1.0);
        assert_eq!(SimilarityTransform::identity().apply(&p), p);
        let s2 = SimilarityTransform {
            scale: 2.0,
            ..SimilarityTransform::identity()
        };
        assert_eq!(s2.apply(&p), Vec3::new(2.0, 2.0, 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (t1, t2) = (random_similarity(&mut rng), random_similarity(&mut rng));
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let seq = t2.apply(&t1.apply(&q));
            let composed = t2.compose(&t1).apply(&q);
            assert!((seq - composed).norm() < 1e-9 * (1.0 + seq.norm()));
            let back = t1.inverse().apply(&t1.apply(&q));
            assert!((back - q).norm() < 1e-9);
        }
    }

    #[test]
    fn unit_cube_examples() {
        let cube = Mesh::new(
            vec![Vec3::zeros(), Vec3::new(10.0, 10.0, 10.0), Vec3::new(10.0, 0.0, 5.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (m, t) = rescale_to_unit_cube(&cube).unwrap();
        assert_eq!(t.scale, 0.1);
        let (lo, hi) = m.bounding_box().unwrap();
        assert_eq!((lo, hi), (Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)));

        let boxy = Mesh::new(
            vec![Vec3::zeros(), Vec3::new(4.0, 2.0, 1.0), Vec3::new(4.0, 0.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (m, t) = rescale_to_unit_cube(&boxy).unwrap();
        assert_eq!(t.scale, 0.25);
        let (lo, hi) = m.bounding_box().unwrap();
        assert_eq!((lo.x, hi.x), (0.0, 1.0));
        assert_eq!((lo.y, hi.y), (0.25, 0.75));
        assert_eq!((lo.z, hi.z), (0.375, 0.625));
        for (orig, norm) in boxy.vertices().iter().zip(m.vertices()) {
            assert!((t.inverse().apply(norm) - orig).norm() < 1e-12);
            assert!((t.apply(orig) - norm).norm() < 1e-12);
        }
        let flat = Mesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 2]]).unwrap();
        assert!(rescale_to_unit_cube(&flat).is_err());
    }

    #[test]
    fn objective_is_locally_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let truth = random_similarity(&mut rng);
        let pairs: Vec<(Vec3, Vec3)> = (0..40)
            .map(|_| {
                let a = Vec3::new(rng.random(), rng.random(), rng.random());
                let n = Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
                (a, truth.apply(&a) + n)
            })
            .collect();
        let best = estimate_similarity(&pairs).unwrap();
        let e0 = best.objective(&pairs);
        for _ in 0..1000 {
            let axis = Unit::new_normalize(Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let d = Rotation3::from_axis_angle(&axis, rng.random_range(-1e-3..1e-3));
            let p = SimilarityTransform {
                rotation: d.matrix() * best.rotation,
                translation: best.translation
                    + Vec3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)),
                scale: best.scale * (1.0 + rng.random_range(-1e-3..1e-3)),
            };
            assert!(p.objective(&pairs) >= e0);
        }
    }

    fn sphere_target() -> Mesh {
        icosphere(3)
    }

    fn landmarks_from(mesh: &Mesh, ids: &[usize], t: &SimilarityTransform) -> LandmarkSet {
        LandmarkSet::new(ids.iter().map(|&i| (i, t.apply(&mesh.vertices()[i]))).collect())
    }

    #[test]
    fn rigid_icp_recovers_exact_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let template = sphere_target();
        let truth = random_similarity(&mut rng);
        let target = TargetSurface::new(truth.apply_mesh(&template)).unwrap();
        let ids: Vec<usize> = (0..template.vertex_count()).step_by(37).collect();
        let lm = landmarks_from(&template, &ids, &truth);
        let landmark_only = rigid_icp_with_scale(
            &template,
            &target,
            &lm,
            &RigidParams {
                max_iters: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((landmark_only.transform.matrix() - truth.matrix()).norm() < 1e-8);
        let full = rigid_icp_with_scale(&template, &target, &lm, &RigidParams::default()).unwrap();
        assert!((full.transform.matrix() - truth.matrix()).norm() < 1e-8);
        assert!(full.converged);
    }

    #[test]
    fn rigid_icp_identity() {
        let m = sphere_target();
        let target = TargetSurface::new(m.clone()).unwrap();
        let lm = landmarks_from(&m, &[0, 5, 17, 40, 99], &SimilarityTransform::identity());
        let fit = rigid_icp_with_scale(&m, &target, &lm, &RigidParams::default()).unwrap();
        assert!((fit.transform.matrix() - SimilarityTransform::identity().matrix()).norm() < 1e-12);
    }

    #[test]
    fn rigid_icp_tolerates_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let template = sphere_target();
        // Work in unit-cube units as the pipeline does.
        let (template, _) = rescale_to_unit_cube(&template).unwrap();
        let truth = random_similarity(&mut rng);
        let noise = Normal::new(0.0, 0.001).unwrap();
        let clean = truth.apply_mesh(&template);
        let noisy: Vec<Vec3> = clean
            .vertices()
            .iter()
            .map(|v| v + truth.scale * Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        let target = TargetSurface::new(clean.with_vertices(noisy.clone()).unwrap()).unwrap();
        let ids: Vec<usize> = (0..template.vertex_count()).step_by(13).collect();
        let lm = LandmarkSet::new(ids.iter().map(|&i| (i, noisy[i])).collect());
        let fit = rigid_icp_with_scale(&template, &target, &lm, &RigidParams::default()).unwrap();
        assert!(rotation_angle_between(&fit.transform.rotation, &truth.rotation) < 0.5f64.to_radians());
        assert!((fit.transform.scale / truth.scale - 1.0).abs() < 0.01);
    }

    #[test]
    fn rigid_icp_needs_three_landmarks() {
        let m = sphere_target();
        let target = TargetSurface::new(m.clone()).unwrap();
        let lm = landmarks_from(&m, &[0, 1], &SimilarityTransform::identity());
        assert!(rigid_icp_with_scale(&m, &target, &lm, &RigidParams::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn estimation_exact_on_noiseless_sets(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_similarity(&mut rng);
            let pairs: Vec<_> = (0..12)
                .map(|_| {
                    let a = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    (a, truth.apply(&a))
                })
                .collect();
            let t = estimate_similarity(&pairs).unwrap();
            prop_assert!(rotation_angle_between(&t.rotation, &truth.rotation) < 1e-9);
            prop_assert!((t.scale / truth.scale - 1.0).abs() < 1e-11);
            prop_assert!((t.translation - truth.translation).norm() < 1e-9 * (1.0 + truth.translation.norm()));
            prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
