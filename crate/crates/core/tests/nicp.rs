use meshtrack::correspondence::{find_correspondences, Correspondence, CorrespondenceSet, Gating, TargetSurface};
use meshtrack::mesh::{icosphere, LandmarkSet, Mesh, Vec3};
use meshtrack::nicp::{
    assemble_nicp_system, assemble_system, energy, fit, report_csv, solve_step, DeformationField,
    NicpConfig, Weights,
};
use meshtrack::similarity::{rigid_icp_with_scale, RigidParams, SimilarityTransform};
use meshtrack::Error;
use nalgebra::{DMatrix, Rotation3, Unit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    template: Mesh,
    edges: Vec<(usize, usize)>,
    corr: CorrespondenceSet,
    landmarks: LandmarkSet,
    predictions: Vec<Vec3>,
}

fn jitter(rng: &mut ChaCha8Rng, p: &Vec3, s: f64) -> Vec3 {
    p + Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = icosphere(1);
    let edges = template.edges();
    let corr = CorrespondenceSet {
        entries: template
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, v)| Correspondence {
                target_index: i,
                point: jitter(&mut rng, v, 0.2),
                weight: if rng.random_bool(0.8) { 1.0 } else { 0.0 },
                distance: 0.0,
            })
            .collect(),
    };
    let landmarks = LandmarkSet::new(
        [1usize, 5, 17, 30]
            .iter()
            .map(|&i| (i, jitter(&mut rng, &template.vertices()[i], 0.1)))
            .collect(),
    );
    let predictions = template.vertices().iter().map(|v| jitter(&mut rng, v, 0.1)).collect();
    Instance {
        template,
        edges,
        corr,
        landmarks,
        predictions,
    }
}

fn weights(alpha: f64, beta: f64, gamma: f64, skew: f64) -> Weights {
    Weights {
        stiffness: alpha,
        landmark: beta,
        motion: gamma,
        skew,
    }
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> DeformationField {
    let mut f = DeformationField::identity(n).matrix().clone();
    f.iter_mut().for_each(|x| *x += rng.random_range(-spread..spread));
    DeformationField::from_matrix(f).unwrap()
}

/// Naive double loop over every term, squared coefficients.
fn naive_total(x: &DeformationField, inst: &Instance, w: Weights) -> f64 {
    let verts = inst.template.vertices();
    let mut ed = 0.0;
    for i in 0..verts.len() {
        let c = &inst.corr.entries[i];
        let p = x.transform(i, &verts[i]);
        for k in 0..3 {
            ed += c.weight * c.weight * (p[k] - c.point[k]).powi(2);
        }
    }
    let mut es = 0.0;
    for &(i, j) in &inst.edges {
        for r in 0..4 {
            let g = if r == 3 { w.skew } else { 1.0 };
            for c in 0..3 {
                let d = x.matrix()[(4 * i + r, c)] - x.matrix()[(4 * j + r, c)];
                es += (d * g).powi(2);
            }
        }
    }
    let mut el = 0.0;
    for (i, l) in &inst.landmarks.entries {
        let p = x.transform(*i, &verts[*i]);
        for k in 0..3 {
            el += (p[k] - l[k]).powi(2);
        }
    }
    let mut em = 0.0;
    for i in 0..verts.len() {
        let p = x.transform(i, &verts[i]);
        for k in 0..3 {
            em += (p[k] - inst.predictions[i][k]).powi(2);
        }
    }
    ed + w.stiffness.powi(2) * es + w.landmark.powi(2) * el + w.motion.powi(2) * em
}

fn residual_norm2(a: &meshtrack::sparse::CsrMatrix, b: &DMatrix<f64>, x: &DeformationField) -> f64 {
    (a.mul_dense(x.matrix()).unwrap() - b).norm_squared()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn system_matches_energy(seed in 0u64..10_000, alpha in 0.5f64..100.0, beta in 0.5f64..100.0,
                             gamma in 0.0f64..5.0, skew in 0.1f64..3.0) {
        let inst = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let x = random_field(&mut rng, inst.template.vertex_count(), 0.3);
        let w = weights(alpha, beta, gamma, skew);
        let e = energy(&x, &inst.template, &inst.edges, &inst.corr, &inst.landmarks, Some(&inst.predictions), w).unwrap();
        let (a, b) = assemble_system(&inst.template, &inst.edges, &inst.corr, &inst.landmarks, Some(&inst.predictions), w).unwrap();
        let lhs = residual_norm2(&a, &b, &x);
        prop_assert!((lhs - e.total).abs() <= 1e-9 * e.total.max(1e-300));
        let naive = naive_total(&x, &inst, w);
        prop_assert!((naive - e.total).abs() <= 1e-9 * naive);
    }
}

#[test]
fn solve_recovers_consistent_system() {
    let inst = instance(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = random_field(&mut rng, inst.template.vertex_count(), 0.5);
    let (a, _) = assemble_system(
        &inst.template,
        &inst.edges,
        &inst.corr,
        &inst.landmarks,
        Some(&inst.predictions),
        weights(2.0, 1.0, 1.0, 1.0),
    )
    .unwrap();
    let b = a.mul_dense(x0.matrix()).unwrap();
    let sol = solve_step(&a, &b, &mut None).unwrap();
    assert!(sol.field.distance(&x0) <= 1e-8 * x0.matrix().norm());
    assert!(sol.normal_residual <= 1e-8);
}

#[test]
fn solution_beats_perturbations_and_has_zero_gradient() {
    let inst = instance(8);
    let w = weights(10.0, 5.0, 1.0, 1.0);
    let (a, b) =
        assemble_system(&inst.template, &inst.edges, &inst.corr, &inst.landmarks, Some(&inst.predictions), w)
            .unwrap();
    let x = solve_step(&a, &b, &mut None).unwrap().field;
    let eval = |f: &DeformationField| {
        energy(f, &inst.template, &inst.edges, &inst.corr, &inst.landmarks, Some(&inst.predictions), w)
            .unwrap()
            .total
    };
    let e0 = eval(&x);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..1000 {
        let scale = 10f64.powi(-(k % 6) as i32);
        let mut m = x.matrix().clone();
        m.iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        let e = eval(&DeformationField::from_matrix(m).unwrap());
        assert!(e >= e0, "perturbation {k} lowered the energy: {e} < {e0}");
    }
    let h = 1e-6;
    let mut max_grad = 0.0f64;
    for idx in 0..x.matrix().len() {
        let mut p = x.matrix().clone();
        let mut q = x.matrix().clone();
        p[idx] += h;
        q[idx] -= h;
        let g = (eval(&DeformationField::from_matrix(p).unwrap())
            - eval(&DeformationField::from_matrix(q).unwrap()))
            / (2.0 * h);
        max_grad = max_grad.max(g.abs());
    }
    assert!(max_grad < 1e-6, "max finite-difference gradient {max_grad}");
}

#[test]
fn ablation_matches_motion_free_assembly() {
    let inst = instance(21);
    for (alpha, beta, skew) in [(100.0, 100.0, 1.0), (10.0, 30.0, 0.5)] {
        let (a, b) = assemble_system(
            &inst.template,
            &inst.edges,
            &inst.corr,
            &inst.landmarks,
            Some(&inst.predictions),
            weights(alpha, beta, 0.0, skew),
        )
        .unwrap();
        let (a2, b2) =
            assemble_nicp_system(&inst.template, &inst.edges, &inst.corr, &inst.landmarks, alpha, beta, skew)
                .unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let (a3, b3) =
            assemble_system(&inst.template, &inst.edges, &inst.corr, &inst.landmarks, None, weights(alpha, beta, 2.0, skew))
                .unwrap();
        assert_eq!(a3, a2);
        assert_eq!(b3, b2);
    }
}

#[test]
fn unconstrained_blocks_are_reported() {
    // Flat template, no motion rows: the z column of every block is free.
    let m = meshtrack::mesh::grid_mesh(4, 4, 0.1);
    let corr = CorrespondenceSet::identity(m.vertices());
    let (a, b) = assemble_system(&m, &m.edges(), &corr, &LandmarkSet::default(), None, weights(10.0, 1.0, 0.0, 1.0))
        .unwrap();
    match solve_step(&a, &b, &mut None) {
        Err(Error::Singular { blocks }) => assert!(!blocks.is_empty()),
        other => panic!("expected a singular system, got {other:?}"),
    }
}

fn fast_config() -> NicpConfig {
    NicpConfig {
        stiffness: vec![100.0, 50.0, 10.0],
        landmark: vec![100.0, 50.0, 10.0],
        motion: vec![0.0; 3],
        ..NicpConfig::default()
    }
}

#[test]
fn fixed_point_on_identical_target() {
    let m = icosphere(3);
    let target = TargetSurface::new(m.clone()).unwrap();
    let lm = LandmarkSet::new((0..m.vertex_count()).step_by(40).map(|i| (i, m.vertices()[i])).collect());
    let out = fit(&m, &target, &lm, None, &NicpConfig::default()).unwrap();
    for (a, b) in out.deformed.vertices().iter().zip(m.vertices()) {
        assert!((a - b).norm() < 1e-6);
    }
    assert!(out.report.last().unwrap().terms.data < 1e-12);
    assert!(out.converged());
    assert_eq!(out.deformed.triangles(), m.triangles());
}

#[test]
fn similarity_target_after_prealignment() {
    let m = icosphere(3).with_vertices(
        icosphere(3).vertices().iter().map(|v| v * 0.5 + Vec3::repeat(0.5)).collect(),
    )
    .unwrap();
    let sim = SimilarityTransform {
        rotation: *Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(0.3, 1.0, -0.2)), 0.4).matrix(),
        translation: Vec3::new(0.1, -0.2, 0.05),
        scale: 1.3,
    };
    let target_mesh = sim.apply_mesh(&m);
    let target = TargetSurface::new(target_mesh.clone()).unwrap();
    let lm = LandmarkSet::new((0..m.vertex_count()).step_by(13).map(|i| (i, target_mesh.vertices()[i])).collect());
    let rigid = rigid_icp_with_scale(&m, &target, &lm, &RigidParams::default()).unwrap();
    let aligned = rigid.transform.apply_mesh(&m);
    let out = fit(&aligned, &target, &lm, None, &fast_config()).unwrap();
    let mean = out
        .deformed
        .vertices()
        .iter()
        .zip(target_mesh.vertices())
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / m.vertex_count() as f64;
    assert!(mean < 1e-4, "mean vertex error {mean}");
}

#[test]
fn energy_is_monotone_within_a_rung() {
    // With gating disabled, re-selecting closest points cannot raise E_d for
    // the fixed field, and the solve cannot raise E for fixed matches.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let template = icosphere(2);
    let edges = template.edges();
    let target_mesh = template
        .with_vertices(
            template
                .vertices()
                .iter()
                .map(|v| v * (1.0 + 0.15 * v.x * v.y) + Vec3::new(0.02, 0.0, 0.01) + jitter(&mut rng, &Vec3::zeros(), 0.01))
                .collect(),
        )
        .unwrap();
    let target = TargetSurface::new(target_mesh.clone()).unwrap();
    let lm = LandmarkSet::new([0usize, 11, 40, 90, 150].iter().map(|&i| (i, target_mesh.vertices()[i])).collect());
    let predictions: Vec<Vec3> = target_mesh.vertices().to_vec();
    let w = weights(5.0, 2.0, 0.5, 1.0);
    let mut x = DeformationField::identity(template.vertex_count());
    let mut cache = None;
    let mut last: Option<f64> = None;
    for j in 0..8 {
        let deformed = x.apply(&template).unwrap();
        let corr = find_correspondences(&deformed, &deformed.normals(), &target, Gating::disabled()).unwrap();
        let before = energy(&x, &template, &edges, &corr, &lm, Some(&predictions), w).unwrap().total;
        let (a, b) = assemble_system(&template, &edges, &corr, &lm, Some(&predictions), w).unwrap();
        let next = solve_step(&a, &b, &mut cache).unwrap().field;
        let after = energy(&next, &template, &edges, &corr, &lm, Some(&predictions), w).unwrap().total;
        assert!(after <= before * (1.0 + 1e-12), "iteration {j}: {after} > {before}");
        if let Some(prev) = last {
            assert!(before <= prev * (1.0 + 1e-12), "re-matching raised E at {j}: {before} > {prev}");
        }
        last = Some(after);
        x = next;
    }
}

#[test]
fn fit_is_deterministic_and_reports_csv() {
    let template = icosphere(2);
    let target_mesh = template
        .with_vertices(template.vertices().iter().map(|v| v * (1.0 + 0.1 * v.z)).collect())
        .unwrap();
    let target = TargetSurface::new(target_mesh.clone()).unwrap();
    let lm = LandmarkSet::new([0usize, 30, 77, 120].iter().map(|&i| (i, target_mesh.vertices()[i])).collect());
    let preds = target_mesh.vertices().to_vec();
    let cfg = NicpConfig {
        motion: vec![2.0, 1.0, 0.5],
        ..fast_config()
    };
    let a = fit(&template, &target, &lm, Some(&preds), &cfg).unwrap();
    let b = fit(&template, &target, &lm, Some(&preds), &cfg).unwrap();
    let (ra, rb) = (report_csv(&a.report), report_csv(&b.report));
    assert_eq!(ra, rb);
    assert_eq!(a.field, b.field);
    assert!(ra.lines().count() > 3);
    for (k, line) in ra.lines().skip(1).enumerate() {
        assert_eq!(line.split(',').count(), 7, "line {k}");
    }
}

#[test]
fn capped_steps_keep_final_state() {
    let template = icosphere(2);
    let target_mesh = template
        .with_vertices(template.vertices().iter().map(|v| v * 1.2).collect())
        .unwrap();
    let target = TargetSurface::new(target_mesh.clone()).unwrap();
    let lm = LandmarkSet::new([0usize, 30, 77, 120].iter().map(|&i| (i, target_mesh.vertices()[i])).collect());
    let cfg = NicpConfig {
        max_inner_iters: 1,
        epsilon: 1e-300,
        ..fast_config()
    };
    let out = fit(&template, &target, &lm, None, &cfg).unwrap();
    assert_eq!(out.capped_steps, vec![0, 1, 2]);
    assert_eq!(out.report.len(), 3);
    assert_ne!(out.field, DeformationField::identity(template.vertex_count()));
}
