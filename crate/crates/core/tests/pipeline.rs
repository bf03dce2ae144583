use meshtrack::evaluation::dense_ground_truth_error;
use meshtrack::kalman::KalmanConfig;
use meshtrack::mesh::{LandmarkSet, Mesh, Vec3};
use meshtrack::morphable::{build_synthetic_model, FitOptions, SyntheticModelConfig};
use meshtrack::pipeline::*;
use meshtrack::synth::{generate_sequence, BaseShape, SynthConfig};
use meshtrack::Error;
use nalgebra::DVector;

fn small_sequence(frames: usize, seed: u64) -> meshtrack::synth::SyntheticSequence {
    generate_sequence(&SynthConfig {
        base: BaseShape::SphereCap { rows: 15, cols: 15 },
        frames,
        landmark_count: 20,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.nicp.max_inner_iters = 10;
    cfg
}

#[test]
fn single_frame_fitted_to_itself() {
    let seq = small_sequence(1, 3);
    let frame = seq.frames[0].clone();
    let lm = LandmarkSet::new(seq.landmark_indices.iter().map(|&i| (i, frame.vertices()[i])).collect());
    let result = track_sequence(&[frame.clone()], &[lm], frame.clone(), &PipelineConfig::default()).unwrap();
    assert_eq!(result.frame_count(), 1);
    let err = dense_ground_truth_error(&result.trajectories(), &[frame.vertices().to_vec()]).unwrap();
    assert!(err.mean < 1e-6, "mean {}", err.mean);
    assert_eq!(result.fitted[0].triangles(), frame.triangles());
}

#[test]
fn short_sequence_tracks_and_keeps_topology() {
    let seq = small_sequence(4, 1);
    let result = track_sequence(&seq.frames, &seq.landmarks, seq.base.clone(), &quick_config()).unwrap();
    assert_eq!(result.frame_count(), 4);
    for (k, m) in result.fitted.iter().enumerate() {
        assert_eq!(m.triangles(), seq.base.triangles());
        assert_eq!(result.reports[k].motion_active, k >= 2);
        for i in [0, 17, 100] {
            assert_eq!(result.trajectory(i)[k], m.vertices()[i]);
        }
    }
    let err = dense_ground_truth_error(&result.trajectories(), &seq.truth).unwrap();
    assert!(err.mean < 5e-3, "mean dense error {}", err.mean);
}

#[test]
fn first_two_frames_ignore_filter_parameters() {
    let seq = small_sequence(3, 2);
    let a = track_sequence(&seq.frames, &seq.landmarks, seq.base.clone(), &quick_config()).unwrap();
    let mut other = quick_config();
    other.motion = KalmanConfig {
        process_noise: 3.0,
        measurement_noise: 0.5,
        ..KalmanConfig::default()
    };
    let b = track_sequence(&seq.frames, &seq.landmarks, seq.base.clone(), &other).unwrap();
    assert_eq!(a.fitted[..2], b.fitted[..2]);
    assert_eq!(a.reports[..2], b.reports[..2]);
    assert_ne!(a.fitted[2], b.fitted[2]);
}

#[test]
fn zero_motion_ladder_reports_no_motion_energy() {
    let seq = small_sequence(3, 4);
    let mut cfg = quick_config();
    cfg.nicp = cfg.nicp.with_motion_scale(0.0);
    let r = track_sequence(&seq.frames, &seq.landmarks, seq.base.clone(), &cfg).unwrap();
    assert!(r.reports.iter().flat_map(|f| &f.energy).all(|e| e.terms.motion == 0.0));
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let seq = small_sequence(4, 5);
    let full = track_sequence(&seq.frames, &seq.landmarks, seq.base.clone(), &quick_config()).unwrap();

    let mut tracker = Tracker::new(seq.base.clone(), quick_config()).unwrap();
    for k in 0..2 {
        tracker.step(&seq.frames[k], &seq.landmarks[k]).unwrap();
    }
    let bytes = tracker.checkpoint();
    drop(tracker);
    let mut resumed = Tracker::resume(&bytes).unwrap();
    assert_eq!(resumed.checkpoint(), bytes);
    for k in 2..4 {
        resumed.step(&seq.frames[k], &seq.landmarks[k]).unwrap();
    }
    assert_eq!(resumed.into_result(), full);
}

#[test]
fn failure_returns_tagged_partial_result() {
    let seq = small_sequence(3, 6);
    let mut landmarks = seq.landmarks.clone();
    landmarks[2] = LandmarkSet::new(vec![(10_000, Vec3::zeros())]);
    let failure = track_sequence(&seq.frames, &landmarks, seq.base.clone(), &quick_config()).unwrap_err();
    assert_eq!(failure.error.frame, 2);
    assert_eq!(failure.error.stage, Stage::Input);
    assert!(matches!(failure.error.source, Error::IndexOutOfRange { .. }));
    assert_eq!(failure.partial.frame_count(), 2);

    // A collapsed target fails during normalization.
    let mut frames = seq.frames.clone();
    frames[1] = frames[1].with_vertices(vec![Vec3::zeros(); frames[1].vertex_count()]).unwrap();
    let failure = track_sequence(&frames, &seq.landmarks, seq.base.clone(), &quick_config()).unwrap_err();
    assert_eq!((failure.error.frame, failure.error.stage), (1, Stage::Normalize));
    assert_eq!(failure.partial.frame_count(), 1);

    assert!(track_sequence(&[], &[], seq.base.clone(), &quick_config()).is_err());
    assert!(track_sequence(&seq.frames, &seq.landmarks[..1], seq.base.clone(), &quick_config()).is_err());
}

#[test]
fn export_import_round_trip_is_exact() {
    let seq = small_sequence(2, 7);
    let result = track_sequence(&seq.frames, &seq.landmarks, seq.base.clone(), &quick_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.traj");
    export_trajectories(&result, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let f = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    assert_eq!((n, f), (result.vertex_count(), 2));
    assert_eq!(bytes.len(), 24 + 8 * 3 * n * f);
    assert_eq!(import_trajectories(&path).unwrap(), result.trajectories());
    let csv = trajectories_to_csv(&result.trajectories());
    assert_eq!(trajectories_from_csv(&csv).unwrap(), result.trajectories());
}

#[test]
fn template_from_model_matches_generating_shape() {
    let base = meshtrack::synth::build_base(&BaseShape::SphereCap { rows: 12, cols: 12 }).unwrap();
    let model = build_synthetic_model(
        &base,
        &SyntheticModelConfig {
            k_id: 8,
            k_exp: 4,
            ..SyntheticModelConfig::default()
        },
    )
    .unwrap();
    let id = DVector::from_fn(8, |i, _| 0.5 * model.std_id()[i] * (i as f64 - 3.5) / 3.5);
    let exp = DVector::from_fn(4, |i, _| -0.7 * model.std_exp()[i] * (i as f64 - 1.5) / 1.5);
    let shape = model.synthesize(&id, &exp).unwrap();
    let lm = LandmarkSet::new((0..144).step_by(4).map(|i| (i, shape.vertices()[i])).collect());
    let opts = FitOptions {
        reg_id: 0.0,
        reg_exp: 0.0,
        ..FitOptions::default()
    };
    let source = TemplateSource::Model(model);
    let template = initialize_template(&lm, &source, &opts).unwrap();
    let max = template
        .vertices()
        .iter()
        .zip(shape.vertices())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    assert!(max < 1e-4, "max deviation {max}");
    assert_eq!(template.triangles(), shape.triangles());

    assert!(initialize_template(&LandmarkSet::default(), &source, &opts).is_err());
    let explicit = TemplateSource::Explicit(shape.clone());
    assert_eq!(initialize_template(&lm, &explicit, &opts).unwrap(), shape);
    let _: &Mesh = &template;
}
