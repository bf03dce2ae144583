//! Command-line front end. Numeric flags override the config file, which
//! overrides built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DVector, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::correspondence::TargetSurface;
use crate::error::{Error, Result};
use crate::evaluation::{dense_ground_truth_error, landmark_region_error};
use crate::io::{load_landmarks, load_mesh, save_landmarks, save_mesh, MeshFormat};
use crate::morphable::{
    build_synthetic_model, fit_to_landmarks, project_weak_perspective, FitParams, MorphableModel,
    SyntheticModelConfig, Vec2,
};
use crate::nicp::REPORT_HEADER;
use crate::pipeline::{
    import_trajectories, initialize_template, trajectories_to_bytes, trajectories_to_csv, PipelineConfig,
    TemplateSource, TrackResult, Tracker,
};
use crate::similarity::{rigid_icp_with_scale, SimilarityTransform};
use crate::synth::{farthest_point_sample, generate_sequence, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "meshtrack", version, about = "Dense tracking of deforming mesh sequences")]
pub struct Cli {
    /// TOML config file; see `CliConfig` for the sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence with ground truth and a matching model.
    Synth(SynthArgs),
    /// Similarity alignment of a template to a target using landmarks.
    Align(AlignArgs),
    /// Fit the morphable model to 2D landmarks.
    FitModel(FitModelArgs),
    /// Track a sequence listed in a manifest.
    Track(TrackArgs),
    /// Landmark-region error, or dense error against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Landmark JSON: template vertex index with target position.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// 2D landmark JSON: `[{"vertex": i, "position": [x, y]}, ...]`.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Explicit template mesh; overrides the manifest.
    #[arg(long, conflicts_with = "model")]
    pub template: Option<PathBuf>,
    /// Morphable model used to build the template from frame-1 landmarks.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Multiplies every motion weight; 0 disables the motion term.
    #[arg(long)]
    pub gamma_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires_all = ["target", "pairs"], conflicts_with_all = ["trajectories", "truth"])]
    pub fitted: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// JSON list of `[fitted_vertex, target_vertex]` pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub ring: Option<usize>,
    #[arg(long, requires = "truth")]
    pub trajectories: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config file layout: the pipeline sections plus generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub nicp: crate::nicp::NicpConfig,
    pub motion: crate::kalman::KalmanConfig,
    pub rigid: crate::similarity::RigidParams,
    pub model_fit: crate::morphable::FitOptions,
    pub ring: usize,
    pub synth: SynthConfig,
    pub model: SyntheticModelConfig,
    /// Landmarks exported for the model-fitting demo.
    pub model_landmarks: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            nicp: p.nicp,
            motion: p.motion,
            rigid: p.rigid,
            model_fit: p.model_fit,
            ring: p.ring,
            synth: SynthConfig::default(),
            model: SyntheticModelConfig::default(),
            model_landmarks: 100,
        }
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.pipeline().validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            nicp: self.nicp.clone(),
            motion: self.motion,
            rigid: self.rigid,
            model_fit: self.model_fit,
            ring: self.ring,
        }
    }
}

/// Sequence manifest. Relative paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frames: Vec<PathBuf>,
    pub landmarks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
        if m.frames.is_empty() {
            return Err(Error::Parse("manifest lists no frames".into()));
        }
        if m.frames.len() != m.landmarks.len() {
            return Err(Error::Parse(format!(
                "manifest lists {} frames but {} landmark files",
                m.frames.len(),
                m.landmarks.len()
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        m.frames.iter_mut().chain(m.landmarks.iter_mut()).for_each(resolve);
        m.template.iter_mut().chain(m.model.iter_mut()).for_each(resolve);
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl From<&SimilarityTransform> for TransformRecord {
    fn from(t: &SimilarityTransform) -> Self {
        let r = &t.rotation;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.translation.x, t.translation.y, t.translation.z],
            scale: t.scale,
        }
    }
}

impl From<&TransformRecord> for SimilarityTransform {
    fn from(t: &TransformRecord) -> Self {
        Self {
            rotation: nalgebra::Matrix3::from_fn(|i, j| t.rotation[i][j]),
            translation: t.translation.into(),
            scale: t.scale,
        }
    }
}

/// Model parameters as plain arrays; rotation is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub alpha_id: Vec<f64>,
    pub alpha_exp: Vec<f64>,
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&FitParams> for ParamsRecord {
    fn from(p: &FitParams) -> Self {
        let pose = TransformRecord::from(&SimilarityTransform {
            rotation: p.rotation,
            translation: p.translation,
            scale: p.scale,
        });
        Self {
            alpha_id: p.alpha_id.iter().copied().collect(),
            alpha_exp: p.alpha_exp.iter().copied().collect(),
            scale: p.scale,
            rotation: pose.rotation,
            translation: pose.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Landmark2d {
    vertex: usize,
    position: [f64; 2],
}

pub fn load_landmarks_2d(path: &Path) -> Result<Vec<(usize, Vec2)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let recs: Vec<Landmark2d> =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("2D landmarks: {e}")))?;
    Ok(recs.iter().map(|r| (r.vertex, Vec2::from(r.position))).collect())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    }
}

struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn dispatch(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be at least 1".into()).into());
        }
        // Fails only if a pool already exists (tests calling `run` twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = match &cli.config {
        Some(p) => CliConfig::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => CliConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(config, a),
        Command::Align(a) => align(config, a),
        Command::FitModel(a) => fit_model(config, a),
        Command::Track(a) => track(config, a),
        Command::Eval(a) => eval(config, a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn frame_name(k: usize, ext: &str) -> String {
    format!("frame_{k:03}.{ext}")
}

fn synth(mut config: CliConfig, args: SynthArgs) -> CliResult {
    if let Some(seed) = args.seed {
        config.synth.seed = seed;
        config.model.seed = seed;
    }
    let seq = generate_sequence(&config.synth)?;
    let model = build_synthetic_model(&seq.base, &config.model)?;
    let model_indices = farthest_point_sample(seq.base.vertices(), config.model_landmarks)?;
    let truth_params = random_model_params(&model, config.synth.seed);
    let shape = model.synthesize(&truth_params.alpha_id, &truth_params.alpha_exp)?;
    let points: Vec<_> = model_indices.iter().map(|&i| shape.vertices()[i]).collect();
    let projected = project_weak_perspective(&points, &truth_params);

    let out = &args.out;
    for sub in ["frames", "landmarks", "model"] {
        create_dir(&out.join(sub))?;
    }
    let mut manifest = Manifest {
        frames: Vec::new(),
        landmarks: Vec::new(),
        template: Some("template.ply".into()),
        model: Some("model/model.bin".into()),
    };
    for (k, (frame, lm)) in seq.frames.iter().zip(&seq.landmarks).enumerate() {
        let f = PathBuf::from("frames").join(frame_name(k, "ply"));
        let l = PathBuf::from("landmarks").join(frame_name(k, "json"));
        save_mesh(frame, out.join(&f), MeshFormat::PlyBinary)?;
        save_landmarks(lm, out.join(&l))?;
        manifest.frames.push(f);
        manifest.landmarks.push(l);
    }
    save_mesh(&seq.base, out.join("template.ply"), MeshFormat::PlyBinary)?;
    write(&out.join("manifest.json"), json(&manifest))?;
    write(&out.join("truth.traj"), trajectories_to_bytes(&seq.truth)?)?;
    let transforms: Vec<TransformRecord> = seq.transforms.iter().map(Into::into).collect();
    write(&out.join("transforms.json"), json(&transforms))?;
    write(&out.join("synth.toml"), toml::to_string(&config.synth).expect("serializable"))?;

    model.save(out.join("model/model.bin"))?;
    let recs: Vec<Landmark2d> = model_indices
        .iter()
        .zip(&projected)
        .map(|(&vertex, p)| Landmark2d {
            vertex,
            position: [p.x, p.y],
        })
        .collect();
    write(&out.join("model/landmarks2d.json"), json(&recs))?;
    write(&out.join("model/params.json"), json(&ParamsRecord::from(&truth_params)))?;
    println!(
        "wrote {} frames ({} vertices, {} landmarks) to {}",
        seq.frames.len(),
        seq.base.vertex_count(),
        seq.landmark_indices.len(),
        out.display()
    );
    Ok(())
}

/// Coefficients within one standard deviation and a moderate pose, drawn
/// from a stream separate from the frame noise.
fn random_model_params(model: &MorphableModel, seed: u64) -> FitParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut coeffs = |std: &DVector<f64>| {
        DVector::from_fn(std.len(), |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z * std[i]
        })
    };
    let alpha_id = coeffs(model.std_id());
    let alpha_exp = coeffs(model.std_exp());
    let angles: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
    FitParams {
        alpha_id,
        alpha_exp,
        scale: rng.random_range(0.5..2.0),
        rotation: *Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).matrix(),
        translation: [0, 1, 2].map(|_| rng.random_range(-0.5..0.5)).into(),
    }
    .canonical()
}

fn align(config: CliConfig, args: AlignArgs) -> CliResult {
    let template = load_mesh(&args.template)?;
    let target = load_mesh(&args.target)?;
    let landmarks = load_landmarks(&args.landmarks)?;
    let fit = rigid_icp_with_scale(&template, &TargetSurface::new(target)?, &landmarks, &config.rigid)?;
    let record = TransformRecord::from(&fit.transform);
    print!("{}", json(&record));
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("transform.json"), json(&record))?;
        save_mesh(&fit.transform.apply_mesh(&template), out.join("aligned.ply"), MeshFormat::PlyBinary)?;
    }
    Ok(())
}

fn fit_model(config: CliConfig, args: FitModelArgs) -> CliResult {
    let model = MorphableModel::load(&args.model)?;
    let landmarks = load_landmarks_2d(&args.landmarks)?;
    let fit = fit_to_landmarks(&model, &landmarks, &config.model_fit)?;
    let shape = model.synthesize(&fit.params.alpha_id, &fit.params.alpha_exp)?;
    create_dir(&args.out)?;
    write(&args.out.join("params.json"), json(&ParamsRecord::from(&fit.params)))?;
    save_mesh(&shape, args.out.join("fitted.ply"), MeshFormat::PlyBinary)?;
    println!(
        "fitted {} landmarks: residual {:.6e} after {} objective evaluations",
        landmarks.len(),
        fit.residual,
        fit.objective_history.len()
    );
    Ok(())
}

fn track(mut config: CliConfig, args: TrackArgs) -> CliResult {
    if let Some(g) = args.gamma_scale {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::InvalidParameter(format!("--gamma-scale {g} must be finite and non-negative")).into());
        }
        config.nicp = config.nicp.with_motion_scale(g);
    }
    let pipeline = config.pipeline();
    pipeline.validate()?;
    // Every input is read and checked before anything is written.
    let manifest = Manifest::load(&args.manifest)?;
    let frames = manifest.frames.iter().map(load_mesh).collect::<Result<Vec<_>>>()?;
    let landmarks = manifest.landmarks.iter().map(load_landmarks).collect::<Result<Vec<_>>>()?;
    let source = match (&args.template, &args.model, &manifest.template, &manifest.model) {
        (Some(t), _, _, _) => TemplateSource::Explicit(load_mesh(t)?),
        (None, Some(m), _, _) => TemplateSource::Model(MorphableModel::load(m)?),
        (None, None, Some(t), _) => TemplateSource::Explicit(load_mesh(t)?),
        (None, None, None, Some(m)) => TemplateSource::Model(MorphableModel::load(m)?),
        _ => {
            return Err(Error::InvalidParameter(
                "no template: pass --template or --model, or list one in the manifest".into(),
            )
            .into())
        }
    };
    let template = initialize_template(&landmarks[0], &source, &config.model_fit)?;
    for (k, lm) in landmarks.iter().enumerate() {
        lm.validate(template.vertex_count()).map_err(|e| Failure {
            code: EXIT_VALIDATION,
            message: format!("landmarks for frame {k}: {e}"),
        })?;
    }

    let mut tracker = Tracker::new(template, pipeline.clone())?;
    let mut failure = None;
    for (k, (frame, lm)) in frames.iter().zip(&landmarks).enumerate() {
        log::info!("tracking frame {}/{}", k + 1, frames.len());
        if let Err(e) = tracker.step(frame, lm) {
            failure = Some(e);
            break;
        }
    }
    let result = tracker.into_result();
    if !result.fitted.is_empty() {
        write_track_outputs(&args.out, &pipeline, &result)?;
    }
    match failure {
        None => {
            println!("tracked {} frames into {}", result.frame_count(), args.out.display());
            Ok(())
        }
        Some(e) => Err(Failure {
            code: exit_code(&e.source),
            message: format!("{e} ({} frames written before the failure)", result.frame_count()),
        }),
    }
}

fn write_track_outputs(out: &Path, config: &PipelineConfig, result: &TrackResult) -> Result<()> {
    create_dir(&out.join("fitted"))?;
    for (k, m) in result.fitted.iter().enumerate() {
        save_mesh(m, out.join("fitted").join(frame_name(k, "ply")), MeshFormat::PlyBinary)?;
    }
    let traj = result.trajectories();
    write(&out.join("trajectories.traj"), trajectories_to_bytes(&traj)?)?;
    write(&out.join("trajectories.csv"), trajectories_to_csv(&traj))?;
    let mut report = format!("frame,{REPORT_HEADER}\n");
    for r in &result.reports {
        for e in &r.energy {
            let t = &e.terms;
            report.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.frame, e.ladder_step, e.inner_iter, t.data, t.stiffness, t.landmark, t.motion, t.total
            ));
        }
    }
    write(&out.join("report.csv"), report)?;
    let mut frames = String::from("frame,rigid_iterations,rigid_converged,motion_active,capped_steps\n");
    for r in &result.reports {
        let caps: Vec<String> = r.capped_steps.iter().map(|s| s.to_string()).collect();
        frames.push_str(&format!(
            "{},{},{},{},{}\n",
            r.frame,
            r.rigid_iterations,
            r.rigid_converged,
            r.motion_active,
            caps.join(" ")
        ));
    }
    write(&out.join("frames.csv"), frames)?;
    #[derive(Serialize)]
    struct Transforms {
        rigid: Vec<TransformRecord>,
        normalization: Vec<TransformRecord>,
    }
    let transforms = Transforms {
        rigid: result.rigid.iter().map(Into::into).collect(),
        normalization: result.normalization.iter().map(Into::into).collect(),
    };
    write(&out.join("transforms.json"), json(&transforms))?;
    write(&out.join("config.toml"), config.to_toml())
}

fn eval(config: CliConfig, args: EvalArgs) -> CliResult {
    let ring = args.ring.unwrap_or(config.ring);
    match (&args.fitted, &args.trajectories) {
        (Some(fitted), None) => {
            let fitted = load_mesh(fitted)?;
            let target = load_mesh(args.target.as_ref().expect("required by clap"))?;
            let pairs_path = args.pairs.as_ref().expect("required by clap");
            let text = fs::read_to_string(pairs_path).map_err(|e| Error::io(pairs_path, e))?;
            let pairs: Vec<(usize, usize)> =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("pairs: {e}")))?;
            let report = landmark_region_error(&fitted, &target, &pairs, ring)?;
            print!("{}", report.summary_table());
            if let Some(out) = &args.out {
                create_dir(out)?;
                write(&out.join("region_error.csv"), report.to_csv())?;
                write(&out.join("region_error.json"), json(&report))?;
            }
        }
        (None, Some(traj)) => {
            let fitted = import_trajectories(traj)?;
            let truth = import_trajectories(args.truth.as_ref().expect("required by clap"))?;
            let report = dense_ground_truth_error(&fitted, &truth)?;
            println!("{:<8} {:>14} {:>14}", "frame", "mean", "max");
            for (k, f) in report.frames.iter().enumerate() {
                println!("{k:<8} {:>14.6e} {:>14.6e}", f.mean, f.max);
            }
            println!("{:<8} {:>14.6e} {:>14.6e}", "all", report.mean, report.max);
            if let Some(out) = &args.out {
                create_dir(out)?;
                write(&out.join("dense_error.json"), json(&report))?;
            }
        }
        _ => {
            return Err(Error::InvalidParameter(
                "eval needs --fitted/--target/--pairs or --trajectories/--truth".into(),
            )
            .into())
        }
    }
    Ok(())
}
