//! Sequence tracking: the template is carried from frame to frame through
//! normalization, similarity pre-alignment, motion prediction and non-rigid
//! refinement.
//!
//! Coordinates: each target is rescaled into the unit cube and fitted there.
//! Fitted frames, trajectories and the filter bank live in the original
//! scanner coordinates; the next template stays in the normalized frame of
//! the previous target.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{ByteReader, ByteWriter};
use crate::correspondence::TargetSurface;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_RING;
use crate::kalman::{FilterBank, KalmanConfig};
use crate::mesh::{LandmarkSet, Mesh, Vec3};
use crate::morphable::{fit_to_landmarks, FitOptions, MorphableModel, Vec2};
use crate::nicp::{self, EnergyRecord, EnergyTerms, NicpConfig};
use crate::similarity::{rescale_to_unit_cube, rigid_icp_with_scale, RigidParams, SimilarityTransform};

/// Everything a tracking run needs. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub nicp: NicpConfig,
    pub motion: KalmanConfig,
    pub rigid: RigidParams,
    pub model_fit: FitOptions,
    /// Ring size for landmark-region evaluation.
    pub ring: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nicp: NicpConfig::default(),
            motion: KalmanConfig::default(),
            rigid: RigidParams::default(),
            model_fit: FitOptions::default(),
            ring: DEFAULT_RING,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.nicp.validate()?;
        self.motion.validate()?;
        if !(self.rigid.tol > 0.0) {
            return Err(Error::InvalidParameter("rigid tolerance must be positive".into()));
        }
        if !(self.model_fit.reg_id >= 0.0 && self.model_fit.reg_exp >= 0.0) {
            return Err(Error::InvalidParameter("model ridge weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Where the frame-1 template comes from.
#[derive(Debug, Clone)]
pub enum TemplateSource {
    Explicit(Mesh),
    /// Fit the model to the orthographic (x, y) projection of the frame-1
    /// landmarks; landmark indices are model vertex indices.
    Model(MorphableModel),
}

/// Builds the tracking template. The model path returns the fitted shape in
/// model coordinates; pose is left to the per-frame similarity alignment.
pub fn initialize_template(
    first_landmarks: &LandmarkSet,
    source: &TemplateSource,
    opts: &FitOptions,
) -> Result<Mesh> {
    match source {
        TemplateSource::Explicit(mesh) => {
            first_landmarks.validate(mesh.vertex_count())?;
            Ok(mesh.clone())
        }
        TemplateSource::Model(model) => {
            let observed: Vec<(usize, Vec2)> = first_landmarks
                .entries
                .iter()
                .map(|(i, p)| (*i, Vec2::new(p.x, p.y)))
                .collect();
            let fit = fit_to_landmarks(model, &observed, opts)?;
            model.synthesize(&fit.params.alpha_id, &fit.params.alpha_exp)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Input,
    Normalize,
    Rigid,
    Predict,
    Nonrigid,
    Observe,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Input => "input",
            Stage::Normalize => "normalize",
            Stage::Rigid => "rigid alignment",
            Stage::Predict => "motion prediction",
            Stage::Nonrigid => "non-rigid fit",
            Stage::Observe => "filter update",
        };
        f.write_str(s)
    }
}

/// A pipeline failure tagged with the 0-based frame and stage.
#[derive(Debug, thiserror::Error)]
#[error("frame {frame}, {stage}: {source}")]
pub struct TrackError {
    pub frame: usize,
    pub stage: Stage,
    #[source]
    pub source: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    pub rigid_iterations: usize,
    pub rigid_converged: bool,
    pub motion_active: bool,
    pub energy: Vec<EnergyRecord>,
    /// Ladder steps that stopped at the inner iteration cap.
    pub capped_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// Fitted frames in original coordinates, all with the template topology.
    pub fitted: Vec<Mesh>,
    /// Template-to-normalized-target similarity found by the rigid stage.
    pub rigid: Vec<SimilarityTransform>,
    /// Original-to-normalized transform of each target.
    pub normalization: Vec<SimilarityTransform>,
    pub reports: Vec<FrameReport>,
}

impl TrackResult {
    fn empty() -> Self {
        Self {
            fitted: Vec::new(),
            rigid: Vec::new(),
            normalization: Vec::new(),
            reports: Vec::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.fitted.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.fitted.first().map_or(0, Mesh::vertex_count)
    }

    /// Per-frame vertex positions, frame-major: `[k][i]` is vertex `i` of
    /// fitted frame `k`.
    pub fn trajectories(&self) -> Vec<Vec<Vec3>> {
        self.fitted.iter().map(|m| m.vertices().to_vec()).collect()
    }

    /// Path of one vertex through the sequence.
    pub fn trajectory(&self, vertex: usize) -> Vec<Vec3> {
        self.fitted.iter().map(|m| m.vertices()[vertex]).collect()
    }
}

/// The sequence fails at `error`; `partial` holds every frame before it.
#[derive(Debug)]
pub struct TrackFailure {
    pub partial: TrackResult,
    pub error: TrackError,
}

/// Frame-by-frame tracker. State between frames is the template, the filter
/// bank and the accumulated result, all of which survive a checkpoint.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: PipelineConfig,
    template: Mesh,
    bank: FilterBank,
    result: TrackResult,
}

impl Tracker {
    pub fn new(template: Mesh, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if template.vertex_count() == 0 {
            return Err(Error::Insufficient("empty template".into()));
        }
        let bank = FilterBank::new(template.vertex_count(), config.motion)?;
        Ok(Self {
            config,
            template,
            bank,
            result: TrackResult::empty(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn frames_done(&self) -> usize {
        self.result.fitted.len()
    }

    pub fn result(&self) -> &TrackResult {
        &self.result
    }

    pub fn into_result(self) -> TrackResult {
        self.result
    }

    /// Fits the next frame. On error the tracker is left unchanged.
    pub fn step(&mut self, target: &Mesh, landmarks: &LandmarkSet) -> std::result::Result<(), TrackError> {
        let frame = self.frames_done();
        let tag = |stage| move |source| TrackError { frame, stage, source };

        if landmarks.is_empty() {
            return Err(tag(Stage::Input)(Error::Insufficient("frame has no landmarks".into())));
        }
        landmarks.validate(self.template.vertex_count()).map_err(tag(Stage::Input))?;

        let (normalized, norm) = rescale_to_unit_cube(target).map_err(tag(Stage::Normalize))?;
        let surface = TargetSurface::new(normalized).map_err(tag(Stage::Normalize))?;
        let landmarks_n = landmarks.map_positions(|p| norm.apply(p));

        let rigid = rigid_icp_with_scale(&self.template, &surface, &landmarks_n, &self.config.rigid)
            .map_err(tag(Stage::Rigid))?;
        let aligned = rigid.transform.apply_mesh(&self.template);

        // Two observations are needed before a velocity exists.
        let predictions = if self.bank.frames_observed() >= 2 {
            let p = self.bank.predict().map_err(tag(Stage::Predict))?;
            Some(norm.apply_all(&p))
        } else {
            None
        };

        let fit = nicp::fit(
            &aligned,
            &surface,
            &landmarks_n,
            predictions.as_deref(),
            &self.config.nicp,
        )
        .map_err(tag(Stage::Nonrigid))?;
        if !fit.converged() {
            log::warn!("frame {frame}: ladder steps {:?} hit the iteration cap", fit.capped_steps);
        }

        let back = norm.inverse();
        let fitted = back.apply_mesh(&fit.deformed);
        let mut bank = self.bank.clone();
        bank.observe(fitted.vertices()).map_err(tag(Stage::Observe))?;

        self.bank = bank;
        self.template = fit.deformed;
        self.result.fitted.push(fitted);
        self.result.rigid.push(rigid.transform);
        self.result.normalization.push(norm);
        self.result.reports.push(FrameReport {
            frame,
            rigid_iterations: rigid.iterations,
            rigid_converged: rigid.converged,
            motion_active: predictions.is_some(),
            energy: fit.report,
            capped_steps: fit.capped_steps,
        });
        Ok(())
    }

    /// Serializes the full tracker state; [`Tracker::resume`] continues
    /// bit-identically.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        w.usize(cfg.len());
        w.bytes(&cfg);
        write_mesh(&mut w, &self.template);
        let bank = self.bank.to_bytes();
        w.usize(bank.len());
        w.bytes(&bank);
        let r = &self.result;
        w.usize(r.fitted.len());
        for k in 0..r.fitted.len() {
            w.f64s(r.fitted[k].vertices().iter().flat_map(|v| [v.x, v.y, v.z]));
            write_similarity(&mut w, &r.rigid[k]);
            write_similarity(&mut w, &r.normalization[k]);
            write_report(&mut w, &r.reports[k]);
        }
        w.into_inner()
    }

    pub fn resume(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let len = r.usize()?;
        let config: PipelineConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
        let template = read_mesh(&mut r)?;
        let len = r.usize()?;
        let bank = FilterBank::from_bytes(r.take(len)?)?;
        if bank.len() != template.vertex_count() {
            return Err(Error::Parse("checkpoint filter bank does not match template".into()));
        }
        let frames = r.usize()?;
        let mut result = TrackResult::empty();
        let n = template.vertex_count();
        for _ in 0..frames {
            let coords = r.f64s(3 * n)?;
            let verts = coords.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            result.fitted.push(template.with_vertices(verts)?);
            result.rigid.push(read_similarity(&mut r)?);
            result.normalization.push(read_similarity(&mut r)?);
            result.reports.push(read_report(&mut r)?);
        }
        r.finish()?;
        let mut tracker = Tracker::new(template, config)?;
        tracker.bank = bank;
        tracker.result = result;
        Ok(tracker)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
const CHECKPOINT_VERSION: u32 = 1;

fn write_mesh(w: &mut ByteWriter, m: &Mesh) {
    w.usize(m.vertex_count());
    w.f64s(m.vertices().iter().flat_map(|v| [v.x, v.y, v.z]));
    w.usize(m.triangle_count());
    for t in m.triangles() {
        for &i in t {
            w.usize(i);
        }
    }
}

fn read_mesh(r: &mut ByteReader) -> Result<Mesh> {
    let n = r.usize()?;
    let coords = r.f64s(n.checked_mul(3).ok_or_else(|| Error::Parse("mesh size overflow".into()))?)?;
    let t = r.usize()?;
    if t.saturating_mul(24) > r.remaining() {
        return Err(Error::Parse("truncated triangle list".into()));
    }
    let mut tris = Vec::with_capacity(t);
    for _ in 0..t {
        tris.push([r.usize()?, r.usize()?, r.usize()?]);
    }
    Mesh::new(coords.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(), tris)
}

fn write_similarity(w: &mut ByteWriter, s: &SimilarityTransform) {
    w.f64s(s.rotation.iter().copied());
    w.f64s(s.translation.iter().copied());
    w.f64(s.scale);
}

fn read_similarity(r: &mut ByteReader) -> Result<SimilarityTransform> {
    let v = r.f64s(13)?;
    Ok(SimilarityTransform {
        rotation: nalgebra::Matrix3::from_column_slice(&v[..9]),
        translation: Vec3::new(v[9], v[10], v[11]),
        scale: v[12],
    })
}

fn write_report(w: &mut ByteWriter, rep: &FrameReport) {
    w.usize(rep.frame);
    w.usize(rep.rigid_iterations);
    w.u32(rep.rigid_converged as u32);
    w.u32(rep.motion_active as u32);
    w.usize(rep.energy.len());
    for e in &rep.energy {
        w.usize(e.ladder_step);
        w.usize(e.inner_iter);
        let t = &e.terms;
        w.f64s([t.data, t.stiffness, t.landmark, t.motion, t.total, e.change]);
    }
    w.usize(rep.capped_steps.len());
    for &s in &rep.capped_steps {
        w.usize(s);
    }
}

fn read_bool(r: &mut ByteReader) -> Result<bool> {
    match r.u32()? {
        0 => Ok(false),
        1 => Ok(true),
        x => Err(Error::Parse(format!("bad flag {x} in checkpoint"))),
    }
}

fn read_report(r: &mut ByteReader) -> Result<FrameReport> {
    let frame = r.usize()?;
    let rigid_iterations = r.usize()?;
    let rigid_converged = read_bool(r)?;
    let motion_active = read_bool(r)?;
    let count = r.usize()?;
    if count.saturating_mul(64) > r.remaining() {
        return Err(Error::Parse("truncated energy report".into()));
    }
    let mut energy = Vec::with_capacity(count);
    for _ in 0..count {
        let ladder_step = r.usize()?;
        let inner_iter = r.usize()?;
        let v = r.f64s(6)?;
        energy.push(EnergyRecord {
            ladder_step,
            inner_iter,
            terms: EnergyTerms {
                data: v[0],
                stiffness: v[1],
                landmark: v[2],
                motion: v[3],
                total: v[4],
            },
            change: v[5],
        });
    }
    let caps = r.usize()?;
    if caps.saturating_mul(8) > r.remaining() {
        return Err(Error::Parse("truncated step list".into()));
    }
    let capped_steps = (0..caps).map(|_| r.usize()).collect::<Result<_>>()?;
    Ok(FrameReport {
        frame,
        rigid_iterations,
        rigid_converged,
        motion_active,
        energy,
        capped_steps,
    })
}

/// Tracks a whole in-memory sequence. On failure the frames fitted so far
/// come back with the tagged error.
pub fn track_sequence(
    frames: &[Mesh],
    landmarks: &[LandmarkSet],
    template: Mesh,
    config: &PipelineConfig,
) -> std::result::Result<TrackResult, Box<TrackFailure>> {
    let input_error = |source| {
        Box::new(TrackFailure {
            partial: TrackResult::empty(),
            error: TrackError {
                frame: 0,
                stage: Stage::Input,
                source,
            },
        })
    };
    if frames.is_empty() {
        return Err(input_error(Error::Insufficient("sequence has no frames".into())));
    }
    if frames.len() != landmarks.len() {
        return Err(input_error(Error::DimensionMismatch(format!(
            "{} frames but {} landmark sets",
            frames.len(),
            landmarks.len()
        ))));
    }
    let mut tracker = Tracker::new(template, config.clone()).map_err(input_error)?;
    for (frame, lm) in frames.iter().zip(landmarks) {
        if let Err(error) = tracker.step(frame, lm) {
            return Err(Box::new(TrackFailure {
                partial: tracker.into_result(),
                error,
            }));
        }
    }
    Ok(tracker.into_result())
}

const TRAJ_MAGIC: &[u8; 4] = b"TRAJ";
const TRAJ_VERSION: u32 = 1;

/// Container: magic `TRAJ`, u32 version, u64 vertex count, u64 frame count,
/// then `F x n x 3` doubles, frame-major.
pub fn trajectories_to_bytes(frames: &[Vec<Vec3>]) -> Result<Vec<u8>> {
    let n = frames.first().map_or(0, Vec::len);
    if frames.is_empty() || n == 0 {
        return Err(Error::Insufficient("no trajectories to export".into()));
    }
    if let Some(k) = frames.iter().position(|f| f.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "frame {k} has {} vertices, expected {n}",
            frames[k].len()
        )));
    }
    let mut w = ByteWriter::new();
    w.bytes(TRAJ_MAGIC);
    w.u32(TRAJ_VERSION);
    w.usize(n);
    w.usize(frames.len());
    for f in frames {
        w.f64s(f.iter().flat_map(|v| [v.x, v.y, v.z]));
    }
    Ok(w.into_inner())
}

pub fn trajectories_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<Vec3>>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(TRAJ_MAGIC)?;
    let version = r.u32()?;
    if version != TRAJ_VERSION {
        return Err(Error::Parse(format!("unsupported trajectory version {version}")));
    }
    let n = r.usize()?;
    let f = r.usize()?;
    let count = n
        .checked_mul(f)
        .and_then(|c| c.checked_mul(3))
        .ok_or_else(|| Error::Parse("trajectory size overflow".into()))?;
    let data = r.f64s(count)?;
    r.finish()?;
    if n == 0 {
        return Ok(vec![Vec::new(); f]);
    }
    Ok(data
        .chunks_exact(3 * n)
        .map(|frame| frame.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
        .collect())
}

pub fn trajectories_to_csv(frames: &[Vec<Vec3>]) -> String {
    let mut out = String::from("frame,vertex,x,y,z\n");
    for (k, f) in frames.iter().enumerate() {
        for (i, v) in f.iter().enumerate() {
            // `{:?}` prints the shortest round-tripping decimal.
            out.push_str(&format!("{k},{i},{:?},{:?},{:?}\n", v.x, v.y, v.z));
        }
    }
    out
}

pub fn trajectories_from_csv(text: &str) -> Result<Vec<Vec<Vec3>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("frame,vertex,x,y,z") {
        return Err(Error::Parse("missing trajectory CSV header".into()));
    }
    let mut frames: Vec<Vec<Vec3>> = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Parse(format!("trajectory CSV line {}: {line:?}", ln + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad());
        }
        let k: usize = cols[0].trim().parse().map_err(|_| bad())?;
        let i: usize = cols[1].trim().parse().map_err(|_| bad())?;
        let mut p = [0.0; 3];
        for (d, c) in p.iter_mut().zip(&cols[2..]) {
            *d = c.trim().parse().map_err(|_| bad())?;
        }
        // Records must arrive frame-major and in vertex order.
        if k == frames.len() && i == 0 {
            frames.push(Vec::new());
        }
        let count = frames.len();
        match frames.last_mut() {
            Some(f) if k + 1 == count && i == f.len() => f.push(Vec3::new(p[0], p[1], p[2])),
            _ => return Err(bad()),
        }
    }
    Ok(frames)
}

/// Writes `result` as a binary container at `path`.
pub fn export_trajectories(result: &TrackResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = trajectories_to_bytes(&result.trajectories())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn import_trajectories(path: impl AsRef<Path>) -> Result<Vec<Vec<Vec3>>> {
    let path = path.as_ref();
    trajectories_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
