//! Registration quality: landmark-region geometry differences between a
//! fitted mesh and its target, and dense error against known ground truth.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{n_ring_with_adjacency, Mesh, Vec3};

pub const DEFAULT_RING: usize = 2;

/// Per-pair breakdown. `normal_error` is `None` when either region's mean
/// normal vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairError {
    pub pair: usize,
    pub fitted_vertex: usize,
    pub target_vertex: usize,
    pub coord_error: f64,
    pub normal_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionErrorReport {
    pub ring: usize,
    pub mean_coord_error: f64,
    /// Mean over pairs with a defined normal error; `None` if there are none.
    pub mean_normal_error: Option<f64>,
    pub pairs: Vec<PairError>,
}

pub const REGION_CSV_HEADER: &str = "pair,fitted_vertex,target_vertex,coord_error,normal_error";

impl RegionErrorReport {
    /// One row per pair; an undefined normal error is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REGION_CSV_HEADER}\n");
        for p in &self.pairs {
            let normal = p.normal_error.map(|e| format!("{e:e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:e},{}\n",
                p.pair, p.fitted_vertex, p.target_vertex, p.coord_error, normal
            ));
        }
        out
    }

    /// Two-column summary: coordinates and normals.
    pub fn summary_table(&self) -> String {
        let normal = self
            .mean_normal_error
            .map(|e| format!("{e:.6}"))
            .unwrap_or_else(|| "n/a".into());
        let flagged = self.pairs.iter().filter(|p| p.normal_error.is_none()).count();
        let mut s = format!(
            "{:<10} {:>14} {:>14}\n{:<10} {:>14.6e} {:>14}\n",
            "ring", "coords", "normals (rad)", self.ring, self.mean_coord_error, normal
        );
        if flagged > 0 {
            s.push_str(&format!("{flagged} pair(s) with degenerate region normals excluded from the normal mean\n"));
        }
        s
    }
}

struct Region {
    sum: Vec3,
    count: usize,
    normal: Vec3,
}

fn region(mesh: &Mesh, adjacency: &[Vec<usize>], normals: &[Vec3], seed: usize, ring: usize) -> Result<Region> {
    let members = n_ring_with_adjacency(adjacency, seed, ring)?;
    let mut sum = Vec3::zeros();
    let mut normal = Vec3::zeros();
    for &v in &members {
        sum += mesh.vertices()[v];
        normal += normals[v];
    }
    Ok(Region {
        sum,
        count: members.len(),
        normal,
    })
}

/// Distance between two region means. With equal region sizes the sums
/// are subtracted before dividing, which keeps translations exact.
fn mean_distance(a: &Region, b: &Region) -> f64 {
    if a.count == b.count {
        ((a.sum - b.sum) / a.count as f64).norm()
    } else {
        (a.sum / a.count as f64 - b.sum / b.count as f64).norm()
    }
}

fn angle(a: &Vec3, b: &Vec3) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na <= f64::EPSILON || nb <= f64::EPSILON {
        return None;
    }
    let (ua, ub) = (a / na, b / nb);
    // atan2 form is accurate near 0 and π.
    Some(ua.cross(&ub).norm().atan2(ua.dot(&ub)))
}

/// Mean over `pairs` of the distance between region-mean positions and the
/// angle between renormalised region-mean normals, regions being `ring`-
/// rings around each vertex.
pub fn landmark_region_error(
    fitted: &Mesh,
    target: &Mesh,
    pairs: &[(usize, usize)],
    ring: usize,
) -> Result<RegionErrorReport> {
    if pairs.is_empty() {
        return Err(Error::Insufficient("no landmark pairs to evaluate".into()));
    }
    let (fa, ta) = (fitted.adjacency(), target.adjacency());
    let (fnorm, tnorm) = (fitted.normals().normals, target.normals().normals);
    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(fv, tv)) in pairs.iter().enumerate() {
        let a = region(fitted, &fa, &fnorm, fv, ring)?;
        let b = region(target, &ta, &tnorm, tv, ring)?;
        out.push(PairError {
            pair: k,
            fitted_vertex: fv,
            target_vertex: tv,
            coord_error: mean_distance(&a, &b),
            normal_error: angle(&a.normal, &b.normal),
        });
    }
    let mean_coord_error = out.iter().map(|p| p.coord_error).sum::<f64>() / out.len() as f64;
    let normals: Vec<f64> = out.iter().filter_map(|p| p.normal_error).collect();
    let mean_normal_error =
        (!normals.is_empty()).then(|| normals.iter().sum::<f64>() / normals.len() as f64);
    Ok(RegionErrorReport {
        ring,
        mean_coord_error,
        mean_normal_error,
        pairs: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameError {
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenseErrorReport {
    pub frames: Vec<FrameError>,
    /// Mean over every vertex of every frame.
    pub mean: f64,
    pub max: f64,
}

/// Per-vertex Euclidean error of fitted positions against ground truth,
/// frame by frame.
pub fn dense_ground_truth_error(fitted: &[Vec<Vec3>], truth: &[Vec<Vec3>]) -> Result<DenseErrorReport> {
    if fitted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fitted frames vs {} truth frames",
            fitted.len(),
            truth.len()
        )));
    }
    if fitted.is_empty() {
        return Err(Error::Insufficient("no frames to evaluate".into()));
    }
    let mut frames = Vec::with_capacity(fitted.len());
    let (mut total, mut count, mut max) = (0.0, 0usize, 0.0f64);
    for (k, (f, t)) in fitted.iter().zip(truth).enumerate() {
        if f.len() != t.len() || f.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "frame {k}: {} fitted vs {} truth vertices",
                f.len(),
                t.len()
            )));
        }
        let errs = f.iter().zip(t).map(|(a, b)| (a - b).norm());
        let (sum, fmax) = errs.fold((0.0, 0.0f64), |(s, m), e| (s + e, m.max(e)));
        frames.push(FrameError {
            mean: sum / f.len() as f64,
            max: fmax,
        });
        total += sum;
        count += f.len();
        max = max.max(fmax);
    }
    Ok(DenseErrorReport {
        frames,
        mean: total / count as f64,
        max,
    })
}
