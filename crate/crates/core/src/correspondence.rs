//! Closest-vertex correspondences from a (deformed) template onto a target
//! surface, with normal-angle and distance gating.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kdtree::SpatialIndex;
use crate::mesh::{Mesh, Vec3, VertexNormals};

/// Default normal gate: matches whose normals differ by more than this are
/// dropped.
pub const DEFAULT_MAX_NORMAL_ANGLE: f64 = PI / 4.0;

/// Default distance gate as a fraction of the target bounding-box diagonal.
pub const DEFAULT_MAX_DISTANCE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gating {
    /// Radians. `>= PI` disables the normal gate.
    pub max_normal_angle: f64,
    /// Model units. `f64::INFINITY` disables the distance gate.
    pub max_distance: f64,
}

impl Gating {
    pub fn disabled() -> Self {
        Self {
            max_normal_angle: PI,
            max_distance: f64::INFINITY,
        }
    }

    pub fn for_target(target: &Mesh, max_normal_angle: f64, distance_fraction: f64) -> Self {
        Self {
            max_normal_angle,
            max_distance: distance_fraction * target.bbox_diagonal(),
        }
    }
}

/// A target mesh with its normals and search index, built once per fit.
#[derive(Debug, Clone)]
pub struct TargetSurface {
    pub mesh: Mesh,
    pub normals: VertexNormals,
    pub index: SpatialIndex,
}

impl TargetSurface {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let normals = mesh.normals();
        let index = SpatialIndex::build(mesh.vertices())?;
        Ok(Self {
            mesh,
            normals,
            index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub target_index: usize,
    pub point: Vec3,
    pub weight: f64,
    pub distance: f64,
}

/// One entry per template vertex, in template order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.entries.iter().filter(|c| c.weight > 0.0).count()
    }

    /// Exact self-correspondences with unit weight (used where the target
    /// is the template itself).
    pub fn identity(points: &[Vec3]) -> Self {
        Self {
            entries: points
                .iter()
                .enumerate()
                .map(|(i, p)| Correspondence {
                    target_index: i,
                    point: *p,
                    weight: 1.0,
                    distance: 0.0,
                })
                .collect(),
        }
    }
}

/// Angle between two unit vectors, `None` when either is the zero vector.
fn normal_angle(a: &Vec3, b: &Vec3) -> Option<f64> {
    if a.norm_squared() == 0.0 || b.norm_squared() == 0.0 {
        return None;
    }
    Some(a.dot(b).clamp(-1.0, 1.0).acos())
}

/// For every template vertex, its nearest target vertex. The weight is 0
/// when the normal angle exceeds the gate (or a normal is undefined while
/// the gate is active) or the distance exceeds the distance gate, else 1.
pub fn find_correspondences(
    template: &Mesh,
    template_normals: &VertexNormals,
    target: &TargetSurface,
    gating: Gating,
) -> Result<CorrespondenceSet> {
    if template_normals.len() != template.vertex_count() {
        return Err(Error::MissingNormals("deformed template"));
    }
    if target.normals.len() != target.mesh.vertex_count() {
        return Err(Error::MissingNormals("target"));
    }
    let normal_gate = gating.max_normal_angle < PI;
    let entries = template
        .vertices()
        .par_iter()
        .zip(template_normals.normals.par_iter())
        .map(|(v, n)| {
            let hit = target.index.nearest(v);
            let mut keep = hit.distance <= gating.max_distance;
            if keep && normal_gate {
                keep = match normal_angle(n, &target.normals.normals[hit.index]) {
                    Some(angle) => angle <= gating.max_normal_angle,
                    None => false,
                };
            }
            Correspondence {
                target_index: hit.index,
                point: target.index.points()[hit.index],
                weight: if keep { 1.0 } else { 0.0 },
                distance: hit.distance,
            }
        })
        .collect();
    Ok(CorrespondenceSet { entries })
}
