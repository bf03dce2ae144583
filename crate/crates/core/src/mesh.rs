//! Triangle meshes and the derived quantities the registration code needs:
//! vertex normals, the undirected edge list and graph rings.
//!
//! Vertex order is the correspondence identity across a tracked sequence, so
//! nothing in this module reorders vertices. The one exception is
//! [`largest_component`], which compacts a target scan and returns the index
//! map it applied.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// An indexed triangle mesh. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    /// Builds a mesh, rejecting out-of-range or repeated triangle indices.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, len: n });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::DegenerateTriangle(t));
            }
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Same topology, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            triangles: self.triangles.clone(),
        })
    }

    /// Axis-aligned bounding box `(min, max)`. `None` for an empty mesh.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bounding_box()
            .map(|(lo, hi)| (hi - lo).norm())
            .unwrap_or(0.0)
    }

    pub fn normals(&self) -> VertexNormals {
        compute_vertex_normals(self)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        build_edge_list(self)
    }

    /// Sorted neighbor lists of the edge graph.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (i, j) in build_edge_list(self) {
            adj[i].push(j);
            adj[j].push(i);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

/// Per-vertex unit normals. Vertices with no incident area get the zero
/// vector and `isolated[i] == true`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexNormals {
    pub normals: Vec<Vec3>,
    pub isolated: Vec<bool>,
}

impl VertexNormals {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }
}

/// Area-weighted average of incident face normals, renormalized.
pub fn compute_vertex_normals(mesh: &Mesh) -> VertexNormals {
    let mut acc = vec![Vec3::zeros(); mesh.vertex_count()];
    for tri in mesh.triangles() {
        let [a, b, c] = tri.map(|i| mesh.vertices[i]);
        // Cross product length is twice the area: area weighting for free.
        let face = (b - a).cross(&(c - a));
        for &i in tri {
            acc[i] += face;
        }
    }
    let mut isolated = vec![false; acc.len()];
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > f64::MIN_POSITIVE && len.is_finite() {
                n / len
            } else {
                isolated[i] = true;
                Vec3::zeros()
            }
        })
        .collect();
    VertexNormals { normals, isolated }
}

/// Undirected edges `(i, j)` with `i < j`, each once, sorted.
pub fn build_edge_list(mesh: &Mesh) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = mesh
        .triangles()
        .iter()
        .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
        .map(|(i, j)| if i < j { (i, j) } else { (j, i) })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// All vertices within graph distance `rings` of `seed`, seed included.
pub fn n_ring(mesh: &Mesh, seed: usize, rings: usize) -> Result<BTreeSet<usize>> {
    n_ring_with_adjacency(&mesh.adjacency(), seed, rings)
}

/// [`n_ring`] over a precomputed adjacency, for repeated queries.
pub fn n_ring_with_adjacency(
    adjacency: &[Vec<usize>],
    seed: usize,
    rings: usize,
) -> Result<BTreeSet<usize>> {
    if seed >= adjacency.len() {
        return Err(Error::IndexOutOfRange {
            index: seed,
            len: adjacency.len(),
        });
    }
    let mut visited = BTreeSet::from([seed]);
    let mut frontier = vec![seed];
    for _ in 0..rings {
        let mut next = Vec::new();
        for &v in &frontier {
            for &u in &adjacency[v] {
                if visited.insert(u) {
                    next.push(u);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(visited)
}

/// Keeps the largest edge-connected component (ties: the one holding the
/// lowest vertex index). Returns the compacted mesh and, for each kept
/// vertex, its index in the input. Relative vertex order is preserved.
pub fn largest_component(mesh: &Mesh) -> (Mesh, Vec<usize>) {
    let n = mesh.vertex_count();
    let adj = mesh.adjacency();
    let mut label = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut count = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(v) = queue.pop_front() {
            count += 1;
            for &u in &adj[v] {
                if label[u] == usize::MAX {
                    label[u] = id;
                    queue.push_back(u);
                }
            }
        }
        sizes.push(count);
    }
    let Some(best) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(id, _)| id)
    else {
        return (Mesh::empty(), Vec::new());
    };
    let kept: Vec<usize> = (0..n).filter(|&v| label[v] == best).collect();
    let mut remap = vec![usize::MAX; n];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let vertices = kept.iter().map(|&i| mesh.vertices[i]).collect();
    let triangles = mesh
        .triangles()
        .iter()
        .filter(|t| label[t[0]] == best)
        .map(|t| t.map(|i| remap[i]))
        .collect();
    (
        Mesh {
            vertices,
            triangles,
        },
        kept,
    )
}

/// Hard landmark correspondences: template vertex index paired with a
/// target-space position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub entries: Vec<(usize, Vec3)>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<(usize, Vec3)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        for &(i, _) in &self.entries {
            if i >= vertex_count {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: vertex_count,
                });
            }
        }
        Ok(())
    }

    /// Same vertex indices, positions mapped through `f`.
    pub fn map_positions(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            entries: self.entries.iter().map(|(i, p)| (*i, f(p))).collect(),
        }
    }
}

/// Regular `rows x cols` grid in the z=0 plane with unit spacing,
/// counter-clockwise winding seen from +z.
pub fn grid_mesh(rows: usize, cols: usize, spacing: f64) -> Mesh {
    let mut vertices = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            vertices.push(Vec3::new(c as f64 * spacing, r as f64 * spacing, 0.0));
        }
    }
    let mut triangles = Vec::new();
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            let a = r * cols + c;
            let b = a + 1;
            let d = a + cols;
            let e = d + 1;
            triangles.push([a, b, e]);
            triangles.push([a, e, d]);
        }
    }
    Mesh {
        vertices,
        triangles,
    }
}

/// Regular icosahedron inscribed in the unit sphere.
pub fn icosahedron() -> Mesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let vertices = raw
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
        .collect();
    let triangles = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    Mesh {
        vertices,
        triangles,
    }
}

/// Loop-style midpoint subdivision of the icosahedron projected to the unit
/// sphere, `levels` times.
pub fn icosphere(levels: usize) -> Mesh {
    let mut mesh = icosahedron();
    for _ in 0..levels {
        let mut vertices = mesh.vertices.clone();
        let mut midpoint = std::collections::HashMap::new();
        let mut mid = |i: usize, j: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (i.min(j), i.max(j));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(((verts[i] + verts[j]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(mesh.triangles.len() * 4);
        for &[a, b, c] in &mesh.triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            triangles.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        mesh = Mesh {
            vertices,
            triangles,
        };
    }
    mesh
}
