//! OBJ / PLY mesh files and landmark JSON.
//!
//! OBJ: `v` and `f` records only; texture, normal and material statements are
//! skipped, polygons are fan-triangulated. PLY: ASCII and binary
//! little-endian, any scalar property types on read, `double` coordinates on
//! write. Coordinates written as text use the shortest representation that
//! round-trips, so save/load preserves every bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{LandmarkSet, Mesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    /// Guess from the file extension; PLY defaults to binary for writing.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::PlyBinary),
            _ => Err(Error::Parse(format!(
                "cannot infer mesh format from {}",
                path.display()
            ))),
        }
    }
}

/// Loads a mesh; the format is taken from the extension (PLY encoding from
/// the header).
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => parse_obj(&String::from_utf8_lossy(&bytes)),
        MeshFormat::PlyAscii | MeshFormat::PlyBinary => parse_ply(&bytes),
    }
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MeshFormat::Obj => write_obj(mesh).into_bytes(),
        MeshFormat::PlyAscii => write_ply(mesh, false),
        MeshFormat::PlyBinary => write_ply(mesh, true),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces: Vec<Vec<i64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(Error::Parse(format!(
                        "line {}: vertex needs 3 coordinates",
                        lineno + 1
                    )));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = it
                    .map(|tok| {
                        tok.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<i64>()
                            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Parse(format!(
                        "line {}: face needs at least 3 indices",
                        lineno + 1
                    )));
                }
                faces.push(idx);
            }
            _ => {}
        }
    }
    let n = vertices.len();
    let resolve = |i: i64| -> Result<usize> {
        let r = if i > 0 { i - 1 } else { n as i64 + i };
        if r < 0 || r as usize >= n {
            return Err(Error::IndexOutOfRange {
                index: if i > 0 { (i - 1) as usize } else { i.unsigned_abs() as usize },
                len: n,
            });
        }
        Ok(r as usize)
    };
    let mut triangles = Vec::new();
    for f in faces {
        let idx: Vec<usize> = f.into_iter().map(resolve).collect::<Result<_>>()?;
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Mesh::new(vertices, triangles)
}

pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for t in mesh.triangles() {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Cursor over the PLY body, ASCII tokens or binary LE bytes.
enum Body<'a> {
    Ascii(std::str::SplitWhitespace<'a>),
    Binary(&'a [u8], usize),
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        match self {
            Body::Ascii(tokens) => tokens
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of PLY body".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("PLY body: {e}"))),
            Body::Binary(buf, pos) => {
                let end = *pos + ty.size();
                if end > buf.len() {
                    return Err(Error::Parse("unexpected end of PLY body".into()));
                }
                let v = ty.read_le(&buf[*pos..end]);
                *pos = end;
                Ok(v)
            }
        }
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<Mesh> {
    const END: &[u8] = b"end_header";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Parse("PLY header not terminated".into()))?;
    let mut body_start = header_end + END.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Parse("PLY header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(Error::Parse(format!("unsupported PLY format {other}")))
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|e| Error::Parse(format!("element count: {e}")))?,
                props: Vec::new(),
            }),
            ["property", "list", cty, ity, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Parse("property before element".into()))?
                .props
                .push(Property::List(
                    name.to_string(),
                    Scalar::parse(cty)?,
                    Scalar::parse(ity)?,
                )),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Parse("property before element".into()))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| Error::Parse("PLY format line missing".into()))?;
    let ascii_text;
    let mut body = if binary {
        Body::Binary(&bytes[body_start..], 0)
    } else {
        ascii_text = std::str::from_utf8(&bytes[body_start..])
            .map_err(|_| Error::Parse("ASCII PLY body is not UTF-8".into()))?;
        Body::Ascii(ascii_text.split_whitespace())
    };

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut faces: Vec<Vec<i64>> = Vec::new();
    for el in &elements {
        let coord_idx = |axis: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
        };
        let (xi, yi, zi) = (coord_idx("x"), coord_idx("y"), coord_idx("z"));
        if el.name == "vertex" && (xi.is_none() || yi.is_none() || zi.is_none()) {
            return Err(Error::Parse("vertex element lacks x/y/z".into()));
        }
        for _ in 0..el.count {
            let mut scalars = vec![0.0; el.props.len()];
            let mut list: Option<Vec<i64>> = None;
            for (k, p) in el.props.iter().enumerate() {
                match p {
                    Property::Scalar(_, ty) => scalars[k] = body.next(*ty)?,
                    Property::List(name, cty, ity) => {
                        let len = body.next(*cty)?;
                        if len < 0.0 || len.fract() != 0.0 {
                            return Err(Error::Parse("bad PLY list length".into()));
                        }
                        let items: Vec<i64> = (0..len as usize)
                            .map(|_| body.next(*ity).map(|v| v as i64))
                            .collect::<Result<_>>()?;
                        if name == "vertex_indices" || name == "vertex_index" {
                            list = Some(items);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => vertices.push(Vec3::new(
                    scalars[xi.unwrap()],
                    scalars[yi.unwrap()],
                    scalars[zi.unwrap()],
                )),
                "face" => faces.push(
                    list.ok_or_else(|| Error::Parse("face without vertex_indices".into()))?,
                ),
                _ => {}
            }
        }
    }
    let n = vertices.len();
    for f in faces {
        if f.len() < 3 {
            return Err(Error::Parse("face with fewer than 3 vertices".into()));
        }
        let idx: Vec<usize> = f
            .iter()
            .map(|&i| {
                if i < 0 || i as usize >= n {
                    Err(Error::IndexOutOfRange {
                        index: i.max(0) as usize,
                        len: n,
                    })
                } else {
                    Ok(i as usize)
                }
            })
            .collect::<Result<_>>()?;
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Mesh::new(vertices, triangles)
}

pub fn write_ply(mesh: &Mesh, binary: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let format = if binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    out.extend_from_slice(
        format!(
            "ply\nformat {format} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            mesh.vertex_count(),
            mesh.triangle_count()
        )
        .as_bytes(),
    );
    if binary {
        for v in mesh.vertices() {
            for c in [v.x, v.y, v.z] {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for t in mesh.triangles() {
            out.push(3);
            for &i in t {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        }
    } else {
        for v in mesh.vertices() {
            out.extend_from_slice(format!("{:?} {:?} {:?}\n", v.x, v.y, v.z).as_bytes());
        }
        for t in mesh.triangles() {
            out.extend_from_slice(format!("3 {} {} {}\n", t[0], t[1], t[2]).as_bytes());
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRecord {
    vertex: usize,
    position: [f64; 3],
}

pub fn landmarks_to_json(set: &LandmarkSet) -> String {
    let records: Vec<LandmarkRecord> = set
        .entries
        .iter()
        .map(|(i, p)| LandmarkRecord {
            vertex: *i,
            position: [p.x, p.y, p.z],
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("landmarks serialize")
}

pub fn landmarks_from_json(text: &str) -> Result<LandmarkSet> {
    let records: Vec<LandmarkRecord> =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("landmarks: {e}")))?;
    Ok(LandmarkSet::new(
        records
            .into_iter()
            .map(|r| (r.vertex, Vec3::from(r.position)))
            .collect(),
    ))
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    landmarks_from_json(&text)
}

pub fn save_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, landmarks_to_json(set)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{grid_mesh, icosphere};

    #[test]
    fn minimal_obj() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nusemtl skin\nf 1/1 2/1 3/1\n")
            .unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.triangle_count(), 1);
        assert_eq!(m.edges().len(), 3);
    }

    #[test]
    fn obj_index_out_of_range() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 6\n").unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 5, len: 3 }));
    }

    #[test]
    fn obj_quad_is_fan_triangulated() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn malformed_obj_is_parse_error() {
        assert!(matches!(parse_obj("v 0 zero 0\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn ply_ascii_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0 0\n3 0 1 2\n";
        let m = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
        assert_eq!(m.vertices()[1], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn round_trip_all_formats() {
        let mut v = icosphere(1).vertices().to_vec();
        v[0].x = 0.1 + 0.2; // not exactly representable in short decimal form
        let m = icosphere(1).with_vertices(v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (fmt, name) in [
            (MeshFormat::Obj, "m.obj"),
            (MeshFormat::PlyAscii, "a.ply"),
            (MeshFormat::PlyBinary, "b.ply"),
        ] {
            let p = dir.path().join(name);
            save_mesh(&m, &p, fmt).unwrap();
            assert_eq!(load_mesh(&p).unwrap(), m, "{name}");
        }
    }

    #[test]
    fn empty_mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (fmt, name) in [(MeshFormat::Obj, "e.obj"), (MeshFormat::PlyBinary, "e.ply")] {
            let p = dir.path().join(name);
            save_mesh(&Mesh::empty(), &p, fmt).unwrap();
            assert_eq!(load_mesh(&p).unwrap().vertex_count(), 0);
        }
    }

    #[test]
    fn cross_format_round_trip() {
        let m = Mesh::new(
            vec![
                Vec3::new(0.25, -1.5, 3.0e-7),
                Vec3::new(1.0 / 3.0, 2.0, 0.0),
                Vec3::new(-7.125, 0.5, 1e10),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let obj = parse_obj(&write_obj(&m)).unwrap();
        let ply = parse_ply(&write_ply(&obj, false)).unwrap();
        let bin = parse_ply(&write_ply(&ply, true)).unwrap();
        assert_eq!(obj, m);
        assert_eq!(bin, m);
    }

    #[test]
    fn landmark_json_round_trip() {
        let g = grid_mesh(2, 2, 1.0);
        let set = LandmarkSet::new(vec![(0, g.vertices()[3]), (2, Vec3::new(0.1, 0.2, 0.3))]);
        let back = landmarks_from_json(&landmarks_to_json(&set)).unwrap();
        assert_eq!(back, set);
        let parsed =
            landmarks_from_json(r#"[{"vertex": 4, "position": [1.0, 2.0, 3.0]}]"#).unwrap();
        assert_eq!(parsed.entries, vec![(4, Vec3::new(1.0, 2.0, 3.0))]);
    }
}
