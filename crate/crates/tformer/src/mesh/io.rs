//! OBJ and ASCII-PLY readers/writers.
//!
//! The dialect is deliberately small: OBJ `v x y z` / `f i j k` lines
//! (1-based indices, `i/j/k` attribute suffixes tolerated) and ASCII PLY
//! with float vertex positions and a per-face vertex-index list, optionally
//! followed by `red green blue` for labeled output. Coordinates round-trip
//! exactly because floats are written in shortest-round-trip decimal form.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{face_area, MeshError, TriMesh, DEGENERATE_AREA};
use crate::fdi::Jaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Some(MeshFormat::Obj),
            Some("ply") => Some(MeshFormat::PlyAscii),
            _ => None,
        }
    }
}

/// What the loader had to discard.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadReport {
    pub degenerate_dropped: usize,
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<(TriMesh, LoadReport), MeshError> {
    let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pathstr = path.display().to_string();
    let (vertices, faces) = match format {
        MeshFormat::Obj => parse_obj(&text, &pathstr)?,
        MeshFormat::PlyAscii => parse_ply(&text, &pathstr)?,
    };
    finish_load(vertices, faces)
}

/// Loads with the format inferred from the file extension.
pub fn load_mesh_auto(path: &Path) -> Result<(TriMesh, LoadReport), MeshError> {
    let format = MeshFormat::from_path(path).ok_or_else(|| MeshError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: "unknown mesh extension (expected .obj or .ply)".into(),
    })?;
    load_mesh(path, format)
}

fn finish_load(
    vertices: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
) -> Result<(TriMesh, LoadReport), MeshError> {
    // Range-check before the area test so a bad index is a parse-level error.
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v as usize >= vertices.len() {
                return Err(MeshError::IndexOutOfRange {
                    face: fi,
                    vertex: v,
                    vertex_count: vertices.len(),
                });
            }
        }
    }
    let before = faces.len();
    let kept: Vec<[u32; 3]> = faces
        .into_iter()
        .filter(|f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && face_area(&vertices, f) > DEGENERATE_AREA
        })
        .collect();
    let report = LoadReport {
        degenerate_dropped: before - kept.len(),
    };
    let mesh = TriMesh::new(vertices, kept, None)?;
    Ok((mesh, report))
}

fn parse_obj(text: &str, path: &str) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>), MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: String| MeshError::Parse {
            path: path.to_string(),
            line: ln + 1,
            msg,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for slot in &mut v {
                    let tok = parts.next().ok_or_else(|| err("vertex needs 3 coordinates".into()))?;
                    *slot = tok
                        .parse::<f64>()
                        .map_err(|_| err(format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let idx: Vec<&str> = parts.collect();
                if idx.len() != 3 {
                    return Err(err(format!(
                        "face has {} vertices, only triangles are supported",
                        idx.len()
                    )));
                }
                let mut f = [0u32; 3];
                for (slot, tok) in f.iter_mut().zip(&idx) {
                    let first = tok.split('/').next().unwrap_or_default();
                    let one_based: i64 = first
                        .parse()
                        .map_err(|_| err(format!("bad face index {tok:?}")))?;
                    if one_based < 1 {
                        return Err(err(format!("face index {one_based} must be >= 1")));
                    }
                    *slot = (one_based - 1) as u32;
                }
                faces.push(f);
            }
            // Normals, texcoords, groups, materials: not part of this dialect.
            _ => continue,
        }
    }
    Ok((vertices, faces))
}

fn parse_ply(text: &str, path: &str) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>), MeshError> {
    let mut lines = text.lines().enumerate();
    let err = |ln: usize, msg: String| MeshError::Parse {
        path: path.to_string(),
        line: ln + 1,
        msg,
    };

    let (ln, magic) = lines.next().ok_or_else(|| err(0, "empty file".into()))?;
    if magic.trim() != "ply" {
        return Err(err(ln, "missing ply magic".into()));
    }

    let mut vertex_count = None;
    let mut face_count = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element = String::new();
    let mut header_end = 0;
    for (ln, raw) in &mut lines {
        let line = raw.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("ascii") {
                    return Err(err(ln, "only ascii PLY is supported".into()));
                }
            }
            Some("element") => {
                current_element = parts.next().unwrap_or_default().to_string();
                let count: usize = parts
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err(ln, "bad element count".into()))?;
                match current_element.as_str() {
                    "vertex" => vertex_count = Some(count),
                    "face" => face_count = Some(count),
                    other => return Err(err(ln, format!("unsupported element {other:?}"))),
                }
            }
            Some("property") => {
                if current_element == "vertex" {
                    let name = line.split_whitespace().last().unwrap_or_default();
                    vertex_props.push(name.to_string());
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("end_header") => {
                header_end = ln;
                break;
            }
            _ => return Err(err(ln, format!("unexpected header line {line:?}"))),
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| err(header_end, "no vertex element".into()))?;
    let face_count = face_count.ok_or_else(|| err(header_end, "no face element".into()))?;
    if vertex_props.len() < 3 || vertex_props[..3] != ["x", "y", "z"] {
        return Err(err(
            header_end,
            "vertex element must start with x y z properties".into(),
        ));
    }

    let mut vertices = Vec::with_capacity(vertex_count);
    for _ in 0..vertex_count {
        let (ln, raw) = lines
            .next()
            .ok_or_else(|| err(header_end, "unexpected end of vertex list".into()))?;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(err(ln, "vertex line needs 3 coordinates".into()));
        }
        let mut v = [0.0; 3];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = tok
                .parse::<f64>()
                .map_err(|_| err(ln, format!("bad coordinate {tok:?}")))?;
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let (ln, raw) = lines
            .next()
            .ok_or_else(|| err(header_end, "unexpected end of face list".into()))?;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let n: usize = toks
            .first()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(ln, "bad face list length".into()))?;
        if n != 3 {
            return Err(err(ln, format!("face has {n} vertices, expected 3")));
        }
        if toks.len() < 4 {
            return Err(err(ln, "truncated face line".into()));
        }
        let mut f = [0u32; 3];
        for (slot, tok) in f.iter_mut().zip(&toks[1..4]) {
            *slot = tok
                .parse::<u32>()
                .map_err(|_| err(ln, format!("bad face index {tok:?}")))?;
        }
        faces.push(f); // trailing color columns ignored on load
    }
    Ok((vertices, faces))
}

pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::with_capacity(mesh.vertices.len() * 32);
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out).map_err(io_err)
}

/// Writes an ASCII PLY with one RGB color per face so predictions can be
/// inspected in any mesh viewer. The file re-loads through [`load_mesh`]
/// with colors ignored.
pub fn write_labeled_ply(
    mesh: &TriMesh,
    labels: &[u8],
    palette: impl Fn(u8) -> [u8; 3],
    path: &Path,
) -> Result<(), MeshError> {
    if labels.len() != mesh.face_count() {
        return Err(MeshError::LengthMismatch {
            expected: mesh.face_count(),
            got: labels.len(),
        });
    }
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    let r: Result<(), std::io::Error> = (|| {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", mesh.vertex_count())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "element face {}", mesh.face_count())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
        writeln!(w, "end_header")?;
        for v in &mesh.vertices {
            writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
        }
        for (f, &label) in mesh.faces.iter().zip(labels) {
            let [r, g, b] = palette(label);
            writeln!(w, "3 {} {} {} {} {} {}", f[0], f[1], f[2], r, g, b)?;
        }
        Ok(())
    })();
    r.map_err(io_err)
}

/// Sidecar JSON carrying per-face FDI labels (and optionally the jaw) next
/// to an OBJ scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsFile {
    pub labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaw: Option<Jaw>,
}

pub fn write_labels_json(path: &Path, labels: &[u8], jaw: Option<Jaw>) -> Result<(), MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = LabelsFile {
        labels: labels.to_vec(),
        jaw,
    };
    let json = serde_json::to_string(&file).expect("labels serialize");
    fs::write(path, json).map_err(io_err)
}

pub fn read_labels_json(path: &Path) -> Result<LabelsFile, MeshError> {
    let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| MeshError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdi;
    use crate::synth;

    #[test]
    fn minimal_obj_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let (mesh, report) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(mesh.face_count(), 1);
        assert_eq!(mesh.faces[0], [0, 1, 2]);
        assert_eq!(report.degenerate_dropped, 0);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n").unwrap();
        assert!(matches!(
            load_mesh(&path, MeshFormat::Obj),
            Err(MeshError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn degenerate_faces_dropped_with_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sliver.obj");
        fs::write(
            &path,
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\nf 1 2 2\n",
        )
        .unwrap();
        let (mesh, report) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(mesh.face_count(), 1);
        assert_eq!(report.degenerate_dropped, 2);
    }

    #[test]
    fn empty_mesh_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.obj");
        fs::write(&path, "v 0 0 0\n").unwrap();
        assert!(matches!(
            load_mesh(&path, MeshFormat::Obj),
            Err(MeshError::EmptyMesh)
        ));
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let mesh = synth::generate_scan(&synth::SynthConfig {
            seed: 7,
            ..Default::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.obj");
        write_obj(&mesh, &path).unwrap();
        let (back, report) = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(report.degenerate_dropped, 0);
        assert_eq!(mesh.vertices, back.vertices);
        assert_eq!(mesh.faces, back.faces);
    }

    #[test]
    fn labeled_ply_round_trips_geometry() {
        let mesh = synth::icosphere(1);
        let labels = vec![0u8; mesh.face_count()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("colored.ply");
        write_labeled_ply(&mesh, &labels, fdi::label_color, &path).unwrap();
        let (back, _) = load_mesh(&path, MeshFormat::PlyAscii).unwrap();
        assert_eq!(mesh.vertices, back.vertices);
        assert_eq!(mesh.faces, back.faces);
    }

    #[test]
    fn labeled_ply_length_mismatch() {
        let mesh = synth::icosphere(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ply");
        assert!(matches!(
            write_labeled_ply(&mesh, &[0u8; 3], fdi::label_color, &path),
            Err(MeshError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn single_face_ply_contains_color() {
        let mesh = TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        write_labeled_ply(&mesh, &[0], fdi::label_color, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("property uchar red"));
        assert!(text.lines().last().unwrap().starts_with("3 0 1 2 "));
    }

    #[test]
    fn labels_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        write_labels_json(&path, &[0, 11, 48], Some(crate::fdi::Jaw::Mandible)).unwrap();
        let back = read_labels_json(&path).unwrap();
        assert_eq!(back.labels, vec![0, 11, 48]);
        assert_eq!(back.jaw, Some(crate::fdi::Jaw::Mandible));
    }
}
