//! Indexed triangle meshes: parsing, writing, and the per-face quantities
//! (barycenters, normals, edge adjacency) the rest of the pipeline consumes.

mod io;

pub use io::{
    load_mesh, load_mesh_auto, read_labels_json, write_labeled_ply, write_labels_json, write_obj,
    LabelsFile, LoadReport, MeshFormat,
};

use crate::fdi;

/// Faces below this area (mm^2) are treated as degenerate slivers.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("mesh has no faces after validation")]
    EmptyMesh,
    #[error("face {face} is degenerate (area below {DEGENERATE_AREA} mm^2)")]
    DegenerateFace { face: usize },
    #[error("face {face} references vertex {vertex} but the mesh has {vertex_count} vertices")]
    IndexOutOfRange {
        face: usize,
        vertex: u32,
        vertex_count: usize,
    },
    #[error("expected {expected} per-face values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("face {face} carries illegal FDI label {label}")]
    IllegalLabel { face: usize, label: u8 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An indexed triangle mesh in millimeters, counter-clockwise winding.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    /// Per-face FDI class id (0 or 11-48), when the scan is labeled.
    pub face_labels: Option<Vec<u8>>,
}

/// Edge-sharing neighbors per face (0-3 entries on manifold meshes, more on
/// non-manifold edges, which scans do contain).
#[derive(Debug, Clone)]
pub struct FaceAdjacency {
    pub neighbors: Vec<Vec<u32>>,
    /// Edges shared by more than two faces; tolerated, but reported.
    pub non_manifold_edges: usize,
}

impl TriMesh {
    /// Builds a mesh, rejecting out-of-range indices, degenerate faces, and
    /// illegal labels. Loaders that must tolerate slivers drop them before
    /// calling this.
    pub fn new(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[u32; 3]>,
        face_labels: Option<Vec<u8>>,
    ) -> Result<Self, MeshError> {
        if faces.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
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
            if face_area(&vertices, f) <= DEGENERATE_AREA {
                return Err(MeshError::DegenerateFace { face: fi });
            }
        }
        if let Some(labels) = &face_labels {
            if labels.len() != faces.len() {
                return Err(MeshError::LengthMismatch {
                    expected: faces.len(),
                    got: labels.len(),
                });
            }
            for (fi, &l) in labels.iter().enumerate() {
                if !fdi::is_legal_fdi(l) {
                    return Err(MeshError::IllegalLabel { face: fi, label: l });
                }
            }
        }
        Ok(Self {
            vertices,
            faces,
            face_labels,
        })
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Gravity center of every face.
    pub fn face_barycenters(&self) -> Vec<[f64; 3]> {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = self.corners(f);
                [
                    (a[0] + b[0] + c[0]) / 3.0,
                    (a[1] + b[1] + c[1]) / 3.0,
                    (a[2] + b[2] + c[2]) / 3.0,
                ]
            })
            .collect()
    }

    /// Unit normals from the counter-clockwise winding.
    pub fn face_normals(&self) -> Result<Vec<[f64; 3]>, MeshError> {
        self.faces
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                let [a, b, c] = self.corners(f);
                let n = cross(sub(b, a), sub(c, a));
                let len = norm(n);
                if len < 1e-12 {
                    return Err(MeshError::DegenerateFace { face: fi });
                }
                Ok([n[0] / len, n[1] / len, n[2] / len])
            })
            .collect()
    }

    /// Faces are adjacent iff they share an (unordered) vertex-pair edge.
    pub fn face_adjacency(&self) -> FaceAdjacency {
        let mut edge_faces: std::collections::HashMap<(u32, u32), Vec<u32>> =
            std::collections::HashMap::with_capacity(self.faces.len() * 3 / 2);
        for (fi, f) in self.faces.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                edge_faces.entry(key).or_default().push(fi as u32);
            }
        }
        let mut neighbors = vec![Vec::new(); self.faces.len()];
        let mut non_manifold_edges = 0;
        for sharers in edge_faces.values() {
            if sharers.len() > 2 {
                non_manifold_edges += 1;
            }
            for &fi in sharers {
                for &fj in sharers {
                    if fi != fj {
                        neighbors[fi as usize].push(fj);
                    }
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        FaceAdjacency {
            neighbors,
            non_manifold_edges,
        }
    }

    fn corners(&self, f: &[u32; 3]) -> [[f64; 3]; 3] {
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn face_area(vertices: &[[f64; 3]], f: &[u32; 3]) -> f64 {
    let a = vertices[f[0] as usize];
    let b = vertices[f[1] as usize];
    let c = vertices[f[2] as usize];
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    fn unit_triangle() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn barycenter_of_unit_triangle() {
        let m = unit_triangle();
        let b = m.face_barycenters();
        assert_eq!(b.len(), 1);
        for (got, want) in b[0].iter().zip([1.0 / 3.0, 1.0 / 3.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn barycenter_matches_per_coordinate_average() {
        // Independent recomputation: average each coordinate separately.
        let m = synth::icosphere(1);
        let bary = m.face_barycenters();
        for (f, b) in m.faces.iter().zip(&bary) {
            for c in 0..3 {
                let avg = (m.vertices[f[0] as usize][c]
                    + m.vertices[f[1] as usize][c]
                    + m.vertices[f[2] as usize][c])
                    / 3.0;
                assert!((avg - b[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normal_follows_right_hand_rule() {
        let m = unit_triangle();
        let n = m.face_normals().unwrap();
        assert!((n[0][2] - 1.0).abs() < 1e-15);

        let rev = TriMesh::new(
            m.vertices.clone(),
            vec![[0, 2, 1]],
            None,
        )
        .unwrap();
        let nr = rev.face_normals().unwrap();
        assert!((nr[0][2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn normals_are_unit_length() {
        let m = synth::icosphere(2);
        for n in m.face_normals().unwrap() {
            assert!((norm(n) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn icosphere_normals_point_radially() {
        // On a subdivided sphere the face normal stays close to the
        // barycenter direction.
        let m = synth::icosphere(3);
        let normals = m.face_normals().unwrap();
        for (n, b) in normals.iter().zip(m.face_barycenters()) {
            let r = norm(b);
            let cosang = dot(*n, [b[0] / r, b[1] / r, b[2] / r]).clamp(-1.0, 1.0);
            assert!(cosang.acos() < 0.2, "angle {} too large", cosang.acos());
        }
    }

    #[test]
    fn adjacency_of_two_triangles_sharing_an_edge() {
        let m = TriMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
            None,
        )
        .unwrap();
        let adj = m.face_adjacency();
        assert_eq!(adj.neighbors[0], vec![1]);
        assert_eq!(adj.neighbors[1], vec![0]);
        assert_eq!(adj.non_manifold_edges, 0);
    }

    #[test]
    fn adjacency_of_single_triangle_is_empty() {
        let adj = unit_triangle().face_adjacency();
        assert!(adj.neighbors[0].is_empty());
    }

    #[test]
    fn icosphere_faces_have_three_neighbors() {
        let adj = synth::icosphere(2).face_adjacency();
        for list in &adj.neighbors {
            assert_eq!(list.len(), 3);
        }
        assert_eq!(adj.non_manifold_edges, 0);
    }

    #[test]
    fn non_manifold_edge_tolerated_and_reported() {
        // Three faces fanning around the same edge (0,1).
        let m = TriMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, -1.0, 0.0],
            ],
            vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]],
            None,
        )
        .unwrap();
        let adj = m.face_adjacency();
        assert_eq!(adj.non_manifold_edges, 1);
        for list in &adj.neighbors {
            assert_eq!(list.len(), 2);
        }
    }

    #[test]
    fn rejects_bad_labels_and_indices() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(
            TriMesh::new(verts.clone(), vec![[0, 1, 9]], None),
            Err(MeshError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            TriMesh::new(verts.clone(), vec![[0, 1, 2]], Some(vec![19])),
            Err(MeshError::IllegalLabel { .. })
        ));
        assert!(matches!(
            TriMesh::new(verts, vec![[0, 1, 2]], Some(vec![0, 0])),
            Err(MeshError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn rejects_degenerate_faces() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(matches!(
            TriMesh::new(verts, vec![[0, 1, 2]], None),
            Err(MeshError::DegenerateFace { .. })
        ));
    }

    proptest! {
        #[test]
        fn barycenters_translate_with_the_mesh(tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -50.0f64..50.0) {
            let m = synth::icosphere(1);
            let before = m.face_barycenters();
            let moved = TriMesh::new(
                m.vertices.iter().map(|v| [v[0] + tx, v[1] + ty, v[2] + tz]).collect(),
                m.faces.clone(),
                None,
            ).unwrap();
            for (a, b) in before.iter().zip(moved.face_barycenters()) {
                prop_assert!((a[0] + tx - b[0]).abs() < 1e-12);
                prop_assert!((a[1] + ty - b[1]).abs() < 1e-12);
                prop_assert!((a[2] + tz - b[2]).abs() < 1e-12);
            }
        }

        #[test]
        fn normals_rotate_with_the_mesh(angle in 0.0f64..std::f64::consts::TAU) {
            let m = synth::icosphere(1);
            let before = m.face_normals().unwrap();
            let (s, c) = angle.sin_cos();
            let rot = |v: [f64; 3]| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
            let rotated = TriMesh::new(
                m.vertices.iter().map(|&v| rot(v)).collect(),
                m.faces.clone(),
                None,
            ).unwrap();
            for (n0, n1) in before.iter().zip(rotated.face_normals().unwrap()) {
                let expect = rot(*n0);
                for c in 0..3 {
                    prop_assert!((expect[c] - n1[c]).abs() < 1e-9);
                }
            }
        }
    }
}
