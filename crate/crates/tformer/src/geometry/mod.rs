//! Per-point geometric features.
//!
//! Every mesh face becomes one point (its barycenter) carrying an
//! 8-dimensional feature vector: normalized coordinates, the face normal,
//! a discrete Gaussian-curvature feature (sum of the three corner vertices'
//! angle deficits), and the point curvature, the mean angle between the
//! face normal and the normals of its second-order edge neighbors. The
//! point curvature is what marks tooth boundaries as hard regions.

mod knn;

pub use knn::{knn_graph, knn_graph_brute, KnnGraph};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fdi::{self, Jaw};
use crate::mesh::{cross, dot, norm, sub, FaceAdjacency, MeshError, TriMesh};

/// Width of the per-point feature vector.
pub const FEATURE_DIM: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("need more than k={k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("cannot sample {target} points from {available}")]
    TargetTooLarge { target: usize, available: usize },
    #[error("sample has no labels")]
    Unlabeled,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// A mesh converted to the network's input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSample {
    /// `n x 3` normalized positions: centroid at the origin, max radius 1.
    pub coords: Vec<[f64; 3]>,
    /// `n x 8` row-major feature matrix; columns are
    /// x, y, z, nx, ny, nz, gaussian feature, point curvature.
    pub features: Vec<f64>,
    /// Point curvature per point, radians in `[0, pi]`.
    pub curvature: Vec<f64>,
    /// Class indices 0..=32 when the source mesh is labeled.
    pub labels: Option<Vec<u8>>,
    /// 0 = gingiva, 1 = tooth; present iff `labels` is.
    pub aux_labels: Option<Vec<u8>>,
    pub jaw: Jaw,
    /// Source face index per point in the originating mesh.
    pub face_map: Vec<u32>,
}

impl PointCloudSample {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }
}

/// Discrete Gaussian curvature per vertex as the angle deficit: 2 pi minus
/// the sum of incident interior angles; boundary vertices are measured
/// against pi instead. Vertices referenced by no face get 0.
pub fn vertex_angle_deficit(mesh: &TriMesh) -> Vec<f64> {
    let nv = mesh.vertex_count();
    let mut angle_sum = vec![0.0f64; nv];
    let mut referenced = vec![false; nv];
    let mut edge_count: std::collections::HashMap<(u32, u32), u32> =
        std::collections::HashMap::with_capacity(mesh.face_count() * 3 / 2);

    for f in &mesh.faces {
        for corner in 0..3 {
            let a = mesh.vertices[f[corner] as usize];
            let b = mesh.vertices[f[(corner + 1) % 3] as usize];
            let c = mesh.vertices[f[(corner + 2) % 3] as usize];
            let (e1, e2) = (sub(b, a), sub(c, a));
            let cosang = dot(e1, e2) / (norm(e1) * norm(e2));
            angle_sum[f[corner] as usize] += cosang.clamp(-1.0, 1.0).acos();
            referenced[f[corner] as usize] = true;

            let (p, q) = (f[corner], f[(corner + 1) % 3]);
            *edge_count.entry((p.min(q), p.max(q))).or_insert(0) += 1;
        }
    }

    let mut boundary = vec![false; nv];
    for (&(p, q), &count) in &edge_count {
        if count == 1 {
            boundary[p as usize] = true;
            boundary[q as usize] = true;
        }
    }

    (0..nv)
        .map(|v| {
            if !referenced[v] {
                0.0
            } else if boundary[v] {
                std::f64::consts::PI - angle_sum[v]
            } else {
                2.0 * std::f64::consts::PI - angle_sum[v]
            }
        })
        .collect()
}

/// Per-face Gaussian-curvature feature: the sum of the face's three corner
/// vertices' angle deficits.
pub fn face_gaussian_feature(mesh: &TriMesh, vertex_curv: &[f64]) -> Vec<f64> {
    assert_eq!(vertex_curv.len(), mesh.vertex_count(), "vertex curvature length");
    mesh.faces
        .iter()
        .map(|f| {
            vertex_curv[f[0] as usize] + vertex_curv[f[1] as usize] + vertex_curv[f[2] as usize]
        })
        .collect()
}

/// Second-order neighborhood of face `i`: every face at edge-adjacency
/// distance 1 or 2, excluding `i` itself. Sorted ascending.
pub fn second_order_neighbors(adj: &FaceAdjacency, i: usize) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for &j in &adj.neighbors[i] {
        out.push(j);
        out.extend(adj.neighbors[j as usize].iter().copied());
    }
    out.sort_unstable();
    out.dedup();
    out.retain(|&j| j != i as u32);
    out
}

/// Point curvature per face: the mean angle between the face normal and the
/// normals of its second-order neighbors; 0 when the neighborhood is empty.
pub fn point_curvature(normals: &[[f64; 3]], adj: &FaceAdjacency) -> Vec<f64> {
    assert_eq!(normals.len(), adj.neighbors.len(), "normals vs adjacency");
    (0..normals.len())
        .map(|i| {
            let ring = second_order_neighbors(adj, i);
            if ring.is_empty() {
                return 0.0;
            }
            let ni = normals[i];
            let sum: f64 = ring
                .iter()
                .map(|&j| dot(ni, normals[j as usize]).clamp(-1.0, 1.0).acos())
                .sum();
            sum / ring.len() as f64
        })
        .collect()
}

/// Converts a mesh into the full-resolution point cloud sample: one point
/// per face, coordinates centered on their centroid and scaled so the
/// farthest point sits at radius 1.
pub fn extract_features(mesh: &TriMesh, jaw: Jaw) -> Result<PointCloudSample, GeometryError> {
    let n = mesh.face_count();
    let barycenters = mesh.face_barycenters();
    let normals = mesh.face_normals()?;
    let vertex_curv = vertex_angle_deficit(mesh);
    let gaussian = face_gaussian_feature(mesh, &vertex_curv);
    let adj = mesh.face_adjacency();
    let curvature = point_curvature(&normals, &adj);

    let mut centroid = [0.0f64; 3];
    for b in &barycenters {
        for c in 0..3 {
            centroid[c] += b[c];
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut scale = 0.0f64;
    let centered: Vec<[f64; 3]> = barycenters
        .iter()
        .map(|b| {
            let p = sub(*b, centroid);
            scale = scale.max(norm(p));
            p
        })
        .collect();
    if scale < 1e-12 {
        scale = 1.0;
    }
    let coords: Vec<[f64; 3]> = centered
        .iter()
        .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
        .collect();

    let mut features = Vec::with_capacity(n * FEATURE_DIM);
    for i in 0..n {
        features.extend_from_slice(&coords[i]);
        features.extend_from_slice(&normals[i]);
        features.push(gaussian[i]);
        features.push(curvature[i]);
    }

    let (labels, aux_labels) = match &mesh.face_labels {
        Some(fdi_labels) => {
            let mut classes = Vec::with_capacity(n);
            for (fi, &code) in fdi_labels.iter().enumerate() {
                let class = fdi::fdi_to_class(code)
                    .ok_or(MeshError::IllegalLabel { face: fi, label: code })?;
                classes.push(class as u8);
            }
            let aux: Vec<u8> = classes.iter().map(|&c| (c != 0) as u8).collect();
            (Some(classes), Some(aux))
        }
        None => (None, None),
    };

    Ok(PointCloudSample {
        coords,
        features,
        curvature,
        labels,
        aux_labels,
        jaw,
        face_map: (0..n as u32).collect(),
    })
}

/// Uniform random subset of `n` points without replacement. The selected
/// indices are kept in ascending order, so `n == sample.len()` is the
/// identity. Deterministic per seed.
pub fn downsample(
    sample: &PointCloudSample,
    n: usize,
    seed: u64,
) -> Result<PointCloudSample, GeometryError> {
    let total = sample.len();
    if n > total {
        return Err(GeometryError::TargetTooLarge {
            target: n,
            available: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = (0..total as u32).collect();
    for i in 0..n {
        let j = rng.gen_range(i..total);
        pool.swap(i, j);
    }
    let mut chosen = pool[..n].to_vec();
    chosen.sort_unstable();

    Ok(subset(sample, &chosen))
}

/// Row-subset of every per-point array; `indices` may repeat (inference
/// padding duplicates points).
pub fn subset(sample: &PointCloudSample, indices: &[u32]) -> PointCloudSample {
    let pick = |i: &u32| *i as usize;
    PointCloudSample {
        coords: indices.iter().map(|i| sample.coords[pick(i)]).collect(),
        features: indices
            .iter()
            .flat_map(|i| sample.feature_row(pick(i)).iter().copied())
            .collect(),
        curvature: indices.iter().map(|i| sample.curvature[pick(i)]).collect(),
        labels: sample
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|i| l[pick(i)]).collect()),
        aux_labels: sample
            .aux_labels
            .as_ref()
            .map(|l| indices.iter().map(|i| l[pick(i)]).collect()),
        jaw: sample.jaw,
        face_map: indices.iter().map(|i| sample.face_map[pick(i)]).collect(),
    }
}
