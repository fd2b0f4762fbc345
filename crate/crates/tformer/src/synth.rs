//! Procedural mesh generators: labeled synthetic dental arches for training
//! and evaluation experiments, plus the icosphere / flat-grid fixtures the
//! geometry oracles are checked against.
//!
//! A synthetic scan is a height field over an arch-following (u, v) grid:
//! `u` runs along a parabolic arch centerline, `v` across a gingiva strip,
//! and teeth are superellipse-footprint bumps added to a smooth ridge.
//! Because the whole jaw is one welded grid, tooth/gingiva boundaries are
//! real shared-edge boundaries with a sharp crease in the surface normals,
//! which is exactly the signal the point curvature is supposed to pick up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fdi::Jaw;
use crate::mesh::TriMesh;

/// Arch half-width in millimeters (molar-to-molar span is twice this).
const ARCH_HALF_WIDTH: f64 = 25.0;
/// Arch depth from molars to incisors, millimeters.
const ARCH_DEPTH: f64 = 38.0;
/// Width of the gingiva strip, millimeters.
const STRIP_WIDTH: f64 = 14.0;
/// Peak height of the gingiva ridge, millimeters.
const RIDGE_HEIGHT: f64 = 2.5;
/// Tooth slots per jaw.
const SLOTS: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub jaw: Jaw,
    /// Teeth placed before random dropout, chosen incisors-first (max 16).
    pub teeth_count: usize,
    /// Independent per-tooth probability of being missing.
    pub missing_prob: f64,
    /// Lateral jitter amplitude as a fraction of tooth spacing.
    pub crowding: f64,
    /// Grid refinement level 0..=3, about 5k..40k faces.
    pub resolution: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jaw: Jaw::Mandible,
            teeth_count: 14,
            missing_prob: 0.0,
            crowding: 0.0,
            resolution: 0,
        }
    }
}

/// One tooth bump: position along the arch, footprint half-extents, height.
struct Tooth {
    fdi: u8,
    u_center: f64,
    v_center: f64,
    /// Footprint half-extents in (u, v) parameter units.
    ru: f64,
    rv: f64,
    height: f64,
}

/// FDI code for a slot counted along the arch from the patient's left molar.
fn slot_fdi(jaw: Jaw, slot: usize) -> u8 {
    match jaw {
        Jaw::Maxillary => {
            if slot < 8 {
                28 - slot as u8
            } else {
                11 + (slot as u8 - 8)
            }
        }
        Jaw::Mandible => {
            if slot < 8 {
                38 - slot as u8
            } else {
                41 + (slot as u8 - 8)
            }
        }
    }
}

/// Width, depth, height in millimeters by tooth type (FDI last digit).
fn tooth_size_mm(fdi: u8) -> (f64, f64, f64) {
    match fdi % 10 {
        1 | 2 => (5.0, 4.6, 6.0),
        3 => (5.4, 5.4, 7.0),
        4 | 5 => (6.0, 6.4, 5.5),
        _ => (7.2, 7.6, 5.0),
    }
}

/// Arch centerline; `s` in [-1, 1].
fn centerline(s: f64) -> [f64; 2] {
    [ARCH_HALF_WIDTH * s, ARCH_DEPTH * (1.0 - s * s)]
}

/// d(centerline)/du where u in [0, 1] and s = 2u - 1.
fn centerline_tangent(s: f64) -> [f64; 2] {
    [2.0 * ARCH_HALF_WIDTH, -4.0 * ARCH_DEPTH * s]
}

/// Cumulative arc length table over `n + 1` uniform samples of u.
fn arc_length_table(n: usize) -> Vec<f64> {
    let mut acc = Vec::with_capacity(n + 1);
    acc.push(0.0);
    let mut total = 0.0;
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        let t = centerline_tangent(2.0 * u - 1.0);
        total += (t[0] * t[0] + t[1] * t[1]).sqrt() / n as f64;
        acc.push(total);
    }
    acc
}

/// Inverts the arc-length table: parameter u at arc-length fraction `frac`.
fn u_at_arc_fraction(table: &[f64], frac: f64) -> f64 {
    let target = frac * table[table.len() - 1];
    let idx = table.partition_point(|&l| l < target).max(1);
    let (l0, l1) = (table[idx - 1], table[idx]);
    let t = if l1 > l0 { (target - l0) / (l1 - l0) } else { 0.0 };
    ((idx - 1) as f64 + t) / (table.len() - 1) as f64
}

/// Generates one labeled synthetic dental scan. Bit-identical per config.
pub fn generate_scan(cfg: &SynthConfig) -> TriMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teeth_count = cfg.teeth_count.clamp(1, SLOTS);

    // Incisors-first priority: the first `teeth_count` codes are placed.
    let mut priority: Vec<u8> = Vec::with_capacity(SLOTS);
    for pair in 0..8 {
        let slot_right = 8 + pair; // 41.. / 11..
        let slot_left = 7 - pair; // 31.. / 21..
        priority.push(slot_fdi(cfg.jaw, slot_left));
        priority.push(slot_fdi(cfg.jaw, slot_right));
    }
    let placed: std::collections::HashSet<u8> =
        priority.iter().copied().take(teeth_count).collect();

    let arc = arc_length_table(1024);
    let ridge_height = RIDGE_HEIGHT * (1.0 + 0.1 * rng.gen_range(-1.0..1.0));

    let mut teeth: Vec<Tooth> = Vec::new();
    for slot in 0..SLOTS {
        let fdi = slot_fdi(cfg.jaw, slot);
        if !placed.contains(&fdi) {
            continue;
        }
        // One fixed draw per candidate tooth keeps the stream stable no
        // matter which teeth end up missing.
        let missing = rng.gen_range(0.0..1.0) < cfg.missing_prob;
        let jitter = rng.gen_range(-1.0..1.0);
        let size_jitter = 1.0 + 0.06 * rng.gen_range(-1.0..1.0);
        let height_jitter = 1.0 + 0.08 * rng.gen_range(-1.0..1.0);
        let v_offset = 0.03 * rng.gen_range(-1.0..1.0);
        if missing {
            continue;
        }

        let slot_frac = (slot as f64 + 0.5) / SLOTS as f64;
        let u_center = u_at_arc_fraction(&arc, slot_frac) + cfg.crowding * jitter / SLOTS as f64;
        let (w, d, h) = tooth_size_mm(fdi);
        let t = centerline_tangent(2.0 * u_center - 1.0);
        let speed = (t[0] * t[0] + t[1] * t[1]).sqrt(); // mm per u unit
        teeth.push(Tooth {
            fdi,
            u_center,
            v_center: 0.5 + v_offset,
            ru: 0.5 * w * size_jitter / speed,
            rv: 0.5 * d * size_jitter / STRIP_WIDTH,
            height: h * height_jitter,
        });
    }

    let n_u = (100.0 * 2.0f64.sqrt().powi(cfg.resolution.min(3) as i32)).round() as usize;
    let n_v = (n_u / 4).max(12);

    let height_at = |u: f64, v: f64| -> f64 {
        let mut z = ridge_height * (-((v - 0.5) / 0.22).powi(2)).exp();
        for t in &teeth {
            let rho4 = ((u - t.u_center) / t.ru).powi(4) + ((v - t.v_center) / t.rv).powi(4);
            if rho4 < 1.0 {
                z += t.height * (1.0 - rho4);
            }
        }
        z
    };
    let label_at = |u: f64, v: f64| -> u8 {
        let mut best: Option<(f64, u8)> = None;
        for t in &teeth {
            let rho4 = ((u - t.u_center) / t.ru).powi(4) + ((v - t.v_center) / t.rv).powi(4);
            if rho4 < 1.0 && best.map_or(true, |(b, _)| rho4 < b) {
                best = Some((rho4, t.fdi));
            }
        }
        best.map_or(0, |(_, fdi)| fdi)
    };
    let position = |u: f64, v: f64| -> [f64; 3] {
        let s = 2.0 * u - 1.0;
        let c = centerline(s);
        let t = centerline_tangent(s);
        let tl = (t[0] * t[0] + t[1] * t[1]).sqrt();
        let lateral = [t[1] / tl, -t[0] / tl];
        let off = (v - 0.5) * STRIP_WIDTH;
        [c[0] + off * lateral[0], c[1] + off * lateral[1], height_at(u, v)]
    };

    let mut vertices = Vec::with_capacity((n_u + 1) * (n_v + 1));
    for iu in 0..=n_u {
        for iv in 0..=n_v {
            vertices.push(position(iu as f64 / n_u as f64, iv as f64 / n_v as f64));
        }
    }
    let vid = |iu: usize, iv: usize| (iu * (n_v + 1) + iv) as u32;
    let mut faces = Vec::with_capacity(2 * n_u * n_v);
    let mut labels = Vec::with_capacity(2 * n_u * n_v);
    for iu in 0..n_u {
        for iv in 0..n_v {
            let quad = [vid(iu, iv), vid(iu + 1, iv), vid(iu + 1, iv + 1), vid(iu, iv + 1)];
            faces.push([quad[0], quad[1], quad[2]]);
            faces.push([quad[0], quad[2], quad[3]]);
            let uc = |t: f64| (iu as f64 + t) / n_u as f64;
            let vc = |t: f64| (iv as f64 + t) / n_v as f64;
            labels.push(label_at(uc(2.0 / 3.0), vc(1.0 / 3.0)));
            labels.push(label_at(uc(1.0 / 3.0), vc(2.0 / 3.0)));
        }
    }

    TriMesh::new(vertices, faces, Some(labels)).expect("generated arch is valid")
}

/// Unit icosphere: icosahedron subdivided `subdivisions` times, vertices
/// projected to the unit sphere. Closed manifold, useful as a curvature
/// oracle (total angle deficit 4 pi, three neighbors per face).
pub fn icosphere(subdivisions: u32) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let norm = (1.0 + phi * phi).sqrt();
    let (a, b) = (1.0 / norm, phi / norm);
    let mut vertices: Vec<[f64; 3]> = vec![
        [-a, b, 0.0],
        [a, b, 0.0],
        [-a, -b, 0.0],
        [a, -b, 0.0],
        [0.0, -a, b],
        [0.0, a, b],
        [0.0, -a, -b],
        [0.0, a, -b],
        [b, 0.0, -a],
        [b, 0.0, a],
        [-b, 0.0, -a],
        [-b, 0.0, a],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
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

    for _ in 0..subdivisions {
        let mut midpoints: std::collections::HashMap<(u32, u32), u32> =
            std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0u32; 3];
            for e in 0..3 {
                let (p, q) = (f[e], f[(e + 1) % 3]);
                let key = (p.min(q), p.max(q));
                mids[e] = *midpoints.entry(key).or_insert_with(|| {
                    let (vp, vq) = (vertices[p as usize], vertices[q as usize]);
                    let m = [vp[0] + vq[0], vp[1] + vq[1], vp[2] + vq[2]];
                    let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    vertices.push([m[0] / len, m[1] / len, m[2] / len]);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([f[0], mids[0], mids[2]]);
            next.push([f[1], mids[1], mids[0]]);
            next.push([f[2], mids[2], mids[1]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        faces = next;
    }
    TriMesh::new(vertices, faces, None).expect("icosphere is valid")
}

/// Flat unit-spaced grid in the z = 0 plane with `nx` x `ny` quads, each
/// split into two triangles. Interior vertices have zero angle deficit.
pub fn flat_grid(nx: usize, ny: usize) -> TriMesh {
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([i as f64, j as f64, 0.0]);
        }
    }
    let vid = |i: usize, j: usize| (j * (nx + 1) + i) as u32;
    let mut faces = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            faces.push([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)]);
            faces.push([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces, None).expect("grid is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdi;

    #[test]
    fn full_mandible_has_fourteen_teeth_without_third_molars() {
        let mesh = generate_scan(&SynthConfig::default());
        let labels = mesh.face_labels.as_ref().unwrap();
        let mut present: Vec<u8> = labels.iter().copied().filter(|&l| l != 0).collect();
        present.sort_unstable();
        present.dedup();
        assert_eq!(present.len(), 14);
        for l in &present {
            assert!(fdi::Jaw::Mandible.permits_fdi(*l));
            assert!(*l != 38 && *l != 48, "third molar {l} placed at count 14");
        }
    }

    #[test]
    fn missing_prob_one_leaves_only_gingiva() {
        let mesh = generate_scan(&SynthConfig {
            missing_prob: 1.0,
            ..Default::default()
        });
        assert!(mesh.face_labels.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn labels_legal_for_each_jaw() {
        for jaw in [Jaw::Maxillary, Jaw::Mandible] {
            let mesh = generate_scan(&SynthConfig {
                seed: 11,
                jaw,
                teeth_count: 16,
                missing_prob: 0.2,
                crowding: 0.4,
                ..Default::default()
            });
            for &l in mesh.face_labels.as_ref().unwrap() {
                assert!(jaw.permits_fdi(l), "label {l} illegal for {jaw}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SynthConfig {
            seed: 42,
            missing_prob: 0.3,
            crowding: 0.5,
            ..Default::default()
        };
        let a = generate_scan(&cfg);
        let b = generate_scan(&cfg);
        assert_eq!(a, b);
        let c = generate_scan(&SynthConfig { seed: 43, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_missing_rate_matches_probability() {
        let mut missing = 0usize;
        let mut total = 0usize;
        for seed in 0..100 {
            let cfg = SynthConfig {
                seed,
                missing_prob: 0.2,
                ..Default::default()
            };
            let mesh = generate_scan(&cfg);
            let labels = mesh.face_labels.unwrap();
            let mut present: std::collections::HashSet<u8> =
                labels.iter().copied().filter(|&l| l != 0).collect();
            present.remove(&0);
            total += 14;
            missing += 14 - present.len();
        }
        let rate = missing as f64 / total as f64;
        assert!((rate - 0.2).abs() < 0.05, "missing rate {rate}");
    }

    #[test]
    fn face_count_tracks_resolution() {
        for (level, lo, hi) in [(0u32, 4_000, 6_000), (3, 30_000, 41_000)] {
            let mesh = generate_scan(&SynthConfig {
                resolution: level,
                ..Default::default()
            });
            assert!(
                (lo..=hi).contains(&mesh.face_count()),
                "level {level}: {} faces",
                mesh.face_count()
            );
        }
    }

    #[test]
    fn icosphere_is_closed_and_unit() {
        let m = icosphere(2);
        assert_eq!(m.face_count(), 20 * 16);
        for v in &m.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_grid_counts() {
        let m = flat_grid(4, 3);
        assert_eq!(m.vertex_count(), 20);
        assert_eq!(m.face_count(), 24);
    }
}
