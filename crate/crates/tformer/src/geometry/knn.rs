//! Exact k-nearest-neighbor graphs over 3D points.
//!
//! Two independent paths produce identical graphs: a kd-tree and a
//! brute-force scan. Ties in distance are broken by the smaller point
//! index, so rows are fully deterministic; the kd-tree therefore only
//! prunes a subtree when the plane distance strictly exceeds the current
//! worst candidate.

use super::GeometryError;

/// Fixed k-nearest-neighbor graph; `neighbors` is `n x k` row-major, each
/// row sorted by (distance, index) ascending with the point itself excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<u32>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    idx: u32,
}

impl Cand {
    fn beats(&self, other: &Cand) -> bool {
        self.d2 < other.d2 || (self.d2 == other.d2 && self.idx < other.idx)
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact kNN via kd-tree. Requires `coords.len() > k`.
pub fn knn_graph(coords: &[[f64; 3]], k: usize) -> Result<KnnGraph, GeometryError> {
    if coords.len() <= k {
        return Err(GeometryError::TooFewPoints {
            points: coords.len(),
            k,
        });
    }
    let tree = KdTree::build(coords);
    let mut neighbors = vec![0u32; coords.len() * k];
    for (i, row) in neighbors.chunks_mut(k).enumerate() {
        tree.k_nearest(coords, coords[i], i as u32, k, row);
    }
    Ok(KnnGraph { k, neighbors })
}

/// Exact kNN by scanning all pairs; the oracle for the kd-tree path.
pub fn knn_graph_brute(coords: &[[f64; 3]], k: usize) -> Result<KnnGraph, GeometryError> {
    if coords.len() <= k {
        return Err(GeometryError::TooFewPoints {
            points: coords.len(),
            k,
        });
    }
    let n = coords.len();
    let mut neighbors = vec![0u32; n * k];
    let mut cands: Vec<Cand> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cands.clear();
        for j in 0..n {
            if j != i {
                cands.push(Cand {
                    d2: dist2(coords[i], coords[j]),
                    idx: j as u32,
                });
            }
        }
        cands.sort_unstable_by(|a, b| {
            a.d2.total_cmp(&b.d2).then(a.idx.cmp(&b.idx))
        });
        for (slot, c) in neighbors[i * k..(i + 1) * k].iter_mut().zip(&cands) {
            *slot = c.idx;
        }
    }
    Ok(KnnGraph { k, neighbors })
}

struct KdNode {
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
    /// Leaf payload: range into `order`.
    start: u32,
    end: u32,
}

struct KdTree {
    nodes: Vec<KdNode>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 16;

impl KdTree {
    fn build(coords: &[[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..coords.len() as u32).collect();
        let mut nodes = Vec::new();
        let n = coords.len();
        Self::build_rec(coords, &mut order, &mut nodes, 0, n);
        KdTree { nodes, order }
    }

    fn build_rec(
        coords: &[[f64; 3]],
        order: &mut [u32],
        nodes: &mut Vec<KdNode>,
        offset: usize,
        len: usize,
    ) -> u32 {
        let id = nodes.len() as u32;
        if len <= LEAF_SIZE {
            nodes.push(KdNode {
                axis: 3, // leaf marker
                split: 0.0,
                left: 0,
                right: 0,
                start: offset as u32,
                end: (offset + len) as u32,
            });
            return id;
        }
        // Split on the widest axis over this range.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &p in &order[offset..offset + len] {
            let c = coords[p as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&x, &y| (hi[x] - lo[x]).total_cmp(&(hi[y] - lo[y])))
            .unwrap();
        let mid = len / 2;
        order[offset..offset + len].select_nth_unstable_by(mid, |&p, &q| {
            coords[p as usize][axis]
                .total_cmp(&coords[q as usize][axis])
                .then(p.cmp(&q))
        });
        let split = coords[order[offset + mid] as usize][axis];
        nodes.push(KdNode {
            axis: axis as u8,
            split,
            left: 0,
            right: 0,
            start: 0,
            end: 0,
        });
        let left = Self::build_rec(coords, order, nodes, offset, mid);
        let right = Self::build_rec(coords, order, nodes, offset + mid, len - mid);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    fn k_nearest(&self, coords: &[[f64; 3]], query: [f64; 3], skip: u32, k: usize, out: &mut [u32]) {
        // `best` is kept sorted ascending by (d2, idx); worst candidate last.
        let mut best: Vec<Cand> = Vec::with_capacity(k + 1);
        self.search(0, coords, query, skip, k, &mut best);
        for (slot, c) in out.iter_mut().zip(&best) {
            *slot = c.idx;
        }
    }

    fn search(&self, node: u32, coords: &[[f64; 3]], query: [f64; 3], skip: u32, k: usize, best: &mut Vec<Cand>) {
        let n = &self.nodes[node as usize];
        if n.axis == 3 {
            for &p in &self.order[n.start as usize..n.end as usize] {
                if p == skip {
                    continue;
                }
                let cand = Cand {
                    d2: dist2(query, coords[p as usize]),
                    idx: p,
                };
                if best.len() < k || cand.beats(best.last().unwrap()) {
                    let pos = best.partition_point(|b| b.beats(&cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            return;
        }
        let axis = n.axis as usize;
        let delta = query[axis] - n.split;
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, coords, query, skip, k, best);
        let plane_d2 = delta * delta;
        // An equal-distance point on the far side can still win on index,
        // so only a strictly larger plane distance prunes.
        if best.len() < k || plane_d2 <= best.last().unwrap().d2 {
            self.search(far, coords, query, skip, k, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn collinear_points_pick_nearest_two() {
        let coords = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        let g = knn_graph(&coords, 2).unwrap();
        assert_eq!(g.row(0), &[1, 2]);
        assert_eq!(g.row(1), &[0, 2]);
        assert_eq!(g.row(3), &[2, 1]);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let coords = random_cloud(1, 8);
        assert!(matches!(
            knn_graph(&coords, 8),
            Err(GeometryError::TooFewPoints { .. })
        ));
        assert!(knn_graph(&coords, 7).is_ok());
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        for seed in 0..5 {
            let coords = random_cloud(seed, 500);
            let fast = knn_graph(&coords, 13).unwrap();
            let brute = knn_graph_brute(&coords, 13).unwrap();
            assert_eq!(fast, brute, "seed {seed}");
        }
    }

    #[test]
    fn kd_tree_matches_brute_force_with_ties() {
        // Grid points produce massive distance ties; index order must decide.
        let mut coords = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..3 {
                    coords.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let fast = knn_graph(&coords, 10).unwrap();
        let brute = knn_graph_brute(&coords, 10).unwrap();
        assert_eq!(fast, brute);
    }

    #[test]
    fn duplicate_points_are_legal_neighbors() {
        let coords = vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let g = knn_graph(&coords, 2).unwrap();
        // Point 1 duplicates point 0: nearest neighbor at distance zero.
        assert_eq!(g.row(0), &[1, 2]);
        assert_eq!(g.row(1), &[0, 2]);
    }

    #[test]
    fn no_self_neighbors() {
        let coords = random_cloud(9, 300);
        let g = knn_graph(&coords, 20).unwrap();
        for i in 0..coords.len() {
            assert!(!g.row(i).contains(&(i as u32)));
        }
    }

    #[test]
    fn permutation_equivariance_in_generic_position() {
        let coords = random_cloud(33, 200);
        let k = 7;
        let base = knn_graph(&coords, k).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut perm: Vec<usize> = (0..coords.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&p| coords[p]).collect();
        let shuffled = knn_graph(&permuted, k).unwrap();

        // inv[old] = new position
        let mut inv = vec![0u32; perm.len()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inv[old_i] = new_i as u32;
        }
        for (new_i, &old_i) in perm.iter().enumerate() {
            let mut expect: Vec<u32> = base.row(old_i).iter().map(|&j| inv[j as usize]).collect();
            expect.sort_unstable();
            let mut got: Vec<u32> = shuffled.row(new_i).to_vec();
            got.sort_unstable();
            assert_eq!(expect, got);
        }
    }
}
