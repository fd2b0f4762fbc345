//! Dense row-major matrix kernels.
//!
//! Everything funnels into one accumulating kernel, `C += A * B`, parallelized
//! over row blocks so results are bit-identical for any thread count. A * Bᵀ
//! and Aᵀ * B are expressed as an explicit transpose followed by the plain
//! kernel. The f32 path dispatches at runtime to an AVX-512 or AVX2+FMA
//! build of the same loop; the wide `k`-unrolled inner loop over contiguous
//! rows is what the auto-vectorizer wants.

use rayon::prelude::*;

use super::scalar::{cast_slice, cast_slice_mut, Scalar};

/// Rows of B kept resident per pass; sized so a panel of a wide B stays in L2.
const K_PANEL: usize = 256;
/// Rows of C handed to one rayon task.
const ROW_BLOCK: usize = 32;
/// Below this many multiply-adds the parallel/SIMD setup is not worth it.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c += a * b` where `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
pub fn matmul_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "matmul: lhs length");
    assert_eq!(b.len(), k * n, "matmul: rhs length");
    assert_eq!(c.len(), m * n, "matmul: out length");
    if m * k * n == 0 {
        return;
    }
    if let (Some(cf), Some(af), Some(bf)) = (
        cast_slice_mut::<T, f32>(c),
        cast_slice::<T, f32>(a),
        cast_slice::<T, f32>(b),
    ) {
        return f32_matmul_into(cf, af, bf, m, k, n);
    }
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(cb, ab)| ikj_generic(cb, ab, b, ab.len() / k, k, n));
    } else {
        ikj_generic(c, a, b, m, k, n);
    }
}

/// `a * b` into a fresh matrix.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_into(&mut c, a, b, m, k, n);
    c
}

/// `a * bᵀ` where `a` is `m x k` and `b` is `n x k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `c += a * bᵀ`.
pub fn matmul_nt_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_into(c, a, &bt, m, k, n);
}

/// `c += aᵀ * b` where `a` is `k x m` (so `aᵀ` is `m x k`) and `b` is `k x n`.
pub fn matmul_tn_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    matmul_into(c, &at, b, m, k, n);
}

/// Cache-blocked transpose of a `rows x cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(a.len(), rows * cols, "transpose: length");
    const B: usize = 32;
    let mut out = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

fn ikj_generic<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

fn detect_isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            return Isa::Avx512;
        }
        if std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("fma")
        {
            return Isa::Avx2;
        }
    }
    Isa::Portable
}

fn isa() -> Isa {
    static ISA: std::sync::OnceLock<Isa> = std::sync::OnceLock::new();
    *ISA.get_or_init(detect_isa)
}

fn f32_matmul_into(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    let run = |cb: &mut [f32], ab: &[f32], mb: usize| match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { block_avx512(cb, ab, b, mb, k, n) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { block_avx2(cb, ab, b, mb, k, n) },
        _ => block_f32(cb, ab, b, mb, k, n),
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(cb, ab)| run(cb, ab, ab.len() / k));
    } else {
        run(c, a, m);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f", enable = "fma")]
unsafe fn block_avx512(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    block_f32(c, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn block_avx2(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    block_f32(c, a, b, m, k, n);
}

/// Register-tile width; one tile of C is `4 x NR` accumulators that live in
/// SIMD registers across the whole `k` loop.
const NR: usize = 32;

/// Row-block kernel: 4x32 register tiles over the bulk of C, `ikj` cleanup
/// for leftover rows/columns and for matrices too narrow to tile.
#[inline(always)]
fn block_f32(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    if n < NR || k == 0 {
        ikj_f32(c, a, b, m, k, n, 0, n);
        return;
    }
    let jtiles = n / NR;
    let jend = jtiles * NR;
    let mut i = 0;
    while i + 4 <= m {
        for jt in 0..jtiles {
            tile_4xnr(c, a, b, i, jt * NR, k, n);
        }
        i += 4;
    }
    while i < m {
        for jt in 0..jtiles {
            tile_1xnr(c, a, b, i, jt * NR, k, n);
        }
        i += 1;
    }
    if jend < n {
        ikj_f32(c, a, b, m, k, n, jend, n);
    }
}

#[inline(always)]
fn tile_4xnr(c: &mut [f32], a: &[f32], b: &[f32], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc0 = [0.0f32; NR];
    let mut acc1 = [0.0f32; NR];
    let mut acc2 = [0.0f32; NR];
    let mut acc3 = [0.0f32; NR];
    let (a0, a1, a2, a3) = (
        &a[i0 * k..(i0 + 1) * k],
        &a[(i0 + 1) * k..(i0 + 2) * k],
        &a[(i0 + 2) * k..(i0 + 3) * k],
        &a[(i0 + 3) * k..(i0 + 4) * k],
    );
    for kk in 0..k {
        let bs = &b[kk * n + j0..kk * n + j0 + NR];
        let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
        for j in 0..NR {
            acc0[j] = v0.mul_add(bs[j], acc0[j]);
            acc1[j] = v1.mul_add(bs[j], acc1[j]);
            acc2[j] = v2.mul_add(bs[j], acc2[j]);
            acc3[j] = v3.mul_add(bs[j], acc3[j]);
        }
    }
    for (r, acc) in [acc0, acc1, acc2, acc3].iter().enumerate() {
        let crow = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
        for j in 0..NR {
            crow[j] += acc[j];
        }
    }
}

#[inline(always)]
fn tile_1xnr(c: &mut [f32], a: &[f32], b: &[f32], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [0.0f32; NR];
    let arow = &a[i0 * k..(i0 + 1) * k];
    for kk in 0..k {
        let bs = &b[kk * n + j0..kk * n + j0 + NR];
        let v = arow[kk];
        for j in 0..NR {
            acc[j] = v.mul_add(bs[j], acc[j]);
        }
    }
    let crow = &mut c[i0 * n + j0..i0 * n + j0 + NR];
    for j in 0..NR {
        crow[j] += acc[j];
    }
}

/// Cleanup kernel over the column range `js..je`; `k` is unrolled by four so
/// each pass over a C row retires four fused multiply-adds per lane.
#[inline(always)]
fn ikj_f32(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize, js: usize, je: usize) {
    for kp in (0..k).step_by(K_PANEL) {
        let kend = (kp + K_PANEL).min(k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n + js..i * n + je];
            let mut kk = kp;
            while kk + 4 <= kend {
                let a0 = arow[kk];
                let a1 = arow[kk + 1];
                let a2 = arow[kk + 2];
                let a3 = arow[kk + 3];
                let b0 = &b[kk * n + js..kk * n + je];
                let b1 = &b[(kk + 1) * n + js..(kk + 1) * n + je];
                let b2 = &b[(kk + 2) * n + js..(kk + 2) * n + je];
                let b3 = &b[(kk + 3) * n + js..(kk + 3) * n + je];
                for j in 0..je - js {
                    let mut acc = crow[j];
                    acc = a0.mul_add(b0[j], acc);
                    acc = a1.mul_add(b1[j], acc);
                    acc = a2.mul_add(b2[j], acc);
                    acc = a3.mul_add(b3[j], acc);
                    crow[j] = acc;
                }
                kk += 4;
            }
            while kk < kend {
                let av = arow[kk];
                let brow = &b[kk * n + js..kk * n + je];
                for j in 0..je - js {
                    crow[j] = av.mul_add(brow[j], crow[j]);
                }
                kk += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn arb_matrix(seed: u64, len: usize) -> Vec<f64> {
        // Small deterministic LCG; good enough for kernel cross-checks.
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_matches_triple_loop_f64() {
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 2), (7, 5, 9), (33, 17, 21), (64, 64, 64)] {
            let a = arb_matrix(m as u64, m * k);
            let b = arb_matrix(n as u64 + 77, k * n);
            let got = matmul(&a, &b, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "m={m} k={k} n={n}");
            }
        }
    }

    #[test]
    fn matmul_f32_matches_f64_reference() {
        for &(m, k, n) in &[(5, 8, 3), (40, 70, 50), (130, 257, 65)] {
            let a64 = arb_matrix(m as u64 * 3 + 1, m * k);
            let b64 = arb_matrix(n as u64 * 5 + 2, k * n);
            let a32: Vec<f32> = a64.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b64.iter().map(|&x| x as f32).collect();
            let got = matmul(&a32, &b32, m, k, n);
            let want = naive(&a64, &b64, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    (*g as f64 - w).abs() < 1e-3 * (1.0 + w.abs()),
                    "m={m} k={k} n={n}: {g} vs {w}"
                );
            }
        }
    }

    #[test]
    fn transposed_variants_match_plain() {
        let (m, k, n) = (19, 23, 11);
        let a = arb_matrix(9, m * k);
        let b = arb_matrix(10, k * n);
        let want = matmul(&a, &b, m, k, n);

        let bt = transpose(&b, k, n);
        let got_nt = matmul_nt(&a, &bt, m, k, n);
        let at = transpose(&a, m, k);
        let mut got_tn = vec![0.0; m * n];
        matmul_tn_into(&mut got_tn, &at, &b, m, k, n);

        for ((x, y), w) in got_nt.iter().zip(&got_tn).zip(&want) {
            assert!((x - w).abs() < 1e-12);
            assert!((y - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = arb_matrix(4, 37 * 53);
        let t = transpose(&a, 37, 53);
        let back = transpose(&t, 53, 37);
        assert_eq!(a, back);
    }

    #[test]
    #[ignore = "throughput probe, run with --ignored --nocapture"]
    fn bench_matmul_f32() {
        for &(m, k, n, reps) in &[
            (2048usize, 2048usize, 64usize, 20usize),
            (2048, 64, 2048, 20),
            (2048, 800, 512, 20),
            (2048, 16, 2048, 20),
        ] {
            let a: Vec<f32> = arb_matrix(1, m * k).iter().map(|&x| x as f32).collect();
            let b: Vec<f32> = arb_matrix(2, k * n).iter().map(|&x| x as f32).collect();
            let mut c = vec![0.0f32; m * n];
            matmul_into(&mut c, &a, &b, m, k, n); // warm up
            let t0 = std::time::Instant::now();
            for _ in 0..reps {
                matmul_into(&mut c, &a, &b, m, k, n);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
            println!("matmul {m}x{k}x{n}: {gf:.1} GFLOP/s");
        }
    }
}
