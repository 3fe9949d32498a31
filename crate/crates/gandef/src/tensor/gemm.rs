//! Cache-blocked f64 matrix multiply with SIMD micro-kernels.
//!
//! C += A·B with A (m×k), B (k×n), C (m×n), all row-major. B is packed once
//! into NR-wide column panels and reused across calls (weights in the forward
//! pass, per-layer transposes in the backward pass); A is packed strip by
//! strip so the active strip stays L1-resident while the panels stream. The
//! k-summation order per output element is fixed by the KC blocking and every
//! path accumulates with fused multiply-adds, so results are bit-identical
//! run to run and independent of thread count.
//!
//! Micro-kernels: 8×16 AVX-512, 4×8-quadrant AVX2+FMA, scalar `mul_add`
//! fallback. Dispatch is detected once per process.

use rayon::prelude::*;
use std::sync::OnceLock;

const MR: usize = 8;
const NR: usize = 16;
const KC: usize = 200;

#[derive(Clone, Copy, PartialEq, Debug)]
enum Isa {
    Avx512,
    Avx2,
    Scalar,
}

fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        // Escape hatch for benchmarking kernels against each other.
        match std::env::var("GANDEF_GEMM_KERNEL").as_deref() {
            Ok("avx512") => return Isa::Avx512,
            Ok("avx2") => return Isa::Avx2,
            Ok("scalar") => return Isa::Scalar,
            _ => {}
        }
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
        Isa::Scalar
    })
}

/// B (k×n) packed into NR-wide, zero-padded column panels per KC block.
pub struct PackedB {
    k: usize,
    n: usize,
    n_panels: usize,
    data: Vec<f64>,
}

impl PackedB {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn block(&self, pc: usize, kc_len: usize) -> &[f64] {
        let base = self.n_panels * NR * (pc * KC);
        &self.data[base..base + self.n_panels * NR * kc_len]
    }
}

/// Pack row-major B (k×n).
pub fn pack_b(k: usize, n: usize, b: &[f64]) -> PackedB {
    debug_assert_eq!(b.len(), k * n);
    let n_panels = n.div_ceil(NR);
    let mut data = vec![0.0; n_panels * NR * k];
    // Chunk bounds coincide with KC block bounds, so blocks pack in parallel.
    data.par_chunks_mut(n_panels * NR * KC)
        .enumerate()
        .for_each(|(pc, block)| {
            let k0 = pc * KC;
            let kc_len = KC.min(k - k0);
            for jr in 0..n_panels {
                let panel = &mut block[jr * kc_len * NR..(jr + 1) * kc_len * NR];
                let j0 = jr * NR;
                let jlim = NR.min(n - j0);
                for kk in 0..kc_len {
                    let row = &mut panel[kk * NR..kk * NR + NR];
                    let src = &b[(k0 + kk) * n + j0..];
                    row[..jlim].copy_from_slice(&src[..jlim]);
                    row[jlim..].fill(0.0);
                }
            }
        });
    PackedB { k, n, n_panels, data }
}

/// Pack the transpose of row-major `src` (n×k) as the logical B (k×n).
/// Reads run along the rows of `src`; writes scatter inside the L1-resident
/// panel.
pub fn pack_b_transposed(k: usize, n: usize, src: &[f64]) -> PackedB {
    debug_assert_eq!(src.len(), k * n);
    let n_panels = n.div_ceil(NR);
    let mut data = vec![0.0; n_panels * NR * k];
    data.par_chunks_mut(n_panels * NR * KC)
        .enumerate()
        .for_each(|(pc, block)| {
            let k0 = pc * KC;
            let kc_len = KC.min(k - k0);
            for jr in 0..n_panels {
                let panel = &mut block[jr * kc_len * NR..(jr + 1) * kc_len * NR];
                let j0 = jr * NR;
                let jlim = NR.min(n - j0);
                for jj in 0..jlim {
                    let col = &src[(j0 + jj) * k + k0..][..kc_len];
                    for (kk, &v) in col.iter().enumerate() {
                        panel[kk * NR + jj] = v;
                    }
                }
                if jlim < NR {
                    for kk in 0..kc_len {
                        panel[kk * NR + jlim..kk * NR + NR].fill(0.0);
                    }
                }
            }
        });
    PackedB { k, n, n_panels, data }
}

/// Pack one MR-row strip of A for a KC block, zero-padding tail rows.
/// `rs`/`cs` are element strides of logical A, so a transposed view packs
/// with swapped strides and no intermediate copy.
#[inline]
fn pack_strip(
    a: &[f64],
    row0: usize,
    rows: usize,
    k0: usize,
    kc_len: usize,
    rs: usize,
    cs: usize,
    out: &mut [f64],
) {
    debug_assert!(out.len() >= kc_len * MR);
    if rows < MR {
        out[..kc_len * MR].fill(0.0);
    }
    for r in 0..rows {
        let base = (row0 + r) * rs + k0 * cs;
        if cs == 1 {
            let src = &a[base..base + kc_len];
            for (kk, &v) in src.iter().enumerate() {
                out[kk * MR + r] = v;
            }
        } else {
            for kk in 0..kc_len {
                out[kk * MR + r] = a[base + kk * cs];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{MR, NR};
    use std::arch::x86_64::*;

    macro_rules! body_8x16 {
        ($kc:expr, $pa:expr, $pb:expr, $acc:ident) => {{
            let mut pa = $pa;
            let mut pb = $pb;
            for _ in 0..$kc {
                let b0 = _mm512_loadu_pd(pb);
                let b1 = _mm512_loadu_pd(pb.add(8));
                let a0 = _mm512_set1_pd(*pa);
                $acc[0] = _mm512_fmadd_pd(a0, b0, $acc[0]);
                $acc[1] = _mm512_fmadd_pd(a0, b1, $acc[1]);
                let a1 = _mm512_set1_pd(*pa.add(1));
                $acc[2] = _mm512_fmadd_pd(a1, b0, $acc[2]);
                $acc[3] = _mm512_fmadd_pd(a1, b1, $acc[3]);
                let a2 = _mm512_set1_pd(*pa.add(2));
                $acc[4] = _mm512_fmadd_pd(a2, b0, $acc[4]);
                $acc[5] = _mm512_fmadd_pd(a2, b1, $acc[5]);
                let a3 = _mm512_set1_pd(*pa.add(3));
                $acc[6] = _mm512_fmadd_pd(a3, b0, $acc[6]);
                $acc[7] = _mm512_fmadd_pd(a3, b1, $acc[7]);
                let a4 = _mm512_set1_pd(*pa.add(4));
                $acc[8] = _mm512_fmadd_pd(a4, b0, $acc[8]);
                $acc[9] = _mm512_fmadd_pd(a4, b1, $acc[9]);
                let a5 = _mm512_set1_pd(*pa.add(5));
                $acc[10] = _mm512_fmadd_pd(a5, b0, $acc[10]);
                $acc[11] = _mm512_fmadd_pd(a5, b1, $acc[11]);
                let a6 = _mm512_set1_pd(*pa.add(6));
                $acc[12] = _mm512_fmadd_pd(a6, b0, $acc[12]);
                $acc[13] = _mm512_fmadd_pd(a6, b1, $acc[13]);
                let a7 = _mm512_set1_pd(*pa.add(7));
                $acc[14] = _mm512_fmadd_pd(a7, b0, $acc[14]);
                $acc[15] = _mm512_fmadd_pd(a7, b1, $acc[15]);
                pa = pa.add(MR);
                pb = pb.add(NR);
            }
        }};
    }

    /// Full tile: C[r][0..16] += row sums, written straight into C.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn avx512_full(kc: usize, pa: *const f64, pb: *const f64, c: *mut f64, ldc: usize) {
        let mut acc = [_mm512_setzero_pd(); 16];
        body_8x16!(kc, pa, pb, acc);
        for r in 0..MR {
            let crow = c.add(r * ldc);
            let lo = _mm512_add_pd(_mm512_loadu_pd(crow), acc[2 * r]);
            let hi = _mm512_add_pd(_mm512_loadu_pd(crow.add(8)), acc[2 * r + 1]);
            _mm512_storeu_pd(crow, lo);
            _mm512_storeu_pd(crow.add(8), hi);
        }
    }

    /// Edge tile: write the MR×NR sums to a bounce buffer.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn avx512_tile(kc: usize, pa: *const f64, pb: *const f64, out: *mut f64) {
        let mut acc = [_mm512_setzero_pd(); 16];
        body_8x16!(kc, pa, pb, acc);
        for r in 0..MR {
            _mm512_storeu_pd(out.add(r * NR), acc[2 * r]);
            _mm512_storeu_pd(out.add(r * NR + 8), acc[2 * r + 1]);
        }
    }

    /// One 4-row × 8-column quadrant of the 8×16 tile; four passes cover it
    /// without spilling ymm registers.
    #[target_feature(enable = "avx2,fma")]
    unsafe fn avx2_quadrant(
        kc: usize,
        pa: *const f64,
        pb: *const f64,
        out: *mut f64,
        r0: usize,
        c0: usize,
    ) {
        let mut acc = [_mm256_setzero_pd(); 8];
        let mut pa = pa.add(r0);
        let mut pb = pb.add(c0);
        for _ in 0..kc {
            let b0 = _mm256_loadu_pd(pb);
            let b1 = _mm256_loadu_pd(pb.add(4));
            for r in 0..4 {
                let ar = _mm256_set1_pd(*pa.add(r));
                acc[2 * r] = _mm256_fmadd_pd(ar, b0, acc[2 * r]);
                acc[2 * r + 1] = _mm256_fmadd_pd(ar, b1, acc[2 * r + 1]);
            }
            pa = pa.add(MR);
            pb = pb.add(NR);
        }
        for r in 0..4 {
            let dst = out.add((r0 + r) * NR + c0);
            _mm256_storeu_pd(dst, acc[2 * r]);
            _mm256_storeu_pd(dst.add(4), acc[2 * r + 1]);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn avx2_tile(kc: usize, pa: *const f64, pb: *const f64, out: *mut f64) {
        avx2_quadrant(kc, pa, pb, out, 0, 0);
        avx2_quadrant(kc, pa, pb, out, 0, 8);
        avx2_quadrant(kc, pa, pb, out, 4, 0);
        avx2_quadrant(kc, pa, pb, out, 4, 8);
    }
}

fn scalar_tile(kc: usize, pa: &[f64], pb: &[f64], out: &mut [f64; MR * NR]) {
    out.fill(0.0);
    for kk in 0..kc {
        let arow = &pa[kk * MR..kk * MR + MR];
        let brow = &pb[kk * NR..kk * NR + NR];
        for r in 0..MR {
            let a = arow[r];
            let dst = &mut out[r * NR..r * NR + NR];
            for (d, &b) in dst.iter_mut().zip(brow) {
                *d = a.mul_add(b, *d);
            }
        }
    }
}

/// Sums for one MR×NR tile into the bounce buffer.
fn kern_tile(which: Isa, kc: usize, pa: &[f64], pb: &[f64], tile: &mut [f64; MR * NR]) {
    match which {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::avx512_tile(kc, pa.as_ptr(), pb.as_ptr(), tile.as_mut_ptr()) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::avx2_tile(kc, pa.as_ptr(), pb.as_ptr(), tile.as_mut_ptr()) },
        _ => scalar_tile(kc, pa, pb, tile),
    }
}

/// Serial C += A·B against pre-packed B, with A delivered strip by strip via
/// `pack`: pack(row0, rows, k0, kc_len, out) must fill out[kk*MR + r] with
/// logical A[row0+r][k0+kk], zero-padding rows beyond `rows`. Keeping the
/// packer abstract lets convolution feed patch rows straight from the image.
///
/// Per KC block all strips are packed up front, then each B panel sweeps the
/// packed block; a panel is read once per block regardless of m.
pub(crate) fn gemm_with_pack<P>(m: usize, pb: &PackedB, c: &mut [f64], mut pack: P)
where
    P: FnMut(usize, usize, usize, usize, &mut [f64]),
{
    let k = pb.k;
    let n = pb.n;
    let which = isa();
    let strips = m.div_ceil(MR);
    let mut pa_block = vec![0.0f64; strips * MR * KC];
    let mut tile = [0.0f64; MR * NR];
    let full_panels = n / NR;
    let tail_rows = m - (strips - 1) * MR;
    for pc in 0..k.div_ceil(KC) {
        let k0 = pc * KC;
        let kc_len = KC.min(k - k0);
        let block = pb.block(pc, kc_len);
        for s in 0..strips {
            let rows = if s + 1 == strips { tail_rows } else { MR };
            pack(s * MR, rows, k0, kc_len, &mut pa_block[s * MR * kc_len..]);
        }
        for jr in 0..pb.n_panels {
            let panel = &block[jr * kc_len * NR..(jr + 1) * kc_len * NR];
            let j0 = jr * NR;
            for s in 0..strips {
                let r0 = s * MR;
                let rows = if s + 1 == strips { tail_rows } else { MR };
                let strip = &pa_block[s * MR * kc_len..];
                if rows == MR && jr < full_panels && which == Isa::Avx512 {
                    #[cfg(target_arch = "x86_64")]
                    unsafe {
                        x86::avx512_full(
                            kc_len,
                            strip.as_ptr(),
                            panel.as_ptr(),
                            c.as_mut_ptr().add(r0 * n + j0),
                            n,
                        );
                    }
                } else {
                    let ncols = NR.min(n - j0);
                    kern_tile(which, kc_len, strip, panel, &mut tile);
                    for r in 0..rows {
                        let crow = &mut c[(r0 + r) * n + j0..][..ncols];
                        for (cv, tv) in crow.iter_mut().zip(&tile[r * NR..r * NR + ncols]) {
                            *cv += tv;
                        }
                    }
                }
            }
        }
    }
}

/// C += A·B against pre-packed B. When `a_transposed`, `a` holds the k×m
/// transpose of the logical m×k A. Row chunks run in parallel when asked;
/// each C element is produced by exactly one task with a fixed k order, so
/// the result does not depend on the thread count.
pub fn gemm_prepacked(
    m: usize,
    a: &[f64],
    a_transposed: bool,
    pb: &PackedB,
    c: &mut [f64],
    parallel: bool,
) {
    let n = pb.n;
    debug_assert_eq!(a.len(), m * pb.k);
    debug_assert_eq!(c.len(), m * n);
    let (rs, cs) = if a_transposed { (1, m) } else { (pb.k, 1) };
    if !parallel || m < 2 * MR {
        gemm_with_pack(m, pb, c, |r0, rows, k0, kc_len, out| {
            pack_strip(a, r0, rows, k0, kc_len, rs, cs, out)
        });
        return;
    }
    let threads = rayon::current_num_threads().max(1);
    let chunk_rows = m.div_ceil(2 * threads).next_multiple_of(MR);
    c.par_chunks_mut(chunk_rows * n)
        .enumerate()
        .for_each(|(i, cchunk)| {
            let base = i * chunk_rows;
            gemm_with_pack(cchunk.len() / n, pb, cchunk, |r0, rows, k0, kc_len, out| {
                pack_strip(a, base + r0, rows, k0, kc_len, rs, cs, out)
            });
        });
}

/// One-shot parallel C += A·B for row-major contiguous operands.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let pb = pack_b(k, n, b);
    gemm_prepacked(m, a, false, &pb, c, true);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_over_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let m = rng.random_range(1..70);
            let k = rng.random_range(1..420);
            let n = rng.random_range(1..50);
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expect = naive(m, k, n, &a, &b);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() <= 1e-11 * (1.0 + y.abs()), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn transposed_a_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let m = rng.random_range(1..40);
            let k = rng.random_range(1..60);
            let n = rng.random_range(1..40);
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            // at holds A^T (k×m)
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let expect = naive(m, k, n, &a, &b);
            let pb = pack_b(k, n, &b);
            let mut c = vec![0.0; m * n];
            gemm_prepacked(m, &at, true, &pb, &mut c, false);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() <= 1e-11 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn packed_transpose_equals_packed_of_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (k, n) = (37, 29);
        // wt is the n×k matrix whose transpose we want as B
        let wt: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = wt[j * k + p];
            }
        }
        let pb1 = pack_b(k, n, &b);
        let pb2 = pack_b_transposed(k, n, &wt);
        assert_eq!(pb1.data, pb2.data);
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (m, k, n) = (130, 300, 33);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c1);
        gemm(m, k, n, &a, &b, &mut c2);
        assert!(c1.iter().zip(&c2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
