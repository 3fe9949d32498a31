//! Numeric kernels behind the graph primitives.
//!
//! Convolution runs as im2col + the packed GEMM. Batch members are processed
//! by independent tasks writing disjoint output slices; cross-batch
//! reductions (weight/bias gradients) sum fixed-size chunks in a fixed order,
//! so every kernel is bit-deterministic regardless of thread count.

use rayon::prelude::*;

use super::gemm::{gemm_prepacked, gemm_with_pack, pack_b, pack_b_transposed};
use super::graph::Padding;

/// Images per task for gradient reductions over the batch.
const REDUCE_CHUNK: usize = 16;

/// Strip height of the packed-GEMM micro-kernel (see gemm.rs).
const MR: usize = 8;

pub(crate) fn conv_out_extent(n: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            assert!(n >= k, "valid conv needs input >= kernel");
            ((n - k) / stride + 1, 0)
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(n);
            // floor division: the extra pixel of odd padding goes on the high side
            (out, pad_total / 2)
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        padding: Padding,
    ) -> Self {
        let (oh, pad_t) = conv_out_extent(h, kh, stride.0, padding);
        let (ow, pad_l) = conv_out_extent(w, kw, stride.1, padding);
        ConvGeom { h, w, cin, cout, kh, kw, sh: stride.0, sw: stride.1, oh, ow, pad_t, pad_l }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unroll one image (h×w×cin) into patch rows (oh·ow × kh·kw·cin).
/// Reference layout for the fused strip packers below; tests compare against it.
#[cfg(test)]
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let patch = g.patch_len();
    cols.fill(0.0);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
            for ky in 0..g.kh {
                let y = (oy * g.sh + ky) as isize - g.pad_t as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                let x_base = ox * g.sw;
                let kx0 = g.pad_l.saturating_sub(x_base);
                let kx1 = g.kw.min(g.w + g.pad_l - x_base);
                if kx0 >= kx1 {
                    continue;
                }
                let src0 = (y as usize * g.w + x_base + kx0 - g.pad_l) * g.cin;
                let dst0 = (ky * g.kw + kx0) * g.cin;
                let len = (kx1 - kx0) * g.cin;
                row[dst0..dst0 + len].copy_from_slice(&x[src0..src0 + len]);
            }
        }
    }
}

/// Pack an MR-strip of patch rows [r0, r0+rows) over the k-slice
/// [k0, k0+kc_len) straight from the image: out[kk*MR + r] = patch row
/// (r0+r), position (k0+kk). The full patch matrix is never materialized.
fn pack_patch_strip(
    x: &[f64],
    g: &ConvGeom,
    r0: usize,
    rows: usize,
    k0: usize,
    kc_len: usize,
    out: &mut [f64],
) {
    out[..kc_len * MR].fill(0.0);
    let cin = g.cin;
    for r in 0..rows {
        let pix = r0 + r;
        let (oy, ox) = (pix / g.ow, pix % g.ow);
        let x_base = ox * g.sw;
        for ky in 0..g.kh {
            let y = (oy * g.sh + ky) as isize - g.pad_t as isize;
            if y < 0 || y >= g.h as isize {
                continue;
            }
            let seg0 = ky * g.kw * cin;
            let kx0 = g.pad_l.saturating_sub(x_base);
            let kx1 = g.kw.min(g.w + g.pad_l - x_base);
            if kx0 >= kx1 {
                continue;
            }
            // intersect the valid [kx0, kx1) span with the k-slice
            let a = (seg0 + kx0 * cin).max(k0);
            let b = (seg0 + kx1 * cin).min(k0 + kc_len);
            if a >= b {
                continue;
            }
            // patch position k maps to image offset base + (k − seg0)
            let base =
                ((y as usize * g.w + x_base) * cin) as isize - (g.pad_l * cin) as isize;
            let src0 = (base + (a - seg0) as isize) as usize;
            let mut dst = (a - k0) * MR + r;
            for &v in &x[src0..src0 + (b - a)] {
                out[dst] = v;
                dst += MR;
            }
        }
    }
}

/// Transposed orientation for weight gradients: strip rows are patch
/// positions, columns are patch rows (out-pixels). out[kk*MR + r] = patch row
/// (k0+kk), position (r0+r).
fn pack_patch_strip_t(
    x: &[f64],
    g: &ConvGeom,
    r0: usize,
    rows: usize,
    k0: usize,
    kc_len: usize,
    out: &mut [f64],
) {
    out[..kc_len * MR].fill(0.0);
    let cin = g.cin;
    for r in 0..rows {
        let kpos = r0 + r;
        let ci = kpos % cin;
        let kx = (kpos / cin) % g.kw;
        let ky = kpos / (cin * g.kw);
        // walk out-pixels [k0, k0+kc_len) one output row at a time
        let mut p = k0;
        let p_end = k0 + kc_len;
        while p < p_end {
            let oy = p / g.ow;
            let row_end = p_end.min((oy + 1) * g.ow);
            let y = (oy * g.sh + ky) as isize - g.pad_t as isize;
            if y >= 0 && y < g.h as isize {
                // ox range with ox*sw + kx − pad_l inside [0, w)
                let ox_lo = if g.pad_l > kx { (g.pad_l - kx).div_ceil(g.sw) } else { 0 };
                let ox_hi = if g.w + g.pad_l > kx {
                    g.ow.min((g.w - 1 + g.pad_l - kx) / g.sw + 1)
                } else {
                    0
                };
                let lo = p.max(oy * g.ow + ox_lo);
                let hi = row_end.min(oy * g.ow + ox_hi);
                for p2 in lo..hi {
                    let ox = p2 - oy * g.ow;
                    let src = (y as usize * g.w + ox * g.sw + kx - g.pad_l) * cin + ci;
                    out[(p2 - k0) * MR + r] = x[src];
                }
            }
            p = row_end;
        }
    }
}

/// Scatter-add of patch-row gradients back to the image (reverse of im2col).
fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dcols[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
            for ky in 0..g.kh {
                let y = (oy * g.sh + ky) as isize - g.pad_t as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                let x_base = ox * g.sw;
                let kx0 = g.pad_l.saturating_sub(x_base);
                let kx1 = g.kw.min(g.w + g.pad_l - x_base);
                if kx0 >= kx1 {
                    continue;
                }
                let dst0 = (y as usize * g.w + x_base + kx0 - g.pad_l) * g.cin;
                let src0 = (ky * g.kw + kx0) * g.cin;
                let len = (kx1 - kx0) * g.cin;
                for (d, s) in dx[dst0..dst0 + len].iter_mut().zip(&row[src0..src0 + len]) {
                    *d += s;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    batch: usize,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    g: &ConvGeom,
) -> Vec<f64> {
    let patch = g.patch_len();
    let in_len = g.h * g.w * g.cin;
    let out_len = g.oh * g.ow * g.cout;
    let pb = pack_b(patch, g.cout, w);
    let mut out = vec![0.0; batch * out_len];
    x.par_chunks(in_len)
        .zip(out.par_chunks_mut(out_len))
        .for_each(|(xi, oi)| {
            gemm_with_pack(g.oh * g.ow, &pb, oi, |r0, rows, k0, kc_len, pa| {
                pack_patch_strip(xi, g, r0, rows, k0, kc_len, pa)
            });
            for row in oi.chunks_mut(g.cout) {
                for (o, b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    batch: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let patch = g.patch_len();
    let in_len = g.h * g.w * g.cin;
    let out_len = g.oh * g.ow * g.cout;
    let rows = g.oh * g.ow;

    let dx = need_dx.then(|| {
        let pbt = pack_b_transposed(g.cout, patch, w);
        let mut dx = vec![0.0; batch * in_len];
        dy.par_chunks(out_len)
            .zip(dx.par_chunks_mut(in_len))
            .for_each_init(Vec::new, |dcols, (dyi, dxi)| {
                dcols.clear();
                dcols.resize(rows * patch, 0.0);
                gemm_prepacked(rows, dyi, false, &pbt, dcols, false);
                col2im_add(dcols, g, dxi);
            });
        dx
    });

    let (dw, db) = if need_dw {
        // Per-chunk partials, then a fixed-order sum over chunks.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = x
            .par_chunks(REDUCE_CHUNK * in_len)
            .zip(dy.par_chunks(REDUCE_CHUNK * out_len))
            .map(|(xc, dyc)| {
                let mut dw_part = vec![0.0; patch * g.cout];
                let mut db_part = vec![0.0; g.cout];
                for (xi, dyi) in xc.chunks(in_len).zip(dyc.chunks(out_len)) {
                    let pb = pack_b(rows, g.cout, dyi);
                    gemm_with_pack(patch, &pb, &mut dw_part, |r0, rws, k0, kc_len, pa| {
                        pack_patch_strip_t(xi, g, r0, rws, k0, kc_len, pa)
                    });
                    for row in dyi.chunks(g.cout) {
                        for (d, v) in db_part.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                (dw_part, db_part)
            })
            .collect();
        let mut dw = vec![0.0; patch * g.cout];
        let mut db = vec![0.0; g.cout];
        for (dw_part, db_part) in &partials {
            for (a, b) in dw.iter_mut().zip(dw_part) {
                *a += b;
            }
            for (a, b) in db.iter_mut().zip(db_part) {
                *a += b;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    ConvGrads { dx, dw, db }
}

pub(crate) fn dense_forward(m: usize, k: usize, n: usize, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let pb = pack_b(k, n, w);
    gemm_prepacked(m, x, false, &pb, &mut out, true);
    for row in out.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub(crate) struct DenseGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn dense_backward(
    m: usize,
    k: usize,
    n: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> DenseGrads {
    let dx = need_dx.then(|| {
        let pbt = pack_b_transposed(n, k, w);
        let mut dx = vec![0.0; m * k];
        gemm_prepacked(m, dy, false, &pbt, &mut dx, true);
        dx
    });
    let (dw, db) = if need_dw {
        let pb = pack_b(m, n, dy);
        let mut dw = vec![0.0; k * n];
        gemm_prepacked(k, x, true, &pb, &mut dw, true);
        let mut db = vec![0.0; n];
        for row in dy.chunks(n) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    DenseGrads { dx, dw, db }
}

pub(crate) fn matmul_forward(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let pb = pack_b(k, n, b);
    gemm_prepacked(m, a, false, &pb, &mut out, true);
    out
}

pub(crate) fn maxpool2d_forward(
    batch: usize,
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    window: (usize, usize),
    stride: (usize, usize),
) -> (usize, usize, Vec<f64>) {
    let (ph, pw) = window;
    let (sh, sw) = stride;
    let oh = (h - ph) / sh + 1;
    let ow = (w - pw) / sw + 1;
    let in_len = h * w * c;
    let out_len = oh * ow * c;
    let mut out = vec![0.0; batch * out_len];
    x.par_chunks(in_len)
        .zip(out.par_chunks_mut(out_len))
        .for_each(|(xi, oi)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cell = &mut oi[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                    cell.copy_from_slice(&xi[((oy * sh) * w + ox * sw) * c..][..c]);
                    for ky in 0..ph {
                        for kx in 0..pw {
                            if ky == 0 && kx == 0 {
                                continue;
                            }
                            let src = &xi[((oy * sh + ky) * w + ox * sw + kx) * c..][..c];
                            for (m, v) in cell.iter_mut().zip(src) {
                                if *v > *m {
                                    *m = *v;
                                }
                            }
                        }
                    }
                }
            }
        });
    (oh, ow, out)
}

/// Gradient routes to the first maximal element in row-major window order.
pub(crate) fn maxpool2d_backward(
    batch: usize,
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    window: (usize, usize),
    stride: (usize, usize),
    dy: &[f64],
) -> Vec<f64> {
    let (ph, pw) = window;
    let (sh, sw) = stride;
    let oh = (h - ph) / sh + 1;
    let ow = (w - pw) / sw + 1;
    let in_len = h * w * c;
    let out_len = oh * ow * c;
    let mut dx = vec![0.0; batch * in_len];
    x.par_chunks(in_len)
        .zip(dy.par_chunks(out_len))
        .zip(dx.par_chunks_mut(in_len))
        .for_each(|((xi, dyi), dxi)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..ph {
                            for kx in 0..pw {
                                let idx = ((oy * sh + ky) * w + ox * sw + kx) * c + ch;
                                if xi[idx] > best {
                                    best = xi[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dxi[best_idx] += dyi[(oy * ow + ox) * c + ch];
                    }
                }
            }
        });
    dx
}

pub(crate) fn global_avg_pool_forward(batch: usize, x: &[f64], hw: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * c];
    let inv = 1.0 / hw as f64;
    for (xi, oi) in x.chunks(hw * c).zip(out.chunks_mut(c)) {
        for cell in xi.chunks(c) {
            for (o, v) in oi.iter_mut().zip(cell) {
                *o += v;
            }
        }
        for o in oi.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward(batch: usize, dy: &[f64], hw: usize, c: usize) -> Vec<f64> {
    let mut dx = vec![0.0; batch * hw * c];
    let inv = 1.0 / hw as f64;
    for (dyi, dxi) in dy.chunks(c).zip(dx.chunks_mut(hw * c)) {
        for cell in dxi.chunks_mut(c) {
            for (d, g) in cell.iter_mut().zip(dyi) {
                *d = g * inv;
            }
        }
    }
    dx
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub(crate) fn sigmoid_forward(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

pub(crate) fn sigmoid_backward(out: &[f64], dy: &[f64]) -> Vec<f64> {
    out.iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Row-wise softmax with max-shift stabilization.
pub(crate) fn softmax_forward(x: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub(crate) fn softmax_backward(out: &[f64], dy: &[f64], row_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; out.len()];
    for ((prow, grow), drow) in out
        .chunks(row_len)
        .zip(dy.chunks(row_len))
        .zip(dx.chunks_mut(row_len))
    {
        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
        for ((d, &p), &g) in drow.iter_mut().zip(prow).zip(grow) {
            *d = p * (g - dot);
        }
    }
    dx
}

/// Per-row softmax cross-entropy from logits via log-sum-exp.
pub(crate) fn cross_entropy_forward(z: &[f64], row_len: usize, labels: &[u8]) -> Vec<f64> {
    z.chunks(row_len)
        .zip(labels)
        .map(|(row, &t)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .collect()
}

pub(crate) fn cross_entropy_backward(
    z: &[f64],
    row_len: usize,
    labels: &[u8],
    dy: &[f64],
) -> Vec<f64> {
    let mut dz = softmax_forward(z, row_len);
    for ((drow, &t), &g) in dz.chunks_mut(row_len).zip(labels).zip(dy) {
        drow[t as usize] -= 1.0;
        for d in drow.iter_mut() {
            *d *= g;
        }
    }
    dz
}

/// Probabilities are clamped to [1e-12, 1-1e-12] before the logs; the
/// documented domain is p strictly inside (0, 1).
pub(crate) const BCE_EPS: f64 = 1e-12;

pub(crate) fn bce_forward(p: &[f64], targets: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(targets)
        .map(|(&p, &s)| {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(s * pc.ln() + (1.0 - s) * (1.0 - pc).ln())
        })
        .collect()
}

pub(crate) fn bce_backward(p: &[f64], targets: &[f64], dy: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(targets)
        .zip(dy)
        .map(|((&p, &s), &g)| {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            g * (pc - s) / (pc * (1.0 - pc))
        })
        .collect()
}

pub(crate) fn euclidean_norm_forward(x: &[f64], row_len: usize) -> Vec<f64> {
    x.chunks(row_len)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn euclidean_norm_backward(x: &[f64], out: &[f64], row_len: usize, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((row, drow), (&norm, &g)) in x
        .chunks(row_len)
        .zip(dx.chunks_mut(row_len))
        .zip(out.iter().zip(dy))
    {
        if norm == 0.0 {
            continue;
        }
        let scale = g / norm;
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = v * scale;
        }
    }
    dx
}

pub(crate) fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<bool> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>() >= rate).collect()
}

pub(crate) fn dropout_forward(x: &[f64], rate: f64, seed: u64) -> Vec<f64> {
    if rate == 0.0 {
        return x.to_vec();
    }
    let mask = dropout_mask(x.len(), rate, seed);
    let scale = 1.0 / (1.0 - rate);
    x.iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v * scale } else { 0.0 })
        .collect()
}

pub(crate) fn dropout_backward(dy: &[f64], rate: f64, seed: u64) -> Vec<f64> {
    if rate == 0.0 {
        return dy.to_vec();
    }
    let mask = dropout_mask(dy.len(), rate, seed);
    let scale = 1.0 / (1.0 - rate);
    dy.iter()
        .zip(&mask)
        .map(|(&g, &keep)| if keep { g * scale } else { 0.0 })
        .collect()
}

pub(crate) fn sign_value(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct convolution sum, no im2col.
    fn conv_naive(batch: usize, x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; batch * g.oh * g.ow * g.cout];
        for b in 0..batch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for co in 0..g.cout {
                        let mut s = bias[co];
                        for ky in 0..g.kh {
                            let y = (oy * g.sh + ky) as isize - g.pad_t as isize;
                            if y < 0 || y >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let xx = (ox * g.sw + kx) as isize - g.pad_l as isize;
                                if xx < 0 || xx >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((b * g.h + y as usize) * g.w + xx as usize)
                                        * g.cin
                                        + ci];
                                    let wv = w[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((b * g.oh + oy) * g.ow + ox) * g.cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for padding in [Padding::Same, Padding::Valid] {
            for _ in 0..12 {
                let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
                let k = rng.random_range(1..4).min(h).min(w);
                let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
                let stride = rng.random_range(1..3);
                let batch = rng.random_range(1..3);
                let g = ConvGeom::new(h, w, cin, cout, k, k, (stride, stride), padding);
                let x = rand_vec(&mut rng, batch * h * w * cin);
                let wt = rand_vec(&mut rng, k * k * cin * cout);
                let bias = rand_vec(&mut rng, cout);
                let got = conv2d_forward(batch, &x, &wt, &bias, &g);
                let want = conv_naive(batch, &x, &wt, &bias, &g);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-11, "{} vs {} ({:?})", a, b, padding);
                }
            }
        }
    }

    #[test]
    fn identity_kernel_same_padding_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g = ConvGeom::new(5, 5, 1, 1, 1, 1, (1, 1), Padding::Same);
        let x = rand_vec(&mut rng, 25);
        let out = conv2d_forward(1, &x, &[1.0], &[0.0], &g);
        assert_eq!(out, x);
    }

    #[test]
    fn fused_strip_packers_match_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for padding in [Padding::Same, Padding::Valid] {
            let (h, w, cin, cout, k, stride) = (7, 6, 2, 3, 3, 2);
            let g = ConvGeom::new(h, w, cin, cout, k, k, (stride, stride), padding);
            let x = rand_vec(&mut rng, h * w * cin);
            let patch = g.patch_len();
            let rows = g.oh * g.ow;
            let mut cols = vec![0.0; rows * patch];
            im2col(&x, &g, &mut cols);
            let kc = 5usize;
            for (r0, k0) in [(0usize, 0usize), (3, 4), (rows.saturating_sub(2), patch - kc)] {
                let nrows = MR.min(rows - r0);
                let kc_len = kc.min(patch - k0);
                let mut strip = vec![0.0; kc_len * MR];
                pack_patch_strip(&x, &g, r0, nrows, k0, kc_len, &mut strip);
                for r in 0..nrows {
                    for kk in 0..kc_len {
                        assert_eq!(strip[kk * MR + r], cols[(r0 + r) * patch + k0 + kk]);
                    }
                }
                // transposed orientation: rows are patch positions
                let nrows_t = MR.min(patch - k0);
                let kc_t = kc.min(rows - r0);
                let mut strip_t = vec![0.0; kc_t * MR];
                pack_patch_strip_t(&x, &g, k0, nrows_t, r0, kc_t, &mut strip_t);
                for r in 0..nrows_t {
                    for kk in 0..kc_t {
                        assert_eq!(strip_t[kk * MR + r], cols[(r0 + kk) * patch + k0 + r]);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_takes_window_max_and_routes_to_first() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let (oh, ow, out) = maxpool2d_forward(1, &x, 2, 2, 1, (2, 2), (2, 2));
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(out, vec![4.0]);

        // tie: both 5.0, gradient goes to the first in row-major order
        let x = vec![5.0, 5.0, 0.0, 0.0];
        let dx = maxpool2d_backward(1, &x, 2, 2, 1, (2, 2), (2, 2), &[1.0]);
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let z = rand_vec(&mut rng, 40);
        let p = softmax_forward(&z, 10);
        for row in p.chunks(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        // symmetry case
        assert_eq!(softmax_forward(&[0.0, 0.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let ce = cross_entropy_forward(&[0.0; 10], 10, &[7]);
        assert!((ce[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // inverted scaling: mean over many samples approaches the input
        let rate = 0.3;
        let n = 100_000;
        let x = vec![1.0; n];
        let out = dropout_forward(&x, rate, 99);
        let mean = out.iter().sum::<f64>() / n as f64;
        // binomial std err of the scaled mean
        let se = ((rate * (1.0 - rate)) / n as f64).sqrt() / (1.0 - rate);
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {} se {}", mean, se);
    }
}
