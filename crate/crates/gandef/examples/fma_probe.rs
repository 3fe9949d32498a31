use std::time::Instant;

// MR=6, NR=24 body: per k: 3 B loads + 6 broadcasts, 18 FMAs
#[target_feature(enable = "avx512f")]
unsafe fn body_6x24(kc: usize, reps: usize, pa_buf: &[f64], pb_buf: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let mut sink = _mm512_setzero_pd();
    for _ in 0..reps {
        let mut acc = [_mm512_setzero_pd(); 18];
        let mut pa = pa_buf.as_ptr();
        let mut pb = pb_buf.as_ptr();
        for _ in 0..kc {
            let b0 = _mm512_loadu_pd(pb);
            let b1 = _mm512_loadu_pd(pb.add(8));
            let b2 = _mm512_loadu_pd(pb.add(16));
            for r in 0..6 {
                let ar = _mm512_set1_pd(*pa.add(r));
                acc[3*r] = _mm512_fmadd_pd(ar, b0, acc[3*r]);
                acc[3*r+1] = _mm512_fmadd_pd(ar, b1, acc[3*r+1]);
                acc[3*r+2] = _mm512_fmadd_pd(ar, b2, acc[3*r+2]);
            }
            pa = pa.add(6);
            pb = pb.add(24);
        }
        for a in acc { sink = _mm512_add_pd(sink, a); }
    }
    let mut out = [0.0f64; 8];
    _mm512_storeu_pd(out.as_mut_ptr(), sink);
    out.iter().sum()
}

// MR=4, NR=32 body: per k: 4 B loads + 4 broadcasts, 16 FMAs
#[target_feature(enable = "avx512f")]
unsafe fn body_4x32(kc: usize, reps: usize, pa_buf: &[f64], pb_buf: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let mut sink = _mm512_setzero_pd();
    for _ in 0..reps {
        let mut acc = [_mm512_setzero_pd(); 16];
        let mut pa = pa_buf.as_ptr();
        let mut pb = pb_buf.as_ptr();
        for _ in 0..kc {
            let b0 = _mm512_loadu_pd(pb);
            let b1 = _mm512_loadu_pd(pb.add(8));
            let b2 = _mm512_loadu_pd(pb.add(16));
            let b3 = _mm512_loadu_pd(pb.add(24));
            for r in 0..4 {
                let ar = _mm512_set1_pd(*pa.add(r));
                acc[4*r] = _mm512_fmadd_pd(ar, b0, acc[4*r]);
                acc[4*r+1] = _mm512_fmadd_pd(ar, b1, acc[4*r+1]);
                acc[4*r+2] = _mm512_fmadd_pd(ar, b2, acc[4*r+2]);
                acc[4*r+3] = _mm512_fmadd_pd(ar, b3, acc[4*r+3]);
            }
            pa = pa.add(4);
            pb = pb.add(32);
        }
        for a in acc { sink = _mm512_add_pd(sink, a); }
    }
    let mut out = [0.0f64; 8];
    _mm512_storeu_pd(out.as_mut_ptr(), sink);
    out.iter().sum()
}

// MR=8 NR=16 reference (current)
#[target_feature(enable = "avx512f")]
unsafe fn body_8x16(kc: usize, reps: usize, pa_buf: &[f64], pb_buf: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let mut sink = _mm512_setzero_pd();
    for _ in 0..reps {
        let mut acc = [_mm512_setzero_pd(); 16];
        let mut pa = pa_buf.as_ptr();
        let mut pb = pb_buf.as_ptr();
        for _ in 0..kc {
            let b0 = _mm512_loadu_pd(pb);
            let b1 = _mm512_loadu_pd(pb.add(8));
            for r in 0..8 {
                let ar = _mm512_set1_pd(*pa.add(r));
                acc[2*r] = _mm512_fmadd_pd(ar, b0, acc[2*r]);
                acc[2*r+1] = _mm512_fmadd_pd(ar, b1, acc[2*r+1]);
            }
            pa = pa.add(8);
            pb = pb.add(16);
        }
        for a in acc { sink = _mm512_add_pd(sink, a); }
    }
    let mut out = [0.0f64; 8];
    _mm512_storeu_pd(out.as_mut_ptr(), sink);
    out.iter().sum()
}

fn main() {
    unsafe {
        let kc = 160usize;
        let pa = vec![0.5f64; kc * 8];
        let pb = vec![0.25f64; kc * 32];
        let reps = 300_000;
        for _ in 0..2 {
            let t = Instant::now();
            let r = body_8x16(kc, reps, &pa, &pb);
            let f = (reps * kc) as f64 * 256.0 / t.elapsed().as_secs_f64() / 1e9;
            println!("8x16: {f:.1} GF/s ({r:.1})");
            let t = Instant::now();
            let r = body_6x24(kc, reps, &pa, &pb);
            let f = (reps * kc) as f64 * 288.0 / t.elapsed().as_secs_f64() / 1e9;
            println!("6x24: {f:.1} GF/s ({r:.1})");
            let t = Instant::now();
            let r = body_4x32(kc, reps, &pa, &pb);
            let f = (reps * kc) as f64 * 256.0 / t.elapsed().as_secs_f64() / 1e9;
            println!("4x32: {f:.1} GF/s ({r:.1})");
        }
    }
}
