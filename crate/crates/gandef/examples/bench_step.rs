use gandef::tensor::{Graph, Op, Padding, Tensor};
use std::time::Instant;

fn mk(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as u64 ^ seed) % 1000) as f64 * 1e-4 - 0.05).collect()).unwrap()
}

fn time_op(label: &str, reps: usize, mut f: impl FnMut()) {
    f();
    let t = Instant::now();
    for _ in 0..reps { f(); }
    println!("{label:28} {:7.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }

    let batch = 128usize;
    let x = mk(&[batch, 28, 28, 1], 1);
    let w1 = mk(&[5, 5, 1, 32], 2);
    let b1 = mk(&[32], 3);
    let r1in = mk(&[batch, 14, 14, 32], 11);
    let w2 = mk(&[5, 5, 32, 64], 4);
    let b2 = mk(&[64], 5);
    let f_in = mk(&[batch, 3136], 12);
    let wf1 = mk(&[3136, 1024], 6);
    let bf1 = mk(&[1024], 7);
    let dy_c2 = mk(&[batch, 14, 14, 64], 13);
    let dy_f1 = mk(&[batch, 1024], 14);
    let c1out = mk(&[batch, 28, 28, 32], 15);

    time_op("conv1 fwd", 4, || {
        let mut g = Graph::new();
        let xi = g.input(x.clone(), false);
        let wi = g.input(w1.clone(), false);
        let bi = g.input(b1.clone(), false);
        g.apply(Op::Conv2d { stride: (1,1), padding: Padding::Same }, &[xi, wi, bi]).unwrap();
    });
    time_op("conv2 fwd", 4, || {
        let mut g = Graph::new();
        let xi = g.input(r1in.clone(), false);
        let wi = g.input(w2.clone(), false);
        let bi = g.input(b2.clone(), false);
        g.apply(Op::Conv2d { stride: (1,1), padding: Padding::Same }, &[xi, wi, bi]).unwrap();
    });
    time_op("fc1 fwd", 4, || {
        let mut g = Graph::new();
        let xi = g.input(f_in.clone(), false);
        let wi = g.input(wf1.clone(), false);
        let bi = g.input(bf1.clone(), false);
        g.apply(Op::Dense, &[xi, wi, bi]).unwrap();
    });
    // conv2 full backward via graph
    time_op("conv2 fwd+bwd(all)", 4, || {
        let mut g = Graph::new();
        let xi = g.input(r1in.clone(), true);
        let wi = g.input(w2.clone(), true);
        let bi = g.input(b2.clone(), true);
        let c = g.apply(Op::Conv2d { stride: (1,1), padding: Padding::Same }, &[xi, wi, bi]).unwrap();
        let f = g.apply(Op::Flatten, &[c]).unwrap();
        let n = g.apply(Op::EuclideanNorm, &[f]).unwrap();
        let l = g.apply(Op::MeanReduce, &[n]).unwrap();
        g.backward(l).unwrap();
    });
    time_op("fc1 fwd+bwd(all)", 4, || {
        let mut g = Graph::new();
        let xi = g.input(f_in.clone(), true);
        let wi = g.input(wf1.clone(), true);
        let bi = g.input(bf1.clone(), true);
        let d = g.apply(Op::Dense, &[xi, wi, bi]).unwrap();
        let n = g.apply(Op::EuclideanNorm, &[d]).unwrap();
        let l = g.apply(Op::MeanReduce, &[n]).unwrap();
        g.backward(l).unwrap();
    });
    time_op("maxpool1 fwd", 8, || {
        let mut g = Graph::new();
        let xi = g.input(c1out.clone(), false);
        g.apply(Op::MaxPool2d { window: (2,2), stride: (2,2) }, &[xi]).unwrap();
    });
    time_op("relu 3.2M", 8, || {
        let mut g = Graph::new();
        let xi = g.input(c1out.clone(), false);
        g.apply(Op::Relu, &[xi]).unwrap();
    });
    let _ = (dy_c2, dy_f1);
}
