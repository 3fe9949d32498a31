//! Finite-difference gradient oracle and the per-primitive check suite.
//!
//! The oracle is a central difference evaluated coordinate by coordinate and
//! never touches the backward pass it is checking. The suite draws random
//! instances per primitive, keeps inputs clear of relu/maxpool/clip kinks,
//! and compares analytic gradients for every differentiable input.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, Op, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Central difference (f(x+h·e_i) − f(x−h·e_i)) / 2h per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidAttribute(format!("finite difference step {} must be > 0", h)));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient evaluation"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// One randomized instance of a primitive under check: leaf tensors plus a
/// builder that applies the op (and any reduction to a scalar loss).
struct CheckCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(lo..hi))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values kept at least `margin` away from `kink`.
fn uniform_off_kink(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, margin: f64) -> Tensor {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if (*v - kink).abs() < margin {
            *v = kink + margin * if rng.random::<bool>() { 2.0 } else { -2.0 };
        }
    }
    t
}

/// Separate the top two values of each pooling window by at least `gap`.
/// Windows are disjoint (stride == window) in the generated instances.
fn separate_pool_ties(x: &mut Tensor, h: usize, w: usize, c: usize, win: usize, gap: f64) {
    let (oh, ow) = (h / win, w / win);
    for b in 0..x.shape()[0] {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    let mut second = f64::NEG_INFINITY;
                    for ky in 0..win {
                        for kx in 0..win {
                            let idx = ((b * h + oy * win + ky) * w + ox * win + kx) * c + ch;
                            let v = x.data()[idx];
                            if v > best {
                                second = best;
                                best = v;
                                best_idx = idx;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    if best - second < gap {
                        x.data_mut()[best_idx] = best + gap;
                    }
                }
            }
        }
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes) as u8).collect()
}

/// One random instance per catalog primitive.
fn catalog(rng: &mut ChaCha8Rng) -> Vec<CheckCase> {
    let mut cases = Vec::new();

    let rows = rng.random_range(2..5);
    let cols = rng.random_range(2..6);
    cases.push(CheckCase {
        name: "add",
        inputs: vec![uniform(rng, &[rows, cols], -1.0, 1.0), uniform(rng, &[rows, cols], -1.0, 1.0)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Add, ids).unwrap();
            g.apply(Op::MeanReduce, &[s]).unwrap()
        }),
    });
    cases.push(CheckCase {
        name: "subtract",
        inputs: vec![uniform(rng, &[rows, cols], -1.0, 1.0), uniform(rng, &[rows, cols], -1.0, 1.0)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Sub, ids).unwrap();
            let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
            g.apply(Op::MeanReduce, &[n]).unwrap()
        }),
    });
    let c = rng.random_range(-2.0..2.0);
    cases.push(CheckCase {
        name: "scalar_multiply",
        inputs: vec![uniform(rng, &[rows, cols], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let s = g.apply(Op::ScalarMul { c }, ids).unwrap();
            g.apply(Op::MeanReduce, &[s]).unwrap()
        }),
    });

    let (m, kk, n) = (rng.random_range(2..5), rng.random_range(2..6), rng.random_range(2..5));
    cases.push(CheckCase {
        name: "matmul",
        inputs: vec![uniform(rng, &[m, kk], -1.0, 1.0), uniform(rng, &[kk, n], -1.0, 1.0)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::MatMul, ids).unwrap();
            let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
            g.apply(Op::MeanReduce, &[n]).unwrap()
        }),
    });
    cases.push(CheckCase {
        name: "dense",
        inputs: vec![
            uniform(rng, &[m, kk], -1.0, 1.0),
            uniform(rng, &[kk, n], -1.0, 1.0),
            uniform(rng, &[n], -0.5, 0.5),
        ],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Dense, ids).unwrap();
            let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
            g.apply(Op::MeanReduce, &[n]).unwrap()
        }),
    });

    for (name, padding) in [("conv2d_same", Padding::Same), ("conv2d_valid", Padding::Valid)] {
        let (b, h, w) = (rng.random_range(1..3), rng.random_range(4..8), rng.random_range(4..8));
        let (cin, cout) = (rng.random_range(1..3), rng.random_range(1..3));
        let kside = rng.random_range(1..4).min(h).min(w);
        let stride = rng.random_range(1..3);
        cases.push(CheckCase {
            name,
            inputs: vec![
                uniform(rng, &[b, h, w, cin], -1.0, 1.0),
                uniform(rng, &[kside, kside, cin, cout], -1.0, 1.0),
                uniform(rng, &[cout], -0.5, 0.5),
            ],
            build: Box::new(move |g, ids| {
                let s = g.apply(Op::Conv2d { stride: (stride, stride), padding }, ids).unwrap();
                let f = g.apply(Op::Flatten, &[s]).unwrap();
                let n = g.apply(Op::EuclideanNorm, &[f]).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    {
        let (b, c) = (rng.random_range(1..3), rng.random_range(1..3));
        let win = 2;
        let (h, w) = (4, 6);
        let mut x = uniform(rng, &[b, h, w, c], -1.0, 1.0);
        separate_pool_ties(&mut x, h, w, c, win, 0.02);
        cases.push(CheckCase {
            name: "maxpool2d",
            inputs: vec![x],
            build: Box::new(move |g, ids| {
                let s = g
                    .apply(Op::MaxPool2d { window: (win, win), stride: (win, win) }, ids)
                    .unwrap();
                let f = g.apply(Op::Flatten, &[s]).unwrap();
                let n = g.apply(Op::EuclideanNorm, &[f]).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    {
        let (b, h, w, c) = (rng.random_range(1..3), 3, 4, rng.random_range(1..4));
        cases.push(CheckCase {
            name: "global_average_pool",
            inputs: vec![uniform(rng, &[b, h, w, c], -1.0, 1.0)],
            build: Box::new(|g, ids| {
                let s = g.apply(Op::GlobalAvgPool, ids).unwrap();
                let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    cases.push(CheckCase {
        name: "flatten",
        inputs: vec![uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Flatten, ids).unwrap();
            let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
            g.apply(Op::MeanReduce, &[n]).unwrap()
        }),
    });

    cases.push(CheckCase {
        name: "relu",
        inputs: vec![uniform_off_kink(rng, &[rows, cols], 0.0, 0.02)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Relu, ids).unwrap();
            let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
            g.apply(Op::MeanReduce, &[n]).unwrap()
        }),
    });

    cases.push(CheckCase {
        name: "sigmoid",
        inputs: vec![uniform(rng, &[rows, cols], -2.0, 2.0)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Sigmoid, ids).unwrap();
            let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
            g.apply(Op::MeanReduce, &[n]).unwrap()
        }),
    });

    {
        let r = uniform(rng, &[cols, 1], -1.0, 1.0);
        cases.push(CheckCase {
            name: "softmax",
            inputs: vec![uniform(rng, &[rows, cols], -2.0, 2.0), r],
            build: Box::new(|g, ids| {
                let s = g.apply(Op::Softmax, &[ids[0]]).unwrap();
                let proj = g.apply(Op::MatMul, &[s, ids[1]]).unwrap();
                let n = g.apply(Op::EuclideanNorm, &[proj]).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    {
        let rate = rng.random_range(0.1..0.6);
        let seed = rng.random::<u64>();
        cases.push(CheckCase {
            name: "dropout",
            inputs: vec![uniform(rng, &[rows, cols], -1.0, 1.0)],
            build: Box::new(move |g, ids| {
                let s = g.apply(Op::Dropout { rate, seed }, ids).unwrap();
                let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    {
        let mut x = uniform(rng, &[rows, cols], -1.0, 1.0);
        // keep each row norm clear of zero
        for row in 0..rows {
            let norm: f64 =
                x.data()[row * cols..(row + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.1 {
                x.data_mut()[row * cols] += 0.5;
            }
        }
        cases.push(CheckCase {
            name: "euclidean_norm",
            inputs: vec![x],
            build: Box::new(|g, ids| {
                let n = g.apply(Op::EuclideanNorm, ids).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    {
        let labels = random_labels(rng, rows, cols);
        cases.push(CheckCase {
            name: "cross_entropy_from_logits",
            inputs: vec![uniform(rng, &[rows, cols], -2.0, 2.0)],
            build: Box::new(move |g, ids| {
                let ce = g.apply(Op::CrossEntropyLogits { labels: labels.clone() }, ids).unwrap();
                g.apply(Op::MeanReduce, &[ce]).unwrap()
            }),
        });
    }

    {
        let targets: Vec<f64> = (0..rows).map(|_| f64::from(rng.random::<bool>())).collect();
        cases.push(CheckCase {
            name: "binary_cross_entropy",
            inputs: vec![uniform(rng, &[rows], 0.05, 0.95)],
            build: Box::new(move |g, ids| {
                let b = g.apply(Op::BinaryCrossEntropy { targets: targets.clone() }, ids).unwrap();
                g.apply(Op::MeanReduce, &[b]).unwrap()
            }),
        });
    }

    cases.push(CheckCase {
        name: "sign",
        inputs: vec![uniform_off_kink(rng, &[rows, cols], 0.0, 0.02)],
        build: Box::new(|g, ids| {
            let s = g.apply(Op::Sign, ids).unwrap();
            g.apply(Op::MeanReduce, &[s]).unwrap()
        }),
    });

    {
        let mut x = uniform_off_kink(rng, &[rows, cols], -0.5, 0.02);
        for v in x.data_mut() {
            if (*v - 0.5).abs() < 0.02 {
                *v += 0.05;
            }
        }
        cases.push(CheckCase {
            name: "clip",
            inputs: vec![x],
            build: Box::new(|g, ids| {
                let s = g.apply(Op::Clip { lo: -0.5, hi: 0.5 }, ids).unwrap();
                let n = g.apply(Op::EuclideanNorm, &[s]).unwrap();
                g.apply(Op::MeanReduce, &[n]).unwrap()
            }),
        });
    }

    cases.push(CheckCase {
        name: "mean_reduce",
        inputs: vec![uniform(rng, &[rows, cols], -1.0, 1.0)],
        build: Box::new(|g, ids| g.apply(Op::MeanReduce, ids).unwrap()),
    });

    cases
}

/// Worst relative error seen for one primitive.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Outcome of the full oracle suite.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub per_op: Vec<OpCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_op.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }

    pub fn all_within_tolerance(&self) -> bool {
        self.per_op.iter().all(|o| o.max_rel_err < self.tolerance)
    }
}

const FD_STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;

/// Compare analytic and finite-difference gradients for one case.
/// Returns the worst relative error across all differentiable inputs,
/// measured as ‖analytic − fd‖∞ / max(1, ‖fd‖∞).
fn check_case(case: &CheckCase) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = (case.build)(&mut g, &ids);
    let grads = g.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        let f = |probe: &Tensor| {
            let mut g2 = Graph::new();
            let ids2: Vec<NodeId> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g2.input(if j == i { probe.clone() } else { t.clone() }, false))
                .collect();
            let out = (case.build)(&mut g2, &ids2);
            g2.output(out).item()
        };
        let fd = finite_difference_gradient(f, x, FD_STEP).expect("finite differences");
        let analytic = grads.wrt(&g, ids[i]);
        let scale = fd.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let err = analytic.max_abs_diff(&fd) / scale;
        worst = worst.max(err);
    }
    worst
}

/// Run `instances_per_op` random checks for every catalog primitive.
pub fn run_gradcheck_suite(instances_per_op: usize, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_op: Vec<OpCheck> = Vec::new();
    for _ in 0..instances_per_op {
        for case in catalog(&mut rng) {
            let err = check_case(&case);
            match per_op.iter_mut().find(|o| o.name == case.name) {
                Some(entry) => {
                    entry.instances += 1;
                    entry.max_rel_err = entry.max_rel_err.max(err);
                }
                None => per_op.push(OpCheck { name: case.name, instances: 1, max_rel_err: err }),
            }
        }
    }
    GradcheckReport { per_op, tolerance: TOLERANCE }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope_at_two() {
        let f = |t: &Tensor| t.data()[0] * t.data()[0];
        let x = Tensor::from_vec(vec![2.0]);
        let g = finite_difference_gradient(f, &x, 1e-3).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |_: &Tensor| 7.25;
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let g = finite_difference_gradient(f, &x, 1e-4).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_matches_closed_form() {
        // d/dz of CE(softmax(z), t) is softmax(z) − onehot(t)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = uniform(&mut rng, &[1, 3], -2.0, 2.0);
        let f = |probe: &Tensor| {
            let mut g = Graph::new();
            let id = g.input(probe.clone(), false);
            let ce = g.apply(Op::CrossEntropyLogits { labels: vec![1] }, &[id]).unwrap();
            let loss = g.apply(Op::MeanReduce, &[ce]).unwrap();
            g.output(loss).item()
        };
        let fd = finite_difference_gradient(f, &z, 1e-4).unwrap();
        let probs = crate::tensor::kernels::softmax_forward(z.data(), 3);
        let expect = [probs[0], probs[1] - 1.0, probs[2]];
        for (a, b) in fd.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let f = |_: &Tensor| 0.0;
        let x = Tensor::from_vec(vec![0.0]);
        assert!(finite_difference_gradient(f, &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let f = |t: &Tensor| 1.0 / t.data()[0];
        let x = Tensor::from_vec(vec![1e-4]);
        // probing x−h crosses the pole
        assert!(matches!(
            finite_difference_gradient(f, &x, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn two_layer_dense_relu_network_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let w1 = uniform(&mut rng, &[3, 5], -1.0, 1.0);
        let b1 = uniform(&mut rng, &[5], -0.2, 0.2);
        let w2 = uniform(&mut rng, &[5, 2], -1.0, 1.0);
        let b2 = uniform(&mut rng, &[2], -0.2, 0.2);
        let inputs = [x, w1, b1, w2, b2];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let h = g.apply(Op::Dense, &[ids[0], ids[1], ids[2]]).unwrap();
            let h = g.apply(Op::Relu, &[h]).unwrap();
            let z = g.apply(Op::Dense, &[h, ids[3], ids[4]]).unwrap();
            let ce = g.apply(Op::CrossEntropyLogits { labels: vec![0, 1, 0, 1] }, &[z]).unwrap();
            g.apply(Op::MeanReduce, &[ce]).unwrap()
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss).unwrap();
        for (i, leaf) in inputs.iter().enumerate() {
            let f = |probe: &Tensor| {
                let mut g2 = Graph::new();
                let ids2: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.input(if j == i { probe.clone() } else { t.clone() }, false))
                    .collect();
                let out = build(&mut g2, &ids2);
                g2.output(out).item()
            };
            let fd = finite_difference_gradient(f, leaf, 1e-4).unwrap();
            let analytic = grads.wrt(&g, ids[i]);
            let scale = fd.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
            assert!(
                analytic.max_abs_diff(&fd) / scale < 1e-4,
                "input {} disagrees with finite differences",
                i
            );
        }
    }
}
