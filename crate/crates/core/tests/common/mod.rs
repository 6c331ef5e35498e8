//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::path::PathBuf;

use ceilcomp::network::{param_key, softmax_xent, Graph, Network};
use ceilcomp::projection::{
    fold_lift, fold_network, insert_projection, overhead_check, random_init, svd_init, weight_matrix, ProjectionPair,
};
use ceilcomp::tensor::{conv2d_backward, conv2d_forward, matmul, truncated_svd, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.sub(b).unwrap().frobenius();
    d / a.frobenius().max(b.frobenius()).max(1e-12)
}

// ---------------------------------------------------------------- gradients

const FD_EPS: f32 = 1e-2;

fn central(x: &mut Tensor, i: usize, eps: f32, f: &mut impl FnMut(&Tensor) -> f64) -> f64 {
    let orig = x.data()[i];
    x.data_mut()[i] = orig + eps;
    let up = f(x);
    x.data_mut()[i] = orig - eps;
    let down = f(x);
    x.data_mut()[i] = orig;
    (up - down) / (2.0 * f64::from(eps))
}

/// Central difference of `f` with respect to every element of `x`.
/// Elements where a half-width step disagrees sit on a kink (ReLU, max
/// pool) and come back as NaN.
fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let wide = central(&mut probe, i, FD_EPS, &mut f);
        let narrow = central(&mut probe, i, FD_EPS / 2.0, &mut f);
        let smooth = (wide - narrow).abs() <= 1e-4 + 1e-3 * wide.abs().max(narrow.abs());
        g.data_mut()[i] = if smooth { wide as f32 } else { f32::NAN };
    }
    g
}

/// Error over the elements where `numeric` is defined, relative to the
/// full analytic gradient.
fn grad_diff(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let (mut d, mut b) = (0.0f64, 0.0f64);
    for (x, y) in analytic.data().iter().zip(numeric.data()) {
        if y.is_nan() {
            continue;
        }
        d += f64::from(x - y).powi(2);
        b += f64::from(*y).powi(2);
    }
    d.sqrt() / analytic.frobenius().max(b.sqrt()).max(1e-12)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// `(label, relative error)` for every parameter of `net` under the loss
/// `softmax_xent(net(x), labels)`.
fn network_grad_errors(tag: &str, net: &Network, x: &Tensor, labels: &[usize]) -> Vec<(String, f64)> {
    let (logits, cache) = net.forward(x, true).unwrap();
    let (_, dlogits) = softmax_xent(&logits, labels).unwrap();
    let grads = net.backward(&cache, &dlogits).unwrap();
    let mut out = Vec::new();
    for key in net.trainable_keys() {
        let base = net.param(&key).unwrap().clone();
        let numeric = numeric_grad(&base, |p| {
            let mut probe = net.clone();
            probe.set_param(&key, p.clone()).unwrap();
            let (l, _) = probe.forward(x, false).unwrap();
            f64::from(softmax_xent(&l, labels).unwrap().0)
        });
        out.push((format!("{tag}:{key}"), grad_diff(&grads[&key], &numeric)));
    }
    out
}

fn seeded_net(text: &str, seed: u64) -> Network {
    let mut net = Network::init(Graph::parse(text).unwrap(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for key in net.params().keys().cloned().collect::<Vec<_>>() {
        let shape = net.param(&key).unwrap().shape().to_vec();
        let t = random_tensor(&shape, &mut rng).scale(0.7);
        net.set_param(&key, t).unwrap();
    }
    net
}

const GRAD_NETS: &[(&str, &str)] = &[
    (
        "conv_relu_pool_dense",
        "input 2x6x6\nconv c1 out=3 k=3 p=1\nrelu r1\nmaxpool p1\nflatten f\ndense fc units=4\n",
    ),
    (
        "strided_residual_gap",
        "input 3x5x5\nconv c1 out=4 k=3 s=2 p=1\nrelu r1\nconv c2 out=4 k=3 p=1\nconv sc out=4 k=1 s=2 in=input\nadd a in=c2,sc\nrelu r2\ngap g\ndense fc units=3\n",
    ),
    (
        "projection_explicit",
        "input 4x4x4\nrelu r0\nproj q rank=2\nconv c out=3 k=3 p=1\nrelu r\nflatten f\ndense fc units=3\n",
    ),
    (
        "projection_folded",
        "input 4x4x4\nrelu r0\nproj q rank=2 lift=folded\nconv c out=3 k=3 p=1\nrelu r\nflatten f\ndense fc units=3\n",
    ),
    (
        "dense_chain",
        "input 6x1x1\ndense d1 units=5\nrelu r\ndense d2 units=4\n",
    ),
];

/// Every backward pass against central finite differences. Returns
/// `(check, relative error)` pairs.
pub fn gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (i, (tag, text)) in GRAD_NETS.iter().enumerate() {
        let net = seeded_net(text, 100 + i as u64);
        let [c, h, w] = net.graph().input_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let x = random_tensor(&[2, c, h, w], &mut rng);
        let classes = net.num_classes();
        let labels = vec![0, classes - 1];
        out.extend(network_grad_errors(tag, &net, &x, &labels));
    }

    // Raw convolution, including the input gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random_tensor(&[2, 2, 5, 5], &mut rng);
        let w = random_tensor(&[3, 2, 3, 3], &mut rng);
        let y = conv2d_forward(&x, &w, None, stride, pad).unwrap();
        let r = random_tensor(y.shape(), &mut rng);
        let (gx, gw, gb) = conv2d_backward(&r, &x, &w, stride, pad).unwrap();
        let nx = numeric_grad(&x, |p| dot(&conv2d_forward(p, &w, None, stride, pad).unwrap(), &r));
        let nw = numeric_grad(&w, |p| dot(&conv2d_forward(&x, p, None, stride, pad).unwrap(), &r));
        let b0 = Tensor::zeros(&[3]);
        let nb = numeric_grad(&b0, |p| dot(&conv2d_forward(&x, &w, Some(p), stride, pad).unwrap(), &r));
        out.push((format!("conv s{stride} p{pad}:x"), grad_diff(&gx, &nx)));
        out.push((format!("conv s{stride} p{pad}:w"), grad_diff(&gw, &nw)));
        out.push((format!("conv s{stride} p{pad}:b"), grad_diff(&gb, &nb)));
    }

    // Loss gradient with respect to logits.
    let logits = random_tensor(&[3, 5], &mut rng).scale(3.0);
    let labels = [4, 0, 2];
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let n = numeric_grad(&logits, |p| f64::from(softmax_xent(p, &labels).unwrap().0));
    out.push(("softmax_xent:logits".into(), grad_diff(&g, &n)));
    out
}

// ----------------------------------------------------------- fold equality

/// Logits with an explicit lift vs the folded kernel on `trials` random
/// networks. Returns the largest relative difference.
pub fn fold_equivalence(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let c = rng.random_range(3..9usize);
        let k = rng.random_range(1..c);
        let c_o = rng.random_range(2..7usize);
        let p = if rng.random_bool(0.5) { 3 } else { 1 };
        let hw = rng.random_range(4..8usize);
        let text = format!(
            "input 2x{hw}x{hw}\nconv c1 out={c} k=3 p=1\nrelu r1\nconv c2 out={c_o} k={p} p={}\nrelu r2\nflatten f\ndense fc units=3\n",
            p / 2
        );
        let net = seeded_net(&text, seed + t as u64);
        let pair = random_init("c1", c, k, seed ^ t as u64).unwrap();
        // Untied matrices exercise the general case.
        let s1 = random_tensor(&[k, c], &mut rng);
        let pair = ProjectionPair::new("c1", s1, pair.s2).unwrap();
        let explicit = insert_projection(&net, &pair).unwrap();
        let (folded, _) = fold_network(&explicit, false).unwrap();
        let x = random_tensor(&[3, 2, hw, hw], &mut rng);
        let (a, _) = explicit.forward(&x, false).unwrap();
        let (b, _) = folded.forward(&x, false).unwrap();
        worst = worst.max(rel_diff(&a, &b));
    }
    worst
}

// --------------------------------------------------------- Eckart-Young

pub struct SvdOptimality {
    pub beaten: usize,
    pub worst_margin: f64,
    pub rank_violations: usize,
}

fn residual(w_hat: &Tensor, pair: &ProjectionPair) -> f64 {
    let approx = matmul(&matmul(w_hat, &pair.s2).unwrap(), &pair.s1).unwrap();
    approx.sub(w_hat).unwrap().frobenius()
}

/// svd_init against 100 random rank-k projectors on each of `weights`
/// random kernels; also checks the rank bound of `w_hat S2 S1`.
pub fn svd_optimality(weights: usize, seed: u64) -> SvdOptimality {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SvdOptimality {
        beaten: 0,
        worst_margin: f64::INFINITY,
        rank_violations: 0,
    };
    for t in 0..weights {
        let c_o = rng.random_range(2..9usize);
        let c = rng.random_range(3..13usize);
        let p = if rng.random_bool(0.5) { 3 } else { 1 };
        let k = rng.random_range(1..c);
        let w = random_tensor(&[c_o, c, p, p], &mut rng);
        let w_hat = weight_matrix(&w).unwrap();
        let pair = svd_init("s", &w, k).unwrap();
        let best = residual(&w_hat, &pair);
        for j in 0..100 {
            let r = random_init("s", c, k, seed * 1000 + (t * 100 + j) as u64).unwrap();
            let margin = residual(&w_hat, &r) - best;
            out.worst_margin = out.worst_margin.min(margin);
            if margin < -1e-6 {
                out.beaten += 1;
            }
        }
        let eff = matmul(&matmul(&w_hat, &pair.s2).unwrap(), &pair.s1).unwrap();
        let (rows, cols) = eff.dims2().unwrap();
        let sv = truncated_svd(&eff, rows.min(cols)).unwrap().sigma;
        if sv.iter().skip(k).any(|&s| s > 1e-5) {
            out.rank_violations += 1;
        }
    }
    out
}

// ------------------------------------------------------------ overhead grid

/// `(cases, mismatches)` of `overhead_check == (param_delta < 0)`.
pub fn overhead_grid() -> (usize, usize) {
    let mut cases = 0;
    let mut mismatches = 0;
    for p in [1usize, 3] {
        for c_o in [4usize, 8, 64] {
            for c_i in [4usize, 8, 64] {
                let w = Tensor::full(&[c_o, c_i, p, p], 1.0);
                for k in 1..c_i {
                    let pair = ProjectionPair::new(
                        "s",
                        Tensor::full(&[k, c_i], 1.0),
                        Tensor::full(&[c_i, k], 1.0),
                    )
                    .unwrap();
                    let fold = fold_lift(&w, &pair).unwrap();
                    cases += 1;
                    if overhead_check(p as u64, c_o as u64, c_i as u64, k as u64) != (fold.param_delta < 0) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    (cases, mismatches)
}

// ------------------------------------------------------------ MNIST data

/// `$CEILCOMP_DATA_DIR/mnist`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("CEILCOMP_DATA_DIR").map(|d| PathBuf::from(d).join("mnist")),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("train-labels-idx1-ubyte").is_file() || d.join("train-labels.idx1-ubyte").is_file())
}

pub fn conv_weight(net: &Network, layer: &str) -> Tensor {
    net.param(&param_key(layer, "weight")).unwrap().clone()
}
