//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng as _;
use tsgzsl::numcore::{rng_for, Rng, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// (dataset, series, classes, length) from the UCR characteristics table.
pub const TABLE1: [(&str, usize, usize, usize); 8] = [
    ("TwoPatterns", 5000, 4, 128),
    ("ElectricDevices", 16637, 7, 96),
    ("Trace", 200, 4, 275),
    ("SyntheticControl", 600, 6, 60),
    ("UWaveGestureLibraryX", 4478, 8, 945),
    ("CricketX", 780, 12, 300),
    ("Beef", 60, 5, 470),
    ("InsectWingbeatSound", 2200, 11, 256),
];

/// (dataset, AUSUC, acc_s, acc_u, H) in percent.
pub const TABLE2: [(&str, f64, f64, f64, f64); 8] = [
    ("TwoPatterns", 95.233, 94.504, 88.815, 91.571),
    ("ElectricDevices", 55.749, 60.971, 55.323, 58.010),
    ("Trace", 52.699, 43.333, 76.000, 55.195),
    ("SyntheticControl", 46.028, 50.000, 68.500, 57.805),
    ("UWaveGestureLibraryX", 44.671, 58.944, 51.636, 55.049),
    ("CricketX", 27.328, 50.427, 39.487, 44.291),
    ("Beef", 25.000, 10.000, 100.000, 18.181),
    ("InsectWingbeatSound", 18.907, 30.625, 35.500, 32.882),
];

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Magnitudes in `[0.05, 1.5]` with random sign; keeps ReLU inputs off the kink.
pub fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairwise distinct values in `(-1, 1)` at least `0.4 * 2 / n` apart, so
/// max-type ops have no near-ties.
pub fn separated(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let step = 2.0 / n as f64;
    let data = ranks
        .iter()
        .map(|&k| -1.0 + (k as f64 + rng.gen_range(0.3..0.7)) * step)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective: the output itself when it has one element, otherwise
/// a fixed random projection of it.
fn objective(tape: &mut Tape, out: Var) -> Var {
    let n: usize = tape.shape(out).iter().product();
    if n == 1 {
        return tape.sum_all(out);
    }
    let mut rng = rng_for(0xfd, 0);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = tape.mask_mul(out, w).unwrap();
    tape.sum_all(p)
}

fn value_of(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    let obj = objective(&mut tape, out);
    tape.value(obj)[0]
}

/// Largest relative error `|g - g_fd| / max(|g|, |g_fd|)` over inputs
/// (norms over each input's elements), with central differences.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    let obj = objective(&mut tape, out);
    tape.backward(obj).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_EPS;
            numeric[j] = (value_of(&plus, f) - value_of(&minus, f)) / (2.0 * FD_EPS);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
        worst = worst.max(diff / scale.max(1e-8));
    }
    worst
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|x| x * x).sum::<f64>().sqrt()
}

/// `h[b][t]` rows of a `[B, L, D]` tensor.
pub fn unpack(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            (0..l)
                .map(|j| t.data()[(i * l + j) * d..(i * l + j + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct double loop: anchor `h[i][t]`, positive `g[i][t]`, negatives
/// `g[i][t']` for every `t'` and `h[i][t']` for `t' != t`.
pub fn naive_temporal(h: &[Vec<Vec<f64>>], g: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..h.len() {
        let l = h[i].len();
        for t in 0..l {
            let mut denom = 0.0;
            for tp in 0..l {
                denom += dotp(&h[i][t], &g[i][tp]).exp();
                if tp != t {
                    denom += dotp(&h[i][t], &h[i][tp]).exp();
                }
            }
            total += -(dotp(&h[i][t], &g[i][t]).exp() / denom).ln();
            count += 1.0;
        }
    }
    total / count
}

/// Direct double loop: anchor `h[i][t]`, positive `g[i][t]`, negatives
/// `g[j][t]` for every `j` and `h[j][t]` for `j != i`.
pub fn naive_instance(h: &[Vec<Vec<f64>>], g: &[Vec<Vec<f64>>]) -> f64 {
    let b = h.len();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..b {
        for t in 0..h[i].len() {
            let mut denom = 0.0;
            for j in 0..b {
                denom += dotp(&h[i][t], &g[j][t]).exp();
                if j != i {
                    denom += dotp(&h[i][t], &h[j][t]).exp();
                }
            }
            total += -(dotp(&h[i][t], &g[i][t]).exp() / denom).ln();
            count += 1.0;
        }
    }
    total / count
}

/// Textbook approximate entropy with explicit template loops.
pub fn naive_apen(x: &[f64], m: usize, r: f64) -> f64 {
    let phi = |m: usize| -> f64 {
        let n = x.len() - m + 1;
        let mut acc = 0.0;
        for i in 0..n {
            let mut c = 0usize;
            for j in 0..n {
                let mut dist: f64 = 0.0;
                for k in 0..m {
                    dist = dist.max((x[i + k] - x[j + k]).abs());
                }
                if dist <= r {
                    c += 1;
                }
            }
            acc += (c as f64 / n as f64).ln();
        }
        acc / n as f64
    };
    phi(m) - phi(m + 1)
}

pub fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Class sizes as even as possible for `n` series over `c` classes.
pub fn balanced_counts(n: usize, c: usize) -> Vec<usize> {
    (0..c).map(|k| n / c + usize::from(k < n % c)).collect()
}

pub fn labels_from_counts(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect()
}
