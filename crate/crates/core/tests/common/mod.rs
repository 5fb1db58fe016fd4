#![allow(dead_code)]

use geoflow::netgeo::{LabeledDataset, Loss, NetSpec};
use geoflow::{Grid, ScalarField, SobolevKernel, TimePath, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn blob(g: &Grid<f64>, cx: f64, cy: f64, s: f64) -> ScalarField<f64> {
    ScalarField::from_fn(g, |[x, y]| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
}

/// Gaussian blob (σ = 6 cells) and the same blob moved 3 cells along x,
/// with the default kernel α = 2h, power 1.
pub fn blob_pair(n: usize) -> (ScalarField<f64>, ScalarField<f64>, SobolevKernel<f64>) {
    let g = Grid::unit_square(n).unwrap();
    let h = 1.0 / n as f64;
    let i0 = blob(&g, 0.5, 0.5, 6.0 * h);
    let i1 = blob(&g, 0.5 + 3.0 * h, 0.5, 6.0 * h);
    let k = SobolevKernel::new(&g, 2.0 * h, 1).unwrap();
    (i0, i1, k)
}

pub fn path_l2(u: &TimePath<VectorField<f64>>) -> f64 {
    let w = geoflow::fields::trapezoid_weights::<f64>(u.steps());
    u.iter().zip(&w).map(|(v, &wk)| wk * v.norm_sq()).sum::<f64>().sqrt()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Two standard-normal features, labels drawn from a logistic model with
/// weights `truth = [w1, w2, b]`.
pub fn logistic_data(n: usize, truth: [f64; 3], seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let p = sigmoid(truth[0] * x[0] + truth[1] * x[1] + truth[2]);
        ys.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
        xs.push(x.to_vec());
    }
    LabeledDataset::new(xs, ys).unwrap()
}

/// Linear logistic model on two features with a bias: d = 3.
pub fn logistic_spec(l2: f64) -> NetSpec {
    NetSpec::new(vec![2, 1], Loss::CrossEntropy).unwrap().with_l2(l2)
}

/// Ridge-logistic influence fixture: n = 50, d = 3, l2 = 0.1.
pub fn influence_fixture() -> (NetSpec, LabeledDataset) {
    (logistic_spec(0.1), logistic_data(50, [1.5, -1.0, 0.3], 11))
}

/// Two Gaussian blobs at (±1, ±1), unit spread. Returns the training set
/// with `flip_frac` of its labels flipped, the indices flipped, and a clean
/// validation set.
pub fn flipped_blobs(n_train: usize, n_valid: usize, flip_frac: f64, seed: u64) -> (LabeledDataset, Vec<usize>, LabeledDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % 2) as f64;
            let c = if y == 1.0 { 1.0 } else { -1.0 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            xs.push(vec![c + a, c + b]);
            ys.push(y);
        }
        (xs, ys)
    };
    let (xt, mut yt) = draw(n_train);
    let (xv, yv) = draw(n_valid);
    let k = (flip_frac * n_train as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n_train).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n_train);
        idx.swap(i, j);
    }
    let mut flipped = idx[..k].to_vec();
    flipped.sort_unstable();
    for &i in &flipped {
        yt[i] = 1.0 - yt[i];
    }
    (LabeledDataset::new(xt, yt).unwrap(), flipped, LabeledDataset::new(xv, yv).unwrap())
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut m = k;
            while m + 1 < idx.len() && v[idx[m + 1]] == v[idx[k]] {
                m += 1;
            }
            let avg = (k + m) as f64 / 2.0;
            for &i in &idx[k..=m] {
                r[i] = avg;
            }
            k = m + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}
