//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use emp_core::linalg::Matrix;
use emp_core::rng::Rng;

pub fn unit_columns(d: usize, b: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::from_fn(d, b, |_, _| rng.normal());
    for c in 0..b {
        let norm = m.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in 0..d {
            let v = m.get(r, c) / norm;
            m.set(r, c, v);
        }
    }
    m
}

pub fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

/// Plain nested loops: cosine similarity, full sort, majority vote with
/// ties broken by summed similarity and then by the smaller label.
pub fn knn_brute(train: &[Vec<f64>], train_y: &[usize], test: &[Vec<f64>], test_y: &[usize], k: usize) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut correct = 0;
    for (q, &y) in test.iter().zip(test_y) {
        let mut sims: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let dot: f64 = q.iter().zip(t).map(|(a, b)| a * b).sum();
                let den = norm(q) * norm(t);
                (if den > 0.0 { dot / den } else { 0.0 }, i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let classes = train_y.iter().max().unwrap() + 1;
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &(s, i) in sims.iter().take(k) {
            votes[train_y[i]].0 += 1;
            votes[train_y[i]].1 += s;
        }
        let mut best = 0;
        for c in 1..classes {
            let (bc, bs) = votes[best];
            let (cc, cs) = votes[c];
            if cc > bc || (cc == bc && cs > bs) {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

/// Two-sided exact binomial test p-value for `k` successes in `n` trials.
pub fn binomial_p_value(k: usize, n: usize, p: f64) -> f64 {
    let mut pmf = vec![0.0; n + 1];
    pmf[0] = (1.0 - p).powi(n as i32);
    for i in 1..=n {
        pmf[i] = pmf[i - 1] * (n - i + 1) as f64 / i as f64 * p / (1.0 - p);
    }
    let observed = pmf[k];
    pmf.iter().filter(|&&q| q <= observed * (1.0 + 1e-9)).sum::<f64>().min(1.0)
}
