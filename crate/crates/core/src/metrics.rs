//! Evaluation metrics: reconstruction error, Wasserstein distances,
//! neighbourhood preservation and latent summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::standard_normal;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over samples and coordinates of the squared error.
pub fn mse_metric<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("mse_metric", x.shape(), x_hat.shape()));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / x.len() as f64)
}

/// Per-row mean squared error.
pub fn row_mse<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("row_mse", x.shape(), x_hat.shape()));
    }
    Ok((0..x.rows())
        .map(|r| {
            let (a, b) = (x.row(r), x_hat.row(r));
            a.iter()
                .zip(b)
                .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum::<f64>()
                / a.len().max(1) as f64
        })
        .collect())
}

/// Exact 1-D 2-Wasserstein distance between equal-size empirical samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("wasserstein_1d", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sorted_w2_sq(&sa, &sb).sqrt())
}

fn sorted_w2_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Uniformly random unit directions in `dim` dimensions.
pub fn random_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project<T: Scalar>(t: &Tensor<T>, dir: &[f64]) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().zip(dir).map(|(x, d)| x.as_f64() * d).sum())
        .collect()
}

/// Squared 1-D W₂ of the projections onto each direction.
pub fn sliced_w2_terms<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dirs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::shape("sliced_w2", a.shape(), b.shape()));
    }
    if a.rows() == 0 {
        return Ok(vec![0.0; dirs.len()]);
    }
    Ok(dirs
        .iter()
        .map(|d| {
            let mut pa = project(a, d);
            let mut pb = project(b, d);
            pa.sort_by(f64::total_cmp);
            pb.sort_by(f64::total_cmp);
            sorted_w2_sq(&pa, &pb)
        })
        .collect())
}

/// Sliced 2-Wasserstein distance: `√(mean over random unit directions of W₂²)`.
pub fn sliced_w2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, n_proj: usize, seed: u64) -> Result<f64> {
    if n_proj == 0 {
        return Err(Error::Invalid("sliced_w2 needs at least one projection".into()));
    }
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::shape("sliced_w2", a.shape(), b.shape()));
    }
    let dirs = random_directions(a.cols(), n_proj, seed);
    let terms = sliced_w2_terms(a, b, &dirs)?;
    Ok((terms.iter().sum::<f64>() / n_proj as f64).sqrt())
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum()
}

/// Rank (1-based) of every other point by distance from point `i`; ties broken by index.
fn neighbour_ranks<T: Scalar>(t: &Tensor<T>, i: usize) -> Vec<usize> {
    let n = t.rows();
    let mut order: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (sq_dist(t.row(i), t.row(j)), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut ranks = vec![0; n];
    for (r, &(_, j)) in order.iter().enumerate() {
        ranks[j] = r + 1;
    }
    ranks
}

/// Trustworthiness and continuity of embedding `z` for data `x` over `k` neighbours.
///
/// Trustworthiness penalizes embedding neighbours that are far in data space,
/// continuity penalizes data neighbours that are far in the embedding.
pub fn trustworthiness_continuity<T: Scalar>(x: &Tensor<T>, z: &Tensor<T>, k: usize) -> Result<(f64, f64)> {
    let n = x.rows();
    if z.rows() != n {
        return Err(Error::shape("trustworthiness", x.shape(), z.shape()));
    }
    if k == 0 || 2 * k >= n {
        return Err(Error::Invalid(format!("neighbour count k={k} must satisfy 1 ≤ k < n/2 (n={n})")));
    }
    let mut t_pen = 0usize;
    let mut c_pen = 0usize;
    for i in 0..n {
        let rx = neighbour_ranks(x, i);
        let rz = neighbour_ranks(z, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            if rz[j] <= k && rx[j] > k {
                t_pen += rx[j] - k;
            }
            if rx[j] <= k && rz[j] > k {
                c_pen += rz[j] - k;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let norm = 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0));
    Ok((1.0 - norm * t_pen as f64, 1.0 - norm * c_pen as f64))
}

/// Minimum-cost perfect assignment on an `n×n` row-major cost matrix (Kuhn–Munkres).
///
/// Returns `assignment[row] = column` and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(Error::shape("hungarian", &[cost.len()], &[n, n]));
    }
    if n == 0 {
        return Ok((vec![], 0.0));
    }
    let c = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    // 1-based potentials; p[j] = row matched to column j, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((assignment, total))
}

/// Largest point set accepted by the exact assignment solver.
pub const MAX_ASSIGNMENT: usize = 256;

/// Exact W₂ transport distance (total, not averaged) between equal-size point sets.
pub fn assignment_w2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape("assignment_w2", a.shape(), b.shape()));
    }
    let n = a.rows();
    if n > MAX_ASSIGNMENT {
        return Err(Error::Invalid(format!("exact assignment limited to n ≤ {MAX_ASSIGNMENT}, got {n}")));
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(a.row(i), b.row(j)));
        }
    }
    Ok(hungarian(&cost, n)?.1.sqrt())
}

/// `n` points uniform on the radius-`r` sphere in `d` dimensions.
pub fn sample_sphere(n: usize, d: usize, r: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.into_iter().map(|x| r * x / norm));
    }
    Tensor::new(vec![n, d], data).expect("sized")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereCheck {
    pub empirical: f64,
    /// `√(2n)·r`
    pub predicted: f64,
}

impl SphereCheck {
    pub fn relative_error(&self) -> f64 {
        (self.empirical - self.predicted).abs() / self.predicted
    }
}

/// Exact W₂ between two independent uniform samples of `n` points on the
/// radius-`r` sphere in `d` dimensions, against the `√(2n)·r` limit.
pub fn sphere_concentration_check(n: usize, d: usize, r: f64, seed: u64) -> Result<SphereCheck> {
    if n == 0 || d == 0 || !(r > 0.0) {
        return Err(Error::Invalid(format!("sphere check needs n, d, r > 0 (got {n}, {d}, {r})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = sample_sphere(n, d, r, &mut rng);
    let b = sample_sphere(n, d, r, &mut rng);
    Ok(SphereCheck {
        empirical: assignment_w2(&a, &b)?,
        predicted: (2.0 * n as f64).sqrt() * r,
    })
}

/// `(‖column means‖, max_j |var_j − 1|)` with population variances.
pub fn latent_moments<T: Scalar>(z: &Tensor<T>) -> Result<(f64, f64)> {
    if z.shape().len() != 2 || z.rows() < 2 {
        return Err(Error::Invalid(format!("latent_moments needs ≥ 2 rows, got {:?}", z.shape())));
    }
    let z = z.cast::<f64>();
    let mean_norm = z.col_mean().data().iter().map(|m| m * m).sum::<f64>().sqrt();
    let var_dev = z
        .col_var()
        .data()
        .iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((mean_norm, var_dev))
}

/// Named scalar metrics with the sample counts they were computed from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "run_id,step,metric,value";

impl MetricReport {
    pub fn new(seed: u64) -> Self {
        MetricReport {
            seed,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.values.insert(key.to_string(), value);
    }

    pub fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.values.values().all(|v| v.is_finite())
    }

    /// CSV rows (no header) keyed by run id and step; counts and the seed are
    /// emitted as `n_<name>` and `seed` metrics.
    pub fn csv_rows(&self, run_id: &str, step: u64) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{run_id},{step},{k},{v:e}");
        }
        for (k, n) in &self.counts {
            let _ = writeln!(out, "{run_id},{step},n_{k},{n}");
        }
        let _ = writeln!(out, "{run_id},{step},seed,{}", self.seed);
        out
    }
}
