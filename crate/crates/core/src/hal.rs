//! Highly adaptive lasso.
//!
//! The basis is every tensor product of zero-order splines
//! `1{x_j >= knot_j, j in S}` over sections `S` with `|S| <= max_order`, with
//! knots taken from observed rows. The lasso is solved by IRLS outer steps
//! and cyclic coordinate descent with soft-thresholding inside, with an
//! unpenalized intercept. The penalty is chosen along a geometric path by
//! V-fold cross-validation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::{binomial_loss, compress, Design};
use crate::simulate::expit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Binomial,
    /// Log link; exposure enters through the offset.
    Poisson,
}

impl Family {
    fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Binomial => expit(eta),
            Family::Poisson => eta.min(50.0).exp(),
        }
    }

    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Binomial => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    pub fn loss(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Binomial => binomial_loss(y, eta),
            Family::Poisson => self.mean(eta) - y * eta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalOptions {
    pub max_order: usize,
    pub max_knots: usize,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub folds: usize,
    pub one_se: bool,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for HalOptions {
    fn default() -> Self {
        HalOptions {
            max_order: 2,
            max_knots: 200,
            n_lambda: 30,
            lambda_min_ratio: 1e-3,
            folds: 5,
            one_se: false,
            seed: 1,
            tol: 1e-7,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisIndex {
    pub section: Vec<usize>,
    pub knot: Vec<f64>,
}

impl BasisIndex {
    pub fn eval(&self, x: &[f64]) -> bool {
        self.section.iter().zip(&self.knot).all(|(&j, &k)| x[j] >= k)
    }
}

/// Basis functions with their columns stored as sorted row indices of ones.
#[derive(Clone, Debug, Default)]
pub struct Basis {
    pub indices: Vec<BasisIndex>,
    pub columns: Vec<Vec<u32>>,
}

fn sections(p: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![];
    let mut frontier: Vec<Vec<usize>> = (0..p).map(|j| vec![j]).collect();
    for _ in 0..max_order {
        out.extend(frontier.iter().cloned());
        let mut next = Vec::new();
        for s in &frontier {
            for j in s.last().unwrap() + 1..p {
                let mut t = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        frontier = next;
    }
    out
}

/// Indicator basis over all sections up to `max_order`. Knots are the
/// distinct observed section values, subsampled to `max_knots` (chosen by
/// `seed`) when there are more. Columns identical to an earlier column are
/// dropped.
pub fn enumerate_basis(x: &Design, max_order: usize, max_knots: usize, seed: u64) -> Basis {
    let n = x.nrow();
    let mut basis = Basis::default();
    let mut seen: HashMap<Vec<u32>, ()> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in sections(x.ncol, max_order.max(1)) {
        let mut knots: Vec<Vec<f64>> = (0..n).map(|i| s.iter().map(|&j| x.row(i)[j]).collect()).collect();
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        knots.dedup();
        if knots.len() > max_knots {
            knots.shuffle(&mut rng);
            knots.truncate(max_knots);
            knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        for knot in knots {
            let b = BasisIndex { section: s.clone(), knot };
            let col: Vec<u32> = (0..n).filter(|&i| b.eval(x.row(i))).map(|i| i as u32).collect();
            if seen.insert(col.clone(), ()).is_none() {
                basis.indices.push(b);
                basis.columns.push(col);
            }
        }
    }
    basis
}

impl Basis {
    /// Columns of the same basis functions on new rows.
    pub fn columns_for(&self, x: &Design) -> Vec<Vec<u32>> {
        self.indices
            .iter()
            .map(|b| (0..x.nrow()).filter(|&i| b.eval(x.row(i))).map(|i| i as u32).collect())
            .collect()
    }

    pub fn dense(&self, n: usize) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.columns.len()]; n];
        for (j, c) in self.columns.iter().enumerate() {
            for &i in c {
                rows[i as usize][j] = 1.0;
            }
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalModel {
    pub family: Family,
    pub intercept: f64,
    pub terms: Vec<(BasisIndex, f64)>,
    pub lambda: f64,
    /// |intercept| + sum of |coefficients|.
    pub norm: f64,
}

impl HalModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.terms.iter().filter(|(b, _)| b.eval(x)).map(|(_, c)| c).sum::<f64>()
    }

    pub fn is_intercept_only(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Penalized problem on a fixed basis:
/// minimize `(1/W) sum_i w_i loss(y_i, eta_i) + lambda * sum_j |beta_j|`.
pub struct Problem<'a> {
    pub columns: &'a [Vec<u32>],
    pub y: &'a [f64],
    pub w: &'a [f64],
    pub offset: Option<&'a [f64]>,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub iterations: usize,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn total_weight(&self) -> f64 {
        self.w.iter().sum()
    }

    pub fn eta(&self, b0: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta = sparse_eta(self.columns, self.n(), b0, beta);
        if let Some(o) = self.offset {
            eta.iter_mut().zip(o).for_each(|(e, oi)| *e += oi);
        }
        eta
    }

    pub fn objective(&self, lambda: f64, b0: f64, beta: &[f64]) -> f64 {
        let eta = self.eta(b0, beta);
        let l: f64 = (0..self.n()).map(|i| self.w[i] * self.family.loss(self.y[i], eta[i])).sum();
        l / self.total_weight() + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Gradient of the mean loss with respect to each column, with sign
    /// convention `(1/W) sum w x (y - mu)`.
    pub fn gradient(&self, b0: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let eta = self.eta(b0, beta);
        let wt = self.total_weight();
        let r: Vec<f64> = (0..self.n()).map(|i| self.w[i] * (self.y[i] - self.family.mean(eta[i])) / wt).collect();
        let g = self.columns.iter().map(|c| c.iter().map(|&i| r[i as usize]).sum()).collect();
        (r.iter().sum(), g)
    }

    /// Intercept-only maximizer.
    pub fn null_intercept(&self) -> f64 {
        let mut b0 = 0.0;
        for _ in 0..200 {
            let eta = self.eta(b0, &vec![0.0; self.columns.len()]);
            let (mut g, mut h) = (0.0, 0.0);
            for i in 0..self.n() {
                let mu = self.family.mean(eta[i]);
                g += self.w[i] * (self.y[i] - mu);
                h += self.w[i] * self.family.variance(mu);
            }
            if h <= 0.0 {
                break;
            }
            let step = (g / h).clamp(-5.0, 5.0);
            b0 += step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        b0.clamp(-30.0, 30.0)
    }

    pub fn lambda_max(&self) -> f64 {
        let b0 = self.null_intercept();
        let (_, g) = self.gradient(b0, &vec![0.0; self.columns.len()]);
        g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest KKT violation: `| |g_j| - lambda |` on active coordinates
    /// (with matching sign), `max(0, |g_j| - lambda)` on inactive ones, and
    /// `|g_0|` for the intercept.
    pub fn kkt_violation(&self, lambda: f64, s: &Solution) -> f64 {
        let (g0, g) = self.gradient(s.intercept, &s.beta);
        let mut worst = g0.abs();
        for (gj, &bj) in g.iter().zip(&s.beta) {
            let v = if bj != 0.0 { (gj - lambda * bj.signum()).abs() } else { (gj.abs() - lambda).max(0.0) };
            worst = worst.max(v);
        }
        worst
    }

    /// IRLS with coordinate descent, warm-started at `start`.
    pub fn solve(&self, lambda: f64, start: Option<&Solution>, tol: f64, max_iter: usize) -> Result<Solution> {
        let p = self.columns.len();
        let n = self.n();
        let wt = self.total_weight();
        // Zero coefficients are optimal once the null gradient is inside the
        // penalty; this also covers outcomes with no variation.
        let null = self.null_intercept();
        let (_, g) = self.gradient(null, &vec![0.0; p]);
        if g.iter().all(|v| v.abs() <= lambda) {
            return Ok(Solution { intercept: null, beta: vec![0.0; p], iterations: 0 });
        }
        let (mut b0, mut beta) = match start {
            Some(s) => (s.intercept, s.beta.clone()),
            None => (null, vec![0.0; p]),
        };
        let mut sweeps = 0;
        let mut outer = 0;
        let mut obj = self.objective(lambda, b0, &beta);
        loop {
            outer += 1;
            if outer > max_iter {
                return Err(Error::NoConvergence(format!("HAL IRLS exceeded {max_iter} iterations")));
            }
            let eta = self.eta(b0, &beta);
            let mut v = vec![0.0; n];
            let mut r = vec![0.0; n];
            for i in 0..n {
                let mu = self.family.mean(eta[i]);
                let var = self.family.variance(mu).max(1e-10);
                v[i] = self.w[i] * var / wt;
                r[i] = (self.y[i] - mu) / var;
            }
            // Inner weighted least squares by coordinate descent.
            let (old0, old) = (b0, beta.clone());
            let (mut n0, mut nb) = (b0, beta.clone());
            let vsum: f64 = v.iter().sum();
            let xv: Vec<f64> = self.columns.iter().map(|c| c.iter().map(|&i| v[i as usize]).sum()).collect();
            let mut inner = 0;
            loop {
                sweeps += 1;
                inner += 1;
                if inner > max_iter {
                    return Err(Error::NoConvergence(format!("HAL coordinate descent exceeded {max_iter} sweeps")));
                }
                let mut delta: f64 = 0.0;
                if vsum > 0.0 {
                    let d = r.iter().zip(&v).map(|(ri, vi)| ri * vi).sum::<f64>() / vsum;
                    n0 += d;
                    r.iter_mut().for_each(|ri| *ri -= d);
                    delta = delta.max(d.abs());
                }
                for j in 0..p {
                    if xv[j] <= 0.0 {
                        continue;
                    }
                    let c = &self.columns[j];
                    let rho: f64 = c.iter().map(|&i| v[i as usize] * r[i as usize]).sum::<f64>() + xv[j] * nb[j];
                    let new = soft(rho, lambda) / xv[j];
                    let d = new - nb[j];
                    if d != 0.0 {
                        for &i in c {
                            r[i as usize] -= d;
                        }
                        nb[j] = new;
                        delta = delta.max(d.abs());
                    }
                }
                if delta < tol * 0.1 {
                    break;
                }
                if inner % 10 == 0 && self.polish(lambda, &v, &mut r, &mut n0, &mut nb) {
                    break;
                }
            }
            // Backtrack between the old and proposed iterate if the true
            // objective went up.
            let mut t = 1.0;
            let mut cand0 = n0;
            let mut cand = nb.clone();
            let mut new_obj = self.objective(lambda, cand0, &cand);
            while new_obj > obj + 1e-15 && t > 1e-6 {
                t *= 0.5;
                cand0 = old0 + t * (n0 - old0);
                cand = old.iter().zip(&nb).map(|(a, b)| a + t * (b - a)).collect();
                new_obj = self.objective(lambda, cand0, &cand);
            }
            let change = cand
                .iter()
                .zip(&old)
                .map(|(a, b)| (a - b).abs())
                .fold((cand0 - old0).abs(), f64::max);
            b0 = cand0;
            beta = cand;
            obj = new_obj;
            if change < tol || self.family == Family::Binomial && t <= 1e-6 {
                break;
            }
        }
        Ok(Solution { intercept: b0, beta, iterations: sweeps })
    }
}

enum Step {
    Full,
    Blocked,
    Failed,
}

impl Problem<'_> {
    /// Active-set solve of the inner weighted lasso, started from the
    /// coordinate-descent iterate: take signed Newton steps on the working
    /// set, drop coefficients that reach zero, and add the worst KKT
    /// violator. Returns true once every KKT condition holds; on false the
    /// iterate has still not increased the inner objective.
    fn polish(&self, lambda: f64, v: &[f64], r: &mut [f64], n0: &mut f64, nb: &mut [f64]) -> bool {
        let p = nb.len();
        let mut sign = vec![0.0; p];
        for j in 0..p {
            sign[j] = if nb[j] != 0.0 { nb[j].signum() } else { 0.0 };
        }
        let slack = lambda * 1e-9 + 1e-15;
        for _ in 0..4 * p + 50 {
            match self.signed_step(lambda, v, r, n0, nb, &mut sign) {
                Step::Failed => return false,
                // Also a partial step along a ray.
                Step::Blocked => continue,
                Step::Full => {}
            }
            let (mut worst, mut enter) = (lambda + slack, None);
            for j in (0..p).filter(|&j| sign[j] == 0.0) {
                let g: f64 = self.columns[j].iter().map(|&i| v[i as usize] * r[i as usize]).sum();
                if g.abs() > worst {
                    worst = g.abs();
                    enter = Some((j, g.signum()));
                }
            }
            match enter {
                None => return true,
                Some((j, s)) => sign[j] = s,
            }
        }
        false
    }

    /// One Newton step on the quadratic with the working set and signs in
    /// `sign` held fixed, cut where the first coefficient reaches zero.
    fn signed_step(&self, lambda: f64, v: &[f64], r: &mut [f64], n0: &mut f64, nb: &mut [f64], sign: &mut [f64]) -> Step {
        let active: Vec<usize> = (0..nb.len()).filter(|&j| sign[j] != 0.0).collect();
        let k = active.len() + 1;
        let n = r.len();
        let mut u = DMatrix::<f64>::zeros(n, k);
        for i in 0..n {
            u[(i, 0)] = 1.0;
        }
        for (a, &j) in active.iter().enumerate() {
            for &i in &self.columns[j] {
                u[(i as usize, a + 1)] = 1.0;
            }
        }
        let theta0 = DVector::from_iterator(k, std::iter::once(*n0).chain(active.iter().map(|&j| nb[j])));
        let z = DVector::from_column_slice(r) + &u * &theta0;
        let vu = DMatrix::from_fn(n, k, |i, c| v[i] * u[(i, c)]);
        let gram = u.transpose() * &vu;
        let mut rhs = vu.transpose() * &z;
        for (a, &j) in active.iter().enumerate() {
            rhs[a + 1] -= lambda * sign[j];
        }
        // Minimum-norm Newton step; if the signed system has no solution the
        // objective is linear along the null-space residual, so follow that
        // ray until a coefficient reaches zero.
        let res = &rhs - &gram * &theta0;
        let scale = gram.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let Ok(newton) = gram.clone().svd(true, true).solve(&res, 1e-14 * scale.max(1e-300)) else {
            return Step::Failed;
        };
        let leftover = &res - &gram * &newton;
        let ray = leftover.norm() > 1e-8 * (1.0 + res.norm());
        let (dir, max_step) = if ray {
            // Exact line minimizer along the ray; rank truncation can hide a
            // little curvature.
            let curv = leftover.dot(&(&gram * &leftover));
            let m = if curv > 0.0 { leftover.norm_squared() / curv } else { f64::INFINITY };
            (leftover, m)
        } else {
            (newton, 1.0)
        };
        if !dir.iter().all(|t| t.is_finite()) {
            return Step::Failed;
        }
        // A coefficient is blocked when it moves against its sign; one that
        // sits at zero (just entered) blocks immediately.
        let mut step = max_step;
        let mut blocking = None;
        for (a, &j) in active.iter().enumerate() {
            let (t0, d) = (theta0[a + 1], dir[a + 1]);
            if d * sign[j] < 0.0 {
                let t = (-t0 / d).max(0.0);
                if t < step {
                    step = t;
                    blocking = Some(a);
                }
            }
        }
        if !step.is_finite() {
            return Step::Failed;
        }
        let theta = &theta0 + &dir * step;
        let new_r = &z - &u * &theta;
        r.copy_from_slice(new_r.as_slice());
        *n0 = theta[0];
        for (a, &j) in active.iter().enumerate() {
            nb[j] = theta[a + 1];
        }
        match blocking {
            Some(a) => {
                let j = active[a];
                // Zeroing the blocked coefficient moves it by rounding only.
                for &i in &self.columns[j] {
                    r[i as usize] += nb[j];
                }
                nb[j] = 0.0;
                sign[j] = 0.0;
                if step == 0.0 && theta0[a + 1] == 0.0 {
                    // An entering coordinate that cannot move: give up.
                    return Step::Failed;
                }
                Step::Blocked
            }
            None if ray => Step::Blocked,
            None => Step::Full,
        }
    }
}

fn sparse_eta(columns: &[Vec<u32>], n: usize, b0: f64, beta: &[f64]) -> Vec<f64> {
    let mut eta = vec![b0; n];
    for (c, &b) in columns.iter().zip(beta) {
        if b != 0.0 {
            for &i in c {
                eta[i as usize] += b;
            }
        }
    }
    eta
}

fn soft(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Decreasing geometric path from `lambda_max`.
pub fn lambda_path(lambda_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n <= 1 || lambda_max <= 0.0 {
        return vec![lambda_max.max(0.0)];
    }
    (0..n)
        .map(|k| lambda_max * min_ratio.powf(k as f64 / (n - 1) as f64))
        .collect()
}

pub fn to_model(basis: &Basis, family: Family, lambda: f64, s: &Solution) -> HalModel {
    let terms: Vec<(BasisIndex, f64)> = basis
        .indices
        .iter()
        .zip(&s.beta)
        .filter(|(_, b)| **b != 0.0)
        .map(|(i, b)| (i.clone(), *b))
        .collect();
    let norm = s.intercept.abs() + terms.iter().map(|(_, b)| b.abs()).sum::<f64>();
    HalModel { family, intercept: s.intercept, terms, lambda, norm }
}

/// Fits the whole path on a fixed basis with warm starts.
pub fn fit_path(problem: &Problem, lambdas: &[f64], opts: &HalOptions) -> Result<Vec<Solution>> {
    let mut out: Vec<Solution> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let s = problem.solve(l, out.last(), opts.tol, opts.max_iter)?;
        out.push(s);
    }
    Ok(out)
}

/// Fits at a single penalty.
pub fn fit_hal(x: &Design, y: &[f64], w: &[f64], family: Family, lambda: f64, opts: &HalOptions) -> Result<HalModel> {
    let basis = enumerate_basis(x, opts.max_order, opts.max_knots, opts.seed);
    let problem = Problem { columns: &basis.columns, y, w, offset: None, family };
    let s = problem.solve(lambda, None, opts.tol, opts.max_iter)?;
    Ok(to_model(&basis, family, lambda, &s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvChoice {
    pub index: usize,
    pub lambda: f64,
    pub risks: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Cross-validated choice of the penalty. `fold` assigns each row to a fold
/// in `0..v`; the first index wins ties.
pub fn cv_norm_bound(
    x: &Design,
    y: &[f64],
    w: &[f64],
    family: Family,
    fold: &[usize],
    v: usize,
    lambdas: &[f64],
    opts: &HalOptions,
) -> Result<CvChoice> {
    if v < 2 {
        return Err(Error::Config("need at least two folds".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let k = lambdas.len();
    let mut fold_risk = vec![vec![0.0; k]; v];
    for (f, risks) in fold_risk.iter_mut().enumerate() {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != f).collect();
        let valid: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == f).collect();
        if train.is_empty() || valid.is_empty() {
            return Err(Error::FoldTooSmall(format!("fold {f} of {v} is empty")));
        }
        let tx = x.select(&train);
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let tw: Vec<f64> = train.iter().map(|&i| w[i]).collect();
        let (cx, cy, cw) = compress(&tx, &ty, &tw);
        let basis = enumerate_basis(&cx, opts.max_order, opts.max_knots, opts.seed);
        let problem = Problem { columns: &basis.columns, y: &cy, w: &cw, offset: None, family };
        let path = fit_path(&problem, lambdas, opts)?;
        let vx = x.select(&valid);
        let vcols = basis.columns_for(&vx);
        let wsum: f64 = valid.iter().map(|&i| w[i]).sum();
        for (s, risk) in path.iter().zip(risks.iter_mut()) {
            let eta = sparse_eta(&vcols, valid.len(), s.intercept, &s.beta);
            let loss: f64 = valid.iter().enumerate().map(|(r, &i)| w[i] * family.loss(y[i], eta[r])).sum();
            *risk = loss / wsum;
        }
    }
    let risks: Vec<f64> = (0..k).map(|j| fold_risk.iter().map(|r| r[j]).sum::<f64>() / v as f64).collect();
    let std_errors: Vec<f64> = (0..k)
        .map(|j| {
            let m = risks[j];
            let var = fold_risk.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (v as f64 - 1.0);
            (var / v as f64).sqrt()
        })
        .collect();
    let mut best = 0;
    for j in 1..k {
        if risks[j] < risks[best] {
            best = j;
        }
    }
    let index = if opts.one_se {
        // Largest penalty within one standard error of the minimum.
        (0..=best).find(|&j| risks[j] <= risks[best] + std_errors[best]).unwrap_or(best)
    } else {
        best
    };
    Ok(CvChoice { index, lambda: lambdas[index], risks, std_errors })
}

/// Row-level folds shuffled by seed.
pub fn row_folds(n: usize, v: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (k, &i) in idx.iter().enumerate() {
        fold[i] = k % v;
    }
    fold
}

/// Path on the full data, penalty by CV, refit at the chosen penalty.
pub fn fit_hal_cv_folds(
    x: &Design,
    y: &[f64],
    w: &[f64],
    family: Family,
    fold: &[usize],
    opts: &HalOptions,
) -> Result<HalModel> {
    let (cx, cy, cw) = compress(x, y, w);
    let basis = enumerate_basis(&cx, opts.max_order, opts.max_knots, opts.seed);
    let problem = Problem { columns: &basis.columns, y: &cy, w: &cw, offset: None, family };
    let lambdas = lambda_path(problem.lambda_max(), opts.n_lambda, opts.lambda_min_ratio);
    let choice = cv_norm_bound(x, y, w, family, fold, opts.folds, &lambdas, opts)?;
    let path = fit_path(&problem, &lambdas[..=choice.index], opts)?;
    Ok(to_model(&basis, family, choice.lambda, path.last().unwrap()))
}

pub fn fit_hal_cv(x: &Design, y: &[f64], w: &[f64], family: Family, opts: &HalOptions) -> Result<HalModel> {
    let fold = row_folds(y.len(), opts.folds, opts.seed);
    fit_hal_cv_folds(x, y, w, family, &fold, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn basis_examples() {
        let x = Design::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let b = enumerate_basis(&x, 1, 200, 0);
        assert_eq!(b.indices.len(), 3);
        assert_eq!(b.indices.iter().map(|i| i.knot[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        let x = Design::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!(enumerate_basis(&x, 2, 200, 0).indices.len() <= 8);
        let x = Design::from_rows(&[vec![2.0, 5.0], vec![2.0, 5.0]]);
        assert_eq!(enumerate_basis(&x, 2, 200, 0).indices.len(), 1);
        let x = Design::from_rows(&(0..50).map(|i| vec![f64::from(i)]).collect::<Vec<_>>());
        assert_eq!(enumerate_basis(&x, 1, 10, 3).indices.len(), 10);
    }

    #[test]
    fn infinite_penalty_is_intercept_only() {
        let x = Design::from_rows(&(0..40).map(|i| vec![f64::from(i % 7)]).collect::<Vec<_>>());
        let y: Vec<f64> = (0..40).map(|i| f64::from(i % 3 == 0)).collect();
        let m = fit_hal(&x, &y, &[1.0; 40], Family::Binomial, 1e6, &HalOptions::default()).unwrap();
        assert!(m.is_intercept_only());
        let ybar = y.iter().sum::<f64>() / 40.0;
        assert!((m.intercept - (ybar / (1.0 - ybar)).ln()).abs() < 1e-8);
        let m = fit_hal(&x, &[0.25; 40], &[1.0; 40], Family::Binomial, 1e-4, &HalOptions::default()).unwrap();
        assert!(m.is_intercept_only());
    }

    #[test]
    fn norm_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(rng.gen::<f64>() < if r[0] > 0.5 { 0.8 } else { 0.2 })).collect();
        let m = fit_hal(&Design::from_rows(&rows), &y, &[1.0; 100], Family::Binomial, 0.01, &HalOptions::default()).unwrap();
        let s = m.intercept.abs() + m.terms.iter().map(|(_, b)| b.abs()).sum::<f64>();
        assert_eq!(m.norm, s);
        assert!(!m.is_intercept_only());
    }

    #[test]
    fn single_and_duplicate_lambda() {
        let x = Design::from_rows(&(0..30).map(|i| vec![f64::from(i)]).collect::<Vec<_>>());
        let y: Vec<f64> = (0..30).map(|i| f64::from(i > 15)).collect();
        let fold = row_folds(30, 3, 1);
        let opts = HalOptions::default();
        let c = cv_norm_bound(&x, &y, &[1.0; 30], Family::Binomial, &fold, 3, &[0.05], &opts).unwrap();
        assert_eq!(c.index, 0);
        let c = cv_norm_bound(&x, &y, &[1.0; 30], Family::Binomial, &fold, 3, &[0.05, 0.05], &opts).unwrap();
        assert_eq!(c.index, 0);
        let bad = vec![0; 30];
        assert!(matches!(
            cv_norm_bound(&x, &y, &[1.0; 30], Family::Binomial, &bad, 3, &[0.05], &opts),
            Err(Error::FoldTooSmall(_))
        ));
    }

    #[test]
    fn poisson_with_offset() {
        let x = Design::from_rows(&(0..60).map(|i| vec![f64::from(i % 2)]).collect::<Vec<_>>());
        let basis = enumerate_basis(&x, 1, 200, 0);
        let expo: Vec<f64> = (0..60).map(|i| (1.0 + f64::from(i % 5)).ln()).collect();
        let y: Vec<f64> = (0..60).map(|i| f64::from((i % 2) * 2 + i % 3 / 2)).collect();
        let p = Problem { columns: &basis.columns, y: &y, w: &[1.0; 60], offset: Some(&expo), family: Family::Poisson };
        let lambda = 0.3 * p.lambda_max();
        let s = p.solve(lambda, None, 1e-9, 10_000).unwrap();
        assert!(p.kkt_violation(lambda, &s) < 1e-5);
    }
}
