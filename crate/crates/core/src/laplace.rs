//! Laplace approximation of a marginal likelihood over Gaussian random effects.
//!
//! The random effects `beta` have prior `N(0, (lambda_i S_i)^-1)` per block.
//! With data term `D(beta) = -log p(z | beta)` and
//! `g(beta) = D(beta) + 1/2 sum_i lambda_i beta_i' S_i beta_i`,
//! the approximate marginal negative log-likelihood is
//!
//! ```text
//! g(beta_hat) + 1/2 log det H - 1/2 sum_i (q_i log lambda_i + log det S_i)
//! ```
//!
//! where `beta_hat` minimizes `g` and `H` is its Hessian there. The `2 pi`
//! factors of the Gaussian integral and of the prior cancel.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Data term of an inner problem.
pub trait InnerProblem {
    fn dim(&self) -> usize;
    /// `D(beta)`.
    fn value(&mut self, beta: &[f64]) -> Result<f64>;
    /// `D(beta)` and its gradient.
    fn value_grad(&mut self, beta: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Hessian of `D` at `beta`.
    fn hessian(&mut self, beta: &[f64]) -> Result<DMatrix<f64>>;
}

/// One penalty block of the prior precision.
#[derive(Debug, Clone)]
pub struct PriorBlock<'a> {
    pub cols: Range<usize>,
    pub s: &'a DMatrix<f64>,
    /// `log det S`.
    pub log_det: f64,
    pub lambda: f64,
}

/// Settings of the inner Newton solve.
#[derive(Debug, Clone, Copy)]
pub struct InnerOptions {
    pub max_iter: usize,
    /// Convergence when `max |grad g| <= tol * max(1, |g|)`.
    pub tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions { max_iter: 200, tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceFit {
    /// Approximate marginal negative log-likelihood.
    pub value: f64,
    pub beta: Vec<f64>,
    /// Hessian of `g` at `beta`.
    pub hessian: DMatrix<f64>,
    /// `g(beta)`.
    pub penalized_nll: f64,
    pub iterations: usize,
}

/// `1/2 sum_i lambda_i beta_i' S_i beta_i`.
pub fn penalty(prior: &[PriorBlock], beta: &[f64]) -> f64 {
    prior
        .iter()
        .map(|b| {
            let x = &beta[b.cols.clone()];
            let mut q = 0.0;
            for (i, xi) in x.iter().enumerate() {
                for (j, xj) in x.iter().enumerate() {
                    q += xi * b.s[(i, j)] * xj;
                }
            }
            0.5 * b.lambda * q
        })
        .sum()
}

fn add_penalty_grad(prior: &[PriorBlock], beta: &[f64], grad: &mut [f64]) {
    for b in prior {
        let x = &beta[b.cols.clone()];
        for i in 0..x.len() {
            let v: f64 = (0..x.len()).map(|j| b.s[(i, j)] * x[j]).sum();
            grad[b.cols.start + i] += b.lambda * v;
        }
    }
}

fn add_penalty_hessian(prior: &[PriorBlock], h: &mut DMatrix<f64>) {
    for b in prior {
        let o = b.cols.start;
        for i in 0..b.cols.len() {
            for j in 0..b.cols.len() {
                h[(o + i, o + j)] += b.lambda * b.s[(i, j)];
            }
        }
    }
}

/// `-1/2 log det` of the prior precision.
pub fn prior_log_det_term(prior: &[PriorBlock]) -> f64 {
    -0.5 * prior.iter().map(|b| b.cols.len() as f64 * b.lambda.ln() + b.log_det).sum::<f64>()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Cholesky factor of `h`, adding a growing ridge until it succeeds.
fn regularized_cholesky(h: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return c;
    }
    let scale = h.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut mu = 1e-8 * scale;
    loop {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += mu;
        }
        if let Some(c) = Cholesky::new(hr) {
            return c;
        }
        mu *= 10.0;
    }
}

/// Minimize `g` by damped Newton from `beta0` and return the Laplace approximation.
pub fn laplace<P: InnerProblem + ?Sized>(
    problem: &mut P,
    prior: &[PriorBlock],
    beta0: &[f64],
    opts: &InnerOptions,
) -> Result<LaplaceFit> {
    let q = problem.dim();
    let mut beta = beta0.to_vec();
    let (d, mut grad) = problem.value_grad(&beta)?;
    let mut g = d + penalty(prior, &beta);
    add_penalty_grad(prior, &beta, &mut grad);
    if !g.is_finite() {
        return Err(Error::Numerical("non-finite penalized likelihood at the inner starting point".into()));
    }
    let mut iterations = 0;
    loop {
        let gnorm = inf_norm(&grad);
        if gnorm <= opts.tol * g.abs().max(1.0) {
            break;
        }
        // gradients from differenced densities cannot get below this
        let at_noise_floor = gnorm <= 1e-5 * g.abs().max(1.0);
        if iterations >= opts.max_iter {
            if at_noise_floor {
                break;
            }
            return Err(Error::InnerNotConverged { iterations, grad_norm: gnorm, best: beta });
        }
        iterations += 1;
        let mut h = problem.hessian(&beta)?;
        add_penalty_hessian(prior, &mut h);
        let chol = regularized_cholesky(&h);
        let step = chol.solve(&DVector::from_column_slice(&grad));
        let slope: f64 = grad.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            let dv = problem.value(&cand);
            if let Ok(dv) = dv {
                let gv = dv + penalty(prior, &cand);
                if gv.is_finite() && gv <= g - 1e-4 * t * slope {
                    accepted = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => {
                beta = cand;
                let (d, mut gr) = problem.value_grad(&beta)?;
                add_penalty_grad(prior, &beta, &mut gr);
                let g_new = d + penalty(prior, &beta);
                let stalled = g - g_new <= 1e-13 * g.abs().max(1.0);
                g = g_new;
                grad = gr;
                if stalled && inf_norm(&grad) <= 1e-5 * g.abs().max(1.0) {
                    break;
                }
            }
            None => {
                // No decrease possible: accept if already at the noise floor.
                if at_noise_floor {
                    break;
                }
                return Err(Error::InnerNotConverged { iterations, grad_norm: gnorm, best: beta });
            }
        }
    }
    let mut h = if q > 0 { problem.hessian(&beta)? } else { DMatrix::zeros(0, 0) };
    add_penalty_hessian(prior, &mut h);
    let log_det_h = if q == 0 {
        0.0
    } else {
        let chol = Cholesky::new(h.clone())
            .ok_or_else(|| Error::Numerical("inner Hessian is not positive definite at the optimum".into()))?;
        2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    };
    let value = g + 0.5 * log_det_h + prior_log_det_term(prior);
    Ok(LaplaceFit { value, beta, hessian: h, penalized_nll: g, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// D(beta) = 1/2 (beta - m)' A (beta - m) + c: Laplace is exact.
    struct Quadratic {
        a: DMatrix<f64>,
        m: Vec<f64>,
        c: f64,
    }

    impl InnerProblem for Quadratic {
        fn dim(&self) -> usize {
            self.m.len()
        }
        fn value(&mut self, beta: &[f64]) -> Result<f64> {
            let d = DVector::from_iterator(beta.len(), beta.iter().zip(&self.m).map(|(b, m)| b - m));
            Ok(0.5 * (d.transpose() * &self.a * &d)[(0, 0)] + self.c)
        }
        fn value_grad(&mut self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let d = DVector::from_iterator(beta.len(), beta.iter().zip(&self.m).map(|(b, m)| b - m));
            let g = &self.a * &d;
            Ok((self.value(beta)?, g.iter().copied().collect()))
        }
        fn hessian(&mut self, _beta: &[f64]) -> Result<DMatrix<f64>> {
            Ok(self.a.clone())
        }
    }

    #[test]
    fn exact_for_gaussian_integrand() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]);
        let lambda = 0.7;
        let mut p = Quadratic { a: a.clone(), m: vec![1.0, -2.0], c: 0.3 };
        let log_det_s: f64 = s.clone().cholesky().unwrap().l().diagonal().iter().map(|x: &f64| 2.0 * x.ln()).sum();
        let prior = [PriorBlock { cols: 0..2, s: &s, log_det: log_det_s, lambda }];
        let fit = laplace(&mut p, &prior, &[0.0, 0.0], &InnerOptions::default()).unwrap();

        // closed form: int exp(-D) N(beta; 0, (lambda S)^-1) dbeta
        let prec = &s * lambda;
        let m = DVector::from_vec(vec![1.0, -2.0]);
        let post = &a + &prec;
        let quad = (m.transpose() * (&a - &a * post.clone().try_inverse().unwrap() * &a) * &m)[(0, 0)];
        let ld = |x: &DMatrix<f64>| -> f64 { x.clone().cholesky().unwrap().l().diagonal().iter().map(|v: &f64| 2.0 * v.ln()).sum() };
        let exact = 0.3 + 0.5 * quad + 0.5 * ld(&post) - 0.5 * ld(&prec);
        assert!((fit.value - exact).abs() < 1e-10, "{} vs {exact}", fit.value);
    }

    #[test]
    fn penalty_is_half_quadratic_form() {
        let s = DMatrix::identity(2, 2);
        let prior = [PriorBlock { cols: 0..2, s: &s, log_det: 0.0, lambda: 2.0 }];
        assert_eq!(penalty(&prior, &[1.0, -1.0]), 2.0);
    }
}
