//! Likelihood evaluation and model fitting.
//!
//! The data term is the forward-algorithm log-likelihood. When the model has
//! penalized terms, the random effects are integrated out with the Laplace
//! approximation of [`crate::laplace`]; the inner problem's gradient in `beta`
//! is analytic through the forward-backward quantities, and its Hessian is a
//! finite difference of that gradient restricted to the series each random
//! column touches.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{backward, forward, posteriors, Workspace};
use crate::hidden::{stationary_unchecked, tpm_row, InitialMode};
use crate::laplace::{laplace, penalty, InnerOptions, InnerProblem, LaplaceFit, PriorBlock};
use crate::model::{LpKind, Model, ParameterSet, Slot};
use crate::optim::{bfgs, fd_gradient, fd_hessian, nelder_mead, OptOptions};

/// Bounds applied to `log lambda` during evaluation.
pub const LOG_LAMBDA_BOUND: f64 = 20.0;

/// Log-likelihood of all series, summed in series order. A row where every
/// state has zero density gives `-inf` and a warning naming the row.
pub fn forward_loglik(model: &Model, p: &ParameterSet) -> Result<f64> {
    let ws = Workspace::new(model, p)?;
    let mut total = 0.0;
    for s in 0..model.n_series() {
        let fw = forward(model, &ws, s);
        if let Some(t) = fw.failed_at {
            log::warn!("every state has zero density at data row {}", t + 1);
        }
        total += fw.loglik;
    }
    Ok(total)
}

fn prior_blocks<'m>(model: &'m Model, p: &ParameterSet) -> Vec<PriorBlock<'m>> {
    model
        .blocks
        .iter()
        .zip(&p.log_lambda)
        .map(|(b, ll)| PriorBlock {
            cols: b.cols.clone(),
            s: &b.s,
            log_det: b.log_det,
            lambda: ll.clamp(-LOG_LAMBDA_BOUND, LOG_LAMBDA_BOUND).exp(),
        })
        .collect()
}

/// `-log L(alpha, beta) + 1/2 sum_i lambda_i beta_i' S_i beta_i`.
pub fn penalized_joint_nll(model: &Model, p: &ParameterSet) -> Result<f64> {
    let ll = forward_loglik(model, p)?;
    Ok(-ll + penalty(&prior_blocks(model, p), &p.beta))
}

/// Copy of the per-series state touched by one predictor, for cheap restores.
struct Snapshot {
    eta: Vec<f64>,
    logf_v: Vec<f64>,
    logf: Vec<f64>,
    tpm: Vec<f64>,
    delta: Vec<f64>,
}

/// The inner problem of one outer evaluation: `-log L` as a function of `beta`
/// with `alpha`, `lambda` and the initial distribution held fixed.
pub struct HmmInner<'m> {
    model: &'m Model,
    p: ParameterSet,
    ws: Workspace,
    /// `X alpha` of each predictor with random effects.
    base: Vec<Vec<f64>>,
    random_lps: Vec<usize>,
    /// Per random predictor and series: `(column, lo, hi)` ranges into `r_column`.
    touch: Vec<Vec<Vec<(usize, usize, usize)>>>,
    loaded: Option<Vec<f64>>,
}

impl<'m> HmmInner<'m> {
    pub fn new(model: &'m Model, p: &ParameterSet) -> Result<Self> {
        let ws = Workspace::new(model, p)?;
        let random_lps: Vec<usize> = (0..model.lps.len()).filter(|&l| !model.lps[l].beta.is_empty()).collect();
        let base = random_lps
            .iter()
            .map(|&l| {
                let lp = &model.lps[l];
                lp.design.eta(&p.alpha[lp.alpha.clone()], &vec![0.0; lp.beta.len()])
            })
            .collect();
        let touch = random_lps
            .iter()
            .map(|&l| {
                let d = &model.lps[l].design;
                model
                    .data
                    .series
                    .iter()
                    .map(|rows| {
                        (0..d.n_random())
                            .filter_map(|c| {
                                let col = d.r_column(c);
                                let lo = col.partition_point(|(r, _)| *r < rows.start);
                                let hi = col.partition_point(|(r, _)| *r < rows.end);
                                (hi > lo).then_some((c, lo, hi))
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(HmmInner { model, p: p.clone(), ws, base, random_lps, touch, loaded: Some(p.beta.clone()) })
    }

    fn set_beta(&mut self, beta: &[f64]) -> Result<()> {
        if self.loaded.as_deref() == Some(beta) {
            return Ok(());
        }
        let model = self.model;
        let n = model.data.n;
        self.p.beta.copy_from_slice(beta);
        let mut vars = vec![false; model.n_vars()];
        let mut froms = vec![false; model.k];
        for (i, &l) in self.random_lps.iter().enumerate() {
            let lp = &model.lps[l];
            let eta = &mut self.ws.eta[l];
            eta.copy_from_slice(&self.base[i]);
            for (c, b) in beta[lp.beta.clone()].iter().enumerate() {
                for &(row, v) in lp.design.r_column(c) {
                    eta[row] += b * v;
                }
            }
            match lp.kind {
                LpKind::Obs { var, .. } => vars[var] = true,
                LpKind::Transition { from, .. } => froms[from] = true,
            }
        }
        for (v, _) in vars.iter().enumerate().filter(|(_, t)| **t) {
            self.ws.fill_var(model, v, 0..n);
        }
        if vars.iter().any(|t| *t) {
            self.ws.sum_logf(0..n);
        }
        for (i, _) in froms.iter().enumerate().filter(|(_, t)| **t) {
            self.ws.fill_tpm(model, Some(i), 0..n);
        }
        if froms.iter().any(|t| *t) {
            for s in 0..model.n_series() {
                self.ws.fill_delta(model, &self.p, s)?;
            }
        }
        self.loaded = Some(beta.to_vec());
        Ok(())
    }

    fn loglik(&self) -> f64 {
        (0..self.model.n_series()).map(|s| forward(self.model, &self.ws, s).loglik).sum()
    }

    /// Log-likelihood of series `s`; subtracts its gradient in `beta` from `grad`.
    fn series_grad(&self, s: usize, grad: &mut [f64]) -> f64 {
        let model = self.model;
        let ws = &self.ws;
        let k = model.k;
        let fw = forward(model, ws, s);
        if !fw.loglik.is_finite() {
            return fw.loglik;
        }
        let b = backward(ws, &fw);
        let gam = posteriors(k, &fw, &b);
        let t0 = fw.rows.start;
        let n = fw.rows.len();
        let stationary = model.spec.hidden.initial_mode == InitialMode::Stationary;
        let mut geta = vec![0.0; n];
        let mut omega = [0.0; 4];
        for (i, &l) in self.random_lps.iter().enumerate() {
            let lp = &model.lps[l];
            geta.fill(0.0);
            match lp.kind {
                LpKind::Obs { var, param, state } => {
                    let f = model.spec.observations[var].family;
                    let lps = &model.obs_lp[var];
                    let np = lps.len();
                    let z = &model.data.responses[var];
                    for (r, g) in geta.iter_mut().enumerate() {
                        let t = t0 + r;
                        let w = gam[r * k + state];
                        let Some(zt) = z[t] else { continue };
                        if w == 0.0 {
                            continue;
                        }
                        for (pi, l2) in lps.iter().enumerate() {
                            omega[pi] = f.invert_one(pi, ws.eta[l2[state]][t]);
                        }
                        if let Some(d) = f.dlog_pdf_deta(param, zt, &omega[..np]) {
                            *g = w * d;
                            continue;
                        }
                        let e = ws.eta[l][t];
                        let h = 1e-5 * e.abs().max(1.0);
                        omega[param] = f.invert_one(param, e + h);
                        let up = f.log_pdf_unchecked(zt, &omega[..np]);
                        omega[param] = f.invert_one(param, e - h);
                        let dn = f.log_pdf_unchecked(zt, &omega[..np]);
                        *g = w * (up - dn) / (2.0 * h);
                    }
                }
                LpKind::Transition { from, to } => {
                    for (r, g) in geta.iter_mut().enumerate().take(n - 1) {
                        let tpm = ws.tpm_at(t0 + r);
                        let gij = tpm[from * k + to];
                        let xi = fw.alpha[r * k + from] * gij * fw.p[(r + 1) * k + to] * b[(r + 1) * k + to] / fw.c[r + 1];
                        *g = xi - gij * gam[r * k + from];
                    }
                    if stationary {
                        geta[0] += self.delta_chain(s, &fw, &b, from, to);
                    }
                }
            }
            for &(c, lo, hi) in &self.touch[i][s] {
                let acc: f64 = lp.design.r_column(c)[lo..hi].iter().map(|&(row, v)| v * geta[row - t0]).sum();
                grad[lp.beta.start + c] -= acc;
            }
        }
        fw.loglik
    }

    /// Derivative of the log-likelihood of series `s` through its stationary
    /// initial distribution with respect to the first-row transition predictor `from -> to`.
    fn delta_chain(&self, s: usize, fw: &crate::forward::Forward, b: &[f64], from: usize, to: usize) -> f64 {
        let model = self.model;
        let k = model.k;
        let t0 = fw.rows.start;
        let dl: Vec<f64> = (0..k).map(|j| fw.p[j] * b[j] / fw.c[0]).collect();
        let mut e: Vec<f64> = (0..k).map(|j| model.tr_lp[from * k + j].map_or(0.0, |l| self.ws.eta[l][t0])).collect();
        let e0 = e[to];
        let h = 1e-5 * e0.abs().max(1.0);
        let mut tpm = self.ws.tpm_at(t0).to_vec();
        let zeros = &model.zero_mask[from * k..(from + 1) * k];
        let mut at = |x: f64, tpm: &mut [f64]| {
            e[to] = x;
            tpm_row(&e, zeros, &mut tpm[from * k..(from + 1) * k]);
            stationary_unchecked(k, tpm)
        };
        let up = at(e0 + h, &mut tpm);
        let dn = at(e0 - h, &mut tpm);
        let _ = s;
        (0..k).map(|j| dl[j] * (up[j] - dn[j]) / (2.0 * h)).sum()
    }

    fn snapshot(&self, l: usize, s: usize) -> Snapshot {
        let ws = &self.ws;
        let k = ws.k;
        let rows = self.model.data.series[s].clone();
        let var = match self.model.lps[l].kind {
            LpKind::Obs { var, .. } => Some(var),
            LpKind::Transition { .. } => None,
        };
        Snapshot {
            eta: ws.eta[l][rows.clone()].to_vec(),
            logf_v: var.map_or(Vec::new(), |v| ws.logf_v[v][rows.start * k..rows.end * k].to_vec()),
            logf: ws.logf[rows.start * k..rows.end * k].to_vec(),
            tpm: ws.tpm[rows.start * k * k..rows.end * k * k].to_vec(),
            delta: ws.delta[s].clone(),
        }
    }

    fn restore(&mut self, l: usize, s: usize, snap: &Snapshot) {
        let k = self.ws.k;
        let rows = self.model.data.series[s].clone();
        self.ws.eta[l][rows.clone()].copy_from_slice(&snap.eta);
        if let LpKind::Obs { var, .. } = self.model.lps[l].kind {
            self.ws.logf_v[var][rows.start * k..rows.end * k].copy_from_slice(&snap.logf_v);
        }
        self.ws.logf[rows.start * k..rows.end * k].copy_from_slice(&snap.logf);
        self.ws.tpm[rows.start * k * k..rows.end * k * k].copy_from_slice(&snap.tpm);
        self.ws.delta[s].clone_from(&snap.delta);
    }

    /// Gradient of series `s` with column `c` of predictor `i` shifted by `h`.
    fn shifted_grad(&mut self, i: usize, c: usize, s: usize, lo: usize, hi: usize, h: f64, out: &mut [f64]) -> Result<()> {
        let l = self.random_lps[i];
        let model = self.model;
        let rows = model.data.series[s].clone();
        for &(row, v) in &model.lps[l].design.r_column(c)[lo..hi] {
            self.ws.eta[l][row] += h * v;
        }
        self.ws.refresh_lp(model, &self.p, l, s, rows)?;
        out.fill(0.0);
        self.series_grad(s, out);
        Ok(())
    }
}

impl InnerProblem for HmmInner<'_> {
    fn dim(&self) -> usize {
        self.p.beta.len()
    }

    fn value(&mut self, beta: &[f64]) -> Result<f64> {
        self.set_beta(beta)?;
        Ok(-self.loglik())
    }

    fn value_grad(&mut self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.set_beta(beta)?;
        let mut grad = vec![0.0; beta.len()];
        let mut ll = 0.0;
        for s in 0..self.model.n_series() {
            ll += self.series_grad(s, &mut grad);
        }
        Ok((-ll, grad))
    }

    fn hessian(&mut self, beta: &[f64]) -> Result<DMatrix<f64>> {
        self.set_beta(beta)?;
        let q = beta.len();
        let mut h = DMatrix::zeros(q, q);
        let mut gp = vec![0.0; q];
        let mut gm = vec![0.0; q];
        for i in 0..self.random_lps.len() {
            let l = self.random_lps[i];
            let start = self.model.lps[l].beta.start;
            for s in 0..self.model.n_series() {
                let cols = self.touch[i][s].clone();
                if cols.is_empty() {
                    continue;
                }
                let snap = self.snapshot(l, s);
                for (c, lo, hi) in cols {
                    let gc = start + c;
                    let step = 1e-4 * beta[gc].abs().max(1.0);
                    self.shifted_grad(i, c, s, lo, hi, step, &mut gp)?;
                    self.restore(l, s, &snap);
                    self.shifted_grad(i, c, s, lo, hi, -step, &mut gm)?;
                    self.restore(l, s, &snap);
                    for r in 0..q {
                        h[(r, gc)] += (gp[r] - gm[r]) / (2.0 * step);
                    }
                }
            }
        }
        if h.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::Numerical("non-finite inner Hessian".into()));
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

/// Laplace-approximated marginal negative log-likelihood at `(alpha, lambda)`,
/// starting the inner solve from `p.beta`. Without penalized terms this is
/// `-forward_loglik` and the returned `beta` is empty.
pub fn laplace_marginal_nll(model: &Model, p: &ParameterSet, opts: &InnerOptions) -> Result<LaplaceFit> {
    if model.n_beta() == 0 {
        let ll = forward_loglik(model, p)?;
        return Ok(LaplaceFit { value: -ll, beta: vec![], hessian: DMatrix::zeros(0, 0), penalized_nll: -ll, iterations: 0 });
    }
    let prior = prior_blocks(model, p);
    let mut inner = HmmInner::new(model, p)?;
    laplace(&mut inner, &prior, &p.beta, opts)
}

/// Outer optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NelderMead,
    QuasiNewton,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nelder-mead" | "nm" => Ok(Method::NelderMead),
            "quasi-newton" | "bfgs" => Ok(Method::QuasiNewton),
            _ => Err(Error::Spec(format!("unknown method '{s}' (valid: nelder-mead, quasi-newton)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub method: Method,
    pub max_iter: usize,
    /// Relative tolerance on the outer objective.
    pub tol: f64,
    /// Compute the joint covariance after fitting.
    pub covariance: bool,
    pub inner: InnerOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { method: Method::NelderMead, max_iter: 1000, tol: 1e-8, covariance: true, inner: InnerOptions::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub method: Method,
    pub iterations: usize,
    pub evaluations: usize,
    /// Max-norm of the finite-difference gradient of the outer objective at the optimum.
    pub grad_norm: f64,
    pub message: String,
    /// Best objective value after each iteration.
    pub trace: Vec<f64>,
}

/// Joint covariance of `[alpha, beta, log_lambda, delta0]`.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// The outer Hessian was not positive definite; `matrix` uses absolute eigenvalues.
    pub indefinite: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterSet,
    pub covariance: Option<Covariance>,
    /// Laplace-approximated marginal log-likelihood (the log-likelihood when there are no random effects).
    pub marginal_loglik: f64,
    /// Log-likelihood at the estimates, random effects at their predicted values.
    pub loglik: f64,
    pub convergence: Convergence,
}

impl FitResult {
    /// Standard deviations `1 / sqrt(lambda)` of the penalized terms.
    pub fn sd_re(&self) -> Vec<f64> {
        self.params.log_lambda.iter().map(|l| (-0.5 * l).exp()).collect()
    }
}

/// The outer objective over free parameters, with warm-started inner solves.
pub struct Objective<'m> {
    model: &'m Model,
    base: ParameterSet,
    warm: Vec<f64>,
    inner: InnerOptions,
    pub evaluations: usize,
}

impl<'m> Objective<'m> {
    pub fn new(model: &'m Model, theta0: &ParameterSet, inner: InnerOptions) -> Self {
        Objective { model, base: theta0.clone(), warm: theta0.beta.clone(), inner, evaluations: 0 }
    }

    /// Parameters with the given free values; `log lambda` clamped to its bounds.
    pub fn params(&self, free: &[f64]) -> ParameterSet {
        let mut outer = self.base.outer();
        self.model.fixshare.apply(free, &mut outer);
        let mut p = self.base.clone();
        p.set_outer(&outer);
        for l in &mut p.log_lambda {
            *l = l.clamp(-LOG_LAMBDA_BOUND, LOG_LAMBDA_BOUND);
        }
        p.beta.clone_from(&self.warm);
        p
    }

    pub fn eval(&mut self, free: &[f64]) -> Result<(ParameterSet, LaplaceFit)> {
        self.evaluations += 1;
        let mut p = self.params(free);
        let fit = laplace_marginal_nll(self.model, &p, &self.inner)?;
        if fit.value.is_finite() {
            self.warm.clone_from(&fit.beta);
        }
        p.beta.clone_from(&fit.beta);
        Ok((p, fit))
    }

    /// Objective value; failures map to `+inf`.
    pub fn value(&mut self, free: &[f64]) -> f64 {
        match self.eval(free) {
            Ok((_, f)) if !f.value.is_nan() => f.value,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::debug!("outer evaluation failed: {e}");
                f64::INFINITY
            }
        }
    }

    /// Reset the warm start.
    pub fn set_warm(&mut self, beta: &[f64]) {
        self.warm = beta.to_vec();
    }
}

/// Maximize the (marginal) likelihood from `theta0`.
pub fn fit(model: &Model, theta0: &ParameterSet, opts: &FitOptions) -> Result<FitResult> {
    let mut obj = Objective::new(model, theta0, opts.inner);
    let free0 = model.fixshare.to_free(&theta0.outer());
    let v0 = match obj.eval(&free0) {
        Ok((_, f)) => f.value,
        Err(e) => {
            return Err(Error::Numerical(format!(
                "objective cannot be evaluated at the initial values ({e}); try suggest-init for starting values"
            )))
        }
    };
    if !v0.is_finite() {
        return Err(Error::Numerical(
            "non-finite objective at the initial values; the data are impossible under them. Try suggest-init for starting values".into(),
        ));
    }
    let oo = OptOptions { max_iter: opts.max_iter, reltol: opts.tol };
    let res = match opts.method {
        Method::NelderMead => nelder_mead(|x| obj.value(x), &free0, &oo),
        Method::QuasiNewton => bfgs(|x| obj.value(x), &free0, &oo),
    };
    let (params, lfit) = obj.eval(&res.x)?;
    let grad = fd_gradient(&mut |x: &[f64]| obj.value(x), &res.x, 1e-5);
    obj.set_warm(&lfit.beta);
    let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let covariance = if opts.covariance {
        match covariance(model, &mut obj, &res.x, &lfit) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("covariance not available: {e}");
                None
            }
        }
    } else {
        None
    };
    let loglik = forward_loglik(model, &params)?;
    if !res.converged {
        log::warn!("outer optimizer did not converge: {}", res.message);
    }
    Ok(FitResult {
        params,
        covariance,
        marginal_loglik: -lfit.value,
        loglik,
        convergence: Convergence {
            converged: res.converged,
            method: opts.method,
            iterations: res.iterations,
            evaluations: obj.evaluations,
            grad_norm,
            message: res.message,
            trace: res.trace,
        },
    })
}

/// Inverse of a symmetric matrix; falls back to the absolute-eigenvalue
/// pseudo-inverse when it is not positive definite. Returns the inverse and
/// whether the fallback was used.
pub fn spd_inverse(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = h.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let sym = (h + h.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return (c.inverse(), false);
    }
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut inv = DMatrix::zeros(n, n);
    for (i, e) in eig.eigenvalues.iter().enumerate() {
        if e.abs() <= 1e-12 * max {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        inv += v * v.transpose() / e.abs();
    }
    (inv, true)
}

/// Joint covariance of all parameters: the inverse finite-difference Hessian
/// of the outer objective for `(alpha, log_lambda, delta0)`, and
/// `H^-1 + J V J'` for `beta`, with `J = d beta_hat / d theta` by re-solving.
fn covariance(model: &Model, obj: &mut Objective, free: &[f64], lfit: &LaplaceFit) -> Result<Covariance> {
    let nf = free.len();
    let hf = fd_hessian(&mut |x: &[f64]| obj.value(x), free, 1e-3);
    obj.set_warm(&lfit.beta);
    if hf.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numerical("outer Hessian has non-finite entries".into()));
    }
    let (vf, indefinite) = spd_inverse(&hf);
    if indefinite {
        log::warn!("outer Hessian is not positive definite; covariance uses absolute eigenvalues");
    }
    let nb = model.n_beta();
    let mut jac = DMatrix::zeros(nb, nf);
    if nb > 0 {
        for i in 0..nf {
            let h = 1e-4 * free[i].abs().max(1.0);
            let mut x = free.to_vec();
            x[i] = free[i] + h;
            obj.set_warm(&lfit.beta);
            let (_, up) = obj.eval(&x)?;
            x[i] = free[i] - h;
            obj.set_warm(&lfit.beta);
            let (_, dn) = obj.eval(&x)?;
            for r in 0..nb {
                jac[(r, i)] = (up.beta[r] - dn.beta[r]) / (2.0 * h);
            }
        }
        obj.set_warm(&lfit.beta);
    }
    let no = model.n_outer();
    let mut a = DMatrix::zeros(no, nf);
    for (i, s) in model.fixshare.slots.iter().enumerate() {
        if let Slot::Free(f) = s {
            a[(i, *f)] = 1.0;
        }
    }
    let vo = &a * &vf * a.transpose();
    let n = no + nb;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..no {
        for j in 0..no {
            m[(model.outer_to_full(i), model.outer_to_full(j))] = vo[(i, j)];
        }
    }
    if nb > 0 {
        let (hinv, _) = spd_inverse(&lfit.hessian);
        let vbb = hinv + &jac * &vf * jac.transpose();
        let vob = &a * &vf * jac.transpose();
        let o = model.n_alpha();
        for r in 0..nb {
            for c in 0..nb {
                m[(o + r, o + c)] = vbb[(r, c)];
            }
            for i in 0..no {
                let fi = model.outer_to_full(i);
                m[(fi, o + r)] = vob[(i, r)];
                m[(o + r, fi)] = vob[(i, r)];
            }
        }
    }
    let m = (&m + m.transpose()) * 0.5;
    Ok(Covariance { matrix: m, indefinite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Dataset};
    use crate::design::Formula;
    use crate::dists::Family;
    use crate::hidden::ChainSpec;
    use crate::model::{ModelSpec, ObsSpec};
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, n_ids: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut responses = IndexMap::new();
        responses.insert("z".to_string(), (0..n).map(|_| Some(rng.random_range(-3.0..3.0))).collect());
        let mut covs = IndexMap::new();
        covs.insert("x".to_string(), Column::Numeric((0..n).map(|i| Some((i as f64 * 0.37).sin())).collect()));
        let ids = (0..n).map(|i| format!("id{}", i * n_ids / n)).collect();
        Dataset::with_rows(n, Some(ids), responses, covs, None).unwrap()
    }

    fn model(obs_formula: &str, tr_formula: &str, mode: InitialMode, d: &Dataset) -> Model {
        let mut hidden = ChainSpec::new(2, Formula::parse(tr_formula).unwrap()).unwrap();
        hidden.initial_mode = mode;
        let obs = ObsSpec::new("z", Family::Norm, vec![vec![-1.0, 1.0], vec![1.0, 1.5]])
            .with_formula("mean", Formula::parse(obs_formula).unwrap())
            .unwrap();
        Model::new(&ModelSpec::new(hidden, vec![obs]), d).unwrap()
    }

    fn random_params(m: &Model, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = m.initial_parameters();
        for b in &mut p.beta {
            *b = rng.random_range(-0.5..0.5);
        }
        for a in &mut p.alpha {
            *a += rng.random_range(-0.3..0.3);
        }
        p
    }

    fn check_gradient(m: &Model, seed: u64) {
        let p = random_params(m, seed);
        let mut inner = HmmInner::new(m, &p).unwrap();
        let (_, g) = inner.value_grad(&p.beta).unwrap();
        let mut f = |b: &[f64]| inner.value(b).unwrap();
        let fd = fd_gradient(&mut f, &p.beta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        let d = dataset(60, 3, 1);
        check_gradient(&model("re(ID)", "spline(x, k=5)", InitialMode::Estimated, &d), 2);
        check_gradient(&model("spline(x, k=4)", "re(ID)", InitialMode::Stationary, &d), 3);
        check_gradient(&model("1", "cyclic(x, k=5, period=2)", InitialMode::Stationary, &d), 4);
    }

    #[test]
    fn localized_hessian_matches_dense_difference() {
        let d = dataset(45, 3, 5);
        let m = model("re(ID)", "re(ID)", InitialMode::Stationary, &d);
        let p = random_params(&m, 6);
        let mut inner = HmmInner::new(&m, &p).unwrap();
        let h = inner.hessian(&p.beta).unwrap();
        let q = p.beta.len();
        for c in 0..q {
            let step = 1e-4;
            let mut b = p.beta.clone();
            b[c] += step;
            let (_, gp) = inner.value_grad(&b).unwrap();
            b[c] -= 2.0 * step;
            let (_, gm) = inner.value_grad(&b).unwrap();
            for r in 0..q {
                let fd = (gp[r] - gm[r]) / (2.0 * step);
                assert!((h[(r, c)] - fd).abs() < 1e-5 * fd.abs().max(1.0), "({r},{c}) {} vs {fd}", h[(r, c)]);
            }
        }
        // the workspace is restored after the Hessian
        let v = inner.value(&p.beta).unwrap();
        let fresh = -forward_loglik(&m, &p).unwrap();
        assert_eq!(v, fresh);
    }

    #[test]
    fn penalized_nll_properties() {
        let d = dataset(30, 2, 7);
        let m = model("re(ID)", "1", InitialMode::Estimated, &d);
        let mut p = m.initial_parameters();
        let ll = forward_loglik(&m, &p).unwrap();
        assert_eq!(penalized_joint_nll(&m, &p).unwrap(), -ll);
        p.beta = vec![1.0, -1.0, 0.5, 0.5];
        let base = penalized_joint_nll(&m, &p).unwrap();
        let c = penalty(&prior_blocks(&m, &p), &p.beta);
        p.log_lambda = p.log_lambda.iter().map(|l| l + 2f64.ln()).collect();
        assert!((penalized_joint_nll(&m, &p).unwrap() - base - c).abs() < 1e-9);
    }

    #[test]
    fn strong_penalty_collapses_to_beta_zero() {
        let d = dataset(80, 4, 8);
        let m = model("re(ID)", "1", InitialMode::Estimated, &d);
        let mut p = m.initial_parameters();
        p.log_lambda = vec![20.0; m.n_blocks()];
        let fit = laplace_marginal_nll(&m, &p, &InnerOptions::default()).unwrap();
        p.beta = vec![0.0; m.n_beta()];
        let ll0 = forward_loglik(&m, &p).unwrap();
        assert!((fit.value + ll0).abs() < 1e-4, "{} vs {}", fit.value, -ll0);
    }

    #[test]
    fn all_missing_gives_zero() {
        let mut d = dataset(10, 1, 9);
        let mut r = d.responses().clone();
        r.insert("z".into(), vec![None; 10]);
        d = d.with_responses(r, None).unwrap();
        let m = model("1", "1", InitialMode::Estimated, &d);
        assert_eq!(forward_loglik(&m, &m.initial_parameters()).unwrap(), 0.0);
    }

    #[test]
    fn fixed_parameters_do_not_move() {
        let d = dataset(200, 1, 10);
        let mut hidden = ChainSpec::new(2, Formula::intercept_only()).unwrap();
        hidden.initial_mode = InitialMode::Estimated;
        let obs = ObsSpec::new("z", Family::Norm, vec![vec![-1.0, 1.0], vec![1.0, 1.0]]);
        let mut spec = ModelSpec::new(hidden, vec![obs]);
        spec.constraints.fixed = vec!["z.mean.state1.(Intercept)".into()];
        spec.constraints.shared = vec![vec!["z.sd.state1.(Intercept)".into(), "z.sd.state2.(Intercept)".into()]];
        let m = Model::new(&spec, &d).unwrap();
        let p0 = m.initial_parameters();
        let opts = FitOptions { covariance: true, ..Default::default() };
        let r = fit(&m, &p0, &opts).unwrap();
        assert_eq!(r.params.alpha[0].to_bits(), p0.alpha[0].to_bits());
        assert_eq!(r.params.alpha[2].to_bits(), r.params.alpha[3].to_bits());
        let cov = r.covariance.unwrap();
        assert!(cov.matrix.row(0).iter().all(|v| *v == 0.0));
        assert!(r.convergence.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
