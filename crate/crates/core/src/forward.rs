//! Scaled forward and backward recursions over the per-row emission and
//! transition quantities of a compiled model.
//!
//! Row `t` of a series carries the transition matrix that moves the chain from
//! `t` to `t + 1`; the matrix on the last row of a series is unused. Emission
//! probabilities are stored on the log scale and shifted by their row maximum
//! before exponentiation.

use std::ops::Range;

use crate::error::Result;
use crate::hidden::tpm_row;
use crate::model::{LpKind, Model, ParameterSet};

/// Per-row quantities for one parameter value.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub k: usize,
    /// Linear predictor values per predictor.
    pub eta: Vec<Vec<f64>>,
    /// Log-density of each variable, `n * K`; missing cells contribute 0.
    pub logf_v: Vec<Vec<f64>>,
    /// Sum of `logf_v` over variables, `n * K`.
    pub logf: Vec<f64>,
    /// Transition matrices, `n * K * K`.
    pub tpm: Vec<f64>,
    /// Initial distribution per series.
    pub delta: Vec<Vec<f64>>,
}

impl Workspace {
    pub fn new(model: &Model, p: &ParameterSet) -> Result<Self> {
        let eta = model.eta_all(p);
        Self::from_eta(model, p, eta)
    }

    pub fn from_eta(model: &Model, p: &ParameterSet, eta: Vec<Vec<f64>>) -> Result<Self> {
        let n = model.data.n;
        let k = model.k;
        let mut ws = Workspace {
            k,
            eta,
            logf_v: vec![vec![0.0; n * k]; model.n_vars()],
            logf: vec![0.0; n * k],
            tpm: vec![0.0; n * k * k],
            delta: vec![Vec::new(); model.n_series()],
        };
        for v in 0..model.n_vars() {
            ws.fill_var(model, v, 0..n);
        }
        ws.sum_logf(0..n);
        ws.fill_tpm(model, None, 0..n);
        for s in 0..model.n_series() {
            ws.fill_delta(model, p, s)?;
        }
        Ok(ws)
    }

    /// Recompute the log-densities of variable `v` on `rows`.
    pub fn fill_var(&mut self, model: &Model, v: usize, rows: Range<usize>) {
        let k = self.k;
        let f = model.spec.observations[v].family;
        let z = &model.data.responses[v];
        let lps = &model.obs_lp[v];
        let mut omega = [0.0; 4];
        let np = lps.len();
        for t in rows {
            match z[t] {
                None => self.logf_v[v][t * k..(t + 1) * k].fill(0.0),
                Some(zt) => {
                    for j in 0..k {
                        for (pi, l) in lps.iter().enumerate() {
                            omega[pi] = f.invert_one(pi, self.eta[l[j]][t]);
                        }
                        self.logf_v[v][t * k + j] = f.log_pdf_unchecked(zt, &omega[..np]);
                    }
                }
            }
        }
    }

    /// Recompute the summed log-densities on `rows`.
    pub fn sum_logf(&mut self, rows: Range<usize>) {
        let k = self.k;
        for i in rows.start * k..rows.end * k {
            self.logf[i] = self.logf_v.iter().map(|lv| lv[i]).sum();
        }
    }

    /// Recompute transition matrices on `rows`, all rows of the matrix or only `from`.
    pub fn fill_tpm(&mut self, model: &Model, from: Option<usize>, rows: Range<usize>) {
        let k = self.k;
        let mut e = vec![0.0; k];
        let states: Vec<usize> = match from {
            Some(i) => vec![i],
            None => (0..k).collect(),
        };
        for t in rows {
            for &i in &states {
                for (j, ej) in e.iter_mut().enumerate() {
                    *ej = model.tr_lp[i * k + j].map_or(0.0, |l| self.eta[l][t]);
                }
                let off = t * k * k + i * k;
                tpm_row(&e, &model.zero_mask[i * k..(i + 1) * k], &mut self.tpm[off..off + k]);
            }
        }
    }

    pub fn fill_delta(&mut self, model: &Model, p: &ParameterSet, s: usize) -> Result<()> {
        let k = self.k;
        let t0 = model.data.series[s].start;
        self.delta[s] = model.delta_for(p, s, &self.tpm[t0 * k * k..(t0 + 1) * k * k])?;
        Ok(())
    }

    /// Refresh everything that depends on predictor `l` over `rows` of series `s`.
    pub fn refresh_lp(&mut self, model: &Model, p: &ParameterSet, l: usize, s: usize, rows: Range<usize>) -> Result<()> {
        match model.lps[l].kind {
            LpKind::Obs { var, .. } => {
                self.fill_var(model, var, rows.clone());
                self.sum_logf(rows);
            }
            LpKind::Transition { from, .. } => {
                self.fill_tpm(model, Some(from), rows);
                self.fill_delta(model, p, s)?;
            }
        }
        Ok(())
    }

    pub fn tpm_at(&self, t: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.tpm[t * kk..(t + 1) * kk]
    }
}

/// Scaled forward pass over one series.
#[derive(Debug, Clone)]
pub struct Forward {
    pub rows: Range<usize>,
    /// Normalized forward probabilities, `T * K`.
    pub alpha: Vec<f64>,
    /// Shifted emission probabilities (known states applied), `T * K`.
    pub p: Vec<f64>,
    /// Normalizing constants.
    pub c: Vec<f64>,
    pub loglik: f64,
    /// Row at which every state had zero probability, if any.
    pub failed_at: Option<usize>,
}

/// Emission probabilities of row `t` shifted by their maximum; returns the shift.
fn emission_row(model: &Model, ws: &Workspace, t: usize, out: &mut [f64]) -> f64 {
    let k = ws.k;
    let lf = &ws.logf[t * k..(t + 1) * k];
    let known = model.data.known.as_ref().and_then(|s| s[t]);
    let allowed = |j: usize| known.is_none_or(|s| s == j);
    let mut m = f64::NEG_INFINITY;
    for (j, v) in lf.iter().enumerate() {
        if allowed(j) && (*v > m || v.is_nan()) {
            m = *v;
        }
    }
    if !m.is_finite() {
        out.fill(0.0);
        return m;
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = if allowed(j) { (lf[j] - m).exp() } else { 0.0 };
    }
    m
}

pub fn forward(model: &Model, ws: &Workspace, s: usize) -> Forward {
    let rows = model.data.series[s].clone();
    let k = ws.k;
    let n = rows.len();
    let mut alpha = vec![0.0; n * k];
    let mut p = vec![0.0; n * k];
    let mut c = vec![0.0; n];
    let mut loglik = 0.0;
    let mut failed_at = None;
    for (i, t) in rows.clone().enumerate() {
        let m = emission_row(model, ws, t, &mut p[i * k..(i + 1) * k]);
        if !m.is_finite() {
            failed_at = Some(t);
            loglik = if m.is_nan() || m == f64::INFINITY { f64::NAN } else { f64::NEG_INFINITY };
            break;
        }
        let mut sum = 0.0;
        if i == 0 {
            for j in 0..k {
                let v = ws.delta[s][j] * p[j];
                alpha[j] = v;
                sum += v;
            }
        } else {
            let g = ws.tpm_at(t - 1);
            let (prev, cur) = alpha.split_at_mut(i * k);
            let prev = &prev[(i - 1) * k..];
            for j in 0..k {
                let mut v = 0.0;
                for (a, pv) in prev.iter().enumerate() {
                    v += pv * g[a * k + j];
                }
                v *= p[i * k + j];
                cur[j] = v;
                sum += v;
            }
        }
        if !(sum > 0.0) || !sum.is_finite() {
            failed_at = Some(t);
            loglik = f64::NEG_INFINITY;
            break;
        }
        for a in &mut alpha[i * k..(i + 1) * k] {
            *a /= sum;
        }
        c[i] = sum;
        loglik += sum.ln() + m;
    }
    if let Some(t) = failed_at {
        log::debug!("all states have zero probability at data row {}", t + 1);
    }
    Forward { rows, alpha, p, c, loglik, failed_at }
}

/// Scaled backward variables for a successful forward pass, `T * K`.
pub fn backward(ws: &Workspace, fw: &Forward) -> Vec<f64> {
    let k = ws.k;
    let n = fw.rows.len();
    let mut b = vec![0.0; n * k];
    b[(n - 1) * k..].fill(1.0);
    for i in (0..n - 1).rev() {
        let g = ws.tpm_at(fw.rows.start + i);
        for a in 0..k {
            let mut v = 0.0;
            for j in 0..k {
                v += g[a * k + j] * fw.p[(i + 1) * k + j] * b[(i + 1) * k + j];
            }
            b[i * k + a] = v / fw.c[i + 1];
        }
    }
    b
}

/// Posterior state probabilities from forward and backward variables.
pub fn posteriors(k: usize, fw: &Forward, b: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = fw.alpha.iter().zip(b).map(|(a, b)| a * b).collect();
    for row in g.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        for x in row {
            *x /= s;
        }
    }
    g
}

/// Log-likelihood summed over series in series order.
pub fn loglik(model: &Model, ws: &Workspace) -> f64 {
    (0..model.n_series()).map(|s| forward(model, ws, s).loglik).sum()
}
