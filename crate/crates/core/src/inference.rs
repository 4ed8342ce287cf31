//! Post-fit analysis: state decoding, pseudo-residuals, prediction of model
//! parameters with simulation-based intervals, and posterior predictive checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::design::{CovTable, EncodeNotes};
use crate::error::{Error, Result};
use crate::forward::{backward, forward, posteriors, Workspace};
use crate::hidden::{stationary, tpm_row};
use crate::likelihood::Covariance;
use crate::model::{Model, ParameterSet};
use crate::simulate::{series_rng, simulate};
use crate::util::{parallel_map, quantile_sorted};

/// Most likely state sequence (0-based), one entry per data row. Known
/// states force the path; ties go to the lower state index.
pub fn viterbi(model: &Model, p: &ParameterSet) -> Result<Vec<usize>> {
    let ws = Workspace::new(model, p)?;
    let k = model.k;
    let mut out = vec![0; model.data.n];
    for s in 0..model.n_series() {
        let rows = model.data.series[s].clone();
        let n = rows.len();
        let mut score = vec![f64::NEG_INFINITY; n * k];
        let mut back = vec![0usize; n * k];
        let logb = |t: usize, j: usize| -> f64 {
            if model.data.known.as_ref().and_then(|kn| kn[t]).is_some_and(|st| st != j) {
                f64::NEG_INFINITY
            } else {
                ws.logf[t * k + j]
            }
        };
        for j in 0..k {
            score[j] = ws.delta[s][j].ln() + logb(rows.start, j);
        }
        for i in 1..n {
            let t = rows.start + i;
            let g = ws.tpm_at(t - 1);
            for j in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for a in 0..k {
                    let v = score[(i - 1) * k + a] + g[a * k + j].ln();
                    if v > best {
                        best = v;
                        arg = a;
                    }
                }
                score[i * k + j] = best + logb(t, j);
                back[i * k + j] = arg;
            }
            if score[i * k..(i + 1) * k].iter().all(|v| !(*v > f64::NEG_INFINITY)) {
                return Err(Error::Numerical(format!("no state sequence has positive probability at data row {}", t + 1)));
            }
        }
        if score[..k].iter().all(|v| !(*v > f64::NEG_INFINITY)) {
            return Err(Error::Numerical(format!("no state has positive probability at data row {}", rows.start + 1)));
        }
        let last = &score[(n - 1) * k..];
        let mut st = 0;
        for j in 1..k {
            if last[j] > last[st] {
                st = j;
            }
        }
        for i in (0..n).rev() {
            out[rows.start + i] = st;
            if i > 0 {
                st = back[i * k + st];
            }
        }
    }
    Ok(out)
}

/// Posterior state probabilities, `n` rows of `K`.
pub fn state_probs(model: &Model, p: &ParameterSet) -> Result<Vec<Vec<f64>>> {
    let ws = Workspace::new(model, p)?;
    let k = model.k;
    let mut out = Vec::with_capacity(model.data.n);
    for s in 0..model.n_series() {
        let fw = forward(model, &ws, s);
        if let Some(t) = fw.failed_at {
            return Err(Error::Numerical(format!("every state has zero probability at data row {}", t + 1)));
        }
        let b = backward(&ws, &fw);
        out.extend(posteriors(k, &fw, &b).chunks(k).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Bounds applied to probability integral transforms before `Phi^-1`.
pub const PIT_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Residuals {
    /// `values[var][row]`; missing responses give `None`.
    pub values: Vec<Vec<Option<f64>>>,
    /// Number of transforms that had to be clamped away from 0 or 1.
    pub clamped: usize,
}

/// One-step-ahead forecast pseudo-residuals. Discrete variables use a
/// uniform draw between the left and right CDF limits, seeded by `seed`.
pub fn pseudo_residuals(model: &Model, p: &ParameterSet, seed: u64) -> Result<Residuals> {
    let ws = Workspace::new(model, p)?;
    let k = model.k;
    let nv = model.n_vars();
    let std_normal = Normal::standard();
    let mut values = vec![vec![None; model.data.n]; nv];
    let mut clamped = 0;
    let mut w = vec![0.0; k];
    for s in 0..model.n_series() {
        let fw = forward(model, &ws, s);
        if let Some(t) = fw.failed_at {
            return Err(Error::Numerical(format!("every state has zero probability at data row {}", t + 1)));
        }
        let mut rng = series_rng(seed, s);
        for (i, t) in fw.rows.clone().enumerate() {
            if let Some(st) = model.data.known.as_ref().and_then(|kn| kn[t]) {
                w.fill(0.0);
                w[st] = 1.0;
            } else if i == 0 {
                w.copy_from_slice(&ws.delta[s]);
            } else {
                let g = ws.tpm_at(t - 1);
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = (0..k).map(|a| fw.alpha[(i - 1) * k + a] * g[a * k + j]).sum();
                }
            }
            for v in 0..nv {
                let Some(z) = model.data.responses[v][t] else { continue };
                let f = model.spec.observations[v].family;
                let has_atoms = f.is_discrete() || f == crate::dists::Family::Zigamma2;
                let mut hi = 0.0;
                let mut lo = 0.0;
                for (j, wj) in w.iter().enumerate() {
                    if *wj == 0.0 {
                        continue;
                    }
                    let omega = model.omega(&ws.eta, v, j, t);
                    hi += wj * f.cdf_unchecked(z, &omega);
                    if has_atoms {
                        lo += wj * f.cdf_left_unchecked(z, &omega);
                    }
                }
                let u = if has_atoms {
                    let r: f64 = rng.random();
                    lo + r * (hi - lo)
                } else {
                    hi
                };
                let uc = u.clamp(PIT_CLAMP, 1.0 - PIT_CLAMP);
                if uc != u {
                    clamped += 1;
                }
                values[v][t] = Some(std_normal.inverse_cdf(uc));
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} pseudo-residual transforms were clamped to [{PIT_CLAMP}, 1 - {PIT_CLAMP}]");
    }
    Ok(Residuals { values, clamped })
}

/// Kolmogorov distribution tail `P(K > x)`.
pub fn kolmogorov_tail(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // small-x form converges faster: 1 - sqrt(2 pi)/x sum exp(-(2k-1)^2 pi^2 / (8 x^2))
        let s: f64 = (1..=20)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * std::f64::consts::PI.powi(2) / (8.0 * x * x)).exp()
            })
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * x * x).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against the standard normal:
/// `(D, p-value)` with the small-sample correction of the argument.
pub fn ks_test(x: &[f64]) -> (f64, f64) {
    let mut s: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if s.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let norm = Normal::standard();
    let d = s
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let f = norm.cdf(*v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sq = n.sqrt();
    (d, kolmogorov_tail((sq + 0.12 + 0.11 / sq) * d))
}

/// Lag-1 sample autocorrelation, skipping pairs with a missing value.
pub fn lag1_autocorrelation(x: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = x.iter().flatten().copied().collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = x.windows(2).filter_map(|w| Some((w[0]? - mean) * (w[1]? - mean))).sum();
    cov / var
}

/// What to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Tpm,
    /// Stationary distribution of each row's transition matrix.
    Delta,
    ObsPar,
}

impl std::str::FromStr for Quantity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpm" => Ok(Quantity::Tpm),
            "delta" => Ok(Quantity::Delta),
            "obspar" => Ok(Quantity::ObsPar),
            _ => Err(Error::Spec(format!("unknown quantity '{s}' (valid: tpm, delta, obspar)"))),
        }
    }
}

/// Rows at which to predict.
#[derive(Debug, Clone)]
pub enum Rows {
    /// 0-based rows of the fitted data.
    Indices(Vec<usize>),
    /// Every row of a new covariate table.
    New(Dataset),
}

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub what: Quantity,
    pub rows: Rows,
    /// Number of simulation draws for intervals; 0 gives point estimates only.
    pub n_post: usize,
    pub level: f64,
}

impl PredictionRequest {
    pub fn new(what: Quantity, rows: Rows) -> Self {
        PredictionRequest { what, rows, n_post: 1000, level: 0.95 }
    }
}

/// One predicted value.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedValue {
    /// 0-based index into the requested rows.
    pub row: usize,
    pub quantity: String,
    pub mean: f64,
    pub lcl: Option<f64>,
    pub ucl: Option<f64>,
}

/// Names of the predicted quantities, in output order.
pub fn quantity_names(model: &Model, what: Quantity) -> Vec<String> {
    let k = model.k;
    match what {
        Quantity::Tpm => (0..k * k).map(|c| format!("S{}>S{}", c / k + 1, c % k + 1)).collect(),
        Quantity::Delta => (1..=k).map(|j| format!("state{j}")).collect(),
        Quantity::ObsPar => model
            .spec
            .observations
            .iter()
            .flat_map(|o| {
                o.family
                    .param_names()
                    .iter()
                    .flat_map(move |pn| (1..=k).map(move |j| format!("{}.{pn}.state{j}", o.name)))
            })
            .collect(),
    }
}

/// Design rows of every predictor at the requested rows.
struct PredictionDesign {
    /// `[lp][row]` as `(x, r)`.
    rows: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    n: usize,
}

fn prediction_design(model: &Model, rows: &Rows) -> Result<PredictionDesign> {
    let (table, idx): (CovTable, Vec<usize>) = match rows {
        Rows::Indices(ix) => {
            if let Some(bad) = ix.iter().find(|r| **r >= model.data.n) {
                return Err(Error::Data(format!("row {} is outside the data ({} rows)", bad + 1, model.data.n)));
            }
            (model.table.clone(), ix.clone())
        }
        Rows::New(d) => (CovTable::from_dataset(d), (0..d.n_rows()).collect()),
    };
    let mut notes = EncodeNotes::default();
    let rows = model
        .lps
        .iter()
        .map(|lp| idx.iter().map(|&r| lp.design.encode_row(&table, r, &mut notes)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    notes.warn("prediction");
    Ok(PredictionDesign { rows, n: idx.len() })
}

fn evaluate(model: &Model, design: &PredictionDesign, p: &ParameterSet, what: Quantity) -> Result<Vec<Vec<f64>>> {
    let k = model.k;
    let eta: Vec<Vec<f64>> = model
        .lps
        .iter()
        .zip(&design.rows)
        .map(|(lp, rows)| {
            let a = &p.alpha[lp.alpha.clone()];
            let b = &p.beta[lp.beta.clone()];
            rows.iter()
                .map(|(x, r)| x.iter().zip(a).map(|(u, v)| u * v).sum::<f64>() + r.iter().zip(b).map(|(u, v)| u * v).sum::<f64>())
                .collect()
        })
        .collect();
    (0..design.n)
        .map(|row| match what {
            Quantity::Tpm | Quantity::Delta => {
                let mut g = vec![0.0; k * k];
                for i in 0..k {
                    let e: Vec<f64> = (0..k).map(|j| model.tr_lp[i * k + j].map_or(0.0, |l| eta[l][row])).collect();
                    tpm_row(&e, &model.zero_mask[i * k..(i + 1) * k], &mut g[i * k..(i + 1) * k]);
                }
                if what == Quantity::Tpm {
                    Ok(g)
                } else {
                    stationary(k, &g)
                }
            }
            Quantity::ObsPar => {
                let mut out = Vec::new();
                for (v, o) in model.spec.observations.iter().enumerate() {
                    for (pi, lps) in model.obs_lp[v].iter().enumerate() {
                        for &l in lps {
                            out.push(o.family.invert_one(pi, eta[l][row]));
                        }
                    }
                }
                Ok(out)
            }
        })
        .collect()
}

/// Point predictions of `request.what` at the requested rows.
pub fn predict(model: &Model, p: &ParameterSet, request: &PredictionRequest) -> Result<Vec<PredictedValue>> {
    let design = prediction_design(model, &request.rows)?;
    let names = quantity_names(model, request.what);
    let vals = evaluate(model, &design, p, request.what)?;
    Ok(vals
        .iter()
        .enumerate()
        .flat_map(|(row, v)| {
            v.iter().zip(&names).map(move |(m, q)| PredictedValue { row, quantity: q.clone(), mean: *m, lcl: None, ucl: None })
        })
        .collect())
}

/// Square root of the nearest positive semi-definite matrix (eigenvalues clipped at 0).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut out = eig.eigenvectors.clone();
    for (j, e) in eig.eigenvalues.iter().enumerate() {
        let s = e.max(0.0).sqrt();
        for i in 0..out.nrows() {
            out[(i, j)] *= s;
        }
    }
    out
}

/// Predictions with simulation-based intervals: parameters are drawn from the
/// normal approximation `N(estimates, covariance)`, pushed through the model,
/// and summarized by empirical quantiles. `mean` is the point estimate.
pub fn simulate_ci(
    model: &Model,
    p: &ParameterSet,
    cov: Option<&Covariance>,
    request: &PredictionRequest,
    seed: u64,
    threads: usize,
) -> Result<Vec<PredictedValue>> {
    if !(request.level > 0.0 && request.level < 1.0) {
        return Err(Error::Spec(format!("interval level must lie in (0, 1), got {}", request.level)));
    }
    let mut point = predict(model, p, request)?;
    if request.n_post == 0 {
        return Ok(point);
    }
    let cov = cov.ok_or_else(|| Error::Model("intervals need the covariance matrix; fit with covariance enabled".into()))?;
    let design = prediction_design(model, &request.rows)?;
    let root = psd_sqrt(&cov.matrix);
    let mu = DVector::from_vec(p.full());
    let dim = mu.len();
    let draws: Vec<Result<Vec<f64>>> = parallel_map(request.n_post, threads, |j| {
        let mut rng = series_rng(seed, j);
        let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &mu + &root * z;
        let mut q = p.clone();
        q.set_full(x.as_slice());
        Ok(evaluate(model, &design, &q, request.what)?.concat())
    });
    let draws: Vec<Vec<f64>> = draws.into_iter().collect::<Result<_>>()?;
    let a = (1.0 - request.level) / 2.0;
    for (i, pv) in point.iter_mut().enumerate() {
        let mut col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        col.sort_by(f64::total_cmp);
        pv.lcl = Some(quantile_sorted(&col, a));
        pv.ucl = Some(quantile_sorted(&col, 1.0 - a));
    }
    Ok(point)
}

/// Statistics available to posterior predictive checks.
#[derive(Debug, Clone, PartialEq)]
pub enum Statistic {
    Mean,
    Sd,
    Quantile(f64),
    Lag1,
    ZeroProportion,
    /// Number of non-missing values.
    Count,
}

impl std::str::FromStr for Statistic {
    type Err = Error;
    /// `mean`, `sd`, `q<p>` (e.g. `q0.9`), `acf1`, `zero`, `count`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "sd" => Ok(Statistic::Sd),
            "acf1" => Ok(Statistic::Lag1),
            "zero" => Ok(Statistic::ZeroProportion),
            "count" => Ok(Statistic::Count),
            _ => match s.strip_prefix('q').and_then(|v| v.parse::<f64>().ok()) {
                Some(p) if (0.0..=1.0).contains(&p) => Ok(Statistic::Quantile(p)),
                _ => Err(Error::Spec(format!("unknown statistic '{s}' (valid: mean, sd, q<p>, acf1, zero, count)"))),
            },
        }
    }
}

impl Statistic {
    pub fn compute(&self, x: &[Option<f64>]) -> f64 {
        let vals: Vec<f64> = x.iter().flatten().copied().collect();
        let n = vals.len() as f64;
        match self {
            Statistic::Mean => vals.iter().sum::<f64>() / n,
            Statistic::Sd => {
                let m = vals.iter().sum::<f64>() / n;
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
            Statistic::Quantile(p) => {
                let mut s = vals;
                s.sort_by(f64::total_cmp);
                quantile_sorted(&s, *p)
            }
            Statistic::Lag1 => lag1_autocorrelation(x),
            Statistic::ZeroProportion => vals.iter().filter(|v| **v == 0.0).count() as f64 / n,
            Statistic::Count => n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictiveCheck {
    pub observed: f64,
    pub simulated: Vec<f64>,
    /// `(#{sim < obs} + #{sim == obs} / 2) / n_sims`.
    pub tail: f64,
}

/// Compare a statistic of response `var` with its distribution over datasets
/// simulated from the fitted model on the original covariates. Simulated
/// values are masked where the observed response is missing.
pub fn posterior_predictive_check(
    model: &Model,
    p: &ParameterSet,
    var: &str,
    stat: &Statistic,
    n_sims: usize,
    seed: u64,
    threads: usize,
) -> Result<PredictiveCheck> {
    if n_sims == 0 {
        return Err(Error::Spec("posterior predictive checks need at least one simulation".into()));
    }
    let v = model
        .spec
        .observations
        .iter()
        .position(|o| o.name == var)
        .ok_or_else(|| Error::Spec(format!("unknown response variable '{var}'")))?;
    let obs = &model.data.responses[v];
    let observed = stat.compute(obs);
    let sims: Vec<Result<f64>> = parallel_map(n_sims, threads, |j| {
        let d = simulate(model, p, seed.wrapping_add(j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let z: Vec<Option<f64>> = d.response(var)?.iter().zip(obs).map(|(s, o)| o.and(*s)).collect();
        Ok(stat.compute(&z))
    });
    let simulated: Vec<f64> = sims.into_iter().collect::<Result<_>>()?;
    let below = simulated.iter().filter(|s| **s < observed).count() as f64;
    let equal = simulated.iter().filter(|s| **s == observed).count() as f64;
    let tail = (below + 0.5 * equal) / n_sims as f64;
    Ok(PredictiveCheck { observed, simulated, tail })
}
