//! Simulation of state sequences and observations.
//!
//! Each series draws from its own random-number stream derived from the seed,
//! so results do not depend on how series are scheduled. Models with lagged
//! responses in their formulas are simulated row by row, feeding each draw
//! into the design rows that follow.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Column, Dataset};
use crate::design::{CovTable, EncodeNotes};
use crate::error::{Error, Result};
use crate::hidden::tpm_row;
use crate::model::{LpKind, Model, ModelSpec, ParameterSet};

/// Random-number stream for series `s` under `seed`.
pub fn series_rng(seed: u64, s: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Index drawn from the probability vector `p`.
pub fn draw_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding: last state with positive probability
    p.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

/// Simulate responses and states on the covariates and series layout of `model`.
/// The returned dataset is `model.dataset` with responses replaced and the
/// true states in its state column.
pub fn simulate(model: &Model, p: &ParameterSet, seed: u64) -> Result<Dataset> {
    let n = model.data.n;
    let nv = model.n_vars();
    let mut z = vec![vec![None; n]; nv];
    let mut states = vec![None; n];
    if model.uses_lags() {
        let mut table = model.table.clone();
        for s in 0..model.n_series() {
            simulate_series_sequential(model, p, s, seed, &mut table, &mut z, &mut states)?;
        }
    } else {
        let eta = model.eta_all(p);
        for s in 0..model.n_series() {
            let rows = model.data.series[s].clone();
            let mut rng = series_rng(seed, s);
            let delta = model.delta_for(p, s, &model.tpm_at(&eta, rows.start))?;
            let mut st = draw_index(&delta, &mut rng);
            for t in rows.clone() {
                if t > rows.start {
                    let g = model.tpm_at(&eta, t - 1);
                    st = draw_index(&g[st * model.k..(st + 1) * model.k], &mut rng);
                }
                states[t] = Some(st);
                for (v, zv) in z.iter_mut().enumerate() {
                    let f = model.spec.observations[v].family;
                    zv[t] = Some(f.sample(&model.omega(&eta, v, st, t), &mut rng)?);
                }
            }
        }
    }
    let mut responses = IndexMap::new();
    for (o, zv) in model.spec.observations.iter().zip(z) {
        responses.insert(o.name.clone(), zv);
    }
    model.dataset.with_responses(responses, Some(states))
}

fn simulate_series_sequential(
    model: &Model,
    p: &ParameterSet,
    s: usize,
    seed: u64,
    table: &mut CovTable,
    z: &mut [Vec<Option<f64>>],
    states: &mut [Option<usize>],
) -> Result<()> {
    let k = model.k;
    let rows = model.data.series[s].clone();
    let mut rng = series_rng(seed, s);
    let mut notes = EncodeNotes::default();
    let eta_row = |table: &CovTable, t: usize, notes: &mut EncodeNotes| -> Result<Vec<f64>> {
        model
            .lps
            .iter()
            .map(|lp| lp.design.eta_row(table, t, &p.alpha[lp.alpha.clone()], &p.beta[lp.beta.clone()], notes))
            .collect()
    };
    let tpm_of = |e: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            let row: Vec<f64> = (0..k).map(|j| model.tr_lp[i * k + j].map_or(0.0, |l| e[l])).collect();
            tpm_row(&row, &model.zero_mask[i * k..(i + 1) * k], &mut g[i * k..(i + 1) * k]);
        }
        g
    };
    let mut prev_tpm = Vec::new();
    let mut st = 0;
    for t in rows.clone() {
        let e = eta_row(table, t, &mut notes)?;
        let g = tpm_of(&e);
        if t == rows.start {
            let delta = model.delta_for(p, s, &g)?;
            st = draw_index(&delta, &mut rng);
        } else {
            st = draw_index(&prev_tpm[st * k..(st + 1) * k], &mut rng);
        }
        states[t] = Some(st);
        for (v, o) in model.spec.observations.iter().enumerate() {
            let omega: Vec<f64> =
                model.obs_lp[v].iter().enumerate().map(|(pi, lps)| o.family.invert_one(pi, e[lps[st]])).collect();
            let draw = o.family.sample(&omega, &mut rng)?;
            z[v][t] = Some(draw);
            table.set(&o.name, t, Some(draw));
        }
        prev_tpm = g;
    }
    notes.warn("simulation");
    Ok(())
}

/// Simulate from a spec on a fresh layout: `series_lengths` rows per series,
/// covariates taken from `covariates` (required when formulas use them).
/// Uses the spec's initial values when `p` is `None`. Returns the model
/// compiled on the simulated responses (true states not marked as known)
/// along with the data, which carries the true states.
pub fn simulate_spec(
    spec: &ModelSpec,
    p: Option<&ParameterSet>,
    covariates: Option<&Dataset>,
    series_lengths: &[usize],
    seed: u64,
) -> Result<(Model, Dataset)> {
    let n: usize = series_lengths.iter().sum();
    if n == 0 {
        return Err(Error::Data("series lengths must be positive".into()));
    }
    let ids: Vec<String> =
        series_lengths.iter().enumerate().flat_map(|(s, &len)| std::iter::repeat_n((s + 1).to_string(), len)).collect();
    let mut covs: IndexMap<String, Column> = IndexMap::new();
    if let Some(c) = covariates {
        if c.n_rows() != n {
            return Err(Error::Data(format!(
                "covariate table has {} rows but the series lengths add up to {n}",
                c.n_rows()
            )));
        }
        covs = c.covariates().clone();
    }
    let responses: IndexMap<String, Vec<Option<f64>>> =
        spec.observations.iter().map(|o| (o.name.clone(), vec![None; n])).collect();
    let skeleton = Dataset::with_rows(n, Some(ids), responses, covs, None)?;
    let model = Model::new(spec, &skeleton).map_err(|e| match covariates {
        None => Error::Data(format!("{e} (the model uses covariates, so a covariate table is required)")),
        Some(_) => e,
    })?;
    let params = p.cloned().unwrap_or_else(|| model.initial_parameters());
    if params.full().len() != model.names.full().len() {
        return Err(Error::Model("parameter vector does not match the model layout".into()));
    }
    let d = simulate(&model, &params, seed)?;
    let model = model.with_dataset(&d.without_states())?;
    Ok((model, d))
}

/// Reflected Gaussian random walk on `[lo, hi]` starting at the midpoint.
pub fn reflected_random_walk(n: usize, step_sd: f64, lo: f64, hi: f64, seed: u64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::Domain(format!("random walk bounds must satisfy lo < hi, got ({lo}, {hi})")));
    }
    if !(step_sd >= 0.0) {
        return Err(Error::Domain(format!("step sd must be non-negative, got {step_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, step_sd).map_err(|e| Error::Domain(e.to_string()))?;
    let w = hi - lo;
    let mut x = lo + 0.5 * w;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            let y = (x + normal.sample(&mut rng) - lo).rem_euclid(2.0 * w);
            x = lo + if y > w { 2.0 * w - y } else { y };
        }
        out.push(x);
    }
    Ok(out)
}

/// Expanded-state chain that approximates a semi-Markov process.
#[derive(Debug, Clone)]
pub struct SemiMarkovChain {
    /// Number of expanded states.
    pub k: usize,
    /// Transition matrix, row-major.
    pub tpm: Vec<f64>,
    /// Aggregate state of each expanded state.
    pub aggregate: Vec<usize>,
    /// Structural zeros, 0-based.
    pub zeros: Vec<(usize, usize)>,
}

/// Floor for diagonal entries that the construction sets to zero; the
/// multinomial logit needs a positive reference cell.
pub const DIAGONAL_FLOOR: f64 = 1e-10;

/// Expanded-state chain whose aggregate `j` has dwell-time pmf `dwell[j]` on
/// `1..=m_j` (any remaining mass becomes a geometric tail beyond `m_j`), and
/// leaves to aggregate `k` with probability `switch[j * N + k]`.
pub fn semi_markov_chain(dwell: &[Vec<f64>], switch: &[f64]) -> Result<SemiMarkovChain> {
    let na = dwell.len();
    if na < 2 || switch.len() != na * na {
        return Err(Error::Model("need at least 2 aggregates and an N x N switching matrix".into()));
    }
    for j in 0..na {
        let row = &switch[j * na..(j + 1) * na];
        if row[j] != 0.0 || row.iter().any(|v| *v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Model(format!("switching row {} must be a probability vector with zero diagonal", j + 1)));
        }
        let s: f64 = dwell[j].iter().sum();
        if dwell[j].is_empty() || dwell[j].iter().any(|v| *v < 0.0) || s > 1.0 + 1e-9 {
            return Err(Error::Model(format!("dwell pmf {} is not a (sub-)probability vector", j + 1)));
        }
    }
    let start: Vec<usize> = dwell.iter().scan(0, |acc, d| {
        let s = *acc;
        *acc += d.len();
        Some(s)
    }).collect();
    let k: usize = dwell.iter().map(|d| d.len()).sum();
    let mut tpm = vec![0.0; k * k];
    let mut aggregate = vec![0; k];
    for j in 0..na {
        let m = dwell[j].len();
        let mut surv = 1.0;
        for r in 0..m {
            let a = start[j] + r;
            aggregate[a] = j;
            let c = if surv > 0.0 { (dwell[j][r] / surv).clamp(0.0, 1.0) } else { 1.0 };
            surv -= dwell[j][r];
            let stay = if r + 1 < m { a + 1 } else { a };
            tpm[a * k + stay] += 1.0 - c;
            for (t, w) in switch[j * na..(j + 1) * na].iter().enumerate() {
                tpm[a * k + start[t]] += w * c;
            }
        }
    }
    let mut zeros = Vec::new();
    for a in 0..k {
        let row = &mut tpm[a * k..(a + 1) * k];
        if row[a] < DIAGONAL_FLOOR {
            row[a] = DIAGONAL_FLOOR;
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
        for (b, v) in row.iter().enumerate() {
            if b != a && *v == 0.0 {
                zeros.push((a, b));
            }
        }
    }
    Ok(SemiMarkovChain { k, tpm, aggregate, zeros })
}

/// Completed dwell times `(aggregate, length)` of a state sequence after
/// mapping through `aggregate`; the first and last runs are censored and dropped.
pub fn dwell_times(states: &[usize], aggregate: &[usize]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < states.len() {
        let a = aggregate[states[i]];
        let mut j = i + 1;
        while j < states.len() && aggregate[states[j]] == a {
            j += 1;
        }
        runs.push((a, j - i));
        i = j;
    }
    if runs.len() <= 2 {
        return Vec::new();
    }
    runs[1..runs.len() - 1].to_vec()
}

/// Per-predictor parameter values on the natural scale at `row`, useful for
/// checking simulation inputs: `(predictor name, value)`.
pub fn natural_parameters(model: &Model, p: &ParameterSet, row: usize) -> Vec<(String, f64)> {
    let eta = model.eta_all(p);
    let tpm = model.tpm_at(&eta, row);
    model
        .lps
        .iter()
        .enumerate()
        .map(|(l, lp)| {
            let v = match lp.kind {
                LpKind::Obs { var, param, .. } => model.spec.observations[var].family.invert_one(param, eta[l][row]),
                LpKind::Transition { from, to } => tpm[from * model.k + to],
            };
            (lp.name.clone(), v)
        })
        .collect()
}
