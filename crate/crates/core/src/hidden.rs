//! The hidden Markov chain: transition matrices from linear predictors via a
//! multinomial logit with the diagonal as reference, structural zeros, and
//! stationary distributions.
//!
//! Matrices are stored row-major in flat slices of length `K * K`.

use nalgebra::{DMatrix, DVector};

use crate::design::Formula;
use crate::error::{Error, Result};

/// Cap on link-scale transition intercepts derived from probabilities.
pub const INTERCEPT_CAP: f64 = 30.0;

/// How the distribution of the first state of each series is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialMode {
    /// Estimated through `K - 1` logits with state 1 as reference.
    Estimated,
    /// Stationary distribution of the transition matrix at the first row of each series.
    Stationary,
    /// Known first state per series (0-based); one entry applies to all series.
    Fixed(Vec<usize>),
}

/// Specification of the hidden chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub n_states: usize,
    /// Formula per transition, row-major; `None` on the diagonal and at structural zeros.
    pub formulas: Vec<Option<Formula>>,
    pub initial_mode: InitialMode,
    /// One initial distribution per series instead of a shared one (estimated mode only).
    pub initial_per_series: bool,
    /// Structural zeros as 0-based `(i, j)` pairs.
    pub zeros: Vec<(usize, usize)>,
    /// Initial transition matrix, row-major.
    pub tpm0: Vec<f64>,
}

impl ChainSpec {
    /// A chain where every off-diagonal transition uses `formula`.
    pub fn new(n_states: usize, formula: Formula) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::Model(format!("at least 2 states are required, got {n_states}")));
        }
        let k = n_states;
        let formulas = (0..k * k).map(|c| if c / k == c % k { None } else { Some(formula.clone()) }).collect();
        Ok(ChainSpec {
            n_states,
            formulas,
            initial_mode: InitialMode::Estimated,
            initial_per_series: false,
            zeros: Vec::new(),
            tpm0: default_tpm(k),
        })
    }

    pub fn with_zeros(mut self, zeros: Vec<(usize, usize)>) -> Result<Self> {
        let k = self.n_states;
        for &(i, j) in &zeros {
            if i >= k || j >= k {
                return Err(Error::Model(format!("structural zero ({}, {}) outside {k} states", i + 1, j + 1)));
            }
            if i == j {
                return Err(Error::Model("structural zeros cannot be on the diagonal".into()));
            }
            self.formulas[i * k + j] = None;
        }
        self.zeros = zeros;
        let mask = self.zero_mask();
        for i in 0..k {
            renormalize_row(&mut self.tpm0[i * k..(i + 1) * k], &mask[i * k..(i + 1) * k]);
        }
        self.check_reducibility();
        Ok(self)
    }

    pub fn zero_mask(&self) -> Vec<bool> {
        zero_mask(self.n_states, &self.zeros)
    }

    pub fn is_zero(&self, i: usize, j: usize) -> bool {
        self.zeros.contains(&(i, j))
    }

    /// Warn when structural zeros make the chain reducible.
    pub fn check_reducibility(&self) {
        let k = self.n_states;
        let mask = self.zero_mask();
        let adj: Vec<bool> = (0..k * k).map(|c| !mask[c]).collect();
        if !is_irreducible(k, &adj) {
            log::warn!("structural zeros make the hidden chain reducible");
        }
    }

    /// Initial link-scale intercepts from `tpm0`, row-major (diagonal and zeros are 0).
    pub fn initial_intercepts(&self) -> Result<Vec<f64>> {
        let k = self.n_states;
        validate_tpm(k, &self.tpm0)?;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            let gii = self.tpm0[i * k + i];
            if gii <= 0.0 {
                return Err(Error::Model(format!("initial tpm diagonal entry {} must be positive", i + 1)));
            }
            for j in 0..k {
                if i != j && !self.is_zero(i, j) {
                    let g = self.tpm0[i * k + j];
                    let v = if g <= 0.0 { -INTERCEPT_CAP } else { (g / gii).ln() };
                    out[i * k + j] = v.clamp(-INTERCEPT_CAP, INTERCEPT_CAP);
                }
            }
        }
        Ok(out)
    }
}

/// Default initial transition matrix: 0.9 on the diagonal, the rest spread evenly.
pub fn default_tpm(k: usize) -> Vec<f64> {
    let off = 0.1 / (k - 1) as f64;
    (0..k * k).map(|c| if c / k == c % k { 0.9 } else { off }).collect()
}

pub fn zero_mask(k: usize, zeros: &[(usize, usize)]) -> Vec<bool> {
    let mut m = vec![false; k * k];
    for &(i, j) in zeros {
        m[i * k + j] = true;
    }
    m
}

fn renormalize_row(row: &mut [f64], mask: &[bool]) {
    for (g, z) in row.iter_mut().zip(mask) {
        if *z {
            *g = 0.0;
        }
    }
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        for g in row.iter_mut() {
            *g /= s;
        }
    }
}

/// Check that `tpm` is a `k x k` row-stochastic matrix.
pub fn validate_tpm(k: usize, tpm: &[f64]) -> Result<()> {
    if tpm.len() != k * k {
        return Err(Error::Model(format!("transition matrix must be {k} x {k}")));
    }
    for i in 0..k {
        let row = &tpm[i * k..(i + 1) * k];
        if row.iter().any(|g| !(0.0..=1.0).contains(g)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return Err(Error::Model(format!("row {} of the transition matrix is not a probability vector", i + 1)));
        }
    }
    Ok(())
}

/// One row of the multinomial logit: `out[j] = exp(eta[j]) / sum_k exp(eta[k])`,
/// with structurally zero entries excluded. `eta[i]` must be 0 for the diagonal.
pub fn tpm_row(eta: &[f64], zeros: &[bool], out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for (e, z) in eta.iter().zip(zeros) {
        if !z && *e > m {
            m = *e;
        }
    }
    let mut s = 0.0;
    for ((o, e), z) in out.iter_mut().zip(eta).zip(zeros) {
        *o = if *z { 0.0 } else { (e - m).exp() };
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Transition matrix from a `K x K` link-scale matrix with zero diagonal.
pub fn tpm_from_eta(k: usize, eta: &[f64], zeros: &[bool]) -> Result<Vec<f64>> {
    if eta.len() != k * k || zeros.len() != k * k {
        return Err(Error::Model("eta and zero mask must be K x K".into()));
    }
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical("non-finite transition linear predictor".into()));
    }
    if (0..k).any(|i| zeros[i * k + i]) {
        return Err(Error::Model("structural zeros cannot be on the diagonal".into()));
    }
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        tpm_row(&eta[i * k..(i + 1) * k], &zeros[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
    }
    Ok(out)
}

/// Per-row link-scale matrices from one linear predictor per off-diagonal entry.
///
/// `entries[i * K + j]` is the predictor of transition `i -> j` over all rows, or
/// `None` for the diagonal and structural zeros. Returns `n * K * K` values.
pub fn eta_sequence(k: usize, n: usize, entries: &[Option<&[f64]>]) -> Result<Vec<f64>> {
    if entries.len() != k * k {
        return Err(Error::Model("one entry per transition is required".into()));
    }
    let mut out = vec![0.0; n * k * k];
    for (c, e) in entries.iter().enumerate() {
        if let Some(v) = e {
            if c / k == c % k {
                return Err(Error::Model("the diagonal is the reference and has no predictor".into()));
            }
            if v.len() != n {
                return Err(Error::Model(format!("predictor has {} rows, expected {n}", v.len())));
            }
            for t in 0..n {
                out[t * k * k + c] = v[t];
            }
        }
    }
    Ok(out)
}

/// Whether the directed graph with adjacency `adj` (row-major) is strongly connected.
pub fn is_irreducible(k: usize, adj: &[bool]) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..k {
                let e = if forward { adj[u * k + v] } else { adj[v * k + u] };
                if e && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Whether an irreducible chain is aperiodic, via primitivity of the adjacency.
fn is_aperiodic(k: usize, adj: &[bool]) -> bool {
    if (0..k).any(|i| adj[i * k + i]) {
        return true;
    }
    // Wielandt: a primitive matrix has A^m > 0 for m = (k - 1)^2 + 1.
    let steps = (k - 1) * (k - 1) + 1;
    let mut p = adj.to_vec();
    for _ in 1..steps {
        let mut next = vec![false; k * k];
        for i in 0..k {
            for l in 0..k {
                if p[i * k + l] {
                    for j in 0..k {
                        next[i * k + j] |= adj[l * k + j];
                    }
                }
            }
        }
        p = next;
    }
    p.iter().all(|x| *x)
}

/// Stationary distribution of an irreducible aperiodic transition matrix,
/// from the linear system `(I - G' + 1) delta = 1`.
pub fn stationary(k: usize, tpm: &[f64]) -> Result<Vec<f64>> {
    if tpm.len() != k * k {
        return Err(Error::Model(format!("transition matrix must be {k} x {k}")));
    }
    let adj: Vec<bool> = tpm.iter().map(|g| *g > 0.0).collect();
    if !is_irreducible(k, &adj) {
        return Err(Error::Model(
            "transition matrix is reducible, so it has no unique stationary distribution; use the \"fixed\" or \"estimated\" initial mode".into(),
        ));
    }
    if !is_aperiodic(k, &adj) {
        return Err(Error::Model(
            "transition matrix is periodic; use the \"fixed\" or \"estimated\" initial mode".into(),
        ));
    }
    Ok(stationary_unchecked(k, tpm))
}

/// [`stationary`] without the irreducibility and aperiodicity checks.
pub fn stationary_unchecked(k: usize, tpm: &[f64]) -> Vec<f64> {
    if k == 2 {
        let (a, b) = (tpm[1], tpm[2]);
        let s = a + b;
        if s > 0.0 {
            return vec![b / s, a / s];
        }
    }
    let mut m = DMatrix::from_element(k, k, 1.0);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] += if i == j { 1.0 } else { 0.0 } - tpm[j * k + i];
        }
    }
    let rhs = DVector::from_element(k, 1.0);
    match m.lu().solve(&rhs) {
        Some(d) => {
            let mut v: Vec<f64> = d.iter().map(|x| x.max(0.0)).collect();
            let s: f64 = v.iter().sum();
            for x in &mut v {
                *x /= s;
            }
            v
        }
        None => vec![f64::NAN; k],
    }
}

/// Initial distribution from `K - 1` logits with state 1 as reference.
pub fn delta_from_logits(logits: &[f64]) -> Vec<f64> {
    let mut eta = Vec::with_capacity(logits.len() + 1);
    eta.push(0.0);
    eta.extend_from_slice(logits);
    let zeros = vec![false; eta.len()];
    let mut out = vec![0.0; eta.len()];
    tpm_row(&eta, &zeros, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tpm_examples() {
        let z = vec![false; 9];
        let g = tpm_from_eta(3, &[0.0; 9], &z).unwrap();
        assert!(g.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        let e = (1.0f64 / 9.0).ln();
        let g = tpm_from_eta(2, &[0.0, e, e, 0.0], &[false; 4]).unwrap();
        for (a, b) in g.iter().zip([0.9, 0.1, 0.1, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }

        let zeros = zero_mask(3, &[(0, 2), (2, 0)]);
        let g = tpm_from_eta(3, &[0.0; 9], &zeros).unwrap();
        assert_eq!(&g[0..3], &[0.5, 0.5, 0.0]);
        assert_eq!(&g[6..9], &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn tpm_handles_large_predictors() {
        let g = tpm_from_eta(2, &[0.0, 800.0, -800.0, 0.0], &[false; 4]).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
        assert_eq!(g[1], 1.0);
    }

    #[test]
    fn stationary_examples() {
        let d = stationary(2, &[0.9, 0.1, 0.1, 0.9]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!(stationary(2, &[1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(stationary(2, &[0.0, 1.0, 1.0, 0.0]).is_err());
        // balance: 0.2 d1 = 0.4 d2 and d1 + d2 = 1
        let d = stationary(2, &[0.8, 0.2, 0.4, 0.6]).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
        // general solver agrees for K = 3
        let g = [0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.2, 0.2, 0.6];
        let d = stationary(3, &g).unwrap();
        for j in 0..3 {
            let v: f64 = (0..3).map(|i| d[i] * g[i * 3 + j]).sum();
            assert!((v - d[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn stationary_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let k = rng.random_range(2..6);
            let eta: Vec<f64> = (0..k * k).map(|c| if c / k == c % k { 0.0 } else { rng.random_range(-3.0..3.0) }).collect();
            let g = tpm_from_eta(k, &eta, &vec![false; k * k]).unwrap();
            let d = stationary(k, &g).unwrap();
            for j in 0..k {
                let v: f64 = (0..k).map(|i| d[i] * g[i * k + j]).sum();
                assert!((v - d[j]).abs() < 1e-12);
            }
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_sequence_examples() {
        let n = 4;
        let x = [0.5, 1.0, -2.0, 3.0];
        let e12: Vec<f64> = x.iter().map(|v| -1.0 + v).collect();
        let e21 = vec![-2.0; n];
        let s = eta_sequence(2, n, &[None, Some(&e12), Some(&e21), None]).unwrap();
        for t in 0..n {
            assert_eq!(s[t * 4 + 1], -1.0 + x[t]);
            assert_eq!(s[t * 4 + 2], -2.0);
            assert_eq!(s[t * 4], 0.0);
        }
        assert!(eta_sequence(2, n, &[Some(&e21), None, None, None]).is_err());
    }

    #[test]
    fn default_intercepts() {
        let spec = ChainSpec::new(2, Formula::intercept_only()).unwrap();
        let v = spec.initial_intercepts().unwrap();
        assert!((v[1] - (1.0f64 / 9.0).ln()).abs() < 1e-15);
        let spec = ChainSpec::new(3, Formula::intercept_only()).unwrap().with_zeros(vec![(0, 2), (2, 0)]).unwrap();
        assert_eq!(spec.initial_intercepts().unwrap()[2], 0.0);
        assert!(spec.formulas[2].is_none());
        assert!(ChainSpec::new(1, Formula::intercept_only()).is_err());
    }

    #[test]
    fn delta_logits() {
        let d = delta_from_logits(&[0.0, 0.0]);
        assert!(d.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariance(vals in proptest::collection::vec(-5.0f64..5.0, 9), c in -10.0f64..10.0) {
            let zeros = vec![false; 3];
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            for i in 0..3 {
                let row = &vals[i * 3..i * 3 + 3];
                tpm_row(row, &zeros, &mut a);
                let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
                tpm_row(&shifted, &zeros, &mut b);
                for j in 0..3 {
                    proptest::prop_assert!((a[j] - b[j]).abs() < 1e-13);
                }
                proptest::prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
