//! Model specification and its compiled form.
//!
//! A [`ModelSpec`] declares states, observation distributions with one formula
//! per parameter, the hidden chain, and constraints. [`Model::new`] compiles it
//! against a dataset into linear predictors (one per observation parameter and
//! state, and one per free transition) with their designs, and lays out the
//! parameter vectors.
//!
//! Parameter order: observation predictors (variable, parameter, state), then
//! transitions row-major. The outer vector is `[alpha, log_lambda, delta0]`;
//! the full vector used for covariances is `[alpha, beta, log_lambda, delta0]`.

use std::collections::HashMap;
use std::ops::Range;

use indexmap::IndexMap;

use crate::data::{Dataset, Schema, ID_COLUMN};
use crate::design::{assemble, CovTable, DesignBundle, Formula};
use crate::dists::Family;
use crate::error::{Error, Result};
use crate::hidden::{delta_from_logits, ChainSpec, InitialMode};

/// One observed variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSpec {
    pub name: String,
    pub family: Family,
    /// One formula per distribution parameter.
    pub formulas: Vec<Formula>,
    /// Initial natural-scale values, `init[param][state]`.
    pub init: Vec<Vec<f64>>,
}

impl ObsSpec {
    /// Intercept-only formulas for every parameter.
    pub fn new(name: &str, family: Family, init: Vec<Vec<f64>>) -> Self {
        ObsSpec {
            name: name.to_string(),
            family,
            formulas: vec![Formula::intercept_only(); family.n_params()],
            init,
        }
    }

    pub fn with_formula(mut self, param: &str, formula: Formula) -> Result<Self> {
        let idx = self
            .family
            .param_names()
            .iter()
            .position(|p| *p == param)
            .ok_or_else(|| Error::Spec(format!("{} has no parameter '{param}'", self.family)))?;
        self.formulas[idx] = formula;
        Ok(self)
    }
}

/// Fixed and shared parameters, addressed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraints {
    /// Parameters held at their initial values.
    pub fixed: Vec<String>,
    /// Groups of parameters constrained to one common value (that of the first member).
    pub shared: Vec<Vec<String>>,
    /// Link-scale starting values overriding the defaults.
    pub values: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub observations: Vec<ObsSpec>,
    pub hidden: ChainSpec,
    pub constraints: Constraints,
    /// Covariates to read as categorical.
    pub categorical: Vec<String>,
}

impl ModelSpec {
    pub fn new(hidden: ChainSpec, observations: Vec<ObsSpec>) -> Self {
        ModelSpec { observations, hidden, constraints: Constraints::default(), categorical: Vec::new() }
    }

    pub fn n_states(&self) -> usize {
        self.hidden.n_states
    }

    /// Names of covariate columns referenced by any formula (responses and `ID` excluded).
    pub fn covariate_names(&self) -> Vec<String> {
        let responses: Vec<&str> = self.observations.iter().map(|o| o.name.as_str()).collect();
        let mut out: Vec<String> = Vec::new();
        let formulas = self
            .observations
            .iter()
            .flat_map(|o| o.formulas.iter())
            .chain(self.hidden.formulas.iter().flatten());
        for f in formulas {
            for c in f.covariates() {
                if c.name != ID_COLUMN && !responses.contains(&c.name.as_str()) && !out.contains(&c.name) {
                    out.push(c.name.clone());
                }
            }
        }
        out
    }

    /// CSV schema for data files matching this spec.
    pub fn schema(&self) -> Schema {
        let responses: Vec<String> = self.observations.iter().map(|o| o.name.clone()).collect();
        Schema::new(&responses, &self.covariate_names()).with_categorical(&self.categorical)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        if k < 2 {
            return Err(Error::Model(format!("at least 2 states are required, got {k}")));
        }
        if self.observations.is_empty() {
            return Err(Error::Model("the model has no observed variables".into()));
        }
        for o in &self.observations {
            let f = o.family;
            if o.formulas.len() != f.n_params() {
                return Err(Error::Model(format!("{}: one formula per parameter of {f} is required", o.name)));
            }
            if o.init.len() != f.n_params() {
                return Err(Error::Model(format!(
                    "{}: initial values needed for {} ({})",
                    o.name,
                    f.name(),
                    f.param_names().join(", ")
                )));
            }
            for (p, vals) in o.init.iter().enumerate() {
                if vals.len() != k {
                    return Err(Error::Model(format!(
                        "{}.{}: {} initial values given for {k} states",
                        o.name,
                        f.param_names()[p],
                        vals.len()
                    )));
                }
            }
            for j in 0..k {
                let omega: Vec<f64> = o.init.iter().map(|v| v[j]).collect();
                f.validate(&omega).map_err(|e| Error::Model(format!("{} initial values, state {}: {e}", o.name, j + 1)))?;
            }
            for (p, form) in o.formulas.iter().enumerate() {
                if let Some(s) = form.max_state() {
                    if s >= k {
                        return Err(Error::Model(format!("{}: state{}() used with {k} states", o.name, s + 1)));
                    }
                }
                if !f.is_estimable(p) && *form != Formula::intercept_only() {
                    return Err(Error::Model(format!(
                        "{}: the {} parameter of {f} is fixed and cannot have covariates",
                        o.name,
                        f.param_names()[p]
                    )));
                }
            }
        }
        if let InitialMode::Fixed(states) = &self.hidden.initial_mode {
            if states.iter().any(|s| *s >= k) {
                return Err(Error::Model("fixed initial state outside the state range".into()));
            }
        }
        Ok(())
    }
}

/// What a linear predictor feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpKind {
    Obs { var: usize, param: usize, state: usize },
    Transition { from: usize, to: usize },
}

/// A compiled linear predictor.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub kind: LpKind,
    pub name: String,
    pub design: DesignBundle,
    /// Slice of the global `alpha` vector.
    pub alpha: Range<usize>,
    /// Slice of the global `beta` vector.
    pub beta: Range<usize>,
    /// Slice of the global `log_lambda` vector.
    pub blocks: Range<usize>,
}

/// A penalty block located in the global `beta` vector.
#[derive(Debug, Clone)]
pub struct GlobalBlock {
    pub lp: usize,
    pub cols: Range<usize>,
    pub s: nalgebra::DMatrix<f64>,
    pub log_det: f64,
    pub name: String,
}

/// Values of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_lambda: Vec<f64>,
    pub delta0: Vec<f64>,
}

impl ParameterSet {
    /// `[alpha, log_lambda, delta0]`.
    pub fn outer(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&self.log_lambda);
        v.extend_from_slice(&self.delta0);
        v
    }

    pub fn set_outer(&mut self, v: &[f64]) {
        let (a, rest) = v.split_at(self.alpha.len());
        let (l, d) = rest.split_at(self.log_lambda.len());
        self.alpha.copy_from_slice(a);
        self.log_lambda.copy_from_slice(l);
        self.delta0.copy_from_slice(d);
    }

    /// `[alpha, beta, log_lambda, delta0]`.
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.log_lambda);
        v.extend_from_slice(&self.delta0);
        v
    }

    pub fn set_full(&mut self, v: &[f64]) {
        let na = self.alpha.len();
        let nb = self.beta.len();
        let nl = self.log_lambda.len();
        self.alpha.copy_from_slice(&v[..na]);
        self.beta.copy_from_slice(&v[na..na + nb]);
        self.log_lambda.copy_from_slice(&v[na + nb..na + nb + nl]);
        self.delta0.copy_from_slice(&v[na + nb + nl..]);
    }
}

/// Names of all parameters, in vector order.
#[derive(Debug, Clone, Default)]
pub struct ParamNames {
    pub alpha: Vec<String>,
    pub beta: Vec<String>,
    pub log_lambda: Vec<String>,
    pub delta0: Vec<String>,
}

impl ParamNames {
    pub fn outer(&self) -> Vec<String> {
        self.alpha.iter().chain(&self.log_lambda).chain(&self.delta0).cloned().collect()
    }

    pub fn full(&self) -> Vec<String> {
        self.alpha.iter().chain(&self.beta).chain(&self.log_lambda).chain(&self.delta0).cloned().collect()
    }
}

/// Status of one outer parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Estimated; index into the free vector.
    Free(usize),
    Fixed,
}

/// Map between the outer parameter vector and the free vector the optimizer sees.
/// Shared parameters point at the same free entry.
#[derive(Debug, Clone)]
pub struct FixShareMap {
    pub slots: Vec<Slot>,
    pub n_free: usize,
}

impl FixShareMap {
    /// Free values from an outer vector.
    pub fn to_free(&self, outer: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_free];
        let mut set = vec![false; self.n_free];
        for (i, s) in self.slots.iter().enumerate() {
            if let Slot::Free(f) = s {
                if !set[*f] {
                    out[*f] = outer[i];
                    set[*f] = true;
                }
            }
        }
        out
    }

    /// Write free values into an outer vector; fixed entries are left alone.
    pub fn apply(&self, free: &[f64], outer: &mut [f64]) {
        for (i, s) in self.slots.iter().enumerate() {
            if let Slot::Free(f) = s {
                outer[i] = free[*f];
            }
        }
    }

    pub fn is_fixed(&self, i: usize) -> bool {
        self.slots[i] == Slot::Fixed
    }
}

/// Responses and known states in model order.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub n: usize,
    /// `responses[var][row]`.
    pub responses: Vec<Vec<Option<f64>>>,
    /// Known states (0-based), if any.
    pub known: Option<Vec<Option<usize>>>,
    pub series: Vec<Range<usize>>,
    pub labels: Vec<String>,
}

/// A model compiled against a dataset.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub k: usize,
    pub lps: Vec<LinearPredictor>,
    /// `obs_lp[var][param][state]`.
    pub obs_lp: Vec<Vec<Vec<usize>>>,
    /// Transition predictor per matrix cell, row-major.
    pub tr_lp: Vec<Option<usize>>,
    pub zero_mask: Vec<bool>,
    pub blocks: Vec<GlobalBlock>,
    pub names: ParamNames,
    pub fixshare: FixShareMap,
    pub data: ModelData,
    pub table: CovTable,
    pub dataset: Dataset,
    init: ParameterSet,
}

impl Model {
    pub fn new(spec: &ModelSpec, d: &Dataset) -> Result<Model> {
        spec.validate()?;
        let k = spec.n_states();
        let hidden = &spec.hidden;
        if let Some(ks) = d.known_states() {
            if ks.iter().flatten().any(|s| *s >= k) {
                return Err(Error::Data(format!("known states must lie in 1..{k}")));
            }
        }
        let table = CovTable::from_dataset(d);
        let mut lps = Vec::new();
        let mut obs_lp = Vec::new();
        let (mut na, mut nb, mut nl) = (0, 0, 0);
        let mut push = |kind: LpKind, name: String, formula: &Formula, lps: &mut Vec<LinearPredictor>| -> Result<usize> {
            let design = assemble(formula, &table).map_err(|e| Error::Model(format!("{name}: {e}")))?;
            let lp = LinearPredictor {
                kind,
                name,
                alpha: na..na + design.n_fixed(),
                beta: nb..nb + design.n_random(),
                blocks: nl..nl + design.penalty_blocks.len(),
                design,
            };
            na = lp.alpha.end;
            nb = lp.beta.end;
            nl = lp.blocks.end;
            lps.push(lp);
            Ok(lps.len() - 1)
        };
        for (v, o) in spec.observations.iter().enumerate() {
            d.response(&o.name)?;
            let mut per_param = Vec::new();
            for (p, form) in o.formulas.iter().enumerate() {
                let mut per_state = Vec::new();
                for j in 0..k {
                    let name = format!("{}.{}.state{}", o.name, o.family.param_names()[p], j + 1);
                    let kind = LpKind::Obs { var: v, param: p, state: j };
                    per_state.push(push(kind, name, &form.for_state(j), &mut lps)?);
                }
                per_param.push(per_state);
            }
            obs_lp.push(per_param);
        }
        let zero_mask = hidden.zero_mask();
        let mut tr_lp = vec![None; k * k];
        for i in 0..k {
            for j in 0..k {
                if i == j || zero_mask[i * k + j] {
                    continue;
                }
                let form = hidden.formulas[i * k + j]
                    .as_ref()
                    .ok_or_else(|| Error::Model(format!("transition S{}>S{} has no formula", i + 1, j + 1)))?;
                let name = format!("S{}>S{}", i + 1, j + 1);
                let kind = LpKind::Transition { from: i, to: j };
                tr_lp[i * k + j] = Some(push(kind, name, form, &mut lps)?);
            }
        }

        let mut names = ParamNames::default();
        let mut blocks = Vec::new();
        for (l, lp) in lps.iter().enumerate() {
            names.alpha.extend(lp.design.fixed_names.iter().map(|c| format!("{}.{c}", lp.name)));
            names.beta.extend(lp.design.random_names.iter().map(|c| format!("{}.{c}", lp.name)));
            for b in &lp.design.penalty_blocks {
                let name = format!("{}.{}", lp.name, b.label);
                names.log_lambda.push(name.clone());
                blocks.push(GlobalBlock {
                    lp: l,
                    cols: lp.beta.start + b.cols.start..lp.beta.start + b.cols.end,
                    s: b.s.clone(),
                    log_det: b.log_det,
                    name,
                });
            }
        }
        if hidden.initial_mode == InitialMode::Estimated {
            if hidden.initial_per_series {
                for label in d.series_labels() {
                    names.delta0.extend((2..=k).map(|j| format!("delta0.{label}.state{j}")));
                }
            } else {
                names.delta0.extend((2..=k).map(|j| format!("delta0.state{j}")));
            }
        }
        if let InitialMode::Fixed(states) = &hidden.initial_mode {
            if states.len() != 1 && states.len() != d.n_series() {
                return Err(Error::Model(format!(
                    "fixed initial states: give one state or one per series ({} series)",
                    d.n_series()
                )));
            }
        }

        let data = ModelData {
            n: d.n_rows(),
            responses: spec
                .observations
                .iter()
                .map(|o| d.response(&o.name).map(|r| r.to_vec()))
                .collect::<Result<_>>()?,
            known: d.known_states().map(|s| s.to_vec()),
            series: d.series_ranges().to_vec(),
            labels: d.series_labels().to_vec(),
        };

        let mut model = Model {
            spec: spec.clone(),
            k,
            lps,
            obs_lp,
            tr_lp,
            zero_mask,
            blocks,
            names,
            fixshare: FixShareMap { slots: Vec::new(), n_free: 0 },
            data,
            table,
            dataset: d.clone(),
            init: ParameterSet { alpha: vec![], beta: vec![], log_lambda: vec![], delta0: vec![] },
        };
        model.init = model.default_parameters()?;
        model.fixshare = model.build_fixshare()?;
        // shared groups start from the first member's value
        let mut outer = model.init.outer();
        let free = model.fixshare.to_free(&outer);
        model.fixshare.apply(&free, &mut outer);
        model.init.set_outer(&outer);
        Ok(model)
    }

    pub fn n_alpha(&self) -> usize {
        self.names.alpha.len()
    }

    pub fn n_beta(&self) -> usize {
        self.names.beta.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_delta(&self) -> usize {
        self.names.delta0.len()
    }

    pub fn n_outer(&self) -> usize {
        self.n_alpha() + self.n_blocks() + self.n_delta()
    }

    pub fn n_series(&self) -> usize {
        self.data.series.len()
    }

    pub fn n_vars(&self) -> usize {
        self.spec.observations.len()
    }

    /// Starting values implied by the spec (after constraints' overrides and sharing).
    pub fn initial_parameters(&self) -> ParameterSet {
        self.init.clone()
    }

    fn default_parameters(&self) -> Result<ParameterSet> {
        let mut alpha = vec![0.0; self.n_alpha()];
        let intercepts = self.spec.hidden.initial_intercepts()?;
        for lp in &self.lps {
            if !lp.design.fixed_names.first().is_some_and(|n| n == "(Intercept)") {
                continue;
            }
            alpha[lp.alpha.start] = match lp.kind {
                LpKind::Obs { var, param, state } => {
                    let o = &self.spec.observations[var];
                    o.family.links()[param].apply(o.init[param][state]).map_err(|e| {
                        Error::Model(format!("initial value of {}: {e}", lp.name))
                    })?
                }
                LpKind::Transition { from, to } => intercepts[from * self.k + to],
            };
        }
        let mut p = ParameterSet {
            alpha,
            beta: vec![0.0; self.n_beta()],
            log_lambda: vec![0.0; self.n_blocks()],
            delta0: vec![0.0; self.n_delta()],
        };
        let names = self.names.outer();
        let mut outer = p.outer();
        for (name, v) in &self.spec.constraints.values {
            let i = find_name(&names, name)?;
            outer[i] = *v;
        }
        p.set_outer(&outer);
        Ok(p)
    }

    fn build_fixshare(&self) -> Result<FixShareMap> {
        let names = self.names.outer();
        let n = names.len();
        let mut fixed = vec![false; n];
        for lp in &self.lps {
            if let LpKind::Obs { var, param, .. } = lp.kind {
                if !self.spec.observations[var].family.is_estimable(param) {
                    for i in lp.alpha.clone() {
                        fixed[i] = true;
                    }
                }
            }
        }
        let user_fixed: Vec<usize> = self
            .spec
            .constraints
            .fixed
            .iter()
            .map(|name| find_name(&names, name))
            .collect::<Result<_>>()?;
        for &i in &user_fixed {
            fixed[i] = true;
        }
        let mut group: Vec<Option<usize>> = vec![None; n];
        for (g, members) in self.spec.constraints.shared.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::Spec("a shared group needs at least two parameters".into()));
            }
            for name in members {
                let i = find_name(&names, name)?;
                if group[i].is_some() {
                    return Err(Error::Spec(format!("parameter '{name}' appears in more than one shared group")));
                }
                if fixed[i] {
                    return Err(Error::Spec(format!("parameter '{name}' is both fixed and shared")));
                }
                group[i] = Some(g);
            }
        }
        let mut slots = Vec::with_capacity(n);
        let mut group_slot: HashMap<usize, usize> = HashMap::new();
        let mut n_free = 0;
        for i in 0..n {
            if fixed[i] {
                slots.push(Slot::Fixed);
            } else if let Some(g) = group[i] {
                let f = *group_slot.entry(g).or_insert_with(|| {
                    n_free += 1;
                    n_free - 1
                });
                slots.push(Slot::Free(f));
            } else {
                slots.push(Slot::Free(n_free));
                n_free += 1;
            }
        }
        Ok(FixShareMap { slots, n_free })
    }

    /// Linear predictor values of every predictor over all rows.
    pub fn eta_all(&self, p: &ParameterSet) -> Vec<Vec<f64>> {
        self.lps.iter().map(|lp| lp.design.eta(&p.alpha[lp.alpha.clone()], &p.beta[lp.beta.clone()])).collect()
    }

    /// Natural-scale parameters of variable `var`, state `state`, at `row`.
    pub fn omega(&self, eta: &[Vec<f64>], var: usize, state: usize, row: usize) -> Vec<f64> {
        let f = self.spec.observations[var].family;
        self.obs_lp[var].iter().enumerate().map(|(p, lps)| f.invert_one(p, eta[lps[state]][row])).collect()
    }

    /// Link-scale transition matrix at `row`, row-major with zero diagonal.
    pub fn tpm_eta(&self, eta: &[Vec<f64>], row: usize) -> Vec<f64> {
        self.tr_lp.iter().map(|l| l.map_or(0.0, |l| eta[l][row])).collect()
    }

    /// Transition matrix at `row`.
    pub fn tpm_at(&self, eta: &[Vec<f64>], row: usize) -> Vec<f64> {
        let e = self.tpm_eta(eta, row);
        let k = self.k;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            crate::hidden::tpm_row(&e[i * k..(i + 1) * k], &self.zero_mask[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
        }
        out
    }

    /// Initial distribution of series `s` given the transition matrix at its first row.
    pub fn delta_for(&self, p: &ParameterSet, s: usize, first_tpm: &[f64]) -> Result<Vec<f64>> {
        let k = self.k;
        match &self.spec.hidden.initial_mode {
            InitialMode::Estimated => {
                let off = if self.spec.hidden.initial_per_series { s * (k - 1) } else { 0 };
                Ok(delta_from_logits(&p.delta0[off..off + k - 1]))
            }
            InitialMode::Stationary => crate::hidden::stationary(k, first_tpm),
            InitialMode::Fixed(states) => {
                let st = if states.len() == 1 { states[0] } else { states[s] };
                let mut d = vec![0.0; k];
                d[st] = 1.0;
                Ok(d)
            }
        }
    }

    /// Index of a parameter in the full vector `[alpha, beta, log_lambda, delta0]`.
    pub fn full_index(&self, name: &str) -> Result<usize> {
        find_name(&self.names.full(), name)
    }

    /// Index of a parameter in the outer vector `[alpha, log_lambda, delta0]`.
    pub fn outer_index(&self, name: &str) -> Result<usize> {
        find_name(&self.names.outer(), name)
    }

    /// Map an outer index to its position in the full vector.
    pub fn outer_to_full(&self, i: usize) -> usize {
        if i < self.n_alpha() {
            i
        } else {
            i + self.n_beta()
        }
    }

    /// Whether any predictor reads lagged values (autoregressive terms).
    pub fn uses_lags(&self) -> bool {
        self.lps.iter().any(|lp| lp.design.uses_lags())
    }

    /// A model with the same structure (designs, names, constraints) and new
    /// responses; covariates must be unchanged.
    pub fn with_dataset(&self, d: &Dataset) -> Result<Model> {
        let mut m = self.clone();
        m.data.responses = self
            .spec
            .observations
            .iter()
            .map(|o| d.response(&o.name).map(|r| r.to_vec()))
            .collect::<Result<_>>()?;
        m.data.known = d.known_states().map(|s| s.to_vec());
        m.table = CovTable::from_dataset(d);
        m.dataset = d.clone();
        if m.uses_lags() {
            // lagged designs depend on responses; rebuild them with the original encoders
            for lp in &mut m.lps {
                if lp.design.uses_lags() {
                    let (x, r, _) = lp.design.encode(&m.table)?;
                    lp.design.replace_matrices(x, r);
                }
            }
        }
        Ok(m)
    }
}

fn find_name(names: &[String], name: &str) -> Result<usize> {
    let hits: Vec<usize> = names.iter().enumerate().filter(|(_, n)| *n == name).map(|(i, _)| i).collect();
    match hits.as_slice() {
        [i] => Ok(*i),
        [] => Err(Error::Spec(format!("unknown parameter name '{name}'"))),
        _ => Err(Error::Spec(format!("parameter name '{name}' is ambiguous"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;

    fn dataset(n: usize) -> Dataset {
        let mut responses = IndexMap::new();
        responses.insert("z".to_string(), (0..n).map(|i| Some(i as f64 * 0.1)).collect());
        let mut covs = IndexMap::new();
        covs.insert("x".to_string(), Column::Numeric((0..n).map(|i| Some((i as f64).sin())).collect()));
        let ids = (0..n).map(|i| if i < n / 2 { "a".to_string() } else { "b".to_string() }).collect();
        Dataset::with_rows(n, Some(ids), responses, covs, None).unwrap()
    }

    fn spec() -> ModelSpec {
        let hidden = ChainSpec::new(2, Formula::parse("linear(x)").unwrap()).unwrap();
        let obs = ObsSpec::new("z", Family::Norm, vec![vec![-1.0, 1.0], vec![1.0, 2.0]])
            .with_formula("mean", Formula::parse("re(ID)").unwrap())
            .unwrap();
        ModelSpec::new(hidden, vec![obs])
    }

    #[test]
    fn layout_and_names() {
        let m = Model::new(&spec(), &dataset(20)).unwrap();
        assert_eq!(
            m.names.alpha,
            vec![
                "z.mean.state1.(Intercept)",
                "z.mean.state2.(Intercept)",
                "z.sd.state1.(Intercept)",
                "z.sd.state2.(Intercept)",
                "S1>S2.(Intercept)",
                "S1>S2.x",
                "S2>S1.(Intercept)",
                "S2>S1.x"
            ]
        );
        assert_eq!(m.names.log_lambda, vec!["z.mean.state1.s(ID)", "z.mean.state2.s(ID)"]);
        assert_eq!(m.names.beta[0], "z.mean.state1.s(ID).a");
        assert_eq!(m.names.delta0, vec!["delta0.state2"]);
        let p = m.initial_parameters();
        assert_eq!(p.alpha[0], -1.0);
        assert_eq!(p.alpha[3], 2.0f64.ln());
        assert!((p.alpha[4] - (1.0f64 / 9.0).ln()).abs() < 1e-15);
        assert_eq!(p.alpha[5], 0.0);
    }

    #[test]
    fn fixed_and_shared_slots() {
        let mut s = spec();
        s.constraints.fixed = vec!["z.mean.state1.(Intercept)".into()];
        s.constraints.shared = vec![vec!["z.sd.state1.(Intercept)".into(), "z.sd.state2.(Intercept)".into()]];
        let m = Model::new(&s, &dataset(20)).unwrap();
        assert_eq!(m.fixshare.slots[0], Slot::Fixed);
        assert_eq!(m.fixshare.slots[2], m.fixshare.slots[3]);
        let p = m.initial_parameters();
        assert_eq!(p.alpha[2].to_bits(), p.alpha[3].to_bits());
        assert_eq!(m.fixshare.n_free, m.n_outer() - 2);

        s.constraints.fixed = vec!["nope".into()];
        assert!(Model::new(&s, &dataset(20)).is_err());
    }

    #[test]
    fn outer_and_full_vectors_round_trip() {
        let m = Model::new(&spec(), &dataset(20)).unwrap();
        let mut p = m.initial_parameters();
        let full: Vec<f64> = (0..m.names.full().len()).map(|i| i as f64).collect();
        p.set_full(&full);
        assert_eq!(p.full(), full);
        let o = p.outer();
        assert_eq!(o.len(), m.n_outer());
        assert_eq!(m.outer_to_full(m.n_alpha()), m.n_alpha() + m.n_beta());
    }

    #[test]
    fn validation_errors() {
        let mut s = spec();
        s.observations[0].init[1][0] = -1.0;
        assert!(Model::new(&s, &dataset(20)).is_err());
        let mut s = spec();
        s.observations[0].init[0].pop();
        assert!(Model::new(&s, &dataset(20)).is_err());
    }

    #[test]
    fn binomial_size_is_fixed() {
        let hidden = ChainSpec::new(2, Formula::intercept_only()).unwrap();
        let obs = ObsSpec::new("z", Family::Binom, vec![vec![10.0, 10.0], vec![0.2, 0.7]]);
        let m = Model::new(&ModelSpec::new(hidden, vec![obs]), &dataset(10)).unwrap();
        assert!(m.fixshare.is_fixed(0) && m.fixshare.is_fixed(1));
        assert!(!m.fixshare.is_fixed(2));
    }
}
