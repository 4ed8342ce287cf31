//! TOML model-spec files.
//!
//! ```toml
//! n_states = 2
//!
//! [[observation]]
//! name = "step"
//! dist = "gamma2"
//! formulas = { mean = "intercept + spline(temp, k=8)" }
//! init = { mean = [0.5, 3.0], sd = [0.5, 2.0] }
//!
//! [hidden]
//! formula = "intercept + linear(temp)"   # default for every free transition
//! transitions = { "S1>S2" = "intercept" }
//! initial = "stationary"                 # estimated | stationary | fixed
//! zeros = [[1, 2]]                       # 1-based
//! tpm = [[0.9, 0.1], [0.1, 0.9]]
//!
//! [constraints]
//! fixed = ["step.sd.state1.(Intercept)"]
//! shared = [["S1>S2.(Intercept)", "S2>S1.(Intercept)"]]
//! values = { "S1>S2.(Intercept)" = -2.0 }
//!
//! [options]
//! method = "bfgs"
//! seed = 1
//! ```
//!
//! Parameters omitted from `formulas` are intercept-only. States and
//! structural zeros are 1-based in the file.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::design::Formula;
use crate::dists::Family;
use crate::error::{Error, Result};
use crate::hidden::{ChainSpec, InitialMode};
use crate::likelihood::{FitOptions, Method};
use crate::model::{Constraints, ModelSpec, ObsSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    n_states: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categorical: Vec<String>,
    observation: Vec<RawObs>,
    #[serde(default)]
    hidden: RawHidden,
    #[serde(default, skip_serializing_if = "RawConstraints::is_empty")]
    constraints: RawConstraints,
    #[serde(default)]
    options: Options,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObs {
    name: String,
    dist: String,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    formulas: IndexMap<String, String>,
    init: IndexMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHidden {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formula: Option<String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    transitions: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    initial_states: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    initial_per_series: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    zeros: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tpm: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraints {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    fixed: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    shared: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    values: IndexMap<String, f64>,
}

impl RawConstraints {
    fn is_empty(&self) -> bool {
        self.fixed.is_empty() && self.shared.is_empty() && self.values.is_empty()
    }
}

/// Run settings stored alongside the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Options {
    pub method: String,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Posterior draws for confidence intervals.
    pub n_post: usize,
    pub level: f64,
    pub covariance: bool,
}

impl Default for Options {
    fn default() -> Self {
        let f = FitOptions::default();
        Options {
            method: "nelder-mead".into(),
            max_iter: f.max_iter,
            tol: f.tol,
            seed: 1,
            n_post: 1000,
            level: 0.95,
            covariance: f.covariance,
        }
    }
}

impl Options {
    pub fn fit_options(&self) -> Result<FitOptions> {
        let method: Method = self.method.parse()?;
        Ok(FitOptions { method, max_iter: self.max_iter, tol: self.tol, covariance: self.covariance, ..FitOptions::default() })
    }
}

/// A parsed spec file.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecFile {
    pub spec: ModelSpec,
    pub options: Options,
}

fn parse_formula(what: &str, s: &str) -> Result<Formula> {
    Formula::parse(s).map_err(|e| Error::Spec(format!("{what}: {e}")))
}

fn transition_key(key: &str, k: usize) -> Result<(usize, usize)> {
    let bad = || Error::Spec(format!("transition '{key}' is not of the form S<i>>S<j> with states 1..{k}"));
    let (a, b) = key.split_once('>').ok_or_else(bad)?;
    let num = |s: &str| s.strip_prefix('S').and_then(|n| n.parse::<usize>().ok()).filter(|n| (1..=k).contains(n));
    match (num(a), num(b)) {
        (Some(i), Some(j)) if i != j => Ok((i - 1, j - 1)),
        _ => Err(bad()),
    }
}

impl SpecFile {
    pub fn parse(text: &str) -> Result<SpecFile> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        let k = raw.n_states;
        if k < 2 {
            return Err(Error::Spec(format!("at least 2 states are required, got {k}")));
        }

        let mut observations = Vec::new();
        for o in &raw.observation {
            let family: Family = o.dist.parse()?;
            let params = family.param_names();
            for key in o.formulas.keys().chain(o.init.keys()) {
                if !params.contains(&key.as_str()) {
                    return Err(Error::Spec(format!(
                        "{}: {family} has no parameter '{key}' (parameters: {})",
                        o.name,
                        params.join(", ")
                    )));
                }
            }
            let init = params
                .iter()
                .map(|p| {
                    o.init.get(*p).cloned().ok_or_else(|| {
                        Error::Spec(format!("{}: missing initial values for '{p}'", o.name))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut obs = ObsSpec::new(&o.name, family, init);
            for (p, f) in &o.formulas {
                obs = obs.with_formula(p, parse_formula(&format!("{}.{p}", o.name), f)?)?;
            }
            observations.push(obs);
        }

        let h = &raw.hidden;
        let default = match &h.formula {
            Some(f) => parse_formula("hidden formula", f)?,
            None => Formula::intercept_only(),
        };
        let mut chain = ChainSpec::new(k, default)?;
        if let Some(tpm) = &h.tpm {
            if tpm.len() != k || tpm.iter().any(|r| r.len() != k) {
                return Err(Error::Spec(format!("hidden.tpm must be {k} x {k}")));
            }
            chain.tpm0 = tpm.iter().flatten().copied().collect();
        }
        let zeros = h
            .zeros
            .iter()
            .map(|&[i, j]| {
                if i == 0 || j == 0 {
                    Err(Error::Spec("structural zeros are 1-based".into()))
                } else {
                    Ok((i - 1, j - 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if !zeros.is_empty() {
            chain = chain.with_zeros(zeros)?;
        }
        for (key, f) in &h.transitions {
            let (i, j) = transition_key(key, k)?;
            if chain.is_zero(i, j) {
                return Err(Error::Spec(format!("transition {key} is a structural zero")));
            }
            chain.formulas[i * k + j] = Some(parse_formula(key, f)?);
        }
        chain.initial_mode = match h.initial.as_deref().unwrap_or("estimated") {
            "estimated" => InitialMode::Estimated,
            "stationary" => InitialMode::Stationary,
            "fixed" => {
                if h.initial_states.is_empty() || h.initial_states.iter().any(|s| *s == 0 || *s > k) {
                    return Err(Error::Spec(format!("initial = \"fixed\" needs initial_states in 1..{k}")));
                }
                InitialMode::Fixed(h.initial_states.iter().map(|s| s - 1).collect())
            }
            other => {
                return Err(Error::Spec(format!(
                    "unknown initial mode '{other}'; valid options are: estimated, stationary, fixed"
                )))
            }
        };
        chain.initial_per_series = h.initial_per_series;

        let c = &raw.constraints;
        let spec = ModelSpec {
            observations,
            hidden: chain,
            constraints: Constraints { fixed: c.fixed.clone(), shared: c.shared.clone(), values: c.values.clone() },
            categorical: raw.categorical.clone(),
        };
        spec.validate().map_err(|e| Error::Spec(e.to_string()))?;
        raw.options.fit_options()?;
        Ok(SpecFile { spec, options: raw.options })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SpecFile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read spec file {}: {e}", path.display())))?;
        SpecFile::parse(&text)
    }

    /// Serialize to TOML. Every free transition is written out explicitly.
    pub fn to_toml(&self) -> Result<String> {
        let s = &self.spec;
        let k = s.n_states();
        let observation = s
            .observations
            .iter()
            .map(|o| {
                let names = o.family.param_names();
                RawObs {
                    name: o.name.clone(),
                    dist: o.family.name().to_string(),
                    formulas: o
                        .formulas
                        .iter()
                        .zip(names)
                        .filter(|(f, _)| **f != Formula::intercept_only())
                        .map(|(f, p)| (p.to_string(), f.to_string()))
                        .collect(),
                    init: names.iter().zip(&o.init).map(|(p, v)| (p.to_string(), v.clone())).collect(),
                }
            })
            .collect();
        let h = &s.hidden;
        let transitions = (0..k * k)
            .filter_map(|c| h.formulas[c].as_ref().map(|f| (format!("S{}>S{}", c / k + 1, c % k + 1), f.to_string())))
            .collect();
        let (initial, initial_states) = match &h.initial_mode {
            InitialMode::Estimated => ("estimated", Vec::new()),
            InitialMode::Stationary => ("stationary", Vec::new()),
            InitialMode::Fixed(v) => ("fixed", v.iter().map(|s| s + 1).collect()),
        };
        let raw = RawSpec {
            n_states: k,
            categorical: s.categorical.clone(),
            observation,
            hidden: RawHidden {
                formula: None,
                transitions,
                initial: Some(initial.into()),
                initial_states,
                initial_per_series: h.initial_per_series,
                zeros: h.zeros.iter().map(|&(i, j)| [i + 1, j + 1]).collect(),
                tpm: Some(h.tpm0.chunks(k).map(|r| r.to_vec()).collect()),
            },
            constraints: RawConstraints {
                fixed: s.constraints.fixed.clone(),
                shared: s.constraints.shared.clone(),
                values: s.constraints.values.clone(),
            },
            options: self.options.clone(),
        };
        toml::to_string(&raw).map_err(|e| Error::Spec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const PETREL: &str = r#"
n_states = 3

[[observation]]
name = "step"
dist = "gamma2"
init = { mean = [0.05, 0.5, 1.0], sd = [0.05, 0.5, 1.0] }

[[observation]]
name = "angle"
dist = "wrpcauchy"
init = { mu = [0.0, 0.0, 0.0], rho = [0.1, 0.8, 0.9] }

[hidden]
formula = "intercept + re(ID) + spline(d2c, k=10)"
zeros = [[1, 3], [3, 1]]
tpm = [[0.8, 0.2, 0.0], [0.1, 0.8, 0.1], [0.0, 0.2, 0.8]]

[constraints]
fixed = ["angle.mu.state1.(Intercept)", "angle.mu.state2.(Intercept)", "angle.mu.state3.(Intercept)"]

[options]
method = "bfgs"
seed = 7
"#;

    #[test]
    fn petrel_style_spec_round_trips() {
        let a = SpecFile::parse(PETREL).unwrap();
        let s = &a.spec;
        assert_eq!(s.n_states(), 3);
        assert_eq!(s.observations[0].family, Family::Gamma2);
        assert_eq!(s.observations[1].family, Family::Wrpcauchy);
        assert_eq!(s.hidden.zeros, vec![(0, 2), (2, 0)]);
        assert!(s.hidden.formulas[2].is_none() && s.hidden.formulas[6].is_none());
        assert!(s.hidden.formulas[1].as_ref().unwrap().has_random());
        assert_eq!(s.constraints.fixed.len(), 3);
        assert_eq!(a.options.seed, 7);
        let text = a.to_toml().unwrap();
        let b = SpecFile::parse(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_toml().unwrap());
    }

    #[test]
    fn invalid_distribution_lists_options() {
        let text = PETREL.replace("\"gamma2\"", "\"gamma3\"");
        let e = SpecFile::parse(&text).unwrap_err().to_string();
        assert!(e.contains("gamma3") && e.contains("gamma2") && e.contains("wrpcauchy"), "{e}");
    }

    #[test]
    fn rejections() {
        for (from, to) in [
            ("rho = [0.1, 0.8, 0.9]", "rho = [0.1, 0.8, 1.9]"),
            ("zeros = [[1, 3], [3, 1]]", "zeros = [[1, 1]]"),
            ("method = \"bfgs\"", "method = \"simplex\""),
            ("init = { mean", "formulas = { shape = \"intercept\" }, init = { mean"),
            ("n_states = 3", "n_states = 3\nbogus = 1"),
            ("formula = \"intercept + re(ID) + spline(d2c, k=10)\"", "formula = \"intercept + spline(d2c\""),
        ] {
            assert!(SpecFile::parse(&PETREL.replacen(from, to, 1)).is_err(), "{to}");
        }
    }

    #[test]
    fn transition_overrides_and_fixed_initial() {
        let text = r#"
n_states = 2
[[observation]]
name = "y"
dist = "pois"
formulas = { rate = "intercept + linear(x)" }
init = { rate = [1.0, 5.0] }
[hidden]
transitions = { "S2>S1" = "intercept + linear(x)" }
initial = "fixed"
initial_states = [2]
"#;
        let a = SpecFile::parse(text).unwrap();
        assert_eq!(a.spec.hidden.formulas[1], Some(Formula::intercept_only()));
        assert_eq!(a.spec.hidden.formulas[2].as_ref().unwrap().to_string(), "intercept + linear(x)");
        assert_eq!(a.spec.hidden.initial_mode, InitialMode::Fixed(vec![1]));
        assert_eq!(SpecFile::parse(&a.to_toml().unwrap()).unwrap(), a);
        assert!(transition_key("S1>S1", 2).is_err() && transition_key("S0>S1", 2).is_err());
    }
}
