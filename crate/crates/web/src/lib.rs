//! Browser bindings: simulate a dataset, fit a model to it and decode the
//! most likely state sequence. Specs are the TOML files the CLI reads and
//! data travels as CSV text.

use hmmfit::data::Dataset;
use hmmfit::inference::viterbi;
use hmmfit::likelihood::fit as fit_model;
use hmmfit::model::Model;
use hmmfit::simulate::{natural_parameters, simulate_spec};
use hmmfit::specfile::SpecFile;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn compile(spec: &str, csv: &str) -> Result<(SpecFile, Model, Option<Vec<Option<usize>>>), JsError> {
    let file = SpecFile::parse(spec).map_err(js)?;
    let d = Dataset::from_csv_reader(csv.as_bytes(), &file.spec.schema()).map_err(js)?;
    let truth = d.known_states().map(<[_]>::to_vec);
    let model = Model::new(&file.spec, &d.without_states()).map_err(js)?;
    Ok((file, model, truth))
}

/// Simulate one series of `n_obs` rows at the spec's initial values.
/// Returns CSV with the true states in the last column.
#[wasm_bindgen]
pub fn simulate(spec: &str, n_obs: usize, seed: u64) -> Result<String, JsError> {
    let file = SpecFile::parse(spec).map_err(js)?;
    let (_, d) = simulate_spec(&file.spec, None, None, &[n_obs], seed).map_err(js)?;
    let mut out = Vec::new();
    d.write_csv(&mut out).map_err(js)?;
    String::from_utf8(out).map_err(js)
}

/// Fit the spec to CSV data (any state column is ignored). Returns JSON with
/// the full parameter vector, its names, natural parameters at the first row
/// and convergence information.
#[wasm_bindgen]
pub fn fit(spec: &str, csv: &str) -> Result<String, JsError> {
    let (file, model, _) = compile(spec, csv)?;
    let mut opts = file.options.fit_options().map_err(js)?;
    opts.covariance = false;
    let res = fit_model(&model, &model.initial_parameters(), &opts).map_err(js)?;
    let natural: Vec<_> =
        natural_parameters(&model, &res.params, 0).into_iter().map(|(n, v)| json!({"name": n, "value": v})).collect();
    Ok(json!({
        "names": model.names.full(),
        "values": res.params.full(),
        "natural": natural,
        "loglik": res.marginal_loglik,
        "converged": res.convergence.converged,
        "iterations": res.convergence.iterations,
        "message": res.convergence.message,
    })
    .to_string())
}

/// Viterbi decoding with the parameter vector returned by [`fit`]. Returns
/// JSON with 1-based states and, when the data carry true states, the
/// proportion of rows where they agree.
#[wasm_bindgen]
pub fn decode(spec: &str, csv: &str, values: &[f64]) -> Result<String, JsError> {
    let (_, model, truth) = compile(spec, csv)?;
    let mut p = model.initial_parameters();
    if values.len() != p.full().len() {
        return Err(JsError::new(&format!("expected {} parameter values, got {}", p.full().len(), values.len())));
    }
    p.set_full(values);
    let states = viterbi(&model, &p).map_err(js)?;
    let agreement = truth.map(|t| {
        let known: Vec<_> = t.iter().zip(&states).filter_map(|(a, b)| a.map(|a| a == *b)).collect();
        known.iter().filter(|&&x| x).count() as f64 / known.len().max(1) as f64
    });
    Ok(json!({
        "states": states.iter().map(|s| s + 1).collect::<Vec<_>>(),
        "agreement": agreement,
    })
    .to_string())
}
