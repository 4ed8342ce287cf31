//! Command-line interface: subcommands over the library and their output files.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 fit did not converge
//! (outputs are still written).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::inference::{
    posterior_predictive_check, pseudo_residuals, simulate_ci, state_probs, viterbi, PredictionRequest, Quantity,
    Rows, Statistic,
};
use crate::likelihood::{fit, Convergence, Covariance, FitOptions, FitResult};
use crate::model::{Model, ParameterSet};
use crate::simulate::simulate_spec;
use crate::specfile::SpecFile;
use crate::suggest::suggest_initial;
use crate::util::fmt17;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hmmfit", version, about = "Hidden Markov models with flexible covariate effects")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Data file (CSV).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Model spec file (TOML).
    #[arg(long, global = true)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Random seed (overrides the spec's options.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// nelder-mead or bfgs.
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Draws for simulation-based intervals (0 for point estimates only).
    #[arg(long, global = true)]
    pub n_post: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model; writes estimates.csv, covariance.csv and convergence.json.
    Fit {
        /// Treat a `state` column in the data as unknown.
        #[arg(long)]
        ignore_states: bool,
    },
    /// Viterbi states and state probabilities; writes states.csv and stateprobs.csv.
    Decode(ParamsArg),
    /// Predicted parameters; writes predictions.csv.
    Predict {
        #[command(flatten)]
        params: ParamsArg,
        /// tpm, delta or obspar.
        #[arg(long, default_value = "tpm")]
        what: String,
        /// Comma-separated 1-based data rows (default: all rows).
        #[arg(long)]
        rows: Option<String>,
        /// Covariate table to predict at instead of the data rows.
        #[arg(long)]
        newdata: Option<PathBuf>,
        /// Covariance file (default: covariance.csv in the output directory).
        #[arg(long)]
        covariance: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// One-step-ahead pseudo-residuals; writes residuals.csv.
    Residuals(ParamsArg),
    /// Posterior predictive check; writes check.csv.
    Check {
        #[command(flatten)]
        params: ParamsArg,
        /// Response variable (default: the first one).
        #[arg(long)]
        var: Option<String>,
        /// mean, sd, q<p> (e.g. q0.9), acf1, zero or count.
        #[arg(long, default_value = "mean")]
        stat: String,
        #[arg(long, default_value_t = 200)]
        n_sims: usize,
    },
    /// Simulate from the spec's initial values (or --params); writes simulated.csv.
    Simulate {
        #[arg(long)]
        params: Option<PathBuf>,
        /// Rows per series.
        #[arg(long, default_value_t = 500)]
        n_obs: usize,
        #[arg(long, default_value_t = 1)]
        n_series: usize,
    },
    /// K-means starting values; writes suggested.toml.
    SuggestInit,
}

#[derive(Debug, Args)]
pub struct ParamsArg {
    /// Estimates file from `fit` (default: estimates.csv in the output directory).
    #[arg(long)]
    pub params: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

struct Context {
    file: SpecFile,
    seed: u64,
    n_post: usize,
}

impl Context {
    fn new(g: &Global) -> Result<Context> {
        let path = g.spec.as_ref().ok_or_else(|| Error::Spec("--spec is required".into()))?;
        let mut file = SpecFile::load(path)?;
        if let Some(m) = &g.method {
            file.options.method = m.clone();
        }
        if let Some(v) = g.max_iter {
            file.options.max_iter = v;
        }
        if let Some(v) = g.tol {
            file.options.tol = v;
        }
        let seed = g.seed.unwrap_or(file.options.seed);
        let n_post = g.n_post.unwrap_or(file.options.n_post);
        file.options.fit_options()?;
        Ok(Context { file, seed, n_post })
    }

    fn fit_options(&self) -> FitOptions {
        self.file.options.fit_options().expect("validated in Context::new")
    }

    fn data(&self, g: &Global) -> Result<Dataset> {
        let path = g.data.as_ref().ok_or_else(|| Error::Load("--data is required".into()))?;
        Dataset::load_csv(path, &self.file.spec.schema())
    }

    fn model(&self, g: &Global) -> Result<Model> {
        Model::new(&self.file.spec, &self.data(g)?)
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    let ctx = Context::new(g)?;
    std::fs::create_dir_all(&g.out)?;
    match &cli.command {
        Command::Fit { ignore_states } => {
            let mut d = ctx.data(g)?;
            if *ignore_states {
                d = d.without_states();
            }
            let model = Model::new(&ctx.file.spec, &d)?;
            let res = fit(&model, &model.initial_parameters(), &ctx.fit_options())?;
            write_fit(&g.out, &model, &res)?;
            println!(
                "marginal log-likelihood {}  ({} iterations, {})",
                fmt17(res.marginal_loglik),
                res.convergence.iterations,
                if res.convergence.converged { "converged" } else { "not converged" }
            );
            Ok(if res.convergence.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::Decode(pa) => {
            let model = ctx.model(g)?;
            let p = load_params(&model, &params_path(g, &pa.params))?;
            let states = viterbi(&model, &p)?;
            let probs = state_probs(&model, &p)?;
            let mut w = csv_out(&g.out, "states.csv")?;
            w.write_record(["row", "ID", "state"])?;
            for (t, s) in states.iter().enumerate() {
                w.write_record([(t + 1).to_string(), series_label(&model, t), (s + 1).to_string()])?;
            }
            w.flush()?;
            let mut w = csv_out(&g.out, "stateprobs.csv")?;
            let mut header = vec!["row".to_string(), "ID".to_string()];
            header.extend((1..=model.k).map(|j| format!("state{j}")));
            w.write_record(&header)?;
            for (t, pr) in probs.iter().enumerate() {
                let mut rec = vec![(t + 1).to_string(), series_label(&model, t)];
                rec.extend(pr.iter().map(|v| fmt17(*v)));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(EXIT_OK)
        }
        Command::Predict { params, what, rows, newdata, covariance, level } => {
            let model = ctx.model(g)?;
            let p = load_params(&model, &params_path(g, &params.params))?;
            let what: Quantity = what.parse()?;
            let rows = match (newdata, rows) {
                (Some(_), Some(_)) => return Err(Error::Spec("give either --rows or --newdata".into())),
                (Some(path), None) => {
                    let schema = Schema::new::<String>(&[], &ctx.file.spec.covariate_names())
                        .with_categorical(&ctx.file.spec.categorical);
                    Rows::New(Dataset::load_csv(path, &schema)?)
                }
                (None, Some(r)) => Rows::Indices(parse_rows(r, model.data.n)?),
                (None, None) => Rows::Indices((0..model.data.n).collect()),
            };
            let cov_path = covariance.clone().unwrap_or_else(|| g.out.join("covariance.csv"));
            let cov = if ctx.n_post > 0 { Some(load_covariance(&model, &cov_path)?) } else { None };
            let mut req = PredictionRequest::new(what, rows);
            req.n_post = ctx.n_post;
            req.level = *level;
            let pred = simulate_ci(&model, &p, cov.as_ref(), &req, ctx.seed, g.threads)?;
            let mut w = csv_out(&g.out, "predictions.csv")?;
            w.write_record(["row", "quantity", "mean", "lcl", "ucl"])?;
            let row_label: Box<dyn Fn(usize) -> usize> = match &req.rows {
                Rows::Indices(ix) => Box::new(move |r| ix[r] + 1),
                Rows::New(_) => Box::new(|r| r + 1),
            };
            for v in &pred {
                w.write_record([
                    row_label(v.row).to_string(),
                    v.quantity.clone(),
                    fmt17(v.mean),
                    opt(v.lcl),
                    opt(v.ucl),
                ])?;
            }
            w.flush()?;
            Ok(EXIT_OK)
        }
        Command::Residuals(pa) => {
            let model = ctx.model(g)?;
            let p = load_params(&model, &params_path(g, &pa.params))?;
            let res = pseudo_residuals(&model, &p, ctx.seed)?;
            let mut w = csv_out(&g.out, "residuals.csv")?;
            let mut header = vec!["row".to_string(), "ID".to_string()];
            header.extend(model.spec.observations.iter().map(|o| o.name.clone()));
            w.write_record(&header)?;
            for t in 0..model.data.n {
                let mut rec = vec![(t + 1).to_string(), series_label(&model, t)];
                rec.extend(res.values.iter().map(|v| opt(v[t])));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(EXIT_OK)
        }
        Command::Check { params, var, stat, n_sims } => {
            let model = ctx.model(g)?;
            let p = load_params(&model, &params_path(g, &params.params))?;
            let var = var.clone().unwrap_or_else(|| model.spec.observations[0].name.clone());
            let statistic: Statistic = stat.parse()?;
            let pc = posterior_predictive_check(&model, &p, &var, &statistic, *n_sims, ctx.seed, g.threads)?;
            let mut w = csv_out(&g.out, "check.csv")?;
            w.write_record(["variable", "statistic", "observed", "tail", "n_sims", "sim_mean"])?;
            let sim_mean = pc.simulated.iter().sum::<f64>() / pc.simulated.len() as f64;
            w.write_record([var, stat.clone(), fmt17(pc.observed), fmt17(pc.tail), n_sims.to_string(), fmt17(sim_mean)])?;
            w.flush()?;
            Ok(EXIT_OK)
        }
        Command::Simulate { params, n_obs, n_series } => {
            let spec = &ctx.file.spec;
            let lengths = vec![*n_obs; *n_series];
            let covs = match &g.data {
                Some(path) => {
                    let schema = Schema::new::<String>(&[], &spec.covariate_names()).with_categorical(&spec.categorical);
                    Some(Dataset::load_csv(path, &schema)?)
                }
                None => None,
            };
            let p = match params {
                Some(path) => {
                    let (m, _) = simulate_spec(spec, None, covs.as_ref(), &lengths, ctx.seed)?;
                    Some(load_params(&m, path)?)
                }
                None => None,
            };
            let (_, d) = simulate_spec(spec, p.as_ref(), covs.as_ref(), &lengths, ctx.seed)?;
            d.save_csv(g.out.join("simulated.csv"))?;
            Ok(EXIT_OK)
        }
        Command::SuggestInit => {
            let d = ctx.data(g)?;
            let init = suggest_initial(&ctx.file.spec, &d, ctx.seed)?;
            let mut file = ctx.file.clone();
            for (o, v) in file.spec.observations.iter_mut().zip(init) {
                o.init = v;
            }
            file.spec.validate()?;
            std::fs::write(g.out.join("suggested.toml"), file.to_toml()?)?;
            Ok(EXIT_OK)
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_else(|| "NA".into())
}

fn series_label(model: &Model, row: usize) -> String {
    let s = model.data.series.iter().position(|r| r.contains(&row)).unwrap_or(0);
    model.data.labels[s].clone()
}

fn csv_out(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?)))
}

fn params_path(g: &Global, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| g.out.join("estimates.csv"))
}

fn parse_rows(s: &str, n: usize) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            let r: usize = t.trim().parse().map_err(|_| Error::Spec(format!("bad row number '{t}'")))?;
            if r == 0 || r > n {
                return Err(Error::Spec(format!("row {r} outside 1..{n}")));
            }
            Ok(r - 1)
        })
        .collect()
}

#[derive(Serialize)]
struct ConvergenceFile<'a> {
    #[serde(flatten)]
    convergence: &'a Convergence,
    marginal_loglik: f64,
    loglik: f64,
    covariance_indefinite: Option<bool>,
}

/// Write estimates.csv, covariance.csv (when computed) and convergence.json.
pub fn write_fit(dir: &Path, model: &Model, res: &FitResult) -> Result<()> {
    let mut w = csv_out(dir, "estimates.csv")?;
    w.write_record(["component", "name", "value"])?;
    let p = &res.params;
    if model.data.n > 0 {
        for what in [Quantity::Tpm, Quantity::Delta, Quantity::ObsPar] {
            let comp = match what {
                Quantity::Tpm => "tpm",
                Quantity::Delta => "delta",
                Quantity::ObsPar => "obspar",
            };
            let mut req = PredictionRequest::new(what, Rows::Indices(vec![0]));
            req.n_post = 0;
            for v in crate::inference::predict(model, p, &req)? {
                w.write_record([comp, &v.quantity, &fmt17(v.mean)])?;
            }
        }
    }
    let sd = res.sd_re();
    let sections: [(&str, &[String], &[f64]); 5] = [
        ("alpha", &model.names.alpha, &p.alpha),
        ("log_lambda", &model.names.log_lambda, &p.log_lambda),
        ("sd_re", &model.names.log_lambda, &sd),
        ("delta0", &model.names.delta0, &p.delta0),
        ("beta", &model.names.beta, &p.beta),
    ];
    for (comp, names, vals) in sections {
        for (n, v) in names.iter().zip(vals) {
            w.write_record([comp, n, &fmt17(*v)])?;
        }
    }
    w.flush()?;

    if let Some(cov) = &res.covariance {
        let names = model.names.full();
        let mut w = csv_out(dir, "covariance.csv")?;
        let mut header = vec!["name".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (i, n) in names.iter().enumerate() {
            let mut rec = vec![n.clone()];
            rec.extend((0..names.len()).map(|j| fmt17(cov.matrix[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
    } else {
        // a covariance left over from an earlier fit would not match these estimates
        let stale = dir.join("covariance.csv");
        if stale.exists() {
            std::fs::remove_file(stale)?;
        }
    }

    let conv = ConvergenceFile {
        convergence: &res.convergence,
        marginal_loglik: res.marginal_loglik,
        loglik: res.loglik,
        covariance_indefinite: res.covariance.as_ref().map(|c| c.indefinite),
    };
    let mut f = BufWriter::new(File::create(dir.join("convergence.json"))?);
    serde_json::to_writer_pretty(&mut f, &conv).map_err(|e| Error::Io(e.into()))?;
    writeln!(f)?;
    Ok(())
}

/// Read the parameter vectors of `model` from an estimates file written by [`write_fit`].
pub fn load_params(model: &Model, path: &Path) -> Result<ParameterSet> {
    let file = File::open(path).map_err(|_| {
        Error::Load(format!("no parameter file at {}; run `fit` first or pass --params", path.display()))
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut p = model.initial_parameters();
    let mut seen = [0usize; 4];
    for rec in rdr.records() {
        let rec = rec?;
        let (comp, name, value) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""), rec.get(2).unwrap_or(""));
        let (slot, names, vals) = match comp {
            "alpha" => (0, &model.names.alpha, &mut p.alpha),
            "beta" => (1, &model.names.beta, &mut p.beta),
            "log_lambda" => (2, &model.names.log_lambda, &mut p.log_lambda),
            "delta0" => (3, &model.names.delta0, &mut p.delta0),
            _ => continue,
        };
        let i = seen[slot];
        if names.get(i).map(String::as_str) != Some(name) {
            return Err(Error::Load(format!(
                "{}: parameter '{name}' does not match the model (expected '{}')",
                path.display(),
                names.get(i).map(String::as_str).unwrap_or("nothing")
            )));
        }
        vals[i] = value.parse().map_err(|_| Error::Load(format!("{}: bad value '{value}' for {name}", path.display())))?;
        seen[slot] += 1;
    }
    let expected = [model.n_alpha(), model.n_beta(), model.n_blocks(), model.n_delta()];
    if seen != expected {
        return Err(Error::Load(format!("{}: incomplete parameter file for this model", path.display())));
    }
    Ok(p)
}

pub fn load_covariance(model: &Model, path: &Path) -> Result<Covariance> {
    let file = File::open(path).map_err(|_| {
        Error::Load(format!("no covariance file at {}; fit with covariance enabled or use --n-post 0", path.display()))
    })?;
    let names = model.names.full();
    let n = names.len();
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers()?.clone();
    if header.iter().skip(1).ne(names.iter().map(String::as_str)) {
        return Err(Error::Load(format!("{}: columns do not match the model parameters", path.display())));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i >= n {
            return Err(Error::Load(format!("{}: too many rows", path.display())));
        }
        for j in 0..n {
            let cell = rec.get(j + 1).unwrap_or("");
            m[(i, j)] = cell.parse().map_err(|_| Error::Load(format!("{}: bad value '{cell}'", path.display())))?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Load(format!("{}: expected {n} rows, found {rows}", path.display())));
    }
    Ok(Covariance { matrix: m, indefinite: false })
}
