use std::path::Path;
use std::process::Command;

use hmmfit::cli::main_with_args;

const SPEC: &str = r#"
n_states = 2

[[observation]]
name = "z"
dist = "norm"
init = { mean = [-2.0, 2.0], sd = [1.0, 1.0] }

[hidden]
tpm = [[0.9, 0.1], [0.1, 0.9]]
initial = "stationary"

[options]
method = "bfgs"
seed = 11
n_post = 0
"#;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let spec = dir.join("spec.toml");
    let mut all = vec!["hmmfit".to_string()];
    all.extend(args.iter().map(|s| s.to_string()));
    all.extend(["--spec".into(), spec.display().to_string(), "--out".into(), dir.display().to_string()]);
    main_with_args(all)
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn simulate_fit_decode_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    assert_eq!(run(d, &["simulate", "--n-obs", "300"]), 0);
    let sim = d.join("simulated.csv").display().to_string();
    let first = std::fs::read(d.join("simulated.csv")).unwrap();
    assert_eq!(run(d, &["simulate", "--n-obs", "300"]), 0);
    assert_eq!(first, std::fs::read(d.join("simulated.csv")).unwrap(), "seeded simulation is reproducible");

    // decoding before any fit has no parameters to use
    assert_eq!(run(d, &["decode", "--data", &sim]), 1);

    assert_eq!(run(d, &["fit", "--data", &sim, "--ignore-states"]), 0);
    let est = read_csv(&d.join("estimates.csv"));
    let get = |comp: &str, name: &str| -> f64 {
        est.iter().find(|r| r[0] == comp && r[1] == name).unwrap_or_else(|| panic!("{comp} {name}"))[2].parse().unwrap()
    };
    assert!((get("obspar", "z.mean.state1") + 2.0).abs() < 0.3);
    assert!((get("obspar", "z.mean.state2") - 2.0).abs() < 0.3);
    assert!(d.join("covariance.csv").exists());
    let conv: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("convergence.json")).unwrap()).unwrap();
    assert_eq!(conv["converged"], serde_json::Value::Bool(true));

    assert_eq!(run(d, &["decode", "--data", &sim]), 0);
    let states = read_csv(&d.join("states.csv"));
    let truth = read_csv(&d.join("simulated.csv"));
    let agree = states.iter().zip(&truth).filter(|(s, t)| s[2] == t[t.len() - 1]).count();
    assert!(agree as f64 / 300.0 > 0.9, "{agree}");
    let probs = read_csv(&d.join("stateprobs.csv"));
    for r in &probs {
        let s: f64 = r[2..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    assert_eq!(run(d, &["predict", "--data", &sim, "--what", "delta", "--rows", "1,2", "--n-post", "200"]), 0);
    let pred = read_csv(&d.join("predictions.csv"));
    assert_eq!(pred.len(), 4);
    for r in &pred {
        let (m, l, u): (f64, f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!(l <= m + 1e-9 && m <= u + 1e-9, "{r:?}");
    }

    assert_eq!(run(d, &["residuals", "--data", &sim]), 0);
    assert_eq!(read_csv(&d.join("residuals.csv")).len(), 300);

    assert_eq!(run(d, &["check", "--data", &sim, "--stat", "mean", "--n-sims", "100"]), 0);
    let check = read_csv(&d.join("check.csv"));
    let tail: f64 = check[0][3].parse().unwrap();
    assert!(tail > 0.005 && tail < 0.995, "{tail}");

    assert_eq!(run(d, &["suggest-init", "--data", &sim]), 0);
    let suggested = hmmfit::specfile::SpecFile::load(d.join("suggested.toml")).unwrap();
    let mu = &suggested.spec.observations[0].init[0];
    assert!(mu[0] < mu[1] && (mu[0] + 2.0).abs() < 0.5 && (mu[1] - 2.0).abs() < 0.5, "{mu:?}");
}

#[test]
fn predict_delta_on_symmetric_intercept_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    assert_eq!(run(d, &["simulate", "--n-obs", "50"]), 0);
    let sim = d.join("simulated.csv").display().to_string();
    // estimates at the symmetric starting values
    std::fs::write(
        d.join("estimates.csv"),
        "component,name,value\nalpha,z.mean.state1.(Intercept),-2\nalpha,z.mean.state2.(Intercept),2\n\
         alpha,z.sd.state1.(Intercept),0\nalpha,z.sd.state2.(Intercept),0\n\
         alpha,S1>S2.(Intercept),-2.1972245773362196\nalpha,S2>S1.(Intercept),-2.1972245773362196\n",
    )
    .unwrap();
    assert_eq!(run(d, &["predict", "--data", &sim, "--what", "delta", "--rows", "1"]), 0);
    let pred = read_csv(&d.join("predictions.csv"));
    assert_eq!(pred.len(), 2);
    for r in pred {
        assert!((r[2].parse::<f64>().unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(r[3], "NA");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC.replace("\"norm\"", "\"normal\"")).unwrap();
    let bin = env!("CARGO_BIN_EXE_hmmfit");
    let out = Command::new(bin).args(["fit", "--spec"]).arg(d.join("spec.toml")).arg("--data").arg(d.join("x.csv")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("normal") && msg.contains("norm"), "{msg}");
    let out = Command::new(bin).arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // an iteration cap of 1 cannot converge: outputs are written and the code is 2
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    assert_eq!(run(d, &["simulate", "--n-obs", "200"]), 0);
    let sim = d.join("simulated.csv").display().to_string();
    assert_eq!(run(d, &["fit", "--data", &sim, "--ignore-states", "--max-iter", "1"]), 2);
    assert!(d.join("estimates.csv").exists() && d.join("convergence.json").exists());
}

#[test]
fn sd_re_is_inverse_root_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = SPEC.replace(
        "init = { mean",
        "formulas = { mean = \"intercept + re(ID)\" }\ninit = { mean",
    );
    std::fs::write(d.join("spec.toml"), spec).unwrap();
    assert_eq!(run(d, &["simulate", "--n-obs", "60", "--n-series", "4"]), 0);
    let sim = d.join("simulated.csv").display().to_string();
    let code = run(d, &["fit", "--data", &sim, "--ignore-states", "--max-iter", "60"]);
    assert!(code == 0 || code == 2);
    let est = read_csv(&d.join("estimates.csv"));
    let ll: Vec<f64> = est.iter().filter(|r| r[0] == "log_lambda").map(|r| r[2].parse().unwrap()).collect();
    let sd: Vec<f64> = est.iter().filter(|r| r[0] == "sd_re").map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(ll.len(), 2);
    for (l, s) in ll.iter().zip(&sd) {
        assert!((s - (-0.5 * l).exp()).abs() <= 1e-15 * s.max(1.0));
    }
}
