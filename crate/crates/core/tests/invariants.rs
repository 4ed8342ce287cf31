use hmmfit::data::Dataset;
use hmmfit::inference::state_probs;
use hmmfit::likelihood::forward_loglik;
use hmmfit::model::{Model, ParameterSet};
use hmmfit::specfile::SpecFile;
use proptest::prelude::*;

const SPEC: &str = r#"
n_states = 3

[[observation]]
name = "z"
dist = "norm"
formulas = { mean = "x" }
init = { mean = [-2.0, 0.0, 2.0], sd = [1.0, 1.0, 1.0] }

[hidden]
formula = "x"
zeros = [[1, 3]]
initial = "estimated"
"#;

fn csv(rows: &[(String, f64, Option<f64>)]) -> String {
    let mut s = String::from("ID,z,x\n");
    for (id, x, z) in rows {
        let z = z.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        s.push_str(&format!("{id},{z},{x}\n"));
    }
    s
}

fn build(rows: &[(String, f64, Option<f64>)]) -> Model {
    let file = SpecFile::parse(SPEC).unwrap();
    let d = Dataset::from_csv_reader(csv(rows).as_bytes(), &file.spec.schema()).unwrap();
    Model::new(&file.spec, &d).unwrap()
}

fn perturbed(m: &Model, shift: &[f64]) -> ParameterSet {
    let mut p = m.initial_parameters();
    for (a, s) in p.alpha.iter_mut().zip(shift.iter().cycle()) {
        *a += s;
    }
    p
}

fn series() -> impl Strategy<Value = Vec<(f64, Option<f64>)>> {
    prop::collection::vec((-1.0f64..1.0, prop::option::weighted(0.85, -4.0f64..4.0)), 2..15)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tpm_rows_are_stochastic_and_respect_zeros(
        a in series(),
        shift in prop::collection::vec(-3.0f64..3.0, 1..20),
    ) {
        let rows: Vec<_> = a.iter().map(|&(x, z)| ("s".to_string(), x, z)).collect();
        let m = build(&rows);
        let p = perturbed(&m, &shift);
        let eta = m.eta_all(&p);
        for t in 0..rows.len() {
            let g = m.tpm_at(&eta, t);
            prop_assert_eq!(g[2], 0.0);
            for i in 0..3 {
                let row = &g[3 * i..3 * i + 3];
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loglik_ignores_series_order(
        a in series(),
        b in series(),
        shift in prop::collection::vec(-1.0f64..1.0, 1..20),
    ) {
        let tag = |id: &str, s: &[(f64, Option<f64>)]| -> Vec<(String, f64, Option<f64>)> {
            s.iter().map(|&(x, z)| (id.to_string(), x, z)).collect()
        };
        let ab = [tag("a", &a), tag("b", &b)].concat();
        let ba = [tag("b", &b), tag("a", &a)].concat();
        let (m1, m2) = (build(&ab), build(&ba));
        let l1 = forward_loglik(&m1, &perturbed(&m1, &shift)).unwrap();
        let l2 = forward_loglik(&m2, &perturbed(&m2, &shift)).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-10 * l1.abs().max(1.0), "{} vs {}", l1, l2);
    }

    #[test]
    fn state_probabilities_are_distributions(
        a in series(),
        shift in prop::collection::vec(-2.0f64..2.0, 1..20),
    ) {
        let rows: Vec<_> = a.iter().map(|&(x, z)| ("s".to_string(), x, z)).collect();
        let m = build(&rows);
        for r in state_probs(&m, &perturbed(&m, &shift)).unwrap() {
            prop_assert!(r.iter().all(|&v| (-1e-15..=1.0 + 1e-12).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_file_round_trips(
        mu in prop::collection::vec(-10.0f64..10.0, 3),
        sd in prop::collection::vec(0.01f64..10.0, 3),
        stay in prop::collection::vec(0.05f64..0.95, 3),
    ) {
        let mut file = SpecFile::parse(SPEC).unwrap();
        file.spec.observations[0].init = vec![mu, sd];
        let k = 3;
        let mut tpm = vec![0.0; k * k];
        for i in 0..k {
            tpm[i * k + i] = stay[i];
            let others: Vec<usize> = (0..k).filter(|&j| j != i && !(i == 0 && j == 2)).collect();
            for &j in &others {
                tpm[i * k + j] = (1.0 - stay[i]) / others.len() as f64;
            }
        }
        file.spec.hidden.tpm0 = tpm;
        let mut back = SpecFile::parse(&file.to_toml().unwrap()).unwrap();
        // rows are renormalized on parsing
        for (a, b) in back.spec.hidden.tpm0.iter().zip(&file.spec.hidden.tpm0) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        back.spec.hidden.tpm0 = file.spec.hidden.tpm0.clone();
        prop_assert_eq!(back, file);
    }
}
