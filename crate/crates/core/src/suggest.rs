//! Starting values for observation parameters from K-means clustering.
//!
//! Rows with every response present are clustered on standardized columns
//! (angles enter as their cosine and sine). Each cluster's moments are mapped
//! to the parameters of the variable's family, and clusters are ordered by
//! the mean of the first clustering column.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::dists::Family;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Number of K-means restarts.
pub const RESTARTS: usize = 10;
const MAX_LLOYD: usize = 200;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Total within-cluster sum of squares.
    pub wss: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_once<R: Rng>(x: &[Vec<f64>], k: usize, rng: &mut R) -> KMeans {
    let n = x.len();
    // k-means++ seeding
    let mut centers = vec![x[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(x[next].clone());
        for (i, p) in x.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    let dim = x[0].len();
    let mut labels = vec![0; n];
    for it in 0..MAX_LLOYD {
        let mut changed = false;
        for (i, p) in x.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = dist2(p, ctr);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if labels[i] != best || it == 0 {
                changed |= labels[i] != best;
                labels[i] = best;
            }
        }
        if !changed && it > 0 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let wss = x.iter().zip(&labels).map(|(p, &l)| dist2(p, &centers[l])).sum();
    KMeans { centers, labels, wss }
}

/// Lloyd's algorithm with k-means++ seeding, best of [`RESTARTS`] seeded runs.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::Model(format!("at least 2 states are required, got {k}")));
    }
    let mut distinct: Vec<&Vec<f64>> = x.iter().collect();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Data(format!("only {} distinct data points for {k} clusters", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..RESTARTS {
        let r = kmeans_once(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| r.wss < b.wss) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    // population form, so replicating the data leaves it unchanged
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Inverse of `A(kappa) = I1(kappa) / I0(kappa)` (piecewise approximation).
fn a1_inverse(r: f64) -> f64 {
    if r < 0.53 {
        2.0 * r + r.powi(3) + 5.0 * r.powi(5) / 6.0
    } else if r < 0.85 {
        -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    } else {
        1.0 / (r.powi(3) - 4.0 * r.powi(2) + 3.0 * r)
    }
}

/// Natural-scale parameters of `family` from one cluster's values.
fn moments(family: Family, v: &[f64], init: &[f64], scale: f64) -> Vec<f64> {
    let tiny = 1e-3 * scale.max(1e-8);
    let m = mean(v);
    let s = sd(v).max(tiny);
    match family {
        Family::Norm => vec![m, s],
        Family::Gamma2 => vec![m.max(tiny), s],
        Family::Pois => vec![m.max(1e-3)],
        Family::Exp => vec![1.0 / m.max(1e-8)],
        Family::Beta => {
            let m = m.clamp(1e-3, 1.0 - 1e-3);
            let var = (s * s).min(m * (1.0 - m) * 0.99);
            let c = m * (1.0 - m) / var - 1.0;
            vec![m * c, (1.0 - m) * c]
        }
        Family::Binom => {
            let size = init[0];
            vec![size, (m / size.max(1.0)).clamp(1e-3, 1.0 - 1e-3)]
        }
        Family::Nbinom => {
            let m = m.max(1e-3);
            let size = if s * s > m { m * m / (s * s - m) } else { 100.0 };
            vec![size, size / (size + m)]
        }
        Family::Vm | Family::Wrpcauchy => {
            let c = mean(&v.iter().map(|a| a.cos()).collect::<Vec<_>>());
            let sn = mean(&v.iter().map(|a| a.sin()).collect::<Vec<_>>());
            let r = (c * c + sn * sn).sqrt().clamp(1e-3, 0.99);
            let mu = sn.atan2(c).clamp(-std::f64::consts::PI + 1e-6, std::f64::consts::PI - 1e-6);
            if family == Family::Vm {
                vec![mu, a1_inverse(r)]
            } else {
                vec![mu, r]
            }
        }
        Family::Zipois => {
            let zero = v.iter().filter(|x| **x == 0.0).count() as f64 / v.len() as f64;
            let pos: Vec<f64> = v.iter().copied().filter(|x| *x > 0.0).collect();
            let rate = if pos.is_empty() { 1e-3 } else { mean(&pos).max(1e-3) };
            vec![rate, (zero - (-rate).exp()).clamp(0.01, 0.99)]
        }
        Family::Zigamma2 => {
            let zero = v.iter().filter(|x| **x == 0.0).count() as f64 / v.len() as f64;
            let pos: Vec<f64> = v.iter().copied().filter(|x| *x > 0.0).collect();
            let (pm, ps) = if pos.is_empty() { (tiny, tiny) } else { (mean(&pos).max(tiny), sd(&pos).max(tiny)) };
            vec![pm, ps, zero.clamp(0.01, 0.99)]
        }
    }
}

/// Suggested initial values `[var][param][state]` for every observation
/// variable of `spec`, from K-means on the responses of `d`.
pub fn suggest_initial(spec: &ModelSpec, d: &Dataset, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = spec.n_states();
    if k < 2 {
        return Err(Error::Model(format!("at least 2 states are required, got {k}")));
    }
    let cols: Vec<&[Option<f64>]> = spec.observations.iter().map(|o| d.response(&o.name)).collect::<Result<_>>()?;
    let rows: Vec<usize> = (0..d.n_rows()).filter(|&r| cols.iter().all(|c| c[r].is_some())).collect();
    if rows.len() < k {
        return Err(Error::Data(format!("only {} complete rows for {k} states", rows.len())));
    }
    // standardized features
    let mut features: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    let mut scales = Vec::new();
    for (o, c) in spec.observations.iter().zip(&cols) {
        let raw: Vec<f64> = rows.iter().map(|&r| c[r].unwrap()).collect();
        let derived: Vec<Vec<f64>> = if o.family.is_circular() {
            vec![raw.iter().map(|a| a.cos()).collect(), raw.iter().map(|a| a.sin()).collect()]
        } else {
            vec![raw.clone()]
        };
        scales.push(sd(&raw));
        for col in derived {
            let m = mean(&col);
            let s = sd(&col);
            let s = if s > 0.0 { s } else { 1.0 };
            for (f, v) in features.iter_mut().zip(&col) {
                f.push((v - m) / s);
            }
        }
    }
    let km = kmeans(&features, k, seed)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| km.centers[*a][0].total_cmp(&km.centers[*b][0]));
    let mut out = Vec::new();
    for (v, (o, c)) in spec.observations.iter().zip(&cols).enumerate() {
        let init_col: Vec<f64> = o.init.iter().map(|p| p[0]).collect();
        let per_state: Vec<Vec<f64>> = order
            .iter()
            .map(|&cl| {
                let vals: Vec<f64> =
                    rows.iter().zip(&km.labels).filter(|(_, l)| **l == cl).map(|(&r, _)| c[r].unwrap()).collect();
                moments(o.family, &vals, &init_col, scales[v])
            })
            .collect();
        // transpose to [param][state]
        out.push((0..o.family.n_params()).map(|p| per_state.iter().map(|s| s[p]).collect()).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Formula;
    use crate::hidden::ChainSpec;
    use crate::model::ObsSpec;
    use indexmap::IndexMap;
    use rand_distr::{Distribution, Normal};

    fn data(values: Vec<f64>) -> Dataset {
        let mut r = IndexMap::new();
        r.insert("z".to_string(), values.into_iter().map(Some).collect());
        Dataset::new(None, r, IndexMap::new(), None).unwrap()
    }

    fn spec(k: usize) -> ModelSpec {
        let hidden = ChainSpec::new(k.max(2), Formula::intercept_only()).unwrap();
        let mut s = ModelSpec::new(hidden, vec![ObsSpec::new("z", Family::Norm, vec![vec![0.0; k], vec![1.0; k]])]);
        s.hidden.n_states = k;
        s
    }

    fn two_clusters() -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..400).map(|i| n.sample(&mut rng) + if i % 2 == 0 { -5.0 } else { 5.0 }).collect()
    }

    #[test]
    fn separated_clusters() {
        let s = suggest_initial(&spec(2), &data(two_clusters()), 1).unwrap();
        assert!((s[0][0][0] + 5.0).abs() < 0.5 && (s[0][0][1] - 5.0).abs() < 0.5, "{:?}", s);
        assert!((s[0][1][0] - 1.0).abs() < 0.3);
    }

    #[test]
    fn duplication_invariance() {
        let v = two_clusters();
        let mut dup = v.clone();
        dup.extend_from_slice(&v);
        let a = suggest_initial(&spec(2), &data(v), 1).unwrap();
        let b = suggest_initial(&spec(2), &data(dup), 1).unwrap();
        for (x, y) in a[0].iter().flatten().zip(b[0].iter().flatten()) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn errors() {
        assert!(suggest_initial(&spec(1), &data(two_clusters()), 1).is_err());
        assert!(suggest_initial(&spec(3), &data(vec![1.0, 1.0, 2.0, 2.0]), 1).is_err());
    }

    #[test]
    fn circular_and_count_families_land_in_their_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let angles: Vec<f64> = (0..300).map(|i| if i % 2 == 0 { rng.random_range(-0.3..0.3) } else { rng.random_range(2.5..3.1) }).collect();
        let hidden = ChainSpec::new(2, Formula::intercept_only()).unwrap();
        for fam in [Family::Vm, Family::Wrpcauchy] {
            let spec = ModelSpec::new(hidden.clone(), vec![ObsSpec::new("z", fam, vec![vec![0.0, 0.0], vec![0.5, 0.5]])]);
            let s = suggest_initial(&spec, &data(angles.clone()), 2).unwrap();
            for j in 0..2 {
                fam.validate(&[s[0][0][j], s[0][1][j]]).unwrap();
            }
        }
        let counts: Vec<f64> = (0..300).map(|i| if i % 2 == 0 { (i % 3) as f64 } else { 20.0 + (i % 7) as f64 }).collect();
        for fam in [Family::Pois, Family::Nbinom, Family::Zipois] {
            let init = if fam == Family::Pois { vec![vec![1.0, 5.0]] } else { vec![vec![1.0, 5.0], vec![0.5, 0.5]] };
            let spec = ModelSpec::new(hidden.clone(), vec![ObsSpec::new("z", fam, init)]);
            let s = suggest_initial(&spec, &data(counts.clone()), 2).unwrap();
            for j in 0..2 {
                let w: Vec<f64> = s[0].iter().map(|p| p[j]).collect();
                fam.validate(&w).unwrap();
            }
        }
    }
}
