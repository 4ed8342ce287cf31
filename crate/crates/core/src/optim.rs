//! Derivative-free and quasi-Newton minimizers, and finite-difference derivatives.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct OptOptions {
    pub max_iter: usize,
    /// Relative tolerance on the objective.
    pub reltol: f64,
}

impl Default for OptOptions {
    fn default() -> Self {
        OptOptions { max_iter: 1000, reltol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub trace: Vec<f64>,
    pub message: String,
}

/// Treat non-finite objective values as `+inf` so they are never preferred.
fn clean(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder-Mead simplex search. Stops when the spread of simplex values
/// satisfies `f_high - f_low <= reltol * (|f_low| + reltol)`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &OptOptions) -> OptResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };
    if n == 0 {
        let v = eval(x0, &mut evals);
        return OptResult {
            x: vec![],
            value: v,
            iterations: 0,
            evaluations: evals,
            converged: true,
            trace: vec![v],
            message: "no free parameters".into(),
        };
    }
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += 0.1 * x0[i].abs().max(1.0);
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let (lo, hi) = (values[0], values[n]);
        trace.push(lo);
        if hi.is_finite() && hi - lo <= opts.reltol * (lo.abs() + opts.reltol) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut centroid = vec![0.0; n];
        for x in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let x: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(a, b)| a + 0.5 * (b - a)).collect();
                    values[i] = eval(&x, &mut evals);
                    simplex[i] = x;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    let value = values[best];
    if trace.last() != Some(&value) {
        trace.push(value);
    }
    OptResult {
        x: simplex[best].clone(),
        value,
        iterations,
        evaluations: evals,
        converged,
        trace,
        message: if converged { "converged".into() } else { "iteration limit reached".into() },
    }
}

/// Step used for central differences at `x`.
pub fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], rel: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i], rel);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Like [`fd_gradient`] but falls back to a one-sided difference from `fx`
/// where one side of the central difference is not finite.
pub fn fd_gradient_guarded<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], fx: f64, rel: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i], rel);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - fx) / h,
                (false, true) => (fx - fm) / h,
                (false, false) => f64::NAN,
            }
        })
        .collect()
}

/// Central-difference Hessian from function values.
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], rel: f64) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| fd_step(*v, rel)).collect();
    let f0 = f(x);
    let mut out = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        out[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut at = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// BFGS with central finite-difference gradients and a backtracking line search.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &OptOptions) -> OptResult {
    const GRAD_REL: f64 = 1e-5;
    let n = x0.len();
    let mut evals = 0;
    let mut fx_eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };
    let mut x = x0.to_vec();
    let mut fx = fx_eval(&x, &mut evals);
    let mut trace = vec![fx];
    if n == 0 || !fx.is_finite() {
        return OptResult {
            x,
            value: fx,
            iterations: 0,
            evaluations: evals,
            converged: n == 0,
            trace,
            message: if n == 0 { "no free parameters".into() } else { "non-finite objective".into() },
        };
    }
    let mut grad = {
        let mut g = |y: &[f64]| fx_eval(y, &mut evals);
        fd_gradient_guarded(&mut g, &x, fx, GRAD_REL)
    };
    let mut binv = DMatrix::<f64>::identity(n, n);
    let gnorm0 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm0 > 0.0 {
        binv *= 1.0 / gnorm0.max(1.0);
    }
    let mut iterations = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    let mut fails = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let g = DVector::from_column_slice(&grad);
        let mut dir = -(&binv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            binv = DMatrix::identity(n, n) * (1.0 / g.norm().max(1.0));
            dir = -(&binv * &g);
            slope = dir.dot(&g);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let fc = fx_eval(&cand, &mut evals);
            if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            fails += 1;
            if fails >= 2 {
                if grad.iter().all(|v| v.is_finite()) {
                    converged = true;
                    message = "line search cannot improve (converged to gradient noise)".into();
                } else {
                    message = "objective is not finite around the current point".into();
                }
                break;
            }
            binv = DMatrix::identity(n, n) * (1.0 / g.norm().max(1.0));
            continue;
        };
        fails = 0;
        let gn = {
            let mut gf = |y: &[f64]| fx_eval(y, &mut evals);
            fd_gradient_guarded(&mut gf, &xn, fxn, GRAD_REL)
        };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        let rel_change = (fx - fxn).abs() / (fx.abs() + opts.reltol);
        x = xn;
        fx = fxn;
        grad = gn;
        trace.push(fx);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            binv = &a * &binv * &b + &s * s.transpose() * rho;
        }
        if rel_change < opts.reltol {
            converged = true;
            message = "converged".into();
            break;
        }
    }
    OptResult { x, value: fx, iterations, evaluations: evals, converged, trace, message }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn guarded_gradient_goes_one_sided_at_a_wall() {
        let mut f = |x: &[f64]| if x[0] > 1.0 { f64::INFINITY } else { x[0] * x[0] + 3.0 * x[1] };
        let g = fd_gradient_guarded(&mut f, &[1.0, 0.5], 1.0 + 1.5, 1e-6);
        assert!((g[0] - 2.0).abs() < 1e-5 && (g[1] - 3.0).abs() < 1e-8, "{g:?}");
        let mut wall = |_: &[f64]| f64::INFINITY;
        assert!(fd_gradient_guarded(&mut wall, &[0.0], 0.0, 1e-6)[0].is_nan());
    }

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &OptOptions { max_iter: 5000, reltol: 1e-14 });
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bfgs_finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(2) + x[0] * x[1];
        let r = bfgs(f, &[0.0, 0.0], &OptOptions::default());
        // stationary point: 2(x0-3) + x1 = 0, 20(x1+1) + x0 = 0
        let x1 = -23.0 / 19.5;
        let x0 = 3.0 - x1 / 2.0;
        assert!((r.x[0] - x0).abs() < 1e-4 && (r.x[1] - x1).abs() < 1e-4, "{:?} vs {x0} {x1}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fd_hessian_of_quadratic() {
        let mut f = |x: &[f64]| 2.0 * x[0] * x[0] + 3.0 * x[0] * x[1] + 5.0 * x[1] * x[1];
        let h = fd_hessian(&mut f, &[0.3, -0.2], 1e-4);
        assert!((h[(0, 0)] - 4.0).abs() < 1e-6 && (h[(0, 1)] - 3.0).abs() < 1e-6 && (h[(1, 1)] - 10.0).abs() < 1e-6);
    }
}
