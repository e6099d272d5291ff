//! Limited-memory BFGS for the smooth ADMM subproblem.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LbfgsOutcome {
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes a smooth function in place. `f` writes the gradient into its
/// second argument and returns the value. Stops when `‖∇f‖∞ ≤ tol`.
///
/// `precondition`, when given, applies an approximate inverse Hessian in
/// place and replaces the usual scaled-identity starting matrix of the
/// two-loop recursion. Convergence then also requires the preconditioned
/// step to fall below `step_tol`, since a small gradient along a direction of
/// tiny curvature can still leave `x` far from the minimizer.
pub(crate) fn minimize<F>(
    mut f: F,
    x: &mut [f64],
    tol: f64,
    max_iters: usize,
    memory: usize,
    precondition: Option<(&dyn Fn(&mut [f64]), f64)>,
) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x.len();
    let mut g = vec![0.0; dim];
    let mut value = f(x, &mut g);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut trial = vec![0.0; dim];
    let mut g_trial = vec![0.0; dim];
    let mut alphas = vec![0.0; memory];
    let settled = |g: &[f64]| {
        max_abs(g) <= tol
            && precondition.map_or(true, |(apply, step_tol)| {
                let mut step = g.to_vec();
                apply(&mut step);
                max_abs(&step) <= step_tol
            })
    };

    for iter in 0..max_iters {
        if settled(&g) {
            return LbfgsOutcome {
                iterations: iter,
                converged: true,
            };
        }
        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alphas[i] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        match precondition {
            Some((apply, _)) => apply(&mut d),
            None => {
                let gamma = match pairs.back() {
                    Some((s, y, _)) => dot(s, y) / dot(y, y),
                    None => 1.0 / max_abs(&g).max(1.0),
                };
                d.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (alphas[i] - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v / max_abs(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..dim {
                trial[i] = x[i] + step * d[i];
            }
            let v = f(&trial, &mut g_trial);
            // Near the optimum the decrease drops below rounding in `f`;
            // the approximate Wolfe test accepts a step on the slope alone.
            let armijo = v <= value + 1e-4 * step * slope;
            let approx_wolfe = v <= value + 1e-12 * value.abs() && dot(&g_trial, &d) <= -0.8 * slope;
            if v.is_finite() && (armijo || approx_wolfe) {
                let s: Vec<f64> = (0..dim).map(|i| trial[i] - x[i]).collect();
                let y: Vec<f64> = (0..dim).map(|i| g_trial[i] - g[i]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                    if pairs.len() == memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s, y, 1.0 / sy));
                }
                x.copy_from_slice(&trial);
                g.copy_from_slice(&g_trial);
                value = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return LbfgsOutcome {
                iterations: iter + 1,
                converged: settled(&g),
            };
        }
    }
    LbfgsOutcome {
        iterations: max_iters,
        converged: settled(&g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let out = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &mut x,
            1e-10,
            500,
            10,
            None,
        );
        assert!(out.converged);
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8);
    }
}
