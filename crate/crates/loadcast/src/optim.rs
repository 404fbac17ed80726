//! Derivative-free simplex minimization (Nelder-Mead) used by the covariance
//! fits. Works in an unconstrained transformed parameter space; objective
//! values of `NaN` or infinity are treated as worst-possible, which lets the
//! caller encode constraint violations (for example a non-positive-definite
//! kernel) without special cases here.

/// Stopping controls for the simplex search.
#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Hard cap on iterations (one reflect/expand/contract/shrink step each).
    pub max_iter: usize,
    /// Relative spread of objective values across the simplex at which the
    /// search is declared converged.
    pub rel_tol: f64,
    /// Initial simplex edge length along each coordinate.
    pub step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iter: 500,
            rel_tol: 1e-8,
            step: 0.25,
        }
    }
}

/// Outcome of one simplex run.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Relative objective spread across the simplex at termination.
    pub final_spread: f64,
}

fn sanitize(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

/// Minimize `f` from `x0` with the standard Nelder-Mead coefficients
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &SimplexOptions,
) -> SimplexResult {
    let n = x0.len();
    assert!(n > 0, "nelder_mead needs at least one dimension");
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        sanitize(f(x))
    };

    // Initial simplex: x0 plus a step along each coordinate.
    let mut verts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    verts.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.step;
        verts.push(v);
    }
    let mut fv: Vec<f64> = verts.iter().map(|v| eval(v, &mut evals)).collect();

    let mut iterations = 0usize;
    let mut converged = false;
    let mut spread = f64::INFINITY;
    while iterations < opts.max_iter {
        // Order vertices by objective.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        spread = relative_spread(fv[best], fv[worst]);
        if spread <= opts.rel_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for &i in order.iter().take(n) {
            for j in 0..n {
                centroid[j] += verts[i][j];
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }

        let reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + (centroid[j] - verts[worst][j]))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < fv[best] {
            let expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - verts[worst][j]))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            if f_expand < f_reflect {
                verts[worst] = expand;
                fv[worst] = f_expand;
            } else {
                verts[worst] = reflect;
                fv[worst] = f_reflect;
            }
        } else if f_reflect < fv[second_worst] {
            verts[worst] = reflect;
            fv[worst] = f_reflect;
        } else {
            // Contract toward the better of (worst, reflected).
            let worst_v = verts[worst].clone();
            let (toward, f_toward) = if f_reflect < fv[worst] {
                (&reflect, f_reflect)
            } else {
                (&worst_v, fv[worst])
            };
            let contract: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 0.5 * (toward[j] - centroid[j]))
                .collect();
            let f_contract = eval(&contract, &mut evals);
            if f_contract < f_toward {
                verts[worst] = contract;
                fv[worst] = f_contract;
            } else {
                // Shrink everything toward the best vertex.
                let best_v = verts[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    for j in 0..n {
                        verts[i][j] = best_v[j] + 0.5 * (verts[i][j] - best_v[j]);
                    }
                    fv[i] = eval(&verts[i], &mut evals);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    SimplexResult {
        x: verts[best].clone(),
        f: fv[best],
        iterations,
        evaluations: evals,
        converged,
        final_spread: spread,
    }
}

fn relative_spread(f_best: f64, f_worst: f64) -> f64 {
    if !f_best.is_finite() || !f_worst.is_finite() {
        return f64::INFINITY;
    }
    (f_worst - f_best).abs() / (f_best.abs() + 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn minimizes_shifted_quadratic() {
        let r = nelder_mead(
            |x| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2) + 2.0,
            &[0.0, 0.0],
            &SimplexOptions::default(),
        );
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.5, epsilon = 1e-4);
        assert_abs_diff_eq!(r.x[1], -0.5, epsilon = 1e-4);
        assert_abs_diff_eq!(r.f, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn minimizes_rosenbrock_from_standard_start() {
        let r = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &SimplexOptions {
                max_iter: 2000,
                ..Default::default()
            },
        );
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn walks_out_of_infeasible_regions() {
        // Objective is infinite left of x = 0.2; the simplex must still find
        // the minimum at 0.5 starting from a partially infeasible simplex.
        let r = nelder_mead(
            |x| {
                if x[0] < 0.2 {
                    f64::INFINITY
                } else {
                    (x[0] - 0.5).powi(2)
                }
            },
            &[0.21, 0.0],
            &SimplexOptions::default(),
        );
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 0.5, epsilon = 1e-4);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let r = nelder_mead(
            |x| (x[0] - 4.0).powi(2),
            &[0.0, 0.0],
            &SimplexOptions {
                max_iter: 2,
                ..Default::default()
            },
        );
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
    }
}
