//! Derivative-free optimizers used by the variance-component estimators:
//! bounded Brent minimization for scalars and Nelder-Mead for small
//! parameter vectors.

const GOLDEN_RATIO: f64 = 0.381_966_011_250_105_1; // (3 - sqrt(5)) / 2

/// Minimize `f` on `[lo, hi]` with Brent's method (golden section with
/// parabolic interpolation). Returns the argmin.
pub fn brent_min<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> f64 {
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    if a == b {
        return a;
    }
    let mut x = a + GOLDEN_RATIO * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabolic fit through (v, fv), (w, fw), (x, fx).
            let r = (x - w) * (fx - fv);
            let q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            let mut q2 = 2.0 * (q - r);
            if q2 > 0.0 {
                p = -p;
            }
            q2 = q2.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q2 * e_prev).abs() && p > q2 * (a - x) && p < q2 * (b - x) {
                d = p / q2;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN_RATIO * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    x
}

/// Nelder-Mead simplex result.
#[derive(Debug, Clone)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub fmin: f64,
    pub converged: bool,
    pub n_eval: usize,
    /// Best objective value after each accepted improvement, non-increasing.
    pub best_trace: Vec<f64>,
}

/// Nelder-Mead with a single restart from the incumbent when the first pass
/// stalls without meeting the spread tolerance.
pub struct NelderMead {
    pub ftol: f64,
    pub max_iter: usize,
    pub init_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { ftol: 1e-6, max_iter: 500, init_step: 0.5 }
    }
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> NmResult {
        let mut n_eval = 0usize;
        let mut trace = Vec::new();
        let mut eval = |x: &[f64], n_eval: &mut usize| -> f64 {
            *n_eval += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut best_x = x0.to_vec();
        let mut best_f = eval(x0, &mut n_eval);
        trace.push(best_f);
        let mut converged = false;

        for round in 0..2 {
            let step = if round == 0 { self.init_step } else { self.init_step * 0.2 };
            let (x, fx, ok) =
                self.run_simplex(&mut eval, &mut n_eval, &best_x, step, &mut trace, best_f);
            if fx < best_f {
                best_f = fx;
                best_x = x;
            }
            if ok {
                converged = true;
                break;
            }
        }
        NmResult { x: best_x, fmin: best_f, converged, n_eval, best_trace: trace }
    }

    fn run_simplex<E: FnMut(&[f64], &mut usize) -> f64>(
        &self,
        eval: &mut E,
        n_eval: &mut usize,
        x0: &[f64],
        step: f64,
        trace: &mut Vec<f64>,
        mut best_seen: f64,
    ) -> (Vec<f64>, f64, bool) {
        let dim = x0.len();
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        simplex.push(x0.to_vec());
        for i in 0..dim {
            let mut v = x0.to_vec();
            v[i] += step;
            simplex.push(v);
        }
        let mut fvals: Vec<f64> = simplex.iter().map(|v| eval(v, n_eval)).collect();

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut converged = false;
        for _ in 0..self.max_iter {
            let mut order: Vec<usize> = (0..=dim).collect();
            order.sort_by(|&i, &j| fvals[i].partial_cmp(&fvals[j]).unwrap());
            let perm: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
            let permf: Vec<f64> = order.iter().map(|&i| fvals[i]).collect();
            simplex = perm;
            fvals = permf;

            if fvals[0] < best_seen {
                best_seen = fvals[0];
                trace.push(best_seen);
            }
            let spread = fvals[dim] - fvals[0];
            if spread.abs() < self.ftol && fvals[0].is_finite() {
                converged = true;
                break;
            }

            // Centroid of all but the worst point.
            let mut centroid = vec![0.0; dim];
            for v in simplex.iter().take(dim) {
                for (c, &x) in centroid.iter_mut().zip(v) {
                    *c += x / dim as f64;
                }
            }
            let worst = simplex[dim].clone();
            let reflect: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + alpha * (c - w))
                .collect();
            let fr = eval(&reflect, n_eval);

            if fr < fvals[0] {
                let expand: Vec<f64> = centroid
                    .iter()
                    .zip(&worst)
                    .map(|(c, w)| c + gamma * (c - w))
                    .collect();
                let fe = eval(&expand, n_eval);
                if fe < fr {
                    simplex[dim] = expand;
                    fvals[dim] = fe;
                } else {
                    simplex[dim] = reflect;
                    fvals[dim] = fr;
                }
            } else if fr < fvals[dim - 1] {
                simplex[dim] = reflect;
                fvals[dim] = fr;
            } else {
                let contract: Vec<f64> = centroid
                    .iter()
                    .zip(&worst)
                    .map(|(c, w)| c + rho * (w - c))
                    .collect();
                let fc = eval(&contract, n_eval);
                if fc < fvals[dim] {
                    simplex[dim] = contract;
                    fvals[dim] = fc;
                } else {
                    // Shrink towards the best vertex.
                    let best = simplex[0].clone();
                    for i in 1..=dim {
                        for (x, &b) in simplex[i].iter_mut().zip(&best) {
                            *x = b + sigma * (*x - b);
                        }
                        fvals[i] = eval(&simplex[i].clone(), n_eval);
                    }
                }
            }
        }
        let mut best_i = 0;
        for i in 1..=dim {
            if fvals[i] < fvals[best_i] {
                best_i = i;
            }
        }
        if fvals[best_i] < best_seen {
            trace.push(fvals[best_i]);
        }
        (simplex[best_i].clone(), fvals[best_i], converged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_quadratic_minimum() {
        let xmin = brent_min(|x| (x - 1.7).powi(2) + 3.0, -10.0, 10.0, 1e-10, 200);
        assert!((xmin - 1.7).abs() < 1e-7);
    }

    #[test]
    fn brent_respects_bounds() {
        // Minimum outside the interval: should return the boundary region.
        let xmin = brent_min(|x| x, 2.0, 5.0, 1e-10, 200);
        assert!((xmin - 2.0).abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let nm = NelderMead { ftol: 1e-12, max_iter: 4000, init_step: 0.5 };
        let res = nm.minimize(
            |v| {
                let (x, y) = (v[0], v[1]);
                (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
            },
            &[-1.2, 1.0],
        );
        assert!(res.fmin < 1e-8, "fmin = {}", res.fmin);
        assert!((res.x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn nelder_mead_trace_is_monotone() {
        let nm = NelderMead::default();
        let res = nm.minimize(|v| v.iter().map(|x| x * x).sum(), &[3.0, -4.0, 5.0]);
        for w in res.best_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(res.converged);
    }
}
