//! Derivative-free Nelder-Mead simplex minimizer.
//!
//! Used by the GARCH and GPD likelihood fits; callers handle parameter
//! constraints by optimizing over unconstrained transforms.

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub fmin: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct NelderMead {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            initial_step: 0.25,
        }
    }
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> SimplexResult {
        let n = x0.len();
        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += if v[i].abs() > 1e-8 {
                self.initial_step * v[i].abs()
            } else {
                self.initial_step
            };
            simplex.push(v);
        }
        let mut fvals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

        let mut iter = 0;
        let converged = loop {
            if iter >= self.max_iter {
                break false;
            }
            iter += 1;

            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| fvals[a].total_cmp(&fvals[b]));
            let best = order[0];
            let worst = order[n];
            let second_worst = order[n - 1];

            // convergence on simplex diameter in transformed space
            let diameter = simplex
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&simplex[best])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0f64, f64::max);
            if diameter < self.tol {
                break true;
            }

            // centroid of all but the worst
            let mut centroid = vec![0.0; n];
            for (i, v) in simplex.iter().enumerate() {
                if i == worst {
                    continue;
                }
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }

            let reflect: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + alpha * (c - w))
                .collect();
            let f_reflect = f(&reflect);

            if f_reflect < fvals[best] {
                let expand: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[worst])
                    .map(|(c, w)| c + gamma * (c - w))
                    .collect();
                let f_expand = f(&expand);
                if f_expand < f_reflect {
                    simplex[worst] = expand;
                    fvals[worst] = f_expand;
                } else {
                    simplex[worst] = reflect;
                    fvals[worst] = f_reflect;
                }
            } else if f_reflect < fvals[second_worst] {
                simplex[worst] = reflect;
                fvals[worst] = f_reflect;
            } else {
                let contract: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[worst])
                    .map(|(c, w)| c + rho * (w - c))
                    .collect();
                let f_contract = f(&contract);
                if f_contract < fvals[worst] {
                    simplex[worst] = contract;
                    fvals[worst] = f_contract;
                } else {
                    // shrink toward the best vertex
                    let best_point = simplex[best].clone();
                    for i in 0..=n {
                        if i == best {
                            continue;
                        }
                        for (x, b) in simplex[i].iter_mut().zip(&best_point) {
                            *x = b + sigma * (*x - b);
                        }
                        fvals[i] = f(&simplex[i]);
                    }
                }
            }
        };

        let best = (0..=n)
            .min_by(|&a, &b| fvals[a].total_cmp(&fvals[b]))
            .unwrap();
        SimplexResult {
            x: simplex[best].clone(),
            fmin: fvals[best],
            iterations: iter,
            converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let r = NelderMead::default().minimize(
            |x| (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2),
            &[0.0, 0.0],
        );
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-6);
        assert!((r.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let r = NelderMead {
            max_iter: 5000,
            ..Default::default()
        }
        .minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
        );
        assert!((r.x[0] - 1.0).abs() < 1e-5);
        assert!((r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn reports_non_convergence() {
        let r = NelderMead {
            max_iter: 3,
            ..Default::default()
        }
        .minimize(|x| x[0] * x[0], &[10.0]);
        assert!(!r.converged);
    }
}
