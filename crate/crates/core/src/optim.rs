//! Box-constrained maximization by spectral projected gradient (SPG) with a
//! nonmonotone Armijo line search (Birgin, Martínez & Raydan 2000).
//!
//! Used for both hyperparameter fitting (analytic gradient) and acquisition
//! refinement (finite-difference gradient).

/// Objective returning `(value, gradient)`, or `None` where undefined.
pub trait Objective {
    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone)]
pub struct SpgOptions {
    pub max_iter: usize,
    /// Stop when the projected-gradient step is below this (sup norm).
    pub tol: f64,
    pub memory: usize,
}

impl Default for SpgOptions {
    fn default() -> Self {
        SpgOptions {
            max_iter: 200,
            tol: 1e-7,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpgResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f` over the box `[lo, hi]` starting from `x0`. Returns `None`
/// only if the objective is undefined at the (projected) start.
pub fn maximize_box<O: Objective>(
    f: &mut O,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &SpgOptions,
) -> Option<SpgResult> {
    const LAMBDA_MIN: f64 = 1e-12;
    const LAMBDA_MAX: f64 = 1e12;
    const ARMIJO: f64 = 1e-4;

    // Internally minimize φ = -f.
    let mut eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let (v, g) = f.value_grad(x)?;
        if !v.is_finite() || g.iter().any(|c| !c.is_finite()) {
            return None;
        }
        Some((-v, g.into_iter().map(|c| -c).collect()))
    };

    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut phi, mut grad) = eval(&x)?;
    let mut evaluations = 1;
    let mut history = vec![phi];

    let mut lambda = {
        let mut probe: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - g).collect();
        project(&mut probe, lo, hi);
        let norm = probe
            .iter()
            .zip(&x)
            .map(|(p, a)| (p - a).abs())
            .fold(0.0, f64::max);
        if norm > 0.0 {
            (1.0 / norm).clamp(LAMBDA_MIN, LAMBDA_MAX)
        } else {
            1.0
        }
    };

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - lambda * g).collect();
        project(&mut trial, lo, hi);
        let dir: Vec<f64> = trial.iter().zip(&x).map(|(t, a)| t - a).collect();
        if dir.iter().fold(0.0f64, |m, d| m.max(d.abs())) < opts.tol {
            break;
        }
        let slope = dot(&grad, &dir);
        let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let mut step = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            evaluations += 1;
            if let Some((p, g)) = eval(&cand) {
                if p <= reference + ARMIJO * step * slope {
                    break Some((cand, p, g));
                }
            }
            step *= 0.5;
            if step < 1e-10 {
                break None;
            }
        };
        let Some((x_new, phi_new, grad_new)) = accepted else {
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        lambda = if sy <= 0.0 {
            LAMBDA_MAX
        } else {
            (dot(&s, &s) / sy).clamp(LAMBDA_MIN, LAMBDA_MAX)
        };

        x = x_new;
        phi = phi_new;
        grad = grad_new;
        history.push(phi);
        if history.len() > opts.memory {
            history.remove(0);
        }
    }

    Some(SpgResult {
        x,
        value: -phi,
        iterations,
        evaluations,
    })
}

/// Central-difference gradient, falling back to one-sided differences at
/// the box faces.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    lo: &[f64],
    hi: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let up = (x[i] + h).min(hi[i]);
        let down = (x[i] - h).max(lo[i]);
        if up <= down {
            continue;
        }
        probe[i] = up;
        let fu = f(&probe);
        probe[i] = down;
        let fd = f(&probe);
        probe[i] = x[i];
        g[i] = (fu - fd) / (up - down);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_quadratic_interior_optimum() {
        let target = [0.3, -1.2, 2.0];
        let mut f = |x: &[f64]| {
            let v = -x
                .iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, t))| (i as f64 + 1.0) * (a - t).powi(2))
                .sum::<f64>();
            let g = x
                .iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, t))| -2.0 * (i as f64 + 1.0) * (a - t))
                .collect();
            Some((v, g))
        };
        let r = maximize_box(&mut f, &[0.0; 3], &[-5.0; 3], &[5.0; 3], &SpgOptions::default()).unwrap();
        for (a, t) in r.x.iter().zip(&target) {
            assert!((a - t).abs() < 1e-6);
        }
    }

    #[test]
    fn optimum_on_the_boundary() {
        let mut f = |x: &[f64]| Some((x[0] - x[1] * x[1], vec![1.0, -2.0 * x[1]]));
        let r = maximize_box(&mut f, &[0.2, 0.7], &[0.0, -1.0], &[1.0, 1.0], &SpgOptions::default()).unwrap();
        assert_eq!(r.x[0], 1.0);
        assert!(r.x[1].abs() < 1e-6);
        assert!((r.value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rosenbrock_converges() {
        let mut f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let ga = 2.0 * (1.0 - a) + 400.0 * a * (b - a * a);
            let gb = -200.0 * (b - a * a);
            Some((v, vec![ga, gb]))
        };
        let opts = SpgOptions { max_iter: 5000, tol: 1e-10, memory: 10 };
        let r = maximize_box(&mut f, &[-1.2, 1.0], &[-2.0; 2], &[2.0; 2], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn undefined_start_returns_none() {
        let mut f = |_: &[f64]| -> Option<(f64, Vec<f64>)> { None };
        assert!(maximize_box(&mut f, &[0.0], &[-1.0], &[1.0], &SpgOptions::default()).is_none());
    }

    #[test]
    fn fd_gradient_one_sided_at_faces() {
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = fd_gradient(&mut f, &[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 1e-6);
        assert!((g[0] - 2.0).abs() < 1e-5);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
