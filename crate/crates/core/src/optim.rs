//! Limited-memory quasi-Newton descent with halving backtracking, shared by
//! the motion solver and the classifier trainers.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::DisplacementField;

/// The few vector operations the optimizer needs.
pub(crate) trait Vector: Clone {
    fn axpy(&mut self, a: f64, other: &Self);
    fn scale(&mut self, k: f64);
    fn dot(&self, other: &Self) -> f64;
    fn all_finite(&self) -> bool;
}

impl Vector for DisplacementField {
    fn axpy(&mut self, a: f64, other: &Self) {
        DisplacementField::axpy(self, a, other)
    }
    fn scale(&mut self, k: f64) {
        DisplacementField::scale(self, k)
    }
    fn dot(&self, other: &Self) -> f64 {
        DisplacementField::dot(self, other)
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl Vector for Vec<f64> {
    fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.iter_mut().zip(other) {
            *x += a * y;
        }
    }
    fn scale(&mut self, k: f64) {
        self.iter_mut().for_each(|x| *x *= k);
    }
    fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

const MEMORY: usize = 8;
const MAX_HALVINGS: usize = 40;

/// Minimizes `eval` starting from `x`.
///
/// `eval(x, true)` must return the objective and its gradient, `eval(x,
/// false)` the objective alone. The first step (and any step after a
/// curvature reset) moves `first_step` times the negative gradient; later
/// steps start from the quasi-Newton unit step. A trial point is accepted
/// only if it strictly lowers the objective, otherwise the step halves.
/// Stops after `max_iters` iterations or when the relative decrease of an
/// accepted step falls below `rel_tol`. Returns the accepted objective values
/// (starting with the initial one) and the iteration count.
pub(crate) fn descend<V, F>(x: &mut V, first_step: f64, max_iters: usize, rel_tol: f64, mut eval: F) -> Result<(Vec<f64>, usize)>
where
    V: Vector,
    F: FnMut(&V, bool) -> (f64, Option<V>),
{
    let (mut f, grad) = eval(x, true);
    if !f.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            context: None,
        });
    }
    let mut grad = grad.expect("gradient requested");
    let mut trace = vec![f];
    let mut history: VecDeque<(V, V, f64)> = VecDeque::with_capacity(MEMORY);
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        if f == 0.0 || grad.dot(&grad) == 0.0 {
            break;
        }
        let (mut direction, mut step) = match lbfgs_direction(&grad, &history) {
            Some(d) => (d, 1.0),
            None => {
                history.clear();
                let mut d = grad.clone();
                d.scale(-1.0);
                (d, first_step)
            }
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut trial = x.clone();
            trial.axpy(step, &direction);
            let (ft, _) = eval(&trial, false);
            if !ft.is_finite() {
                return Err(Error::Diverged {
                    iteration: iters,
                    context: None,
                });
            }
            if ft < f {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((next, ft)) = accepted else {
            if history.is_empty() {
                break;
            }
            // Stale curvature; retry from steepest descent.
            history.clear();
            continue;
        };
        let decrease = (f - ft) / f.abs().max(f64::MIN_POSITIVE);
        let (_, g_next) = eval(&next, true);
        let g_next = g_next.expect("gradient requested");
        direction.scale(step);
        let mut y = g_next.clone();
        y.axpy(-1.0, &grad);
        let sy = direction.dot(&y);
        if sy > 0.0 && sy > 1e-12 * direction.dot(&direction).sqrt() * y.dot(&y).sqrt() {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((direction, y, 1.0 / sy));
        }
        *x = next;
        f = ft;
        grad = g_next;
        trace.push(f);
        if decrease < rel_tol {
            break;
        }
    }
    Ok((trace, iters))
}

/// Two-loop recursion; `None` when there is no usable curvature history or
/// the result is not a descent direction.
fn lbfgs_direction<V: Vector>(grad: &V, history: &VecDeque<(V, V, f64)>) -> Option<V> {
    let (s_last, y_last, _) = history.back()?;
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y);
        alphas.push(a);
    }
    let gamma = s_last.dot(y_last) / y_last.dot(y_last);
    q.scale(gamma);
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s);
    }
    q.scale(-1.0);
    if q.dot(grad) < 0.0 && q.all_finite() {
        Some(q)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = sum_i (i+1) (x_i - 1)^2
        let eval = |x: &Vec<f64>, g: bool| {
            let f = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * (v - 1.0).powi(2)).sum();
            let grad = g.then(|| x.iter().enumerate().map(|(i, v)| 2.0 * (i + 1) as f64 * (v - 1.0)).collect());
            (f, grad)
        };
        let mut x = vec![0.0; 5];
        let (trace, _) = descend(&mut x, 0.1, 200, 1e-14, eval).unwrap();
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-5), "{x:?}");
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn reports_divergence() {
        let mut x = vec![1.0];
        let err = descend(&mut x, 1.0, 10, 0.0, |x: &Vec<f64>, g| {
            let f = if x[0] > 1.0 { f64::NAN } else { -x[0] };
            (f, g.then(|| vec![-1.0]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 1, .. }));
    }
}
