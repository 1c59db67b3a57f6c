//! Optimizers over flat parameter vectors: limited-memory quasi-Newton with
//! a backtracking line search, adaptive-moment descent with step decay, and
//! plain gradient descent. All are deterministic given a deterministic
//! objective.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// A differentiable objective over a flat parameter vector. `loss` is the
/// cheap value-only evaluation used by line searches.
pub trait Objective<T: Scalar> {
    fn loss_and_grad(&mut self, theta: &[T]) -> Result<(LossParts<T>, Vec<T>)>;
    fn loss(&mut self, theta: &[T]) -> Result<T>;
}

/// Loss value split into its terms: total = mse + div_weight * divergence
/// mean + l2_weight * l2 (the weighted folding happens inside the
/// objective; the parts here are the unweighted aggregates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T: Scalar> {
    pub total: T,
    pub mse: T,
    pub divergence: T,
    pub l2: T,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Loss at a line-search trial point. Numerical failures (CFL rejection, CG
/// breakdown, non-finite values) mean the trial step was too bold, not that
/// the run is broken: they count as infinite loss so the search backtracks.
fn trial_loss<T: Scalar, O: Objective<T>>(obj: &mut O, theta: &[T]) -> Result<T> {
    match obj.loss(theta) {
        Ok(v) => Ok(v),
        Err(Error::CflExceeded { .. }) | Err(Error::CgBreakdown { .. }) | Err(Error::NonFinite(_)) => {
            Ok(T::infinity())
        }
        Err(e) => Err(e),
    }
}

fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Limited-memory BFGS configuration.
#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig<T: Scalar> {
    /// Curvature pairs kept for the two-loop recursion.
    pub history: usize,
    /// Iteration budget.
    pub max_iters: usize,
    /// Stop when the gradient 2-norm falls below this.
    pub grad_tol: T,
    /// Armijo sufficient-decrease constant.
    pub c1: T,
    /// Step halvings before the line search gives up.
    pub max_backtracks: usize,
}

impl<T: Scalar> Default for LbfgsConfig<T> {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iters: 500,
            grad_tol: lit(1e-8),
            c1: lit(1e-4),
            max_backtracks: 40,
        }
    }
}

/// One accepted quasi-Newton iterate.
#[derive(Debug, Clone)]
pub struct AcceptedStep<T: Scalar> {
    pub iter: usize,
    pub parts: LossParts<T>,
    pub grad_norm: T,
    pub step_length: T,
}

/// Result of a quasi-Newton run.
#[derive(Debug, Clone)]
pub struct LbfgsRun<T: Scalar> {
    pub theta: Vec<T>,
    /// Loss parts and gradient norm at the starting point.
    pub initial: (LossParts<T>, T),
    /// Accepted iterates, in order; losses are non-increasing.
    pub steps: Vec<AcceptedStep<T>>,
    /// True when the run ended on the gradient tolerance.
    pub converged: bool,
}

/// Minimizes `obj` from `theta0` by L-BFGS with Armijo backtracking.
/// Curvature pairs with non-positive s'y are discarded, so the inverse
/// Hessian estimate stays positive definite and accepted losses never
/// increase.
pub fn lbfgs_minimize<T: Scalar, O: Objective<T>>(
    obj: &mut O,
    theta0: Vec<T>,
    cfg: &LbfgsConfig<T>,
) -> Result<LbfgsRun<T>> {
    if cfg.history == 0 || cfg.max_iters == 0 {
        return Err(Error::Config("lbfgs history and max_iters must be positive".into()));
    }
    let mut theta = theta0;
    let (mut parts, mut grad) = obj.loss_and_grad(&theta)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("loss at the initial parameters".into()));
    }
    let initial = (parts, norm2(&grad));
    let mut pairs: Vec<(Vec<T>, Vec<T>, T)> = Vec::new(); // (s, y, 1/s'y)
    let mut steps = Vec::new();
    let mut converged = false;
    for iter in 1..=cfg.max_iters {
        let gnorm = norm2(&grad);
        if gnorm <= cfg.grad_tol {
            converged = true;
            break;
        }
        // Two-loop recursion for d = -H g.
        let mut d: Vec<T> = grad.iter().map(|&g| -g).collect();
        let mut alphas = vec![T::zero(); pairs.len()];
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = *rho * dot(s, &d);
            alphas[i] = a;
            for (dj, yj) in d.iter_mut().zip(y) {
                *dj -= a * *yj;
            }
        }
        if let Some((s, y, _)) = pairs.last() {
            let gamma = dot(s, y) / dot(y, y);
            for dj in d.iter_mut() {
                *dj *= gamma;
            }
        }
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = *rho * dot(y, &d);
            let a = alphas[i];
            for (dj, sj) in d.iter_mut().zip(s) {
                *dj += (a - b) * *sj;
            }
        }
        let mut slope = dot(&grad, &d);
        if slope >= T::zero() {
            // Fall back to steepest descent if the estimate lost descent.
            d = grad.iter().map(|&g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        // Armijo backtracking from a unit step.
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<T> = theta
                .iter()
                .zip(&d)
                .map(|(&th, &dj)| th + t * dj)
                .collect();
            let f_trial = trial_loss(obj, &trial)?;
            if f_trial.is_finite() && f_trial <= parts.total + cfg.c1 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= lit(0.5);
        }
        let Some(trial) = accepted else {
            break; // no further decrease available along d
        };
        let (parts_new, grad_new) = obj.loss_and_grad(&trial)?;
        let s: Vec<T> = trial.iter().zip(&theta).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = grad_new.iter().zip(&grad).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > lit::<T>(1e-10) * norm2(&s) * norm2(&y) {
            pairs.push((s, y, T::one() / sy));
            if pairs.len() > cfg.history {
                pairs.remove(0);
            }
        }
        theta = trial;
        parts = parts_new;
        grad = grad_new;
        steps.push(AcceptedStep {
            iter,
            parts,
            grad_norm: norm2(&grad),
            step_length: t,
        });
    }
    Ok(LbfgsRun {
        theta,
        initial,
        steps,
        converged,
    })
}

/// Adaptive-moment estimation state (first/second moment vectors and the
/// bias-correction step counter).
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
        }
    }

    /// One update with the given (already decayed) learning rate.
    pub fn step(&mut self, theta: &mut [T], grad: &[T], lr: T) {
        debug_assert_eq!(theta.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = T::one() - self.beta1.powi(self.t as i32);
        let b2t = T::one() - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Plain gradient-descent update.
pub fn sgd_step<T: Scalar>(theta: &mut [T], grad: &[T], lr: T) {
    for (th, &g) in theta.iter_mut().zip(grad) {
        *th -= lr * g;
    }
}

/// Multiplicatively decayed learning rate: lr * factor^(epoch / period),
/// with integer division (epochs 0..period-1 keep the initial rate).
pub fn decayed_lr<T: Scalar>(lr: T, factor: T, period: usize, epoch: usize) -> T {
    if period == 0 {
        return lr;
    }
    lr * factor.powi((epoch / period) as i32)
}
