//! Dynamic average consensus: `ξ(t+1) = W ξ(t)` driven to the network mean.
//!
//! Every agent ends with the mean `ξ̄ / S`; since every agent knows `S`, the
//! network sum is `S` times the consensus value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TransitionMatrix;
use crate::scalar::Scalar;

/// Minimum iteration budget when the caller does not pass one.
pub const MIN_DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRun<T> {
    pub xi0: Vec<T>,
    /// `e(0), e(1), …, e(t)`.
    pub trajectory_error: Vec<T>,
    pub iterations: usize,
    pub result: Vec<T>,
}

impl<T: Scalar> ConsensusRun<T> {
    pub fn mean(&self) -> T {
        mean(&self.xi0)
    }

    /// Largest deviation of any agent from the true mean.
    pub fn max_deviation(&self) -> T {
        let m = self.mean();
        self.result
            .iter()
            .fold(T::zero(), |acc, &x| acc.max((x - m).abs()))
    }
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// One synchronous round: every agent moves toward its neighbors,
/// `ξ_a + ε Σ_j A_aj (ξ_j - ξ_a)`.
pub fn step<T: Scalar>(w: &TransitionMatrix<T>, xi: &[T]) -> Result<Vec<T>> {
    check_len(w, xi)?;
    let mut out = vec![T::zero(); xi.len()];
    w.apply_into(xi, &mut out);
    Ok(out)
}

fn check_len<T: Scalar>(w: &TransitionMatrix<T>, xi: &[T]) -> Result<()> {
    if xi.len() != w.size() {
        return Err(Error::DimensionMismatch {
            expected: w.size(),
            got: xi.len(),
        });
    }
    Ok(())
}

/// Error metric against a fixed target mean.
///
/// `e = sqrt(S ‖ξ‖² - ξ̄²) / |ξ̄|` is evaluated in its centered form
/// `sqrt(S Σ (ξ_a - m)²) / |S m|`, which is algebraically identical and never
/// has a negative radicand. When `|ξ̄|` is negligible next to `‖ξ(0)‖` the
/// absolute error `sqrt(Σ (ξ_a - m)²)` is used instead.
#[derive(Clone, Copy, Debug)]
struct ErrorMetric<T> {
    mean: T,
    denom: Option<T>,
    n: T,
}

impl<T: Scalar> ErrorMetric<T> {
    fn new(xi0: &[T]) -> Self {
        let n = T::from_usize_lossy(xi0.len());
        let m = mean(xi0);
        let sum = m * n;
        let norm = xi0.iter().map(|&x| x * x).sum::<T>().sqrt();
        let denom = (sum.abs() >= T::lit(1e-12) * norm && sum != T::zero()).then_some(sum.abs());
        Self { mean: m, denom, n }
    }

    fn error(&self, xi: &[T]) -> T {
        let ss: T = xi.iter().map(|&x| (x - self.mean) * (x - self.mean)).sum();
        match self.denom {
            Some(d) => (self.n * ss).sqrt() / d,
            None => ss.sqrt(),
        }
    }

    /// Every agent within `tol` of the mean, relative when the mean is usable.
    fn agents_within(&self, xi: &[T], tol: T) -> bool {
        let bound = match self.denom {
            Some(_) => tol * self.mean.abs(),
            None => tol,
        };
        xi.iter().all(|&x| (x - self.mean).abs() <= bound)
    }
}

/// `e(t)` for the trajectory started at `xi0`.
pub fn relative_error<T: Scalar>(w: &TransitionMatrix<T>, xi0: &[T], t: usize) -> Result<T> {
    check_len(w, xi0)?;
    let metric = ErrorMetric::new(xi0);
    let mut x = xi0.to_vec();
    let mut y = vec![T::zero(); x.len()];
    for _ in 0..t {
        w.apply_into(&x, &mut y);
        std::mem::swap(&mut x, &mut y);
    }
    Ok(metric.error(&x))
}

/// Iterations needed for relative error `delta` given spectral gap `gap`:
/// `ceil(ln(√S/δ) / |ln(1 - gap)|)`.
pub fn estimate_iterations(s: usize, delta: f64, gap: f64) -> Result<usize> {
    if !(gap > 0.0 && gap <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "spectral gap must lie in (0, 1], got {gap}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target error must lie in (0, 1), got {delta}"
        )));
    }
    if gap >= 1.0 {
        return Ok(1);
    }
    let t = ((s as f64).sqrt() / delta).ln() / (1.0 - gap).ln().abs();
    Ok(t.ceil().max(1.0) as usize)
}

/// `10 × estimate_iterations`, never below [`MIN_DEFAULT_MAX_ITERS`].
pub fn default_max_iters<T: Scalar>(w: &TransitionMatrix<T>, tol: T) -> usize {
    let gap = w.spectrum().gap.to_f64_lossy().min(1.0);
    let delta = tol.to_f64_lossy().clamp(1e-300, 0.5);
    estimate_iterations(w.size(), delta, gap)
        .map(|t| t.saturating_mul(10))
        .unwrap_or(0)
        .max(MIN_DEFAULT_MAX_ITERS)
}

/// Iterates until the relative error is at most `tol` and every agent is
/// within `tol` (relative) of the mean.
pub fn run_consensus<T: Scalar>(
    w: &TransitionMatrix<T>,
    xi0: &[T],
    tol: T,
    max_iters: Option<usize>,
) -> Result<ConsensusRun<T>> {
    run_consensus_observed(w, xi0, tol, max_iters, |_, _| {})
}

/// [`run_consensus`] that shows `observer` the state broadcast at every
/// iteration, before the update is applied.
pub fn run_consensus_observed<T, F>(
    w: &TransitionMatrix<T>,
    xi0: &[T],
    tol: T,
    max_iters: Option<usize>,
    mut observer: F,
) -> Result<ConsensusRun<T>>
where
    T: Scalar,
    F: FnMut(usize, &[T]),
{
    check_len(w, xi0)?;
    let max_iters = max_iters.unwrap_or_else(|| default_max_iters(w, tol));
    let metric = ErrorMetric::new(xi0);
    let mut x = xi0.to_vec();
    let mut y = vec![T::zero(); x.len()];
    let mut trajectory = vec![metric.error(&x)];
    let mut t = 0;
    loop {
        let err = *trajectory.last().expect("non-empty");
        if err <= tol && metric.agents_within(&x, tol) {
            break;
        }
        if t >= max_iters {
            return Err(Error::NonConvergence {
                iterations: t,
                last_error: err.to_f64_lossy(),
            });
        }
        observer(t, &x);
        w.apply_into(&x, &mut y);
        std::mem::swap(&mut x, &mut y);
        t += 1;
        trajectory.push(metric.error(&x));
    }
    Ok(ConsensusRun {
        xi0: xi0.to_vec(),
        trajectory_error: trajectory,
        iterations: t,
        result: x,
    })
}

/// Several consensus instances advanced in lockstep on the same operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRun<T> {
    pub iterations: usize,
    /// Final state per instance.
    pub results: Vec<Vec<T>>,
}

/// Runs every column of `columns` through the same number of iterations,
/// stopping once all of them satisfy the [`run_consensus`] criterion.
/// `observer(t, column, state)` sees each broadcast state.
pub fn run_consensus_lockstep<T, F>(
    w: &TransitionMatrix<T>,
    columns: &[Vec<T>],
    tol: T,
    max_iters: Option<usize>,
    mut observer: F,
) -> Result<BatchRun<T>>
where
    T: Scalar,
    F: FnMut(usize, usize, &[T]),
{
    for c in columns {
        check_len(w, c)?;
    }
    let max_iters = max_iters.unwrap_or_else(|| default_max_iters(w, tol));
    let metrics: Vec<_> = columns.iter().map(|c| ErrorMetric::new(c)).collect();
    let mut xs: Vec<Vec<T>> = columns.to_vec();
    let mut y = vec![T::zero(); w.size()];
    let mut t = 0;
    loop {
        let mut worst = T::zero();
        let mut done = true;
        for (m, x) in metrics.iter().zip(&xs) {
            let e = m.error(x);
            worst = worst.max(e);
            done &= e <= tol && m.agents_within(x, tol);
        }
        if done {
            break;
        }
        if t >= max_iters {
            return Err(Error::NonConvergence {
                iterations: t,
                last_error: worst.to_f64_lossy(),
            });
        }
        for (c, x) in xs.iter_mut().enumerate() {
            observer(t, c, x);
            w.apply_into(x, &mut y);
            std::mem::swap(x, &mut y);
        }
        t += 1;
    }
    Ok(BatchRun {
        iterations: t,
        results: xs,
    })
}
