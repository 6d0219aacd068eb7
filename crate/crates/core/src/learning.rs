//! Federated EM for a Gaussian mixture with shared components and
//! agent-specific mixing weights.
//!
//! Every agent keeps its samples. Per round it computes responsibilities and
//! the sufficient statistics `(N^a_k, m^a_k, C^a_k)` locally; only their sums
//! over agents cross the network, through one of the [`Aggregator`]s. The
//! M-step is the exact maximizer of [`penalized_objective`] over
//! `(μ_k, Λ_k, π^a)`:
//!
//! * `μ_k = m̄_k / (λ0 + N_k)` (zero-mean Gaussian prior on `μ_k` with
//!   precision `λ0 Λ_k`),
//! * `Λ_k = glasso(Σ_k, ρ/N_k)` with
//!   `Σ_k = C̄_k/N_k − ((N_k + λ0)/N_k) μ_k μ_kᵀ` (Laplace prior on `Λ_k`),
//! * `π^a_k = (N^a_k + γ)/(N^a + Kγ)` (Dirichlet prior).
//!
//! The objective omits the `½ ln det(λ0 Λ_k)` normalizer of the mean prior;
//! with it the `Λ_k` update above would no longer be the maximizer.
//! [`CovarianceForm::Uncentered`] swaps in `Σ_k = C̄_k/N_k + μ_k μ_kᵀ`,
//! which does not ascend the objective, so stall detection is off in that
//! mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Scalar;
use crate::sharing::Aggregator;

/// Components with aggregated weight below this are re-seeded.
pub const EMPTY_COMPONENT_WEIGHT: f64 = 1e-8;

/// Per-agent sample matrices, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    agents: Vec<Matrix<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(agents: Vec<Matrix<T>>) -> Result<Self> {
        let first = agents.first().ok_or(Error::InvalidSize {
            what: "dataset agents",
            got: 0,
            min: 1,
        })?;
        let dim = first.cols();
        if dim == 0 {
            return Err(Error::InvalidSize {
                what: "sample dimension",
                got: 0,
                min: 1,
            });
        }
        for x in &agents {
            if x.cols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x.cols(),
                });
            }
            if x.rows() == 0 {
                return Err(Error::InvalidSize {
                    what: "agent samples",
                    got: 0,
                    min: 1,
                });
            }
        }
        Ok(Self { agents })
    }

    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].cols()
    }

    pub fn agent(&self, a: usize) -> &Matrix<T> {
        &self.agents[a]
    }

    pub fn samples(&self, a: usize) -> usize {
        self.agents[a].rows()
    }

    pub fn total_samples(&self) -> usize {
        self.agents.iter().map(Matrix::rows).sum()
    }

    /// All samples stacked in agent order.
    pub fn pooled(&self) -> Matrix<T> {
        let rows: Vec<Vec<T>> = self.agents.iter().flat_map(Matrix::to_rows).collect();
        Matrix::from_rows(&rows)
    }
}

/// Shared components `(μ_k, Λ_k)` and per-agent weights `π^a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams<T> {
    pub means: Vec<Vec<T>>,
    pub precisions: Vec<Matrix<T>>,
    /// `weights[a][k] = π^a_k`.
    pub weights: Vec<Vec<T>>,
}

impl<T: Scalar> MixtureParams<T> {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn agents(&self) -> usize {
        self.weights.len()
    }

    /// Moves component `k` to position `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.components();
        let mut out = self.clone();
        for old in 0..k {
            out.means[perm[old]] = self.means[old].clone();
            out.precisions[perm[old]] = self.precisions[old].clone();
            for (dst, src) in out.weights.iter_mut().zip(&self.weights) {
                dst[perm[old]] = src[old];
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.components();
        let m = self.dim();
        if k == 0 || m == 0 {
            return Err(Error::InvalidSize {
                what: "mixture",
                got: k.min(m),
                min: 1,
            });
        }
        if self.precisions.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: self.precisions.len(),
            });
        }
        for mu in &self.means {
            if mu.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: mu.len() });
            }
        }
        for p in &self.precisions {
            if p.rows() != m || p.cols() != m {
                return Err(Error::DimensionMismatch { expected: m, got: p.rows() });
            }
        }
        for pi in &self.weights {
            if pi.len() != k {
                return Err(Error::DimensionMismatch { expected: k, got: pi.len() });
            }
            let total: T = pi.iter().copied().sum();
            if pi.iter().any(|&p| !(p > T::zero())) || (total - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::InvalidParameter("mixing weights must be a positive simplex vector".into()));
            }
        }
        Ok(())
    }
}

/// Which matrix feeds the graphical lasso in the M-step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceForm {
    /// `C̄/N − ((N + λ0)/N) μμᵀ`, the maximizer of the objective.
    #[default]
    Derived,
    /// `C̄/N + μμᵀ`.
    Uncentered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams<T> {
    /// Dirichlet strength on `π^a`.
    pub gamma: T,
    /// Prior precision scale of `μ_k`.
    pub lambda0: T,
    /// ℓ1 strength on `Λ_k`.
    pub rho: T,
    pub covariance: CovarianceForm,
}

impl<T: Scalar> Default for Hyperparams<T> {
    fn default() -> Self {
        Self {
            gamma: T::one(),
            lambda0: T::lit(1e-3),
            rho: T::lit(0.1),
            covariance: CovarianceForm::Derived,
        }
    }
}

impl<T: Scalar> Hyperparams<T> {
    fn validate(&self) -> Result<()> {
        let ok = |v: T| v >= T::zero() && v.is_finite();
        if !(self.gamma > T::zero()) || !ok(self.gamma) || !ok(self.lambda0) || !ok(self.rho) {
            return Err(Error::InvalidParameter(format!(
                "need gamma > 0 and non-negative lambda0, rho; got gamma={}, lambda0={}, rho={}",
                self.gamma, self.lambda0, self.rho
            )));
        }
        Ok(())
    }
}

/// Posterior component weights, one `N^a × K` matrix per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities<T> {
    pub per_agent: Vec<Matrix<T>>,
}

/// Sufficient statistics `(N_k, m_k, C_k)` for every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats<T> {
    pub counts: Vec<T>,
    pub sums: Vec<Vec<T>>,
    pub scatters: Vec<Matrix<T>>,
}

/// One agent's statistics.
/// Component means and precisions.
pub type GaussianParams<T> = (Vec<Vec<T>>, Vec<Matrix<T>>);

pub type LocalStats<T> = Stats<T>;
/// Statistics summed over agents.
pub type GlobalStats<T> = Stats<T>;

impl<T: Scalar> Stats<T> {
    pub fn zeros(k: usize, m: usize) -> Self {
        Self {
            counts: vec![T::zero(); k],
            sums: vec![vec![T::zero(); m]; k],
            scatters: vec![Matrix::zeros(m, m); k],
        }
    }

    pub fn components(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.sums.first().map_or(0, Vec::len)
    }

    /// Number of scalars exchanged per agent: `K(1 + M + M²)`.
    pub fn flat_len(k: usize, m: usize) -> usize {
        k * (1 + m + m * m)
    }

    /// Counts, then sums, then scatters in row-major order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(Self::flat_len(self.components(), self.dim()));
        out.extend_from_slice(&self.counts);
        for s in &self.sums {
            out.extend_from_slice(s);
        }
        for c in &self.scatters {
            out.extend_from_slice(c.as_slice());
        }
        out
    }

    pub fn from_flat(k: usize, m: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != Self::flat_len(k, m) {
            return Err(Error::DimensionMismatch {
                expected: Self::flat_len(k, m),
                got: flat.len(),
            });
        }
        let counts = flat[..k].to_vec();
        let sums = flat[k..k + k * m].chunks(m).map(<[T]>::to_vec).collect();
        let scatters = flat[k + k * m..]
            .chunks(m * m)
            .map(|c| {
                let mut s = Matrix::from_row_major(m, m, c.to_vec());
                s.symmetrize();
                s
            })
            .collect();
        Ok(Self { counts, sums, scatters })
    }
}

fn component_factors<T: Scalar>(params: &MixtureParams<T>) -> Result<Vec<Cholesky<T>>> {
    params
        .precisions
        .iter()
        .enumerate()
        .map(|(k, p)| Cholesky::new(p).map_err(|_| Error::SingularPrecision { component: k }))
        .collect()
}

fn log_density<T: Scalar>(x: &[T], mu: &[T], factor: &Cholesky<T>, log_norm: T) -> T {
    let diff: Vec<T> = x.iter().zip(mu).map(|(&a, &b)| a - b).collect();
    log_norm - T::lit(0.5) * factor.quad_form(&diff)
}

fn log_norms<T: Scalar>(factors: &[Cholesky<T>], m: usize) -> Vec<T> {
    let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    factors
        .iter()
        .map(|f| T::lit(0.5) * f.log_det() - T::from_usize_lossy(m) * half_log_2pi)
        .collect()
}

/// `ln π^a_k + ln N(x_n | μ_k, Λ_k⁻¹)` for every sample and component.
fn joint_log_terms<T: Scalar>(x: &Matrix<T>, params: &MixtureParams<T>, agent: usize, factors: &[Cholesky<T>]) -> Matrix<T> {
    let k = params.components();
    let norms = log_norms(factors, params.dim());
    let pi = &params.weights[agent];
    let mut out = Matrix::zeros(x.rows(), k);
    for n in 0..x.rows() {
        let row = x.row(n);
        for c in 0..k {
            out[(n, c)] = pi[c].ln() + log_density(row, &params.means[c], &factors[c], norms[c]);
        }
    }
    out
}

fn check_agent<T: Scalar>(x: &Matrix<T>, params: &MixtureParams<T>, agent: usize) -> Result<()> {
    if agent >= params.agents() {
        return Err(Error::InvalidParameter(format!(
            "agent {agent} has no mixing weights ({} agents)",
            params.agents()
        )));
    }
    if x.cols() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: x.cols(),
        });
    }
    Ok(())
}

/// E-step for one agent: `r_nk ∝ π^a_k N(x_n | μ_k, Λ_k⁻¹)`, normalized with
/// max-subtraction in log space.
pub fn responsibilities<T: Scalar>(x: &Matrix<T>, params: &MixtureParams<T>, agent: usize) -> Result<Matrix<T>> {
    check_agent(x, params, agent)?;
    let factors = component_factors(params)?;
    Ok(normalize_rows(joint_log_terms(x, params, agent, &factors)))
}

fn normalize_rows<T: Scalar>(mut logs: Matrix<T>) -> Matrix<T> {
    for n in 0..logs.rows() {
        let row = logs.row_mut(n);
        let top = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    logs
}

/// `N_k = Σ_n r_nk`, `m_k = Σ_n r_nk x_n`, `C_k = Σ_n r_nk x_n x_nᵀ`.
pub fn local_stats<T: Scalar>(x: &Matrix<T>, resp: &Matrix<T>) -> Result<LocalStats<T>> {
    if x.rows() != resp.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: resp.rows(),
        });
    }
    let (k, m) = (resp.cols(), x.cols());
    let mut st = Stats::zeros(k, m);
    for n in 0..x.rows() {
        let row = x.row(n);
        for c in 0..k {
            let r = resp[(n, c)];
            if r == T::zero() {
                continue;
            }
            st.counts[c] += r;
            for (s, &v) in st.sums[c].iter_mut().zip(row) {
                *s += r * v;
            }
            st.scatters[c].add_outer(r, row, row);
        }
    }
    Ok(st)
}

/// Communication spent by one aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationCost {
    pub total_iterations: usize,
    pub scalar_messages: usize,
}

impl std::ops::AddAssign for AggregationCost {
    fn add_assign(&mut self, rhs: Self) {
        self.total_iterations += rhs.total_iterations;
        self.scalar_messages += rhs.scalar_messages;
    }
}

/// Element-wise sum of all agents' statistics.
pub fn aggregate_stats<T: Scalar>(
    locals: &[LocalStats<T>],
    aggregator: &Aggregator<T>,
    seed: u64,
) -> Result<(GlobalStats<T>, AggregationCost)> {
    let first = locals.first().ok_or(Error::InvalidSize {
        what: "agents",
        got: 0,
        min: 1,
    })?;
    let (k, m) = (first.components(), first.dim());
    let flat: Vec<Vec<T>> = locals.iter().map(Stats::flatten).collect();
    let sum = aggregator.sum_vectors(&flat, seed)?;
    let global = Stats::from_flat(k, m, &sum.totals)?;
    Ok((
        global,
        AggregationCost {
            total_iterations: sum.total_iterations,
            scalar_messages: sum.scalar_messages,
        },
    ))
}

/// Tuning of [`glasso_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlassoOptions<T> {
    /// KKT residual target, relative to `max(1, max|Σ_ij|)`.
    pub tol: T,
    pub max_sweeps: usize,
}

impl<T: Scalar> Default for GlassoOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-6).max(T::lit(100.0) * T::epsilon()),
            max_sweeps: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlassoSolution<T> {
    pub precision: Matrix<T>,
    /// Inverse of `precision`.
    pub covariance: Matrix<T>,
    pub sweeps: usize,
    pub residual: T,
}

/// Maximizes `ln det Λ − Tr(ΛΣ) − r Σ_ij |Λ_ij|` (diagonal included).
pub fn glasso<T: Scalar>(sigma: &Matrix<T>, r: T) -> Result<Matrix<T>> {
    glasso_with(sigma, r, GlassoOptions::default()).map(|s| s.precision)
}

fn soft_threshold<T: Scalar>(v: T, r: T) -> T {
    if v > r {
        v - r
    } else if v < -r {
        v + r
    } else {
        T::zero()
    }
}

/// Block coordinate descent on the covariance `W = Λ⁻¹`, one lasso per
/// column; stops when the KKT residual of `Λ` is within `opts.tol`.
pub fn glasso_with<T: Scalar>(sigma: &Matrix<T>, r: T, opts: GlassoOptions<T>) -> Result<GlassoSolution<T>> {
    let m = sigma.rows();
    if !sigma.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: sigma.cols(),
        });
    }
    if m == 0 {
        return Err(Error::InvalidSize {
            what: "glasso input",
            got: 0,
            min: 1,
        });
    }
    if !(r >= T::zero()) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("glasso penalty must be non-negative, got {r}")));
    }
    let scale = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .fold(T::one(), |acc, (i, j)| acc.max(sigma[(i, j)].abs()));
    let asym = sigma.max_asymmetry();
    if asym > T::lit(1e-8) * scale {
        return Err(Error::NotSymmetric {
            asymmetry: asym.to_f64_lossy(),
        });
    }
    let mut sigma = sigma.clone();
    sigma.symmetrize();
    if sigma.diagonal().iter().any(|&d| !(d + r > T::zero())) {
        return Err(Error::NotPositiveDefinite);
    }
    if r == T::zero() {
        let precision = Cholesky::new(&sigma)?.inverse();
        return Ok(GlassoSolution {
            precision,
            covariance: sigma,
            sweeps: 0,
            residual: T::zero(),
        });
    }
    if m == 1 {
        let w = sigma[(0, 0)] + r;
        return Ok(GlassoSolution {
            precision: Matrix::from_diagonal(&[T::one() / w]),
            covariance: Matrix::from_diagonal(&[w]),
            sweeps: 0,
            residual: T::zero(),
        });
    }

    let tol = opts.tol * scale;
    let inner_tol = tol * T::lit(1e-3);
    let mut w = sigma.clone();
    for i in 0..m {
        w[(i, i)] += r;
    }
    let mut betas: Vec<Vec<T>> = vec![vec![T::zero(); m - 1]; m];
    let mut residual = T::infinity();
    for sweep in 1..=opts.max_sweeps {
        for j in 0..m {
            let others: Vec<usize> = (0..m).filter(|&i| i != j).collect();
            let beta = &mut betas[j];
            for _ in 0..10_000 {
                let mut change = T::zero();
                for (p, &kp) in others.iter().enumerate() {
                    let mut v = sigma[(kp, j)];
                    for (q, &kq) in others.iter().enumerate() {
                        if q != p {
                            v -= w[(kp, kq)] * beta[q];
                        }
                    }
                    let next = soft_threshold(v, r) / w[(kp, kp)];
                    change = change.max((next - beta[p]).abs());
                    beta[p] = next;
                }
                if change <= inner_tol {
                    break;
                }
            }
            for &kp in &others {
                let v: T = others.iter().enumerate().map(|(q, &kq)| w[(kp, kq)] * beta[q]).sum();
                w[(kp, j)] = v;
                w[(j, kp)] = v;
            }
        }
        let precision = precision_from_blocks(&w, &betas);
        if let Ok(chol) = Cholesky::new(&precision) {
            let cov = chol.inverse();
            residual = kkt_residual(&precision, &cov, &sigma, r);
            if residual <= tol {
                return Ok(GlassoSolution {
                    precision,
                    covariance: cov,
                    sweeps: sweep,
                    residual: residual / scale,
                });
            }
        }
    }
    Err(Error::GlassoNonConvergence {
        sweeps: opts.max_sweeps,
        residual: (residual / scale).to_f64_lossy(),
    })
}

fn precision_from_blocks<T: Scalar>(w: &Matrix<T>, betas: &[Vec<T>]) -> Matrix<T> {
    let m = w.rows();
    let mut theta = Matrix::zeros(m, m);
    for (j, beta) in betas.iter().enumerate() {
        let others = (0..m).filter(|&i| i != j);
        let w12_beta: T = others.clone().zip(beta).map(|(i, &b)| w[(i, j)] * b).sum();
        let tjj = T::one() / (w[(j, j)] - w12_beta);
        theta[(j, j)] = tjj;
        for (i, &b) in others.zip(beta) {
            theta[(i, j)] = -b * tjj;
        }
    }
    theta.symmetrize();
    theta
}

/// Largest violation of `Λ⁻¹ − Σ ∈ r·∂‖Λ‖₁`.
fn kkt_residual<T: Scalar>(precision: &Matrix<T>, cov: &Matrix<T>, sigma: &Matrix<T>, r: T) -> T {
    let m = precision.rows();
    let mut worst = T::zero();
    for i in 0..m {
        for j in 0..m {
            let g = cov[(i, j)] - sigma[(i, j)];
            let l = precision[(i, j)];
            let v = if l == T::zero() {
                (g.abs() - r).max(T::zero())
            } else {
                (g - r * l.signum()).abs()
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// The matrix handed to the glasso for one component, with its mean.
fn component_moments<T: Scalar>(n: T, sum: &[T], scatter: &Matrix<T>, hyper: &Hyperparams<T>) -> (Vec<T>, Matrix<T>) {
    let mu: Vec<T> = sum.iter().map(|&s| s / (hyper.lambda0 + n)).collect();
    let mut sigma = scatter.scale(T::one() / n);
    let coef = match hyper.covariance {
        CovarianceForm::Derived => -(n + hyper.lambda0) / n,
        CovarianceForm::Uncentered => T::one(),
    };
    sigma.add_outer(coef, &mu, &mu);
    sigma.symmetrize();
    (mu, sigma)
}

fn glasso_repaired<T: Scalar>(sigma: &Matrix<T>, r: T) -> Result<Matrix<T>> {
    match glasso(sigma, r) {
        Err(Error::NotPositiveDefinite) => {}
        other => return other,
    }
    let m = sigma.rows();
    let base = (sigma.trace().abs() / T::from_usize_lossy(m)).max(T::one()) * T::lit(1e-8);
    let mut loading = base;
    for _ in 0..16 {
        let mut loaded = sigma.clone();
        for i in 0..m {
            loaded[(i, i)] += loading;
        }
        if let Ok(p) = glasso(&loaded, r) {
            log::warn!("sample covariance not positive definite; added {:e} to the diagonal", loading.to_f64_lossy());
            return Ok(p);
        }
        loading *= T::lit(10.0);
    }
    Err(Error::NotPositiveDefinite)
}

/// M-step for the shared components. Components with `N_k` below
/// [`EMPTY_COMPONENT_WEIGHT`] fail with [`Error::EmptyComponent`].
pub fn update_gaussian_params<T: Scalar>(global: &GlobalStats<T>, hyper: &Hyperparams<T>) -> Result<GaussianParams<T>> {
    hyper.validate()?;
    let mut means = Vec::with_capacity(global.components());
    let mut precisions = Vec::with_capacity(global.components());
    for k in 0..global.components() {
        let (mu, lambda) = update_component(global, hyper, k)?;
        means.push(mu);
        precisions.push(lambda);
    }
    Ok((means, precisions))
}

fn update_component<T: Scalar>(global: &GlobalStats<T>, hyper: &Hyperparams<T>, k: usize) -> Result<(Vec<T>, Matrix<T>)> {
    let n = global.counts[k];
    if !(n >= T::lit(EMPTY_COMPONENT_WEIGHT)) {
        return Err(Error::EmptyComponent {
            component: k,
            weight: n.to_f64_lossy(),
        });
    }
    let (mu, sigma) = component_moments(n, &global.sums[k], &global.scatters[k], hyper);
    let lambda = glasso_repaired(&sigma, hyper.rho / n).map_err(|e| e.at("component", k))?;
    Ok((mu, lambda))
}

/// `π^a_k = (N^a_k + γ)/(N^a + Kγ)`; uniform when the denominator vanishes.
pub fn update_pi<T: Scalar>(counts: &[T], total: T, gamma: T) -> Vec<T> {
    let k = T::from_usize_lossy(counts.len());
    let denom = total + k * gamma;
    if !(denom > T::zero()) {
        return vec![T::one() / k; counts.len()];
    }
    counts.iter().map(|&c| (c + gamma) / denom).collect()
}

/// `Σ_a Σ_n Σ_k r[ln π^a_k + ln N(x|μ_k,Λ_k⁻¹) − ln r] − Σ_k (λ0/2) μ_kᵀΛ_kμ_k
/// − Σ_k (ρ/2)‖Λ_k‖₁ + γ Σ_a Σ_k ln π^a_k`, with `0 ln 0 = 0`.
pub fn penalized_objective<T: Scalar>(
    data: &Dataset<T>,
    params: &MixtureParams<T>,
    resp: &Responsibilities<T>,
    hyper: &Hyperparams<T>,
) -> Result<T> {
    if resp.per_agent.len() != data.agents() {
        return Err(Error::DimensionMismatch {
            expected: data.agents(),
            got: resp.per_agent.len(),
        });
    }
    let factors = component_factors(params)?;
    let mut total = T::zero();
    for a in 0..data.agents() {
        let x = data.agent(a);
        check_agent(x, params, a)?;
        let r = &resp.per_agent[a];
        if r.rows() != x.rows() || r.cols() != params.components() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: r.rows(),
            });
        }
        let terms = joint_log_terms(x, params, a, &factors);
        for n in 0..x.rows() {
            for k in 0..params.components() {
                let rk = r[(n, k)];
                if rk > T::zero() {
                    total += rk * (terms[(n, k)] - rk.ln());
                }
            }
        }
        total += hyper.gamma * params.weights[a].iter().map(|p| p.ln()).sum::<T>();
    }
    let half = T::lit(0.5);
    for (k, f) in factors.iter().enumerate() {
        total -= half * hyper.lambda0 * f.quad_form(&params.means[k]);
        total -= half * hyper.rho * params.precisions[k].l1_norm();
    }
    Ok(total)
}

/// Options of [`federated_em`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions<T> {
    /// Stop once the relative objective change falls below this.
    pub tol: T,
    pub max_rounds: usize,
    pub seed: u64,
    /// Starting point; `None` runs the seeded local k-means++ initialization.
    pub init: Option<MixtureParams<T>>,
    /// Allowed relative objective decrease before declaring a stall;
    /// `None` picks `1e-9` for exact and `1e-5` for consensus aggregation.
    pub stall_slack: Option<T>,
}

impl<T: Scalar> Default for EmOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-6),
            max_rounds: 200,
            seed: 0,
            init: None,
            stall_slack: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmResult<T> {
    pub params: MixtureParams<T>,
    pub responsibilities: Responsibilities<T>,
    /// Objective after every E-step, starting from the initial parameters.
    pub objective_trace: Vec<T>,
    /// M-steps performed.
    pub rounds: usize,
    pub converged: bool,
    pub cost: AggregationCost,
    /// `(round, component)` pairs that were re-seeded.
    pub reseeded: Vec<(usize, usize)>,
}

fn e_step<T: Scalar>(data: &Dataset<T>, params: &MixtureParams<T>) -> Result<Responsibilities<T>> {
    let factors = component_factors(params)?;
    let per_agent = (0..data.agents())
        .into_par_iter()
        .map(|a| {
            let x = data.agent(a);
            check_agent(x, params, a)?;
            Ok(normalize_rows(joint_log_terms(x, params, a, &factors)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Responsibilities { per_agent })
}

fn all_local_stats<T: Scalar>(data: &Dataset<T>, resp: &Responsibilities<T>) -> Result<Vec<LocalStats<T>>> {
    (0..data.agents())
        .into_par_iter()
        .map(|a| local_stats(data.agent(a), &resp.per_agent[a]))
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// k-means++ seeding of `k` centers on local samples.
fn kmeans_pp<T: Scalar, R: Rng + ?Sized>(x: &Matrix<T>, k: usize, rng: &mut R) -> Vec<Vec<T>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0]).to_f64_lossy()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c).to_f64_lossy());
        }
        centers.push(c);
    }
    centers
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Scalar>(x: &[T], centers: &[Vec<T>]) -> usize {
    let mut best = (0, T::infinity());
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Seeded initial parameters: each agent picks `k` local centers by
/// k-means++, orders them along a direction shared through the seed so that
/// labels line up across agents, and hard-assigns its samples; one
/// aggregation of the resulting statistics yields the starting components.
/// Mixing weights start uniform, so agents holding identical data stay
/// identical.
pub fn initialize<T: Scalar>(
    data: &Dataset<T>,
    k: usize,
    hyper: &Hyperparams<T>,
    aggregator: &Aggregator<T>,
    seed: u64,
) -> Result<(MixtureParams<T>, AggregationCost)> {
    if k == 0 {
        return Err(Error::InvalidSize {
            what: "mixture components",
            got: 0,
            min: 1,
        });
    }
    let m = data.dim();
    let mut shared = stream_rng(seed, 0);
    let direction: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut shared)).collect();
    let per_agent = (0..data.agents())
        .into_par_iter()
        .map(|a| {
            let x = data.agent(a);
            let mut rng = stream_rng(seed, a as u64 + 1);
            let mut centers = kmeans_pp(x, k, &mut rng);
            let proj = |c: &Vec<T>| -> f64 { c.iter().zip(&direction).map(|(v, d)| v.to_f64_lossy() * d).sum() };
            centers.sort_by(|a, b| proj(a).total_cmp(&proj(b)));
            let mut resp = Matrix::zeros(x.rows(), k);
            for n in 0..x.rows() {
                resp[(n, nearest(x.row(n), &centers))] = T::one();
            }
            resp
        })
        .collect::<Vec<_>>();
    let resp = Responsibilities { per_agent };
    let locals = all_local_stats(data, &resp)?;
    let (global, cost) = aggregate_stats(&locals, aggregator, seed)?;
    let mut state = Reseeder::new(data);
    let (means, precisions) = state.m_step(&global, hyper, None)?;
    let weights = vec![vec![T::one() / T::from_usize_lossy(k); k]; data.agents()];
    Ok((MixtureParams { means, precisions, weights }, cost))
}

/// M-step with empty-component re-seeding.
struct Reseeder<'a, T> {
    data: &'a Dataset<T>,
    reseeded: Vec<usize>,
}

impl<'a, T: Scalar> Reseeder<'a, T> {
    fn new(data: &'a Dataset<T>) -> Self {
        Self { data, reseeded: Vec::new() }
    }

    fn m_step(&mut self, global: &GlobalStats<T>, hyper: &Hyperparams<T>, current: Option<&MixtureParams<T>>) -> Result<GaussianParams<T>> {
        hyper.validate()?;
        self.reseeded.clear();
        let kk = global.components();
        let mut slots: Vec<Option<(Vec<T>, Matrix<T>)>> = Vec::with_capacity(kk);
        for k in 0..kk {
            match update_component(global, hyper, k) {
                Ok(c) => slots.push(Some(c)),
                Err(Error::EmptyComponent { .. }) => {
                    self.reseeded.push(k);
                    slots.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        if self.reseeded.is_empty() {
            return Ok(slots.into_iter().map(Option::unwrap).unzip());
        }
        let m = self.data.dim();
        let live: Vec<&(Vec<T>, Matrix<T>)> = slots.iter().flatten().collect();
        let scale = if live.is_empty() {
            T::one()
        } else {
            live.iter().map(|(_, p)| p.trace()).sum::<T>() / T::from_usize_lossy(live.len() * m)
        };
        let mut anchors: Vec<Vec<T>> = live.iter().map(|(mu, _)| mu.clone()).collect();
        if anchors.is_empty() {
            if let Some(p) = current {
                anchors = p.means.clone();
            }
        }
        for &k in &self.reseeded {
            let mu = self.farthest_sample(&anchors);
            log::warn!("component {k} is empty; re-seeding it at the farthest sample");
            anchors.push(mu.clone());
            slots[k] = Some((mu, Matrix::identity(m).scale(scale)));
        }
        Ok(slots.into_iter().map(Option::unwrap).unzip())
    }

    fn farthest_sample(&self, anchors: &[Vec<T>]) -> Vec<T> {
        let mut best = (T::neg_infinity(), self.data.agent(0).row(0).to_vec());
        for a in 0..self.data.agents() {
            let x = self.data.agent(a);
            for n in 0..x.rows() {
                let d = anchors
                    .iter()
                    .map(|c| sq_dist(x.row(n), c))
                    .fold(T::infinity(), T::min);
                let d = if anchors.is_empty() { T::zero() } else { d };
                if d > best.0 {
                    best = (d, x.row(n).to_vec());
                }
            }
        }
        best.1
    }
}

/// Federated EM: E-step and statistics locally, sums through `aggregator`,
/// M-step from the sums. Every agent ends with the same `(μ_k, Λ_k)`.
pub fn federated_em<T: Scalar>(
    data: &Dataset<T>,
    k: usize,
    hyper: &Hyperparams<T>,
    aggregator: &Aggregator<T>,
    opts: &EmOptions<T>,
) -> Result<EmResult<T>> {
    federated_em_observed(data, k, hyper, aggregator, opts, |_, _| {})
}

/// [`federated_em`] calling `observer(round, params)` after every M-step.
pub fn federated_em_observed<T, F>(
    data: &Dataset<T>,
    k: usize,
    hyper: &Hyperparams<T>,
    aggregator: &Aggregator<T>,
    opts: &EmOptions<T>,
    mut observer: F,
) -> Result<EmResult<T>>
where
    T: Scalar,
    F: FnMut(usize, &MixtureParams<T>),
{
    hyper.validate()?;
    if let Some(s) = aggregator.agents() {
        if s != data.agents() {
            return Err(Error::DimensionMismatch {
                expected: s,
                got: data.agents(),
            });
        }
    }
    let mut cost = AggregationCost::default();
    let mut params = match &opts.init {
        Some(p) => {
            p.validate()?;
            if p.components() != k || p.dim() != data.dim() || p.agents() != data.agents() {
                return Err(Error::InvalidParameter(format!(
                    "initial parameters have K={}, M={}, S={}; expected K={k}, M={}, S={}",
                    p.components(),
                    p.dim(),
                    p.agents(),
                    data.dim(),
                    data.agents()
                )));
            }
            p.clone()
        }
        None => {
            let (p, c) = initialize(data, k, hyper, aggregator, opts.seed)?;
            cost += c;
            p
        }
    };
    let slack = opts.stall_slack.unwrap_or_else(|| match aggregator {
        Aggregator::Direct => T::lit(1e-9),
        _ => T::lit(1e-5),
    });
    let check_stall = hyper.covariance == CovarianceForm::Derived;
    let mut rng = stream_rng(opts.seed, u64::MAX);
    let mut reseeder = Reseeder::new(data);
    let mut reseeded = Vec::new();
    let mut trace = Vec::new();
    let mut just_reseeded = false;
    let mut rounds = 0;
    let mut converged = false;
    let resp = loop {
        let resp = e_step(data, &params)?;
        let obj = penalized_objective(data, &params, &resp, hyper)?;
        if let Some(&prev) = trace.last() {
            let prev: T = prev;
            let scale = prev.abs().max(T::one());
            if check_stall && !just_reseeded && obj < prev - slack * scale {
                log::error!("objective fell from {prev} to {obj} at round {rounds}");
                return Err(Error::Stall {
                    round: rounds,
                    previous: prev.to_f64_lossy(),
                    current: obj.to_f64_lossy(),
                });
            }
            if (obj - prev).abs() <= opts.tol * prev.abs() {
                trace.push(obj);
                converged = true;
                break resp;
            }
        }
        trace.push(obj);
        if rounds >= opts.max_rounds {
            break resp;
        }
        rounds += 1;
        let locals = all_local_stats(data, &resp)?;
        let (global, c) = aggregate_stats(&locals, aggregator, rng.gen()).map_err(|e| e.at("EM round", rounds))?;
        cost += c;
        let (means, precisions) = reseeder.m_step(&global, hyper, Some(&params))?;
        just_reseeded = !reseeder.reseeded.is_empty();
        reseeded.extend(reseeder.reseeded.iter().map(|&c| (rounds, c)));
        let weights = locals
            .iter()
            .enumerate()
            .map(|(a, st)| update_pi(&st.counts, T::from_usize_lossy(data.samples(a)), hyper.gamma))
            .collect();
        params = MixtureParams { means, precisions, weights };
        observer(rounds, &params);
    };
    Ok(EmResult {
        params,
        responsibilities: resp,
        objective_trace: trace,
        rounds,
        converged,
        cost,
        reseeded,
    })
}

/// Draws `counts[a]` samples for each agent from `truth` (component first,
/// then a Gaussian with covariance `Λ_k⁻¹`). Returns the data and labels.
pub fn sample_mixture<T, R>(truth: &MixtureParams<T>, counts: &[usize], rng: &mut R) -> Result<(Dataset<T>, Vec<Vec<usize>>)>
where
    T: Scalar,
    R: Rng + ?Sized,
{
    truth.validate()?;
    if counts.len() != truth.agents() {
        return Err(Error::DimensionMismatch {
            expected: truth.agents(),
            got: counts.len(),
        });
    }
    let m = truth.dim();
    let cov_factors = truth
        .precisions
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let cov = Cholesky::new(p).map_err(|_| Error::SingularPrecision { component: k })?.inverse();
            Cholesky::new(&cov)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut agents = Vec::with_capacity(counts.len());
    let mut labels = Vec::with_capacity(counts.len());
    for (a, &n) in counts.iter().enumerate() {
        let mut x = Matrix::zeros(n, m);
        let mut lab = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut k = truth.components() - 1;
            for (c, p) in truth.weights[a].iter().enumerate() {
                acc += p.to_f64_lossy();
                if u < acc {
                    k = c;
                    break;
                }
            }
            let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
            let l = cov_factors[k].lower();
            for r in 0..m {
                let noise: f64 = (0..=r).map(|c| l[(r, c)].to_f64_lossy() * z[c]).sum();
                x[(i, r)] = truth.means[k][r] + T::lit(noise);
            }
            lab.push(k);
        }
        agents.push(x);
        labels.push(lab);
    }
    Ok((Dataset::new(agents)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_ring, transition_matrix};
    use crate::sharing::{AggregateConfig, TopologySource};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_blob_truth(agents: usize) -> MixtureParams<f64> {
        MixtureParams {
            means: vec![vec![-2.0, 0.0], vec![2.5, 1.0]],
            precisions: vec![
                Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]),
                Matrix::from_rows(&[vec![1.0, -0.3], vec![-0.3, 1.5]]),
            ],
            weights: (0..agents)
                .map(|a| {
                    let p = 0.2 + 0.6 * a as f64 / (agents.max(2) - 1) as f64;
                    vec![p, 1.0 - p]
                })
                .collect(),
        }
    }

    fn two_blob_data(agents: usize, n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_mixture(&two_blob_truth(agents), &vec![n; agents], &mut rng).unwrap().0
    }

    fn scalar_params(means: &[f64], weights: &[f64]) -> MixtureParams<f64> {
        MixtureParams {
            means: means.iter().map(|&m| vec![m]).collect(),
            precisions: means.iter().map(|_| Matrix::identity(1)).collect(),
            weights: vec![weights.to_vec()],
        }
    }

    #[test]
    fn responsibility_examples() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![4.0]]);
        let one = responsibilities(&x, &scalar_params(&[0.0], &[1.0]), 0).unwrap();
        assert!(one.as_slice().iter().all(|&r| r == 1.0));
        let two = responsibilities(&x, &scalar_params(&[0.0, 2.0], &[0.5, 0.5]), 0).unwrap();
        assert_abs_diff_eq!(two[(0, 0)], 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(two[(1, 0)], 0.5, epsilon = 1e-12);
        for n in 0..3 {
            assert_abs_diff_eq!(two[(n, 0)] + two[(n, 1)], 1.0, epsilon = 1e-12);
        }
        let mut singular = scalar_params(&[0.0, 2.0], &[0.5, 0.5]);
        singular.precisions[1] = Matrix::zeros(1, 1);
        assert!(matches!(responsibilities(&x, &singular, 0), Err(Error::SingularPrecision { component: 1 })));
    }

    #[test]
    fn local_stats_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let r = Matrix::from_rows(&[vec![0.3, 0.7]]);
        let st = local_stats(&x, &r).unwrap();
        let expected = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).scale(0.3);
        assert!(st.scatters[0].max_abs_diff(&expected) < 1e-15);
        assert_abs_diff_eq!(st.counts.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let hard = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let st = local_stats(&x, &hard).unwrap();
        assert_eq!(st.counts, vec![2.0, 0.0]);
        assert_eq!(st.sums[0], vec![-2.0, 2.5]);
        let flat = st.flatten();
        assert_eq!(flat.len(), Stats::<f64>::flat_len(2, 2));
        assert_eq!(Stats::from_flat(2, 2, &flat).unwrap(), st);
        assert!(local_stats(&x, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn identical_locals_aggregate_linearly() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]);
        let r = Matrix::from_rows(&[vec![0.4, 0.6], vec![0.9, 0.1]]);
        let st = local_stats(&x, &r).unwrap();
        let w = transition_matrix::<f64>(&build_ring(4).unwrap(), None).unwrap();
        let agg = Aggregator::Consensus { w, cfg: AggregateConfig::with_tol(1e-10) };
        let (global, cost) = aggregate_stats(&vec![st.clone(); 4], &agg, 0).unwrap();
        for (g, l) in global.flatten().iter().zip(st.flatten()) {
            assert_abs_diff_eq!(*g, 4.0 * l, epsilon = 1e-9);
        }
        assert_eq!(cost.total_iterations, 0);
    }

    #[test]
    fn m_step_limits() {
        // λ0 = ρ = 0, K = 1: sample mean and inverse sample covariance
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 1.0], vec![2.0, 4.0], vec![0.0, 1.0]]);
        let st = local_stats(&x, &Matrix::from_rows(&vec![vec![1.0]; 4])).unwrap();
        let hyper = Hyperparams { gamma: 1.0, lambda0: 0.0, rho: 0.0, covariance: CovarianceForm::Derived };
        let (mu, lam) = update_gaussian_params(&st, &hyper).unwrap();
        assert_abs_diff_eq!(mu[0][0], 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(mu[0][1], 1.5, epsilon = 1e-14);
        let mut cov = Matrix::zeros(2, 2);
        for n in 0..4 {
            let d = [x[(n, 0)] - 1.5, x[(n, 1)] - 1.5];
            cov.add_outer(0.25, &d, &d);
        }
        assert!(lam[0].matmul(&cov).max_abs_diff(&Matrix::identity(2)) < 1e-12);
        let shrunk = Hyperparams { lambda0: 2.0, ..hyper };
        let (mu2, _) = update_gaussian_params(&st, &shrunk).unwrap();
        assert!(mu2[0].iter().map(|v| v * v).sum::<f64>() < mu[0].iter().map(|v| v * v).sum::<f64>());
        let empty = Stats { counts: vec![0.0], sums: vec![vec![0.0]], scatters: vec![Matrix::zeros(1, 1)] };
        assert!(matches!(update_gaussian_params(&empty, &hyper), Err(Error::EmptyComponent { component: 0, .. })));
    }

    #[test]
    fn scalar_precision_with_penalty() {
        // N = 2 samples ±1 around 0 gives Σ = 1; ρ = 1 makes r = ρ/N = 0.5
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0]]);
        let st = local_stats(&x, &Matrix::from_rows(&[vec![1.0], vec![1.0]])).unwrap();
        let hyper = Hyperparams { gamma: 1.0, lambda0: 0.0, rho: 1.0, covariance: CovarianceForm::Derived };
        let (_, lam) = update_gaussian_params(&st, &hyper).unwrap();
        assert_abs_diff_eq!(lam[0][(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_scatter_is_repaired() {
        // two identical samples: zero covariance with no penalty
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let st = local_stats(&x, &Matrix::from_rows(&[vec![1.0], vec![1.0]])).unwrap();
        let hyper = Hyperparams { gamma: 1.0, lambda0: 0.0, rho: 0.0, covariance: CovarianceForm::Derived };
        let (_, lam) = update_gaussian_params(&st, &hyper).unwrap();
        assert!(lam[0].cholesky().is_ok());
    }

    #[test]
    fn glasso_examples() {
        assert_abs_diff_eq!(glasso(&Matrix::from_diagonal(&[1.0]), 0.5).unwrap()[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        let sigma = Matrix::from_rows(&[vec![2.0, 0.3, 0.1], vec![0.3, 1.0, -0.2], vec![0.1, -0.2, 1.5]]);
        let inv = glasso(&sigma, 0.0).unwrap();
        assert!(inv.matmul(&sigma).max_abs_diff(&Matrix::identity(3)) < 1e-12);
        let big: Matrix<f64> = glasso(&sigma, 3.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(big[(i, j)].abs() < 1e-8);
                }
            }
            assert_abs_diff_eq!(big[(i, i)], 1.0 / (sigma[(i, i)] + 3.0), epsilon = 1e-12);
        }
        let sol = glasso_with(&sigma, 0.1, GlassoOptions::default()).unwrap();
        assert!(sol.residual <= 1e-6);
        assert!(sol.precision.cholesky().is_ok());
        assert!(matches!(glasso(&Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]), 0.1), Err(Error::NotSymmetric { .. })));
        assert!(glasso(&sigma, -1.0).is_err());
    }

    #[test]
    fn glasso_handles_singular_input_with_penalty() {
        let v = [1.0, 2.0, -1.0];
        let mut sigma = Matrix::zeros(3, 3);
        sigma.add_outer(1.0, &v, &v);
        let sol = glasso_with(&sigma, 0.2, GlassoOptions::default()).unwrap();
        assert!(sol.precision.cholesky().is_ok());
    }

    #[test]
    fn glasso_f32() {
        let sigma = Matrix::<f32>::from_rows(&[vec![1.0, 0.4], vec![0.4, 1.0]]);
        let lam = glasso(&sigma, 0.05).unwrap();
        assert!(lam.cholesky().is_ok());
    }

    #[test]
    fn pi_examples() {
        let pi = update_pi(&[7.0, 3.0], 10.0, 1.0);
        assert_abs_diff_eq!(pi[0], 8.0 / 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pi[1], 4.0 / 12.0, epsilon = 1e-15);
        assert_eq!(update_pi(&[0.0, 0.0, 0.0, 0.0], 0.0, 1.0), vec![0.25; 4]);
        let sharp = update_pi(&[10.0, 0.0], 10.0, 1e-12);
        assert!(sharp[0] > 1.0 - 1e-12 && sharp[1] < 1e-12);
    }

    #[test]
    fn objective_single_point_by_hand() {
        // M = 1, K = 1, one sample x = 2, μ = 1, Λ = 4, π = 1
        let data = Dataset::new(vec![Matrix::from_rows(&[vec![2.0]])]).unwrap();
        let params = MixtureParams { means: vec![vec![1.0]], precisions: vec![Matrix::from_diagonal(&[4.0])], weights: vec![vec![1.0]] };
        let hyper = Hyperparams { gamma: 1.0, lambda0: 0.5, rho: 0.2, covariance: CovarianceForm::Derived };
        let resp = Responsibilities { per_agent: vec![Matrix::from_rows(&[vec![1.0]])] };
        let value = penalized_objective(&data, &params, &resp, &hyper).unwrap();
        let log_lik = 0.5 * 4.0f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 4.0;
        let expected = log_lik - 0.5 * 0.5 * 4.0 * 1.0 - 0.5 * 0.2 * 4.0;
        assert_abs_diff_eq!(value, expected, epsilon = 1e-13);
    }

    #[test]
    fn objective_is_label_invariant() {
        let data = two_blob_data(3, 30, 5);
        let params = two_blob_truth(3);
        let hyper = Hyperparams::default();
        let resp = e_step(&data, &params).unwrap();
        let base = penalized_objective(&data, &params, &resp, &hyper).unwrap();
        let swapped = params.permuted(&[1, 0]);
        let resp2 = e_step(&data, &swapped).unwrap();
        let other = penalized_objective(&data, &swapped, &resp2, &hyper).unwrap();
        assert_abs_diff_eq!(base, other, epsilon = 1e-9 * base.abs());
    }

    #[test]
    fn em_ascends_and_recovers_blobs() {
        let data = two_blob_data(3, 150, 11);
        let res = federated_em(&data, 2, &Hyperparams::default(), &Aggregator::Direct, &EmOptions { seed: 4, ..EmOptions::default() }).unwrap();
        assert!(res.converged);
        for w in res.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        let truth = two_blob_truth(3);
        let mut order = [0, 1];
        if res.params.means[0][0] > res.params.means[1][0] {
            order = [1, 0];
        }
        for (k, &fit) in order.iter().enumerate() {
            for d in 0..2 {
                assert!((res.params.means[fit][d] - truth.means[k][d]).abs() < 0.3);
            }
        }
        // agent weights differ: agent 0 favors the first blob, agent 2 the second
        let first = |a: usize| res.params.weights[a][order[0]];
        assert!(first(0) < first(2));
        for resp in &res.responsibilities.per_agent {
            for n in 0..resp.rows() {
                assert_abs_diff_eq!(resp.row(n).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_agents_share_weights() {
        let one = two_blob_data(1, 60, 3).agent(0).clone();
        let data = Dataset::new(vec![one.clone(), one.clone(), one]).unwrap();
        let w = transition_matrix::<f64>(&build_ring(3).unwrap(), None).unwrap();
        let agg = Aggregator::Consensus { w, cfg: AggregateConfig::with_tol(1e-10) };
        federated_em_observed(&data, 2, &Hyperparams::default(), &agg, &EmOptions { max_rounds: 15, ..EmOptions::default() }, |_, p| {
            for a in 1..3 {
                assert_eq!(p.weights[a], p.weights[0]);
            }
        })
        .unwrap();
    }

    #[test]
    fn single_component_matches_closed_form() {
        let data = two_blob_data(3, 40, 8);
        let hyper = Hyperparams::default();
        let res = federated_em(&data, 1, &hyper, &Aggregator::Direct, &EmOptions::default()).unwrap();
        let pooled = data.pooled();
        let n = pooled.rows() as f64;
        let mut sum = [0.0; 2];
        let mut scatter = Matrix::zeros(2, 2);
        for i in 0..pooled.rows() {
            let row = pooled.row(i);
            sum[0] += row[0];
            sum[1] += row[1];
            scatter.add_outer(1.0, row, row);
        }
        let mu: Vec<f64> = sum.iter().map(|s| s / (hyper.lambda0 + n)).collect();
        let mut sigma = scatter.scale(1.0 / n);
        sigma.add_outer(-(n + hyper.lambda0) / n, &mu, &mu);
        let lam = glasso(&sigma, hyper.rho / n).unwrap();
        assert!(res.rounds <= 2);
        for d in 0..2 {
            assert_abs_diff_eq!(res.params.means[0][d], mu[d], epsilon = 1e-10);
        }
        assert!(res.params.precisions[0].max_abs_diff(&lam) < 1e-8);
    }

    #[test]
    fn chunked_em_tracks_direct_em() {
        let data = two_blob_data(3, 80, 21);
        let hyper = Hyperparams::default();
        let opts = EmOptions { seed: 2, tol: 1e-9, ..EmOptions::default() };
        let w = transition_matrix::<f64>(&build_ring(3).unwrap(), None).unwrap();
        let agg = Aggregator::Chunked {
            source: TopologySource::Relabel(w),
            n_chunks: 3,
            cfg: AggregateConfig::with_tol(1e-8),
            chunk_range: None,
        };
        let opts = EmOptions { init: Some(direct_init(&data, &hyper, 2)), ..opts };
        let direct = federated_em(&data, 2, &hyper, &Aggregator::Direct, &opts).unwrap();
        let chunked = federated_em(&data, 2, &hyper, &agg, &opts).unwrap();
        for k in 0..2 {
            for d in 0..2 {
                let (a, b) = (chunked.params.means[k][d], direct.params.means[k][d]);
                assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0));
            }
        }
        for w in chunked.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-5 * w[0].abs());
        }
        assert!(chunked.cost.scalar_messages > 0);
    }

    fn direct_init(data: &Dataset<f64>, hyper: &Hyperparams<f64>, k: usize) -> MixtureParams<f64> {
        initialize(data, k, hyper, &Aggregator::Direct, 2).unwrap().0
    }

    #[test]
    fn empty_component_is_reseeded() {
        // three components for data with one tight cluster far from the rest
        let x = Matrix::from_rows(&[vec![0.0], vec![0.1], vec![-0.1], vec![0.05], vec![10.0]]);
        let data = Dataset::new(vec![x.clone(), x.clone(), x]).unwrap();
        let init = MixtureParams {
            means: vec![vec![0.0], vec![0.02], vec![-1e3]],
            precisions: vec![Matrix::identity(1), Matrix::identity(1), Matrix::from_diagonal(&[100.0])],
            weights: vec![vec![0.4, 0.4, 0.2]; 3],
        };
        let res = federated_em(&data, 3, &Hyperparams::default(), &Aggregator::Direct, &EmOptions { init: Some(init), max_rounds: 30, ..EmOptions::default() }).unwrap();
        assert!(res.reseeded.iter().any(|&(_, k)| k == 2));
        for p in &res.params.precisions {
            assert!(p.cholesky().is_ok());
        }
    }

    #[test]
    fn verbatim_mode_runs() {
        let data = two_blob_data(3, 50, 1);
        let hyper = Hyperparams { covariance: CovarianceForm::Uncentered, ..Hyperparams::default() };
        let res = federated_em(&data, 2, &hyper, &Aggregator::Direct, &EmOptions { max_rounds: 20, ..EmOptions::default() }).unwrap();
        for p in &res.params.precisions {
            assert!(p.cholesky().is_ok());
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::<f64>::new(vec![]).is_err());
        assert!(Dataset::new(vec![Matrix::<f64>::zeros(2, 2), Matrix::zeros(2, 3)]).is_err());
        assert!(Dataset::new(vec![Matrix::<f64>::zeros(0, 2)]).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let truth = two_blob_truth(2);
        let a = sample_mixture(&truth, &[20, 30], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mixture(&truth, &[20, 30], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.samples(1), 30);
    }

    proptest! {
        #[test]
        fn responsibility_rows_sum_to_one(seed in 0u64..200, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = MixtureParams {
                means: (0..k).map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect(),
                precisions: (0..k).map(|_| Matrix::from_diagonal(&[rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0)])).collect(),
                weights: vec![update_pi(&(0..k).map(|_| rng.gen_range(0.0..5.0)).collect::<Vec<f64>>(), 0.0, 1.0)],
            };
            let x = Matrix::from_rows(&(0..20).map(|_| vec![rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect::<Vec<_>>());
            let r = responsibilities(&x, &params, 0).unwrap();
            for n in 0..20 {
                prop_assert!((r.row(n).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.row(n).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn pi_is_simplex(counts in proptest::collection::vec(0.0f64..50.0, 1..6), gamma in 1e-3f64..5.0) {
            let total: f64 = counts.iter().sum();
            let pi = update_pi(&counts, total, gamma);
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(pi.iter().all(|&p| p > 0.0));
        }
    }
}
