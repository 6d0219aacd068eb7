//! Privacy-preserving sums on top of dynamic consensus.
//!
//! Two layers hide each agent's raw value `ξ_s` from its neighbors:
//!
//! * **Shamir sharing.** Agent `a` publishes `g_a(n) = ξ_a + Σ_i R^a_i n^i`
//!   for `n = 1..S` instead of `ξ_a`. After one consensus per evaluation
//!   point, every agent holds `ḡ(n) = Σ_a g_a(n)` and interpolates the
//!   intercept `ḡ(0) = Σ_a ξ_a`.
//! * **Random chunking.** Agent `s` splits `ξ_s` into `N_C` additive chunks
//!   and runs one consensus per chunk, each over a freshly shuffled topology.
//!
//! The degree-`i` Shamir coefficient is drawn on `[-B/S^i, B/S^i]`, which
//! keeps `|g_a(n)| ≤ |ξ_a| + B·S` on the evaluation points. The `S` consensus
//! instances run in lockstep: with a common iteration count, interpolating
//! the consensus outputs is the same linear map as interpolating the inputs,
//! so the error of the recovered intercept matches plain consensus instead
//! of being amplified by the Lagrange weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{run_consensus_lockstep, run_consensus_observed};
use crate::error::{Error, Result};
use crate::graph::{build_random_regular_with, transition_matrix, Graph, TransitionMatrix};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Interpolation is refused beyond this many points.
pub const MAX_INTERPOLATION_POINTS: usize = 64;

/// Sees every value an aggregation protocol puts on the wire.
pub trait WireObserver<T> {
    /// A consensus round starts on `w`. `slot_of_agent[a]` is the node of the
    /// round's physical topology that agent `a` occupies.
    fn begin_round(&mut self, _round: usize, _w: &TransitionMatrix<T>, _slot_of_agent: &[usize]) {}

    /// Every agent broadcasts `state[a]` to its neighbors at `iteration`.
    fn broadcast(&mut self, _round: usize, _iteration: usize, _state: &[T]) {}
}

/// Observer that ignores everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Unobserved;

impl<T> WireObserver<T> for Unobserved {}

/// Shared knobs for the consensus-based aggregators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig<T> {
    /// Consensus step size; `None` uses `1/(d_max + 1)`.
    pub eps: Option<T>,
    /// Relative error target of every consensus run.
    pub tol: T,
    pub max_iters: Option<usize>,
    /// Agent whose view of the total is reported.
    pub reporter: usize,
}

impl<T: Scalar> AggregateConfig<T> {
    pub fn with_tol(tol: T) -> Self {
        Self {
            eps: None,
            tol,
            max_iters: None,
            reporter: 0,
        }
    }
}

/// Result of one privacy-preserving sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateOutcome<T> {
    /// The reporting agent's estimate of `Σ_s ξ_s`.
    pub total: T,
    /// Every agent's estimate of the total.
    pub agent_totals: Vec<T>,
    /// Consensus rounds run (1, `S`, or `N_C`).
    pub rounds: usize,
    /// Iterations summed over all rounds.
    pub total_iterations: usize,
    /// Scalars sent between distinct agents.
    pub scalar_messages: usize,
}

impl<T: Scalar> AggregateOutcome<T> {
    /// Largest disagreement between two agents' totals.
    pub fn spread(&self) -> T {
        let (lo, hi) = self
            .agent_totals
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

fn check_agents<T>(values: &[T], w: &TransitionMatrix<T>, cfg: &AggregateConfig<T>) -> Result<()>
where
    T: Scalar,
{
    if values.len() != w.size() {
        return Err(Error::DimensionMismatch {
            expected: w.size(),
            got: values.len(),
        });
    }
    if cfg.reporter >= values.len() {
        return Err(Error::InvalidParameter(format!(
            "reporter {} is not one of the {} agents",
            cfg.reporter,
            values.len()
        )));
    }
    Ok(())
}

/// Plain dynamic consensus with no hiding: neighbors see `ξ_s` in the first
/// iteration.
pub fn plain_aggregate<T, O>(
    values: &[T],
    w: &TransitionMatrix<T>,
    cfg: &AggregateConfig<T>,
    observer: &mut O,
) -> Result<AggregateOutcome<T>>
where
    T: Scalar,
    O: WireObserver<T> + ?Sized,
{
    check_agents(values, w, cfg)?;
    let identity: Vec<usize> = (0..values.len()).collect();
    observer.begin_round(0, w, &identity);
    let run = run_consensus_observed(w, values, cfg.tol, cfg.max_iters, |t, x| {
        observer.broadcast(0, t, x)
    })?;
    let s = T::from_usize_lossy(values.len());
    let agent_totals: Vec<T> = run.result.iter().map(|&x| s * x).collect();
    Ok(AggregateOutcome {
        total: agent_totals[cfg.reporter],
        agent_totals,
        rounds: 1,
        total_iterations: run.iterations,
        scalar_messages: run.iterations * w.graph().message_links(),
    })
}

/// Per-agent Shamir polynomials and their evaluations on `n = 1..S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShamirShareSet<T> {
    /// Row `a`: `(ξ_a, R^a_1, …, R^a_{S-1})`.
    pub coefficients: Vec<Vec<T>>,
    /// `evaluations[(a, n-1)] = g_a(n)`.
    pub evaluations: Matrix<T>,
}

impl<T: Scalar> ShamirShareSet<T> {
    pub fn agents(&self) -> usize {
        self.coefficients.len()
    }

    /// `Σ_a g_a(n)` for `n = 1..S`.
    pub fn summed_evaluations(&self) -> Vec<T> {
        let e = &self.evaluations;
        (0..e.cols())
            .map(|n| (0..e.rows()).map(|a| e[(a, n)]).sum())
            .collect()
    }
}

/// Evaluates `Σ_i c_i x^i` by Horner's rule.
pub fn horner<T: Scalar>(coefficients: &[T], x: T) -> T {
    coefficients
        .iter()
        .rev()
        .fold(T::zero(), |acc, &c| acc * x + c)
}

pub fn shamir_shares<T: Scalar>(values: &[T], coeff_range: T, seed: u64) -> Result<ShamirShareSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shamir_shares_with(values, coeff_range, &mut rng)
}

pub fn shamir_shares_with<T, R>(values: &[T], coeff_range: T, rng: &mut R) -> Result<ShamirShareSet<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
{
    let s = values.len();
    if s < 3 {
        return Err(Error::InvalidSize {
            what: "Shamir sharing",
            got: s,
            min: 3,
        });
    }
    if !(coeff_range >= T::zero()) || !coeff_range.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "coefficient range must be finite and non-negative, got {coeff_range}"
        )));
    }
    let sf = T::from_usize_lossy(s);
    let mut coefficients = Vec::with_capacity(s);
    let mut evaluations = Matrix::zeros(s, s);
    for (a, &xi) in values.iter().enumerate() {
        let mut row = Vec::with_capacity(s);
        row.push(xi);
        let mut bound = coeff_range;
        for _ in 1..s {
            bound /= sf;
            row.push(uniform(rng, bound));
        }
        for n in 1..=s {
            evaluations[(a, n - 1)] = horner(&row, T::from_usize_lossy(n));
        }
        coefficients.push(row);
    }
    Ok(ShamirShareSet {
        coefficients,
        evaluations,
    })
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, bound: T) -> T {
    if bound == T::zero() {
        return T::zero();
    }
    let u: f64 = rng.gen_range(-1.0..=1.0);
    T::lit(u) * bound
}

/// Weights `w_l = Π_{m≠l} m/(m-l)` for points `1..=points`, so that
/// `p(0) = Σ_l w_l p(l)` for every polynomial of degree below `points`.
/// Magnitudes are accumulated as log-sums with the sign `(-1)^{l-1}` tracked
/// separately.
pub fn lagrange_weights<T: Scalar>(points: usize) -> Result<Vec<T>> {
    if points == 0 {
        return Err(Error::InvalidSize {
            what: "interpolation",
            got: 0,
            min: 1,
        });
    }
    if points > MAX_INTERPOLATION_POINTS {
        return Err(Error::SizeLimit {
            what: "Lagrange interpolation",
            size: points,
            limit: MAX_INTERPOLATION_POINTS,
        });
    }
    (1..=points)
        .map(|l| {
            let log_mag: T = (1..=points)
                .filter(|&m| m != l)
                .map(|m| {
                    T::from_usize_lossy(m).ln() - T::from_usize_lossy(m.abs_diff(l)).ln()
                })
                .sum();
            let sign = if l % 2 == 1 { T::one() } else { -T::one() };
            let w = sign * log_mag.exp();
            if w.is_finite() {
                Ok(w)
            } else {
                Err(Error::NumericOverflow { points })
            }
        })
        .collect()
}

/// Recovers `ḡ(0)` from `ḡ(1), …, ḡ(S)` with a compensated weighted sum.
pub fn lagrange_intercept<T: Scalar>(aggregates: &[T]) -> Result<T> {
    let weights = lagrange_weights::<T>(aggregates.len())?;
    let mut sum = T::zero();
    let mut carry = T::zero();
    for (&w, &g) in weights.iter().zip(aggregates) {
        let term = w * g;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            carry += (sum - t) + term;
        } else {
            carry += (term - t) + sum;
        }
        sum = t;
    }
    let out = sum + carry;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NumericOverflow {
            points: aggregates.len(),
        })
    }
}

/// Default Shamir coefficient range `10 · max_s |ξ_s|`.
pub fn default_coeff_range<T: Scalar>(values: &[T]) -> T {
    T::lit(10.0) * values.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// Shamir-shared sum over a fixed topology.
///
/// Runs the `S` evaluation-point consensuses in lockstep, then every agent
/// interpolates its own view of `ḡ(1..S)`.
pub fn shamir_aggregate<T, O>(
    values: &[T],
    w: &TransitionMatrix<T>,
    cfg: &AggregateConfig<T>,
    coeff_range: Option<T>,
    seed: u64,
    observer: &mut O,
) -> Result<AggregateOutcome<T>>
where
    T: Scalar,
    O: WireObserver<T> + ?Sized,
{
    check_agents(values, w, cfg)?;
    let s = values.len();
    if s > MAX_INTERPOLATION_POINTS {
        return Err(Error::SizeLimit {
            what: "Shamir aggregation",
            size: s,
            limit: MAX_INTERPOLATION_POINTS,
        });
    }
    let range = coeff_range.unwrap_or_else(|| default_coeff_range(values));
    let shares = shamir_shares(values, range, seed)?;
    let columns: Vec<Vec<T>> = (0..s).map(|n| shares.evaluations.column(n)).collect();
    let identity: Vec<usize> = (0..s).collect();
    for n in 0..s {
        observer.begin_round(n, w, &identity);
    }
    let batch = run_consensus_lockstep(w, &columns, cfg.tol, cfg.max_iters, |t, n, x| {
        observer.broadcast(n, t, x)
    })?;
    let sf = T::from_usize_lossy(s);
    let agent_totals = (0..s)
        .map(|a| {
            let view: Vec<T> = batch.results.iter().map(|col| sf * col[a]).collect();
            lagrange_intercept(&view)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(AggregateOutcome {
        total: agent_totals[cfg.reporter],
        agent_totals,
        rounds: s,
        total_iterations: s * batch.iterations,
        scalar_messages: s * batch.iterations * w.graph().message_links(),
    })
}

/// Additive chunks of every agent's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSet<T> {
    pub n_chunks: usize,
    /// `chunks[s][h]` is chunk `h` of agent `s`.
    pub chunks: Vec<Vec<T>>,
}

impl<T: Scalar> ChunkSet<T> {
    /// Chunk `h` of every agent.
    pub fn round(&self, h: usize) -> Vec<T> {
        self.chunks.iter().map(|row| row[h]).collect()
    }

    /// `Σ_h ξ_s^[h]`, summed in chunk order.
    pub fn row_sum(&self, s: usize) -> T {
        self.chunks[s].iter().copied().sum()
    }
}

/// Default chunk range `10 · max(1, |value|)`.
pub fn default_chunk_range<T: Scalar>(value: T) -> T {
    T::lit(10.0) * value.abs().max(T::one())
}

/// Splits `value` into `n_chunks` additive pieces.
///
/// The first `n_chunks - 1` pieces are uniform on `[-range, range]`,
/// quantized to the dyadic grid `q = 2^(⌈log2(n_chunks·range)⌉ - mantissa)`
/// so that their partial sums are exact; the last piece is
/// `value - partial sum`. The pieces sum back to `value` exactly whenever
/// `value` lies on that grid (any integer of moderate size does), and to
/// within one grid step otherwise.
pub fn random_chunks<T, R>(value: T, n_chunks: usize, chunk_range: T, rng: &mut R) -> Result<Vec<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
{
    if n_chunks < 1 {
        return Err(Error::InvalidParameter("chunk count must be at least 1".into()));
    }
    if !(chunk_range >= T::zero()) || !chunk_range.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "chunk range must be finite and non-negative, got {chunk_range}"
        )));
    }
    let grid = chunk_grid(chunk_range * T::from_usize_lossy(n_chunks));
    let mut out = Vec::with_capacity(n_chunks);
    let mut partial = T::zero();
    for _ in 1..n_chunks {
        let raw = uniform(rng, chunk_range);
        let c = if grid > T::zero() { (raw / grid).round() * grid } else { raw };
        partial += c;
        out.push(c);
    }
    out.push(value - partial);
    Ok(out)
}

fn chunk_grid<T: Scalar>(span: T) -> T {
    if !(span > T::zero()) {
        return T::zero();
    }
    // mantissa bits: 52 for f64, 23 for f32
    let mantissa = (-T::epsilon().log2()).round();
    T::lit(2.0).powf(span.log2().ceil() - mantissa)
}

pub fn chunk_values<T, R>(values: &[T], n_chunks: usize, chunk_range: Option<T>, rng: &mut R) -> Result<ChunkSet<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
{
    let chunks = values
        .iter()
        .map(|&v| {
            let range = chunk_range.unwrap_or_else(|| default_chunk_range(v));
            random_chunks(v, n_chunks, range, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkSet { n_chunks, chunks })
}

/// Where each chunk round's topology comes from.
#[derive(Clone, Debug)]
pub enum TopologySource<T> {
    /// The same graph every round, without relabeling.
    Fixed(TransitionMatrix<T>),
    /// A fixed graph under a fresh uniform node relabeling per round.
    Relabel(TransitionMatrix<T>),
    /// A fresh random `degree`-regular graph per round.
    RandomRegular { nodes: usize, degree: usize, eps: Option<T> },
}

impl<T: Scalar> TopologySource<T> {
    pub fn relabel(g: &Graph, eps: Option<T>) -> Result<Self> {
        Ok(Self::Relabel(transition_matrix(g, eps)?))
    }

    pub fn nodes(&self) -> usize {
        match self {
            Self::Fixed(w) | Self::Relabel(w) => w.size(),
            Self::RandomRegular { nodes, .. } => *nodes,
        }
    }

    /// Draws the next round's operator and the agent-to-slot placement.
    pub fn next_round<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(TransitionMatrix<T>, Vec<usize>)> {
        match self {
            Self::Fixed(w) => Ok((w.clone(), (0..w.size()).collect())),
            Self::Relabel(w) => {
                let mut perm: Vec<usize> = (0..w.size()).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), rng);
                // slot i is taken by agent perm[i]
                let relabeled = w.relabeled(&perm)?;
                let mut slot_of_agent = vec![0; perm.len()];
                for (slot, &agent) in perm.iter().enumerate() {
                    slot_of_agent[agent] = slot;
                }
                Ok((relabeled, slot_of_agent))
            }
            Self::RandomRegular { nodes, degree, eps } => {
                let g = build_random_regular_with(*nodes, *degree, rng)?;
                let w = transition_matrix(&g, *eps)?;
                Ok((w, (0..*nodes).collect()))
            }
        }
    }
}

/// Chunked sum: one consensus per chunk, each over a fresh topology from
/// `source`. Rounds run strictly in sequence.
pub fn chunked_aggregate<T, O>(
    values: &[T],
    source: &TopologySource<T>,
    n_chunks: usize,
    cfg: &AggregateConfig<T>,
    chunk_range: Option<T>,
    seed: u64,
    observer: &mut O,
) -> Result<AggregateOutcome<T>>
where
    T: Scalar,
    O: WireObserver<T> + ?Sized,
{
    let s = values.len();
    if source.nodes() != s {
        return Err(Error::DimensionMismatch {
            expected: source.nodes(),
            got: s,
        });
    }
    if cfg.reporter >= s {
        return Err(Error::InvalidParameter(format!(
            "reporter {} is not one of the {s} agents",
            cfg.reporter
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks = chunk_values(values, n_chunks, chunk_range, &mut rng)?;
    let sf = T::from_usize_lossy(s);
    let mut agent_totals = vec![T::zero(); s];
    let mut total_iterations = 0;
    let mut scalar_messages = 0;
    for h in 0..n_chunks {
        let (w, slots) = source.next_round(&mut rng).map_err(|e| e.at("chunk round", h))?;
        observer.begin_round(h, &w, &slots);
        let run = run_consensus_observed(&w, &chunks.round(h), cfg.tol, cfg.max_iters, |t, x| {
            observer.broadcast(h, t, x)
        })
        .map_err(|e| e.at("chunk round", h))?;
        for (acc, &x) in agent_totals.iter_mut().zip(&run.result) {
            *acc += sf * x;
        }
        total_iterations += run.iterations;
        scalar_messages += run.iterations * w.graph().message_links();
    }
    Ok(AggregateOutcome {
        total: agent_totals[cfg.reporter],
        agent_totals,
        rounds: n_chunks,
        total_iterations,
        scalar_messages,
    })
}

/// How vectors of per-agent statistics are summed across agents.
#[derive(Clone, Debug)]
pub enum Aggregator<T> {
    /// Exact sum, as if a trusted party added the vectors.
    Direct,
    /// Plain consensus, all elements advanced in lockstep.
    Consensus { w: TransitionMatrix<T>, cfg: AggregateConfig<T> },
    /// One Shamir-shared sum per element.
    Shamir {
        w: TransitionMatrix<T>,
        cfg: AggregateConfig<T>,
        coeff_range: Option<T>,
    },
    /// One chunked sum per element.
    Chunked {
        source: TopologySource<T>,
        n_chunks: usize,
        cfg: AggregateConfig<T>,
        chunk_range: Option<T>,
    },
}

/// Element-wise sum of per-agent vectors with its communication cost.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSum<T> {
    pub totals: Vec<T>,
    pub total_iterations: usize,
    pub scalar_messages: usize,
}

impl<T: Scalar> Aggregator<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Consensus { .. } => "consensus",
            Self::Shamir { .. } => "shamir",
            Self::Chunked { .. } => "chunked",
        }
    }

    /// Number of agents the topology expects, if any.
    pub fn agents(&self) -> Option<usize> {
        match self {
            Self::Direct => None,
            Self::Consensus { w, .. } | Self::Shamir { w, .. } => Some(w.size()),
            Self::Chunked { source, .. } => Some(source.nodes()),
        }
    }

    /// Sums `locals[a]` over agents `a`. Failures of element `i` are reported
    /// as stage `"statistic"` with index `i`, except for plain consensus,
    /// whose lockstep run fails as a whole.
    pub fn sum_vectors(&self, locals: &[Vec<T>], seed: u64) -> Result<VectorSum<T>> {
        let s = locals.len();
        let p = locals.first().map_or(0, Vec::len);
        if let Some(bad) = locals.iter().find(|v| v.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: bad.len(),
            });
        }
        if let Some(expected) = self.agents() {
            if expected != s {
                return Err(Error::DimensionMismatch { expected, got: s });
            }
        }
        let column = |i: usize| -> Vec<T> { locals.iter().map(|v| v[i]).collect() };
        match self {
            Self::Direct => Ok(VectorSum {
                totals: (0..p).map(|i| locals.iter().map(|v| v[i]).sum()).collect(),
                total_iterations: 0,
                scalar_messages: 0,
            }),
            Self::Consensus { w, cfg } => {
                check_agents(&vec![T::zero(); s], w, cfg)?;
                let columns: Vec<Vec<T>> = (0..p).map(column).collect();
                let batch = run_consensus_lockstep(w, &columns, cfg.tol, cfg.max_iters, |_, _, _| {})?;
                let sf = T::from_usize_lossy(s);
                Ok(VectorSum {
                    totals: batch.results.iter().map(|x| sf * x[cfg.reporter]).collect(),
                    total_iterations: p * batch.iterations,
                    scalar_messages: p * batch.iterations * w.graph().message_links(),
                })
            }
            Self::Shamir { w, cfg, coeff_range } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.per_element(p, |i| {
                    shamir_aggregate(&column(i), w, cfg, *coeff_range, rng.gen(), &mut Unobserved)
                })
            }
            Self::Chunked { source, n_chunks, cfg, chunk_range } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.per_element(p, |i| {
                    chunked_aggregate(&column(i), source, *n_chunks, cfg, *chunk_range, rng.gen(), &mut Unobserved)
                })
            }
        }
    }

    fn per_element<F>(&self, p: usize, mut one: F) -> Result<VectorSum<T>>
    where
        F: FnMut(usize) -> Result<AggregateOutcome<T>>,
    {
        let mut out = VectorSum {
            totals: Vec::with_capacity(p),
            total_iterations: 0,
            scalar_messages: 0,
        };
        for i in 0..p {
            let o = one(i).map_err(|e| e.at("statistic", i))?;
            out.totals.push(o.total);
            out.total_iterations += o.total_iterations;
            out.scalar_messages += o.scalar_messages;
        }
        Ok(out)
    }
}
