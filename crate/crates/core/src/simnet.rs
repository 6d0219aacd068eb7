//! Message-level simulation of the aggregation protocols and Monte Carlo
//! estimates of breach rates.
//!
//! [`run_protocol`] reruns a [`sharing`](crate::sharing) aggregator while
//! recording every scalar that crosses a link. [`breach_oracle`] decides from
//! such a log which victims an adversary could reconstruct.
//! [`monte_carlo_breach`] samples the neighbor-assignment model behind the
//! closed forms in [`privacy`](crate::privacy): each chunk round gives the
//! victim a fresh uniform set of neighbors (or edge slots).

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_complete, build_inverse_chord_expander, build_random_regular, build_ring, transition_matrix, Graph,
    TransitionMatrix,
};
use crate::privacy::AttackScenario;
use crate::scalar::Scalar;
use crate::sharing::{
    chunked_aggregate, plain_aggregate, shamir_aggregate, AggregateConfig, AggregateOutcome, TopologySource,
    WireObserver,
};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Communication topology by construction rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    Ring { nodes: usize },
    Complete { nodes: usize },
    Expander { nodes: usize },
    RandomRegular { nodes: usize, degree: usize, seed: u64 },
}

impl GraphSpec {
    pub fn nodes(&self) -> usize {
        match *self {
            Self::Ring { nodes }
            | Self::Complete { nodes }
            | Self::Expander { nodes }
            | Self::RandomRegular { nodes, .. } => nodes,
        }
    }

    pub fn build(&self) -> Result<Graph> {
        match *self {
            Self::Ring { nodes } => build_ring(nodes),
            Self::Complete { nodes } => build_complete(nodes),
            Self::Expander { nodes } => build_inverse_chord_expander(nodes),
            Self::RandomRegular { nodes, degree, seed } => build_random_regular(nodes, degree, seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Plain,
    Shamir,
    Chunk,
}

/// How chunk rounds obtain their topology.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reshuffle {
    /// Relabel the configured graph every round.
    #[default]
    Relabel,
    /// Draw a fresh random regular graph with the configured graph's degree.
    Regenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig<T> {
    pub graph: GraphSpec,
    pub protocol: Protocol,
    /// Chunk rounds; ignored by the other protocols.
    pub n_chunks: usize,
    pub eps: Option<T>,
    pub tol: T,
    pub seed: u64,
    pub reshuffle: Reshuffle,
}

/// One scalar sent from `sender` to `receiver`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message<T> {
    /// Chunk round, Shamir evaluation point (0-based), or 0 for plain runs.
    pub round: usize,
    pub iteration: usize,
    pub sender: usize,
    pub receiver: usize,
    pub payload: T,
}

/// The topology used in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTopology {
    /// Agent-level links `(a, b, multiplicity)` with `a ≤ b`.
    pub edges: Vec<(usize, usize, u32)>,
    /// `slot_of_agent[a]` is the physical node agent `a` occupies.
    pub slot_of_agent: Vec<usize>,
}

/// Every scalar sent during a run, in sending order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageLog<T> {
    pub rounds: Vec<RoundTopology>,
    pub messages: Vec<Message<T>>,
}

impl<T: Scalar> MessageLog<T> {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Messages of one round's first iteration: the raw shares.
    pub fn first_iteration(&self, round: usize) -> impl Iterator<Item = &Message<T>> {
        self.messages
            .iter()
            .filter(move |m| m.round == round && m.iteration == 0)
    }
}

struct Recorder<T> {
    log: MessageLog<T>,
    graphs: Vec<Graph>,
}

impl<T: Scalar> WireObserver<T> for Recorder<T> {
    fn begin_round(&mut self, round: usize, w: &TransitionMatrix<T>, slot_of_agent: &[usize]) {
        debug_assert_eq!(round, self.graphs.len());
        self.graphs.push(w.graph().clone());
        self.log.rounds.push(RoundTopology {
            edges: w.graph().edges(),
            slot_of_agent: slot_of_agent.to_vec(),
        });
    }

    fn broadcast(&mut self, round: usize, iteration: usize, state: &[T]) {
        let g = &self.graphs[round];
        for (a, &x) in state.iter().enumerate() {
            for &(b, _) in g.neighbors(a) {
                if b != a {
                    self.log.messages.push(Message {
                        round,
                        iteration,
                        sender: a,
                        receiver: b,
                        payload: x,
                    });
                }
            }
        }
    }
}

/// Runs `cfg.protocol` on `values` and records all traffic. The result is the
/// one [`sharing`](crate::sharing) returns for the same seed.
pub fn run_protocol<T: Scalar>(cfg: &SimConfig<T>, values: &[T]) -> Result<(AggregateOutcome<T>, MessageLog<T>)> {
    let g = cfg.graph.build()?;
    if values.len() != g.size() {
        return Err(Error::DimensionMismatch {
            expected: g.size(),
            got: values.len(),
        });
    }
    let w = transition_matrix(&g, cfg.eps)?;
    let agg = AggregateConfig {
        eps: cfg.eps,
        ..AggregateConfig::with_tol(cfg.tol)
    };
    let mut rec = Recorder {
        log: MessageLog::default(),
        graphs: Vec::new(),
    };
    let out = match cfg.protocol {
        Protocol::Plain => plain_aggregate(values, &w, &agg, &mut rec)?,
        Protocol::Shamir => shamir_aggregate(values, &w, &agg, None, cfg.seed, &mut rec)?,
        Protocol::Chunk => {
            let source = match cfg.reshuffle {
                Reshuffle::Relabel => TopologySource::Relabel(w),
                Reshuffle::Regenerate => TopologySource::RandomRegular {
                    nodes: g.size(),
                    degree: g.regular_degree().ok_or_else(|| {
                        Error::InvalidParameter("regenerating topologies needs a regular graph".into())
                    })? as usize,
                    eps: cfg.eps,
                },
            };
            chunked_aggregate(values, &source, cfg.n_chunks, &agg, None, cfg.seed, &mut rec)?
        }
    };
    Ok((out, rec.log))
}

/// Who is listening.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "members", rename_all = "snake_case")]
pub enum Adversary {
    /// A single curious agent.
    Node(usize),
    /// Agents pooling everything they receive.
    Colluders(Vec<usize>),
    /// Physical links `(slot, slot)` whose traffic is copied.
    TappedEdges(Vec<(usize, usize)>),
}

/// `flags[s]` is true when the adversary received agent `s`'s first-iteration
/// payload in every round of `log`. An agent in the adversary set is not its
/// own victim.
pub fn breach_oracle<T: Scalar>(log: &MessageLog<T>, adversary: &Adversary) -> Vec<bool> {
    let s = log.rounds.first().map_or(0, |r| r.slot_of_agent.len());
    let (nodes, taps): (HashSet<usize>, HashSet<(usize, usize)>) = match adversary {
        Adversary::Node(j) => ([*j].into_iter().collect(), HashSet::new()),
        Adversary::Colluders(set) => (set.iter().copied().collect(), HashSet::new()),
        Adversary::TappedEdges(edges) => (HashSet::new(), edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect()),
    };
    let mut flags = vec![!log.rounds.is_empty(); s];
    for (h, round) in log.rounds.iter().enumerate() {
        let mut seen = vec![false; s];
        for m in log.first_iteration(h) {
            let hit = if taps.is_empty() {
                nodes.contains(&m.receiver) && !nodes.contains(&m.sender)
            } else {
                let (u, v) = (round.slot_of_agent[m.sender], round.slot_of_agent[m.receiver]);
                taps.contains(&(u.min(v), u.max(v)))
            };
            if hit {
                seen[m.sender] = true;
            }
        }
        for (f, &hit) in flags.iter_mut().zip(&seen) {
            *f &= hit;
        }
    }
    flags
}

/// Empirical breach frequency with its Wilson 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub scenario: AttackScenario,
    pub trials: usize,
    pub breaches: usize,
    pub empirical_rate: f64,
    pub exact: Option<f64>,
    pub bound: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval at 95% for `hits` successes in `n` trials.
pub fn wilson_interval(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let low = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if hits == n { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

/// Minimum number of trials accepted by [`monte_carlo_breach`].
pub const MIN_TRIALS: usize = 1000;

/// Simulates `trials` independent runs of the neighbor-assignment model of
/// `scenario` for a fixed victim. Trial `i` draws from its own stream of the
/// master seed, so the count does not depend on scheduling.
pub fn monte_carlo_breach(scenario: &AttackScenario, trials: usize, seed: u64) -> Result<TrialReport> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let analytic = scenario.breach()?;
    let breaches = (0..trials)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            one_trial(scenario, &mut rng)
        })
        .count();
    let (ci_low, ci_high) = wilson_interval(breaches, trials);
    Ok(TrialReport {
        scenario: *scenario,
        trials,
        breaches,
        empirical_rate: breaches as f64 / trials as f64,
        exact: analytic.exact,
        bound: analytic.bound,
        ci_low,
        ci_high,
    })
}

fn one_trial(scenario: &AttackScenario, rng: &mut ChaCha8Rng) -> bool {
    match *scenario {
        AttackScenario::Independent { agents, degree, chunks, .. } => {
            // some single node receives a chunk in every round
            let mut alive = vec![true; agents - 1];
            for _ in 0..chunks {
                let mut here = vec![false; agents - 1];
                for j in sample(rng, agents - 1, degree) {
                    here[j] = true;
                }
                for (a, h) in alive.iter_mut().zip(&here) {
                    *a &= *h;
                }
            }
            alive.iter().any(|&a| a)
        }
        AttackScenario::Collusion { agents, degree, colluders, chunks } => {
            let mut bad = vec![false; agents - 1];
            for j in sample(rng, agents - 1, colluders) {
                bad[j] = true;
            }
            (0..chunks).all(|_| sample(rng, agents - 1, degree).iter().any(|j| bad[j]))
        }
        AttackScenario::Eavesdropping { edge_total, degree, tapped, chunks } => {
            let mut tap = vec![false; edge_total];
            for j in sample(rng, edge_total, tapped) {
                tap[j] = true;
            }
            (0..chunks).all(|_| sample(rng, edge_total, degree).iter().any(|j| tap[j]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::Unobserved;
    use rand::Rng;

    fn cfg(protocol: Protocol, s: usize, n_chunks: usize, seed: u64) -> SimConfig<f64> {
        SimConfig {
            graph: GraphSpec::Expander { nodes: s },
            protocol,
            n_chunks,
            eps: None,
            tol: 1e-8,
            seed,
            reshuffle: Reshuffle::Relabel,
        }
    }

    fn values(s: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..s).map(|_| rng.gen_range(-1.0..2.0)).collect()
    }

    #[test]
    fn plain_first_round_leaks_raw_values() {
        let xi = values(7, 1);
        let (out, log) = run_protocol(&cfg(Protocol::Plain, 7, 1, 0), &xi).unwrap();
        let mut senders = HashSet::new();
        for m in log.first_iteration(0) {
            assert_eq!(m.payload, xi[m.sender]);
            senders.insert(m.sender);
        }
        assert_eq!(senders.len(), 7);
        let g = build_inverse_chord_expander(7).unwrap();
        assert_eq!(log.len(), out.total_iterations * g.message_links());
        assert_eq!(out.scalar_messages, log.len());
    }

    #[test]
    fn chunk_first_round_hides_raw_values() {
        for seed in 0..50 {
            let xi = values(7, seed + 100);
            let (_, log) = run_protocol(&cfg(Protocol::Chunk, 7, 2, seed), &xi).unwrap();
            for m in log.first_iteration(0) {
                assert!(xi.iter().all(|&v| v != m.payload));
            }
        }
    }

    #[test]
    fn logged_results_match_sharing_module() {
        let xi = values(7, 3);
        let w = transition_matrix::<f64>(&build_inverse_chord_expander(7).unwrap(), None).unwrap();
        let agg = AggregateConfig::with_tol(1e-8);
        let (sh, log) = run_protocol(&cfg(Protocol::Shamir, 7, 1, 5), &xi).unwrap();
        let direct = shamir_aggregate(&xi, &w, &agg, None, 5, &mut Unobserved).unwrap();
        assert_eq!(sh, direct);
        let per_point = direct.total_iterations / 7;
        assert_eq!(log.len(), 7 * per_point * w.graph().message_links());
        let (ch, _) = run_protocol(&cfg(Protocol::Chunk, 7, 3, 5), &xi).unwrap();
        let direct = chunked_aggregate(&xi, &TopologySource::Relabel(w), 3, &agg, None, 5, &mut Unobserved).unwrap();
        assert_eq!(ch, direct);
    }

    #[test]
    fn messages_follow_round_topology() {
        let xi = values(11, 4);
        let (_, log) = run_protocol(&cfg(Protocol::Chunk, 11, 4, 9), &xi).unwrap();
        assert_eq!(log.rounds.len(), 4);
        for m in &log.messages {
            let edges = &log.rounds[m.round].edges;
            let (a, b) = (m.sender.min(m.receiver), m.sender.max(m.receiver));
            assert!(edges.iter().any(|&(u, v, _)| u == a && v == b));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let xi = values(13, 8);
        let c = cfg(Protocol::Chunk, 13, 3, 77);
        assert_eq!(run_protocol(&c, &xi).unwrap(), run_protocol(&c, &xi).unwrap());
        let sc = AttackScenario::Collusion { agents: 10, degree: 3, colluders: 2, chunks: 2 };
        assert_eq!(monte_carlo_breach(&sc, 2000, 4).unwrap(), monte_carlo_breach(&sc, 2000, 4).unwrap());
    }

    #[test]
    fn regenerated_topologies() {
        let c = SimConfig {
            graph: GraphSpec::RandomRegular { nodes: 12, degree: 3, seed: 1 },
            reshuffle: Reshuffle::Regenerate,
            ..cfg(Protocol::Chunk, 12, 3, 2)
        };
        let xi = values(12, 2);
        let (out, log) = run_protocol(&c, &xi).unwrap();
        assert!((out.total - xi.iter().sum::<f64>()).abs() < 1e-5);
        assert_eq!(log.rounds.len(), 3);
    }

    #[test]
    fn oracle_examples() {
        let xi = values(7, 6);
        let (_, log) = run_protocol(&cfg(Protocol::Chunk, 7, 1, 3), &xi).unwrap();
        let round = &log.rounds[0];
        for s in 0..7 {
            for &(a, b, _) in &round.edges {
                if a != b && (a == s || b == s) {
                    let j = if a == s { b } else { a };
                    assert!(breach_oracle(&log, &Adversary::Node(j))[s]);
                }
            }
        }
        let (_, log) = run_protocol(&cfg(Protocol::Chunk, 7, 4, 3), &xi).unwrap();
        for s in 0..7 {
            let others: Vec<usize> = (0..7).filter(|&j| j != s).collect();
            assert!(breach_oracle(&log, &Adversary::Colluders(others))[s]);
        }
        // an agent never adjacent to s in some round learns nothing about s
        for s in 0..7 {
            for j in 0..7 {
                let adjacent_always = log.rounds.iter().all(|r| r.edges.iter().any(|&(a, b, _)| (a, b) == (s.min(j), s.max(j)) && a != b));
                assert_eq!(breach_oracle(&log, &Adversary::Node(j))[s], adjacent_always && s != j);
            }
        }
        let all_slots: Vec<(usize, usize)> = build_inverse_chord_expander(7).unwrap().edges().iter().map(|&(a, b, _)| (a, b)).collect();
        let flags = breach_oracle(&log, &Adversary::TappedEdges(all_slots));
        assert!(flags.iter().all(|&f| f));
        assert!(breach_oracle(&log, &Adversary::TappedEdges(vec![])).iter().all(|&f| !f));
    }

    #[test]
    fn monte_carlo_matches_closed_forms() {
        let sc = AttackScenario::Collusion { agents: 10, degree: 3, colluders: 2, chunks: 2 };
        let r = monte_carlo_breach(&sc, 100_000, 1).unwrap();
        let exact = r.exact.unwrap();
        assert!(r.ci_low <= exact && exact <= r.ci_high, "{r:?}");
        let ev = AttackScenario::Eavesdropping { edge_total: 30, degree: 3, tapped: 6, chunks: 2 };
        let r = monte_carlo_breach(&ev, 100_000, 2).unwrap();
        let exact = r.exact.unwrap();
        assert!(r.ci_low <= exact && exact <= r.ci_high, "{r:?}");
        let all = AttackScenario::Collusion { agents: 10, degree: 3, colluders: 9, chunks: 3 };
        assert_eq!(monte_carlo_breach(&all, 1000, 3).unwrap().empirical_rate, 1.0);
        assert!(monte_carlo_breach(&sc, 10, 3).is_err());
        let ind = AttackScenario::Independent { agents: 10, degree: 3, max_degree: 3, chunks: 2 };
        let r = monte_carlo_breach(&ind, 20_000, 5).unwrap();
        assert!(r.exact.is_none() && r.empirical_rate <= r.bound);
    }

    #[test]
    fn wilson_interval_properties() {
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
        assert_eq!(wilson_interval(0, 100).0, 0.0);
        assert_eq!(wilson_interval(100, 100).1, 1.0);
    }

    #[test]
    fn relabeled_neighbor_sets_are_independent_across_rounds() {
        // chi-square independence of agent 0's smallest neighbor in two rounds
        let s = 10;
        let g = build_random_regular(s, 3, 12).unwrap();
        let source = TopologySource::Relabel(transition_matrix::<f64>(&g, None).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20_000;
        let mut table = vec![vec![0usize; s]; s];
        for _ in 0..n {
            let pick = |w: &TransitionMatrix<f64>| w.graph().neighbors(0).iter().map(|&(b, _)| b).filter(|&b| b != 0).min().unwrap();
            let (w1, _) = source.next_round(&mut rng).unwrap();
            let (w2, _) = source.next_round(&mut rng).unwrap();
            table[pick(&w1)][pick(&w2)] += 1;
        }
        let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<usize> = (0..s).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut chi2 = 0.0;
        let mut df_rows = 0;
        let mut df_cols = 0;
        for i in 0..s {
            if rows[i] > 0 {
                df_rows += 1;
            }
            if cols[i] > 0 {
                df_cols += 1;
            }
            for j in 0..s {
                let expected = rows[i] as f64 * cols[j] as f64 / n as f64;
                if expected > 0.0 {
                    chi2 += (table[i][j] as f64 - expected).powi(2) / expected;
                }
            }
        }
        let df = ((df_rows - 1) * (df_cols - 1)) as f64;
        // Wilson–Hilferty upper 0.1% point
        let z = 3.09;
        let critical = df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3);
        assert!(chi2 < critical, "chi2 {chi2} df {df} critical {critical}");
    }
}
