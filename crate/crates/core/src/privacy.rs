//! Breach probabilities for random chunking under three adversaries.
//!
//! A victim's value leaks only if the adversary sees every one of its `N_C`
//! chunks. With a fresh uniform topology per round the rounds are
//! independent, so each probability is a per-round hit probability raised to
//! `N_C`. Products are evaluated as sums of `ln_1p` terms and reported values
//! are clamped to `[0, 1]`; the unclamped values stay in [`Diagnostics`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unclamped values behind a [`BreachReport`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub raw_bound: f64,
    pub raw_secure_bound: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreachReport {
    /// Exact breach probability, when a closed form exists.
    pub exact: Option<f64>,
    /// Upper bound on the breach probability.
    pub bound: f64,
    /// Lower bound on the probability that no node is breached.
    pub secure_bound: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Adversary model together with the counts it depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackScenario {
    /// Every agent is curious on its own; `max_degree` sizes the
    /// network-wide bound.
    Independent {
        agents: usize,
        degree: usize,
        max_degree: usize,
        chunks: usize,
    },
    /// `colluders` agents other than the victim pool what they receive.
    Collusion {
        agents: usize,
        degree: usize,
        colluders: usize,
        chunks: usize,
    },
    /// `tapped` of the `edge_total = Σ_i d_i` edge slots are wiretapped.
    Eavesdropping {
        edge_total: usize,
        degree: usize,
        tapped: usize,
        chunks: usize,
    },
}

impl AttackScenario {
    pub fn chunks(&self) -> usize {
        match *self {
            Self::Independent { chunks, .. }
            | Self::Collusion { chunks, .. }
            | Self::Eavesdropping { chunks, .. } => chunks,
        }
    }

    pub fn with_chunks(self, n: usize) -> Self {
        match self {
            Self::Independent { agents, degree, max_degree, .. } => Self::Independent {
                agents,
                degree,
                max_degree,
                chunks: n,
            },
            Self::Collusion { agents, degree, colluders, .. } => Self::Collusion {
                agents,
                degree,
                colluders,
                chunks: n,
            },
            Self::Eavesdropping { edge_total, degree, tapped, .. } => Self::Eavesdropping {
                edge_total,
                degree,
                tapped,
                chunks: n,
            },
        }
    }

    pub fn breach(&self) -> Result<BreachReport> {
        match *self {
            Self::Independent { agents, degree, max_degree, chunks } => {
                let raw = independent_breach_raw(agents, degree, chunks)?;
                let secure = independent_secure_raw(agents, max_degree, chunks)?;
                Ok(BreachReport {
                    exact: None,
                    bound: clamp01(raw),
                    secure_bound: Some(clamp01(secure)),
                    diagnostics: Diagnostics {
                        raw_bound: raw,
                        raw_secure_bound: Some(secure),
                    },
                })
            }
            Self::Collusion { agents, degree, colluders, chunks } => {
                let (exact, bound) = collusion_breach(agents, degree, colluders, chunks)?;
                Ok(two_sided(exact, bound))
            }
            Self::Eavesdropping { edge_total, degree, tapped, chunks } => {
                let (exact, bound) = eaves_breach(edge_total, degree, tapped, chunks)?;
                Ok(two_sided(exact, bound))
            }
        }
    }

    /// Fewest chunk rounds whose breach bound is at most `eta`.
    pub fn min_chunks(&self, eta: f64) -> Result<usize> {
        match *self {
            Self::Independent { agents, degree, .. } => min_chunks_independent(eta, agents, degree),
            Self::Collusion { agents, degree, colluders, .. } => {
                min_chunks_collusion(eta, agents, degree, colluders)
            }
            Self::Eavesdropping { edge_total, degree, tapped, .. } => {
                min_chunks_eaves(eta, edge_total, degree, tapped)
            }
        }
    }
}

fn two_sided(exact: f64, raw_bound: f64) -> BreachReport {
    BreachReport {
        exact: Some(clamp01(exact)),
        bound: clamp01(raw_bound),
        secure_bound: None,
        diagnostics: Diagnostics {
            raw_bound,
            raw_secure_bound: None,
        },
    }
}

fn clamp01(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

fn invalid(msg: String) -> Error {
    Error::InvalidParameter(msg)
}

fn check_independent(agents: usize, degree: usize, chunks: usize) -> Result<()> {
    if agents < 2 {
        return Err(invalid(format!("need at least 2 agents, got {agents}")));
    }
    if degree < 1 || degree > agents - 1 {
        return Err(invalid(format!("degree {degree} outside 1..={}", agents - 1)));
    }
    if chunks < 1 {
        return Err(invalid("chunk count must be at least 1".into()));
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("breach tolerance must lie in (0, 1), got {eta}")))
    }
}

fn independent_breach_raw(agents: usize, degree: usize, chunks: usize) -> Result<f64> {
    check_independent(agents, degree, chunks)?;
    let others = (agents - 1) as f64;
    Ok((others.ln() + chunks as f64 * (degree as f64 / others).ln()).exp())
}

fn independent_secure_raw(agents: usize, max_degree: usize, chunks: usize) -> Result<f64> {
    check_independent(agents, max_degree, chunks)?;
    let s = agents as f64;
    let others = s - 1.0;
    let pairs = (s.ln() + others.ln() + chunks as f64 * (max_degree as f64 / others).ln()).exp();
    Ok(1.0 - pairs)
}

/// Boole bound `(S-1)(d/(S-1))^{N_C}` on one node's breach probability.
pub fn independent_breach_bound(agents: usize, degree: usize, chunks: usize) -> Result<f64> {
    independent_breach_raw(agents, degree, chunks).map(clamp01)
}

/// Lower bound `1 - S(S-1)(d_max/(S-1))^{N_C}` on the probability that no
/// node is breached.
pub fn independent_secure_bound(agents: usize, max_degree: usize, chunks: usize) -> Result<f64> {
    independent_secure_raw(agents, max_degree, chunks).map(clamp01)
}

/// Fewest rounds with per-node bound at most `eta`.
pub fn min_chunks_independent(eta: f64, agents: usize, degree: usize) -> Result<usize> {
    check_eta(eta)?;
    check_independent(agents, degree, 1)?;
    if degree == agents - 1 {
        return Err(Error::NoFiniteChunks(format!(
            "a victim adjacent to all {} other agents is exposed every round",
            agents - 1
        )));
    }
    let others = (agents - 1) as f64;
    let n = (eta.ln() - others.ln()) / (degree as f64 / others).ln();
    ceil_at_least_one(n)
}

/// Chunk counts beyond this are reported as unattainable.
pub const MAX_CHUNKS: f64 = 1e15;

fn ceil_at_least_one(x: f64) -> Result<usize> {
    if !(x <= MAX_CHUNKS) {
        return Err(Error::NoFiniteChunks(format!(
            "the required chunk count {x:.3e} exceeds {MAX_CHUNKS:e}"
        )));
    }
    Ok((x.ceil() as usize).max(1))
}

fn check_collusion(agents: usize, degree: usize, colluders: usize, chunks: usize) -> Result<()> {
    check_independent(agents, degree, chunks)?;
    if colluders < 1 || colluders > agents - 1 {
        return Err(invalid(format!(
            "colluder count {colluders} outside 1..={}",
            agents - 1
        )));
    }
    Ok(())
}

/// `(exact, bound)` for `N_L` colluders. The exact form is
/// `{1 - Π_{l=1}^{N_L}(1 - d/(S-l))}^{N_C}`, and both are 1 once
/// `N_L ≥ S - d` since some colluder is then always adjacent.
pub fn collusion_breach(agents: usize, degree: usize, colluders: usize, chunks: usize) -> Result<(f64, f64)> {
    check_collusion(agents, degree, colluders, chunks)?;
    if colluders >= agents - degree {
        return Ok((1.0, 1.0));
    }
    let d = degree as f64;
    let s = agents as f64;
    let nc = chunks as f64;
    // ln Π_l (1 - d/(S-l)): probability that no colluder is adjacent in a round
    let log_miss: f64 = (1..=colluders).map(|l| (-d / (s - l as f64)).ln_1p()).sum();
    let exact = (nc * (-log_miss.exp_m1()).ln()).exp();
    let worst_miss = (colluders as f64 * (-d / (s - colluders as f64)).ln_1p()).exp();
    let bound = (-nc * worst_miss).exp();
    Ok((exact, bound))
}

pub fn min_chunks_collusion(eta: f64, agents: usize, degree: usize, colluders: usize) -> Result<usize> {
    check_eta(eta)?;
    check_collusion(agents, degree, colluders, 1)?;
    if colluders >= agents - degree {
        return Err(Error::NoFiniteChunks(format!(
            "{colluders} colluders always include a neighbor of a degree-{degree} victim among {agents} agents"
        )));
    }
    let d = degree as f64;
    let factor = (-(colluders as f64) * (-d / (agents - colluders) as f64).ln_1p()).exp();
    ceil_at_least_one(eta.ln().abs() * factor)
}

fn check_eaves(edge_total: usize, degree: usize, tapped: usize, chunks: usize) -> Result<()> {
    if degree < 1 || degree > edge_total {
        return Err(invalid(format!("degree {degree} outside 1..={edge_total}")));
    }
    if tapped > edge_total {
        return Err(invalid(format!("{tapped} tapped edges exceed the {edge_total} available")));
    }
    if chunks < 1 {
        return Err(invalid("chunk count must be at least 1".into()));
    }
    Ok(())
}

/// `(exact, bound)` when `N_E` of `E` edge slots are tapped. The exact form
/// is `{1 - Π_{l=0}^{d-1}(1 - N_E/(E-l))}^{N_C}`; once `N_E > E - d` every
/// placement crosses a tap and both are 1.
pub fn eaves_breach(edge_total: usize, degree: usize, tapped: usize, chunks: usize) -> Result<(f64, f64)> {
    check_eaves(edge_total, degree, tapped, chunks)?;
    if tapped == 0 {
        return Ok((0.0, (-(chunks as f64)).exp()));
    }
    if tapped > edge_total - degree {
        return Ok((1.0, 1.0));
    }
    let e = edge_total as f64;
    let ne = tapped as f64;
    let nc = chunks as f64;
    let log_miss: f64 = (0..degree).map(|l| (-ne / (e - l as f64)).ln_1p()).sum();
    let exact = (nc * (-log_miss.exp_m1()).ln()).exp();
    let worst_miss = (degree as f64 * (-ne / (e - degree as f64 + 1.0)).ln_1p()).exp();
    let bound = (-nc * worst_miss).exp();
    Ok((exact, bound))
}

pub fn min_chunks_eaves(eta: f64, edge_total: usize, degree: usize, tapped: usize) -> Result<usize> {
    check_eta(eta)?;
    check_eaves(edge_total, degree, tapped, 1)?;
    if tapped == 0 {
        return Ok(1);
    }
    if tapped > edge_total - degree {
        return Err(Error::NoFiniteChunks(format!(
            "{tapped} of {edge_total} tapped edges always cover a degree-{degree} victim"
        )));
    }
    let e = edge_total as f64;
    let factor = (-(degree as f64) * (-(tapped as f64) / (e - degree as f64 + 1.0)).ln_1p()).exp();
    ceil_at_least_one(eta.ln().abs() * factor)
}
