//! Communication topologies and the consensus operator built on them.
//!
//! Graphs are undirected multigraphs with self-loops, stored as a dense
//! matrix of edge multiplicities. A self-loop adds 1 to `A[s][s]` and 1 to
//! `d_s`, so it cancels in the Laplacian `D - A` and never carries a message.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymmetricEigen};
use crate::scalar::Scalar;

/// Largest node count handled by the dense eigensolver; larger graphs fall
/// back to power iteration.
pub const DENSE_EIGEN_LIMIT: usize = 2000;

/// Largest node count accepted by [`expansion_constant_bruteforce`].
pub const EXPANSION_BRUTEFORCE_LIMIT: usize = 20;

/// Retry budget for [`build_random_regular`].
pub const RANDOM_REGULAR_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    size: usize,
    adjacency: Vec<u32>,
    degrees: Vec<u32>,
    neighbors: Vec<Vec<(usize, u32)>>,
}

impl Graph {
    /// Builds a graph from a row-major multiplicity matrix.
    pub fn from_adjacency(size: usize, adjacency: Vec<u32>) -> Result<Self> {
        if adjacency.len() != size * size {
            return Err(Error::DimensionMismatch {
                expected: size * size,
                got: adjacency.len(),
            });
        }
        for i in 0..size {
            for j in (i + 1)..size {
                if adjacency[i * size + j] != adjacency[j * size + i] {
                    return Err(Error::NotSymmetric {
                        asymmetry: (adjacency[i * size + j] as f64
                            - adjacency[j * size + i] as f64)
                            .abs(),
                    });
                }
            }
        }
        let degrees = (0..size)
            .map(|i| adjacency[i * size..(i + 1) * size].iter().sum())
            .collect();
        let neighbors = (0..size)
            .map(|i| {
                (0..size)
                    .filter(|&j| j != i && adjacency[i * size + j] > 0)
                    .map(|j| (j, adjacency[i * size + j]))
                    .collect()
            })
            .collect();
        Ok(Self {
            size,
            adjacency,
            degrees,
            neighbors,
        })
    }

    /// Builds a graph from undirected `(u, v, multiplicity)` triples;
    /// `u == v` is a self-loop. Repeated pairs accumulate.
    pub fn from_edges(size: usize, edges: &[(usize, usize, u32)]) -> Result<Self> {
        let mut adj = vec![0u32; size * size];
        for &(u, v, m) in edges {
            if u >= size || v >= size {
                return Err(Error::InvalidParameter(format!(
                    "edge ({u}, {v}) out of range for {size} nodes"
                )));
            }
            adj[u * size + v] += m;
            if u != v {
                adj[v * size + u] += m;
            }
        }
        Self::from_adjacency(size, adj)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn multiplicity(&self, u: usize, v: usize) -> u32 {
        self.adjacency[u * self.size + v]
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    #[inline]
    pub fn degree(&self, s: usize) -> u32 {
        self.degrees[s]
    }

    pub fn max_degree(&self) -> u32 {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    /// Sum of all degrees, `E = Σ d_s`.
    pub fn degree_sum(&self) -> usize {
        self.degrees.iter().map(|&d| d as usize).sum()
    }

    /// Distinct other nodes adjacent to `s` with their multiplicities, in
    /// ascending node order.
    pub fn neighbors(&self, s: usize) -> &[(usize, u32)] {
        &self.neighbors[s]
    }

    /// Number of ordered `(sender, receiver)` pairs that exchange a value in
    /// one synchronous consensus iteration. Multi-edges carry one message;
    /// self-loops carry none.
    pub fn message_links(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// `Some(d)` when every node has degree `d`.
    pub fn regular_degree(&self) -> Option<u32> {
        let d = *self.degrees.first()?;
        self.degrees.iter().all(|&x| x == d).then_some(d)
    }

    pub fn is_connected(&self) -> bool {
        if self.size == 0 {
            return false;
        }
        let mut seen = vec![false; self.size];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.size
    }

    /// Undirected edges `(u, v, multiplicity)` with `u <= v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::new();
        for u in 0..self.size {
            for v in u..self.size {
                let m = self.multiplicity(u, v);
                if m > 0 {
                    out.push((u, v, m));
                }
            }
        }
        out
    }

    /// Relabels nodes: old node `i` becomes node `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.size;
        if perm.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: perm.len(),
            });
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidParameter(
                    "relabeling is not a permutation".into(),
                ));
            }
        }
        let mut adj = vec![0u32; n * n];
        for i in 0..n {
            for j in 0..n {
                adj[perm[i] * n + perm[j]] = self.adjacency[i * n + j];
            }
        }
        Self::from_adjacency(n, adj)
    }

    pub fn adjacency_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_row_major(
            self.size,
            self.size,
            self.adjacency
                .iter()
                .map(|&m| T::from_usize_lossy(m as usize))
                .collect(),
        )
    }

    /// `D - A`. Self-loops cancel on the diagonal.
    pub fn laplacian<T: Scalar>(&self) -> Matrix<T> {
        let mut l = self.adjacency_matrix::<T>().scale(-T::one());
        for s in 0..self.size {
            l[(s, s)] += T::from_usize_lossy(self.degrees[s] as usize);
        }
        l
    }

    /// Serializes as an edge list: a `S E` header, then `u v mult` per
    /// undirected edge with `u <= v` (0-based).
    pub fn to_edge_list(&self) -> String {
        let edges = self.edges();
        let mut out = format!("{} {}\n", self.size, edges.len());
        for (u, v, m) in edges {
            let _ = writeln!(out, "{u} {v} {m}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing `S E` header".into(),
        })?;
        let head = parse_fields(hline, header, 2)?;
        let (size, count) = (head[0], head[1]);
        let mut edges = Vec::with_capacity(count);
        for (line, body) in lines {
            let f = parse_fields(line, body, 3)?;
            if f[0] > f[1] {
                return Err(Error::Parse {
                    line,
                    message: format!("edge ({}, {}) must have u <= v", f[0], f[1]),
                });
            }
            if f[1] >= size {
                return Err(Error::Parse {
                    line,
                    message: format!("node {} out of range for {size} nodes", f[1]),
                });
            }
            edges.push((f[0], f[1], f[2] as u32));
        }
        if edges.len() != count {
            return Err(Error::Parse {
                line: hline,
                message: format!("header declares {count} edges, found {}", edges.len()),
            });
        }
        Self::from_edges(size, &edges)
    }
}

fn parse_fields(line: usize, body: &str, want: usize) -> Result<Vec<usize>> {
    let fields: Vec<&str> = body.split_whitespace().collect();
    if fields.len() != want {
        return Err(Error::Parse {
            line,
            message: format!("expected {want} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("`{f}`: {e}"),
            })
        })
        .collect()
}

fn check_min_size(what: &'static str, s: usize) -> Result<()> {
    if s < 3 {
        return Err(Error::InvalidSize { what, got: s, min: 3 });
    }
    Ok(())
}

/// Cycle on `s` nodes.
pub fn build_ring(s: usize) -> Result<Graph> {
    check_min_size("ring", s)?;
    let edges: Vec<_> = (0..s).map(|x| (x, (x + 1) % s, 1)).collect();
    Graph::from_edges(s, &edges)
}

pub fn build_complete(s: usize) -> Result<Graph> {
    check_min_size("complete graph", s)?;
    let mut adj = vec![1u32; s * s];
    for i in 0..s {
        adj[i * s + i] = 0;
    }
    Graph::from_adjacency(s, adj)
}

/// How a chord that lands on an existing cycle edge is stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChordOverlap {
    /// Keep a multiplicity-2 edge.
    #[default]
    Keep,
    /// Store the edge once and give both endpoints a self-loop instead,
    /// which preserves 3-regularity.
    Collapse,
}

/// Modular inverse of `x` modulo `m`, if it exists.
pub fn mod_inverse(x: usize, m: usize) -> Option<usize> {
    let (mut r0, mut r1) = (m as i64, (x % m) as i64);
    let (mut t0, mut t1) = (0i64, 1i64);
    while r1 != 0 {
        let q = r0 / r1;
        (r0, r1) = (r1, r0 - q * r1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    if r0 != 1 {
        return None;
    }
    Some(t0.rem_euclid(m as i64) as usize)
}

/// Cycle with inverse chords.
///
/// With 1-based labels, node `s` links to `s ± 1` and to the `j` with
/// `(s-1)(j-1) ≡ 1 (mod S)`. Storage index `x = s - 1`, so index `x` links
/// to `x ± 1` and to `x⁻¹ mod S`. Nodes without an inverse, and nodes that
/// are their own inverse, get a self-loop, so every degree is exactly 3.
pub fn build_inverse_chord_expander(s: usize) -> Result<Graph> {
    build_inverse_chord_expander_with(s, ChordOverlap::Keep)
}

pub fn build_inverse_chord_expander_with(s: usize, overlap: ChordOverlap) -> Result<Graph> {
    check_min_size("inverse-chord expander", s)?;
    let mut adj = vec![0u32; s * s];
    let link = |u: usize, v: usize, adj: &mut Vec<u32>| {
        adj[u * s + v] += 1;
        if u != v {
            adj[v * s + u] += 1;
        }
    };
    for x in 0..s {
        link(x, (x + 1) % s, &mut adj);
    }
    for x in 0..s {
        match mod_inverse(x, s) {
            Some(y) if y == x => link(x, x, &mut adj),
            Some(y) if y > x => {
                let on_cycle = (x + 1) % s == y || (y + 1) % s == x;
                if on_cycle && overlap == ChordOverlap::Collapse {
                    link(x, x, &mut adj);
                    link(y, y, &mut adj);
                } else {
                    link(x, y, &mut adj);
                }
            }
            Some(_) => {} // added from the smaller endpoint
            None => link(x, x, &mut adj),
        }
    }
    Graph::from_adjacency(s, adj)
}

/// Uniformly shuffled configuration-model sample of a simple connected
/// `d`-regular graph.
pub fn build_random_regular(s: usize, d: usize, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_random_regular_with(s, d, &mut rng)
}

pub fn build_random_regular_with<R: Rng + ?Sized>(s: usize, d: usize, rng: &mut R) -> Result<Graph> {
    if d == 0 || d >= s {
        return Err(Error::InvalidParameter(format!(
            "degree {d} must satisfy 1 <= d < S = {s}"
        )));
    }
    if (s * d) % 2 == 1 {
        return Err(Error::Parity { nodes: s, degree: d });
    }
    let mut stubs: Vec<usize> = (0..s).flat_map(|v| std::iter::repeat_n(v, d)).collect();
    let mut last_reason = "";
    'attempt: for _ in 0..RANDOM_REGULAR_ATTEMPTS {
        stubs.shuffle(rng);
        let mut seen = HashSet::with_capacity(stubs.len() / 2);
        let mut edges = Vec::with_capacity(stubs.len() / 2);
        for pair in stubs.chunks_exact(2) {
            let (u, v) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if u == v {
                last_reason = "self-loop";
                continue 'attempt;
            }
            if !seen.insert((u, v)) {
                last_reason = "multi-edge";
                continue 'attempt;
            }
            edges.push((u, v, 1));
        }
        let g = Graph::from_edges(s, &edges)?;
        if g.is_connected() {
            return Ok(g);
        }
        last_reason = "disconnected";
    }
    Err(Error::ConstructionFailed {
        attempts: RANDOM_REGULAR_ATTEMPTS,
        reason: format!("last rejection: {last_reason}"),
    })
}

/// The consensus operator `W = I - ε(D - A)` together with its graph.
#[derive(Clone, Debug)]
pub struct TransitionMatrix<T> {
    graph: Graph,
    eps: T,
    w: Matrix<T>,
    spectrum: Spectrum<T>,
}

/// Default step size `1 / (d_max + 1)`.
pub fn default_eps<T: Scalar>(g: &Graph) -> T {
    T::one() / T::from_usize_lossy(g.max_degree() as usize + 1)
}

fn spectral_tolerance<T: Scalar>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(100.0))
}

/// Builds and validates `W = I - ε(D - A)`.
///
/// Every non-leading eigenvalue must lie strictly inside `(-1, 1)`;
/// otherwise the iteration would not converge to the mean.
pub fn transition_matrix<T: Scalar>(g: &Graph, eps: Option<T>) -> Result<TransitionMatrix<T>> {
    if !g.is_connected() {
        return Err(Error::Disconnected);
    }
    let eps = eps.unwrap_or_else(|| default_eps(g));
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let w = Matrix::identity(g.size()).sub(&g.laplacian::<T>().scale(eps));
    let mut tm = TransitionMatrix {
        graph: g.clone(),
        eps,
        w,
        spectrum: Spectrum {
            lambda2: T::zero(),
            gap: T::one(),
        },
    };
    tm.spectrum = tm.validate()?;
    Ok(tm)
}

impl<T: Scalar> TransitionMatrix<T> {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn size(&self) -> usize {
        self.graph.size()
    }

    pub fn dense(&self) -> &Matrix<T> {
        &self.w
    }

    /// Element-wise update `out_a = x_a + ε Σ_j A_aj (x_j - x_a)`, the sparse
    /// form of `W x`. Summation order per row is fixed (ascending neighbor).
    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        for (a, slot) in out.iter_mut().enumerate() {
            let xa = x[a];
            let mut acc = T::zero();
            for &(j, m) in self.graph.neighbors(a) {
                acc += T::from_usize_lossy(m as usize) * (x[j] - xa);
            }
            *slot = xa + self.eps * acc;
        }
    }

    /// The same operator on a relabeled graph (old node `i` at `perm[i]`).
    /// The spectrum is invariant under relabeling and is carried over; the
    /// relabeled links are re-checked for connectivity.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let graph = self.graph.relabel(perm)?;
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        let n = self.size();
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                w[(perm[i], perm[j])] = self.w[(i, j)];
            }
        }
        Ok(Self {
            graph,
            eps: self.eps,
            w,
            spectrum: self.spectrum,
        })
    }

    /// Spectrum found while validating the operator.
    pub fn spectrum(&self) -> Spectrum<T> {
        self.spectrum
    }

    fn validate(&self) -> Result<Spectrum<T>> {
        let tol = spectral_tolerance::<T>();
        let eps64 = self.eps.to_f64_lossy();
        if self.size() <= DENSE_EIGEN_LIMIT {
            let values = SymmetricEigen::new(&self.w)?.descending();
            let top = values[0];
            if (top - T::one()).abs() > tol {
                return Err(Error::StepSize {
                    eps: eps64,
                    eigenvalue: top.to_f64_lossy(),
                });
            }
            for &v in &values[1..] {
                if v >= T::one() - tol || v <= -T::one() + tol {
                    return Err(Error::StepSize {
                        eps: eps64,
                        eigenvalue: v.to_f64_lossy(),
                    });
                }
            }
            return Ok(Spectrum {
                lambda2: values[1],
                gap: top - values[1],
            });
        }
        // Gershgorin: λ_min ≥ min_a 1 - 2ε(d_a - A_aa).
        let g = &self.graph;
        let worst = (0..g.size())
            .map(|a| {
                let off = g.degree(a) - g.multiplicity(a, a);
                T::one() - T::lit(2.0) * self.eps * T::from_usize_lossy(off as usize)
            })
            .fold(T::infinity(), T::min);
        if worst <= -T::one() + tol {
            return Err(Error::StepSize {
                eps: eps64,
                eigenvalue: worst.to_f64_lossy(),
            });
        }
        let lambda2 = power_lambda2(self)?;
        if lambda2 >= T::one() - tol {
            return Err(Error::StepSize {
                eps: eps64,
                eigenvalue: lambda2.to_f64_lossy(),
            });
        }
        Ok(Spectrum {
            lambda2,
            gap: T::one() - lambda2,
        })
    }
}

/// Second-largest eigenvalue of `W` and the spectral gap `1 - λ2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum<T> {
    pub lambda2: T,
    pub gap: T,
}

/// Full symmetric eigensolve up to [`DENSE_EIGEN_LIMIT`] nodes, deflated
/// power iteration beyond.
pub fn spectral_gap<T: Scalar>(w: &TransitionMatrix<T>) -> Result<Spectrum<T>> {
    if w.size() > DENSE_EIGEN_LIMIT {
        let lambda2 = power_lambda2(w)?;
        return Ok(Spectrum {
            lambda2,
            gap: T::one() - lambda2,
        });
    }
    spectral_gap_dense(w.dense())
}

/// Dense route for an arbitrary symmetric row-stochastic matrix.
pub fn spectral_gap_dense<T: Scalar>(w: &Matrix<T>) -> Result<Spectrum<T>> {
    if !w.is_square() {
        return Err(Error::DimensionMismatch {
            expected: w.rows(),
            got: w.cols(),
        });
    }
    if !w.is_symmetric(spectral_tolerance::<T>()) {
        return Err(Error::NotSymmetric {
            asymmetry: w.max_asymmetry().to_f64_lossy(),
        });
    }
    if w.rows() < 2 {
        return Err(Error::InvalidSize {
            what: "transition matrix",
            got: w.rows(),
            min: 2,
        });
    }
    let values = SymmetricEigen::new(w)?.descending();
    let lambda2 = values[1];
    Ok(Spectrum {
        lambda2,
        gap: values[0] - lambda2,
    })
}

/// λ2 by power iteration on `(I + W)/2` restricted to the complement of 𝟙.
fn power_lambda2<T: Scalar>(w: &TransitionMatrix<T>) -> Result<T> {
    let n = w.size();
    let half = T::lit(0.5);
    let nf = T::from_usize_lossy(n);
    let mut x: Vec<T> = (0..n)
        .map(|i| T::lit(((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5))
        .collect();
    let mut y = vec![T::zero(); n];
    let mut rayleigh = T::zero();
    let deflate_normalize = |v: &mut Vec<T>| {
        let mean = v.iter().copied().sum::<T>() / nf;
        v.iter_mut().for_each(|e| *e -= mean);
        let norm = v.iter().map(|&e| e * e).sum::<T>().sqrt();
        if norm > T::zero() {
            v.iter_mut().for_each(|e| *e /= norm);
        }
    };
    deflate_normalize(&mut x);
    let tol = T::lit(1e-10);
    for _ in 0..1_000_000 {
        w.apply_into(&x, &mut y);
        for (yi, &xi) in y.iter_mut().zip(&x) {
            *yi = half * (*yi + xi);
        }
        let next: T = y.iter().zip(&x).map(|(&a, &b)| a * b).sum();
        deflate_normalize(&mut y);
        std::mem::swap(&mut x, &mut y);
        if (next - rayleigh).abs() <= tol * next.abs() {
            return Ok(T::lit(2.0) * next - T::one());
        }
        rayleigh = next;
    }
    Err(Error::EigenNonConvergence)
}

/// Minimum over nonempty proper node subsets `V1` of
/// `|∂V1| / min(|V1|, S - |V1|)`, counting crossing edge multiplicities.
pub fn expansion_constant_bruteforce<T: Scalar>(g: &Graph) -> Result<T> {
    let n = g.size();
    if n > EXPANSION_BRUTEFORCE_LIMIT {
        return Err(Error::SizeLimit {
            what: "exhaustive expansion search",
            size: n,
            limit: EXPANSION_BRUTEFORCE_LIMIT,
        });
    }
    if n < 2 {
        return Err(Error::InvalidSize {
            what: "expansion search",
            got: n,
            min: 2,
        });
    }
    // V1 and its complement give the same ratio; fix the last node outside V1.
    let mut best: Option<(u64, u64)> = None;
    for mask in 1u32..(1u32 << (n - 1)) {
        let inside = mask.count_ones() as u64;
        let mut cut = 0u64;
        for u in 0..n {
            if mask & (1 << u) == 0 {
                continue;
            }
            for &(v, m) in g.neighbors(u) {
                if mask & (1 << v) == 0 {
                    cut += m as u64;
                }
            }
        }
        let denom = inside.min(n as u64 - inside);
        best = match best {
            Some((c, d)) if c * denom <= cut * d => Some((c, d)),
            _ => Some((cut, denom)),
        };
    }
    let (c, d) = best.expect("at least one subset");
    Ok(T::from_usize_lossy(c as usize) / T::from_usize_lossy(d as usize))
}

/// Cheeger-type lower bound `ε α² / (2d)` on the spectral gap of a
/// `d`-regular graph with expansion constant `α`.
pub fn cheeger_gap_bound<T: Scalar>(eps: T, alpha: T, degree: u32) -> T {
    eps * alpha * alpha / (T::lit(2.0) * T::from_usize_lossy(degree as usize))
}

/// Uniform random relabeling of `g`, returned with the permutation used
/// (old node `i` sits at `perm[i]`).
pub fn shuffled<R: Rng + ?Sized>(g: &Graph, rng: &mut R) -> (Graph, Vec<usize>) {
    let mut perm: Vec<usize> = (0..g.size()).collect();
    perm.shuffle(rng);
    let out = g.relabel(&perm).expect("shuffle is a permutation");
    (out, perm)
}
