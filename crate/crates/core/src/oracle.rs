//! Exact finite-size quenched free energy on sampled random regular graphs.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsbError};
use crate::stats::{EstimateWithError, SeedStream};

pub const MAX_VERTICES: usize = 24;
pub const MAX_RESTARTS: usize = 100_000;

/// Simple `c`-regular graph, JSON `{"n": .., "edges": [[i, j], ..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegularGraph {
    #[serde(rename = "n")]
    pub n_vertices: usize,
    pub edges: Vec<(usize, usize)>,
}

impl RegularGraph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_vertices];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn is_simple(&self) -> bool {
        let mut seen = HashSet::new();
        self.edges.iter().all(|&(i, j)| i != j && seen.insert((i.min(j), i.max(j))))
    }
}

/// Configuration model: pair `n * c` half-edges uniformly and restart the
/// whole pairing on any loop or repeated edge.
pub fn sample_rrg<R: Rng + ?Sized>(n_vertices: usize, c: usize, rng: &mut R) -> Result<RegularGraph> {
    if c == 0 || n_vertices <= c || !(n_vertices * c).is_multiple_of(2) {
        return Err(RsbError::GraphSampling(format!("no simple {c}-regular graph on {n_vertices} vertices")));
    }
    let mut stubs: Vec<usize> = (0..n_vertices).flat_map(|v| std::iter::repeat_n(v, c)).collect();
    'restart: for _ in 0..MAX_RESTARTS {
        stubs.shuffle(rng);
        let mut seen = HashSet::with_capacity(stubs.len() / 2);
        let mut edges = Vec::with_capacity(stubs.len() / 2);
        for pair in stubs.chunks(2) {
            let (i, j) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if i == j || !seen.insert((i, j)) {
                continue 'restart;
            }
            edges.push((i, j));
        }
        edges.sort_unstable();
        return Ok(RegularGraph { n_vertices, edges });
    }
    Err(RsbError::GraphSampling(format!("no simple pairing after {MAX_RESTARTS} restarts")))
}

fn check_inputs(graph: &RegularGraph, couplings: &[f64], beta: f64) -> Result<()> {
    if graph.n_vertices == 0 || graph.n_vertices > MAX_VERTICES {
        return Err(RsbError::SizeGuard(format!("exact enumeration needs 1..={MAX_VERTICES} vertices")));
    }
    if couplings.len() != graph.edges.len() {
        return Err(RsbError::InvalidParameter(format!(
            "{} couplings for {} edges",
            couplings.len(),
            graph.edges.len()
        )));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(RsbError::InvalidParameter(format!("beta must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

/// Streaming log-sum-exp that rescales only when the running maximum moves.
struct Lse {
    m: f64,
    s: f64,
}

impl Lse {
    fn new() -> Self {
        Self { m: f64::NEG_INFINITY, s: 0.0 }
    }

    #[inline]
    fn push(&mut self, a: f64) {
        if a > self.m {
            self.s = self.s * (self.m - a).exp() + 1.0;
            self.m = a;
        } else {
            self.s += (a - self.m).exp();
        }
    }

    fn value(&self) -> f64 {
        self.m + self.s.ln()
    }
}

/// Gray-code walk over spins `0..free`, with spins `free..n` fixed to +1.
fn gray_log_sum(graph: &RegularGraph, couplings: &[f64], beta: f64, free: usize) -> f64 {
    let n = graph.n_vertices;
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(i, j), &jij) in graph.edges.iter().zip(couplings) {
        adj[i].push((j, jij));
        adj[j].push((i, jij));
    }
    let mut sigma = vec![1.0f64; n];
    let mut energy: f64 = couplings.iter().sum();
    let mut acc = Lse::new();
    acc.push(beta * energy);
    for step in 1u64..(1u64 << free) {
        let k = step.trailing_zeros() as usize;
        let local: f64 = adj[k].iter().map(|&(j, w)| w * sigma[j]).sum();
        energy -= 2.0 * sigma[k] * local;
        sigma[k] = -sigma[k];
        acc.push(beta * energy);
    }
    acc.value()
}

/// `(1/N) log sum_sigma exp(beta sum_{ij} J_ij sigma_i sigma_j)` by Gray-code
/// enumeration of all `2^N` configurations.
pub fn exact_log_partition(graph: &RegularGraph, couplings: &[f64], beta: f64) -> Result<f64> {
    check_inputs(graph, couplings, beta)?;
    Ok(gray_log_sum(graph, couplings, beta, graph.n_vertices) / graph.n_vertices as f64)
}

/// Same value using the global spin-flip symmetry: the last spin is fixed
/// and the sum doubled.
pub fn exact_log_partition_halved(graph: &RegularGraph, couplings: &[f64], beta: f64) -> Result<f64> {
    check_inputs(graph, couplings, beta)?;
    let n = graph.n_vertices;
    Ok((std::f64::consts::LN_2 + gray_log_sum(graph, couplings, beta, n - 1)) / n as f64)
}

/// Mean and standard error of the exact value over i.i.d. graphs and
/// Rademacher couplings. Sample `i` uses stream `seed.substream(i)`.
pub fn quenched_estimate(
    n_vertices: usize,
    c: usize,
    beta: f64,
    n_samples: usize,
    seed: SeedStream,
) -> Result<EstimateWithError> {
    if n_samples == 0 {
        return Err(RsbError::InvalidParameter("need at least one sample".into()));
    }
    let values = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.substream(i as u64).rng();
            let g = sample_rrg(n_vertices, c, &mut rng)?;
            let j: Vec<f64> = g.edges.iter().map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            exact_log_partition(&g, &j, beta)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EstimateWithError::from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent recomputation: energy of every configuration from scratch.
    fn direct(graph: &RegularGraph, j: &[f64], beta: f64) -> f64 {
        let n = graph.n_vertices;
        let mut z = 0.0;
        for mask in 0u32..(1 << n) {
            let s = |i: usize| if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
            let e: f64 = graph.edges.iter().zip(j).map(|(&(a, b), w)| w * s(a) * s(b)).sum();
            z += (beta * e).exp();
        }
        z.ln() / n as f64
    }

    #[test]
    fn k4_is_the_only_cubic_graph_on_four_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_rrg(4, 3, &mut rng).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let j = vec![1.0; 6];
        let v = exact_log_partition(&g, &j, 1.0).unwrap();
        assert!((v - direct(&g, &j, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn degrees_and_simplicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, c) in [(6, 2), (16, 3), (10, 4)] {
            let g = sample_rrg(n, c, &mut rng).unwrap();
            assert!(g.is_simple());
            assert!(g.degrees().iter().all(|&d| d == c));
        }
        assert!(sample_rrg(5, 3, &mut rng).is_err());
        assert!(sample_rrg(3, 3, &mut rng).is_err());
    }

    #[test]
    fn single_edge_and_zero_beta() {
        let g = RegularGraph { n_vertices: 2, edges: vec![(0, 1)] };
        let v = exact_log_partition(&g, &[1.0], 0.8).unwrap();
        assert!((v - 0.5 * (4.0 * 0.8f64.cosh()).ln()).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = sample_rrg(12, 3, &mut rng).unwrap();
        let j: Vec<f64> = g.edges.iter().map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        assert!((exact_log_partition(&g, &j, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let full = exact_log_partition(&g, &j, 0.7).unwrap();
        let half = exact_log_partition_halved(&g, &j, 0.7).unwrap();
        assert!((full - half).abs() < 1e-13);
        assert!((full - direct(&g, &j, 0.7)).abs() < 1e-12);
    }

    #[test]
    fn graph_json() {
        let g = RegularGraph { n_vertices: 2, edges: vec![(0, 1)] };
        assert_eq!(serde_json::to_string(&g).unwrap(), r#"{"n":2,"edges":[[0,1]]}"#);
    }
}
