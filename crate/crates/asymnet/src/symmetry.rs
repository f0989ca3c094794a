//! Executable symmetry checks: computation-graph construction, brute-force
//! layered-DAG automorphism search, and numeric equivariance falsifiers for
//! the fixed-gate nonlinearity.

use crate::nn::{AsymMode, FigluLayer, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymmetryError {
    #[error("DAG formalism covers elementwise-nonlinearity nets; sigma_asym models are checked by the gate falsifiers instead")]
    SigmaAsymUnsupported,
    #[error("hidden node {node} in layer {layer} has no incoming edge")]
    DisconnectedNode { layer: usize, node: usize },
    #[error("search budget exceeded: more than {limit} candidate layer permutations explored")]
    BudgetExceeded { limit: u64 },
    #[error("gate matrix has a zero entry at ({0}, {1}); ratio argument undefined")]
    ZeroGateEntry(usize, usize),
    #[error("grid of {pairs} diagonal pairs exceeds the {budget} budget")]
    GridTooLarge { pairs: u128, budget: u128 },
}

pub type Result<T> = std::result::Result<T, SymmetryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Hidden,
    Output,
}

/// Layered computation graph. Block `l` is the `widths[l+1] x widths[l]`
/// adjacency between layer `l` and `l+1`: the layer mask for masked models,
/// all-ones for standard ones. Fixed (masked-out) entries are absent edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompDag {
    pub widths: Vec<usize>,
    pub blocks: Vec<Vec<u8>>,
}

impl CompDag {
    pub fn node_kind(&self, layer: usize) -> NodeKind {
        if layer == 0 {
            NodeKind::Input
        } else if layer + 1 == self.widths.len() {
            NodeKind::Output
        } else {
            NodeKind::Hidden
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.widths.iter().sum()
    }

    fn block(&self, l: usize) -> (&[u8], usize, usize) {
        (&self.blocks[l], self.widths[l + 1], self.widths[l])
    }
}

/// Builds the layered DAG of a standard or masked MLP.
pub fn build_dag(model: &Model) -> Result<CompDag> {
    if model.config.asym_mode == AsymMode::SigmaAsym {
        return Err(SymmetryError::SigmaAsymUnsupported);
    }
    let widths = model.config.widths.clone();
    let mut blocks = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let block = match &layer.mask {
            Some(m) => m.clone(),
            None => vec![1u8; layer.d_out * layer.d_in],
        };
        for r in 0..layer.d_out {
            if block[r * layer.d_in..(r + 1) * layer.d_in].iter().all(|&e| e == 0) {
                return Err(SymmetryError::DisconnectedNode { layer: l + 1, node: r });
            }
        }
        blocks.push(block);
    }
    Ok(CompDag { widths, blocks })
}

/// A graph automorphism as per-hidden-layer permutations; input and output
/// layers are fixed pointwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Automorphism {
    pub perms: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutomorphismReport {
    pub count: u128,
    /// Materialized automorphisms; empty when only the count was computed
    /// analytically (all-ones blocks).
    pub elements: Vec<Automorphism>,
    pub exhaustive: bool,
}

fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

/// Candidate images for each row of `block` given the permutation already
/// chosen for the previous layer: row i may map to row r iff
/// `block[r][tau_prev[j]] == block[i][j]` for all j.
fn row_candidates(block: &[u8], h: usize, w: usize, tau_prev: &[usize]) -> Vec<Vec<usize>> {
    let key = |r: usize, perm: bool| -> Vec<u8> {
        (0..w)
            .map(|j| block[r * w + if perm { tau_prev[j] } else { j }])
            .collect()
    };
    let source: Vec<Vec<u8>> = (0..h).map(|i| key(i, false)).collect();
    let target: Vec<Vec<u8>> = (0..h).map(|r| key(r, true)).collect();
    (0..h)
        .map(|i| (0..h).filter(|&r| target[r] == source[i]).collect())
        .collect()
}

struct Search<'a> {
    dag: &'a CompDag,
    limit: u64,
    explored: u64,
    found: Vec<Automorphism>,
}

impl Search<'_> {
    fn run(&mut self) -> Result<()> {
        let tau0: Vec<usize> = (0..self.dag.widths[0]).collect();
        let mut stack = Vec::new();
        self.layer(1, &tau0, &mut stack)
    }

    fn layer(&mut self, l: usize, tau_prev: &[usize], chosen: &mut Vec<Vec<usize>>) -> Result<()> {
        let last = self.dag.widths.len() - 1;
        if l == last {
            // output layer is fixed: the final block must be invariant
            let (block, h, w) = self.dag.block(l - 1);
            for o in 0..h {
                for j in 0..w {
                    if block[o * w + tau_prev[j]] != block[o * w + j] {
                        return Ok(());
                    }
                }
            }
            self.found.push(Automorphism { perms: chosen.clone() });
            return Ok(());
        }
        let (block, h, w) = self.dag.block(l - 1);
        let candidates = row_candidates(block, h, w, tau_prev);
        let mut tau = vec![usize::MAX; h];
        let mut used = vec![false; h];
        self.assign(l, 0, &candidates, &mut tau, &mut used, chosen)
    }

    #[allow(clippy::too_many_arguments)]
    fn assign(
        &mut self,
        l: usize,
        i: usize,
        candidates: &[Vec<usize>],
        tau: &mut Vec<usize>,
        used: &mut Vec<bool>,
        chosen: &mut Vec<Vec<usize>>,
    ) -> Result<()> {
        if i == tau.len() {
            self.explored += 1;
            if self.explored > self.limit {
                return Err(SymmetryError::BudgetExceeded { limit: self.limit });
            }
            let snapshot = tau.clone();
            chosen.push(snapshot.clone());
            let r = self.layer(l + 1, &snapshot, chosen);
            chosen.pop();
            return r;
        }
        for &r in &candidates[i] {
            if !used[r] {
                used[r] = true;
                tau[i] = r;
                self.assign(l, i + 1, candidates, tau, used, chosen)?;
                used[r] = false;
            }
        }
        Ok(())
    }
}

/// Exhaustive layer-preserving automorphism search. All-ones DAGs (standard
/// MLPs) shortcut to the closed-form count `prod h_i!` without materializing
/// elements; masked DAGs are searched with row-compatibility pruning.
pub fn find_automorphisms(dag: &CompDag, limit: u64) -> Result<AutomorphismReport> {
    if dag.blocks.iter().all(|b| b.iter().all(|&e| e == 1)) {
        let count = dag.widths[1..dag.widths.len() - 1]
            .iter()
            .try_fold(1u128, |acc, &h| factorial(h).and_then(|f| acc.checked_mul(f)));
        match count {
            // too many hidden-unit permutations to even count in 128 bits
            None => return Err(SymmetryError::BudgetExceeded { limit }),
            Some(count) if count > limit as u128 => {
                return Ok(AutomorphismReport { count, elements: vec![], exhaustive: true })
            }
            // small enough to materialize; fall through to the search
            Some(_) => {}
        }
    }
    let mut search = Search { dag, limit, explored: 0, found: Vec::new() };
    search.run()?;
    Ok(AutomorphismReport {
        count: search.found.len() as u128,
        elements: search.found,
        exhaustive: true,
    })
}

/// Unrestricted node-level search for tiny graphs: permutes all hidden nodes
/// jointly (inputs/outputs fixed) and keeps edge-preserving relabelings.
/// Used to confirm that automorphisms never mix layers.
pub fn unrestricted_automorphisms(dag: &CompDag, max_hidden: usize) -> Result<Vec<Vec<usize>>> {
    let hidden: Vec<(usize, usize)> = (1..dag.widths.len() - 1)
        .flat_map(|l| (0..dag.widths[l]).map(move |i| (l, i)))
        .collect();
    let n = hidden.len();
    if n > max_hidden {
        return Err(SymmetryError::BudgetExceeded { limit: max_hidden as u64 });
    }
    // edge set over (layer, index) node ids, inputs and outputs included
    let mut edges = std::collections::HashSet::new();
    for l in 0..dag.blocks.len() {
        let (block, h, w) = dag.block(l);
        for r in 0..h {
            for c in 0..w {
                if block[r * w + c] == 1 {
                    edges.insert(((l, c), (l + 1, r)));
                }
            }
        }
    }
    let mut results = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    permute_all(&mut perm, 0, &mut |p| {
        let map = |node: (usize, usize)| -> (usize, usize) {
            match hidden.iter().position(|&h| h == node) {
                Some(i) => hidden[p[i]],
                None => node,
            }
        };
        let ok = edges.iter().all(|&(u, v)| edges.contains(&(map(u), map(v))));
        if ok {
            results.push(p.to_vec());
        }
    });
    Ok(results)
}

fn permute_all(idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == idx.len() {
        f(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute_all(idx, k + 1, f);
        idx.swap(k, i);
    }
}

/// A node permutation mixes layers if any hidden node maps to a different
/// layer.
pub fn mixes_layers(dag: &CompDag, node_perm: &[usize]) -> bool {
    let hidden: Vec<(usize, usize)> = (1..dag.widths.len() - 1)
        .flat_map(|l| (0..dag.widths[l]).map(move |i| (l, i)))
        .collect();
    node_perm.iter().enumerate().any(|(i, &j)| hidden[i].0 != hidden[j].0)
}

pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermFalsifierReport {
    pub dim: usize,
    pub num_pairs: usize,
    pub identity_residual: f64,
    /// Smallest residual among all pairs other than (I, I); a value bounded
    /// away from zero falsifies permutation equivariance.
    pub min_nontrivial_residual: f64,
    /// Pairs within tolerance of zero residual, (I, I) excluded.
    pub symmetric_pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    permute_all(&mut idx, 0, &mut |p| out.push(p.to_vec()));
    out.sort();
    out
}

fn probe_batch(d: usize, num_probes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_probes)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn apply_perm(p: &[usize], x: &[f64]) -> Vec<f64> {
    p.iter().map(|&i| x[i]).collect()
}

/// Exhaustive sweep over permutation pairs (P1, P2): residual is the max
/// over probes of the sup-norm of `gate(P1 x) - P2 gate(x)`.
pub fn figlu_perm_falsifier(figlu: &FigluLayer, num_probes: usize, seed: u64) -> PermFalsifierReport {
    let d = figlu.dim;
    let perms = all_perms(d);
    let probes = probe_batch(d, num_probes, seed);
    let identity: Vec<usize> = (0..d).collect();
    let mut identity_residual = 0.0f64;
    let mut min_nontrivial = f64::INFINITY;
    let mut symmetric_pairs = Vec::new();
    let mut num_pairs = 0;
    for p1 in &perms {
        for p2 in &perms {
            num_pairs += 1;
            let mut residual = 0.0f64;
            for x in &probes {
                let lhs = figlu.eval(&apply_perm(p1, x));
                let rhs = apply_perm(p2, &figlu.eval(x));
                for (a, b) in lhs.iter().zip(&rhs) {
                    residual = residual.max((a - b).abs());
                }
            }
            if p1 == &identity && p2 == &identity {
                identity_residual = residual;
            } else {
                min_nontrivial = min_nontrivial.min(residual);
                if residual <= SYMMETRY_TOL {
                    symmetric_pairs.push((p1.clone(), p2.clone()));
                }
            }
        }
    }
    PermFalsifierReport {
        dim: d,
        num_pairs,
        identity_residual,
        min_nontrivial_residual: min_nontrivial,
        symmetric_pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagFalsifierReport {
    pub dim: usize,
    pub num_pairs: usize,
    pub identity_residual: f64,
    pub min_nontrivial_residual: f64,
    pub symmetric_pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Residual of a single diagonal pair (A, B): max over probes of the
/// sup-norm of `gate(A x) - B gate(x)`.
pub fn diag_pair_residual(figlu: &FigluLayer, a: &[f64], b: &[f64], probes: &[Vec<f64>]) -> f64 {
    let mut residual = 0.0f64;
    for x in probes {
        let ax: Vec<f64> = x.iter().zip(a).map(|(&v, &s)| v * s).collect();
        let lhs = figlu.eval(&ax);
        let rhs: Vec<f64> = figlu.eval(x).iter().zip(b).map(|(&v, &s)| v * s).collect();
        for (l, r) in lhs.iter().zip(&rhs) {
            residual = residual.max((l - r).abs());
        }
    }
    residual
}

/// Sweeps diagonal pairs (A, B) with entries from `grid`; asserts nonzero
/// residual everywhere except identity. Early-exits a pair once its residual
/// clears tolerance.
pub fn figlu_diag_falsifier(
    figlu: &FigluLayer,
    grid: &[f64],
    num_probes: usize,
    seed: u64,
) -> Result<DiagFalsifierReport> {
    let d = figlu.dim;
    for (i, row) in figlu.fixed.chunks(d).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v == 0.0 {
                return Err(SymmetryError::ZeroGateEntry(i, j));
            }
        }
    }
    let diag_count = (grid.len() as u128).pow(d as u32);
    let pairs = diag_count * diag_count;
    const BUDGET: u128 = 10_000_000;
    if pairs > BUDGET {
        return Err(SymmetryError::GridTooLarge { pairs, budget: BUDGET });
    }
    let probes = probe_batch(d, num_probes, seed);
    let diags: Vec<Vec<f64>> = cartesian(grid, d);
    let identity = vec![1.0; d];
    let mut identity_residual = f64::NAN;
    let mut min_nontrivial = f64::INFINITY;
    let mut symmetric_pairs = Vec::new();
    for a in &diags {
        for b in &diags {
            let residual = diag_pair_residual(figlu, a, b, &probes);
            if a == &identity && b == &identity {
                identity_residual = residual;
            } else {
                min_nontrivial = min_nontrivial.min(residual);
                if residual <= SYMMETRY_TOL {
                    symmetric_pairs.push((a.clone(), b.clone()));
                }
            }
        }
    }
    Ok(DiagFalsifierReport {
        dim: d,
        num_pairs: (diags.len() * diags.len()),
        identity_residual,
        min_nontrivial_residual: min_nontrivial,
        symmetric_pairs,
    })
}

fn cartesian(grid: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                grid.iter().map(move |&g| {
                    let mut v = prefix.clone();
                    v.push(g);
                    v
                })
            })
            .collect();
    }
    out
}
