//! Permutation alignment of trained standard networks: a Hungarian
//! linear-assignment solver plus layerwise weight matching, and the
//! permutation-application machinery for hidden-unit relabelings.

use crate::checkpoint::ModelCheckpoint;
use crate::nn::{AsymMode, Model, NnError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RebasinError {
    #[error("cost matrix must be square, got {rows} rows with a row of length {cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("non-finite cost entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("alignment requires standard (unmasked) checkpoints; got {0:?}")]
    NotStandard(AsymMode),
    #[error("architectures differ: {a:?} vs {b:?}")]
    ArchMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("permutation for hidden layer {layer} has length {got}, expected {expected}")]
    WidthMismatch { layer: usize, got: usize, expected: usize },
    #[error("permutation for hidden layer {0} is not a bijection")]
    NotBijection(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, RebasinError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `perm[row] = column` assigned to that row.
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Optimal linear assignment via the Hungarian algorithm with potentials,
/// O(n^3). Ties are broken by the lowest-index augmenting path, so the
/// result is deterministic.
pub fn lap_solve(cost: &[Vec<f64>], sense: Sense) -> Result<Assignment> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(RebasinError::NonSquare { rows: n, cols: row.len() });
        }
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                return Err(RebasinError::NonFinite(i, j));
            }
        }
    }
    if n == 0 {
        return Ok(Assignment { perm: vec![], total_cost: 0.0 });
    }
    let a = |i: usize, j: usize| match sense {
        Sense::Min => cost[i][j],
        Sense::Max => -cost[i][j],
    };
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n + 1];
    // p[j] = row currently assigned to column j; column n is the virtual start
    let mut p = vec![NONE; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = NONE;
            for j in 0..n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == NONE {
                break;
            }
        }
        // augment along the alternating path back to the virtual column
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 0..n {
        perm[p[j]] = j;
    }
    let total_cost = (0..n).map(|i| cost[i][perm[i]]).sum();
    Ok(Assignment { perm, total_cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// One permutation per hidden layer; `perms[l][j]` is the source unit in
    /// the original checkpoint that lands at position `j` after alignment.
    pub perms: Vec<Vec<usize>>,
    /// Objective after each sweep; non-decreasing by coordinate ascent.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

fn validate_perms(model: &Model, perms: &[Vec<usize>]) -> Result<()> {
    let hidden = model.config.widths.len() - 2;
    if perms.len() != hidden {
        return Err(RebasinError::WidthMismatch {
            layer: perms.len(),
            got: perms.len(),
            expected: hidden,
        });
    }
    for (l, p) in perms.iter().enumerate() {
        let w = model.config.widths[l + 1];
        if p.len() != w {
            return Err(RebasinError::WidthMismatch { layer: l, got: p.len(), expected: w });
        }
        let mut seen = vec![false; w];
        for &j in p {
            if j >= w || seen[j] {
                return Err(RebasinError::NotBijection(l));
            }
            seen[j] = true;
        }
    }
    Ok(())
}

/// Relabels hidden units: `W_l <- P_l W_l P_{l-1}^T`, `b_l <- P_l b_l`, with
/// LayerNorm parameters carried along. Network function is preserved.
pub fn apply_permutation(ckpt: &ModelCheckpoint, perms: &[Vec<usize>]) -> Result<ModelCheckpoint> {
    if ckpt.config.asym_mode != AsymMode::Standard {
        return Err(RebasinError::NotStandard(ckpt.config.asym_mode));
    }
    let mut model = ckpt.to_model()?;
    validate_perms(&model, perms)?;
    let num_layers = model.layers.len();
    let perm_for = |l: usize| -> Option<&Vec<usize>> {
        // output side of layer l is hidden layer l; input/output stay fixed
        if l < perms.len() {
            Some(&perms[l])
        } else {
            None
        }
    };
    let mut new_layers = model.layers.clone();
    for l in 0..num_layers {
        let layer = &model.layers[l];
        let (d_out, d_in) = (layer.d_out, layer.d_in);
        let out_p = perm_for(l);
        let in_p = if l > 0 { perm_for(l - 1) } else { None };
        let mut w = vec![0.0; d_out * d_in];
        let mut b = vec![0.0; d_out];
        for j in 0..d_out {
            let src_row = out_p.map_or(j, |p| p[j]);
            b[j] = layer.bias[src_row];
            for k in 0..d_in {
                let src_col = in_p.map_or(k, |p| p[k]);
                w[j * d_in + k] = layer.weight[src_row * d_in + src_col];
            }
        }
        new_layers[l].weight = w;
        new_layers[l].bias = b;
    }
    model.layers = new_layers;
    for (l, ln) in model.layer_norms.iter_mut().enumerate() {
        if let Some(p) = perms.get(l) {
            ln.gain = p.iter().map(|&s| ln.gain[s]).collect();
            ln.bias = p.iter().map(|&s| ln.bias[s]).collect();
        }
    }
    Ok(ModelCheckpoint::from_model(&model, ckpt.provenance.clone()))
}

fn matching_objective(a: &Model, b: &Model, perms: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for l in 0..a.layers.len() {
        let la = &a.layers[l];
        let lb = &b.layers[l];
        let (d_out, d_in) = (la.d_out, la.d_in);
        let out_p = perms.get(l);
        let in_p = if l > 0 { perms.get(l - 1) } else { None };
        for j in 0..d_out {
            let bj = out_p.map_or(j, |p| p[j]);
            total += la.bias[j] * lb.bias[bj];
            for k in 0..d_in {
                let bk = in_p.map_or(k, |p| p[k]);
                total += la.weight[j * d_in + k] * lb.weight[bj * d_in + bk];
            }
        }
    }
    for (l, (lna, lnb)) in a.layer_norms.iter().zip(&b.layer_norms).enumerate() {
        if let Some(p) = perms.get(l) {
            for j in 0..lna.gain.len() {
                total += lna.gain[j] * lnb.gain[p[j]] + lna.bias[j] * lnb.bias[p[j]];
            }
        }
    }
    total
}

/// Git-ReBasin-style weight matching: coordinate ascent over hidden layers,
/// each step an exact max-LAP on the similarity between A's units and B's
/// units given the neighboring permutations. Returns permutations that align
/// B onto A (feed them to [`apply_permutation`] on B).
pub fn weight_match(ckpt_a: &ModelCheckpoint, ckpt_b: &ModelCheckpoint, max_sweeps: usize) -> Result<AlignmentResult> {
    for c in [ckpt_a, ckpt_b] {
        if c.config.asym_mode != AsymMode::Standard {
            return Err(RebasinError::NotStandard(c.config.asym_mode));
        }
    }
    if ckpt_a.config.widths != ckpt_b.config.widths {
        return Err(RebasinError::ArchMismatch {
            a: ckpt_a.config.widths.clone(),
            b: ckpt_b.config.widths.clone(),
        });
    }
    let a = ckpt_a.to_model()?;
    let b = ckpt_b.to_model()?;
    let hidden = a.config.widths.len() - 2;
    let mut perms: Vec<Vec<usize>> = (0..hidden).map(|l| (0..a.config.widths[l + 1]).collect()).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    for _sweep in 0..max_sweeps {
        let mut changed = false;
        for l in 0..hidden {
            let h = a.config.widths[l + 1];
            // cost[j][i]: similarity of A unit j (layer l output) with B unit i
            let mut cost = vec![vec![0.0; h]; h];
            let la = &a.layers[l];
            let lb = &b.layers[l];
            let d_in = la.d_in;
            let in_p: Option<&Vec<usize>> = if l > 0 { Some(&perms[l - 1]) } else { None };
            for j in 0..h {
                for i in 0..h {
                    let mut s = la.bias[j] * lb.bias[i];
                    for k in 0..d_in {
                        let bk = in_p.map_or(k, |p| p[k]);
                        s += la.weight[j * d_in + k] * lb.weight[i * d_in + bk];
                    }
                    cost[j][i] = s;
                }
            }
            let na = &a.layers[l + 1];
            let nb = &b.layers[l + 1];
            let d_out_next = na.d_out;
            let out_p: Option<&Vec<usize>> = if l + 1 < hidden { Some(&perms[l + 1]) } else { None };
            for m in 0..d_out_next {
                let bm = out_p.map_or(m, |p| p[m]);
                for j in 0..h {
                    for i in 0..h {
                        cost[j][i] += na.weight[m * h + j] * nb.weight[bm * h + i];
                    }
                }
            }
            if let (Some(lna), Some(lnb)) = (a.layer_norms.get(l), b.layer_norms.get(l)) {
                for j in 0..h {
                    for i in 0..h {
                        cost[j][i] += lna.gain[j] * lnb.gain[i] + lna.bias[j] * lnb.bias[i];
                    }
                }
            }
            let assignment = lap_solve(&cost, Sense::Max)?;
            if assignment.perm != perms[l] {
                perms[l] = assignment.perm;
                changed = true;
            }
        }
        trace.push(matching_objective(&a, &b, &perms));
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(AlignmentResult { perms, objective_trace: trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Provenance;
    use crate::nn::{build_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[Vec<f64>], sense: Sense) -> f64 {
        let n = cost.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut best = match sense {
            Sense::Min => f64::INFINITY,
            Sense::Max => f64::NEG_INFINITY,
        };
        permute(&mut idx, 0, &mut |p| {
            let c: f64 = (0..n).map(|i| cost[i][p[i]]).sum();
            best = match sense {
                Sense::Min => best.min(c),
                Sense::Max => best.max(c),
            };
        });
        best
    }

    fn permute(idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == idx.len() {
            f(idx);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute(idx, k + 1, f);
            idx.swap(k, i);
        }
    }

    #[test]
    fn identity_cost_max_picks_diagonal() {
        let cost: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let a = lap_solve(&cost, Sense::Max).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2, 3]);
        assert_eq!(a.total_cost, 4.0);
    }

    #[test]
    fn two_by_two_min() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let a = lap_solve(&cost, Sense::Min).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(matches!(
            lap_solve(&[vec![1.0, 2.0], vec![1.0]], Sense::Min),
            Err(RebasinError::NonSquare { .. })
        ));
        assert!(matches!(
            lap_solve(&[vec![1.0, f64::NAN], vec![1.0, 2.0]], Sense::Min),
            Err(RebasinError::NonFinite(0, 1))
        ));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let n = rng.random_range(2..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            for sense in [Sense::Min, Sense::Max] {
                let got = lap_solve(&cost, sense).unwrap().total_cost;
                let want = brute_force(&cost, sense);
                assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
            }
        }
    }

    fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }

    fn standard_ckpt(widths: Vec<usize>, layernorm: bool, init_seed: u64) -> ModelCheckpoint {
        let cfg = ModelConfig::standard(widths, layernorm, 0, init_seed);
        ModelCheckpoint::from_model(&build_model(&cfg).unwrap(), Provenance::default())
    }

    #[test]
    fn identity_permutation_is_noop() {
        let ckpt = standard_ckpt(vec![4, 6, 5, 3], true, 1);
        let id: Vec<Vec<usize>> = vec![(0..6).collect(), (0..5).collect()];
        assert_eq!(apply_permutation(&ckpt, &id).unwrap(), ckpt);
    }

    #[test]
    fn permutation_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ckpt = standard_ckpt(vec![4, 8, 6, 3], true, 2);
        let perms = vec![random_perm(8, &mut rng), random_perm(6, &mut rng)];
        let permuted = apply_permutation(&ckpt, &perms).unwrap();
        let m0 = ckpt.to_model().unwrap();
        let m1 = permuted.to_model().unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y0 = m0.logits(&x, 1).unwrap();
            let y1 = m1.logits(&x, 1).unwrap();
            for (a, b) in y0.iter().zip(&y1) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn inverse_permutation_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ckpt = standard_ckpt(vec![4, 7, 3], false, 3);
        let p = random_perm(7, &mut rng);
        let mut inv = vec![0usize; 7];
        for (j, &s) in p.iter().enumerate() {
            inv[s] = j;
        }
        let back = apply_permutation(&apply_permutation(&ckpt, &[p]).unwrap(), &[inv]).unwrap();
        assert_eq!(back.params, ckpt.params);
    }

    #[test]
    fn rejects_masked_checkpoints() {
        let cfg = ModelConfig::w_asym(vec![6, 8, 2], false, vec![2, 1], vec![1.0, 1.0], 1, 0);
        let ckpt = ModelCheckpoint::from_model(&build_model(&cfg).unwrap(), Provenance::default());
        assert!(matches!(
            weight_match(&ckpt, &ckpt, 10),
            Err(RebasinError::NotStandard(_))
        ));
    }

    #[test]
    fn self_match_is_identity_in_one_sweep() {
        let ckpt = standard_ckpt(vec![4, 8, 6, 3], true, 4);
        let r = weight_match(&ckpt, &ckpt, 10).unwrap();
        assert!(r.converged);
        assert_eq!(r.perms[0], (0..8).collect::<Vec<_>>());
        assert_eq!(r.perms[1], (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn recovers_planted_permutation_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..20 {
            let ckpt = standard_ckpt(vec![5, 12, 10, 3], trial % 2 == 0, 100 + trial);
            let plant = vec![random_perm(12, &mut rng), random_perm(10, &mut rng)];
            let shuffled = apply_permutation(&ckpt, &plant).unwrap();
            let r = weight_match(&ckpt, &shuffled, 50).unwrap();
            let aligned = apply_permutation(&shuffled, &r.perms).unwrap();
            assert_eq!(aligned.params, ckpt.params, "trial {trial} failed to recover");
        }
    }

    #[test]
    fn objective_trace_is_non_decreasing() {
        let a = standard_ckpt(vec![6, 16, 16, 4], true, 21);
        let b = standard_ckpt(vec![6, 16, 16, 4], true, 22);
        let r = weight_match(&a, &b, 50).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace decreased: {:?}", r.objective_trace);
        }
        assert!(r.converged);
    }
}
