//! Closed-form exact representation of a linear map by two-layer networks
//! whose weights carry hardwired (masked) entries, plus the mask
//! admissibility checks the construction depends on. No optimizer is ever
//! involved: every coefficient is solved for directly.

use crate::nn::{build_model, Model, ModelConfig, NnError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UniversalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("outer mask row {row} has three consecutive zeros starting at column {col}")]
    NInadmissible { row: usize, col: usize },
    #[error("inner mask block {block} has {pairs} intersecting row pairs (at most 1 allowed)")]
    MInadmissible { block: usize, pairs: usize },
    #[error("block {block}: no row arrangement leaves a free outer coefficient in every value group")]
    NoFeasibleArrangement { block: usize },
    #[error("output row {row}, block {block}, group {group}: all outer coefficients hardwired")]
    GroupInfeasible { row: usize, block: usize, group: usize },
    #[error("every entry fixed (n_fix = width) leaves no trainable coefficients")]
    FullyFixed,
    #[error("admissible mask not found in {attempts} sampling attempts")]
    RetriesExhausted { attempts: usize },
    #[error("nonlinearity does not satisfy eta(x) - eta(-x) = x on the probe grid")]
    EtaIdentity,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, UniversalError>;

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// The construction needs `eta(x) - eta(-x) = x`; checked on a grid instead
/// of assumed.
fn eta_identity_holds() -> bool {
    (-40..=40).all(|i| {
        let x = i as f64 * 0.1;
        (relu(x) - relu(-x) - x).abs() < 1e-15
    })
}

fn matvec(mat: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| (0..cols).map(|c| mat[r * cols + c] * x[c]).sum())
        .collect()
}

/// A solved two-layer representation `x -> A_eff relu(B_eff x) = W x`.
/// `a`/`b` are the trainable matrices (zero at hardwired positions);
/// `a_eff`/`b_eff` fold the hardwired payloads in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactFit {
    pub n_out: usize,
    pub n_in: usize,
    pub hidden: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub a_eff: Vec<f64>,
    pub b_eff: Vec<f64>,
    pub residual_bound: f64,
}

impl ExactFit {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = matvec(&self.b_eff, self.hidden, self.n_in, x).into_iter().map(relu).collect();
        matvec(&self.a_eff, self.n_out, self.hidden, &h)
    }
}

/// Max sup-norm deviation from `W x` over seeded probes in `[-3, 3]^n`.
pub fn fit_residual(fit: &ExactFit, w: &[f64], num_probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..num_probes {
        let x: Vec<f64> = (0..fit.n_in).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = fit.eval(&x);
        let want = matvec(w, fit.n_out, fit.n_in, &x);
        for (g, t) in got.iter().zip(&want) {
            worst = worst.max((g - t).abs());
        }
    }
    worst
}

pub fn residual_tolerance(w: &[f64]) -> f64 {
    let w_inf = w.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    1e-9 * (1.0 + w_inf)
}

const RESIDUAL_PROBES: usize = 500;
const RESIDUAL_SEED: u64 = 0x5eed;

/// Plain two-layer fit: `A = I (x) [1, -1]`, `B` stacks `W_i` and `-W_i`.
pub fn fit_linear_plain(w: &[f64], n_out: usize, n_in: usize) -> Result<ExactFit> {
    if w.len() != n_out * n_in {
        return Err(UniversalError::Shape(format!("W has {} entries, want {}", w.len(), n_out * n_in)));
    }
    if !eta_identity_holds() {
        return Err(UniversalError::EtaIdentity);
    }
    let hidden = 2 * n_out;
    let mut b = vec![0.0; hidden * n_in];
    for i in 0..n_out {
        for c in 0..n_in {
            b[(2 * i) * n_in + c] = w[i * n_in + c];
            b[(2 * i + 1) * n_in + c] = -w[i * n_in + c];
        }
    }
    let mut a = vec![0.0; n_out * hidden];
    for i in 0..n_out {
        a[i * hidden + 2 * i] = 1.0;
        a[i * hidden + 2 * i + 1] = -1.0;
    }
    let mut fit = ExactFit {
        n_out,
        n_in,
        hidden,
        a_eff: a.clone(),
        b_eff: b.clone(),
        a,
        b,
        residual_bound: 0.0,
    };
    fit.residual_bound = fit_residual(&fit, w, RESIDUAL_PROBES, RESIDUAL_SEED);
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NAdmissibility {
    pub admissible: bool,
    /// `(row, col)` of the first three-consecutive-zero run.
    pub offending: Option<(usize, usize)>,
}

/// A row with three consecutive hardwired entries can lose a whole triple of
/// nonlinearity copies; such masks are rejected.
pub fn check_n_admissible(mask: &[u8], rows: usize, cols: usize) -> NAdmissibility {
    for r in 0..rows {
        for c in 0..cols.saturating_sub(2) {
            if mask[r * cols + c] == 0 && mask[r * cols + c + 1] == 0 && mask[r * cols + c + 2] == 0 {
                return NAdmissibility { admissible: false, offending: Some((r, c)) };
            }
        }
    }
    NAdmissibility { admissible: true, offending: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MAdmissibility {
    pub admissible: bool,
    pub offending_block: Option<usize>,
    /// Intersecting row pairs (indices within the offending block).
    pub pairs: Vec<(usize, usize)>,
}

fn block_intersecting_pairs(mask: &[u8], cols: usize, block: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for p in 0..24 {
        for q in p + 1..24 {
            let rp = (24 * block + p) * cols;
            let rq = (24 * block + q) * cols;
            if (0..cols).any(|c| mask[rp + c] == 0 && mask[rq + c] == 0) {
                pairs.push((p, q));
            }
        }
    }
    pairs
}

/// Each 24-row block of the inner mask may contain at most one pair of rows
/// sharing a hardwired column.
pub fn check_m_admissible(mask: &[u8], rows: usize, cols: usize) -> MAdmissibility {
    assert_eq!(rows % 24, 0);
    assert_eq!(mask.len(), rows * cols);
    for block in 0..rows / 24 {
        let pairs = block_intersecting_pairs(mask, cols, block);
        if pairs.len() > 1 {
            return MAdmissibility { admissible: false, offending_block: Some(block), pairs };
        }
    }
    MAdmissibility { admissible: true, offending_block: None, pairs: vec![] }
}

/// Outer-masked fit: `B` triplicates `W_i` and `-W_i` (6 hidden rows per
/// output), and the free entries of `A` are solved so each copy-triple's
/// coefficients sum to the target, cancelling the hardwired ones.
/// Returns the trainable `A` (n_out x 6 n_out); masked positions are zero.
pub fn fit_linear_outer_masked(
    w: &[f64],
    n_out: usize,
    n_in: usize,
    n_mask: &[u8],
    p_fixed: &[f64],
) -> Result<ExactFit> {
    if w.len() != n_out * n_in {
        return Err(UniversalError::Shape("W".into()));
    }
    let hidden = 6 * n_out;
    if n_mask.len() != n_out * hidden || p_fixed.len() != n_out * hidden {
        return Err(UniversalError::Shape("outer mask/payload".into()));
    }
    if !eta_identity_holds() {
        return Err(UniversalError::EtaIdentity);
    }
    let adm = check_n_admissible(n_mask, n_out, hidden);
    if let Some((row, col)) = adm.offending {
        return Err(UniversalError::NInadmissible { row, col });
    }
    let mut b = vec![0.0; hidden * n_in];
    for j in 0..n_out {
        for copy in 0..3 {
            for c in 0..n_in {
                b[(6 * j + copy) * n_in + c] = w[j * n_in + c];
                b[(6 * j + 3 + copy) * n_in + c] = -w[j * n_in + c];
            }
        }
    }
    let mut a = vec![0.0; n_out * hidden];
    for i in 0..n_out {
        for j in 0..n_out {
            for (group, desired) in [(0usize, if i == j { 1.0 } else { 0.0 }), (1, if i == j { -1.0 } else { 0.0 })] {
                let cols: Vec<usize> = (0..3).map(|copy| 6 * j + 3 * group + copy).collect();
                solve_group(&mut a, n_mask, p_fixed, hidden, i, &cols, desired)
                    .map_err(|group| UniversalError::GroupInfeasible { row: i, block: j, group })?;
            }
        }
    }
    let a_eff = effective(&a, n_mask, p_fixed);
    let mut fit = ExactFit {
        n_out,
        n_in,
        hidden,
        a,
        b_eff: b.clone(),
        b,
        a_eff,
        residual_bound: 0.0,
    };
    fit.residual_bound = fit_residual(&fit, w, RESIDUAL_PROBES, RESIDUAL_SEED);
    Ok(fit)
}

/// Hardwired entries contribute their payload values; one free entry absorbs
/// the difference so the group sums to `desired`.
fn solve_group(
    a: &mut [f64],
    mask: &[u8],
    fixed: &[f64],
    width: usize,
    row: usize,
    cols: &[usize],
    desired: f64,
) -> std::result::Result<(), usize> {
    let mut fixed_sum = 0.0;
    let mut free = None;
    for &c in cols {
        if mask[row * width + c] == 0 {
            fixed_sum += fixed[row * width + c];
        } else if free.is_none() {
            free = Some(c);
        } else {
            a[row * width + c] = 0.0;
        }
    }
    match free {
        Some(c) => {
            a[row * width + c] = desired - fixed_sum;
            Ok(())
        }
        None => Err(cols[0]),
    }
}

fn effective(trainable: &[f64], mask: &[u8], fixed: &[f64]) -> Vec<f64> {
    trainable
        .iter()
        .zip(mask)
        .zip(fixed)
        .map(|((&t, &m), &f)| if m == 1 { t } else { f })
        .collect()
}

// Roles inside a 24-row block: 0-2 carry W_i + c-correction, 3-5 its
// negation, 6-8 / 9-11 the correction alone and negated, 12-23 the spare
// half. Value groups collapse roles to the five distinct pre-activation
// values.
fn role_group(role: usize) -> usize {
    match role {
        0..=2 => 0,
        3..=5 => 1,
        6..=8 => 2,
        9..=11 => 3,
        _ => 4,
    }
}

/// Group coefficient pattern producing `W_i . x` from the block's
/// activations: `eta(W+c) - eta(-W-c) - eta(c) + eta(-c)`, spare rows unused.
const GROUP_SIGNS: [f64; 5] = [1.0, -1.0, -1.0, 1.0, 0.0];

/// Picks a role assignment for block `block`: the (at most one) intersecting
/// row pair must straddle the two 12-row halves, and every outer row must
/// keep at least one free coefficient per value group. Tries the identity
/// arrangement first, then single cross-half swaps.
fn choose_roles(
    n_mask: &[u8],
    n_out: usize,
    hidden: usize,
    m_mask: &[u8],
    n_in: usize,
    block: usize,
) -> Result<Vec<usize>> {
    let pairs = block_intersecting_pairs(m_mask, n_in, block);
    if pairs.len() > 1 {
        return Err(UniversalError::MInadmissible { block, pairs: pairs.len() });
    }
    let split_ok = |roles: &[usize]| -> bool {
        match pairs.first() {
            None => true,
            Some(&(p, q)) => (roles[p] < 12) != (roles[q] < 12),
        }
    };
    let groups_ok = |roles: &[usize]| -> bool {
        (0..n_out).all(|row| {
            (0..5).all(|g| {
                (0..24).any(|p| role_group(roles[p]) == g && n_mask[row * hidden + 24 * block + p] == 1)
            })
        })
    };
    let identity: Vec<usize> = (0..24).collect();
    if split_ok(&identity) && groups_ok(&identity) {
        return Ok(identity);
    }
    for lo in 0..12 {
        for hi in 12..24 {
            let mut roles = identity.clone();
            roles.swap(lo, hi);
            if split_ok(&roles) && groups_ok(&roles) {
                return Ok(roles);
            }
        }
    }
    Err(UniversalError::NoFeasibleArrangement { block })
}

/// Both layers masked. The inner matrix is built so the hardwired entries of
/// each row are cancelled by correction vectors accumulated from the rest of
/// its 12-row half; the outer matrix then solves per-group sums exactly as in
/// the outer-masked stage. `W` may be rectangular (n_out <= n_in); hidden
/// width is `24 * n_in` with block `i >= n_out` targeting the zero row.
pub fn fit_linear_both_masked(
    w: &[f64],
    n_out: usize,
    n_in: usize,
    n_mask: &[u8],
    m_mask: &[u8],
    p_fixed: &[f64],
    q_fixed: &[f64],
) -> Result<ExactFit> {
    if w.len() != n_out * n_in || n_out > n_in {
        return Err(UniversalError::Shape("W must be n_out x n_in with n_out <= n_in".into()));
    }
    let hidden = 24 * n_in;
    if n_mask.len() != n_out * hidden || p_fixed.len() != n_out * hidden {
        return Err(UniversalError::Shape("outer mask/payload".into()));
    }
    if m_mask.len() != hidden * n_in || q_fixed.len() != hidden * n_in {
        return Err(UniversalError::Shape("inner mask/payload".into()));
    }
    if !eta_identity_holds() {
        return Err(UniversalError::EtaIdentity);
    }
    let mut b = vec![0.0; hidden * n_in];
    let mut a = vec![0.0; n_out * hidden];
    for block in 0..n_in {
        let roles = choose_roles(n_mask, n_out, hidden, m_mask, n_in, block)?;
        let w_i: Vec<f64> = if block < n_out {
            w[block * n_in..(block + 1) * n_in].to_vec()
        } else {
            vec![0.0; n_in]
        };
        // correction vector of each row: supported on its hardwired columns,
        // valued so the effective row lands exactly on its target
        let mut c_by_role = vec![vec![0.0; n_in]; 24];
        for p in 0..24 {
            let role = roles[p];
            let r = (24 * block + p) * n_in;
            for col in 0..n_in {
                if m_mask[r + col] == 0 {
                    c_by_role[role][col] = q_fixed[r + col]
                        + match role_group(role) {
                            0 => -w_i[col],
                            1 => w_i[col],
                            _ => 0.0,
                        };
                }
            }
        }
        // alternating sum of the first half's triples and the spare sum
        let mut c_vec = vec![0.0; n_in];
        for (t, sign) in [(0usize, 1.0), (1, -1.0), (2, 1.0), (3, -1.0)] {
            for role in 3 * t..3 * t + 3 {
                for col in 0..n_in {
                    c_vec[col] += sign * c_by_role[role][col];
                }
            }
        }
        let mut d_vec = vec![0.0; n_in];
        for role in 12..24 {
            for col in 0..n_in {
                d_vec[col] += c_by_role[role][col];
            }
        }
        let value = |role: usize, col: usize| -> f64 {
            match role_group(role) {
                0 => w_i[col] + c_vec[col],
                1 => -w_i[col] - c_vec[col],
                2 => c_vec[col],
                3 => -c_vec[col],
                _ => d_vec[col],
            }
        };
        for p in 0..24 {
            let role = roles[p];
            let r = (24 * block + p) * n_in;
            for col in 0..n_in {
                // trainable entry; hardwired positions stay zero
                if m_mask[r + col] == 1 {
                    b[r + col] = value(role, col) - c_by_role[role][col];
                }
            }
        }
        for row in 0..n_out {
            for g in 0..5 {
                let cols: Vec<usize> = (0..24)
                    .filter(|&p| role_group(roles[p]) == g)
                    .map(|p| 24 * block + p)
                    .collect();
                let desired = if block == row { GROUP_SIGNS[g] } else { 0.0 };
                solve_group(&mut a, n_mask, p_fixed, hidden, row, &cols, desired)
                    .map_err(|_| UniversalError::GroupInfeasible { row, block, group: g })?;
            }
        }
    }
    let a_eff = effective(&a, n_mask, p_fixed);
    let b_eff = effective(&b, m_mask, q_fixed);
    let mut fit = ExactFit {
        n_out,
        n_in,
        hidden,
        a,
        b,
        a_eff,
        b_eff,
        residual_bound: 0.0,
    };
    fit.residual_bound = fit_residual(&fit, w, RESIDUAL_PROBES, RESIDUAL_SEED);
    Ok(fit)
}

/// Samples an outer mask/payload (retrying on inadmissibility), solves the
/// outer-masked fit, and installs it into a two-layer model whose second
/// layer carries the mask — a loadable checkpoint subject.
pub fn fit_outer_masked_model(
    w: &[f64],
    n: usize,
    n_fix: usize,
    kappa: f64,
    asym_seed: u64,
    max_retries: usize,
) -> Result<(Model, ExactFit)> {
    if n_fix >= 6 * n {
        return Err(UniversalError::FullyFixed);
    }
    for attempt in 0..max_retries {
        let cfg = ModelConfig::w_asym(
            vec![n, 6 * n, n],
            false,
            vec![0, n_fix],
            vec![0.0, kappa],
            asym_seed.wrapping_add(attempt as u64),
            0,
        );
        let mut model = build_model(&cfg)?;
        let n_mask = model.layers[1].mask.clone().expect("outer layer is masked");
        if !check_n_admissible(&n_mask, n, 6 * n).admissible {
            continue;
        }
        let p_fixed = model.layers[1].fixed.clone().expect("outer layer has payload");
        let fit = fit_linear_outer_masked(w, n, n, &n_mask, &p_fixed)?;
        model.layers[0].weight = fit.b.clone();
        model.layers[0].bias = vec![0.0; 6 * n];
        model.layers[1].weight = fit.a.clone();
        model.layers[1].bias = vec![0.0; n];
        return Ok((model, fit));
    }
    Err(UniversalError::RetriesExhausted { attempts: max_retries })
}
