//! Layer constructors for standard, weight-masked (`w_asym`), and gated
//! (`sigma_asym`) MLPs.
//!
//! A `w_asym` linear layer computes `(M (*) W + (1-M) (*) F) x + b` where `M`
//! is a binary mask with a distinct zero-pattern per row and `F` holds fixed
//! Gaussian entries that are never trained. A `sigma_asym` network replaces
//! the elementwise nonlinearity with FiGLU, `sigmoid(F x) (*) x`, for a fixed
//! square matrix `F`.

use crate::autograd::{Tape, TensorId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("mask generation infeasible: C({d1}, {n_fix}) < {d2} distinct row patterns")]
    MaskInfeasible { d1: usize, n_fix: usize, d2: usize },
    #[error("n_fix = 0 cannot produce distinct rows when d2 > 1")]
    ZeroFixAmbiguous,
    #[error("n_fix {n_fix} must be < input width {d1}")]
    FixTooLarge { n_fix: usize, d1: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymMode {
    Standard,
    WAsym,
    SigmaAsym,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Figlu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer widths, input first: e.g. `[784, 512, 512, 512, 10]`.
    pub widths: Vec<usize>,
    pub asym_mode: AsymMode,
    pub nonlinearity: Nonlinearity,
    pub layernorm: bool,
    /// Fixed entries per row, one per linear layer. Empty unless `w_asym`.
    #[serde(default)]
    pub n_fix: Vec<usize>,
    /// Std-dev of the fixed entries, one per linear layer. Empty unless `w_asym`.
    #[serde(default)]
    pub kappa: Vec<f64>,
    /// Std-dev for FiGLU fixed matrices; defaults to `1/sqrt(d)` per layer.
    #[serde(default)]
    pub figlu_scale: Option<f64>,
    pub asym_seed: u64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn standard(widths: Vec<usize>, layernorm: bool, asym_seed: u64, init_seed: u64) -> Self {
        Self {
            widths,
            asym_mode: AsymMode::Standard,
            nonlinearity: Nonlinearity::Relu,
            layernorm,
            n_fix: vec![],
            kappa: vec![],
            figlu_scale: None,
            asym_seed,
            init_seed,
        }
    }

    pub fn w_asym(
        widths: Vec<usize>,
        layernorm: bool,
        n_fix: Vec<usize>,
        kappa: Vec<f64>,
        asym_seed: u64,
        init_seed: u64,
    ) -> Self {
        Self {
            widths,
            asym_mode: AsymMode::WAsym,
            nonlinearity: Nonlinearity::Relu,
            layernorm,
            n_fix,
            kappa,
            figlu_scale: None,
            asym_seed,
            init_seed,
        }
    }

    pub fn sigma_asym(widths: Vec<usize>, layernorm: bool, asym_seed: u64, init_seed: u64) -> Self {
        Self {
            widths,
            asym_mode: AsymMode::SigmaAsym,
            nonlinearity: Nonlinearity::Figlu,
            layernorm,
            n_fix: vec![],
            kappa: vec![],
            figlu_scale: None,
            asym_seed,
            init_seed,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(NnError::BadConfig("need >= 2 positive layer widths".into()));
        }
        match self.asym_mode {
            AsymMode::Standard => {
                if !self.n_fix.iter().all(|&n| n == 0) {
                    return Err(NnError::BadConfig("standard mode requires n_fix = 0".into()));
                }
            }
            AsymMode::WAsym => {
                if self.nonlinearity != Nonlinearity::Relu {
                    return Err(NnError::BadConfig("w_asym requires relu".into()));
                }
                if self.n_fix.len() != self.num_layers() || self.kappa.len() != self.num_layers() {
                    return Err(NnError::BadConfig(
                        "w_asym needs n_fix and kappa per layer".into(),
                    ));
                }
                if self.n_fix.iter().all(|&nf| nf == 0) {
                    return Err(NnError::BadConfig("w_asym needs n_fix >= 1 on some layer".into()));
                }
                for (l, &nf) in self.n_fix.iter().enumerate() {
                    let (d1, d2) = (self.widths[l], self.widths[l + 1]);
                    // n_fix = 0 leaves this layer unmasked
                    if nf == 0 {
                        continue;
                    }
                    if nf >= d1 {
                        return Err(NnError::FixTooLarge { n_fix: nf, d1 });
                    }
                    if binomial_at_least(d1, nf, d2 as u128).is_none() {
                        return Err(NnError::MaskInfeasible { d1, n_fix: nf, d2 });
                    }
                }
                if self.kappa.iter().any(|&k| k < 0.0) {
                    return Err(NnError::BadConfig("kappa must be >= 0".into()));
                }
            }
            AsymMode::SigmaAsym => {
                if self.nonlinearity != Nonlinearity::Figlu {
                    return Err(NnError::BadConfig("sigma_asym requires figlu".into()));
                }
                if !self.n_fix.iter().all(|&n| n == 0) {
                    return Err(NnError::BadConfig("sigma_asym requires n_fix = 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Returns `Some(())` if `C(n, k) >= threshold` (saturating arithmetic).
fn binomial_at_least(n: usize, k: usize, threshold: u128) -> Option<()> {
    if k > n {
        return if threshold == 0 { Some(()) } else { None };
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc >= threshold {
            return Some(());
        }
    }
    if acc >= threshold {
        Some(())
    } else {
        None
    }
}

/// Generates a `d2 x d1` binary mask with exactly `n_fix` zeros per row at
/// uniformly chosen positions and pairwise-distinct rows. Duplicate rows are
/// resolved by resampling the offending row only.
pub fn generate_mask(d2: usize, d1: usize, n_fix: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    if n_fix == 0 {
        if d2 > 1 {
            return Err(NnError::ZeroFixAmbiguous);
        }
        return Ok(vec![1; d1]);
    }
    if n_fix >= d1 {
        return Err(NnError::FixTooLarge { n_fix, d1 });
    }
    if binomial_at_least(d1, n_fix, d2 as u128).is_none() {
        return Err(NnError::MaskInfeasible { d1, n_fix, d2 });
    }
    let mut mask = vec![1u8; d2 * d1];
    let mut seen: std::collections::HashSet<Vec<u32>> = std::collections::HashSet::new();
    let mut positions: Vec<u32> = (0..d1 as u32).collect();
    for r in 0..d2 {
        loop {
            // partial Fisher-Yates: first n_fix entries become the zero positions
            for i in 0..n_fix {
                let j = rng.random_range(i..d1);
                positions.swap(i, j);
            }
            let mut zeros: Vec<u32> = positions[..n_fix].to_vec();
            zeros.sort_unstable();
            if seen.insert(zeros.clone()) {
                for &z in &zeros {
                    mask[r * d1 + z as usize] = 0;
                }
                break;
            }
        }
    }
    Ok(mask)
}

/// Fills positions where `mask == 0` with i.i.d. `Normal(0, kappa^2)` draws;
/// positions where `mask == 1` are exactly zero.
pub fn sample_fixed(mask: &[u8], kappa: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, kappa.max(0.0)).unwrap();
    mask.iter()
        .map(|&m| if m == 0 { normal.sample(rng) } else { 0.0 })
        .collect()
}

/// A linear layer, optionally with masked/fixed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear {
    pub d_out: usize,
    pub d_in: usize,
    /// `d_out x d_in`, row-major. Masked positions are held at exactly 0.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// `None` for a standard layer.
    pub mask: Option<Vec<u8>>,
    /// Canonical form: zero wherever `mask == 1`. `None` for standard.
    pub fixed: Option<Vec<f64>>,
    pub n_fix: usize,
    pub kappa: f64,
}

impl MaskedLinear {
    /// Effective matrix `M (*) W + (1-M) (*) F` (just `W` for standard layers).
    pub fn effective_weight(&self) -> Vec<f64> {
        match (&self.mask, &self.fixed) {
            (Some(m), Some(f)) => self
                .weight
                .iter()
                .zip(m.iter().zip(f))
                .map(|(&w, (&m, &f))| if m == 1 { w } else { f })
                .collect(),
            _ => self.weight.clone(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.d_out * (self.d_in - self.n_fix) + self.bias.len()
    }

    /// Forward `x (batch x d_in) -> batch x d_out` on a tape. Gradients flow
    /// only into unmasked `W` positions and the bias.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = tape.leaf(&[self.d_out, self.d_in], self.weight.clone(), true)?;
        let b = tape.leaf(&[self.d_out], self.bias.clone(), true)?;
        self.forward_bound(tape, x, w, b).map(|(y, _)| y)
    }

    /// Forward with caller-provided parameter leaves (used by the trainer).
    /// Returns `(output, effective_weight_node)`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let w_eff = match (&self.mask, &self.fixed) {
            (Some(m), Some(f)) => {
                let mc = tape.constant(&[self.d_out, self.d_in], m.iter().map(|&v| v as f64).collect())?;
                let fc = tape.constant(&[self.d_out, self.d_in], f.clone())?;
                let wm = tape.mul(w, mc)?;
                tape.add(wm, fc)?
            }
            _ => w,
        };
        let wt = tape.transpose(w_eff)?;
        let xw = tape.matmul(x, wt)?;
        let y = tape.add_row(xw, b)?;
        Ok((y, w_eff))
    }
}

/// FiGLU nonlinearity: `sigmoid(F x) (*) x` with a fixed square matrix `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FigluLayer {
    pub dim: usize,
    /// `dim x dim`, row-major, untrained.
    pub fixed: Vec<f64>,
    /// Std-dev used when `fixed` was sampled.
    pub scale: f64,
}

impl FigluLayer {
    pub fn sample(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, scale).unwrap();
        loop {
            let fixed: Vec<f64> = (0..dim * dim).map(|_| normal.sample(rng)).collect();
            let mut sorted = fixed.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let distinct = sorted.windows(2).all(|w| w[0] != w[1]);
            if distinct && fixed.iter().all(|&v| v != 0.0) {
                return Self { dim, fixed, scale };
            }
        }
    }

    /// `x` is `batch x dim`; `F` receives no gradient.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let f = tape.constant(&[self.dim, self.dim], self.fixed.clone())?;
        let ft = tape.transpose(f)?;
        let fx = tape.matmul(x, ft)?;
        let gate = tape.sigmoid(fx);
        Ok(tape.mul(gate, x)?)
    }

    /// Plain (tape-free) evaluation, used by the symmetry falsifiers.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        assert_eq!(x.len(), d);
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.fixed[i * d + j] * x[j];
            }
            out[i] = x[i] / (1.0 + (-acc).exp());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// A built MLP: linear layers plus per-hidden-activation LayerNorm and
/// FiGLU payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<MaskedLinear>,
    /// One per hidden activation when `config.layernorm`.
    pub layer_norms: Vec<LayerNormParams>,
    /// One per hidden activation when the nonlinearity is FiGLU.
    pub figlu: Vec<FigluLayer>,
}

/// Composes layers from a validated config. All asymmetry payloads derive
/// solely from `asym_seed`; all trainable initializations derive solely from
/// `init_seed` (Kaiming-uniform fan-in).
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut asym_rng = ChaCha8Rng::seed_from_u64(config.asym_seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let num_layers = config.num_layers();
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let (d1, d2) = (config.widths[l], config.widths[l + 1]);
        let (mask, fixed, n_fix, kappa) = if config.asym_mode == AsymMode::WAsym && config.n_fix[l] > 0 {
            let n_fix = config.n_fix[l];
            let kappa = config.kappa[l];
            let mask = generate_mask(d2, d1, n_fix, &mut asym_rng)?;
            let fixed = sample_fixed(&mask, kappa, &mut asym_rng);
            (Some(mask), Some(fixed), n_fix, kappa)
        } else {
            (None, None, 0, 0.0)
        };
        let bound = 1.0 / (d1 as f64).sqrt();
        let mut weight: Vec<f64> = (0..d2 * d1)
            .map(|_| init_rng.random_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..d2).map(|_| init_rng.random_range(-bound..bound)).collect();
        if let Some(m) = &mask {
            for (w, &m) in weight.iter_mut().zip(m) {
                if m == 0 {
                    *w = 0.0;
                }
            }
        }
        layers.push(MaskedLinear {
            d_out: d2,
            d_in: d1,
            weight,
            bias,
            mask,
            fixed,
            n_fix,
            kappa,
        });
    }
    let mut figlu = Vec::new();
    if config.nonlinearity == Nonlinearity::Figlu {
        for l in 1..config.widths.len() - 1 {
            let d = config.widths[l];
            let scale = config.figlu_scale.unwrap_or(1.0 / (d as f64).sqrt());
            figlu.push(FigluLayer::sample(d, scale, &mut asym_rng));
        }
    }
    let mut layer_norms = Vec::new();
    if config.layernorm {
        for l in 1..config.widths.len() - 1 {
            let d = config.widths[l];
            layer_norms.push(LayerNormParams {
                gain: vec![1.0; d],
                bias: vec![0.0; d],
            });
        }
    }
    Ok(Model {
        config: config.clone(),
        layers,
        layer_norms,
        figlu,
    })
}

/// Parameter leaves bound onto a tape, in canonical order.
pub struct Binding {
    /// Flat list in the same order as [`Model::param_slices`].
    pub param_ids: Vec<TensorId>,
}

impl Model {
    pub fn num_hidden(&self) -> usize {
        self.config.widths.len() - 2
    }

    /// Trainable scalar count: masked weight positions excluded.
    pub fn trainable_count(&self) -> usize {
        let mut n: usize = self.layers.iter().map(|l| l.trainable_count()).sum();
        for ln in &self.layer_norms {
            n += ln.gain.len() + ln.bias.len();
        }
        n
    }

    /// Canonical parameter order: per layer `[weight, bias]`, then per hidden
    /// activation `[ln_gain, ln_bias]` when LayerNorm is enabled.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for ln in &self.layer_norms {
            out.push(&ln.gain);
            out.push(&ln.bias);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for ln in &mut self.layer_norms {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out
    }

    /// Per-parameter update mask aligned with [`Model::param_slices`]:
    /// `None` for fully-trainable slots, `Some(mask)` for masked weights.
    pub fn param_masks(&self) -> Vec<Option<&[u8]>> {
        let mut out: Vec<Option<&[u8]>> = Vec::new();
        for l in &self.layers {
            out.push(l.mask.as_deref());
            out.push(None);
        }
        for _ in &self.layer_norms {
            out.push(None);
            out.push(None);
        }
        out
    }

    /// Flattened copy of all stored parameters (masked positions included as
    /// zeros, keeping shapes model-independent).
    pub fn flatten_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_from_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for slot in self.param_slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    /// Binds every parameter as a `requires_grad` leaf, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(tape.leaf(&[l.d_out, l.d_in], l.weight.clone(), true)?);
            ids.push(tape.leaf(&[l.d_out], l.bias.clone(), true)?);
        }
        for ln in &self.layer_norms {
            ids.push(tape.leaf(&[ln.gain.len()], ln.gain.clone(), true)?);
            ids.push(tape.leaf(&[ln.bias.len()], ln.bias.clone(), true)?);
        }
        Ok(Binding { param_ids: ids })
    }

    /// Forward pass `x (batch x d_in) -> logits (batch x d_out)` using bound
    /// parameter leaves.
    pub fn forward_bound(&self, tape: &mut Tape, binding: &Binding, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        let ln_base = 2 * self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = binding.param_ids[2 * l];
            let b = binding.param_ids[2 * l + 1];
            let (y, _) = layer.forward_bound(tape, h, w, b)?;
            h = y;
            if l + 1 < self.layers.len() {
                if self.config.layernorm {
                    let g = binding.param_ids[ln_base + 2 * l];
                    let bb = binding.param_ids[ln_base + 2 * l + 1];
                    h = tape.layernorm(h, g, bb, LAYERNORM_EPS)?;
                }
                h = match self.config.nonlinearity {
                    Nonlinearity::Relu => tape.relu(h),
                    Nonlinearity::Figlu => self.figlu[l].forward(tape, h)?,
                };
            }
        }
        Ok(h)
    }

    /// Convenience forward on raw data: returns logits `batch x classes`.
    pub fn logits(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let d_in = self.layers[0].d_in;
        assert_eq!(inputs.len(), batch * d_in);
        let mut tape = Tape::new();
        let x = tape.constant(&[batch, d_in], inputs.to_vec())?;
        let binding = self.bind(&mut tape)?;
        let out = self.forward_bound(&mut tape, &binding, x)?;
        Ok(tape.values(out).to_vec())
    }

    /// SHA-256 over every asymmetry payload: masks, fixed matrices, and FiGLU
    /// matrices, in layer order. Standard models hash the empty payload.
    pub fn asym_hash(&self) -> [u8; 32] {
        // section order mirrors the checkpoint payload: masks, fixed, FiGLU
        let mut hasher = Sha256::new();
        for l in &self.layers {
            if let Some(m) = &l.mask {
                hasher.update(m);
            }
        }
        for l in &self.layers {
            if let Some(f) = &l.fixed {
                for v in f {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        for fg in &self.figlu {
            for v in &fg.fixed {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mask_exhausts_single_zero_patterns() {
        let m = generate_mask(3, 3, 1, &mut rng(0)).unwrap();
        let mut rows: Vec<Vec<u8>> = (0..3).map(|r| m[r * 3..(r + 1) * 3].to_vec()).collect();
        rows.sort();
        assert_eq!(rows, vec![vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]]);
    }

    #[test]
    fn mask_exhausts_two_zero_patterns() {
        let m = generate_mask(6, 4, 2, &mut rng(1)).unwrap();
        let mut rows: Vec<Vec<u8>> = (0..6).map(|r| m[r * 4..(r + 1) * 4].to_vec()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert_eq!(row.iter().filter(|&&v| v == 0).count(), 2);
        }
    }

    #[test]
    fn mask_infeasible_by_pigeonhole() {
        assert!(matches!(
            generate_mask(4, 3, 1, &mut rng(2)),
            Err(NnError::MaskInfeasible { .. })
        ));
    }

    #[test]
    fn mask_deterministic_given_seed() {
        let a = generate_mask(8, 16, 2, &mut rng(7)).unwrap();
        let b = generate_mask(8, 16, 2, &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_zero_kappa_is_all_zero() {
        let m = generate_mask(3, 3, 1, &mut rng(0)).unwrap();
        let f = sample_fixed(&m, 0.0, &mut rng(1));
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_all_ones_mask_is_zero() {
        let f = sample_fixed(&[1, 1, 1, 1], 2.0, &mut rng(1));
        assert_eq!(f, vec![0.0; 4]);
    }

    #[test]
    fn fixed_sample_stddev_near_kappa() {
        let m = generate_mask(64, 512, 64, &mut rng(3)).unwrap();
        let f = sample_fixed(&m, 1.0, &mut rng(4));
        let vals: Vec<f64> = f
            .iter()
            .zip(&m)
            .filter(|(_, &m)| m == 0)
            .map(|(&v, _)| v)
            .collect();
        assert_eq!(vals.len(), 64 * 64);
        let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        let std = var.sqrt();
        assert!((0.9..1.1).contains(&std), "std = {std}");
    }

    #[test]
    fn masked_forward_matches_dense_composite() {
        // M = [[1,0],[0,1]], W diag(2,3), F = [[0,5],[7,0]], x = (1,1) -> (7,10)
        let layer = MaskedLinear {
            d_out: 2,
            d_in: 2,
            weight: vec![2.0, 0.0, 0.0, 3.0],
            bias: vec![0.0, 0.0],
            mask: Some(vec![1, 0, 0, 1]),
            fixed: Some(vec![0.0, 5.0, 7.0, 0.0]),
            n_fix: 1,
            kappa: 1.0,
        };
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.values(y), &[7.0, 10.0]);
    }

    #[test]
    fn degenerate_all_ones_mask_is_plain_linear() {
        let mk = |mask: Option<Vec<u8>>| {
            let fixed = mask.as_ref().map(|m| vec![0.0; m.len()]);
            MaskedLinear {
                d_out: 2,
                d_in: 2,
                weight: vec![1.0, 2.0, 3.0, 4.0],
                bias: vec![0.5, -0.5],
                mask,
                fixed,
                n_fix: 0,
                kappa: 0.0,
            }
        };
        let plain = mk(None);
        let masked = mk(Some(vec![1; 4]));
        let mut t1 = Tape::new();
        let x1 = t1.constant(&[1, 2], vec![0.3, -0.7]).unwrap();
        let y1 = plain.forward(&mut t1, x1).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(&[1, 2], vec![0.3, -0.7]).unwrap();
        let y2 = masked.forward(&mut t2, x2).unwrap();
        assert_eq!(t1.values(y1), t2.values(y2));
    }

    #[test]
    fn masked_positions_receive_no_gradient() {
        let layer = MaskedLinear {
            d_out: 2,
            d_in: 3,
            weight: vec![0.1, 0.0, 0.3, 0.0, 0.5, 0.6],
            bias: vec![0.0, 0.0],
            mask: Some(vec![1, 0, 1, 0, 1, 1]),
            fixed: Some(vec![0.0, 9.0, 0.0, 8.0, 0.0, 0.0]),
            n_fix: 1,
            kappa: 1.0,
        };
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = tape.leaf(&[2, 3], layer.weight.clone(), true).unwrap();
        let b = tape.leaf(&[2], layer.bias.clone(), true).unwrap();
        let (y, _) = layer.forward_bound(&mut tape, x, w, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(w).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[0] != 0.0 && g[2] != 0.0);
    }

    #[test]
    fn figlu_zero_input_gives_zero() {
        let mut r = rng(5);
        let fg = FigluLayer::sample(4, 0.5, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let y = fg.forward(&mut tape, x).unwrap();
        assert_eq!(tape.values(y), &[0.0; 4]);
    }

    #[test]
    fn figlu_zero_matrix_halves_input() {
        let fg = FigluLayer {
            dim: 3,
            fixed: vec![0.0; 9],
            scale: 0.0,
        };
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![2.0, -4.0, 6.0]).unwrap();
        let y = fg.forward(&mut tape, x).unwrap();
        assert_eq!(tape.values(y), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn figlu_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let fg = FigluLayer::sample(5, 0.7, &mut r);
        let xv: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.8).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 5], xv.clone(), true).unwrap();
        let y = fg.forward(&mut tape, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let got = tape.grad(x).unwrap().to_vec();

        let h = 1e-5;
        let mut fd = Vec::new();
        let mut xp = xv.clone();
        for i in 0..5 {
            xp[i] = xv[i] + h;
            let fp: f64 = fg.eval(&xp).iter().sum();
            xp[i] = xv[i] - h;
            let fm: f64 = fg.eval(&xp).iter().sum();
            xp[i] = xv[i];
            fd.push((fp - fm) / (2.0 * h));
        }
        for (g, f) in got.iter().zip(&fd) {
            assert!((g - f).abs() / f.abs().max(1.0) < 1e-5, "{g} vs {f}");
        }
    }

    #[test]
    fn seed_separation_contract() {
        let base = ModelConfig::w_asym(vec![6, 8, 4], false, vec![2, 2], vec![1.0, 1.0], 42, 1);
        let mut other = base.clone();
        other.init_seed = 2;
        let a = build_model(&base).unwrap();
        let b = build_model(&other).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.mask, lb.mask);
            assert_eq!(la.fixed, lb.fixed);
            assert_ne!(la.weight, lb.weight);
        }
        assert_eq!(a.asym_hash(), b.asym_hash());
    }

    #[test]
    fn standard_mode_has_no_payloads() {
        let m = build_model(&ModelConfig::standard(vec![4, 5, 3], true, 0, 0)).unwrap();
        assert!(m.layers.iter().all(|l| l.mask.is_none() && l.fixed.is_none()));
        assert!(m.figlu.is_empty());
    }

    #[test]
    fn paper_scale_w_asym_config_builds() {
        let cfg = ModelConfig::w_asym(
            vec![784, 512, 512, 512, 10],
            true,
            vec![64, 64, 64, 256],
            vec![1.0, 1.0, 0.5, 0.25],
            7,
            8,
        );
        let m = build_model(&cfg).unwrap();
        // trainable weights: sum d2 * (d1 - n_fix)
        let expect_w = 512 * (784 - 64) + 512 * (512 - 64) + 512 * (512 - 64) + 10 * (512 - 256);
        let expect = expect_w + 512 * 3 + 10 + 2 * 512 * 3;
        assert_eq!(m.trainable_count(), expect);
        for l in &m.layers {
            let mask = l.mask.as_ref().unwrap();
            let mut rows: Vec<&[u8]> = (0..l.d_out).map(|r| &mask[r * l.d_in..(r + 1) * l.d_in]).collect();
            rows.sort();
            rows.dedup();
            assert_eq!(rows.len(), l.d_out);
        }
    }

    #[test]
    fn same_config_builds_functionally_identical_models() {
        let cfg = ModelConfig::sigma_asym(vec![5, 6, 6, 3], true, 11, 12);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        let mut r = rng(13);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let ya = a.logits(&x, 1).unwrap();
            let yb = b.logits(&x, 1).unwrap();
            assert_eq!(ya, yb);
        }
    }

    #[test]
    fn zero_n_fix_rejected_for_multi_row() {
        assert!(matches!(
            generate_mask(2, 4, 0, &mut rng(0)),
            Err(NnError::ZeroFixAmbiguous)
        ));
    }
}
