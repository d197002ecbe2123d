//! Soft selection masks learned by noise-injected reconstruction.
//!
//! For every target patch `n` there is a weight vector `w_n ∈ [0,1]^N`
//! (with `w_nn = 0`). Each other patch `i` is blended with standard
//! Gaussian noise, keeping a fraction `α(w_ni)` of the signal, and a
//! per-target linear decoder reconstructs patch `n` from the blended
//! patches. Masks are trained on the L1 reconstruction loss plus a
//! cosine-similarity contrastive term that pushes rows apart; decoders
//! are refit in closed form (ridge) between encoder steps.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CollapseError, Result};
use crate::gaussian_field::{stack_fields, GaussianModel, PatchField};
use crate::seed;

/// Fraction of signal kept for mask weight `w`: `exp(-(1-w)² / 2σ²)`.
pub fn alpha(w: f64, sigma: f64) -> f64 {
    let gap = 1.0 - w;
    (-gap * gap / (2.0 * sigma * sigma)).exp()
}

fn alpha_derivative(w: f64, sigma: f64) -> f64 {
    alpha(w, sigma) * (1.0 - w) / (sigma * sigma)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-target soft weights, `N × N`, zero diagonal.
///
/// Masks produced by training also carry their unconstrained logits;
/// the weights are always `logistic(logit)` off the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskFile", into = "MaskFile")]
pub struct SelectionMaskSet {
    weights: DMatrix<f64>,
    logits: Option<DMatrix<f64>>,
    sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub n_patches: usize,
    pub sigma: f64,
    pub weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn square_from_rows(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(CollapseError::DimensionMismatch {
            expected: n,
            got: rows.len(),
        });
    }
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(CollapseError::DimensionMismatch {
            expected: n,
            got: r.len(),
        });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl TryFrom<MaskFile> for SelectionMaskSet {
    type Error = CollapseError;

    fn try_from(file: MaskFile) -> Result<Self> {
        let weights = square_from_rows(&file.weights, file.n_patches)?;
        match file.logits {
            Some(logits) => {
                let logits = square_from_rows(&logits, file.n_patches)?;
                let masks = SelectionMaskSet::from_logits(logits, file.sigma)?;
                if masks.weights != weights {
                    return Err(CollapseError::Malformed(
                        "mask weights disagree with logits".into(),
                    ));
                }
                Ok(masks)
            }
            None => SelectionMaskSet::from_weights(weights, file.sigma),
        }
    }
}

impl From<SelectionMaskSet> for MaskFile {
    fn from(m: SelectionMaskSet) -> Self {
        MaskFile {
            n_patches: m.n(),
            sigma: m.sigma,
            weights: rows_of(&m.weights),
            logits: m.logits.as_ref().map(rows_of),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CollapseError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(())
}

impl SelectionMaskSet {
    /// Every off-diagonal weight at 0.5 (all logits zero).
    pub fn uniform(n: usize, sigma: f64) -> Result<Self> {
        Self::from_logits(DMatrix::zeros(n, n), sigma)
    }

    pub fn from_logits(mut logits: DMatrix<f64>, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if !logits.is_square() || logits.nrows() == 0 {
            return Err(CollapseError::InvalidArgument(
                "logits must be a non-empty square matrix".into(),
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CollapseError::InvalidArgument("non-finite logit".into()));
        }
        let n = logits.nrows();
        for i in 0..n {
            logits[(i, i)] = 0.0;
        }
        let weights = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                logistic(logits[(i, j)])
            }
        });
        Ok(SelectionMaskSet {
            weights,
            logits: Some(logits),
            sigma,
        })
    }

    /// Fixed weights without trainable parameters.
    pub fn from_weights(weights: DMatrix<f64>, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if !weights.is_square() || weights.nrows() == 0 {
            return Err(CollapseError::InvalidArgument(
                "weights must be a non-empty square matrix".into(),
            ));
        }
        for i in 0..weights.nrows() {
            for j in 0..weights.ncols() {
                let w = weights[(i, j)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(CollapseError::InvalidArgument(format!(
                        "mask entry ({i}, {j}) = {w} outside [0, 1]"
                    )));
                }
                if i == j && w != 0.0 {
                    return Err(CollapseError::InvalidArgument(format!(
                        "mask diagonal entry {i} must be 0"
                    )));
                }
            }
        }
        Ok(SelectionMaskSet {
            weights,
            logits: None,
            sigma,
        })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn logits(&self) -> Option<&DMatrix<f64>> {
        self.logits.as_ref()
    }

    /// Mask used to reconstruct patch `target`.
    pub fn row(&self, target: usize) -> Vec<f64> {
        self.weights.row(target).iter().copied().collect()
    }

    fn trainable_logits(&self) -> Result<&DMatrix<f64>> {
        self.logits.as_ref().ok_or_else(|| {
            CollapseError::InvalidArgument("mask set has no trainable parameters".into())
        })
    }
}

/// Blends every non-target patch with fresh standard noise:
/// `α_i e_i + (1 − α_i) ε_i`. Returns the `N − 1` blended patches in
/// index order, skipping `target`.
pub fn noise_inject(
    field: &PatchField,
    target: usize,
    mask: &[f64],
    sigma: f64,
    noise_seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let n = field.n_patches();
    if mask.len() != n {
        return Err(CollapseError::DimensionMismatch {
            expected: n,
            got: mask.len(),
        });
    }
    if target >= n {
        return Err(CollapseError::InvalidArgument(format!(
            "target {target} out of range for {n} patches"
        )));
    }
    check_sigma(sigma)?;
    let mut rng = seed::rng(noise_seed);
    let d = field.patch_dim();
    Ok((0..n)
        .filter(|&i| i != target)
        .map(|i| {
            let a = alpha(mask[i], sigma);
            DVector::from_fn(d, |k, _| {
                let eps: f64 = rng.sample(StandardNormal);
                a * field.embeddings[(i, k)] + (1.0 - a) * eps
            })
        })
        .collect())
}

/// Affine map from the flattened blended patches to the target patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    pub target: usize,
    /// `d × (N−1)d`; column block `k` reads the `k`-th non-target patch.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub ridge_lambda: f64,
}

impl LinearDecoder {
    pub fn zeros(target: usize, n_patches: usize, patch_dim: usize) -> Self {
        LinearDecoder {
            target,
            weights: DMatrix::zeros(patch_dim, (n_patches - 1) * patch_dim),
            bias: DVector::zeros(patch_dim),
            ridge_lambda: 0.0,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.bias.len()
    }
}

pub fn reconstruct(decoder: &LinearDecoder, masked: &[DVector<f64>]) -> Result<DVector<f64>> {
    let d = decoder.patch_dim();
    let expected = decoder.weights.ncols();
    let flat: Vec<f64> = masked.iter().flat_map(|v| v.iter().copied()).collect();
    if flat.len() != expected || masked.iter().any(|v| v.len() != d) {
        return Err(CollapseError::DimensionMismatch {
            expected,
            got: flat.len(),
        });
    }
    Ok(&decoder.weights * DVector::from_vec(flat) + &decoder.bias)
}

/// `‖target − prediction‖₁`.
pub fn reconstruction_loss(target: &DVector<f64>, prediction: &DVector<f64>) -> f64 {
    assert_eq!(target.len(), prediction.len(), "length mismatch");
    target
        .iter()
        .zip(prediction.iter())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

fn cosine_matrix(weights: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = weights.nrows();
    let norms: Vec<f64> = (0..n).map(|i| weights.row(i).norm()).collect();
    if let Some(row) = norms.iter().position(|&v| v == 0.0) {
        return Err(CollapseError::DegenerateMask { row });
    }
    let sim = DMatrix::from_fn(n, n, |i, j| {
        weights.row(i).dot(&weights.row(j)) / (norms[i] * norms[j])
    });
    Ok((sim, norms))
}

/// Contrastive diversity loss over mask rows.
///
/// `(1/N) Σ_i −log( exp(sim(w_i,w_i)/τ) / Σ_j exp(sim(w_i,w_j)/τ) )` with
/// cosine similarity; `j` runs over all rows including `i`.
pub fn contrastive_loss(masks: &SelectionMaskSet, tau: f64) -> Result<f64> {
    contrastive_loss_and_grad(masks.weights(), tau).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every weight entry.
pub fn contrastive_loss_and_grad(weights: &DMatrix<f64>, tau: f64) -> Result<(f64, DMatrix<f64>)> {
    if !(tau > 0.0) {
        return Err(CollapseError::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let n = weights.nrows();
    let (sim, norms) = cosine_matrix(weights)?;
    let mut loss = 0.0;
    // g[(i, j)] = dL/dsim_ij taken from row i's term
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| sim[(i, j)] / tau).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - logits[i];
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            let delta = if i == j { 1.0 } else { 0.0 };
            g[(i, j)] = (p - delta) / (tau * n as f64);
        }
    }
    loss /= n as f64;

    let mut grad = DMatrix::zeros(n, n);
    for i in 0..n {
        let ui = weights.row(i) / norms[i];
        for j in 0..n {
            // sim_ii ≡ 1, its derivative vanishes
            if i == j {
                continue;
            }
            let coeff = g[(i, j)] + g[(j, i)];
            let uj = weights.row(j) / norms[j];
            let dsim = (&uj - &ui * sim[(i, j)]) / norms[i];
            let mut row = grad.row_mut(i);
            row += dsim * coeff;
        }
    }
    Ok((loss, grad))
}

/// Polarization metric `−(1/M) Σ_sets Σ_entries w log w` with `0 log 0 = 0`.
pub fn mask_entropy(sets: &[SelectionMaskSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    let total: f64 = sets.iter().map(|s| weight_entropy(s.weights())).sum();
    total / sets.len() as f64
}

fn weight_entropy(weights: &DMatrix<f64>) -> f64 {
    weights
        .iter()
        .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
        .sum()
}

/// `B × (N·d)` standard normal matrix drawn row-major from one stream.
pub fn noise_matrix(rows: usize, cols: usize, noise_seed: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(noise_seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Column indices of the non-target patches in a stacked batch.
fn context_columns(n: usize, d: usize, target: usize) -> Vec<usize> {
    (0..n)
        .filter(|&i| i != target)
        .flat_map(|i| (i * d)..(i * d + d))
        .collect()
}

/// Blended design matrix `B × (N−1)d` for one target.
fn blended_design(
    data: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    n: usize,
    d: usize,
    target: usize,
    mask: &[f64],
    sigma: f64,
) -> DMatrix<f64> {
    let cols = context_columns(n, d, target);
    let mut out = DMatrix::zeros(data.nrows(), cols.len());
    for (c, &col) in cols.iter().enumerate() {
        let a = alpha(mask[col / d], sigma);
        for b in 0..data.nrows() {
            out[(b, c)] = a * data[(b, col)] + (1.0 - a) * noise[(b, col)];
        }
    }
    out
}

fn target_block(data: &DMatrix<f64>, d: usize, target: usize) -> DMatrix<f64> {
    data.columns(target * d, d).clone_owned()
}

/// Closed-form ridge fit of the target from the blended batch. The
/// intercept is unpenalized; the penalty is on the mean squared error scale.
fn ridge_fit(
    design: &DMatrix<f64>,
    response: &DMatrix<f64>,
    ridge_lambda: f64,
    target: usize,
) -> Result<LinearDecoder> {
    let b = design.nrows() as f64;
    let x_mean = design.row_mean();
    let y_mean = response.row_mean();
    let mut xc = design.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let mut yc = response.clone();
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let p = design.ncols();
    let gram = xc.transpose() * &xc / b + DMatrix::identity(p, p) * ridge_lambda;
    let rhs = xc.transpose() * &yc / b;
    let chol = Cholesky::new(gram).ok_or_else(|| {
        CollapseError::Singular(format!(
            "decoder design for target {target} is rank deficient (ridge_lambda = {ridge_lambda})"
        ))
    })?;
    let coef = chol.solve(&rhs); // p × d
    let weights = coef.transpose();
    let bias = y_mean.transpose() - &weights * x_mean.transpose();
    Ok(LinearDecoder {
        target,
        weights,
        bias,
        ridge_lambda,
    })
}

fn check_batch(n: usize, d: usize, batch_len: usize, ridge_lambda: f64) -> Result<()> {
    let needed = (n - 1) * d + 1;
    if batch_len < needed {
        return Err(CollapseError::InvalidArgument(format!(
            "decoder fit needs at least {needed} fields, got {batch_len}"
        )));
    }
    if !(ridge_lambda >= 0.0) {
        return Err(CollapseError::InvalidArgument(format!(
            "ridge_lambda must be >= 0, got {ridge_lambda}"
        )));
    }
    Ok(())
}

/// Decoder phase: ridge regression of patch `target` on the noise-injected
/// batch.
pub fn fit_decoder(
    batch: &[PatchField],
    target: usize,
    masks: &SelectionMaskSet,
    noise_seed: u64,
    ridge_lambda: f64,
) -> Result<LinearDecoder> {
    let data = stack_fields(batch)?;
    let n = masks.n();
    let d = batch[0].patch_dim();
    if batch[0].n_patches() != n {
        return Err(CollapseError::DimensionMismatch {
            expected: n,
            got: batch[0].n_patches(),
        });
    }
    let noise = noise_matrix(data.nrows(), data.ncols(), noise_seed);
    fit_decoder_on(&data, &noise, n, d, target, masks, ridge_lambda)
}

fn fit_decoder_on(
    data: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    n: usize,
    d: usize,
    target: usize,
    masks: &SelectionMaskSet,
    ridge_lambda: f64,
) -> Result<LinearDecoder> {
    if target >= n {
        return Err(CollapseError::InvalidArgument(format!(
            "target {target} out of range for {n} patches"
        )));
    }
    check_batch(n, d, data.nrows(), ridge_lambda)?;
    let design = blended_design(data, noise, n, d, target, &masks.row(target), masks.sigma());
    let response = target_block(data, d, target);
    ridge_fit(&design, &response, ridge_lambda, target)
}

/// Reconstruction objective for one target with the decoder and the noise
/// held fixed, as a function of that target's mask logits.
#[derive(Clone, Debug)]
pub struct ReconstructionObjective<'a> {
    data: &'a DMatrix<f64>,
    noise: DMatrix<f64>,
    decoder: &'a LinearDecoder,
    n: usize,
    d: usize,
    sigma: f64,
}

/// Value, gradient and distance to the nearest L1 kink.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    /// Length `N`; the entry for the target itself is always 0.
    pub grad: Vec<f64>,
    pub min_abs_residual: f64,
}

impl<'a> ReconstructionObjective<'a> {
    pub fn new(
        data: &'a DMatrix<f64>,
        noise: DMatrix<f64>,
        decoder: &'a LinearDecoder,
        n: usize,
        sigma: f64,
    ) -> Result<Self> {
        let d = decoder.patch_dim();
        if data.ncols() != n * d || noise.shape() != data.shape() {
            return Err(CollapseError::DimensionMismatch {
                expected: n * d,
                got: data.ncols(),
            });
        }
        if decoder.weights.ncols() != (n - 1) * d {
            return Err(CollapseError::DimensionMismatch {
                expected: (n - 1) * d,
                got: decoder.weights.ncols(),
            });
        }
        Ok(ReconstructionObjective {
            data,
            noise,
            decoder,
            n,
            d,
            sigma,
        })
    }

    pub fn target(&self) -> usize {
        self.decoder.target
    }

    /// Mean over the batch of the L1 reconstruction error.
    pub fn evaluate(&self, logits: &[f64]) -> ObjectiveEval {
        let (n, d, target) = (self.n, self.d, self.decoder.target);
        let mask: Vec<f64> = (0..n)
            .map(|i| {
                if i == target {
                    0.0
                } else {
                    logistic(logits[i])
                }
            })
            .collect();
        let design = blended_design(self.data, &self.noise, n, d, target, &mask, self.sigma);
        let response = target_block(self.data, d, target);
        let batch = self.data.nrows() as f64;

        let mut pred = &design * self.decoder.weights.transpose();
        for mut row in pred.row_iter_mut() {
            row += self.decoder.bias.transpose();
        }
        let resid = response - pred;
        let loss = resid.iter().map(|r| r.abs()).sum::<f64>() / batch;
        let min_abs_residual = resid.iter().map(|r| r.abs()).fold(f64::INFINITY, f64::min);

        // dL/dpred = -sign(resid)/B, zero subgradient at ties
        let upstream = resid.map(|r| -r.signum() * (r != 0.0) as u8 as f64 / batch);
        let d_design = upstream * &self.decoder.weights; // B × (N-1)d

        let cols = context_columns(n, d, target);
        let mut grad = vec![0.0; n];
        for (c, &col) in cols.iter().enumerate() {
            let i = col / d;
            let mut d_alpha = 0.0;
            for b in 0..self.data.nrows() {
                d_alpha += d_design[(b, c)] * (self.data[(b, col)] - self.noise[(b, col)]);
            }
            let w = mask[i];
            grad[i] += d_alpha * alpha_derivative(w, self.sigma) * w * (1.0 - w);
        }
        ObjectiveEval {
            loss,
            grad,
            min_abs_residual,
        }
    }
}

/// Gradient of `L_r(target) + λ_c L_c` with respect to the target's logits.
#[derive(Clone, Debug)]
pub struct EncoderGradient {
    pub total_loss: f64,
    pub reconstruction_loss: f64,
    pub contrastive_loss: f64,
    pub grad: Vec<f64>,
    pub min_abs_residual: f64,
}

/// Contrastive gradient pulled back through the logistic squashing.
fn contrastive_logit_grad(masks: &SelectionMaskSet, tau: f64) -> Result<(f64, DMatrix<f64>)> {
    let (loss, gw) = contrastive_loss_and_grad(masks.weights(), tau)?;
    let w = masks.weights();
    let n = masks.n();
    let g = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            gw[(i, j)] * w[(i, j)] * (1.0 - w[(i, j)])
        }
    });
    Ok((loss, g))
}

/// Evaluates the encoder objective for `target` at the current masks.
pub fn encoder_gradient(
    batch: &[PatchField],
    target: usize,
    masks: &SelectionMaskSet,
    decoder: &LinearDecoder,
    lambda_c: f64,
    tau: f64,
    noise_seed: u64,
) -> Result<EncoderGradient> {
    let data = stack_fields(batch)?;
    let noise = noise_matrix(data.nrows(), data.ncols(), noise_seed);
    encoder_gradient_on(&data, noise, target, masks, decoder, lambda_c, tau)
}

fn encoder_gradient_on(
    data: &DMatrix<f64>,
    noise: DMatrix<f64>,
    target: usize,
    masks: &SelectionMaskSet,
    decoder: &LinearDecoder,
    lambda_c: f64,
    tau: f64,
) -> Result<EncoderGradient> {
    let logits = masks.trainable_logits()?;
    if decoder.target != target {
        return Err(CollapseError::InvalidArgument(format!(
            "decoder is for target {}, not {target}",
            decoder.target
        )));
    }
    let objective = ReconstructionObjective::new(data, noise, decoder, masks.n(), masks.sigma())?;
    let row: Vec<f64> = logits.row(target).iter().copied().collect();
    let eval = objective.evaluate(&row);
    let (lc, gc) = contrastive_logit_grad(masks, tau)?;
    let grad: Vec<f64> = (0..masks.n())
        .map(|j| eval.grad[j] + lambda_c * gc[(target, j)])
        .collect();
    if let Some(entry) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CollapseError::NonFiniteGradient { target, entry });
    }
    Ok(EncoderGradient {
        total_loss: eval.loss + lambda_c * lc,
        reconstruction_loss: eval.loss,
        contrastive_loss: lc,
        grad,
        min_abs_residual: eval.min_abs_residual,
    })
}

fn apply_step(
    masks: &SelectionMaskSet,
    target: usize,
    grad: &[f64],
    lr: f64,
) -> Result<SelectionMaskSet> {
    let mut logits = masks.trainable_logits()?.clone();
    for (j, g) in grad.iter().enumerate() {
        if j != target {
            logits[(target, j)] -= lr * g;
        }
    }
    SelectionMaskSet::from_logits(logits, masks.sigma())
}

/// Encoder phase for one target: a single gradient step on its logits,
/// with the decoder and the injected noise held fixed.
#[allow(clippy::too_many_arguments)]
pub fn encoder_step(
    batch: &[PatchField],
    target: usize,
    masks: &SelectionMaskSet,
    decoder: &LinearDecoder,
    lr: f64,
    lambda_c: f64,
    tau: f64,
    noise_seed: u64,
) -> Result<SelectionMaskSet> {
    let eval = encoder_gradient(batch, target, masks, decoder, lambda_c, tau, noise_seed)?;
    apply_step(masks, target, &eval.grad, lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub ridge_lambda: f64,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 256,
            lr: 1.0,
            sigma: 0.5,
            lambda_c: 0.01,
            tau: 1.0,
            ridge_lambda: 1e-3,
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_patches: usize, patch_dim: usize) -> Result<()> {
        let bad =
            |key: &str, why: String| Err(CollapseError::InvalidArgument(format!("{key}: {why}")));
        if n_patches < 2 {
            return bad("n_patches", "mask learning needs at least 2 patches".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        let needed = (n_patches - 1) * patch_dim + 1;
        if self.batch_size < needed {
            return bad("batch_size", format!("must be at least {needed}"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(
                "lr",
                format!("must be a finite value >= 0, got {}", self.lr),
            );
        }
        if !(self.sigma > 0.0) {
            return bad("sigma", format!("must be > 0, got {}", self.sigma));
        }
        if !(self.lambda_c >= 0.0) {
            return bad("lambda_c", format!("must be >= 0, got {}", self.lambda_c));
        }
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be > 0, got {}", self.tau));
        }
        if !(self.ridge_lambda >= 0.0) {
            return bad(
                "ridge_lambda",
                format!("must be >= 0, got {}", self.ridge_lambda),
            );
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch: usize,
    pub recon_loss: f64,
    pub contrastive_loss: f64,
    pub mask_entropy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub masks: SelectionMaskSet,
    pub decoders: Vec<LinearDecoder>,
    pub reports: Vec<TrainReport>,
    pub initial_mask_entropy: f64,
}

const DIVERGENCE_FACTOR: f64 = 1e3;

/// Alternating optimization over all targets.
///
/// Each epoch draws a fresh batch, refits every decoder in closed form on
/// one noise draw, computes every target's reconstruction gradient on a
/// second, independent noise draw, then adds the contrastive gradient
/// (computed once from the pre-step masks) and updates all rows together.
/// Targets are processed in parallel; results do not depend on the number
/// of workers.
pub fn train(model: &GaussianModel, config: &TrainConfig) -> Result<TrainOutcome> {
    let n = model.n_patches();
    let d = model.patch_dim();
    config.validate(n, d)?;
    let master = config.master_seed;
    let mut masks = SelectionMaskSet::uniform(n, config.sigma)?;
    let initial_mask_entropy = mask_entropy(std::slice::from_ref(&masks));
    let start = Instant::now();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut decoders = Vec::new();
    let mut initial_loss = None;

    for epoch in 0..config.epochs {
        let batch = model.sample_batch(
            config.batch_size,
            seed::derive_seed(master, &format!("train/epoch/{epoch}/batch")),
        );
        let data = stack_fields(&batch)?;
        let per_target: Vec<Result<(LinearDecoder, ObjectiveEval)>> = (0..n)
            .into_par_iter()
            .map(|target| {
                let dec_noise = noise_matrix(
                    data.nrows(),
                    data.ncols(),
                    seed::derive_seed(
                        master,
                        &format!("train/epoch/{epoch}/target/{target}/decoder"),
                    ),
                );
                let decoder =
                    fit_decoder_on(&data, &dec_noise, n, d, target, &masks, config.ridge_lambda)?;
                let enc_noise = noise_matrix(
                    data.nrows(),
                    data.ncols(),
                    seed::derive_seed(
                        master,
                        &format!("train/epoch/{epoch}/target/{target}/encoder"),
                    ),
                );
                let objective =
                    ReconstructionObjective::new(&data, enc_noise, &decoder, n, config.sigma)?;
                let logits = masks.trainable_logits()?;
                let row: Vec<f64> = logits.row(target).iter().copied().collect();
                let eval = objective.evaluate(&row);
                Ok((decoder, eval))
            })
            .collect();
        let per_target = per_target.into_iter().collect::<Result<Vec<_>>>()?;

        let (lc, gc) = contrastive_logit_grad(&masks, config.tau)?;
        let recon = per_target.iter().map(|(_, e)| e.loss).sum::<f64>() / n as f64;
        let limit = DIVERGENCE_FACTOR * *initial_loss.get_or_insert(recon);
        if !recon.is_finite() || recon > limit {
            return Err(CollapseError::Diverged {
                epoch,
                loss: recon,
                limit,
            });
        }

        let mut logits = masks.trainable_logits()?.clone();
        for (target, (_, eval)) in per_target.iter().enumerate() {
            for j in 0..n {
                if j == target {
                    continue;
                }
                let g = eval.grad[j] + config.lambda_c * gc[(target, j)];
                if !g.is_finite() {
                    return Err(CollapseError::NonFiniteGradient { target, entry: j });
                }
                logits[(target, j)] -= config.lr * g;
            }
        }
        masks = SelectionMaskSet::from_logits(logits, config.sigma)?;
        decoders = per_target.into_iter().map(|(dec, _)| dec).collect();

        reports.push(TrainReport {
            epoch,
            recon_loss: recon,
            contrastive_loss: lc,
            mask_entropy: mask_entropy(std::slice::from_ref(&masks)),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        masks,
        decoders,
        reports,
        initial_mask_entropy,
    })
}

/// Held-out reconstruction quality of a mask set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionEval {
    /// Mean over targets of the mean L1 error of the masked decoder.
    pub masked_loss: f64,
    /// Mean over targets of the L1 error of the best constant (the
    /// per-coordinate median of the fit batch).
    pub constant_loss: f64,
}

/// Refits each decoder with `masks` on one batch and scores it on a
/// second batch with fresh noise.
pub fn evaluate_reconstruction(
    model: &GaussianModel,
    masks: &SelectionMaskSet,
    batch_size: usize,
    ridge_lambda: f64,
    seed: u64,
) -> Result<ReconstructionEval> {
    let n = model.n_patches();
    let d = model.patch_dim();
    let fit = stack_fields(&model.sample_batch(batch_size, seed::derive_seed(seed, "fit")))?;
    let test = stack_fields(&model.sample_batch(batch_size, seed::derive_seed(seed, "test")))?;
    let mut masked = 0.0;
    let mut constant = 0.0;
    for target in 0..n {
        let fit_noise = noise_matrix(
            fit.nrows(),
            fit.ncols(),
            seed::derive_seed(seed, &format!("fit/{target}")),
        );
        let decoder = fit_decoder_on(&fit, &fit_noise, n, d, target, masks, ridge_lambda)?;
        let test_noise = noise_matrix(
            test.nrows(),
            test.ncols(),
            seed::derive_seed(seed, &format!("test/{target}")),
        );
        let design = blended_design(
            &test,
            &test_noise,
            n,
            d,
            target,
            &masks.row(target),
            masks.sigma(),
        );
        let mut pred = &design * decoder.weights.transpose();
        for mut row in pred.row_iter_mut() {
            row += decoder.bias.transpose();
        }
        let resp = target_block(&test, d, target);
        masked += (resp.clone() - pred).iter().map(|r| r.abs()).sum::<f64>() / test.nrows() as f64;

        for k in 0..d {
            let mut col: Vec<f64> = fit.column(target * d + k).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let median = if col.len() % 2 == 1 {
                col[col.len() / 2]
            } else {
                0.5 * (col[col.len() / 2 - 1] + col[col.len() / 2])
            };
            constant += resp
                .column(k)
                .iter()
                .map(|v| (v - median).abs())
                .sum::<f64>()
                / test.nrows() as f64;
        }
    }
    Ok(ReconstructionEval {
        masked_loss: masked / n as f64,
        constant_loss: constant / n as f64,
    })
}

/// Area under the ROC curve for off-diagonal mask entries scored against
/// the model's true precision-block support. Ties count one half.
pub fn support_auroc(masks: &SelectionMaskSet, model: &GaussianModel) -> Result<f64> {
    let n = masks.n();
    if n != model.n_patches() {
        return Err(CollapseError::DimensionMismatch {
            expected: model.n_patches(),
            got: n,
        });
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = masks.weights()[(i, j)];
            if model.coupled(i, j) {
                pos.push(w);
            } else {
                neg.push(w);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(CollapseError::InvalidArgument(
            "support AUROC needs both coupled and uncoupled pairs".into(),
        ));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}
