//! Training losses: translation MSE, the token-reweighted variant, the
//! adversarial pair, reconstruction, and their weighted combination.
//!
//! Every loss writes onto a caller-supplied tape and returns the scalar's
//! value id, so the trainer composes them into one differentiable objective.
//! The discriminator loss detaches fake sequences before scoring them; the
//! generator loss keeps them attached, which is the only difference between
//! the two adversarial paths.

use crate::error::{Error, Result};
use crate::model::{forward_decoder, forward_discriminator, Discriminator, GlueNetDecoder};
use crate::tensor::{Array, Element, Shape, Tape, ValueId};

/// Logits are clamped to this magnitude before the log-sigmoid so saturated
/// discriminators cannot produce infinities.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Combination coefficients for the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_adv: f64,
    pub lambda_rec: f64,
}

impl LossWeights {
    /// Default weighting: MSE plus reconstruction, adversarial off.
    pub const DEFAULT: LossWeights =
        LossWeights { lambda_mse: 1.0, lambda_adv: 0.0, lambda_rec: 1.0 };

    /// Weighting with the adversarial term enabled.
    pub const ADVERSARIAL: LossWeights =
        LossWeights { lambda_mse: 1.0, lambda_adv: 0.05, lambda_rec: 1.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_mse, self.lambda_adv, self.lambda_rec];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Per-token loss weights; produced by [`token_weights`] where the last
/// entry is zero by construction (self-distance).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWeightVector {
    values: Vec<f64>,
}

impl TokenWeightVector {
    /// Wrap raw weights. Entries must be finite and nonnegative; callers may
    /// pass any pattern, including ones violating the last-entry-zero rule
    /// that [`token_weights`] guarantees for its own output.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("token weight vector must be nonempty".into()));
        }
        if values.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "token weights must be finite and nonnegative".into(),
            ));
        }
        Ok(TokenWeightVector { values })
    }

    /// Uniform all-ones weights of length `len`.
    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean-normalize over all entries so they average to exactly one;
    /// all-zero weights are degenerate.
    pub fn normalized(&self) -> Result<TokenWeightVector> {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return Err(Error::DegenerateWeights(
                "all token weights are zero, cannot mean-normalize".into(),
            ));
        }
        let scale = self.values.len() as f64 / total;
        Ok(TokenWeightVector { values: self.values.iter().map(|w| w * scale).collect() })
    }
}

/// Scalar loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub mse: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub rec: f64,
    pub total: f64,
}

// ---- mse ----------------------------------------------------------------------

/// Mean squared error over all `L x C` elements, computed as the mean over
/// tokens of per-token means. The token-major order makes the reweighted
/// variant with unit weights bit-identical to this one.
pub fn mse_loss<E: Element>(
    tape: &mut Tape<E>,
    pred: ValueId,
    target: ValueId,
) -> Result<ValueId> {
    check_same_shape(tape, "mse_loss", pred, target)?;
    let rows = per_token_mse(tape, pred, target)?;
    mean_of_rows(tape, rows)
}

/// MSE with per-token weights, mean-normalized to one before use.
pub fn reweighted_mse_loss<E: Element>(
    tape: &mut Tape<E>,
    pred: ValueId,
    target: ValueId,
    w: &TokenWeightVector,
) -> Result<ValueId> {
    check_same_shape(tape, "reweighted_mse_loss", pred, target)?;
    let (l, _) = tape.value(pred).shape().rank2()?;
    if w.len() != l {
        return Err(Error::ShapeMismatch {
            op: "reweighted_mse_loss",
            detail: format!("{} weights for {l} tokens", w.len()),
        });
    }
    let normalized = w.normalized()?;
    let weights: Vec<E> = normalized.values().iter().map(|&v| E::from_f64(v)).collect();
    let w_col = tape.constant(Array::from_vec(Shape::matrix(l, 1)?, weights)?);
    let rows = per_token_mse(tape, pred, target)?;
    let weighted = tape.mul(rows, w_col)?;
    mean_of_rows(tape, weighted)
}

fn check_same_shape<E: Element>(
    tape: &Tape<E>,
    op: &'static str,
    pred: ValueId,
    target: ValueId,
) -> Result<()> {
    let (sp, st) = (tape.value(pred).shape(), tape.value(target).shape());
    if sp != st {
        return Err(Error::ShapeMismatch { op, detail: format!("pred {sp} vs target {st}") });
    }
    Ok(())
}

/// Column of per-token mean squared errors, shape `[L x 1]`.
fn per_token_mse<E: Element>(
    tape: &mut Tape<E>,
    pred: ValueId,
    target: ValueId,
) -> Result<ValueId> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_axis(sq, 1)
}

/// Mean of an `[L x 1]` column as a `[1]` scalar.
fn mean_of_rows<E: Element>(tape: &mut Tape<E>, rows: ValueId) -> Result<ValueId> {
    let (l, _) = tape.value(rows).shape().rank2()?;
    let total = tape.sum_all(rows)?;
    tape.scale(total, 1.0 / l as f64)
}

// ---- token weights --------------------------------------------------------------

/// Distance-to-last-token weights: `w[j]` is the batch mean of the Euclidean
/// distance between token `j` and the final token. The last entry is exactly
/// zero.
pub fn token_weights<E: Element>(target_batch: &[Array<E>]) -> Result<TokenWeightVector> {
    if target_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (l, c) = target_batch[0].shape().rank2()?;
    let mut sums = vec![0.0f64; l];
    for seq in target_batch {
        let (sl, sc) = seq.shape().rank2()?;
        if (sl, sc) != (l, c) {
            return Err(Error::ShapeMismatch {
                op: "token_weights",
                detail: format!("sequence {} in a {l}x{c} batch", seq.shape()),
            });
        }
        for (j, slot) in sums.iter_mut().enumerate().take(l - 1) {
            let mut sq = 0.0;
            for k in 0..c {
                let d = seq.at2(j, k).to_f64() - seq.at2(l - 1, k).to_f64();
                sq += d * d;
            }
            *slot += sq.sqrt();
        }
    }
    let n = target_batch.len() as f64;
    let values: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    TokenWeightVector::new(values)
}

// ---- adversarial -----------------------------------------------------------------

/// Mean of `log sigmoid(sign * clamp(logit))` over a batch of `[1 x 1]`
/// logits, as a `[1]` scalar.
fn mean_log_sigmoid<E: Element>(
    tape: &mut Tape<E>,
    logits: &[ValueId],
    sign: f64,
) -> Result<ValueId> {
    let mut acc: Option<ValueId> = None;
    for &logit in logits {
        let mut v = tape.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        if sign < 0.0 {
            v = tape.scale(v, -1.0)?;
        }
        let ls = tape.log_sigmoid(v)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, ls)?,
            None => ls,
        });
    }
    let total = tape.sum_all(acc.expect("nonempty batch"))?;
    tape.scale(total, 1.0 / logits.len() as f64)
}

/// Discriminator and generator losses from already-computed logits. `real`
/// and `fake_detached` drive the discriminator loss; `fake_attached` drives
/// the non-saturating generator loss.
pub fn adversarial_losses_from_logits<E: Element>(
    tape: &mut Tape<E>,
    real: &[ValueId],
    fake_detached: &[ValueId],
    fake_attached: &[ValueId],
) -> Result<(ValueId, ValueId)> {
    if real.is_empty() || fake_detached.is_empty() || fake_attached.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let real_term = mean_log_sigmoid(tape, real, 1.0)?;
    let fake_term = mean_log_sigmoid(tape, fake_detached, -1.0)?;
    let inner = tape.add(real_term, fake_term)?;
    let loss_d = tape.scale(inner, -1.0)?;
    let gen_term = mean_log_sigmoid(tape, fake_attached, 1.0)?;
    let loss_g = tape.scale(gen_term, -1.0)?;
    Ok((loss_d, loss_g))
}

/// Score both batches with the discriminator and build the loss pair:
/// `loss_d = −E[log σ(D(real))] − E[log σ(−D(fake))]` with fakes detached,
/// and the non-saturating `loss_g = −E[log σ(D(fake))]` with fakes attached.
pub fn adversarial_losses<E: Element>(
    tape: &mut Tape<E>,
    disc: &Discriminator<E>,
    real: &[ValueId],
    fake: &[ValueId],
) -> Result<(ValueId, ValueId)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut real_logits = Vec::with_capacity(real.len());
    for &seq in real {
        real_logits.push(forward_discriminator(tape, disc, seq)?);
    }
    let mut fake_detached = Vec::with_capacity(fake.len());
    let mut fake_attached = Vec::with_capacity(fake.len());
    for &seq in fake {
        let cut = tape.detach(seq);
        fake_detached.push(forward_discriminator(tape, disc, cut)?);
        fake_attached.push(forward_discriminator(tape, disc, seq)?);
    }
    adversarial_losses_from_logits(tape, &real_logits, &fake_detached, &fake_attached)
}

// ---- reconstruction ---------------------------------------------------------------

/// Round-trip loss: decode the translated sequence and compare it to the
/// original source embedding under MSE.
pub fn reconstruction_loss<E: Element>(
    tape: &mut Tape<E>,
    dec: &GlueNetDecoder<E>,
    encoded: ValueId,
    original_source: ValueId,
) -> Result<ValueId> {
    let decoded = forward_decoder(tape, dec, encoded)?;
    mse_loss(tape, decoded, original_source)
}

// ---- combination ------------------------------------------------------------------

/// Scalar combination `λ_mse·mse + λ_adv·adv_g + λ_rec·rec` used for the
/// reported total.
pub fn total_objective(weights: &LossWeights, parts: &LossReport) -> f64 {
    weights.lambda_mse * parts.mse
        + weights.lambda_adv * parts.adv_g
        + weights.lambda_rec * parts.rec
}
