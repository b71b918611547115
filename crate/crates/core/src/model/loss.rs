//! Next-token cross-entropy with z-loss, and batched gradients.

use super::forward::Dropout;
use super::params::ModelParams;
use super::ModelError;
use crate::unirep::MultimodalSequence;
use crate::vocab::TokenId;
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One training sequence: inputs, the token to predict at each input
/// position, and which positions carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl Example {
    /// Shifts a sequence by one: position `t` predicts `tokens[t + 1]` and
    /// carries loss iff `loss_mask[t + 1]`.
    pub fn from_sequence(seq: &MultimodalSequence) -> Self {
        let n = seq.len().saturating_sub(1);
        Self {
            tokens: seq.tokens[..n].to_vec(),
            targets: seq.tokens[1..=n].to_vec(),
            mask: seq.loss_mask[1..=n].to_vec(),
        }
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean cross-entropy over unmasked positions, nats.
    pub ce: f64,
    /// Mean `(log Z)²` over unmasked positions.
    pub zloss: f64,
    pub z_weight: f64,
    /// `ce + z_weight · zloss`
    pub total: f64,
    /// Mean `|log Z|` over unmasked positions.
    pub mean_abs_log_z: f64,
    /// Largest `|logit|` seen at an unmasked position.
    pub max_abs_logit: f64,
    pub positions: usize,
}

struct Sums {
    ce: f64,
    z2: f64,
    abs_z: f64,
    max_abs: f64,
    count: usize,
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn check_lengths(logits: &Array2<f64>, targets: &[TokenId], mask: &[bool]) -> Result<(), ModelError> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(ModelError::LengthMismatch);
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.ncols()) {
        return Err(ModelError::InvalidToken { id: t, pos: 0, vocab: logits.ncols() });
    }
    Ok(())
}

/// Sums over unmasked rows; when `dlogits` is given, writes
/// `∂(total / norm)/∂logits` into it.
fn accumulate(
    logits: &Array2<f64>,
    targets: &[TokenId],
    mask: &[bool],
    z_weight: f64,
    mut dlogits: Option<(&mut Array2<f64>, f64)>,
) -> Sums {
    let mut s = Sums { ce: 0.0, z2: 0.0, abs_z: 0.0, max_abs: 0.0, count: 0 };
    for (t, row) in logits.rows().into_iter().enumerate() {
        if !mask[t] {
            continue;
        }
        let lz = log_sum_exp(row);
        let target = targets[t] as usize;
        s.ce += lz - row[target];
        s.z2 += lz * lz;
        s.abs_z += lz.abs();
        s.max_abs = row.fold(s.max_abs, |m, &v| m.max(v.abs()));
        s.count += 1;
        if let Some((d, norm)) = dlogits.as_mut() {
            // d/dl [lz - l_y + w·lz²] = softmax·(1 + 2w·lz) - onehot(y)
            let coef = (1.0 + 2.0 * z_weight * lz) / *norm;
            let mut drow = d.row_mut(t);
            for (dv, &lv) in drow.iter_mut().zip(row.iter()) {
                *dv = (lv - lz).exp() * coef;
            }
            drow[target] -= 1.0 / *norm;
        }
    }
    s
}

fn breakdown(s: &Sums, z_weight: f64) -> LossBreakdown {
    let n = s.count as f64;
    let ce = s.ce / n;
    let zloss = s.z2 / n;
    LossBreakdown {
        ce,
        zloss,
        z_weight,
        total: ce + z_weight * zloss,
        mean_abs_log_z: s.abs_z / n,
        max_abs_logit: s.max_abs,
        positions: s.count,
    }
}

/// Masked mean cross-entropy plus `z_weight · (log Z)²`.
pub fn loss(logits: &Array2<f64>, targets: &[TokenId], mask: &[bool], z_weight: f64) -> Result<LossBreakdown, ModelError> {
    check_lengths(logits, targets, mask)?;
    let sums = accumulate(logits, targets, mask, z_weight, None);
    if sums.count == 0 {
        return Err(ModelError::AllMasked);
    }
    let out = breakdown(&sums, z_weight);
    if !out.total.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok(out)
}

impl ModelParams {
    /// Loss and gradients over a batch. The loss is the mean over every
    /// unmasked position in the batch, so duplicating an example doubles its
    /// weight but leaves a batch of identical copies unchanged.
    ///
    /// With `dropout_seed`, dropout at the config rate is applied using a
    /// per-example stream derived from the seed; otherwise it is disabled.
    pub fn grad(
        &self,
        batch: &[Example],
        z_weight: f64,
        dropout_seed: Option<u64>,
    ) -> Result<(LossBreakdown, ModelParams), ModelError> {
        let norm: usize = batch.iter().map(Example::unmasked).sum();
        if norm == 0 {
            return Err(ModelError::AllMasked);
        }
        let mut grads = self.zeros_like();
        let mut total = Sums { ce: 0.0, z2: 0.0, abs_z: 0.0, max_abs: 0.0, count: 0 };
        for (i, ex) in batch.iter().enumerate() {
            if ex.unmasked() == 0 {
                continue;
            }
            let mut rng;
            let dropout = match dropout_seed {
                Some(seed) if self.config.dropout_p > 0.0 => {
                    rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    Some(Dropout { p: self.config.dropout_p, rng: &mut rng })
                }
                _ => None,
            };
            let (logits, trace) = self.forward_traced(&ex.tokens, dropout)?;
            check_lengths(&logits, &ex.targets, &ex.mask)?;
            let mut dlogits = Array2::zeros(logits.raw_dim());
            let s = accumulate(&logits, &ex.targets, &ex.mask, z_weight, Some((&mut dlogits, norm as f64)));
            total.ce += s.ce;
            total.z2 += s.z2;
            total.abs_z += s.abs_z;
            total.max_abs = total.max_abs.max(s.max_abs);
            total.count += s.count;
            self.backward(&ex.tokens, &trace, &dlogits, &mut grads);
        }
        let out = breakdown(&total, z_weight);
        if !out.total.is_finite() || !grads.all_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok((out, grads))
    }

    /// Batch loss without gradients (dropout off).
    pub fn eval_loss(&self, batch: &[Example], z_weight: f64) -> Result<LossBreakdown, ModelError> {
        let mut total = Sums { ce: 0.0, z2: 0.0, abs_z: 0.0, max_abs: 0.0, count: 0 };
        for ex in batch {
            let logits = self.forward(&ex.tokens, None)?;
            check_lengths(&logits, &ex.targets, &ex.mask)?;
            let s = accumulate(&logits, &ex.targets, &ex.mask, z_weight, None);
            total.ce += s.ce;
            total.z2 += s.z2;
            total.abs_z += s.abs_z;
            total.max_abs = total.max_abs.max(s.max_abs);
            total.count += s.count;
        }
        if total.count == 0 {
            return Err(ModelError::AllMasked);
        }
        Ok(breakdown(&total, z_weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Array2::zeros((3, 4));
        let l = loss(&logits, &[0, 1, 3], &[true, true, true], 0.0).unwrap();
        assert!((l.ce - 4f64.ln()).abs() < 1e-12);
        assert!((l.ce - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn zloss_of_zero_logits() {
        let logits = Array2::zeros((2, 8));
        let l = loss(&logits, &[0, 5], &[true, false], 1e-5).unwrap();
        let want = 8f64.ln().powi(2);
        assert!((l.zloss - want).abs() < 1e-12);
        assert!((l.zloss - 4.3241).abs() < 1e-4);
        assert!((l.total - l.ce - 4.3241e-5).abs() < 1e-9);
        assert_eq!(l.positions, 1);
    }

    #[test]
    fn errors() {
        let logits = Array2::zeros((2, 8));
        assert!(matches!(loss(&logits, &[0, 1], &[false, false], 0.0), Err(ModelError::AllMasked)));
        assert!(matches!(loss(&logits, &[0], &[true], 0.0), Err(ModelError::LengthMismatch)));
    }

    fn tiny() -> ModelParams {
        ModelParams::init(&ModelConfig::new(1, 2, 8, 12, 16).with_seed(3)).unwrap()
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = tiny();
        let a = Example { tokens: vec![1, 4, 5, 6], targets: vec![4, 5, 6, 7], mask: vec![false, true, true, true] };
        let b = Example { tokens: vec![2, 3], targets: vec![3, 9], mask: vec![true, true] };
        let (l1, g1) = m.grad(std::slice::from_ref(&a), 1e-3, None).unwrap();
        let (l2, g2) = m.grad(&[a.clone(), a.clone()], 1e-3, None).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-14);
        for (x, y) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-14);
            }
        }
        // [a, a, b] weights a twice: equals (2·3·g_a + 2·g_b) / 8 with per-example means.
        let (_, ga) = m.grad(std::slice::from_ref(&a), 0.0, None).unwrap();
        let (_, gb) = m.grad(std::slice::from_ref(&b), 0.0, None).unwrap();
        let (_, gab) = m.grad(&[a.clone(), a, b], 0.0, None).unwrap();
        let mut want = ga.clone();
        for t in want.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= 6.0 / 8.0);
        }
        want.add_scaled(&gb, 2.0 / 8.0);
        for (x, y) in want.tensors().iter().zip(gab.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let m = tiny();
        let a = Example { tokens: vec![1, 4, 5], targets: vec![4, 5, 6], mask: vec![true, false, true] };
        let mut b = a.clone();
        b.targets[1] = 11;
        let (_, ga) = m.grad(&[a], 1e-2, None).unwrap();
        let (_, gb) = m.grad(&[b], 1e-2, None).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn dropout_is_seeded() {
        let mut cfg = ModelConfig::new(1, 2, 8, 12, 16).with_seed(3);
        cfg.dropout_p = 0.3;
        let m = ModelParams::init(&cfg).unwrap();
        let a = Example { tokens: vec![1, 4, 5], targets: vec![4, 5, 6], mask: vec![true; 3] };
        let (l1, _) = m.grad(std::slice::from_ref(&a), 0.0, Some(5)).unwrap();
        let (l2, _) = m.grad(std::slice::from_ref(&a), 0.0, Some(5)).unwrap();
        let (l3, _) = m.grad(std::slice::from_ref(&a), 0.0, None).unwrap();
        assert_eq!(l1, l2);
        assert_ne!(l1.ce, l3.ce);
        assert!((l3.ce - m.eval_loss(&[a], 0.0).unwrap().ce).abs() < 1e-12);
    }
}
