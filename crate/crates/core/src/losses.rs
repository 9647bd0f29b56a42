//! Least-squares adversarial losses, the multi-scale L1 loss and the total
//! generator objective.
//!
//! The plain functions evaluate values for reporting and tests; the `tape_*`
//! functions build the same expressions on a [`Tape`] for training.
//! Expectations are means over batch and score-map positions.

use msgdd_tensor::{Tape, Var};

use crate::config::L1Scales;
use crate::discriminator::ScoreMap;
use crate::raster::{ImageTensor, ScalePyramid};
use crate::{Error, Result};

/// Every loss term logged for one step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_dis_e: f64,
    pub l_dis_d: f64,
    pub l_dis: f64,
    pub l_g_dis: f64,
    pub l_g_l1: f64,
    pub l_g_total: f64,
}

impl LossBundle {
    pub fn is_valid(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite() && *v >= 0.0)
    }

    /// `(name, value)` pairs in logging order.
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("l_dis_e", self.l_dis_e),
            ("l_dis_d", self.l_dis_d),
            ("l_dis", self.l_dis),
            ("l_g_dis", self.l_g_dis),
            ("l_g_l1", self.l_g_l1),
            ("l_g_total", self.l_g_total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }
}

fn mean_sq_dist(maps: &[ScoreMap], target: f64) -> f64 {
    let count: usize = maps.iter().map(|m| m.tensor().len()).sum();
    let total: f64 = maps
        .iter()
        .flat_map(|m| m.tensor().data())
        .map(|s| (s - target) * (s - target))
        .sum();
    total / count as f64
}

fn check_batch(maps: &[ScoreMap], what: &str) -> Result<()> {
    let Some(first) = maps.first() else {
        return Err(Error::EmptyBatch);
    };
    if let Some(bad) = maps.iter().find(|m| m.tensor().shape() != first.tensor().shape()) {
        return Err(Error::Shape(format!(
            "{what} score maps differ in shape: {:?} vs {:?}",
            first.tensor().shape(),
            bad.tensor().shape()
        )));
    }
    Ok(())
}

fn lsgan_dis(real: &[ScoreMap], fake: &[ScoreMap]) -> Result<f64> {
    check_batch(real, "real")?;
    check_batch(fake, "fake")?;
    if real[0].tensor().shape() != fake[0].tensor().shape() {
        return Err(Error::Shape(format!(
            "real and fake score maps differ in shape: {:?} vs {:?}",
            real[0].tensor().shape(),
            fake[0].tensor().shape()
        )));
    }
    Ok(0.5 * mean_sq_dist(real, 1.0) + 0.5 * mean_sq_dist(fake, 0.0))
}

/// Encoder-side discriminator loss: real scores toward 1, fake toward 0.
pub fn loss_dis_e(real: &[ScoreMap], fake: &[ScoreMap]) -> Result<f64> {
    lsgan_dis(real, fake)
}

/// Decoder-side discriminator loss, same form as [`loss_dis_e`].
pub fn loss_dis_d(real: &[ScoreMap], fake: &[ScoreMap]) -> Result<f64> {
    lsgan_dis(real, fake)
}

pub fn loss_dis_total(l_dis_e: f64, l_dis_d: f64) -> f64 {
    0.5 * (l_dis_e + l_dis_d)
}

/// Generator adversarial loss against both discriminators.
pub fn loss_gen_adv(fake_e: &[ScoreMap], fake_d: &[ScoreMap]) -> Result<f64> {
    loss_gen_adv_over(&[fake_e, fake_d])
}

/// Generator adversarial loss averaged over any number of discriminators.
pub fn loss_gen_adv_over(fakes: &[&[ScoreMap]]) -> Result<f64> {
    if fakes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for maps in fakes {
        check_batch(maps, "fake")?;
        total += mean_sq_dist(maps, 1.0);
    }
    Ok(total / fakes.len() as f64)
}

fn mean_abs_diff(a: &ImageTensor, b: &ImageTensor, scale: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "L1 pair at {scale} differs in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.values().len() as f64)
}

/// Sum of per-scale mean absolute errors over the full-resolution pair and
/// the decoder taps selected by `scales`.
pub fn loss_gen_l1(
    output: &ImageTensor,
    decoder_taps: &ScalePyramid,
    gt: &ImageTensor,
    gt_pyramid: &ScalePyramid,
    scales: L1Scales,
) -> Result<f64> {
    if decoder_taps.len() != gt_pyramid.len() {
        return Err(Error::Shape(format!(
            "{} decoder taps but {} ground-truth levels",
            decoder_taps.len(),
            gt_pyramid.len()
        )));
    }
    let mut total = mean_abs_diff(output, gt, "full resolution")?;
    for s in 1..=scales.decoder_taps(decoder_taps.len()) {
        total += mean_abs_diff(decoder_taps.level(s), gt_pyramid.level(s), &format!("level {s}"))?;
    }
    Ok(total)
}

pub fn loss_gen_total(l_g_dis: f64, l_g_l1: f64, lambda_l1: f64) -> f64 {
    lambda_l1 * l_g_l1 + l_g_dis
}

fn tape_mean_sq_dist(tape: &mut Tape, x: Var, target: f64) -> Var {
    let shifted = tape.add_scalar(x, -target);
    let sq = tape.square(shifted);
    tape.mean(sq)
}

/// `½·mean((real−1)²) + ½·mean(fake²)` on the tape.
pub fn tape_lsgan_dis(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let r = tape_mean_sq_dist(tape, real, 1.0);
    let f = tape_mean_sq_dist(tape, fake, 0.0);
    let sum = tape.add(r, f);
    tape.scale(sum, 0.5)
}

/// Mean over discriminators of `mean((score−1)²)`.
pub fn tape_lsgan_gen(tape: &mut Tape, fakes: &[Var]) -> Var {
    assert!(!fakes.is_empty(), "at least one discriminator score");
    let mut total = tape_mean_sq_dist(tape, fakes[0], 1.0);
    for &f in &fakes[1..] {
        let term = tape_mean_sq_dist(tape, f, 1.0);
        total = tape.add(total, term);
    }
    tape.scale(total, 1.0 / fakes.len() as f64)
}

/// `mean|a − b|` on the tape.
pub fn tape_l1(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

/// Multi-scale L1 on the tape; `gt_levels[s - 1]` pairs with `decoder_taps[s - 1]`.
pub fn tape_multi_scale_l1(
    tape: &mut Tape,
    output: Var,
    decoder_taps: &[Var],
    gt: Var,
    gt_levels: &[Var],
    scales: L1Scales,
) -> Var {
    let mut total = tape_l1(tape, output, gt);
    for s in 0..scales.decoder_taps(decoder_taps.len()) {
        let term = tape_l1(tape, decoder_taps[s], gt_levels[s]);
        total = tape.add(total, term);
    }
    total
}

/// `λ·l1 + adversarial` on the tape.
pub fn tape_gen_total(tape: &mut Tape, adversarial: Option<Var>, l1: Var, lambda_l1: f64) -> Var {
    let weighted = tape.scale(l1, lambda_l1);
    match adversarial {
        Some(adv) => tape.add(weighted, adv),
        None => weighted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use msgdd_tensor::Tensor;

    fn map(values: &[f64]) -> ScoreMap {
        ScoreMap::from_tensor(Tensor::new(vec![1, 1, 1, values.len()], values.to_vec())).unwrap()
    }

    #[test]
    fn empty_and_mismatched_batches_are_errors() {
        assert!(matches!(loss_dis_e(&[], &[map(&[0.0])]), Err(Error::EmptyBatch)));
        assert!(matches!(loss_gen_adv(&[map(&[0.0])], &[]), Err(Error::EmptyBatch)));
        assert!(matches!(
            loss_dis_d(&[map(&[0.0, 1.0])], &[map(&[0.0])]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tape_losses_agree_with_plain_ones() {
        let real = [0.3, -0.2, 1.4, 0.9];
        let fake = [0.1, 0.7, -0.5, 2.0];
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(vec![2, 1, 1, 2], real.to_vec()));
        let f = tape.constant(Tensor::new(vec![2, 1, 1, 2], fake.to_vec()));
        let dis = tape_lsgan_dis(&mut tape, r, f);
        let gen = tape_lsgan_gen(&mut tape, &[r, f]);
        let plain_dis = loss_dis_d(&[map(&real[..2]), map(&real[2..])], &[map(&fake[..2]), map(&fake[2..])]).unwrap();
        let plain_gen = loss_gen_adv(&[map(&real)], &[map(&fake)]).unwrap();
        assert!((tape.value(dis).item() - plain_dis).abs() < 1e-12);
        assert!((tape.value(gen).item() - plain_gen).abs() < 1e-12);
    }
}
