//! Joint duration, spectral and F0/V/UV objectives over a padded batch.
//!
//! Every term averages only over valid positions: padding, unvoiced
//! frames (for logF0) and rest frames never reach the loss value, so
//! arbitrary target values there leave it bit-unchanged.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::{Graph, GraphError, Var};
use crate::features::{AcousticFeatureSequence, BAP_DIM, MGC_DIM};
use crate::model::{DecoderOutput, EncoderOutput, FrameBatch, TokenBatch};
use crate::score::PhonemeTokenSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_pd: f64,
    pub w_sd: f64,
    pub w_m: f64,
    pub w_b: f64,
    pub w_f: f64,
    pub w_u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pd: 1.0,
            w_sd: 1.0,
            w_m: 1.0,
            w_b: 1.0,
            w_f: 1.0,
            w_u: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.w_pd, self.w_sd, self.w_m, self.w_b, self.w_f, self.w_u]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TrainError::Config(format!("loss weights must be finite and ≥ 0: {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(TrainError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Padded ground truth aligned with a [`TokenBatch`] / [`FrameBatch`] pair.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[B,N,1]` log(frames+1).
    pub log_durations: Tensor,
    pub phone_valid: Vec<bool>,
    /// `[S, B*N]` 0/1 matrix selecting each syllable's phonemes.
    pub syllable_members: Tensor,
    /// `[S,1]` ground-truth syllable lengths in frames.
    pub syllable_frames: Tensor,
    /// `[B,T,60]`, `[B,T,5]`, `[B,T,1]`, `[B,T,1]`.
    pub mgc: Tensor,
    pub bap: Tensor,
    pub logf0: Tensor,
    pub vuv: Tensor,
    pub frame_valid: Vec<bool>,
    /// Frames scored by the logF0 term: valid, ground-truth voiced, pitched.
    pub f0_valid: Vec<bool>,
}

impl Targets {
    pub fn new(
        batch: &[(&PhonemeTokenSequence, &AcousticFeatureSequence)],
        tokens: &TokenBatch,
        frames: &FrameBatch,
    ) -> Result<Self, TrainError> {
        let (b, n, t) = (tokens.batch(), tokens.max_len(), frames.max_len());
        if batch.len() != b || frames.batch() != b {
            return Err(TrainError::Input(format!("{} examples for a batch of {b}", batch.len())));
        }
        let mut log_durations = vec![0.0; b * n];
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut syllable_frames = Vec::new();
        let (mut mgc, mut bap) = (vec![0.0; b * t * MGC_DIM], vec![0.0; b * t * BAP_DIM]);
        let (mut logf0, mut vuv) = (vec![0.0; b * t], vec![0.0; b * t]);
        let mut f0_valid = vec![false; b * t];
        for (i, (seq, feats)) in batch.iter().enumerate() {
            let durations = seq
                .durations()
                .ok_or_else(|| TrainError::Input(format!("example {i} has no ground-truth durations")))?;
            if seq.len() != tokens.lengths[i] || feats.frames() != frames.lengths[i] {
                return Err(TrainError::Input(format!("example {i} does not match the batch layout")));
            }
            for (k, &d) in durations.iter().enumerate() {
                log_durations[i * n + k] = (d as f64 + 1.0).ln();
            }
            for span in seq.syllable_spans() {
                members.push(span.clone().map(|k| i * n + k).collect());
                syllable_frames.push(durations[span.clone()].iter().sum::<usize>() as f64);
            }
            let base = i * t;
            mgc[base * MGC_DIM..(base + feats.frames()) * MGC_DIM].copy_from_slice(feats.mgc());
            bap[base * BAP_DIM..(base + feats.frames()) * BAP_DIM].copy_from_slice(feats.bap());
            logf0[base..base + feats.frames()].copy_from_slice(feats.logf0());
            vuv[base..base + feats.frames()].copy_from_slice(feats.vuv());
            for f in 0..feats.frames() {
                f0_valid[base + f] = feats.is_voiced(f) && frames.pitched[base + f];
            }
        }
        let s = members.len();
        let mut matrix = vec![0.0; s * b * n];
        for (row, cols) in members.iter().enumerate() {
            for &c in cols {
                matrix[row * b * n + c] = 1.0;
            }
        }
        let tensor = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("target shape");
        Ok(Self {
            log_durations: tensor(vec![b, n, 1], log_durations),
            phone_valid: tokens.mask.valid.clone(),
            syllable_members: tensor(vec![s, b * n], matrix),
            syllable_frames: tensor(vec![s, 1], syllable_frames),
            mgc: tensor(vec![b, t, MGC_DIM], mgc),
            bap: tensor(vec![b, t, BAP_DIM], bap),
            logf0: tensor(vec![b, t, 1], logf0),
            vuv: tensor(vec![b, t, 1], vuv),
            frame_valid: frames.mask.valid.clone(),
            f0_valid,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DurationTerms {
    /// `w_pd·L_pd + w_sd·L_sd`
    pub weighted: Var,
    pub phoneme: Var,
    pub syllable: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SpectralTerms {
    /// `w_m·L_m + w_b·L_b`
    pub weighted: Var,
    pub mgc: Var,
    pub bap: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderTerms {
    /// Spectral terms plus `w_f·L_f + w_u·L_u`.
    pub weighted: Var,
    pub spectral: SpectralTerms,
    pub logf0: Var,
    pub vuv: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub duration: DurationTerms,
    pub decoder: DecoderTerms,
}

/// Scalar values of every loss component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub phoneme_duration: f64,
    pub syllable_duration: f64,
    pub mgc: f64,
    pub bap: f64,
    pub logf0: f64,
    pub vuv: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, t: &LossTerms) -> Self {
        let v = |x: Var| g.value(x).data()[0];
        Self {
            total: v(t.total),
            phoneme_duration: v(t.duration.phoneme),
            syllable_duration: v(t.duration.syllable),
            mgc: v(t.decoder.spectral.mgc),
            bap: v(t.decoder.spectral.bap),
            logf0: v(t.decoder.logf0),
            vuv: v(t.decoder.vuv),
        }
    }

    /// Components in log order: pd, sd, m, b, f, u.
    pub fn components(&self) -> [f64; 6] {
        [
            self.phoneme_duration,
            self.syllable_duration,
            self.mgc,
            self.bap,
            self.logf0,
            self.vuv,
        ]
    }
}

fn row_mask(rows: &[bool], width: usize) -> Vec<bool> {
    rows.iter().flat_map(|&k| std::iter::repeat(k).take(width)).collect()
}

/// Mean of `|pred - target|` over kept rows; 0 when no row is kept.
fn masked_mae(g: &mut Graph, pred: Var, target: &Tensor, rows: &[bool]) -> Result<Var, GraphError> {
    let width = target.cols();
    let count = rows.iter().filter(|&&k| k).count() * width;
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let diff = g.mask(diff, row_mask(rows, width))?;
    let diff = g.abs(diff)?;
    let sum = g.sum(diff)?;
    g.scale(sum, 1.0 / count as f64)
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var, GraphError> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = g.scale(v, w)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    Ok(acc.expect("at least one term"))
}

/// Phoneme term in the log(frames+1) domain; syllable term on linear
/// frame counts `exp(v) - 1` summed over each syllable.
pub fn duration_loss(g: &mut Graph, log_pred: Var, t: &Targets, w: &LossWeights) -> Result<DurationTerms, GraphError> {
    let phoneme = masked_mae(g, log_pred, &t.log_durations, &t.phone_valid)?;
    let linear = g.exp(log_pred)?;
    let minus_one = g.constant(Tensor::scalar(-1.0));
    let linear = g.add_bias(linear, minus_one)?;
    let linear = g.mask(linear, t.phone_valid.clone())?;
    let flat = g.reshape(linear, vec![t.phone_valid.len(), 1])?;
    let members = g.constant(t.syllable_members.clone());
    let per_syllable = g.matmul(members, flat)?;
    let all = vec![true; t.syllable_frames.rows()];
    let syllable = masked_mae(g, per_syllable, &t.syllable_frames, &all)?;
    let weighted = weighted_sum(g, &[(w.w_pd, phoneme), (w.w_sd, syllable)])?;
    Ok(DurationTerms {
        weighted,
        phoneme,
        syllable,
    })
}

pub fn spectral_loss(g: &mut Graph, mgc: Var, bap: Var, t: &Targets, w: &LossWeights) -> Result<SpectralTerms, GraphError> {
    let m = masked_mae(g, mgc, &t.mgc, &t.frame_valid)?;
    let b = masked_mae(g, bap, &t.bap, &t.frame_valid)?;
    let weighted = weighted_sum(g, &[(w.w_m, m), (w.w_b, b)])?;
    Ok(SpectralTerms { weighted, mgc: m, bap: b })
}

/// Spectral terms, logF0 MAE on voiced pitched frames, and V/UV binary
/// cross-entropy computed from logits as `softplus(z) - y·z`.
pub fn decoder_loss(g: &mut Graph, out: &DecoderOutput, t: &Targets, w: &LossWeights) -> Result<DecoderTerms, GraphError> {
    let spectral = spectral_loss(g, out.mgc, out.bap, t, w)?;
    let logf0 = masked_mae(g, out.logf0, &t.logf0, &t.f0_valid)?;
    let sp = g.softplus(out.vuv_logit)?;
    let y = g.constant(t.vuv.clone());
    let yz = g.mul(out.vuv_logit, y)?;
    let bce = g.sub(sp, yz)?;
    let bce = g.mask(bce, t.frame_valid.clone())?;
    let sum = g.sum(bce)?;
    let count = t.frame_valid.iter().filter(|&&k| k).count().max(1);
    let vuv = g.scale(sum, 1.0 / count as f64)?;
    let weighted = weighted_sum(g, &[(1.0, spectral.weighted), (w.w_f, logf0), (w.w_u, vuv)])?;
    Ok(DecoderTerms {
        weighted,
        spectral,
        logf0,
        vuv,
    })
}

pub fn total_loss(
    g: &mut Graph,
    encoder: &EncoderOutput,
    decoder: &DecoderOutput,
    t: &Targets,
    w: &LossWeights,
) -> Result<LossTerms, GraphError> {
    let duration = duration_loss(g, encoder.log_durations, t, w)?;
    let decoder = decoder_loss(g, decoder, t, w)?;
    let total = g.add(decoder.weighted, duration.weighted)?;
    Ok(LossTerms {
        total,
        duration,
        decoder,
    })
}
