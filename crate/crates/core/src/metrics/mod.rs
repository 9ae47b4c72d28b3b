//! Objective evaluation: duration, F0, spectral, aperiodicity and voicing
//! accuracy, plus the global variance of MGC coefficients.
//!
//! Values that cannot be computed (a correlation over constant input, F0
//! statistics without commonly voiced frames) are `None` and print as
//! [`UNDEFINED`].

use std::fmt::Write as _;

use crate::features::{AcousticFeatureSequence, BAP_DIM, MGC_DIM, VUV_THRESHOLD};
use crate::model::{decode_duration, AcousticModel, ModelError};
use crate::score::PhonemeTokenSequence;

mod report;

pub use report::{EvalReport, UtteranceEval, REPORT_KEYS, UNDEFINED};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{what}: prediction has {pred} entries, reference has {gt}")]
    Length { what: &'static str, pred: usize, gt: usize },
    #[error("{0}: no data")]
    Empty(&'static str),
    #[error("{what}: {len} values is not a whole number of {width}-wide frames")]
    Width { what: &'static str, len: usize, width: usize },
    #[error("{0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Root-mean-square error with the Pearson correlation of the same pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseCorr {
    pub rmse: f64,
    pub corr: Option<f64>,
}

fn same_len(what: &'static str, pred: &[f64], gt: &[f64]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length { what, pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty(what));
    }
    Ok(())
}

pub fn rmse_corr(pred: &[f64], gt: &[f64]) -> Result<RmseCorr, MetricError> {
    same_len("rmse_corr", pred, gt)?;
    let n = pred.len() as f64;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n;
    Ok(RmseCorr {
        rmse: mse.sqrt(),
        corr: pearson(pred, gt),
    })
}

/// `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn frames_of(what: &'static str, data: &[f64], width: usize) -> Result<usize, MetricError> {
    if data.len() % width != 0 {
        return Err(MetricError::Width { what, len: data.len(), width });
    }
    Ok(data.len() / width)
}

/// F0 error in Hz over frames voiced in both sequences, given flat logF0
/// and V/UV tracks. `None` when no frame is voiced in both.
pub fn f0_rmse_corr(
    pred_logf0: &[f64],
    pred_vuv: &[f64],
    gt_logf0: &[f64],
    gt_vuv: &[f64],
) -> Result<Option<RmseCorr>, MetricError> {
    same_len("f0", pred_logf0, gt_logf0)?;
    same_len("f0", pred_vuv, gt_vuv)?;
    same_len("f0", pred_logf0, pred_vuv)?;
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for t in 0..pred_logf0.len() {
        if pred_vuv[t] >= VUV_THRESHOLD && gt_vuv[t] >= VUV_THRESHOLD {
            p.push(pred_logf0[t].exp());
            g.push(gt_logf0[t].exp());
        }
    }
    if p.is_empty() {
        return Ok(None);
    }
    rmse_corr(&p, &g).map(Some)
}

pub fn f0_metrics(pred: &AcousticFeatureSequence, gt: &AcousticFeatureSequence) -> Result<Option<RmseCorr>, MetricError> {
    f0_rmse_corr(pred.logf0(), pred.vuv(), gt.logf0(), gt.vuv())
}

/// `10√2 / ln 10`, the mel-cepstral distortion scale.
pub const MCD_SCALE: f64 = 10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10;

/// Mel-cepstral distortion in dB over flat `T×60` MGC matrices: the
/// per-frame Euclidean distance of coefficients 1..60 (energy excluded),
/// scaled and averaged over frames.
pub fn mcd(pred_mgc: &[f64], gt_mgc: &[f64]) -> Result<f64, MetricError> {
    same_len("mcd", pred_mgc, gt_mgc)?;
    let frames = frames_of("mcd", pred_mgc, MGC_DIM)?;
    let total: f64 = pred_mgc
        .chunks_exact(MGC_DIM)
        .zip(gt_mgc.chunks_exact(MGC_DIM))
        .map(|(p, g)| p[1..].iter().zip(&g[1..]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    Ok(MCD_SCALE * total / frames as f64)
}

/// Band aperiodicity distortion in dB: RMS difference over all frames and
/// bands of flat `T×5` matrices.
pub fn bapd(pred_bap: &[f64], gt_bap: &[f64]) -> Result<f64, MetricError> {
    same_len("bapd", pred_bap, gt_bap)?;
    frames_of("bapd", pred_bap, BAP_DIM)?;
    let sq: f64 = pred_bap.iter().zip(gt_bap).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / pred_bap.len() as f64).sqrt())
}

/// Percentage of frames whose thresholded voicing decisions differ.
pub fn vuv_error(pred_vuv: &[f64], gt_vuv: &[f64]) -> Result<f64, MetricError> {
    same_len("vuv_error", pred_vuv, gt_vuv)?;
    let wrong = pred_vuv
        .iter()
        .zip(gt_vuv)
        .filter(|(p, g)| (**p >= VUV_THRESHOLD) != (**g >= VUV_THRESHOLD))
        .count();
    Ok(100.0 * wrong as f64 / pred_vuv.len() as f64)
}

/// Averaged global variance of MGC coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVariance {
    /// One population variance per coefficient, averaged over utterances.
    pub values: Vec<f64>,
    pub utterances: usize,
    /// Indices of inputs skipped for having fewer than two frames.
    pub skipped: Vec<usize>,
}

impl GlobalVariance {
    /// Two-column table: coefficient index and GV value.
    pub fn to_table(&self) -> String {
        let mut out = String::from("coefficient\tgv\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i}\t{v}").unwrap();
        }
        out
    }
}

/// Global variance over flat `T_i×60` MGC matrices.
pub fn gv(mgc_per_utterance: &[&[f64]]) -> Result<GlobalVariance, MetricError> {
    let mut sum = vec![0.0; MGC_DIM];
    let mut used = 0;
    let mut skipped = Vec::new();
    for (u, mgc) in mgc_per_utterance.iter().enumerate() {
        let frames = frames_of("gv", mgc, MGC_DIM)?;
        if frames < 2 {
            log::warn!("global variance: skipping utterance {u} with {frames} frame(s)");
            skipped.push(u);
            continue;
        }
        let n = frames as f64;
        for (c, acc) in sum.iter_mut().enumerate() {
            let column = || mgc.iter().skip(c).step_by(MGC_DIM);
            let mean = column().sum::<f64>() / n;
            *acc += column().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        }
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::Empty("gv"));
    }
    Ok(GlobalVariance {
        values: sum.into_iter().map(|s| s / used as f64).collect(),
        utterances: used,
        skipped,
    })
}

/// Per-syllable frame totals as reals.
pub fn syllable_frames(tokens: &PhonemeTokenSequence, per_phoneme: &[usize]) -> Vec<f64> {
    tokens.syllable_totals(per_phoneme).into_iter().map(|f| f as f64).collect()
}

fn as_reals(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// One utterance's predicted and reference material.
#[derive(Debug, Clone, Copy)]
pub struct EvalPair<'a> {
    pub name: &'a str,
    /// Frame-aligned with `gt`.
    pub pred: &'a AcousticFeatureSequence,
    pub gt: &'a AcousticFeatureSequence,
    /// Predicted and reference per-phoneme frame counts, when known.
    pub durations: Option<(&'a [usize], &'a [usize])>,
}

/// Scores every pair and pools all frames (and all phonemes) for the
/// corpus-level figures.
pub fn evaluate(pairs: &[EvalPair<'_>]) -> Result<EvalReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("evaluate"));
    }
    let mut pooled = Pool::default();
    let mut utterances = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut one = Pool::default();
        one.push(pair)?;
        utterances.push(one.finish(pair.name.to_string(), pair.gt.frames())?);
        pooled.push(pair)?;
    }
    let frames = pooled.vuv_gt.len();
    let total = pooled.finish(String::new(), frames)?;
    Ok(EvalReport {
        notes: Vec::new(),
        dur_rmse: total.dur_rmse,
        dur_corr: total.dur_corr,
        f0_rmse_hz: total.f0_rmse_hz,
        f0_corr: total.f0_corr,
        mcd_db: total.mcd_db,
        bapd_db: total.bapd_db,
        vuv_error_pct: total.vuv_error_pct,
        utterances,
    })
}

#[derive(Default)]
struct Pool {
    dur_pred: Vec<f64>,
    dur_gt: Vec<f64>,
    mgc_pred: Vec<f64>,
    mgc_gt: Vec<f64>,
    bap_pred: Vec<f64>,
    bap_gt: Vec<f64>,
    lf_pred: Vec<f64>,
    lf_gt: Vec<f64>,
    vuv_pred: Vec<f64>,
    vuv_gt: Vec<f64>,
}

impl Pool {
    fn push(&mut self, pair: &EvalPair<'_>) -> Result<(), MetricError> {
        let (p, g) = (pair.pred, pair.gt);
        if p.frames() != g.frames() {
            return Err(MetricError::Length { what: "frames", pred: p.frames(), gt: g.frames() });
        }
        if let Some((dp, dg)) = pair.durations {
            if dp.len() != dg.len() {
                return Err(MetricError::Length { what: "durations", pred: dp.len(), gt: dg.len() });
            }
            self.dur_pred.extend(as_reals(dp));
            self.dur_gt.extend(as_reals(dg));
        }
        self.mgc_pred.extend_from_slice(p.mgc());
        self.mgc_gt.extend_from_slice(g.mgc());
        self.bap_pred.extend_from_slice(p.bap());
        self.bap_gt.extend_from_slice(g.bap());
        self.lf_pred.extend_from_slice(p.logf0());
        self.lf_gt.extend_from_slice(g.logf0());
        self.vuv_pred.extend_from_slice(p.vuv());
        self.vuv_gt.extend_from_slice(g.vuv());
        Ok(())
    }

    fn finish(self, name: String, frames: usize) -> Result<UtteranceEval, MetricError> {
        let dur = if self.dur_gt.is_empty() {
            None
        } else {
            Some(rmse_corr(&self.dur_pred, &self.dur_gt)?)
        };
        let f0 = f0_rmse_corr(&self.lf_pred, &self.vuv_pred, &self.lf_gt, &self.vuv_gt)?;
        Ok(UtteranceEval {
            name,
            frames,
            dur_rmse: dur.map(|d| d.rmse),
            dur_corr: dur.and_then(|d| d.corr),
            f0_rmse_hz: f0.map(|f| f.rmse),
            f0_corr: f0.and_then(|f| f.corr),
            mcd_db: Some(mcd(&self.mgc_pred, &self.mgc_gt)?),
            bapd_db: Some(bapd(&self.bap_pred, &self.bap_gt)?),
            vuv_error_pct: Some(vuv_error(&self.vuv_pred, &self.vuv_gt)?),
        })
    }
}

/// A reference utterance: tokens carrying ground-truth durations, and its
/// features.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub name: &'a str,
    pub tokens: &'a PhonemeTokenSequence,
    pub features: &'a AcousticFeatureSequence,
}

/// Predictions of `model` for one reference.
#[derive(Debug, Clone)]
pub struct ModelPrediction {
    /// Decoded with ground-truth durations, so frame-aligned with the reference.
    pub aligned: AcousticFeatureSequence,
    /// Free-running duration predictor output.
    pub durations: Vec<usize>,
}

pub fn predict(model: &AcousticModel, reference: &Reference<'_>) -> Result<ModelPrediction, MetricError> {
    let gt = reference
        .tokens
        .durations()
        .ok_or_else(|| MetricError::Report(format!("{}: tokens carry no durations", reference.name)))?;
    let synthesis = model.synthesize_with_durations(reference.tokens, gt)?;
    Ok(ModelPrediction {
        aligned: synthesis.features,
        durations: synthesis.durations.log_domain.iter().map(|&v| decode_duration(v)).collect(),
    })
}

/// Ground-truth-aligned frame metrics and free-running duration metrics.
pub fn evaluate_model(model: &AcousticModel, references: &[Reference<'_>]) -> Result<EvalReport, MetricError> {
    let predictions = references.iter().map(|r| predict(model, r)).collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<EvalPair<'_>> = references
        .iter()
        .zip(&predictions)
        .map(|(r, p)| EvalPair {
            name: r.name,
            pred: &p.aligned,
            gt: r.features,
            durations: Some((&p.durations, r.tokens.durations().expect("checked in predict"))),
        })
        .collect();
    let mut report = evaluate(&pairs)?;
    report.notes = vec![ALIGNMENT_NOTE.to_string()];
    Ok(report)
}

pub const ALIGNMENT_NOTE: &str =
    "frame metrics decoded with ground-truth durations; duration metrics from the free-running predictor";

/// Held-out syllable-duration RMSE in frames, pooled over all syllables.
pub fn syllable_duration_rmse(model: &AcousticModel, references: &[Reference<'_>]) -> Result<f64, MetricError> {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for r in references {
        let hidden = model.encode(r.tokens)?;
        let frames = model.predict_durations(&hidden)?.frames;
        let truth = r
            .tokens
            .durations()
            .ok_or_else(|| MetricError::Report(format!("{}: tokens carry no durations", r.name)))?;
        pred.extend(syllable_frames(r.tokens, &frames));
        gt.extend(syllable_frames(r.tokens, truth));
    }
    Ok(rmse_corr(&pred, &gt)?.rmse)
}

#[cfg(test)]
mod tests;
