//! Feed-forward acoustic model: score encoder, duration predictor, length
//! regulator, and a decoder whose logF0 output is a residual on the note
//! pitch.
//!
//! Every stage is built on an autodiff [`Graph`]. Training binds the
//! parameters as trainable leaves; inference binds them as constants and
//! runs the same code with dropout disabled.

mod batch;
mod config;
pub mod layers;
mod params;

use crate::autodiff::{Graph, GraphError, Var};
use crate::features::{AcousticFeatureSequence, FeatureError, BAP_DIM, MGC_DIM};
use crate::score::PhonemeTokenSequence;
use crate::tensor::Tensor;

pub use batch::{expand_index, length_regulate, FrameBatch, TokenBatch};
pub use config::ModelConfig;
use layers::{batched_positions, duration_predictor, fft_block, Dropout, SeqMask};
pub use params::{Layout, ModelParameters};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("model input: {0}")]
    Input(String),
    #[error("model parameters: {0}")]
    Parameters(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Features(#[from] FeatureError),
}

/// Decodes a log(frames+1) prediction into a frame count of at least 1.
pub fn decode_duration(log_value: f64) -> usize {
    let frames = (log_value.exp() - 1.0).round();
    if frames.is_nan() || frames < 1.0 {
        1
    } else {
        frames.min(u32::MAX as f64) as usize
    }
}

/// Encoder-side graph nodes for a [`TokenBatch`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[B,N,d]`
    pub encoded: Var,
    /// `[B,N,1]` predicted log(frames+1), zero on padding.
    pub log_durations: Var,
}

/// Decoder-side graph nodes for a [`FrameBatch`], all zero on padding.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// Length-regulated encoder states plus frame positions, `[B,T,d]`.
    pub decoder_input: Var,
    pub mgc: Var,
    pub bap: Var,
    /// Note log-F0 plus predicted residual on pitched frames, 0 elsewhere.
    pub logf0: Var,
    pub vuv_logit: Var,
    pub vuv: Var,
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub tokens: TokenBatch,
    pub frames: FrameBatch,
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
}

/// Duration predictor output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationPrediction {
    pub log_domain: Vec<f64>,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub durations: DurationPrediction,
    /// `T×d` input to the decoder stack.
    pub decoder_input: Tensor,
    pub features: AcousticFeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    config: ModelConfig,
    layout: Layout,
    params: ModelParameters,
}

impl AcousticModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, params) = params::initialize(&config, seed);
        Ok(Self { config, layout, params })
    }

    /// Builds a model from tensors in layout order, checking names and shapes.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, params) = params::adopt(&config, named)?;
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn parameters(&self) -> &ModelParameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.parameter(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Embeds, encodes and predicts log-durations for a padded batch.
    pub fn encoder_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        tokens: &TokenBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<EncoderOutput, ModelError> {
        let (b, n, d) = (tokens.batch(), tokens.max_len(), self.config.hidden_dim);
        let shape = vec![b, n, d];
        let l = &self.layout;
        let ph = g.gather_rows(p[l.phoneme_embedding], tokens.phoneme_rows.clone(), shape.clone())?;
        let pitch = g.gather_rows(p[l.pitch_embedding], tokens.pitch_rows.clone(), shape.clone())?;
        let dur = g.gather_rows(p[l.duration_embedding], tokens.duration_rows.clone(), shape)?;
        let positions = g.constant(batched_positions(&tokens.mask, d));
        let x = g.add(ph, pitch)?;
        let x = g.add(x, dur)?;
        let mut x = g.add(x, positions)?;
        x = dropout.apply(g, x)?;
        for block in &l.encoder {
            x = fft_block(g, p, block, x, &tokens.mask, self.config.attention_heads, dropout)?.0;
        }
        let log_durations = duration_predictor(g, p, &l.duration_predictor, x, &tokens.mask, dropout)?;
        Ok(EncoderOutput {
            encoded: x,
            log_durations,
        })
    }

    /// Length-regulates `encoded` to frame rate and runs the decoder.
    pub fn decoder_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        encoded: Var,
        frames: &FrameBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<DecoderOutput, ModelError> {
        let d = self.config.hidden_dim;
        let rows: usize = g.shape(encoded)[..g.shape(encoded).len() - 1].iter().product();
        let flat = g.reshape(encoded, vec![rows, d])?;
        let expanded = g.gather_rows(flat, frames.source_rows.clone(), vec![frames.batch(), frames.max_len(), d])?;
        self.decode_stack(g, p, expanded, frames, dropout)
    }

    fn decode_stack(
        &self,
        g: &mut Graph,
        p: &[Var],
        expanded: Var,
        frames: &FrameBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<DecoderOutput, ModelError> {
        let (b, t, d) = (frames.batch(), frames.max_len(), self.config.hidden_dim);
        let positions = g.constant(batched_positions(&frames.mask, d));
        let decoder_input = g.add(expanded, positions)?;
        let mut x = dropout.apply(g, decoder_input)?;
        for block in &self.layout.decoder {
            x = fft_block(g, p, block, x, &frames.mask, self.config.attention_heads, dropout)?.0;
        }
        let y = layers::linear(g, p, self.layout.output, x)?;
        let y = frames.mask.apply(g, y)?;
        let mgc = g.slice_last(y, 0, MGC_DIM)?;
        let bap = g.slice_last(y, MGC_DIM, BAP_DIM)?;
        let residual = g.slice_last(y, MGC_DIM + BAP_DIM, 1)?;
        let vuv_logit = g.slice_last(y, MGC_DIM + BAP_DIM + 1, 1)?;
        let note = g.constant(Tensor::new(vec![b, t, 1], frames.note_logf0.clone()).expect("note shape"));
        let logf0 = g.add(note, residual)?;
        let logf0 = g.mask(logf0, frames.pitched.clone())?;
        let vuv = g.sigmoid(vuv_logit)?;
        Ok(DecoderOutput {
            decoder_input,
            mgc,
            bap,
            logf0,
            vuv_logit,
            vuv,
        })
    }

    /// Full forward pass with ground-truth durations driving the length
    /// regulator. `target_frames[b]` must equal the duration sum of `seqs[b]`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        p: &[Var],
        seqs: &[&PhonemeTokenSequence],
        target_frames: &[usize],
        dropout: &mut Dropout<'_>,
    ) -> Result<TrainForward, ModelError> {
        if target_frames.len() != seqs.len() {
            return Err(ModelError::Input("one target length per sequence required".into()));
        }
        let mut durations = Vec::with_capacity(seqs.len());
        for (b, (seq, &frames)) in seqs.iter().zip(target_frames).enumerate() {
            let d = seq
                .durations()
                .ok_or_else(|| ModelError::Input(format!("sequence {b} has no ground-truth durations")))?;
            let total: usize = d.iter().sum();
            if total != frames {
                return Err(ModelError::Input(format!(
                    "sequence {b}: durations sum to {total} frames, features have {frames}"
                )));
            }
            durations.push(d);
        }
        let tokens = TokenBatch::new(seqs, &self.config)?;
        let encoder = self.encoder_graph(g, p, &tokens, dropout)?;
        let frames = FrameBatch::new(&tokens, &durations)?;
        let decoder = self.decoder_graph(g, p, encoder.encoded, &frames, dropout)?;
        Ok(TrainForward {
            tokens,
            frames,
            encoder,
            decoder,
        })
    }

    /// Encoder states `N×d` for one sequence.
    pub fn encode(&self, tokens: &PhonemeTokenSequence) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let batch = TokenBatch::new(&[tokens], &self.config)?;
        let out = self.encoder_graph(&mut g, &p, &batch, &mut Dropout::disabled())?;
        Ok(g.value(out.encoded).clone().reshape(vec![tokens.len(), self.config.hidden_dim]).expect("rank-2 view"))
    }

    /// Duration predictor applied to encoder states `N×d`.
    pub fn predict_durations(&self, hidden: &Tensor) -> Result<DurationPrediction, ModelError> {
        let n = self.check_hidden(hidden)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(hidden.clone().reshape(vec![1, n, self.config.hidden_dim]).expect("batch view"));
        let v = duration_predictor(
            &mut g,
            &p,
            &self.layout.duration_predictor,
            x,
            &SeqMask::full(n),
            &mut Dropout::disabled(),
        )?;
        let log_domain = g.value(v).data().to_vec();
        let frames = log_domain.iter().map(|&v| decode_duration(v)).collect();
        Ok(DurationPrediction { log_domain, frames })
    }

    /// Decoder stack on length-regulated states `T×d`.
    pub fn decode(
        &self,
        expanded: &Tensor,
        frame_note_logf0: &[f64],
        frame_voiced_mask: &[bool],
    ) -> Result<AcousticFeatureSequence, ModelError> {
        let t = self.check_hidden(expanded)?;
        if frame_note_logf0.len() != t || frame_voiced_mask.len() != t {
            return Err(ModelError::Input(format!(
                "{t} frames but {} note values and {} mask entries",
                frame_note_logf0.len(),
                frame_voiced_mask.len()
            )));
        }
        let frames = FrameBatch {
            mask: SeqMask::full(t),
            lengths: vec![t],
            source_rows: (0..t).map(Some).collect(),
            note_logf0: frame_voiced_mask
                .iter()
                .zip(frame_note_logf0)
                .map(|(&m, &v)| if m { v } else { 0.0 })
                .collect(),
            pitched: frame_voiced_mask.to_vec(),
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(expanded.clone().reshape(vec![1, t, self.config.hidden_dim]).expect("batch view"));
        let out = self.decode_stack(&mut g, &p, x, &frames, &mut Dropout::disabled())?;
        Ok(features_from(&g, &out)?)
    }

    /// Score-to-features inference with predicted durations.
    pub fn synthesize(&self, tokens: &PhonemeTokenSequence) -> Result<Synthesis, ModelError> {
        self.infer(tokens, None)
    }

    /// Inference with externally fixed phoneme durations.
    pub fn synthesize_with_durations(
        &self,
        tokens: &PhonemeTokenSequence,
        durations: &[usize],
    ) -> Result<Synthesis, ModelError> {
        self.infer(tokens, Some(durations))
    }

    fn infer(&self, tokens: &PhonemeTokenSequence, fixed: Option<&[usize]>) -> Result<Synthesis, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let batch = TokenBatch::new(&[tokens], &self.config)?;
        let enc = self.encoder_graph(&mut g, &p, &batch, &mut Dropout::disabled())?;
        let log_domain = g.value(enc.log_durations).data().to_vec();
        let predicted: Vec<usize> = log_domain.iter().map(|&v| decode_duration(v)).collect();
        let durations = fixed.unwrap_or(&predicted);
        let frames = FrameBatch::new(&batch, &[durations])?;
        let dec = self.decoder_graph(&mut g, &p, enc.encoded, &frames, &mut Dropout::disabled())?;
        let t = frames.max_len();
        Ok(Synthesis {
            durations: DurationPrediction {
                log_domain,
                frames: durations.to_vec(),
            },
            decoder_input: g
                .value(dec.decoder_input)
                .clone()
                .reshape(vec![t, self.config.hidden_dim])
                .expect("rank-2 view"),
            features: features_from(&g, &dec)?,
        })
    }

    fn check_hidden(&self, hidden: &Tensor) -> Result<usize, ModelError> {
        match hidden.shape() {
            [rows, d] if *d == self.config.hidden_dim => Ok(*rows),
            shape => Err(ModelError::Input(format!(
                "expected [rows, {}], got {shape:?}",
                self.config.hidden_dim
            ))),
        }
    }
}

/// Features of the first sequence of a decoded batch, trimmed to its length.
fn features_from(g: &Graph, out: &DecoderOutput) -> Result<AcousticFeatureSequence, FeatureError> {
    let t = g.shape(out.logf0)[1];
    let take = |v: Var, width: usize| g.value(v).data()[..t * width].to_vec();
    AcousticFeatureSequence::new(
        take(out.mgc, MGC_DIM),
        take(out.bap, BAP_DIM),
        take(out.logf0, 1),
        take(out.vuv, 1),
    )
}

#[cfg(test)]
mod tests;
