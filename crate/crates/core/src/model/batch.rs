use super::config::ModelConfig;
use super::layers::SeqMask;
use super::ModelError;
use crate::score::{midi_to_log_hz, PhonemeTokenSequence};
use crate::tensor::Tensor;

/// Padded phoneme-level inputs for a batch of sequences.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub mask: SeqMask,
    pub lengths: Vec<usize>,
    /// `B*N` embedding-row lookups; `None` on padding.
    pub phoneme_rows: Vec<Option<usize>>,
    pub pitch_rows: Vec<Option<usize>>,
    pub duration_rows: Vec<Option<usize>>,
    pub pitch_ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[&PhonemeTokenSequence], config: &ModelConfig) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let len = *lengths.iter().max().unwrap();
        let total = seqs.len() * len;
        let mut out = Self {
            mask: SeqMask::from_lengths(&lengths, len),
            lengths,
            phoneme_rows: vec![None; total],
            pitch_rows: vec![None; total],
            duration_rows: vec![None; total],
            pitch_ids: vec![0; total],
        };
        for (b, seq) in seqs.iter().enumerate() {
            for i in 0..seq.len() {
                let (ph, pitch) = (seq.phoneme_ids()[i], seq.pitch_ids()[i]);
                if ph >= config.phoneme_vocab_size {
                    return Err(ModelError::Input(format!(
                        "phoneme id {ph} outside vocabulary of {}",
                        config.phoneme_vocab_size
                    )));
                }
                if pitch >= config.pitch_vocab_size {
                    return Err(ModelError::Input(format!(
                        "pitch id {pitch} outside vocabulary of {}",
                        config.pitch_vocab_size
                    )));
                }
                let frames = seq.note_frame_counts()[i].min(config.max_note_frames);
                let at = b * len + i;
                out.phoneme_rows[at] = Some(ph);
                out.pitch_rows[at] = Some(pitch);
                out.duration_rows[at] = Some(frames - 1);
                out.pitch_ids[at] = pitch;
            }
        }
        Ok(out)
    }

    pub fn batch(&self) -> usize {
        self.mask.batch
    }

    pub fn max_len(&self) -> usize {
        self.mask.len
    }
}

/// Padded frame-level bookkeeping after length regulation.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    pub mask: SeqMask,
    pub lengths: Vec<usize>,
    /// Row of the flattened `[B*N, d]` encoder output feeding each of the
    /// `B*T` frames; `None` on padding.
    pub source_rows: Vec<Option<usize>>,
    /// Log-Hz of the governing note, 0 on rest and padding frames.
    pub note_logf0: Vec<f64>,
    /// Frames governed by a pitched (non-rest) note.
    pub pitched: Vec<bool>,
}

impl FrameBatch {
    pub fn new(tokens: &TokenBatch, durations: &[&[usize]]) -> Result<Self, ModelError> {
        if durations.len() != tokens.batch() {
            return Err(ModelError::Input(format!(
                "{} duration lists for a batch of {}",
                durations.len(),
                tokens.batch()
            )));
        }
        let n = tokens.max_len();
        let mut expansions = Vec::with_capacity(durations.len());
        for (b, d) in durations.iter().enumerate() {
            if d.len() != tokens.lengths[b] {
                return Err(ModelError::Input(format!(
                    "sequence {b}: {} durations for {} phonemes",
                    d.len(),
                    tokens.lengths[b]
                )));
            }
            expansions.push(expand_index(d)?);
        }
        let lengths: Vec<usize> = expansions.iter().map(Vec::len).collect();
        let t_max = *lengths.iter().max().unwrap();
        let total = durations.len() * t_max;
        let mut out = Self {
            mask: SeqMask::from_lengths(&lengths, t_max),
            lengths,
            source_rows: vec![None; total],
            note_logf0: vec![0.0; total],
            pitched: vec![false; total],
        };
        for (b, expansion) in expansions.iter().enumerate() {
            for (t, &i) in expansion.iter().enumerate() {
                let at = b * t_max + t;
                let pitch = tokens.pitch_ids[b * n + i];
                out.source_rows[at] = Some(b * n + i);
                if pitch != 0 {
                    let midi = u8::try_from(pitch).map_err(|_| ModelError::Input(format!("pitch {pitch} is not MIDI")))?;
                    out.note_logf0[at] = midi_to_log_hz(midi).map_err(|e| ModelError::Input(e.to_string()))?;
                    out.pitched[at] = true;
                }
            }
        }
        Ok(out)
    }

    pub fn batch(&self) -> usize {
        self.mask.batch
    }

    pub fn max_len(&self) -> usize {
        self.mask.len
    }
}

/// Source row of every output frame: row `i` repeated `durations[i]` times.
pub fn expand_index(durations: &[usize]) -> Result<Vec<usize>, ModelError> {
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(ModelError::Input(format!("phoneme {i} has zero duration")));
    }
    Ok(durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat(i).take(d))
        .collect())
}

/// Repeats row `i` of `hidden` (`N×d`) `durations[i]` times.
pub fn length_regulate(hidden: &Tensor, durations: &[usize]) -> Result<Tensor, ModelError> {
    if hidden.shape().len() != 2 || hidden.rows() != durations.len() {
        return Err(ModelError::Input(format!(
            "{} durations for hidden shape {:?}",
            durations.len(),
            hidden.shape()
        )));
    }
    let index = expand_index(durations)?;
    let cols = hidden.cols();
    let mut data = Vec::with_capacity(index.len() * cols);
    for &i in &index {
        data.extend_from_slice(hidden.row(i));
    }
    Ok(Tensor::new(vec![index.len(), cols], data).expect("regulated shape"))
}
