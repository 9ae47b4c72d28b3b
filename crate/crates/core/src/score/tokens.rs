use std::ops::Range;

use super::lexicon::PhonemeLexicon;
use super::{beats_to_frames, MusicalScore, ScoreError};

/// Phoneme-level model input: one row per phoneme carrying its ID, the
/// governing note's pitch, and that note's length in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeTokenSequence {
    phoneme_ids: Vec<usize>,
    pitch_ids: Vec<usize>,
    note_frame_counts: Vec<usize>,
    syllable_spans: Vec<Range<usize>>,
    durations: Option<Vec<usize>>,
}

pub(crate) const PAD_ID: usize = 0;
pub(crate) const SILENCE_ID: usize = 1;

impl PhonemeTokenSequence {
    pub fn new(
        phoneme_ids: Vec<usize>,
        pitch_ids: Vec<usize>,
        note_frame_counts: Vec<usize>,
        syllable_spans: Vec<Range<usize>>,
        durations: Option<Vec<usize>>,
    ) -> Result<Self, ScoreError> {
        let bad = |m: String| Err(ScoreError::Tokens(m));
        let n = phoneme_ids.len();
        if n == 0 {
            return bad("empty sequence".into());
        }
        if pitch_ids.len() != n || note_frame_counts.len() != n {
            return bad(format!(
                "parallel lists differ in length: {n} phonemes, {} pitches, {} frame counts",
                pitch_ids.len(),
                note_frame_counts.len()
            ));
        }
        let mut next = 0;
        for span in &syllable_spans {
            if span.start != next || span.end <= span.start {
                return bad(format!("syllable span {span:?} breaks the partition at {next}"));
            }
            next = span.end;
        }
        if next != n {
            return bad(format!("syllable spans cover {next} of {n} phonemes"));
        }
        for i in 0..n {
            if note_frame_counts[i] == 0 {
                return bad(format!("phoneme {i} has a zero-frame note"));
            }
            if phoneme_ids[i] == PAD_ID {
                return bad(format!("phoneme {i} is the padding symbol"));
            }
            if (pitch_ids[i] == 0) != (phoneme_ids[i] == SILENCE_ID) {
                return bad(format!("phoneme {i}: pitch 0 must coincide with silence"));
            }
        }
        let seq = Self {
            phoneme_ids,
            pitch_ids,
            note_frame_counts,
            syllable_spans,
            durations: None,
        };
        match durations {
            Some(d) => seq.with_durations(d),
            None => Ok(seq),
        }
    }

    /// Attaches per-phoneme frame durations (training targets).
    pub fn with_durations(mut self, durations: Vec<usize>) -> Result<Self, ScoreError> {
        if durations.len() != self.len() {
            return Err(ScoreError::Tokens(format!(
                "{} durations for {} phonemes",
                durations.len(),
                self.len()
            )));
        }
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(ScoreError::Tokens(format!("phoneme {i} has zero duration")));
        }
        self.durations = Some(durations);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    pub fn phoneme_ids(&self) -> &[usize] {
        &self.phoneme_ids
    }

    pub fn pitch_ids(&self) -> &[usize] {
        &self.pitch_ids
    }

    pub fn note_frame_counts(&self) -> &[usize] {
        &self.note_frame_counts
    }

    pub fn syllable_spans(&self) -> &[Range<usize>] {
        &self.syllable_spans
    }

    pub fn durations(&self) -> Option<&[usize]> {
        self.durations.as_deref()
    }

    pub fn is_silence(&self, i: usize) -> bool {
        self.phoneme_ids[i] == SILENCE_ID
    }

    /// Total frame count implied by the attached durations.
    pub fn total_frames(&self) -> Option<usize> {
        self.durations.as_ref().map(|d| d.iter().sum())
    }

    /// Sums per-phoneme values over each syllable span.
    pub fn syllable_totals(&self, per_phoneme: &[usize]) -> Vec<usize> {
        self.syllable_spans
            .iter()
            .map(|s| per_phoneme[s.clone()].iter().sum())
            .collect()
    }
}

/// Expands a score into phoneme tokens.
///
/// Each note's phonemes receive copies of its pitch and frame count. A rest
/// becomes one silence phoneme with pitch 0. A continuation note contributes
/// one extra copy of the syllable's final (vowel) phoneme, and its token
/// joins the syllable's span.
pub fn score_to_tokens(
    score: &MusicalScore,
    lexicon: &PhonemeLexicon,
    frame_shift_s: f64,
) -> Result<PhonemeTokenSequence, ScoreError> {
    tokenize_with_notes(score, lexicon, frame_shift_s).map(|(t, _)| t)
}

/// Like [`score_to_tokens`], additionally returning the token range produced
/// by each score event.
pub fn tokenize_with_notes(
    score: &MusicalScore,
    lexicon: &PhonemeLexicon,
    frame_shift_s: f64,
) -> Result<(PhonemeTokenSequence, Vec<Range<usize>>), ScoreError> {
    let mut phonemes = Vec::new();
    let mut pitches = Vec::new();
    let mut frames = Vec::new();
    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut notes = Vec::with_capacity(score.events().len());

    for event in score.events() {
        let start = phonemes.len();
        let count = beats_to_frames(event.beat_length, score.tempo_bpm(), frame_shift_s);
        if event.is_rest() {
            phonemes.push(SILENCE_ID);
            pitches.push(0);
            frames.push(count);
            spans.push(start..start + 1);
        } else {
            let names = lexicon
                .phonemes(&event.syllable)
                .ok_or_else(|| ScoreError::UnknownSyllable(event.syllable.clone()))?;
            let ids: Vec<usize> = names
                .iter()
                .map(|p| lexicon.id(p).expect("lexicon phonemes are in its vocab"))
                .collect();
            let emitted: &[usize] = if event.continuation {
                &ids[ids.len() - 1..]
            } else {
                &ids
            };
            for &id in emitted {
                phonemes.push(id);
                pitches.push(usize::from(event.midi_pitch));
                frames.push(count);
            }
            let end = phonemes.len();
            match spans.last_mut() {
                Some(last) if event.continuation => last.end = end,
                _ => spans.push(start..end),
            }
        }
        notes.push(start..phonemes.len());
    }
    let tokens = PhonemeTokenSequence::new(phonemes, pitches, frames, spans, None)?;
    Ok((tokens, notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{arbitrary_score, NoteEvent};
    use crate::FRAME_SHIFT_S;
    use proptest::prelude::*;

    fn lex() -> PhonemeLexicon {
        PhonemeLexicon::builtin()
    }

    #[test]
    fn single_note_duplicates_pitch_and_frames() {
        let lex = lex();
        let score = MusicalScore::new(120.0, vec![NoteEvent::note("la", 69, 1.0)]).unwrap();
        let t = score_to_tokens(&score, &lex, FRAME_SHIFT_S).unwrap();
        assert_eq!(t.phoneme_ids(), &[lex.id("l").unwrap(), lex.id("a").unwrap()]);
        assert_eq!(t.pitch_ids(), &[69, 69]);
        assert_eq!(t.note_frame_counts(), &[33, 33]);
        assert_eq!(t.syllable_spans(), &[0..2]);
    }

    #[test]
    fn rest_is_one_silence_token() {
        let lex = lex();
        let score = MusicalScore::new(100.0, vec![NoteEvent::rest(0.5)]).unwrap();
        let t = score_to_tokens(&score, &lex, FRAME_SHIFT_S).unwrap();
        assert_eq!(t.phoneme_ids(), &[lex.id("sil").unwrap()]);
        assert_eq!(t.pitch_ids(), &[0]);
        assert_eq!(t.note_frame_counts(), &[20]);
    }

    #[test]
    fn melisma_extends_vowel_and_merges_span() {
        let lex = lex();
        // 0.6 beats at 120 bpm = 0.3 s = 20 frames
        let score = MusicalScore::new(
            120.0,
            vec![NoteEvent::note("la", 69, 1.0), NoteEvent::continued("la", 71, 0.6)],
        )
        .unwrap();
        let (t, notes) = tokenize_with_notes(&score, &lex, FRAME_SHIFT_S).unwrap();
        let (l, a) = (lex.id("l").unwrap(), lex.id("a").unwrap());
        assert_eq!(t.phoneme_ids(), &[l, a, a]);
        assert_eq!(t.pitch_ids(), &[69, 69, 71]);
        assert_eq!(t.note_frame_counts(), &[33, 33, 20]);
        assert_eq!(t.syllable_spans(), &[0..3]);
        assert_eq!(notes, vec![0..2, 2..3]);
    }

    #[test]
    fn unknown_syllable_is_named() {
        let score = MusicalScore::new(120.0, vec![NoteEvent::note("blorp", 60, 1.0)]).unwrap();
        let err = score_to_tokens(&score, &lex(), FRAME_SHIFT_S).unwrap_err();
        assert_eq!(err, ScoreError::UnknownSyllable("blorp".into()));
        assert!(err.to_string().contains("blorp"));
    }

    #[test]
    fn constructor_checks_invariants() {
        assert!(PhonemeTokenSequence::new(vec![], vec![], vec![], vec![], None).is_err());
        assert!(PhonemeTokenSequence::new(vec![2, 3], vec![60, 60], vec![5, 5], vec![0..1], None).is_err());
        assert!(PhonemeTokenSequence::new(vec![2], vec![60], vec![0], vec![0..1], None).is_err());
        assert!(PhonemeTokenSequence::new(vec![2], vec![0], vec![4], vec![0..1], None).is_err());
        assert!(PhonemeTokenSequence::new(vec![1], vec![60], vec![4], vec![0..1], None).is_err());
        assert!(PhonemeTokenSequence::new(vec![2], vec![60], vec![4], vec![0..1], Some(vec![0])).is_err());
        let ok = PhonemeTokenSequence::new(vec![2, 1], vec![60, 0], vec![4, 3], vec![0..1, 1..2], Some(vec![4, 3]))
            .unwrap();
        assert_eq!(ok.total_frames(), Some(7));
    }

    proptest! {
        #[test]
        fn tokens_satisfy_invariants(score in arbitrary_score()) {
            let lex = lex();
            let (t, notes) = tokenize_with_notes(&score, &lex, FRAME_SHIFT_S).unwrap();
            let covered: usize = t.syllable_spans().iter().map(|s| s.len()).sum();
            prop_assert_eq!(covered, t.len());
            prop_assert_eq!(notes.len(), score.events().len());
            prop_assert_eq!(notes.last().unwrap().end, t.len());
            for i in 0..t.len() {
                prop_assert_eq!(t.pitch_ids()[i] == 0, t.is_silence(i));
                prop_assert!(t.note_frame_counts()[i] >= 1);
            }
            // Rebuilding through the validating constructor must succeed.
            prop_assert!(PhonemeTokenSequence::new(
                t.phoneme_ids().to_vec(),
                t.pitch_ids().to_vec(),
                t.note_frame_counts().to_vec(),
                t.syllable_spans().to_vec(),
                None,
            ).is_ok());
        }
    }
}
