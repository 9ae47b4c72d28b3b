use std::collections::HashSet;
use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::features::{AcousticFeatureSequence, BAP_DIM, MGC_DIM};
use crate::score::{midi_to_log_hz, tokenize_with_notes, MusicalScore, PhonemeLexicon, PhonemeTokenSequence};

/// BAP level on voiced frames, dB.
pub const VOICED_BAP_DB: f64 = -60.0;
/// BAP level on unvoiced frames, dB.
pub const UNVOICED_BAP_DB: f64 = 0.0;

/// Parameters of the deterministic synthetic singer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Seeds the per-phoneme MGC templates.
    pub seed: u64,
    pub vibrato_rate_hz: f64,
    /// Peak vibrato excursion in natural-log F0 units.
    pub vibrato_depth_log: f64,
    pub transition_frames: usize,
    /// Share of a note's frames given to the phonemes before its vowel.
    pub consonant_fraction: f64,
    /// Consonant phonemes that carry voicing.
    pub voiced_consonants: Vec<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vibrato_rate_hz: 5.5,
            vibrato_depth_log: 0.03,
            transition_frames: 3,
            consonant_fraction: 0.25,
            voiced_consonants: ["l", "m", "n", "r"].map(String::from).to_vec(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.consonant_fraction > 0.0 && self.consonant_fraction < 1.0) {
            return Err(CorpusError::Config(format!(
                "consonant_fraction {} outside (0, 1)",
                self.consonant_fraction
            )));
        }
        if !(self.vibrato_rate_hz.is_finite() && self.vibrato_depth_log.is_finite() && self.vibrato_depth_log >= 0.0) {
            return Err(CorpusError::Config("vibrato rate and depth must be finite, depth ≥ 0".into()));
        }
        Ok(())
    }
}

/// Maps scores to ground-truth phoneme durations and acoustic features.
#[derive(Debug, Clone)]
pub struct Oracle {
    config: OracleConfig,
    lexicon: PhonemeLexicon,
    /// Indexed by phoneme ID.
    templates: Vec<[f64; MGC_DIM]>,
    voiced_consonants: HashSet<usize>,
}

impl Oracle {
    pub fn new(config: OracleConfig, lexicon: PhonemeLexicon) -> Result<Self, CorpusError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let templates = (0..lexicon.vocab_size())
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.5..=0.5)))
            .collect();
        let voiced_consonants = config
            .voiced_consonants
            .iter()
            .filter_map(|p| lexicon.id(p))
            .collect();
        Ok(Self {
            config,
            lexicon,
            templates,
            voiced_consonants,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn lexicon(&self) -> &PhonemeLexicon {
        &self.lexicon
    }

    pub fn template(&self, phoneme_id: usize) -> &[f64; MGC_DIM] {
        &self.templates[phoneme_id]
    }

    /// Tokenizes `score` and renders its features. Each note's frames are
    /// split between its phonemes: consonants share
    /// `round(consonant_fraction · frames)`, the vowel takes the rest.
    pub fn sing(&self, score: &MusicalScore) -> Result<(PhonemeTokenSequence, AcousticFeatureSequence), CorpusError> {
        let (tokens, notes) = tokenize_with_notes(score, &self.lexicon, crate::FRAME_SHIFT_S)?;
        let mut durations = Vec::with_capacity(tokens.len());
        let mut voiced = Vec::with_capacity(tokens.len());
        for range in &notes {
            let frames = tokens.note_frame_counts()[range.start];
            durations.extend(self.split_note(frames, range.len())?);
            for i in range.clone() {
                let is_vowel = i + 1 == range.end;
                voiced.push(!tokens.is_silence(i) && (is_vowel || self.voiced_consonants.contains(&tokens.phoneme_ids()[i])));
            }
        }
        let features = self.render(&tokens, &notes, &durations, &voiced)?;
        Ok((tokens.with_durations(durations)?, features))
    }

    fn split_note(&self, frames: usize, phonemes: usize) -> Result<Vec<usize>, CorpusError> {
        let consonants = phonemes - 1;
        if consonants == 0 {
            return Ok(vec![frames]);
        }
        if frames < phonemes {
            return Err(CorpusError::NoteTooShort { frames, phonemes });
        }
        let share = (self.config.consonant_fraction * frames as f64).round() as usize;
        let share = share.clamp(consonants, frames - 1);
        let mut out: Vec<usize> = (0..consonants)
            .map(|c| share / consonants + usize::from(c < share % consonants))
            .collect();
        out.push(frames - share);
        Ok(out)
    }

    fn render(
        &self,
        tokens: &PhonemeTokenSequence,
        notes: &[Range<usize>],
        durations: &[usize],
        voiced: &[bool],
    ) -> Result<AcousticFeatureSequence, CorpusError> {
        let total: usize = durations.iter().sum();
        let mut mgc = Vec::with_capacity(total * MGC_DIM);
        let mut bap = Vec::with_capacity(total * BAP_DIM);
        let mut logf0 = Vec::with_capacity(total);
        let mut vuv = Vec::with_capacity(total);
        let step = 2.0 * PI * self.config.vibrato_rate_hz * crate::FRAME_SHIFT_S;
        let tf = self.config.transition_frames;
        let mut prev: Option<&[f64; MGC_DIM]> = None;
        for range in notes {
            let mut t_note = 0usize;
            for i in range.clone() {
                let pitch = tokens.pitch_ids()[i];
                let note_logf0 = if pitch == 0 { 0.0 } else { midi_to_log_hz(pitch as u8)? };
                let current = &self.templates[tokens.phoneme_ids()[i]];
                for k in 0..durations[i] {
                    match prev {
                        Some(before) if k < tf => {
                            let w = (k + 1) as f64 / (tf + 1) as f64;
                            mgc.extend(before.iter().zip(current).map(|(a, b)| (1.0 - w) * a + w * b));
                        }
                        _ => mgc.extend_from_slice(current),
                    }
                    if voiced[i] {
                        logf0.push(note_logf0 + self.config.vibrato_depth_log * (step * t_note as f64).sin());
                        vuv.push(1.0);
                        bap.extend([VOICED_BAP_DB; BAP_DIM]);
                    } else {
                        logf0.push(0.0);
                        vuv.push(0.0);
                        bap.extend([UNVOICED_BAP_DB; BAP_DIM]);
                    }
                    t_note += 1;
                }
                prev = Some(current);
            }
        }
        Ok(AcousticFeatureSequence::new(mgc, bap, logf0, vuv)?)
    }
}

/// Convenience wrapper building a one-off [`Oracle`].
pub fn oracle_sing(
    score: &MusicalScore,
    lexicon: &PhonemeLexicon,
    config: &OracleConfig,
) -> Result<(PhonemeTokenSequence, AcousticFeatureSequence), CorpusError> {
    Oracle::new(config.clone(), lexicon.clone())?.sing(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{midi_to_hz, parse_score};
    use proptest::prelude::*;

    fn sing(text: &str) -> (PhonemeTokenSequence, AcousticFeatureSequence) {
        oracle_sing(&parse_score(text).unwrap(), &PhonemeLexicon::builtin(), &OracleConfig::default()).unwrap()
    }

    #[test]
    fn consonant_fraction_split() {
        let (t, f) = sing("tempo 120\nla 69 1\n");
        assert_eq!(t.note_frame_counts(), &[33, 33]);
        assert_eq!(t.durations().unwrap(), &[8, 25]);
        assert_eq!(f.frames(), 33);
    }

    #[test]
    fn rest_is_silent() {
        let (t, f) = sing("tempo 120\n- 0 0.6\n");
        assert_eq!(t.durations().unwrap(), &[20]);
        assert!(f.vuv().iter().all(|&v| v == 0.0));
        assert!(f.logf0().iter().all(|&v| v == 0.0));
        assert!(f.bap().iter().all(|&v| v == UNVOICED_BAP_DB));
    }

    #[test]
    fn voicing_follows_phoneme_class() {
        // "shi": unvoiced sh then vowel; "la": voiced l then vowel.
        let (_, f) = sing("tempo 120\nshi 60 1\nla 60 1\n");
        assert_eq!(&f.vuv()[..8], &[0.0; 8]);
        assert!(f.vuv()[8..].iter().all(|&v| v == 1.0));
        assert_eq!(&f.bap()[..5], &[0.0; 5]);
        assert_eq!(&f.bap()[8 * 5..8 * 5 + 5], &[-60.0; 5]);
    }

    #[test]
    fn vibrato_is_note_relative_and_bounded() {
        let (_, f) = sing("tempo 120\na 69 2\n");
        let base = 440f64.ln();
        assert_eq!(f.logf0()[0], base);
        let step = 2.0 * PI * 5.5 * 0.015;
        for (t, &v) in f.logf0().iter().enumerate() {
            assert!((v - base - 0.03 * (step * t as f64).sin()).abs() < 1e-12);
            assert!((v - base).abs() <= 0.03);
        }
    }

    #[test]
    fn transitions_cross_fade_templates() {
        let lex = PhonemeLexicon::builtin();
        let oracle = Oracle::new(OracleConfig::default(), lex.clone()).unwrap();
        let (_, f) = oracle.sing(&parse_score("tempo 120\nla 69 1\n").unwrap()).unwrap();
        let l = oracle.template(lex.id("l").unwrap());
        let a = oracle.template(lex.id("a").unwrap());
        assert_eq!(f.mgc_row(0), l);
        for k in 0..3 {
            let w = (k + 1) as f64 / 4.0;
            for d in 0..MGC_DIM {
                assert!((f.mgc_row(8 + k)[d] - ((1.0 - w) * l[d] + w * a[d])).abs() < 1e-15);
            }
        }
        assert_eq!(f.mgc_row(11), a);
    }

    #[test]
    fn melisma_extends_vowel() {
        let (t, f) = sing("tempo 120\nla 69 1\nla 71 0.5 ~\n");
        assert_eq!(t.durations().unwrap(), &[8, 25, 17]);
        assert_eq!(f.frames(), 50);
        assert!((f.logf0()[33] - midi_to_hz(71).unwrap().ln()).abs() < 1e-12);
    }

    #[test]
    fn short_note_with_consonant_is_rejected() {
        let score = parse_score("tempo 300\nla 60 0.01\n").unwrap();
        let err = oracle_sing(&score, &PhonemeLexicon::builtin(), &OracleConfig::default());
        assert!(matches!(err, Err(CorpusError::NoteTooShort { .. })));
    }

    proptest! {
        #[test]
        fn durations_sum_to_frames_and_f0_stays_near_notes(
            score in crate::score::arbitrary_score(),
        ) {
            let lex = PhonemeLexicon::builtin();
            let config = OracleConfig::default();
            match oracle_sing(&score, &lex, &config) {
                Ok((t, f)) => {
                    let d = t.durations().unwrap();
                    prop_assert_eq!(d.iter().sum::<usize>(), f.frames());
                    prop_assert!(d.iter().all(|&v| v >= 1));
                    for (frame, &lf) in f.logf0().iter().enumerate() {
                        prop_assert!(lf.is_finite());
                        if f.vuv()[frame] == 1.0 {
                            prop_assert!(lf > midi_to_hz(1).unwrap().ln() - 0.03 - 1e-12);
                        }
                    }
                }
                Err(CorpusError::NoteTooShort { frames, phonemes }) => prop_assert!(frames < phonemes),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
