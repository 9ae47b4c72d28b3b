//! Musical scores and their phoneme-level token representation.
//!
//! A score file is line oriented:
//!
//! ```text
//! # comment
//! tempo 120
//! la 69 1.0
//! la 71 0.5 ~
//! -  0  0.5
//! ```
//!
//! Each event line is `<syllable> <midi pitch> <beats> [~]`. A `-` syllable
//! is a rest and must carry pitch 0; a trailing `~` continues the previous
//! syllable onto a new note (a melisma).

mod lexicon;
mod tokens;

use std::fmt;
use std::str::FromStr;

pub use lexicon::{PhonemeLexicon, MAX_PHONEME_VOCAB, PAD_PHONEME, SILENCE_PHONEME};
pub use tokens::{score_to_tokens, tokenize_with_notes, PhonemeTokenSequence};

pub const REST_MARKER: &str = "-";
pub const CONTINUATION_MARKER: &str = "~";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid score: {0}")]
    Invalid(String),
    #[error("midi pitch 0 is a rest and has no frequency")]
    RestPitch,
    #[error("midi pitch {0} is outside 0..=127")]
    PitchRange(u32),
    #[error("syllable '{0}' is not in the lexicon")]
    UnknownSyllable(String),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("invalid token sequence: {0}")]
    Tokens(String),
}

/// One note (or rest) of a score.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteEvent {
    pub syllable: String,
    /// MIDI note number; 0 marks a rest.
    pub midi_pitch: u8,
    /// Length in quarter-note beats.
    pub beat_length: f64,
    /// This note continues the previous note's syllable.
    pub continuation: bool,
}

impl NoteEvent {
    pub fn note(syllable: &str, midi_pitch: u8, beat_length: f64) -> Self {
        Self {
            syllable: syllable.to_string(),
            midi_pitch,
            beat_length,
            continuation: false,
        }
    }

    pub fn rest(beat_length: f64) -> Self {
        Self::note(REST_MARKER, 0, beat_length)
    }

    pub fn continued(syllable: &str, midi_pitch: u8, beat_length: f64) -> Self {
        Self {
            continuation: true,
            ..Self::note(syllable, midi_pitch, beat_length)
        }
    }

    pub fn is_rest(&self) -> bool {
        self.syllable == REST_MARKER
    }
}

/// A validated monophonic score: tempo plus an ordered, non-empty event list.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicalScore {
    tempo_bpm: f64,
    events: Vec<NoteEvent>,
}

impl MusicalScore {
    pub fn new(tempo_bpm: f64, events: Vec<NoteEvent>) -> Result<Self, ScoreError> {
        check_tempo(tempo_bpm).map_err(ScoreError::Invalid)?;
        if events.is_empty() {
            return Err(ScoreError::Invalid("score has no events".into()));
        }
        for (i, event) in events.iter().enumerate() {
            let prev = i.checked_sub(1).map(|p| &events[p]);
            check_event(event, prev).map_err(|m| ScoreError::Invalid(format!("event {}: {m}", i + 1)))?;
        }
        Ok(Self { tempo_bpm, events })
    }

    pub fn tempo_bpm(&self) -> f64 {
        self.tempo_bpm
    }

    pub fn events(&self) -> &[NoteEvent] {
        &self.events
    }

    /// Serializes to the score file format; reparsing yields an equal score.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn check_tempo(tempo: f64) -> Result<(), String> {
    if !(tempo.is_finite() && tempo > 0.0) {
        return Err("tempo must be positive".into());
    }
    Ok(())
}

fn check_event(event: &NoteEvent, prev: Option<&NoteEvent>) -> Result<(), String> {
    let s = &event.syllable;
    if s.is_empty() || s.chars().any(char::is_whitespace) || s.starts_with('#') || s == CONTINUATION_MARKER {
        return Err(format!("invalid syllable {s:?}"));
    }
    if !(event.beat_length.is_finite() && event.beat_length > 0.0) {
        return Err("beat length must be positive".into());
    }
    if event.midi_pitch > 127 {
        return Err(format!("midi pitch {} is outside 0..=127", event.midi_pitch));
    }
    match (event.is_rest(), event.midi_pitch == 0) {
        (true, false) => return Err("a rest must have pitch 0".into()),
        (false, true) => return Err("pitch 0 is reserved for rests".into()),
        _ => {}
    }
    if event.continuation {
        if event.is_rest() {
            return Err("a rest cannot continue a syllable".into());
        }
        match prev {
            None => return Err("continuation on the first note has no syllable to continue".into()),
            Some(p) if p.is_rest() => {
                return Err("continuation after a rest has no syllable to continue".into())
            }
            Some(p) if p.syllable != event.syllable => {
                return Err(format!(
                    "continuation syllable '{}' does not match previous '{}'",
                    event.syllable, p.syllable
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

impl fmt::Display for MusicalScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tempo {}", self.tempo_bpm)?;
        for e in &self.events {
            write!(f, "{} {} {}", e.syllable, e.midi_pitch, e.beat_length)?;
            if e.continuation {
                write!(f, " {CONTINUATION_MARKER}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for MusicalScore {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_score(s)
    }
}

/// Parses score-file text into a validated [`MusicalScore`].
pub fn parse_score(text: &str) -> Result<MusicalScore, ScoreError> {
    let err = |line: usize, message: String| ScoreError::Parse { line, message };
    let mut tempo = None;
    let mut events: Vec<NoteEvent> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();

        let Some(_) = tempo else {
            if fields[0] != "tempo" {
                return Err(err(
                    line,
                    if fields.len() == 2 {
                        format!("unknown field '{}'", fields[0])
                    } else {
                        "expected 'tempo <bpm>' before any note".into()
                    },
                ));
            }
            if fields.len() != 2 {
                return Err(err(line, "expected 'tempo <bpm>'".into()));
            }
            let bpm: f64 = fields[1]
                .parse()
                .map_err(|_| err(line, format!("tempo '{}' is not a number", fields[1])))?;
            check_tempo(bpm).map_err(|m| err(line, m))?;
            tempo = Some(bpm);
            continue;
        };

        if fields[0] == "tempo" {
            return Err(err(line, "tempo may only be given once".into()));
        }
        if !(3..=4).contains(&fields.len()) {
            return Err(err(
                line,
                format!("expected '<syllable> <pitch> <beats> [~]', found {} fields", fields.len()),
            ));
        }
        let continuation = match fields.get(3) {
            None => false,
            Some(&CONTINUATION_MARKER) => true,
            Some(other) => return Err(err(line, format!("unknown field '{other}'"))),
        };
        let pitch: u32 = fields[1]
            .parse()
            .map_err(|_| err(line, format!("pitch '{}' is not an integer", fields[1])))?;
        if pitch > 127 {
            return Err(err(line, format!("midi pitch {pitch} is outside 0..=127")));
        }
        let beats: f64 = fields[2]
            .parse()
            .map_err(|_| err(line, format!("beat length '{}' is not a number", fields[2])))?;
        let event = NoteEvent {
            syllable: fields[0].to_string(),
            midi_pitch: pitch as u8,
            beat_length: beats,
            continuation,
        };
        check_event(&event, events.last()).map_err(|m| err(line, m))?;
        events.push(event);
    }

    let Some(tempo) = tempo else {
        return Err(err(text.lines().count().max(1), "missing 'tempo <bpm>' line".into()));
    };
    if events.is_empty() {
        return Err(err(text.lines().count().max(1), "score has no notes".into()));
    }
    Ok(MusicalScore { tempo_bpm: tempo, events })
}

/// Equal-tempered frequency of a MIDI note, A4 = 69 = 440 Hz.
pub fn midi_to_hz(midi_pitch: u8) -> Result<f64, ScoreError> {
    match midi_pitch {
        0 => Err(ScoreError::RestPitch),
        m if m > 127 => Err(ScoreError::PitchRange(m.into())),
        m => Ok(440.0 * 2f64.powf((f64::from(m) - 69.0) / 12.0)),
    }
}

/// Natural-log frequency of a pitched note.
pub fn midi_to_log_hz(midi_pitch: u8) -> Result<f64, ScoreError> {
    midi_to_hz(midi_pitch).map(f64::ln)
}

/// Note length in frames: `max(1, round_half_up(beats · 60 / bpm / shift))`.
pub fn beats_to_frames(beat_length: f64, tempo_bpm: f64, frame_shift_s: f64) -> usize {
    debug_assert!(beat_length > 0.0 && tempo_bpm > 0.0 && frame_shift_s > 0.0);
    let frames = beat_length * 60.0 / tempo_bpm / frame_shift_s;
    ((frames + 0.5).floor() as usize).max(1)
}


#[cfg(test)]
pub(crate) use tests::arbitrary_score;
