//! Synthetic training corpus: an oracle singer renders random scores into
//! ground-truth durations and features, written to disk with a manifest.
//!
//! Directory layout produced by [`generate_corpus`]:
//!
//! ```text
//! <out>/manifest.tsv        score, features, tokens, split (paths relative to <out>)
//! <out>/lexicon.txt         syllable → phonemes table used for tokenization
//! <out>/songs/song_NNNN.score | .feat | .tokens.tsv
//! ```

mod oracle;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::write_atomic;
use crate::features::{AcousticFeatureSequence, FeatureError};
use crate::score::{score_to_tokens, MusicalScore, NoteEvent, PhonemeLexicon, PhonemeTokenSequence, ScoreError};

pub use oracle::{oracle_sing, Oracle, OracleConfig, UNVOICED_BAP_DB, VOICED_BAP_DB};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LEXICON_FILE: &str = "lexicon.txt";
const MANIFEST_HEADER: &str = "score\tfeatures\ttokens\tsplit";
const TOKENS_HEADER: &str = "phoneme\tpitch\tnote_frames\tduration\tsyllable";

/// Tempos of generated songs; a small set keeps note lengths recurring.
pub const SONG_TEMPOS: [f64; 3] = [120.0, 150.0, 180.0];
pub const SONG_BEATS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const SONG_PITCH_RANGE: (u8, u8) = (55, 79);
pub const SONG_NOTE_RANGE: (usize, usize) = (5, 30);
const REST_PROBABILITY: f64 = 0.1;
const CONTINUATION_PROBABILITY: f64 = 0.1;
/// Share of songs assigned to training; the remainder is held out.
pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("oracle config: {0}")]
    Config(String),
    #[error("note of {frames} frames cannot hold {phonemes} phonemes")]
    NoteTooShort { frames: usize, phonemes: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("corpus validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub score: PathBuf,
    pub features: PathBuf,
    pub tokens: PathBuf,
    pub split: Split,
}

/// Manifest entries with paths relative to `root`, the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.score.display(),
                e.features.display(),
                e.tokens.display(),
                e.split.as_str()
            );
        }
        out
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let fmt = |line: usize, message: String| CorpusError::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(fmt(1, format!("expected header '{MANIFEST_HEADER}'"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [score, features, tokens, split] = fields[..] else {
                return Err(fmt(i + 1, format!("expected 4 fields, found {}", fields.len())));
            };
            let split = Split::parse(split).ok_or_else(|| fmt(i + 1, format!("unknown split '{split}'")))?;
            let entry = ManifestEntry {
                score: score.into(),
                features: features.into(),
                tokens: tokens.into(),
                split,
            };
            for p in [&entry.score, &entry.features, &entry.tokens] {
                if !root.join(p).is_file() {
                    return Err(fmt(i + 1, format!("missing file {}", p.display())));
                }
            }
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(fmt(1, "manifest lists no utterances".into()));
        }
        Ok(Self { root, entries })
    }
}

/// Token sidecar: one row per phoneme with its ground-truth duration and
/// syllable index.
pub fn tokens_to_text(tokens: &PhonemeTokenSequence, lexicon: &PhonemeLexicon) -> String {
    let durations = tokens.durations();
    let mut syllable_of = vec![0; tokens.len()];
    for (s, span) in tokens.syllable_spans().iter().enumerate() {
        syllable_of[span.clone()].fill(s);
    }
    let mut out = format!("{TOKENS_HEADER}\n");
    for i in 0..tokens.len() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            lexicon.name(tokens.phoneme_ids()[i]).unwrap_or("?"),
            tokens.pitch_ids()[i],
            tokens.note_frame_counts()[i],
            durations.map_or(0, |d| d[i]),
            syllable_of[i]
        );
    }
    out
}

pub fn tokens_from_text(text: &str, lexicon: &PhonemeLexicon) -> Result<PhonemeTokenSequence, String> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(TOKENS_HEADER) {
        return Err(format!("line 1: expected header '{TOKENS_HEADER}'"));
    }
    let (mut phonemes, mut pitches, mut frames, mut durations, mut spans) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::<std::ops::Range<usize>>::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| format!("line {}: {m}", i + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        let [ph, pitch, nf, dur, syl] = fields[..] else {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("'{s}': {e}")));
        phonemes.push(lexicon.id(ph).ok_or_else(|| err(format!("unknown phoneme '{ph}'")))?);
        pitches.push(num(pitch)?);
        frames.push(num(nf)?);
        durations.push(num(dur)?);
        let syl = num(syl)?;
        let at = phonemes.len() - 1;
        let open = spans.len();
        match spans.last_mut() {
            Some(span) if syl + 1 == open => span.end = at + 1,
            _ if syl == open => spans.push(at..at + 1),
            _ => return Err(err(format!("syllable index {syl} out of order"))),
        }
    }
    PhonemeTokenSequence::new(phonemes, pitches, frames, spans, Some(durations)).map_err(|e| e.to_string())
}

/// Random score drawn from the generator's distribution.
pub fn random_score<R: Rng + ?Sized>(rng: &mut R, lexicon: &PhonemeLexicon) -> MusicalScore {
    let syllables: Vec<&str> = lexicon.syllables().collect();
    let tempo = *SONG_TEMPOS.choose(rng).expect("tempos");
    let notes = rng.gen_range(SONG_NOTE_RANGE.0..=SONG_NOTE_RANGE.1);
    let mut events: Vec<NoteEvent> = Vec::with_capacity(notes);
    for _ in 0..notes {
        let beats = *SONG_BEATS.choose(rng).expect("beats");
        let roll: f64 = rng.gen();
        let pitch = rng.gen_range(SONG_PITCH_RANGE.0..=SONG_PITCH_RANGE.1);
        let previous = events.last().filter(|e| !e.is_rest()).map(|e| e.syllable.clone());
        let event = if roll < REST_PROBABILITY {
            NoteEvent::rest(beats)
        } else if let (true, Some(syl)) = (roll < REST_PROBABILITY + CONTINUATION_PROBABILITY, previous) {
            NoteEvent::continued(&syl, pitch, beats)
        } else {
            NoteEvent::note(syllables.choose(rng).expect("syllables"), pitch, beats)
        };
        events.push(event);
    }
    MusicalScore::new(tempo, events).expect("generated score is valid")
}

/// Number of training songs for a corpus of `n` (at least one).
pub fn train_count(n: usize) -> usize {
    ((n as f64 * TRAIN_FRACTION).floor() as usize).max(1).min(n)
}

/// Writes `n_songs` oracle-rendered songs and their manifest under `out`.
pub fn generate_corpus(
    n_songs: usize,
    seed: u64,
    oracle_config: &OracleConfig,
    out: &Path,
) -> Result<CorpusManifest, CorpusError> {
    if n_songs == 0 {
        return Err(CorpusError::Config("n_songs must be at least 1".into()));
    }
    let lexicon = PhonemeLexicon::builtin();
    let oracle = Oracle::new(oracle_config.clone(), lexicon.clone())?;
    let songs = out.join("songs");
    fs::create_dir_all(&songs).map_err(io_err(&songs))?;
    let write = |path: &Path, bytes: &[u8]| write_atomic(path, bytes).map_err(io_err(path));
    write(&out.join(LEXICON_FILE), lexicon.to_text().as_bytes())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = train_count(n_songs);
    let mut entries = Vec::with_capacity(n_songs);
    for i in 0..n_songs {
        let score = random_score(&mut rng, &lexicon);
        let (tokens, features) = oracle.sing(&score)?;
        let stem = format!("songs/song_{i:04}");
        let entry = ManifestEntry {
            score: format!("{stem}.score").into(),
            features: format!("{stem}.feat").into(),
            tokens: format!("{stem}.tokens.tsv").into(),
            split: if i < n_train { Split::Train } else { Split::Test },
        };
        write(&out.join(&entry.score), score.to_text().as_bytes())?;
        write(&out.join(&entry.features), &features.to_bytes())?;
        write(&out.join(&entry.tokens), tokens_to_text(&tokens, &lexicon).as_bytes())?;
        entries.push(entry);
    }
    let manifest = CorpusManifest {
        root: out.to_path_buf(),
        entries,
    };
    write(&manifest.path(), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// One loaded, validated training or evaluation example.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub name: String,
    pub score: MusicalScore,
    /// Carries ground-truth durations summing to `features.frames()`.
    pub tokens: PhonemeTokenSequence,
    pub features: AcousticFeatureSequence,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub lexicon: PhonemeLexicon,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Loads every manifest entry, validating each; all failures are
    /// reported together.
    pub fn load(manifest_path: &Path) -> Result<Self, CorpusError> {
        let manifest = CorpusManifest::load(manifest_path)?;
        let lexicon_path = manifest.root.join(LEXICON_FILE);
        let lexicon = match fs::read_to_string(&lexicon_path) {
            Ok(text) => PhonemeLexicon::parse(&text)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => PhonemeLexicon::builtin(),
            Err(e) => return Err(io_err(&lexicon_path)(e)),
        };
        let mut utterances = Vec::with_capacity(manifest.entries.len());
        let mut problems = Vec::new();
        for entry in &manifest.entries {
            match load_utterance(&manifest, entry, &lexicon) {
                Ok(u) => utterances.push(u),
                Err(e) => problems.push(format!("{}: {e}", entry.score.display())),
            }
        }
        if !problems.is_empty() {
            return Err(CorpusError::Validation(problems));
        }
        Ok(Self { lexicon, utterances })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }
}

fn load_utterance(manifest: &CorpusManifest, entry: &ManifestEntry, lexicon: &PhonemeLexicon) -> Result<Utterance, String> {
    let read = |p: &Path| fs::read_to_string(manifest.resolve(p)).map_err(|e| format!("{}: {e}", p.display()));
    let score: MusicalScore = read(&entry.score)?.parse().map_err(|e: ScoreError| e.to_string())?;
    let tokens = tokens_from_text(&read(&entry.tokens)?, lexicon).map_err(|e| format!("{}: {e}", entry.tokens.display()))?;
    let features = AcousticFeatureSequence::read(&manifest.resolve(&entry.features)).map_err(|e| e.to_string())?;
    let expected = score_to_tokens(&score, lexicon, crate::FRAME_SHIFT_S).map_err(|e| e.to_string())?;
    if expected.phoneme_ids() != tokens.phoneme_ids()
        || expected.pitch_ids() != tokens.pitch_ids()
        || expected.note_frame_counts() != tokens.note_frame_counts()
        || expected.syllable_spans() != tokens.syllable_spans()
    {
        return Err("token sidecar does not match the score".into());
    }
    let total = tokens.total_frames().unwrap_or(0);
    if total != features.frames() {
        return Err(format!("durations sum to {total} frames, features have {}", features.frames()));
    }
    let name = entry
        .score
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Utterance {
        name,
        score,
        tokens,
        features,
        split: entry.split,
    })
}
