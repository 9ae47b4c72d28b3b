use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::ScoreError;

pub const PAD_PHONEME: &str = "<pad>";
pub const SILENCE_PHONEME: &str = "sil";
pub const MAX_PHONEME_VOCAB: usize = 72;

const DEMO_LEXICON: &str = include_str!("demo_lexicon.txt");

/// Syllable → phoneme mapping plus the phoneme vocabulary.
///
/// IDs: 0 is padding, 1 is silence, then the remaining phonemes in sorted
/// order. The last phoneme of every entry is the syllable's vowel nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeLexicon {
    entries: BTreeMap<String, Vec<String>>,
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
}

impl PhonemeLexicon {
    pub fn new<I>(entries: I) -> Result<Self, ScoreError>
    where
        I: IntoIterator<Item = (String, Vec<String>)>,
    {
        let mut map = BTreeMap::new();
        for (i, (syllable, phonemes)) in entries.into_iter().enumerate() {
            let bad = |message: String| ScoreError::Lexicon {
                line: i + 1,
                message,
            };
            if phonemes.is_empty() {
                return Err(bad(format!("syllable '{syllable}' has no phonemes")));
            }
            if let Some(p) = phonemes.iter().find(|p| *p == PAD_PHONEME || *p == SILENCE_PHONEME) {
                return Err(bad(format!("reserved phoneme '{p}' in entry '{syllable}'")));
            }
            if map.insert(syllable.clone(), phonemes).is_some() {
                return Err(bad(format!("duplicate syllable '{syllable}'")));
            }
        }
        let names: BTreeSet<&String> = map.values().flatten().collect();
        let mut vocab = vec![PAD_PHONEME.to_string(), SILENCE_PHONEME.to_string()];
        vocab.extend(names.into_iter().cloned());
        if vocab.len() > MAX_PHONEME_VOCAB {
            return Err(ScoreError::Lexicon {
                line: 0,
                message: format!(
                    "{} phonemes exceed the vocabulary limit of {MAX_PHONEME_VOCAB}",
                    vocab.len()
                ),
            });
        }
        let ids = vocab.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(Self {
            entries: map,
            vocab,
            ids,
        })
    }

    /// Parses `<syllable>\t<ph1> <ph2> ...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ScoreError> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim_end();
            if content.trim().is_empty() {
                continue;
            }
            let Some((syllable, phonemes)) = content.split_once('\t') else {
                return Err(ScoreError::Lexicon {
                    line,
                    message: "expected '<syllable>\\t<phonemes>'".into(),
                });
            };
            let syllable = syllable.trim().to_string();
            let phonemes: Vec<String> = phonemes.split_whitespace().map(str::to_string).collect();
            if syllable.is_empty() || phonemes.is_empty() {
                return Err(ScoreError::Lexicon {
                    line,
                    message: "empty syllable or phoneme list".into(),
                });
            }
            if !seen.insert(syllable.clone()) {
                return Err(ScoreError::Lexicon {
                    line,
                    message: format!("duplicate syllable '{syllable}'"),
                });
            }
            entries.push((syllable, phonemes));
        }
        Self::new(entries)
    }

    /// The small demo lexicon shipped with the crate (40 toneless pinyin
    /// syllables).
    pub fn builtin() -> Self {
        Self::parse(DEMO_LEXICON).expect("demo lexicon is valid")
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(s, p)| format!("{s}\t{}\n", p.join(" ")))
            .collect()
    }

    pub fn phonemes(&self, syllable: &str) -> Option<&[String]> {
        self.entries.get(syllable).map(Vec::as_slice)
    }

    pub fn syllables(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn id(&self, phoneme: &str) -> Option<usize> {
        self.ids.get(phoneme).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn silence_id(&self) -> usize {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_vocab_layout() {
        let lex = PhonemeLexicon::builtin();
        assert_eq!(lex.syllables().count(), 40);
        assert_eq!(lex.name(0), Some(PAD_PHONEME));
        assert_eq!(lex.id(SILENCE_PHONEME), Some(lex.silence_id()));
        assert!(lex.vocab_size() <= MAX_PHONEME_VOCAB);
        for s in lex.syllables() {
            for p in lex.phonemes(s).unwrap() {
                assert!(lex.id(p).is_some(), "{p} missing from vocab");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let lex = PhonemeLexicon::builtin();
        assert_eq!(PhonemeLexicon::parse(&lex.to_text()).unwrap(), lex);
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(PhonemeLexicon::parse("la l a\n").is_err());
        assert!(PhonemeLexicon::parse("la\tl a\nla\tl a\n").is_err());
        assert!(PhonemeLexicon::parse("la\tsil\n").is_err());
        let many: String = (0..80).map(|i| format!("s{i}\tp{i}\n")).collect();
        assert!(PhonemeLexicon::parse(&many).is_err());
    }
}
