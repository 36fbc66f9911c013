//! Corpus ingestion, vocabulary, tagging and synthetic corpora.

mod synth;
mod vocab;

pub use synth::{synth_corpora, synth_text, SynthConfig, Templates, TextCorpora};
pub use vocab::{Lang, Origin, SentenceRecord, Vocabulary, BOS, EOS, NUM_SPECIALS, PAD, UNK};

use crate::error::Result;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Default sentence cap, counted in tokens including BOS and EOS.
pub const DEFAULT_MAX_LEN: usize = 45;

/// The corpora used across both stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSet {
    pub matrix: Vec<SentenceRecord>,
    pub embedded: Vec<SentenceRecord>,
    pub real_cs: Vec<SentenceRecord>,
    /// Stage-1 transfers of matrix sentences, empty until generated.
    pub negatives: Vec<SentenceRecord>,
}

impl CorpusSet {
    pub fn encode<S: AsRef<str>>(
        vocab: &Vocabulary,
        matrix: &[S],
        embedded: &[S],
        real_cs: &[S],
        max_len: usize,
    ) -> Self {
        CorpusSet {
            matrix: encode_lines(vocab, matrix, max_len, Origin::MatrixCorpus),
            embedded: encode_lines(vocab, embedded, max_len, Origin::EmbeddedCorpus),
            real_cs: encode_lines(vocab, real_cs, max_len, Origin::RealCs),
            negatives: Vec::new(),
        }
    }
}

pub fn encode_lines<S: AsRef<str>>(
    vocab: &Vocabulary,
    lines: &[S],
    max_len: usize,
    origin: Origin,
) -> Vec<SentenceRecord> {
    lines
        .iter()
        .map(|l| vocab.encode_sentence(l.as_ref(), max_len, origin))
        .collect()
}

/// Reads a UTF-8 corpus file, one sentence per line. Blank lines are dropped.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Writes one sentence per line, LF terminated.
pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Hex SHA-256 of a sequence of lines, as written by [`write_lines`].
pub fn hash_lines<S: AsRef<str>>(lines: &[S]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loading_is_order_preserving_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let lines = vec!["b a".to_string(), "c".to_string(), "a a".to_string()];
        write_lines(&path, &lines).unwrap();
        let first = read_lines(&path).unwrap();
        assert_eq!(first, lines);
        write_lines(&path, &first).unwrap();
        assert_eq!(read_lines(&path).unwrap(), first);
        assert_eq!(hash_lines(&first), hash_lines(&lines));
    }
}
