use crate::error::{CsError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const VOCAB_HEADER: &str = "CSVOCAB 1";

/// Language partition of a vocabulary entry, and the tag carried by tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Lang {
    Matrix,
    Embedded,
    Shared,
    Special,
}

impl Lang {
    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Matrix => "MATRIX",
            Lang::Embedded => "EMBEDDED",
            Lang::Shared => "SHARED",
            Lang::Special => "SPECIAL",
        }
    }

    /// The other of the two languages; shared and special tags are unchanged.
    pub fn swapped(self) -> Lang {
        match self {
            Lang::Matrix => Lang::Embedded,
            Lang::Embedded => Lang::Matrix,
            other => other,
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Lang {
    type Err = CsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MATRIX" => Ok(Lang::Matrix),
            "EMBEDDED" => Ok(Lang::Embedded),
            "SHARED" => Ok(Lang::Shared),
            "SPECIAL" => Ok(Lang::Special),
            other => Err(CsError::Format {
                what: "language tag",
                msg: format!("unknown tag `{other}`"),
            }),
        }
    }
}

/// Where a sentence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    MatrixCorpus,
    EmbeddedCorpus,
    RealCs,
    Generated,
}

/// Token ids of one sentence with a language tag per token. Ids start with
/// BOS and, unless the sentence hit the length cap while decoding, end with
/// EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub ids: Vec<usize>,
    pub tags: Vec<Lang>,
    pub origin: Origin,
}

impl SentenceRecord {
    /// Tags `ids` against `vocab`, resolving shared tokens to the matrix language.
    pub fn from_ids(ids: Vec<usize>, vocab: &Vocabulary, origin: Origin) -> Result<Self> {
        let tags = vocab.tag_tokens(&ids, Lang::Matrix)?;
        Ok(SentenceRecord { ids, tags, origin })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids with BOS/EOS/PAD removed.
    pub fn content_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .copied()
            .filter(|&id| id != BOS && id != EOS && id != PAD)
    }
}

/// Word-level vocabulary shared by both languages. Ids are dense; the four
/// special tokens occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    lang_of_id: Vec<Lang>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            lang_of_id: Vec::new(),
        };
        for tok in SPECIAL_TOKENS {
            v.push(tok.to_string(), Lang::Special);
        }
        v
    }

    fn push(&mut self, token: String, lang: Lang) -> usize {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.lang_of_id.push(lang);
        id
    }

    /// Builds a vocabulary from whitespace-tokenized lines. Tokens are
    /// counted over all three inputs and kept when the count reaches
    /// `min_count`. A token found in only one monolingual input takes that
    /// language; one found in both, or only in the code-switched input, is
    /// shared. Ids follow first appearance: matrix lines, then embedded, then
    /// code-switched.
    pub fn build<S: AsRef<str>>(
        matrix: &[S],
        embedded: &[S],
        cs: &[S],
        min_count: usize,
    ) -> Result<Self> {
        let nonempty = |lines: &[S]| lines.iter().any(|l| !l.as_ref().trim().is_empty());
        if !nonempty(matrix) || !nonempty(embedded) {
            return Err(CsError::config(
                "both monolingual inputs need at least one nonempty line",
            ));
        }

        let mut order: Vec<&str> = Vec::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut in_matrix: HashMap<&str, ()> = HashMap::new();
        let mut in_embedded: HashMap<&str, ()> = HashMap::new();
        for (lines, seen) in [
            (matrix, Some(&mut in_matrix)),
            (embedded, Some(&mut in_embedded)),
            (cs, None),
        ] {
            let mut seen = seen;
            for line in lines {
                for tok in line.as_ref().split_whitespace() {
                    let c = counts.entry(tok).or_insert(0);
                    if *c == 0 {
                        order.push(tok);
                    }
                    *c += 1;
                    if let Some(s) = seen.as_deref_mut() {
                        s.insert(tok, ());
                    }
                }
            }
        }

        let mut vocab = Vocabulary::with_specials();
        for tok in order {
            if counts[tok] < min_count || vocab.token_to_id.contains_key(tok) {
                continue;
            }
            let lang = match (in_matrix.contains_key(tok), in_embedded.contains_key(tok)) {
                (true, false) => Lang::Matrix,
                (false, true) => Lang::Embedded,
                _ => Lang::Shared,
            };
            vocab.push(tok.to_string(), lang);
        }
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn lang(&self, id: usize) -> Option<Lang> {
        self.lang_of_id.get(id).copied()
    }

    /// Ids whose partition is `lang`.
    pub fn ids_of(&self, lang: Lang) -> impl Iterator<Item = usize> + '_ {
        self.lang_of_id
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == lang)
            .map(|(i, _)| i)
    }

    /// Per-token language tags. Shared tokens resolve to `default_lang`;
    /// specials (including UNK) stay `Special`.
    pub fn tag_tokens(&self, ids: &[usize], default_lang: Lang) -> Result<Vec<Lang>> {
        ids.iter()
            .map(|&id| match self.lang_of_id.get(id) {
                Some(Lang::Shared) => Ok(default_lang),
                Some(&l) => Ok(l),
                None => Err(CsError::TokenOutOfRange {
                    id,
                    size: self.size(),
                }),
            })
            .collect()
    }

    /// BOS, the mapped tokens (UNK when unknown) cut to fit `max_len`, EOS.
    pub fn encode_sentence(&self, line: &str, max_len: usize, origin: Origin) -> SentenceRecord {
        let max_len = max_len.max(2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(
            line.split_whitespace()
                .take(max_len - 2)
                .map(|tok| self.id(tok).unwrap_or(UNK)),
        );
        ids.push(EOS);
        let tags = self
            .tag_tokens(&ids, Lang::Matrix)
            .expect("encoded ids come from this vocabulary");
        SentenceRecord { ids, tags, origin }
    }

    /// Space-joined tokens of the content ids.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `CSVOCAB 1` header, then `id \t token \t TAG` per entry.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for (id, (tok, lang)) in self.id_to_token.iter().zip(&self.lang_of_id).enumerate() {
            out.push_str(&format!("{id}\t{tok}\t{lang}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| CsError::Format {
            what: "vocabulary file",
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(bad(format!("missing `{VOCAB_HEADER}` header")));
        }
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            lang_of_id: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!(
                    "line {}: expected 3 tab-separated fields",
                    n + 2
                )));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            if id != vocab.size() {
                return Err(bad(format!(
                    "line {}: ids must be dense, expected {}",
                    n + 2,
                    vocab.size()
                )));
            }
            if vocab.token_to_id.contains_key(fields[1]) {
                return Err(bad(format!(
                    "line {}: duplicate token `{}`",
                    n + 2,
                    fields[1]
                )));
            }
            vocab.push(fields[1].to_string(), fields[2].parse()?);
        }
        for (id, tok) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.token(id) != Some(tok) || vocab.lang(id) != Some(Lang::Special) {
                return Err(bad(format!("id {id} must be the special token {tok}")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_vocabularies_partition_cleanly() {
        let v = Vocabulary::build(&["a b", "a"], &["x y"], &[] as &[&str], 1).unwrap();
        assert_eq!(v.size(), 8);
        assert_eq!(v.lang(v.id("a").unwrap()), Some(Lang::Matrix));
        assert_eq!(v.lang(v.id("x").unwrap()), Some(Lang::Embedded));
        for (id, tok) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(tok), Some(id));
            assert_eq!(v.lang(id), Some(Lang::Special));
        }
    }

    #[test]
    fn intersection_is_shared() {
        let v = Vocabulary::build(&["a b"], &["b c"], &[] as &[&str], 1).unwrap();
        assert_eq!(v.lang(v.id("b").unwrap()), Some(Lang::Shared));
    }

    #[test]
    fn cs_only_tokens_are_shared_and_known_tokens_keep_partition() {
        let v = Vocabulary::build(&["a"], &["x"], &["a x q"], 1).unwrap();
        assert_eq!(v.lang(v.id("q").unwrap()), Some(Lang::Shared));
        assert_eq!(v.lang(v.id("a").unwrap()), Some(Lang::Matrix));
        assert_eq!(v.lang(v.id("x").unwrap()), Some(Lang::Embedded));
    }

    #[test]
    fn empty_monolingual_input_is_a_config_error() {
        assert!(matches!(
            Vocabulary::build(&["", "  "], &["x"], &[] as &[&str], 1),
            Err(CsError::Config(_))
        ));
        assert!(Vocabulary::build(&["a"], &[] as &[&str], &[] as &[&str], 1).is_err());
    }

    #[test]
    fn encode_maps_and_tags() {
        let v = Vocabulary::build(&["a"], &["x"], &[] as &[&str], 1).unwrap();
        let r = v.encode_sentence("a x", 45, Origin::RealCs);
        assert_eq!(
            r.ids,
            vec![BOS, v.id("a").unwrap(), v.id("x").unwrap(), EOS]
        );
        assert_eq!(
            r.tags,
            vec![Lang::Special, Lang::Matrix, Lang::Embedded, Lang::Special]
        );
        let unk = v.encode_sentence("zzz", 45, Origin::RealCs);
        assert_eq!(unk.ids[1], UNK);
        assert_eq!(unk.tags[1], Lang::Special);
        assert_eq!(
            v.encode_sentence("", 45, Origin::RealCs).ids,
            vec![BOS, EOS]
        );
    }

    #[test]
    fn long_lines_are_truncated_to_max_len() {
        let line = vec!["a"; 60].join(" ");
        let v = Vocabulary::build(&[line.as_str()], &["x"], &[] as &[&str], 1).unwrap();
        let r = v.encode_sentence(&line, 45, Origin::MatrixCorpus);
        assert_eq!(r.ids.len(), 45);
        assert_eq!(r.content_ids().count(), 43);
        assert_eq!(r.ids[44], EOS);
    }

    #[test]
    fn shared_resolves_to_default_and_bad_ids_error() {
        let v = Vocabulary::build(&["a b"], &["b c"], &[] as &[&str], 1).unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(
            v.tag_tokens(&[b], Lang::Matrix).unwrap(),
            vec![Lang::Matrix]
        );
        assert_eq!(
            v.tag_tokens(&[b], Lang::Embedded).unwrap(),
            vec![Lang::Embedded]
        );
        assert!(matches!(
            v.tag_tokens(&[v.size()], Lang::Matrix),
            Err(CsError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn file_format_roundtrips() {
        let v = Vocabulary::build(&["a b"], &["b c"], &["d"], 1).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("CSVOCAB 1\n0\t<pad>\tSPECIAL\n"));
        assert!(text.contains("\tb\tSHARED\n"));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        assert!(Vocabulary::parse("CSVOCAB 2\n").is_err());
        assert!(Vocabulary::parse("CSVOCAB 1\n0\t<pad>\tSPECIAL\n2\tx\tMATRIX\n").is_err());
    }
}
