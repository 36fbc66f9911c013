//! Deterministic synthetic bilingual corpora.
//!
//! Each language draws words from per-category lexicons and fills template
//! frames whose word orders differ between languages (subject-verb-object
//! for the matrix side, subject-object-verb for the embedded side by
//! default). Code-switched sentences take a matrix frame and replace each
//! word, with probability `p_sw`, by its aligned embedded word of the same
//! category.

use super::vocab::Vocabulary;
use super::{CorpusSet, DEFAULT_MAX_LEN};
use crate::error::{CsError, Result};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};

const MIN_LEXICON: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub matrix: Vec<String>,
    pub embedded: Vec<String>,
}

impl Default for Templates {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Templates {
            matrix: own(&[
                "DET NOUN VERB DET NOUN",
                "DET ADJ NOUN VERB DET NOUN",
                "PRON VERB DET NOUN",
                "DET NOUN VERB PREP DET NOUN",
                "PRON VERB DET ADJ NOUN",
            ]),
            embedded: own(&[
                "DET NOUN DET NOUN VERB",
                "DET ADJ NOUN DET NOUN VERB",
                "PRON DET NOUN VERB",
                "DET NOUN DET NOUN PREP VERB",
                "PRON DET ADJ NOUN VERB",
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size_m: usize,
    pub vocab_size_e: usize,
    #[serde(default)]
    pub templates: Templates,
    pub p_sw: f64,
    #[serde(default)]
    pub seed: u64,
    /// Sentences per monolingual corpus.
    #[serde(default = "default_n_sentences")]
    pub n_sentences: usize,
    /// Size of the code-switched corpus; a quarter of `n_sentences` when absent.
    #[serde(default)]
    pub n_cs: Option<usize>,
    #[serde(default = "default_prefix_m")]
    pub prefix_m: String,
    #[serde(default = "default_prefix_e")]
    pub prefix_e: String,
}

fn default_n_sentences() -> usize {
    1000
}

fn default_prefix_m() -> String {
    "m_".into()
}

fn default_prefix_e() -> String {
    "e_".into()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size_m: 40,
            vocab_size_e: 40,
            templates: Templates::default(),
            p_sw: 0.3,
            seed: 7,
            n_sentences: default_n_sentences(),
            n_cs: None,
            prefix_m: default_prefix_m(),
            prefix_e: default_prefix_e(),
        }
    }
}

/// Raw sentences of the three corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCorpora {
    pub matrix: Vec<String>,
    pub embedded: Vec<String>,
    pub real_cs: Vec<String>,
}

struct Lexicon {
    words: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    fn new(categories: &BTreeSet<String>, size: usize, prefix: &str) -> Self {
        let n = categories.len();
        let words = categories
            .iter()
            .enumerate()
            .map(|(i, cat)| {
                let count = size / n + usize::from(i < size % n);
                let lower = cat.to_lowercase();
                (
                    cat.clone(),
                    (0..count).map(|j| format!("{prefix}{lower}{j}")).collect(),
                )
            })
            .collect();
        Lexicon { words }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.words.values().flatten()
    }
}

/// Zipf-like index sampler per category, so rare words exist.
fn samplers(lex: &Lexicon) -> BTreeMap<String, WeightedIndex<f64>> {
    lex.words
        .iter()
        .map(|(cat, w)| {
            let weights: Vec<f64> = (0..w.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
            (
                cat.clone(),
                WeightedIndex::new(weights).expect("nonempty positive weights"),
            )
        })
        .collect()
}

fn parse_templates(list: &[String], side: &str) -> Result<Vec<Vec<String>>> {
    if list.is_empty() {
        return Err(CsError::config(format!("synth: no {side} templates")));
    }
    list.iter()
        .map(|t| {
            let slots: Vec<String> = t.split_whitespace().map(str::to_string).collect();
            if slots.is_empty() {
                Err(CsError::config(format!("synth: empty {side} template")))
            } else {
                Ok(slots)
            }
        })
        .collect()
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size_m < MIN_LEXICON || self.vocab_size_e < MIN_LEXICON {
            return Err(CsError::config(format!(
                "synth: each toy vocabulary needs at least {MIN_LEXICON} tokens"
            )));
        }
        if !(0.0..=1.0).contains(&self.p_sw) {
            return Err(CsError::config(format!(
                "synth: p_sw {} outside [0, 1]",
                self.p_sw
            )));
        }
        if self.prefix_m.is_empty()
            || self.prefix_e.is_empty()
            || self.prefix_m.starts_with(&self.prefix_e)
            || self.prefix_e.starts_with(&self.prefix_m)
        {
            return Err(CsError::config(
                "synth: prefix_m and prefix_e must be non-empty and not prefixes of each other",
            ));
        }
        Ok(())
    }
}

/// Generates the three text corpora; identical for identical `seed`,
/// `n_sentences` and `cfg`.
pub fn synth_text(seed: u64, n_sentences: usize, cfg: &SynthConfig) -> Result<TextCorpora> {
    cfg.validate()?;
    let m_frames = parse_templates(&cfg.templates.matrix, "matrix")?;
    let e_frames = parse_templates(&cfg.templates.embedded, "embedded")?;
    let categories: BTreeSet<String> = m_frames
        .iter()
        .chain(&e_frames)
        .flatten()
        .cloned()
        .collect();
    if categories.len() > cfg.vocab_size_m.min(cfg.vocab_size_e) {
        return Err(CsError::config(
            "synth: more template categories than words",
        ));
    }
    let m_lex = Lexicon::new(&categories, cfg.vocab_size_m, &cfg.prefix_m);
    let e_lex = Lexicon::new(&categories, cfg.vocab_size_e, &cfg.prefix_e);
    let m_words: HashSet<&String> = m_lex.all().collect();
    if let Some(w) = e_lex.all().find(|w| m_words.contains(w)) {
        return Err(CsError::config(format!(
            "synth: toy vocabularies overlap on `{w}`"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_pick = samplers(&m_lex);
    let e_pick = samplers(&e_lex);

    let fill = |rng: &mut ChaCha8Rng,
                frames: &[Vec<String>],
                lex: &Lexicon,
                pick: &BTreeMap<String, WeightedIndex<f64>>| {
        let frame = &frames[rng.random_range(0..frames.len())];
        frame
            .iter()
            .map(|cat| (cat.clone(), pick[cat].sample(rng), &lex.words[cat]))
            .map(|(cat, i, words)| (cat, i, words[i].clone()))
            .collect::<Vec<_>>()
    };

    let matrix: Vec<String> = (0..n_sentences)
        .map(|_| join(fill(&mut rng, &m_frames, &m_lex, &m_pick)))
        .collect();
    let embedded: Vec<String> = (0..n_sentences)
        .map(|_| join(fill(&mut rng, &e_frames, &e_lex, &e_pick)))
        .collect();

    let n_cs = cfg.n_cs.unwrap_or(n_sentences / 4).max(1);
    let real_cs = (0..n_cs)
        .map(|_| {
            let slots = fill(&mut rng, &m_frames, &m_lex, &m_pick);
            slots
                .into_iter()
                .map(|(cat, i, word)| {
                    if rng.random_bool(cfg.p_sw) {
                        let aligned = &e_lex.words[&cat];
                        aligned[i % aligned.len()].clone()
                    } else {
                        word
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();

    Ok(TextCorpora {
        matrix,
        embedded,
        real_cs,
    })
}

fn join(slots: Vec<(String, usize, String)>) -> String {
    slots
        .into_iter()
        .map(|(_, _, w)| w)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Synthetic corpora encoded against a vocabulary built from them.
pub fn synth_corpora(
    seed: u64,
    n_sentences: usize,
    cfg: &SynthConfig,
) -> Result<(Vocabulary, CorpusSet)> {
    let text = synth_text(seed, n_sentences, cfg)?;
    let vocab = Vocabulary::build(&text.matrix, &text.embedded, &text.real_cs, 1)?;
    let set = CorpusSet::encode(
        &vocab,
        &text.matrix,
        &text.embedded,
        &text.real_cs,
        DEFAULT_MAX_LEN,
    );
    Ok((vocab, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Lang;
    use std::collections::HashMap;

    #[test]
    fn same_seed_same_corpora() {
        let cfg = SynthConfig::default();
        assert_eq!(
            synth_text(7, 200, &cfg).unwrap(),
            synth_text(7, 200, &cfg).unwrap()
        );
        assert_ne!(
            synth_text(7, 200, &cfg).unwrap(),
            synth_text(8, 200, &cfg).unwrap()
        );
    }

    #[test]
    fn zero_switch_rate_gives_monolingual_cs() {
        let cfg = SynthConfig {
            p_sw: 0.0,
            ..SynthConfig::default()
        };
        let (_, set) = synth_corpora(3, 200, &cfg).unwrap();
        assert!(set
            .real_cs
            .iter()
            .all(|r| r.tags.iter().all(|&t| t != Lang::Embedded)));
    }

    #[test]
    fn embedded_fraction_tracks_switch_rate() {
        let cfg = SynthConfig::default();
        let (_, set) = synth_corpora(11, 2000, &cfg).unwrap();
        let mut counts: HashMap<Lang, usize> = HashMap::new();
        for r in &set.real_cs {
            for &t in &r.tags {
                *counts.entry(t).or_default() += 1;
            }
        }
        let e = counts[&Lang::Embedded] as f64;
        let m = counts[&Lang::Matrix] as f64;
        assert!(
            (e / (e + m) - 0.3).abs() <= 0.03,
            "fraction {}",
            e / (e + m)
        );
    }

    #[test]
    fn monolingual_corpora_stay_in_their_language() {
        let (vocab, set) = synth_corpora(5, 300, &SynthConfig::default()).unwrap();
        assert!(set.matrix.iter().all(|r| !r.tags.contains(&Lang::Embedded)));
        assert!(set.embedded.iter().all(|r| !r.tags.contains(&Lang::Matrix)));
        assert!(set
            .real_cs
            .iter()
            .any(|r| r.tags.contains(&Lang::Matrix) && r.tags.contains(&Lang::Embedded)));
        assert_eq!(vocab.ids_of(Lang::Shared).count(), 0);
    }

    #[test]
    fn rejects_bad_configs() {
        let overlap = SynthConfig {
            prefix_e: "m_".into(),
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_text(1, 10, &overlap),
            Err(CsError::Config(_))
        ));
        let small = SynthConfig {
            vocab_size_e: 10,
            ..SynthConfig::default()
        };
        assert!(synth_text(1, 10, &small).is_err());
        let bad_p = SynthConfig {
            p_sw: 1.5,
            ..SynthConfig::default()
        };
        assert!(synth_text(1, 10, &bad_p).is_err());
    }

    #[test]
    fn config_json_uses_documented_keys() {
        let json = r#"{"vocab_size_m": 30, "vocab_size_e": 32, "p_sw": 0.2, "seed": 4,
            "templates": {"matrix": ["DET NOUN VERB"], "embedded": ["DET VERB NOUN"]}}"#;
        let cfg: SynthConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.vocab_size_e, 32);
        assert_eq!(cfg.templates.matrix.len(), 1);
        let t = synth_text(cfg.seed, 50, &cfg).unwrap();
        assert_eq!(t.matrix.len(), 50);
        assert!(t.matrix.iter().all(|s| s.split(' ').count() == 3));
    }
}
