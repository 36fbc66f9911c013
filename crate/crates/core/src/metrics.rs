//! Code-switching metrics over token language tags.
//!
//! All four metrics treat the corpus as a set of utterances: tags are pooled
//! for the proportion-based metrics, while switches and monolingual spans are
//! only counted inside an utterance.

use crate::corpus::{Lang, SentenceRecord, Vocabulary};
use crate::error::{CsError, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Two-language tag sequence with utterance boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    tags: Vec<Lang>,
    /// Exclusive end offset of each utterance, ascending, last == tags.len().
    ends: Vec<usize>,
}

impl TagStream {
    /// `tags` split into utterances at `ends` (exclusive end offsets).
    pub fn new(tags: Vec<Lang>, ends: Vec<usize>) -> Result<Self> {
        if let Some(bad) = tags
            .iter()
            .find(|t| !matches!(t, Lang::Matrix | Lang::Embedded))
        {
            return Err(metric_err(
                "tag_stream",
                format!("tag {bad} must be resolved before metrics"),
            ));
        }
        let sorted = ends.windows(2).all(|w| w[0] <= w[1]);
        if !sorted || ends.last().copied().unwrap_or(0) != tags.len() {
            return Err(metric_err(
                "tag_stream",
                "utterance ends must be sorted and cover the stream",
            ));
        }
        Ok(TagStream { tags, ends })
    }

    /// A single utterance.
    pub fn single(tags: Vec<Lang>) -> Result<Self> {
        let n = tags.len();
        Self::new(tags, vec![n])
    }

    /// Concatenates utterances, dropping empty ones.
    pub fn from_utterances<I, U>(utterances: I) -> Result<Self>
    where
        I: IntoIterator<Item = U>,
        U: AsRef<[Lang]>,
    {
        let mut tags = Vec::new();
        let mut ends = Vec::new();
        for u in utterances {
            let u = u.as_ref();
            if u.is_empty() {
                continue;
            }
            tags.extend_from_slice(u);
            ends.push(tags.len());
        }
        Self::new(tags, ends)
    }

    pub fn tags(&self) -> &[Lang] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn n_utterances(&self) -> usize {
        self.ends
            .iter()
            .zip(std::iter::once(&0).chain(&self.ends))
            .filter(|(e, s)| e > s)
            .count()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &[Lang]> {
        let starts = std::iter::once(0).chain(self.ends.iter().copied());
        starts
            .zip(self.ends.iter().copied())
            .map(move |(s, e)| &self.tags[s..e])
    }

    /// Same stream with the two languages exchanged.
    pub fn swapped(&self) -> Self {
        TagStream {
            tags: self.tags.iter().map(|t| t.swapped()).collect(),
            ends: self.ends.clone(),
        }
    }

    fn proportions(&self, metric: &'static str) -> Result<[f64; 2]> {
        if self.tags.is_empty() {
            return Err(metric_err(metric, "empty tag stream"));
        }
        let m = self.tags.iter().filter(|&&t| t == Lang::Matrix).count() as f64;
        let n = self.tags.len() as f64;
        Ok([m / n, (n - m) / n])
    }

    /// (adjacent pairs, switching pairs) within utterances.
    fn pair_counts(&self) -> (usize, usize) {
        self.utterances().fold((0, 0), |(pairs, switches), u| {
            let sw = u.windows(2).filter(|w| w[0] != w[1]).count();
            (pairs + u.len().saturating_sub(1), switches + sw)
        })
    }

    /// Lengths of maximal same-language runs within utterances.
    fn span_lengths(&self) -> Vec<usize> {
        let mut spans = Vec::new();
        for u in self.utterances() {
            let mut run = 0;
            for (i, t) in u.iter().enumerate() {
                if i > 0 && *t != u[i - 1] {
                    spans.push(run);
                    run = 0;
                }
                run += 1;
            }
            if run > 0 {
                spans.push(run);
            }
        }
        spans
    }
}

fn metric_err(metric: &'static str, msg: impl Into<String>) -> CsError {
    CsError::Metric {
        metric,
        msg: msg.into(),
    }
}

/// Multilingual index: (1 - sum p_j^2) / ((k - 1) sum p_j^2) with k = 2.
pub fn m_index(stream: &TagStream) -> Result<f64> {
    let p = stream.proportions("m_index")?;
    let sq: f64 = p.iter().map(|x| x * x).sum();
    Ok((1.0 - sq) / sq)
}

/// Shannon entropy of the language proportions, in bits.
pub fn language_entropy(stream: &TagStream) -> Result<f64> {
    let p = stream.proportions("language_entropy")?;
    Ok(0.0
        - p.iter()
            .filter(|&&x| x > 0.0)
            .map(|x| x * x.log2())
            .sum::<f64>())
}

/// Fraction of adjacent within-utterance token pairs whose languages differ.
pub fn i_index(stream: &TagStream) -> Result<f64> {
    let (pairs, switches) = stream.pair_counts();
    if pairs == 0 {
        return Err(metric_err("i_index", "no adjacent token pairs"));
    }
    Ok(switches as f64 / pairs as f64)
}

/// (sigma - mu) / (sigma + mu) over monolingual span lengths, population
/// statistics. `None` when fewer than two spans exist.
pub fn burstiness(stream: &TagStream) -> Option<f64> {
    let spans = stream.span_lengths();
    if spans.len() < 2 {
        return None;
    }
    let n = spans.len() as f64;
    let mu = spans.iter().sum::<usize>() as f64 / n;
    let var = spans.iter().map(|&s| (s as f64 - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    Some((sigma - mu) / (sigma + mu))
}

/// Corpus-level metrics for one set of sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsMetricsReport {
    pub m_index: f64,
    pub lang_entropy: f64,
    pub i_index: f64,
    /// `None` is reported as UNDEFINED.
    pub burstiness: Option<f64>,
    pub n_tokens: usize,
    pub n_switches: usize,
    pub n_spans: usize,
}

impl CsMetricsReport {
    pub fn from_stream(stream: &TagStream) -> Result<Self> {
        let (_, switches) = stream.pair_counts();
        Ok(CsMetricsReport {
            m_index: m_index(stream)?,
            lang_entropy: language_entropy(stream)?,
            i_index: i_index(stream)?,
            burstiness: burstiness(stream),
            n_tokens: stream.len(),
            n_switches: switches,
            n_spans: stream.span_lengths().len(),
        })
    }

    /// Metric values in [`Metric::ALL`] order.
    pub fn values(&self) -> [Option<f64>; 4] {
        [
            Some(self.m_index),
            Some(self.lang_entropy),
            Some(self.i_index),
            self.burstiness,
        ]
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values()[metric as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MIndex = 0,
    LangEntropy = 1,
    IIndex = 2,
    Burstiness = 3,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::MIndex,
        Metric::LangEntropy,
        Metric::IIndex,
        Metric::Burstiness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MIndex => "m_index",
            Metric::LangEntropy => "lang_entropy",
            Metric::IIndex => "i_index",
            Metric::Burstiness => "burstiness",
        }
    }
}

/// Tag stream of a corpus: specials dropped, shared tokens resolved to
/// `default_lang`, one utterance per record.
pub fn corpus_stream(
    records: &[SentenceRecord],
    vocab: &Vocabulary,
    default_lang: Lang,
) -> Result<TagStream> {
    let mut utterances = Vec::with_capacity(records.len());
    for r in records {
        let tags = vocab.tag_tokens(&r.ids, default_lang)?;
        utterances.push(
            tags.into_iter()
                .filter(|&t| t != Lang::Special)
                .collect::<Vec<_>>(),
        );
    }
    TagStream::from_utterances(utterances)
}

pub fn corpus_report(
    records: &[SentenceRecord],
    vocab: &Vocabulary,
    default_lang: Lang,
) -> Result<CsMetricsReport> {
    let stream = corpus_stream(records, vocab, default_lang)?;
    if stream.is_empty() {
        return Err(metric_err(
            "corpus_report",
            "corpus has no non-special tokens",
        ));
    }
    CsMetricsReport::from_stream(&stream)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "UNDEFINED".to_string(), |x| format!("{x:.6}"))
}

pub const REPORT_CSV_HEADER: &str =
    "corpus,m_index,lang_entropy,i_index,burstiness,n_tokens,n_switches,n_spans";

/// One CSV row per named report, with [`REPORT_CSV_HEADER`].
pub fn reports_csv<'a>(
    reports: impl IntoIterator<Item = (&'a str, &'a CsMetricsReport)>,
) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for (name, r) in reports {
        let _ = writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{},{},{},{}",
            r.m_index,
            r.lang_entropy,
            r.i_index,
            fmt_opt(r.burstiness),
            r.n_tokens,
            r.n_switches,
            r.n_spans
        );
    }
    out
}

/// A candidate's metrics, distances to the reference and per-metric ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub report: CsMetricsReport,
    /// |candidate - reference| per metric in [`Metric::ALL`] order; `None`
    /// when the candidate's burstiness is undefined.
    pub distances: [Option<f64>; 4],
    /// 1-based rank by distance per metric (ties share the lower rank);
    /// `None` where the distance is undefined.
    pub ranks: [Option<usize>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference_name: String,
    pub reference: CsMetricsReport,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Candidate names ordered by distance on `metric`, undefined last.
    pub fn ranking(&self, metric: Metric) -> Vec<&str> {
        let i = metric as usize;
        let mut rows: Vec<&ComparisonRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| match (a.distances[i], b.distances[i]) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        rows.into_iter().map(|r| r.name.as_str()).collect()
    }

    /// Reference row first (distance 0), then candidates in input order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "corpus,m_index,lang_entropy,i_index,burstiness,n_tokens,n_switches,n_spans",
        );
        for m in Metric::ALL {
            let _ = write!(out, ",distance_{}", m.name());
        }
        out.push_str(",burstiness_undefined\n");
        let zero = [Some(0.0); 4];
        let reference = std::iter::once((&self.reference_name, &self.reference, zero));
        let rows = self.rows.iter().map(|r| (&r.name, &r.report, r.distances));
        for (name, r, d) in reference.chain(rows) {
            let _ = write!(
                out,
                "{name},{:.6},{:.6},{:.6},{},{},{},{}",
                r.m_index,
                r.lang_entropy,
                r.i_index,
                fmt_opt(r.burstiness),
                r.n_tokens,
                r.n_switches,
                r.n_spans
            );
            for v in d {
                let _ = write!(out, ",{}", fmt_opt(v));
            }
            let _ = writeln!(out, ",{}", r.burstiness.is_none());
        }
        out
    }
}

/// Absolute per-metric distances of each candidate to `reference`.
pub fn compare_reports(
    candidates: &[(String, CsMetricsReport)],
    reference_name: &str,
    reference: &CsMetricsReport,
) -> Result<ComparisonTable> {
    if candidates.is_empty() {
        return Err(metric_err("compare_reports", "no candidate reports"));
    }
    if reference.burstiness.is_none() {
        return Err(metric_err(
            "compare_reports",
            "reference burstiness is undefined",
        ));
    }
    let ref_vals = reference.values();
    let mut rows: Vec<ComparisonRow> = candidates
        .iter()
        .map(|(name, rep)| {
            let vals = rep.values();
            let mut distances = [None; 4];
            for i in 0..4 {
                distances[i] = match (vals[i], ref_vals[i]) {
                    (Some(a), Some(b)) => Some((a - b).abs()),
                    _ => None,
                };
            }
            ComparisonRow {
                name: name.clone(),
                report: rep.clone(),
                distances,
                ranks: [None; 4],
            }
        })
        .collect();
    for i in 0..4 {
        let all: Vec<Option<f64>> = rows.iter().map(|r| r.distances[i]).collect();
        for row in rows.iter_mut() {
            row.ranks[i] =
                row.distances[i].map(|d| 1 + all.iter().flatten().filter(|&&o| o < d).count());
        }
    }
    Ok(ComparisonTable {
        reference_name: reference_name.to_string(),
        reference: reference.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Lang::{Embedded as E, Matrix as M};

    fn s(tags: &[Lang]) -> TagStream {
        TagStream::single(tags.to_vec()).unwrap()
    }

    #[test]
    fn monolingual_floor() {
        let st = s(&[M, M, M, M]);
        assert_eq!(m_index(&st).unwrap(), 0.0);
        assert_eq!(language_entropy(&st).unwrap(), 0.0);
        assert_eq!(i_index(&st).unwrap(), 0.0);
        assert_eq!(burstiness(&st), None);
    }

    #[test]
    fn balanced_and_alternating() {
        let st = s(&[M, E, M, E]);
        assert!((m_index(&st).unwrap() - 1.0).abs() < 1e-12);
        assert!((language_entropy(&st).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(i_index(&st).unwrap(), 1.0);
        assert_eq!(burstiness(&st), Some(-1.0));
    }

    #[test]
    fn worked_example() {
        // counts: 3 M, 2 E; pairs mm, me, em, me; spans 2,1,1,1
        let st = s(&[M, M, E, M, E]);
        assert!((m_index(&st).unwrap() - 0.48 / 0.52).abs() < 1e-12);
        assert!((language_entropy(&st).unwrap() - 0.9710).abs() < 1e-4);
        assert_eq!(i_index(&st).unwrap(), 0.75);
        let sigma = (0.1875f64).sqrt();
        assert!((burstiness(&st).unwrap() - (sigma - 1.25) / (sigma + 1.25)).abs() < 1e-12);
        assert!((burstiness(&st).unwrap() + 0.4854).abs() < 1e-4);
    }

    #[test]
    fn switches_do_not_cross_utterances() {
        let st = TagStream::from_utterances([vec![M, M], vec![E, E]]).unwrap();
        assert_eq!(i_index(&st).unwrap(), 0.0);
        assert_eq!(st.span_lengths(), vec![2, 2]);
        assert_eq!(st.n_utterances(), 2);
    }

    #[test]
    fn errors_and_validation() {
        let empty = TagStream::from_utterances(Vec::<Vec<Lang>>::new()).unwrap();
        assert!(m_index(&empty).is_err());
        assert!(language_entropy(&empty).is_err());
        assert!(i_index(&s(&[M])).is_err());
        assert!(TagStream::single(vec![M, Lang::Shared]).is_err());
        assert!(TagStream::new(vec![M, E], vec![1]).is_err());
    }

    fn report(m: f64, b: Option<f64>) -> CsMetricsReport {
        CsMetricsReport {
            m_index: m,
            lang_entropy: m,
            i_index: m,
            burstiness: b,
            n_tokens: 10,
            n_switches: 2,
            n_spans: 3,
        }
    }

    #[test]
    fn identical_candidate_has_zero_distance() {
        let r = report(0.5, Some(-0.2));
        let t = compare_reports(&[("same".into(), r.clone())], "real_cs", &r).unwrap();
        assert_eq!(t.rows[0].distances, [Some(0.0); 4]);
    }

    #[test]
    fn closer_candidate_ranks_first_everywhere() {
        let reference = report(0.5, Some(0.0));
        let cands = vec![
            ("far".to_string(), report(0.9, Some(0.6))),
            ("near".to_string(), report(0.6, Some(0.1))),
        ];
        let t = compare_reports(&cands, "real_cs", &reference).unwrap();
        for m in Metric::ALL {
            assert_eq!(t.ranking(m)[0], "near");
        }
        assert_eq!(t.row("near").unwrap().ranks, [Some(1); 4]);
        assert_eq!(t.row("far").unwrap().ranks, [Some(2); 4]);
    }

    #[test]
    fn undefined_burstiness_is_flagged_and_excluded() {
        let reference = report(0.5, Some(0.0));
        let t =
            compare_reports(&[("mono".into(), report(0.0, None))], "real_cs", &reference).unwrap();
        assert_eq!(t.rows[0].distances[3], None);
        let csv = t.to_csv();
        assert!(csv.lines().next().unwrap().contains("distance_burstiness"));
        assert!(csv.contains("UNDEFINED"));
        assert!(csv.lines().nth(2).unwrap().ends_with(",true"));
        assert!(compare_reports(&[], "real_cs", &reference).is_err());
        assert!(
            compare_reports(&[("x".into(), reference.clone())], "r", &report(0.1, None)).is_err()
        );
    }
}
