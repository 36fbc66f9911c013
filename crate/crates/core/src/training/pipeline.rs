use super::{train_stage, write_loss_csv, LossReport, StageConfig};
use crate::corpus::{CorpusSet, Lang, Origin, SentenceRecord, Vocabulary};
use crate::error::{CsError, Result};
use crate::metrics::{
    compare_reports, corpus_report, reports_csv, ComparisonTable, CsMetricsReport,
};
use crate::model::{Model, StyleId, TransformerConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Greedy transfer of every matrix sentence to the stage-1 embedded style.
pub fn generate_negatives(
    model: &Model<f32>,
    matrix: &[SentenceRecord],
    vocab: &Vocabulary,
    cfg: &StageConfig,
) -> Result<Vec<SentenceRecord>> {
    let style = model.binding.style1;
    let ids = model.transfer(matrix, style, cfg.max_decode_len, cfg.batch_size)?;
    ids.into_iter()
        .map(|i| SentenceRecord::from_ids(i, vocab, Origin::Generated))
        .collect()
}

/// Negatives drawn at random from both transfer directions, as many as
/// there are matrix sentences.
pub fn generate_negatives_mixed(
    model: &Model<f32>,
    matrix: &[SentenceRecord],
    embedded: &[SentenceRecord],
    vocab: &Vocabulary,
    cfg: &StageConfig,
) -> Result<Vec<SentenceRecord>> {
    let mut pool = generate_negatives(model, matrix, vocab, cfg)?;
    let back = model.transfer(
        embedded,
        model.binding.style0,
        cfg.max_decode_len,
        cfg.batch_size,
    )?;
    for ids in back {
        pool.push(SentenceRecord::from_ids(ids, vocab, Origin::Generated)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pool.shuffle(&mut rng);
    pool.truncate(matrix.len());
    Ok(pool)
}

/// Hex SHA-256 over the id sequences of `records`.
pub fn hash_records(records: &[SentenceRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        for id in &r.ids {
            h.update((*id as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Writes the decoded text of each record, one per line.
pub fn write_records(
    path: impl AsRef<Path>,
    records: &[SentenceRecord],
    vocab: &Vocabulary,
) -> Result<()> {
    let lines: Vec<String> = records.iter().map(|r| vocab.decode_text(&r.ids)).collect();
    crate::corpus::write_lines(path, &lines)
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub stage: Option<u8>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub corpus_hashes: BTreeMap<String, String>,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub pretrain_loss_csv: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            stage: None,
            seed,
            config,
            corpus_hashes: BTreeMap::new(),
            checkpoint: None,
            loss_csv: None,
            pretrain_loss_csv: None,
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Sentences drawn from the front of each source corpus.
    pub max_sentences: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_sentences: 500,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: TransformerConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Small model and budgets for the synthetic benchmark; the whole
    /// pipeline runs in minutes on one core.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        let model = TransformerConfig {
            n_layers: 2,
            hidden: 64,
            ff_dim: 128,
            ..TransformerConfig::new(vocab_size)
        };
        let stage1 = StageConfig {
            total_iters: 400,
            batch_size: 16,
            lr_disc: 1e-3,
            ..StageConfig::stage1(seed)
        };
        let stage2 = StageConfig {
            total_iters: 300,
            batch_size: 16,
            lr_disc: 1e-3,
            disc_steps: 3,
            adv_weight: 10.0,
            ..StageConfig::stage2(seed)
        };
        PipelineConfig {
            model,
            stage1,
            stage2,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stage1: Model<f32>,
    pub stage2: Model<f32>,
    pub negatives: Vec<SentenceRecord>,
    pub stage1_losses: Vec<LossReport>,
    pub stage2_losses: Vec<LossReport>,
    /// Reference first, then the four generated corpora.
    pub reports: Vec<(String, CsMetricsReport)>,
    pub comparison: ComparisonTable,
}

fn save_stage(
    dir: &Path,
    stage: u8,
    model: &Model<f32>,
    cfg: &StageConfig,
    pretrain: &[LossReport],
    losses: &[LossReport],
    hashes: BTreeMap<String, String>,
) -> Result<()> {
    let ckpt = dir.join(format!("stage{stage}.ckpt"));
    model.save(&ckpt)?;
    let loss_csv = dir.join(format!("stage{stage}_losses.csv"));
    write_loss_csv(&loss_csv, losses)?;
    let pre_csv = dir.join(format!("stage{stage}_pretrain_losses.csv"));
    write_loss_csv(&pre_csv, pretrain)?;
    let mut m = RunManifest::new(
        "train",
        Some(cfg.seed),
        serde_json::json!({"stage": cfg, "model": model.config}),
    );
    m.stage = Some(stage);
    m.corpus_hashes = hashes;
    m.checkpoint = Some(ckpt);
    m.loss_csv = Some(loss_csv);
    m.pretrain_loss_csv = Some(pre_csv);
    m.save(dir.join(format!("stage{stage}_manifest.json")))
}

/// Stage 1 on the monolingual corpora, negatives from its matrix-to-embedded
/// transfers, then stage 2 on negatives versus real code-switched text.
/// Artifacts go to `out_dir` when given; a failing stage leaves earlier
/// artifacts in place.
pub fn run_pipeline(
    vocab: &Vocabulary,
    corpora: &CorpusSet,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    for (name, c) in [
        ("matrix", &corpora.matrix),
        ("embedded", &corpora.embedded),
        ("real_cs", &corpora.real_cs),
    ] {
        if c.is_empty() {
            return Err(CsError::config(format!(
                "pipeline needs a nonempty {name} corpus"
            )));
        }
    }
    if cfg.model.vocab_size != vocab.size() {
        return Err(CsError::config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }
    if cfg.stage1.stage != 1 || cfg.stage2.stage != 2 {
        return Err(CsError::config(
            "pipeline stage configs must be stage 1 then stage 2",
        ));
    }
    cfg.model.validate()?;
    cfg.stage1.validate()?;
    cfg.stage2.validate()?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }

    let s1 = train_stage::<f32>(
        &corpora.matrix,
        &corpora.embedded,
        &cfg.stage1,
        &cfg.model,
        None,
    )?;
    if let Some(d) = out_dir {
        let hashes = BTreeMap::from([
            ("matrix".to_string(), hash_records(&corpora.matrix)),
            ("embedded".to_string(), hash_records(&corpora.embedded)),
        ]);
        save_stage(
            d,
            1,
            &s1.model,
            &cfg.stage1,
            &s1.pretrain,
            &s1.losses,
            hashes,
        )?;
    }

    let negatives = if cfg.stage2.mixed_negatives {
        generate_negatives_mixed(
            &s1.model,
            &corpora.matrix,
            &corpora.embedded,
            vocab,
            &cfg.stage1,
        )?
    } else {
        generate_negatives(&s1.model, &corpora.matrix, vocab, &cfg.stage1)?
    };
    if let Some(d) = out_dir {
        write_records(d.join("negatives.txt"), &negatives, vocab)?;
    }

    let s2 = train_stage(
        &negatives,
        &corpora.real_cs,
        &cfg.stage2,
        &cfg.model,
        Some(s1.model.clone()),
    )?;
    if let Some(d) = out_dir {
        let hashes = BTreeMap::from([
            ("negatives".to_string(), hash_records(&negatives)),
            ("real_cs".to_string(), hash_records(&corpora.real_cs)),
        ]);
        save_stage(
            d,
            2,
            &s2.model,
            &cfg.stage2,
            &s2.pretrain,
            &s2.losses,
            hashes,
        )?;
    }

    let (reports, comparison) = evaluate_transfers(&s2.model, &negatives, corpora, vocab, &cfg.eval)?;
    if let Some(d) = out_dir {
        std::fs::write(
            d.join("report.csv"),
            reports_csv(reports.iter().map(|(n, r)| (n.as_str(), r))),
        )?;
        std::fs::write(d.join("comparison.csv"), comparison.to_csv())?;
    }
    Ok(PipelineOutcome {
        stage1: s1.model,
        stage2: s2.model,
        negatives,
        stage1_losses: s1.losses,
        stage2_losses: s2.losses,
        reports,
        comparison,
    })
}

fn head(records: &[SentenceRecord], n: usize) -> &[SentenceRecord] {
    &records[..records.len().min(n)]
}

/// Metrics of the real code-switched corpus and of four generated corpora:
/// the stage-1 negatives, and stage-2 natural-style transfers of the
/// negatives, the matrix corpus and the embedded corpus.
pub fn evaluate_transfers(
    stage2: &Model<f32>,
    negatives: &[SentenceRecord],
    corpora: &CorpusSet,
    vocab: &Vocabulary,
    eval: &EvalConfig,
) -> Result<(Vec<(String, CsMetricsReport)>, ComparisonTable)> {
    let n = eval.max_sentences.max(1);
    let max_len = stage2.config.max_len;
    let reference = corpus_report(&corpora.real_cs, vocab, Lang::Matrix)?;
    let transfer = |src: &[SentenceRecord]| -> Result<Vec<SentenceRecord>> {
        let out = stage2.transfer(head(src, n), StyleId::Natural, max_len, eval.batch_size)?;
        out.into_iter()
            .map(|i| SentenceRecord::from_ids(i, vocab, Origin::Generated))
            .collect()
    };
    let sources: Vec<(&str, Vec<SentenceRecord>)> = vec![
        ("stage1", head(negatives, n).to_vec()),
        ("stage2_from_negatives", transfer(negatives)?),
        ("from_matrix", transfer(&corpora.matrix)?),
        ("from_embedded", transfer(&corpora.embedded)?),
    ];
    let mut candidates = Vec::new();
    for (name, recs) in &sources {
        candidates.push((name.to_string(), corpus_report(recs, vocab, Lang::Matrix)?));
    }
    let table = compare_reports(&candidates, "real_cs", &reference)?;
    let mut reports = vec![("real_cs".to_string(), reference)];
    reports.extend(candidates);
    Ok((reports, table))
}
