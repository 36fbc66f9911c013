//! Generator pretraining, alternating discriminator/generator updates, and
//! the two-stage pipeline.

mod pipeline;

pub use pipeline::{
    evaluate_transfers, generate_negatives, generate_negatives_mixed, hash_records, run_pipeline,
    write_records, EvalConfig, PipelineConfig, PipelineOutcome, RunManifest,
};

use crate::corpus::SentenceRecord;
use crate::error::{CsError, Result};
use crate::model::{
    is_discriminator_param, is_generator_param, Batch, Graph, Latent, Model, StageBinding,
    TransformerConfig,
};
use numcore::{clip_global_norm, Adam, AdamConfig, NumError, Scalar, StlrSchedule, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Stlr { cut_frac: f64, ratio: f64 },
}

impl Schedule {
    pub fn stlr() -> Self {
        Schedule::Stlr {
            cut_frac: 0.1,
            ratio: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: u8,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub schedule: Schedule,
    pub pretrain_iters: usize,
    /// Weight of the adversarial term in the generator objective.
    pub adv_weight: f64,
    pub batch_size: usize,
    /// Adversarial iterations after pretraining.
    pub total_iters: usize,
    pub seed: u64,
    /// Continuous-softmax temperature on the soft path.
    pub temperature: f64,
    pub clip_norm: f64,
    /// Discriminator updates per generator update; 0 disables them.
    pub disc_steps: usize,
    /// Draw negatives from both transfer directions instead of matrix only.
    pub mixed_negatives: bool,
    /// Longest generated record, in ids including BOS.
    pub max_decode_len: usize,
    /// In the generator's adversarial term, re-encode with the encoder
    /// weights held constant so D can only be fooled through the decoded
    /// sequence.
    pub detach_reencoder: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1(0)
    }
}

impl StageConfig {
    pub fn stage1(seed: u64) -> Self {
        StageConfig {
            stage: 1,
            lr_gen: 1e-3,
            lr_disc: 1e-4,
            schedule: Schedule::Constant,
            pretrain_iters: 300,
            adv_weight: 1.0,
            batch_size: 32,
            total_iters: 3000,
            seed,
            temperature: 1.0,
            clip_norm: 5.0,
            disc_steps: 1,
            mixed_negatives: false,
            max_decode_len: crate::corpus::DEFAULT_MAX_LEN,
            detach_reencoder: true,
        }
    }

    /// Stage 2 starts from trained parameters, so it skips pretraining.
    pub fn stage2(seed: u64) -> Self {
        StageConfig {
            stage: 2,
            schedule: Schedule::stlr(),
            pretrain_iters: 0,
            ..Self::stage1(seed)
        }
    }

    pub fn binding(&self) -> Result<StageBinding> {
        StageBinding::for_stage(self.stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.binding()?;
        let bad = |m: String| Err(CsError::config(m));
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) {
            return bad(format!(
                "learning rates must be > 0 (gen {}, disc {})",
                self.lr_gen, self.lr_disc
            ));
        }
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return bad(format!("adv_weight {} must be >= 0", self.adv_weight));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be > 0", self.clip_norm));
        }
        if self.max_decode_len < 2 {
            return bad("max_decode_len must be at least 2".into());
        }
        if let Schedule::Stlr { cut_frac, ratio } = self.schedule {
            if self.total_iters > 0 {
                StlrSchedule::new(1.0, self.total_iters, cut_frac, ratio)?;
            }
        }
        Ok(())
    }

    /// Generator and discriminator learning rates at adversarial iteration `t`.
    pub fn learning_rates(&self, t: usize) -> Result<(f64, f64)> {
        match self.schedule {
            Schedule::Constant => Ok((self.lr_gen, self.lr_disc)),
            Schedule::Stlr { cut_frac, ratio } => {
                let g = StlrSchedule::new(self.lr_gen, self.total_iters, cut_frac, ratio)?;
                let d = StlrSchedule::new(self.lr_disc, self.total_iters, cut_frac, ratio)?;
                Ok((g.lr(t), d.lr(t)))
            }
        }
    }
}

/// Losses of one iteration. Cross-entropy terms are in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    pub l_g_matrix: f64,
    pub l_g_embedded: f64,
    pub l_d_matrix: f64,
    pub l_d_embedded: f64,
    pub l_adv: f64,
    pub disc_accuracy: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "iter,L_G_matrix,L_G_embedded,L_D_matrix,L_D_embedded,L_adv,disc_acc";

pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.l_g_matrix,
            r.l_g_embedded,
            r.l_d_matrix,
            r.l_d_embedded,
            r.l_adv,
            r.disc_accuracy
        );
    }
    out
}

pub fn write_loss_csv(path: impl AsRef<Path>, reports: &[LossReport]) -> Result<()> {
    std::fs::write(path, loss_csv(reports))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStats {
    pub l_d_matrix: f64,
    pub l_d_embedded: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenStats {
    pub l_g_matrix: f64,
    pub l_g_embedded: f64,
    pub l_adv: f64,
}

fn as_diverged(phase: &'static str, iter: usize) -> impl Fn(CsError) -> CsError {
    move |e| match e {
        CsError::Num(source @ NumError::NonFinite { .. }) => CsError::Diverged {
            phase,
            iter,
            source,
        },
        other => other,
    }
}

/// Encodes `batch` under `style`, soft-decodes it under the same style for
/// `width - 1` steps and re-encodes the result.
pub fn soft_cycle<F: Scalar>(
    g: &mut Graph<'_, F>,
    batch: &Batch,
    style: crate::model::StyleId,
    temperature: f64,
) -> Result<Latent> {
    let z = g.encode(batch, style)?;
    let seq = g.decode_soft(&z, style, batch.width - 1, temperature)?;
    g.reencode_soft(&seq, style)
}

fn transfer_latent<F: Scalar>(
    g: &mut Graph<'_, F>,
    batch: &Batch,
    style: crate::model::StyleId,
    cfg: &StageConfig,
) -> Result<Latent> {
    if !cfg.detach_reencoder {
        return soft_cycle(g, batch, style, cfg.temperature);
    }
    let z = g.encode(batch, style)?;
    let seq = g.decode_soft(&z, style, batch.width - 1, cfg.temperature)?;
    g.reencode_soft_detached(&seq, style)
}

/// Mean teacher-forced negative log-likelihood of `records` reconstructed
/// under `style`. Records without content tokens are skipped.
pub fn reconstruction_loss<F: Scalar>(
    model: &Model<F>,
    records: &[SentenceRecord],
    style: crate::model::StyleId,
) -> Result<f64> {
    let kept = drop_empty(records, "reconstruction_loss");
    let batch = Batch::from_records(&kept)?;
    let mut g = model.frozen_graph()?;
    let l = g.reconstruction_loss(&batch, style)?;
    Ok(g.tape.scalar(l).as_f64())
}

pub(crate) fn drop_empty(records: &[SentenceRecord], what: &str) -> Vec<SentenceRecord> {
    let kept: Vec<SentenceRecord> = records
        .iter()
        .filter(|r| r.content_ids().next().is_some())
        .cloned()
        .collect();
    if kept.len() < records.len() {
        log::warn!(
            "{what}: skipped {} empty record(s)",
            records.len() - kept.len()
        );
    }
    kept
}

fn labelled_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    latents: &[Latent],
    label: usize,
) -> Result<(Var, usize, usize)> {
    let logits: Vec<Var> = latents
        .iter()
        .map(|z| g.discriminate(z))
        .collect::<Result<_>>()?;
    let all = g.tape.concat(&logits, 0)?;
    let rows = g.tape.shape(all)[0];
    let loss = g.tape.cross_entropy(all, &vec![label; rows], None)?;
    let v = g.value(all);
    let correct = (0..rows)
        .filter(|&r| (v[[r, 1]] > v[[r, 0]]) == (label == 1))
        .count();
    Ok((loss, correct, rows))
}

/// One discriminator update with the generator frozen. Label 0: real
/// style-0 latents, their soft reconstructions, and style-0 sentences
/// transferred to style 1. Label 1 mirrors this for style 1.
pub fn discriminator_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    b0: &Batch,
    b1: &Batch,
    cfg: &StageConfig,
    lr: f64,
) -> Result<DiscStats> {
    let (s0, s1) = (model.binding.style0, model.binding.style1);
    let (stats, grads) = {
        let mut g = Graph::new(model, is_discriminator_param)?;
        let group0 = vec![
            g.encode(b0, s0)?,
            soft_cycle(&mut g, b0, s0, cfg.temperature)?,
            soft_cycle(&mut g, b0, s1, cfg.temperature)?,
        ];
        let group1 = vec![
            g.encode(b1, s1)?,
            soft_cycle(&mut g, b1, s1, cfg.temperature)?,
            soft_cycle(&mut g, b1, s0, cfg.temperature)?,
        ];
        let (l0, c0, n0) = labelled_loss(&mut g, &group0, 0)?;
        let (l1, c1, n1) = labelled_loss(&mut g, &group1, 1)?;
        let total = g.tape.add(l0, l1)?;
        let stats = DiscStats {
            l_d_matrix: g.tape.scalar(l0).as_f64(),
            l_d_embedded: g.tape.scalar(l1).as_f64(),
            accuracy: (c0 + c1) as f64 / (n0 + n1) as f64,
        };
        (stats, g.gradients(total)?)
    };
    let mut grads = grads;
    clip_global_norm(&mut grads, cfg.clip_norm);
    opt.step(&mut model.params, &grads, lr)?;
    Ok(stats)
}

/// One generator update with the discriminator frozen: same-style and
/// cross-style reconstruction plus `adv_weight` times the loss of D
/// assigning transferred latents to their target style.
pub fn generator_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    b0: &Batch,
    b1: &Batch,
    cfg: &StageConfig,
    adv_weight: f64,
    lr: f64,
    dropout_seed: u64,
) -> Result<GenStats> {
    let (s0, s1) = (model.binding.style0, model.binding.style1);
    let (stats, mut grads) = {
        let mut g = Graph::new(model, is_generator_param)?.with_dropout(dropout_seed);
        let r00 = g.reconstruction_loss(b0, s0)?;
        let r11 = g.reconstruction_loss(b1, s1)?;
        let r01 = g.reconstruction_loss(b0, s1)?;
        let r10 = g.reconstruction_loss(b1, s0)?;
        let same = g.tape.add(r00, r11)?;
        let same = g.tape.scale(same, F::of(0.5))?;
        let cross = g.tape.add(r01, r10)?;
        let cross = g.tape.scale(cross, F::of(0.5))?;
        let mut total = g.tape.add(same, cross)?;
        let mut l_adv = 0.0;
        if adv_weight > 0.0 {
            let t01 = transfer_latent(&mut g, b0, s1, cfg)?;
            let t10 = transfer_latent(&mut g, b1, s0, cfg)?;
            let d01 = g.discriminate(&t01)?;
            let d10 = g.discriminate(&t10)?;
            let a01 = g.tape.cross_entropy(d01, &vec![1; b0.size()], None)?;
            let a10 = g.tape.cross_entropy(d10, &vec![0; b1.size()], None)?;
            let adv = g.tape.add(a01, a10)?;
            let adv = g.tape.scale(adv, F::of(0.5))?;
            l_adv = g.tape.scalar(adv).as_f64();
            let weighted = g.tape.scale(adv, F::of(adv_weight))?;
            total = g.tape.add(total, weighted)?;
        }
        let stats = GenStats {
            l_g_matrix: g.tape.scalar(same).as_f64(),
            l_g_embedded: g.tape.scalar(cross).as_f64(),
            l_adv,
        };
        (stats, g.gradients(total)?)
    };
    clip_global_norm(&mut grads, cfg.clip_norm);
    opt.step(&mut model.params, &grads, lr)?;
    Ok(stats)
}

/// Seeded minibatch source over the two style corpora.
pub struct BatchSampler<'a> {
    corpus0: &'a [SentenceRecord],
    corpus1: &'a [SentenceRecord],
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        corpus0: &'a [SentenceRecord],
        corpus1: &'a [SentenceRecord],
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if corpus0.is_empty() || corpus1.is_empty() {
            return Err(CsError::config("both style corpora must be nonempty"));
        }
        Ok(BatchSampler {
            corpus0,
            corpus1,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(rng: &mut ChaCha8Rng, corpus: &[SentenceRecord], k: usize) -> Result<Batch> {
        let idx = sample(rng, corpus.len(), k.min(corpus.len()));
        let rows: Vec<&[usize]> = idx.iter().map(|i| corpus[i].ids.as_slice()).collect();
        Batch::from_ids(&rows)
    }

    pub fn next_pair(&mut self) -> Result<(Batch, Batch)> {
        let b0 = Self::draw(&mut self.rng, self.corpus0, self.batch_size)?;
        let b1 = Self::draw(&mut self.rng, self.corpus1, self.batch_size)?;
        Ok((b0, b1))
    }
}

fn dropout_seed(seed: u64, phase: u64, iter: usize) -> u64 {
    seed ^ (phase << 56) ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn gen_only_report(iter: usize, s: GenStats) -> LossReport {
    LossReport {
        iter,
        l_g_matrix: s.l_g_matrix,
        l_g_embedded: s.l_g_embedded,
        l_d_matrix: 0.0,
        l_d_embedded: 0.0,
        l_adv: s.l_adv,
        disc_accuracy: 0.0,
    }
}

fn pretrain_loop<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    sampler: &mut BatchSampler<'_>,
    cfg: &StageConfig,
) -> Result<Vec<LossReport>> {
    let mut reports = Vec::with_capacity(cfg.pretrain_iters);
    for it in 0..cfg.pretrain_iters {
        let (b0, b1) = sampler.next_pair()?;
        let s = generator_step(
            model,
            opt,
            &b0,
            &b1,
            cfg,
            0.0,
            cfg.lr_gen,
            dropout_seed(cfg.seed, 1, it),
        )
        .map_err(as_diverged("pretrain", it))?;
        if it % 100 == 0 {
            log::info!(
                "pretrain {it}: L_G_matrix {:.4} L_G_embedded {:.4}",
                s.l_g_matrix,
                s.l_g_embedded
            );
        }
        reports.push(gen_only_report(it, s));
    }
    Ok(reports)
}

/// Runs `cfg.pretrain_iters` reconstruction-only generator updates on
/// `model` in place; the discriminator is untouched.
pub fn pretrain_generator<F: Scalar>(
    model: &mut Model<F>,
    corpus0: &[SentenceRecord],
    corpus1: &[SentenceRecord],
    cfg: &StageConfig,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let (c0, c1) = (
        drop_empty(corpus0, "pretrain"),
        drop_empty(corpus1, "pretrain"),
    );
    let mut sampler = BatchSampler::new(&c0, &c1, cfg.batch_size, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::default());
    pretrain_loop(model, &mut opt, &mut sampler, cfg)
}

#[derive(Debug, Clone)]
pub struct StageOutcome<F: Scalar> {
    pub model: Model<F>,
    pub pretrain: Vec<LossReport>,
    pub losses: Vec<LossReport>,
}

/// Pretraining followed by `total_iters` alternating discriminator and
/// generator updates. Stage 2 requires `init`; stage 1 builds a fresh model
/// from `model_cfg` seeded by `cfg.seed` when `init` is absent.
pub fn train_stage<F: Scalar>(
    corpus0: &[SentenceRecord],
    corpus1: &[SentenceRecord],
    cfg: &StageConfig,
    model_cfg: &TransformerConfig,
    init: Option<Model<F>>,
) -> Result<StageOutcome<F>> {
    cfg.validate()?;
    let binding = cfg.binding()?;
    let mut model = match (init, cfg.stage) {
        (Some(m), _) => m.rebind(binding),
        (None, 1) => Model::new(model_cfg.clone(), binding, cfg.seed)?,
        (None, _) => return Err(CsError::MissingStage1Init),
    };
    let (c0, c1) = (
        drop_empty(corpus0, "train_stage"),
        drop_empty(corpus1, "train_stage"),
    );
    let mut sampler = BatchSampler::new(&c0, &c1, cfg.batch_size, cfg.seed)?;
    let mut opt_g = Adam::new(AdamConfig::default());
    let mut opt_d = Adam::new(AdamConfig::default());
    let pretrain = pretrain_loop(&mut model, &mut opt_g, &mut sampler, cfg)?;

    let mut losses = Vec::with_capacity(cfg.total_iters);
    for it in 0..cfg.total_iters {
        let (lr_g, lr_d) = cfg.learning_rates(it)?;
        let (b0, b1) = sampler.next_pair()?;
        let mut d = DiscStats {
            l_d_matrix: 0.0,
            l_d_embedded: 0.0,
            accuracy: 0.0,
        };
        for _ in 0..cfg.disc_steps {
            d = discriminator_step(&mut model, &mut opt_d, &b0, &b1, cfg, lr_d)
                .map_err(as_diverged("discriminator", it))?;
        }
        let s = generator_step(
            &mut model,
            &mut opt_g,
            &b0,
            &b1,
            cfg,
            cfg.adv_weight,
            lr_g,
            dropout_seed(cfg.seed, 2, it),
        )
        .map_err(as_diverged("generator", it))?;
        let report = LossReport {
            iter: it,
            l_g_matrix: s.l_g_matrix,
            l_g_embedded: s.l_g_embedded,
            l_d_matrix: d.l_d_matrix,
            l_d_embedded: d.l_d_embedded,
            l_adv: s.l_adv,
            disc_accuracy: d.accuracy,
        };
        if it % 100 == 0 {
            log::info!(
                "stage {} iter {it}: G {:.4}/{:.4} D {:.4}/{:.4} adv {:.4} acc {:.3}",
                cfg.stage,
                report.l_g_matrix,
                report.l_g_embedded,
                report.l_d_matrix,
                report.l_d_embedded,
                report.l_adv,
                report.disc_accuracy
            );
        }
        losses.push(report);
    }
    Ok(StageOutcome {
        model,
        pretrain,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let s1 = StageConfig::stage1(3);
        assert_eq!(
            (s1.lr_gen, s1.lr_disc, s1.pretrain_iters),
            (1e-3, 1e-4, 300)
        );
        assert_eq!(s1.schedule, Schedule::Constant);
        let s2 = StageConfig::stage2(3);
        assert_eq!(s2.schedule, Schedule::stlr());
        assert_eq!(s2.binding().unwrap(), StageBinding::stage2());
        assert!(StageConfig {
            adv_weight: -1.0,
            ..s1.clone()
        }
        .validate()
        .is_err());
        assert!(StageConfig { stage: 3, ..s1 }.validate().is_err());
    }

    #[test]
    fn stlr_learning_rates_follow_the_schedule() {
        let cfg = StageConfig {
            total_iters: 1000,
            ..StageConfig::stage2(0)
        };
        let (g0, d0) = cfg.learning_rates(0).unwrap();
        assert!((g0 - 1e-3 / 32.0).abs() < 1e-15 && (d0 - 1e-4 / 32.0).abs() < 1e-15);
        let (g, d) = cfg.learning_rates(100).unwrap();
        assert!((g - 1e-3).abs() < 1e-15 && (d - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn loss_csv_layout() {
        let r = LossReport {
            iter: 0,
            l_g_matrix: 1.5,
            l_g_embedded: 2.0,
            l_d_matrix: 0.5,
            l_d_embedded: 0.25,
            l_adv: 0.75,
            disc_accuracy: 1.0,
        };
        let csv = loss_csv(&[r]);
        assert_eq!(csv, format!("{LOSS_CSV_HEADER}\n0,1.5,2,0.5,0.25,0.75,1\n"));
    }
}
