use clap::Args;
use csgan::corpus::{SynthConfig, DEFAULT_MAX_LEN};
use csgan::model::TransformerConfig;
use csgan::training::{EvalConfig, StageConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

use crate::Failure;

/// Model shape without the vocabulary size, which comes from the vocab file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let t = TransformerConfig::new(1);
        ModelSettings {
            n_layers: t.n_layers,
            hidden: t.hidden,
            n_heads: t.n_heads,
            ff_dim: t.ff_dim,
            dropout: t.dropout,
        }
    }
}

/// Everything a command may read from `--config`. Every key is optional;
/// absent keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelSettings,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
    /// Tokens seen fewer times map to UNK when building the vocabulary.
    pub min_count: usize,
    /// Sentence cap in ids, BOS and EOS included.
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: ModelSettings::default(),
            stage1: StageConfig::stage1(0),
            stage2: StageConfig::stage2(0),
            eval: EvalConfig::default(),
            min_count: 1,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Overlays `patch` on `base`. Keys missing from `base` are rejected so typos
/// surface; a tagged object (one with `kind`) replaces its target outright.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(format!("unknown config key `{here}`")),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::config("MISSING_INPUT", format!("config {}: {e}", path.display()))
        })?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| {
            Failure::config("BAD_CONFIG", format!("config {}: {e}", path.display()))
        })?;
        if !patch.is_object() {
            return Err(Failure::config(
                "BAD_CONFIG",
                "config must be a JSON object",
            ));
        }
        let mut v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge(&mut v, patch, "").map_err(|e| Failure::config("BAD_CONFIG", e))?;
        serde_json::from_value(v)
            .map_err(|e| Failure::config("BAD_CONFIG", format!("config {}: {e}", path.display())))
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            n_layers: self.model.n_layers,
            hidden: self.model.hidden,
            n_heads: self.model.n_heads,
            ff_dim: self.model.ff_dim,
            max_len: self.max_len,
            n_styles: 2,
            dropout: self.model.dropout,
        }
    }

    pub fn stage(&self, stage: u8) -> &StageConfig {
        if stage == 1 {
            &self.stage1
        } else {
            &self.stage2
        }
    }

    pub fn stage_mut(&mut self, stage: u8) -> &mut StageConfig {
        if stage == 1 {
            &mut self.stage1
        } else {
            &mut self.stage2
        }
    }
}

/// Per-field overrides shared by the training commands.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Adversarial iterations
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_gen: Option<f64>,
    #[arg(long)]
    pub lr_disc: Option<f64>,
    /// Weight of the adversarial generator loss
    #[arg(long)]
    pub adv_weight: Option<f64>,
    #[arg(long)]
    pub disc_steps: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
}

impl Overrides {
    /// Applies the model flags and the stage flags for `stage`, and sets the
    /// stage seed.
    pub fn apply(&self, cfg: &mut RunConfig, stage: u8, seed: u64) {
        let m = &mut cfg.model;
        if let Some(v) = self.hidden {
            m.hidden = v;
        }
        if let Some(v) = self.layers {
            m.n_layers = v;
        }
        if let Some(v) = self.heads {
            m.n_heads = v;
        }
        if let Some(v) = self.ff_dim {
            m.ff_dim = v;
        }
        let s = cfg.stage_mut(stage);
        s.seed = seed;
        if let Some(v) = self.iters {
            s.total_iters = v;
        }
        if let Some(v) = self.pretrain_iters {
            s.pretrain_iters = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.lr_gen {
            s.lr_gen = v;
        }
        if let Some(v) = self.lr_disc {
            s.lr_disc = v;
        }
        if let Some(v) = self.adv_weight {
            s.adv_weight = v;
        }
        if let Some(v) = self.disc_steps {
            s.disc_steps = v;
        }
        if let Some(v) = self.temperature {
            s.temperature = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_stage_block_keeps_stage_defaults() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        merge(
            &mut v,
            serde_json::json!({"stage2": {"total_iters": 5}, "max_len": 20}),
            "",
        )
        .unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.stage2.total_iters, 5);
        assert_eq!(c.stage2.pretrain_iters, 0);
        assert_eq!(c.stage2.schedule, csgan::training::Schedule::stlr());
        assert_eq!(c.max_len, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        let err = merge(&mut v, serde_json::json!({"stage1": {"lr": 1.0}}), "").unwrap_err();
        assert!(err.contains("stage1.lr"));
    }

    #[test]
    fn tagged_schedule_is_replaced() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        merge(
            &mut v,
            serde_json::json!({"stage2": {"schedule": {"kind": "constant"}}}),
            "",
        )
        .unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.stage2.schedule, csgan::training::Schedule::Constant);
    }

    #[test]
    fn desk_config_file_matches_library_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
        let c = RunConfig::load(Some(&path)).unwrap();
        let desk = csgan::training::PipelineConfig::desk(40, 0);
        assert_eq!(c.transformer(40), desk.model);
        assert_eq!(c.stage1, desk.stage1);
        assert_eq!(c.stage2, desk.stage2);
        assert_eq!(c.eval, desk.eval);
        assert_eq!(c.synth.n_sentences, 1000);
    }
}
