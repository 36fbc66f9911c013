//! Transformer encoder-decoder generator with style conditioning and a
//! latent-space style discriminator.

mod batch;
mod graph;

pub use batch::Batch;
pub use graph::{Graph, Latent, SoftSequence};

use crate::corpus::{SentenceRecord, NUM_SPECIALS};
use crate::error::{CsError, Result};
use numcore::{load_checkpoint, save_checkpoint, ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_ff")]
    pub ff_dim: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_styles")]
    pub n_styles: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn d_layers() -> usize {
    3
}
fn d_hidden() -> usize {
    256
}
fn d_heads() -> usize {
    4
}
fn d_ff() -> usize {
    512
}
fn d_max_len() -> usize {
    crate::corpus::DEFAULT_MAX_LEN
}
fn d_styles() -> usize {
    2
}

impl TransformerConfig {
    /// Full-size defaults for a vocabulary of `vocab_size` ids.
    pub fn new(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            n_layers: d_layers(),
            hidden: d_hidden(),
            n_heads: d_heads(),
            ff_dim: d_ff(),
            max_len: d_max_len(),
            n_styles: d_styles(),
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CsError::config(format!("transformer: {m}")));
        if self.vocab_size <= NUM_SPECIALS {
            return fail(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            ));
        }
        if self.n_layers == 0 || self.ff_dim == 0 || self.n_heads == 0 {
            return fail("n_layers, n_heads and ff_dim must be positive".into());
        }
        if self.hidden < 2 || self.hidden % self.n_heads != 0 {
            return fail(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} < 2", self.max_len));
        }
        if self.n_styles != 2 {
            return fail(format!(
                "a stage binds exactly 2 styles, got n_styles = {}",
                self.n_styles
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn disc_hidden(&self) -> usize {
        self.hidden / 2
    }
}

/// The four conditioning styles: matrix, embedded, artificial CS, natural CS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleId {
    #[serde(rename = "l_m")]
    Matrix,
    #[serde(rename = "l_e")]
    Embedded,
    #[serde(rename = "l_a")]
    Artificial,
    #[serde(rename = "l_n")]
    Natural,
}

impl StyleId {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleId::Matrix => "l_m",
            StyleId::Embedded => "l_e",
            StyleId::Artificial => "l_a",
            StyleId::Natural => "l_n",
        }
    }
}

impl fmt::Display for StyleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleId {
    type Err = CsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l_m" | "m" | "matrix" => Ok(StyleId::Matrix),
            "l_e" | "e" | "embedded" => Ok(StyleId::Embedded),
            "l_a" | "a" | "artificial" => Ok(StyleId::Artificial),
            "l_n" | "n" | "natural" => Ok(StyleId::Natural),
            _ => Err(CsError::config(format!(
                "unknown style `{s}` (expected l_m, l_e, l_a or l_n)"
            ))),
        }
    }
}

/// Which two styles a stage trains with. `style0` takes style-table row and
/// discriminator label 0, `style1` row and label 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBinding {
    pub stage: u8,
    pub style0: StyleId,
    pub style1: StyleId,
}

impl StageBinding {
    pub fn new(stage: u8, style0: StyleId, style1: StyleId) -> Result<Self> {
        if style0 == style1 {
            return Err(CsError::config(format!("stage binds {style0} twice")));
        }
        if !(1..=2).contains(&stage) {
            return Err(CsError::config(format!(
                "stage must be 1 or 2, got {stage}"
            )));
        }
        Ok(StageBinding {
            stage,
            style0,
            style1,
        })
    }

    pub fn stage1() -> Self {
        StageBinding {
            stage: 1,
            style0: StyleId::Matrix,
            style1: StyleId::Embedded,
        }
    }

    pub fn stage2() -> Self {
        StageBinding {
            stage: 2,
            style0: StyleId::Artificial,
            style1: StyleId::Natural,
        }
    }

    pub fn for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(Self::stage1()),
            2 => Ok(Self::stage2()),
            _ => Err(CsError::config(format!(
                "stage must be 1 or 2, got {stage}"
            ))),
        }
    }

    /// Row of the style table, equal to the discriminator label.
    pub fn slot(&self, style: StyleId) -> Result<usize> {
        if style == self.style0 {
            Ok(0)
        } else if style == self.style1 {
            Ok(1)
        } else {
            Err(CsError::UnboundStyle(style.to_string()))
        }
    }

    pub fn style(&self, slot: usize) -> StyleId {
        if slot == 0 {
            self.style0
        } else {
            self.style1
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Glorot,
    Zeros,
    Ones,
}

fn param_specs(c: &TransformerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f, v) = (c.hidden, c.ff_dim, c.vocab_size);
    let mut specs = vec![
        ("tok_emb".to_string(), vec![v, h], Init::Normal),
        ("style_emb".to_string(), vec![c.n_styles, h], Init::Normal),
    ];
    let linear = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: String, i: usize, o: usize| {
        specs.push((format!("{name}.w"), vec![i, o], Init::Glorot));
        specs.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: String| {
        specs.push((format!("{name}.g"), vec![h], Init::Ones));
        specs.push((format!("{name}.b"), vec![h], Init::Zeros));
    };
    for side in ["enc", "dec"] {
        for l in 0..c.n_layers {
            let p = format!("{side}.{l}");
            let mut blocks = vec!["self"];
            if side == "dec" {
                blocks.push("cross");
            }
            for (i, block) in blocks.iter().enumerate() {
                norm(&mut specs, format!("{p}.ln{}", i + 1));
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut specs, format!("{p}.{block}.{proj}"), h, h);
                }
            }
            norm(&mut specs, format!("{p}.ln{}", blocks.len() + 1));
            linear(&mut specs, format!("{p}.ff.1"), h, f);
            linear(&mut specs, format!("{p}.ff.2"), f, h);
        }
        norm(&mut specs, format!("{side}.ln"));
    }
    linear(&mut specs, "dec.out".into(), h, v);
    linear(&mut specs, "disc.1".into(), h, c.disc_hidden());
    linear(&mut specs, "disc.2".into(), c.disc_hidden(), 2);
    specs
}

/// True for parameters owned by the generator (everything but the
/// discriminator head).
pub fn is_generator_param(name: &str) -> bool {
    !name.starts_with("disc.")
}

pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("disc.")
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: TransformerConfig,
    pub stage: u8,
    pub style0: StyleId,
    pub style1: StyleId,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar> {
    pub config: TransformerConfig,
    pub binding: StageBinding,
    pub params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    /// Freshly initialized model: Glorot-normal weights, zero biases, unit
    /// layer-norm gains and standard-normal embeddings.
    pub fn new(config: TransformerConfig, binding: StageBinding, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            match init {
                Init::Normal => params.insert_normal(&name, &shape, 1.0, &mut rng),
                Init::Glorot => {
                    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                    params.insert_normal(&name, &shape, std, &mut rng)
                }
                Init::Zeros => params.insert_filled(&name, &shape, 0.0),
                Init::Ones => params.insert_filled(&name, &shape, 1.0),
            }
        }
        Ok(Model {
            config,
            binding,
            params,
        })
    }

    /// Wraps existing parameters after checking every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn from_params(
        config: TransformerConfig,
        binding: StageBinding,
        params: ParamStore<F>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for (name, shape, _) in &specs {
            match params.get(name) {
                Some(v) if v.shape() == shape.as_slice() => {}
                Some(v) => {
                    return Err(CsError::Format {
                        what: "checkpoint",
                        msg: format!("{name} has shape {:?}, expected {shape:?}", v.shape()),
                    })
                }
                None => {
                    return Err(CsError::Format {
                        what: "checkpoint",
                        msg: format!("missing parameter {name}"),
                    })
                }
            }
        }
        if params.len() != specs.len() {
            return Err(CsError::Format {
                what: "checkpoint",
                msg: format!("{} tensors, expected {}", params.len(), specs.len()),
            });
        }
        Ok(Model {
            config,
            binding,
            params,
        })
    }

    /// Same parameters under another stage binding; style rows carry over
    /// by slot.
    pub fn rebind(mut self, binding: StageBinding) -> Self {
        self.binding = binding;
        self
    }

    pub fn convert<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            binding: self.binding,
            params: self.params.convert(),
        }
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            config: self.config.clone(),
            stage: self.binding.stage,
            style0: self.binding.style0,
            style1: self.binding.style1,
        }
    }

    /// Writes the checkpoint and its `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.params, path)?;
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: ModelManifest =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let binding = StageBinding::new(manifest.stage, manifest.style0, manifest.style1)?;
        let params = load_checkpoint::<F>(path)?;
        Self::from_params(manifest.config, binding, params)
    }

    /// A graph where no parameter receives gradients.
    pub fn frozen_graph(&self) -> Result<Graph<'_, F>> {
        Graph::new(self, |_| false)
    }

    /// Encodes `records` under `style` and greedily decodes them under the
    /// same style, in batches of `batch_size`. Output records are at most
    /// `max_steps` ids long including BOS.
    pub fn transfer(
        &self,
        records: &[SentenceRecord],
        style: StyleId,
        max_steps: usize,
        batch_size: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(batch_size.max(1)) {
            let batch = Batch::from_records(chunk)?;
            let mut g = self.frozen_graph()?;
            let z = g.encode(&batch, style)?;
            out.extend(g.decode_greedy(&z, style, max_steps)?);
        }
        Ok(out)
    }
}
