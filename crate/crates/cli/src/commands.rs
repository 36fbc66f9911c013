use csgan::corpus::{
    encode_lines, read_lines, synth_text, write_lines, Lang, Origin, SentenceRecord, Vocabulary,
};
use csgan::metrics::{compare_reports, corpus_report, reports_csv, CsMetricsReport};
use csgan::model::{Model, StageBinding, StyleId};
use csgan::training::{
    generate_negatives, generate_negatives_mixed, pretrain_generator, train_stage, write_loss_csv,
    write_records, RunManifest,
};
use csgan::CsError;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::{Cli, Command, Failure, Format};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let args = serde_json::to_value(&cli.command).expect("arguments serialize");
    let mut ctx = Ctx {
        manifest: RunManifest::new(cli.command.name(), None, serde_json::Value::Null),
        args,
    };
    match cli.command {
        Command::Synth {
            seed,
            out,
            n_sentences,
            p_sw,
        } => {
            let seed = require_seed(seed)?;
            if let Some(n) = n_sentences {
                cfg.synth.n_sentences = n;
            }
            if let Some(p) = p_sw {
                cfg.synth.p_sw = p;
            }
            cfg.synth.seed = seed;
            ctx.manifest.seed = Some(seed);
            let text = synth_text(seed, cfg.synth.n_sentences, &cfg.synth)?;
            std::fs::create_dir_all(&out).map_err(io("create output directory"))?;
            for (name, lines) in [
                ("matrix.txt", &text.matrix),
                ("embedded.txt", &text.embedded),
                ("real_cs.txt", &text.real_cs),
            ] {
                let p = out.join(name);
                write_lines(&p, lines)?;
                ctx.manifest.outputs.push(p);
            }
            log::info!(
                "synth: {} matrix, {} embedded, {} code-switched sentences",
                text.matrix.len(),
                text.embedded.len(),
                text.real_cs.len()
            );
            ctx.finish(&cfg, out.join("synth_manifest.json"))
        }
        Command::Vocab {
            matrix,
            embedded,
            cs,
            out,
            min_count,
        } => {
            if let Some(m) = min_count {
                cfg.min_count = m;
            }
            let m = ctx.read_text("matrix", &matrix)?;
            let e = ctx.read_text("embedded", &embedded)?;
            let c = ctx.read_text("real_cs", &cs)?;
            let vocab = Vocabulary::build(&m, &e, &c, cfg.min_count)?;
            vocab.save(&out)?;
            log::info!("vocab: {} ids", vocab.size());
            ctx.manifest.outputs.push(out.clone());
            ctx.finish(&cfg, sibling_manifest(&out))
        }
        Command::Pretrain {
            seed,
            vocab,
            matrix,
            embedded,
            out,
            overrides,
        } => {
            let seed = require_seed(seed)?;
            overrides.apply(&mut cfg, 1, seed);
            ctx.manifest.seed = Some(seed);
            ctx.manifest.stage = Some(1);
            let vocab = ctx.load_vocab(&vocab)?;
            let m =
                ctx.read_corpus("matrix", &matrix, &vocab, cfg.max_len, Origin::MatrixCorpus)?;
            let e = ctx.read_corpus(
                "embedded",
                &embedded,
                &vocab,
                cfg.max_len,
                Origin::EmbeddedCorpus,
            )?;
            let mut model =
                Model::<f32>::new(cfg.transformer(vocab.size()), StageBinding::stage1(), seed)?;
            let losses = pretrain_generator(&mut model, &m, &e, &cfg.stage1)?;
            std::fs::create_dir_all(&out).map_err(io("create output directory"))?;
            let ckpt = out.join("pretrain.ckpt");
            model.save(&ckpt)?;
            let csv = out.join("pretrain_losses.csv");
            write_loss_csv(&csv, &losses)?;
            ctx.manifest.checkpoint = Some(ckpt);
            ctx.manifest.pretrain_loss_csv = Some(csv);
            ctx.finish(&cfg, out.join("pretrain_manifest.json"))
        }
        Command::Train {
            stage,
            init,
            seed,
            vocab,
            matrix,
            embedded,
            negatives,
            real_cs,
            out,
            overrides,
        } => {
            if stage == 2 && init.is_none() {
                return Err(CsError::MissingStage1Init.into());
            }
            let seed = require_seed(seed)?;
            overrides.apply(&mut cfg, stage, seed);
            if stage == 1 && init.is_some() && overrides.pretrain_iters.is_none() {
                log::info!("stage 1 starts from a checkpoint; skipping pretraining");
                cfg.stage1.pretrain_iters = 0;
            }
            ctx.manifest.seed = Some(seed);
            ctx.manifest.stage = Some(stage);
            let vocab = ctx.load_vocab(&vocab)?;
            let (c0, c1) = if stage == 1 {
                (
                    ctx.read_corpus(
                        "matrix",
                        &need(matrix, "--matrix")?,
                        &vocab,
                        cfg.max_len,
                        Origin::MatrixCorpus,
                    )?,
                    ctx.read_corpus(
                        "embedded",
                        &need(embedded, "--embedded")?,
                        &vocab,
                        cfg.max_len,
                        Origin::EmbeddedCorpus,
                    )?,
                )
            } else {
                (
                    ctx.read_corpus(
                        "negatives",
                        &need(negatives, "--negatives")?,
                        &vocab,
                        cfg.max_len,
                        Origin::Generated,
                    )?,
                    ctx.read_corpus(
                        "real_cs",
                        &need(real_cs, "--real-cs")?,
                        &vocab,
                        cfg.max_len,
                        Origin::RealCs,
                    )?,
                )
            };
            let init = match init {
                Some(p) => Some(ctx.load_model(&p, &vocab)?),
                None => None,
            };
            let model_cfg = init
                .as_ref()
                .map_or_else(|| cfg.transformer(vocab.size()), |m| m.config.clone());
            let outcome = train_stage::<f32>(&c0, &c1, cfg.stage(stage), &model_cfg, init)?;
            std::fs::create_dir_all(&out).map_err(io("create output directory"))?;
            let ckpt = out.join(format!("stage{stage}.ckpt"));
            outcome.model.save(&ckpt)?;
            let csv = out.join(format!("stage{stage}_losses.csv"));
            write_loss_csv(&csv, &outcome.losses)?;
            let pre = out.join(format!("stage{stage}_pretrain_losses.csv"));
            write_loss_csv(&pre, &outcome.pretrain)?;
            ctx.manifest.checkpoint = Some(ckpt);
            ctx.manifest.loss_csv = Some(csv);
            ctx.manifest.pretrain_loss_csv = Some(pre);
            ctx.finish(&cfg, out.join(format!("stage{stage}_manifest.json")))
        }
        Command::Negatives {
            checkpoint,
            vocab,
            matrix,
            out,
            mixed,
            embedded,
        } => {
            let vocab = ctx.load_vocab(&vocab)?;
            let model = ctx.load_model(&checkpoint, &vocab)?;
            if model.binding.stage != 1 {
                return Err(Failure::config(
                    "BAD_CHECKPOINT",
                    "negatives need a stage-1 checkpoint",
                ));
            }
            let m =
                ctx.read_corpus("matrix", &matrix, &vocab, cfg.max_len, Origin::MatrixCorpus)?;
            let neg = match embedded.filter(|_| mixed) {
                Some(e) => {
                    let e = ctx.read_corpus(
                        "embedded",
                        &e,
                        &vocab,
                        cfg.max_len,
                        Origin::EmbeddedCorpus,
                    )?;
                    generate_negatives_mixed(&model, &m, &e, &vocab, &cfg.stage1)?
                }
                None => generate_negatives(&model, &m, &vocab, &cfg.stage1)?,
            };
            ensure_parent(&out)?;
            write_records(&out, &neg, &vocab)?;
            ctx.manifest.outputs.push(out.clone());
            ctx.finish(&cfg, sibling_manifest(&out))
        }
        Command::Generate {
            checkpoint,
            vocab,
            source,
            style,
            out,
            data_dir,
            limit,
        } => {
            let style: StyleId = style.parse()?;
            let vocab = ctx.load_vocab(&vocab)?;
            let model = ctx.load_model(&checkpoint, &vocab)?;
            let (path, origin) = match source.as_str() {
                "matrix" => (data_dir.join("matrix.txt"), Origin::MatrixCorpus),
                "embedded" => (data_dir.join("embedded.txt"), Origin::EmbeddedCorpus),
                "negatives" => (data_dir.join("negatives.txt"), Origin::Generated),
                other => (PathBuf::from(other), Origin::Generated),
            };
            let mut recs = ctx.read_corpus("source", &path, &vocab, cfg.max_len, origin)?;
            recs.truncate(limit.unwrap_or(cfg.eval.max_sentences));
            let ids = model.transfer(&recs, style, model.config.max_len, cfg.eval.batch_size)?;
            let lines: Vec<String> = ids.iter().map(|i| vocab.decode_text(i)).collect();
            ensure_parent(&out)?;
            write_lines(&out, &lines)?;
            ctx.manifest.outputs.push(out.clone());
            ctx.finish(&cfg, sibling_manifest(&out))
        }
        Command::Evaluate {
            vocab,
            corpus,
            name,
            out,
            format,
        } => {
            let vocab = ctx.load_vocab(&vocab)?;
            let report = ctx.report(&name, &corpus, &vocab, cfg.max_len)?;
            let text = match format {
                Format::Csv => reports_csv([(name.as_str(), &report)]),
                Format::Json => {
                    serde_json::to_string_pretty(&json!({ "name": name, "report": report }))
                        .expect("report serializes")
                }
            };
            ensure_parent(&out)?;
            std::fs::write(&out, text).map_err(io("write report"))?;
            ctx.manifest.outputs.push(out.clone());
            ctx.finish(&cfg, sibling_manifest(&out))
        }
        Command::Report {
            vocab,
            reference,
            reference_name,
            candidates,
            out,
        } => {
            let vocab = ctx.load_vocab(&vocab)?;
            let pairs = candidates
                .iter()
                .map(|c| parse_candidate(c))
                .collect::<Result<Vec<_>, _>>()?;
            let reference_report = ctx.report(&reference_name, &reference, &vocab, cfg.max_len)?;
            let mut reports = Vec::with_capacity(pairs.len());
            for (name, path) in pairs {
                let r = ctx.report(&name, &path, &vocab, cfg.max_len)?;
                reports.push((name, r));
            }
            let table = compare_reports(&reports, &reference_name, &reference_report)?;
            std::fs::create_dir_all(&out).map_err(io("create output directory"))?;
            let rows = std::iter::once((reference_name.as_str(), &reference_report))
                .chain(reports.iter().map(|(n, r)| (n.as_str(), r)));
            let report_csv = out.join("report.csv");
            std::fs::write(&report_csv, reports_csv(rows)).map_err(io("write report"))?;
            let comparison_csv = out.join("comparison.csv");
            std::fs::write(&comparison_csv, table.to_csv()).map_err(io("write report"))?;
            ctx.manifest.outputs.extend([report_csv, comparison_csv]);
            ctx.finish(&cfg, out.join("report_manifest.json"))
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Vocab { .. } => "vocab",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Negatives { .. } => "negatives",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
        }
    }
}

struct Ctx {
    manifest: RunManifest,
    args: serde_json::Value,
}

impl Ctx {
    fn hash_input(&mut self, name: &str, path: &Path) -> Result<(), Failure> {
        let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
        let mut key = name.to_string();
        let mut n = 2;
        while self.manifest.corpus_hashes.contains_key(&key) {
            key = format!("{name}_{n}");
            n += 1;
        }
        self.manifest
            .corpus_hashes
            .insert(key, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn read_text(&mut self, name: &str, path: &Path) -> Result<Vec<String>, Failure> {
        self.hash_input(name, path)?;
        Ok(read_lines(path)?)
    }

    fn read_corpus(
        &mut self,
        name: &str,
        path: &Path,
        vocab: &Vocabulary,
        max_len: usize,
        origin: Origin,
    ) -> Result<Vec<SentenceRecord>, Failure> {
        let lines = self.read_text(name, path)?;
        Ok(encode_lines(vocab, &lines, max_len, origin))
    }

    fn load_vocab(&mut self, path: &Path) -> Result<Vocabulary, Failure> {
        self.hash_input("vocab", path)?;
        Ok(Vocabulary::load(path)?)
    }

    fn load_model(&mut self, path: &Path, vocab: &Vocabulary) -> Result<Model<f32>, Failure> {
        self.hash_input("checkpoint", path)?;
        let model = Model::<f32>::load(path)?;
        if model.config.vocab_size != vocab.size() {
            return Err(Failure::config(
                "VOCAB_MISMATCH",
                format!(
                    "checkpoint vocab_size {} differs from vocabulary size {}",
                    model.config.vocab_size,
                    vocab.size()
                ),
            ));
        }
        Ok(model)
    }

    fn report(
        &mut self,
        name: &str,
        path: &Path,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<CsMetricsReport, Failure> {
        let recs = self.read_corpus(name, path, vocab, max_len, Origin::Generated)?;
        Ok(corpus_report(&recs, vocab, Lang::Matrix)?)
    }

    fn finish(mut self, cfg: &RunConfig, path: PathBuf) -> Outcome {
        self.manifest.config = json!({ "args": self.args, "run": cfg });
        self.manifest.save(&path)?;
        Ok(())
    }
}

fn require_seed(seed: Option<u64>) -> Result<u64, Failure> {
    seed.ok_or_else(|| Failure::config("MISSING_SEED", "--seed is required"))
}

fn need(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    p.ok_or_else(|| {
        Failure::config(
            "MISSING_INPUT",
            format!("{flag} is required for this stage"),
        )
    })
}

fn missing(path: &Path, e: std::io::Error) -> Failure {
    Failure::config("MISSING_INPUT", format!("{}: {e}", path.display()))
}

fn io(what: &'static str) -> impl Fn(std::io::Error) -> Failure {
    move |e| Failure::runtime("IO", format!("{what}: {e}"))
}

fn ensure_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(io("create output directory"))
        }
        _ => Ok(()),
    }
}

/// `out.txt` -> `out.txt.manifest.json`
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_candidate(s: &str) -> Result<(String, PathBuf), Failure> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(Failure::config(
            "BAD_ARGUMENT",
            format!("candidate `{s}` is not name=path"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_parsing() {
        assert_eq!(
            parse_candidate("a=b/c.txt").unwrap(),
            ("a".to_string(), PathBuf::from("b/c.txt"))
        );
        assert!(parse_candidate("a").is_err());
        assert!(parse_candidate("=x").is_err());
    }

    #[test]
    fn manifest_next_to_output() {
        assert_eq!(
            sibling_manifest(Path::new("d/v.txt")),
            PathBuf::from("d/v.txt.manifest.json")
        );
    }
}
