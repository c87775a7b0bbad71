//! `lexki` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 domain error (`error[Name]: message` on stderr),
//! 2 usage error. Progress goes to stderr as one JSON object per line; the
//! stage summary goes to stdout, as JSON with `--json`.

pub mod config;
pub mod manifest;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};
use lexki::analysis::{
    aligned_knowledge_distance, apply_variant, embedding_report, knowledge_content_tokens, strategy_ablation,
    NounLexicon, VariantKind, VariantParams,
};
use lexki::corpus::{
    build_knowledge_base, load_dialog_corpus, KnowledgeBase, StopwordList, Vocabulary,
};
use lexki::metrics::{evaluate, throughput, EvalInputs, Throughput};
use lexki::model::{source_ids, train_dialog, DialogModel, KiInputs};
use lexki::retriever::{
    alignments_to_jsonl, build_index, build_weak_supervision, coverage_stats, load_alignments, mine_corpus,
    train_retriever, MiningStrategies, RetrieverModel,
};
use lexki::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use config::{Preset, RunConfig};
use manifest::{FileDigest, Manifest};

#[derive(Debug, Parser)]
#[command(name = "lexki", version, about = "Knowledge-internalized dialog models")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base values for keys the config file leaves out.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Machine-readable summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Every stage currently runs on one, which is also
    /// the bit-reproducible setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// First sentence of every article, one knowledge item per line.
    BuildKb {
        #[arg(long)]
        articles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the vocabulary and train the token-knowledge retriever on
    /// weak supervision from the knowledge base.
    TrainRetriever {
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Dialog corpus whose tokens join the vocabulary.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Vocabulary file to write.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Align utterance tokens of a corpus to knowledge items.
    Mine {
        #[arg(long)]
        retriever: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        no_stopword_masking: bool,
        #[arg(long)]
        no_exact_matching: bool,
    },
    /// Train the dialog model, with the KI objective when lambda > 0.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Beam-search a response for every example of a corpus.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score generated responses against a corpus.
    Evaluate {
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Enables the entity score (and coverage with --alignments).
        #[arg(long)]
        kb: Option<PathBuf>,
        /// With --vocab, adds perplexity on the corpus.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Alignments mined on this corpus, for knowledge coverage.
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embedding geometry, ablation variants and strategy ablation.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Talk to a checkpoint on stdin. An empty line re-prompts, `quit` or
    /// end of input leaves.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        context_turns: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum Analyze {
    /// PCA coordinates and distances for probe tokens and their knowledge.
    Geometry {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Comma-separated tokens; knowledge content tokens of any probe
        /// that names an article are added.
        #[arg(long, value_delimiter = ',', required = true)]
        probes: Vec<String>,
        /// With --corpus, also report the mean aligned-token distance.
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite token-level alignments into an ablation variant.
    Variant {
        /// token_level, random, sentence_level, factual_only or linguistic_only.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Extra nouns, one per line, for the factual split.
        #[arg(long)]
        nouns: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine with every strategy, then with each one switched off.
    Strategies {
        #[arg(long)]
        retriever: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        /// Directory for the three alignment files and the summary.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `argv` (program name first) and run the stage.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return usage_error(e, &argv),
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    match dispatch(cli, &argv, &mut stdin.lock(), &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.name());
            1
        }
    }
}

fn usage_error(e: clap::Error, argv: &[String]) -> i32 {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        print!("{e}");
        return 0;
    }
    eprint!("{e}");
    let mut cmd = Cli::command();
    let sub = argv.iter().skip(1).find_map(|a| cmd.find_subcommand(a).map(|s| s.get_name().to_string()));
    let help = match sub.and_then(|s| cmd.find_subcommand_mut(&s).map(|c| c.render_help())) {
        Some(h) => h,
        None => cmd.render_help(),
    };
    eprintln!("\n{help}");
    2
}

struct Ctx<'a> {
    cfg: RunConfig,
    json: bool,
    argv: &'a [String],
}

impl Ctx<'_> {
    fn progress(&self, value: serde_json::Value) {
        eprintln!("{value}");
    }

    fn finish(
        &self,
        out: &mut dyn Write,
        command: &str,
        summary: serde_json::Value,
        human: &str,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<()> {
        if let Some(main) = outputs.first() {
            let m = Manifest {
                command: command.to_string(),
                argv: self.argv.to_vec(),
                tool_version: env!("CARGO_PKG_VERSION"),
                config_hash: self.cfg.hash(),
                config: self.cfg.to_toml(),
                seed: self.cfg.seed,
                threads: self.cfg.threads,
                inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
                outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            };
            m.write(main)?;
        }
        if self.json {
            writeln!(out, "{summary}")?;
        } else {
            writeln!(out, "{human}")?;
        }
        Ok(())
    }
}

fn dispatch(cli: Cli, argv: &[String], input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let fallback = match cli.preset.as_deref() {
        Some(p) => Preset::parse(p)?,
        None => Preset::Desk,
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, fallback)?,
        None => RunConfig::preset(fallback),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, json: cli.json, argv };
    let paths = ctx.cfg.paths.clone();
    let or = |p: Option<PathBuf>, d: &PathBuf| p.unwrap_or_else(|| d.clone());
    match cli.command {
        Command::BuildKb { articles, out: dst } => {
            build_kb(&ctx, out, &or(articles, &paths.articles), &or(dst, &paths.kb))
        }
        Command::TrainRetriever {
            kb,
            corpus,
            vocab,
            out: dst,
            epochs,
        } => train_retriever_cmd(
            &ctx,
            out,
            &or(kb, &paths.kb),
            &or(corpus, &paths.train),
            &or(vocab, &paths.vocab),
            &or(dst, &paths.retriever),
            epochs,
        ),
        Command::Mine {
            retriever,
            kb,
            vocab,
            corpus,
            out: dst,
            stopwords,
            no_stopword_masking,
            no_exact_matching,
        } => {
            let strategies = MiningStrategies {
                stopword_masking: ctx.cfg.mining.stopword_masking && !no_stopword_masking,
                exact_matching: ctx.cfg.mining.exact_matching && !no_exact_matching,
            };
            mine_cmd(
                &ctx,
                out,
                &MineArgs {
                    retriever: or(retriever, &paths.retriever),
                    kb: or(kb, &paths.kb),
                    vocab: or(vocab, &paths.vocab),
                    corpus: or(corpus, &paths.train),
                    stopwords: stopwords.or(paths.stopwords.clone()),
                },
                strategies,
                &or(dst, &paths.alignments),
            )
        }
        Command::Train {
            train,
            valid,
            vocab,
            kb,
            alignments,
            lambda,
            out: dst,
            epochs,
            max_steps,
        } => {
            let mut c = ctx;
            if let Some(e) = epochs {
                c.cfg.train.max_epochs = e;
            }
            if max_steps.is_some() {
                c.cfg.train.max_steps = max_steps;
            }
            if let Some(l) = lambda {
                c.cfg.ki.lambda = l;
            }
            c.cfg.ki.validate()?;
            train_cmd(
                &c,
                out,
                &TrainArgs {
                    train: or(train, &paths.train),
                    valid: or(valid, &paths.valid),
                    vocab: or(vocab, &paths.vocab),
                    kb: or(kb, &paths.kb),
                    alignments: or(alignments, &paths.alignments),
                },
                &or(dst, &paths.checkpoint),
            )
        }
        Command::Generate {
            checkpoint,
            vocab,
            corpus,
            out: dst,
            beam_size,
            max_len,
        } => {
            let mut c = ctx;
            if let Some(b) = beam_size {
                c.cfg.decode.beam_size = b;
            }
            if let Some(m) = max_len {
                c.cfg.decode.max_len = m;
            }
            c.cfg.decode.validate()?;
            generate_cmd(
                &c,
                out,
                &or(checkpoint, &paths.checkpoint),
                &or(vocab, &paths.vocab),
                &or(corpus, &paths.test),
                &or(dst, &paths.hypotheses),
            )
        }
        Command::Evaluate {
            hypotheses,
            corpus,
            kb,
            checkpoint,
            vocab,
            alignments,
            stopwords,
            out: dst,
        } => evaluate_cmd(
            &ctx,
            out,
            &EvalArgs {
                hypotheses: or(hypotheses, &paths.hypotheses),
                corpus: or(corpus, &paths.test),
                kb,
                checkpoint,
                vocab: or(vocab, &paths.vocab),
                alignments,
                stopwords: stopwords.or(paths.stopwords.clone()),
            },
            &or(dst, &paths.report),
        ),
        Command::Analyze { what } => analyze_cmd(&ctx, out, what),
        Command::Chat {
            checkpoint,
            vocab,
            context_turns,
        } => {
            let turns = context_turns.unwrap_or(ctx.cfg.chat.context_turns);
            chat(
                &ctx,
                input,
                out,
                &or(checkpoint, &paths.checkpoint),
                &or(vocab, &paths.vocab),
                turns,
            )
        }
    }
}

fn stopword_list(path: &Option<PathBuf>) -> Result<StopwordList> {
    match path {
        Some(p) => StopwordList::load(p),
        None => Ok(StopwordList::default()),
    }
}

fn check_vocab(found: &Option<String>, vocab: &Vocabulary, what: &str) -> Result<()> {
    match found {
        Some(f) if *f != vocab.fingerprint() => Err(Error::Config(format!(
            "{what} was trained with a different vocabulary (fingerprint {f})"
        ))),
        _ => Ok(()),
    }
}

fn build_kb(ctx: &Ctx, out: &mut dyn Write, articles: &Path, dst: &Path) -> Result<()> {
    let kb = build_knowledge_base(articles)?;
    kb.save(dst)?;
    ctx.progress(json!({"stage": "build-kb", "items": kb.len()}));
    ctx.finish(
        out,
        "build-kb",
        json!({"items": kb.len(), "out": dst}),
        &format!("wrote {} knowledge items to {}", kb.len(), dst.display()),
        &[articles],
        &[dst],
    )
}

fn train_retriever_cmd(
    ctx: &Ctx,
    out: &mut dyn Write,
    kb_path: &Path,
    corpus_path: &Path,
    vocab_path: &Path,
    dst: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let kb = KnowledgeBase::load(kb_path)?;
    let corpus = load_dialog_corpus(corpus_path)?;
    let vocab = Vocabulary::from_corpus(&corpus, Some(&kb), ctx.cfg.vocab_max_size)?;
    vocab.save(vocab_path)?;
    ctx.progress(json!({"stage": "vocab", "size": vocab.len()}));
    let sw = stopword_list(&ctx.cfg.paths.stopwords)?;
    let rc = ctx.cfg.retriever.with_vocab(vocab.len());
    let pairs = build_weak_supervision(&kb, &sw, rc.max_len);
    let mut tc = ctx.cfg.retriever.train.clone();
    if let Some(e) = epochs {
        tc.max_epochs = e;
    }
    let (mut model, report) = train_retriever(&pairs, &kb, &vocab, rc, &tc, ctx.cfg.seed, &mut |e| {
        ctx.progress(json!({"stage": "train-retriever", "epoch": e}))
    })?;
    model.vocab_fingerprint = Some(vocab.fingerprint());
    model.save(dst)?;
    let summary = json!({
        "vocab": vocab.len(),
        "pairs": pairs.len(),
        "train_pairs": report.train_pairs,
        "heldout_pairs": report.heldout.len(),
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "out": dst,
    });
    ctx.finish(
        out,
        "train-retriever",
        summary,
        &format!(
            "trained retriever on {} weak pairs ({} epochs, best {}), vocabulary {} -> {}",
            report.train_pairs,
            report.epochs.len(),
            report.best_epoch,
            vocab.len(),
            dst.display()
        ),
        &[kb_path, corpus_path],
        &[dst, vocab_path],
    )
}

struct MineArgs {
    retriever: PathBuf,
    kb: PathBuf,
    vocab: PathBuf,
    corpus: PathBuf,
    stopwords: Option<PathBuf>,
}

fn mine_cmd(ctx: &Ctx, out: &mut dyn Write, a: &MineArgs, strategies: MiningStrategies, dst: &Path) -> Result<()> {
    let model = RetrieverModel::load(&a.retriever)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    check_vocab(&model.vocab_fingerprint, &vocab, "retriever")?;
    let kb = KnowledgeBase::load(&a.kb)?;
    let corpus = load_dialog_corpus(&a.corpus)?;
    let sw = stopword_list(&a.stopwords)?;
    let index = build_index(&model, &kb, &vocab)?;
    let records = mine_corpus(&model, &index, &kb, &vocab, &corpus, strategies, &sw)?;
    std::fs::write(dst, alignments_to_jsonl(&records))?;
    let stats = coverage_stats(&records, &corpus).ok();
    ctx.progress(json!({"stage": "mine", "records": records.len()}));
    let mut inputs = vec![a.retriever.as_path(), a.vocab.as_path(), a.kb.as_path(), a.corpus.as_path()];
    if let Some(s) = &a.stopwords {
        inputs.push(s);
    }
    ctx.finish(
        out,
        "mine",
        json!({"records": records.len(), "strategies": strategies, "coverage": stats, "out": dst}),
        &format!(
            "mined {} alignments over {} utterances (knowledge per token type {:.2}) -> {}",
            records.len(),
            corpus.len(),
            stats.as_ref().map_or(0.0, |s| s.per_token_type),
            dst.display()
        ),
        &inputs,
        &[dst],
    )
}

struct TrainArgs {
    train: PathBuf,
    valid: PathBuf,
    vocab: PathBuf,
    kb: PathBuf,
    alignments: PathBuf,
}

fn train_cmd(ctx: &Ctx, out: &mut dyn Write, a: &TrainArgs, dst: &Path) -> Result<()> {
    let train = load_dialog_corpus(&a.train)?;
    let valid = load_dialog_corpus(&a.valid)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let lambda = ctx.cfg.ki.lambda;
    let mut inputs = vec![a.train.as_path(), a.valid.as_path(), a.vocab.as_path()];
    let ki_data = if lambda > 0.0 {
        if !a.kb.exists() || !a.alignments.exists() {
            return Err(Error::MissingAlignments);
        }
        inputs.push(&a.kb);
        inputs.push(&a.alignments);
        Some((KnowledgeBase::load(&a.kb)?, load_alignments(&a.alignments)?))
    } else {
        None
    };
    let ki = ki_data.as_ref().map(|(kb, al)| KiInputs {
        config: ctx.cfg.ki.clone(),
        kb,
        alignments: al,
    });
    let mc = ctx.cfg.model.with_vocab(vocab.len());
    let outcome = train_dialog(&train, &valid, &vocab, mc, ki, lambda, &ctx.cfg.train, ctx.cfg.seed, &mut |e| {
        ctx.progress(json!({"stage": "train", "epoch": e}))
    })?;
    outcome.model.save(dst)?;
    let log = step_log_path(dst);
    let mut lines = String::new();
    for s in &outcome.steps {
        lines.push_str(&serde_json::to_string(s).map_err(|e| Error::Config(e.to_string()))?);
        lines.push('\n');
    }
    std::fs::write(&log, lines)?;
    let first = outcome.steps.first();
    let summary = json!({
        "lambda": lambda,
        "steps": outcome.steps.len(),
        "epochs": outcome.epochs.len(),
        "best_epoch": outcome.best_epoch,
        "first_step": first,
        "best_valid_nll": outcome.epochs.get(outcome.best_epoch.saturating_sub(1)).map(|e| e.valid_nll),
        "skipped_negatives": outcome.skipped_negatives,
        "out": dst,
        "step_log": log,
    });
    ctx.finish(
        out,
        "train",
        summary,
        &format!(
            "trained lambda={lambda} for {} steps ({} epochs, best {}), first nll {:.4} -> {}",
            outcome.steps.len(),
            outcome.epochs.len(),
            outcome.best_epoch,
            first.map_or(f32::NAN, |s| s.nll),
            dst.display()
        ),
        &inputs,
        &[dst, &log],
    )
}

/// Per-step losses of a training run, one JSON object per line.
pub fn step_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".steps.jsonl");
    checkpoint.with_file_name(name)
}

/// Decode timing written next to the hypotheses for `evaluate`.
pub fn throughput_path(hypotheses: &Path) -> PathBuf {
    let mut name = hypotheses.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".throughput.json");
    hypotheses.with_file_name(name)
}

#[derive(Debug, Serialize, Deserialize)]
struct Hypothesis {
    response: String,
}

fn load_model(checkpoint: &Path, vocab_path: &Path) -> Result<(DialogModel, Vocabulary)> {
    let model = DialogModel::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    check_vocab(&model.vocab_fingerprint, &vocab, "checkpoint")?;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint expects {} tokens, vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok((model, vocab))
}

fn generate_cmd(
    ctx: &Ctx,
    out: &mut dyn Write,
    checkpoint: &Path,
    vocab_path: &Path,
    corpus_path: &Path,
    dst: &Path,
) -> Result<()> {
    let (model, vocab) = load_model(checkpoint, vocab_path)?;
    let corpus = load_dialog_corpus(corpus_path)?;
    let mut lines = String::new();
    let mut tokens = 0;
    let start = Instant::now();
    for ex in &corpus {
        let (src, _) = source_ids(&ex.context, &ex.utterance, &vocab, model.config.max_len)?;
        let ids = model.generate(&src, &ctx.cfg.decode)?;
        tokens += ids.len();
        let h = Hypothesis {
            response: vocab.decode_text(&ids),
        };
        lines.push_str(&serde_json::to_string(&h).map_err(|e| Error::Config(e.to_string()))?);
        lines.push('\n');
    }
    let tp = throughput(corpus.len(), tokens, start.elapsed());
    std::fs::write(dst, lines)?;
    let tp_path = throughput_path(dst);
    std::fs::write(&tp_path, serde_json::to_string(&tp).map_err(|e| Error::Config(e.to_string()))? + "\n")?;
    ctx.progress(json!({"stage": "generate", "responses": corpus.len()}));
    ctx.finish(
        out,
        "generate",
        json!({"responses": corpus.len(), "throughput": tp, "out": dst}),
        &format!(
            "generated {} responses ({:.1} tokens/s) -> {}",
            corpus.len(),
            tp.tokens_per_sec,
            dst.display()
        ),
        &[checkpoint, vocab_path, corpus_path],
        &[dst, &tp_path],
    )
}

fn load_hypotheses(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Hypothesis>(l).map(|h| h.response).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

struct EvalArgs {
    hypotheses: PathBuf,
    corpus: PathBuf,
    kb: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    vocab: PathBuf,
    alignments: Option<PathBuf>,
    stopwords: Option<PathBuf>,
}

fn evaluate_cmd(ctx: &Ctx, out: &mut dyn Write, a: &EvalArgs, dst: &Path) -> Result<()> {
    let hyps = load_hypotheses(&a.hypotheses)?;
    let corpus = load_dialog_corpus(&a.corpus)?;
    let refs: Vec<String> = corpus.iter().map(|e| e.response.clone()).collect();
    let knowledge: Vec<Option<String>> = corpus.iter().map(|e| e.knowledge.clone()).collect();
    let mut inputs = vec![a.hypotheses.as_path(), a.corpus.as_path()];
    let kb = match &a.kb {
        Some(p) => {
            inputs.push(p);
            Some(KnowledgeBase::load(p)?)
        }
        None => None,
    };
    let ppl = match &a.checkpoint {
        Some(ck) => {
            inputs.push(ck);
            inputs.push(&a.vocab);
            let (model, vocab) = load_model(ck, &a.vocab)?;
            Some(model.perplexity(&corpus, &vocab)?)
        }
        None => None,
    };
    let sw = stopword_list(&a.stopwords)?;
    let alignments = match &a.alignments {
        Some(p) => {
            inputs.push(p);
            Some(load_alignments(p)?)
        }
        None => None,
    };
    let tp_path = throughput_path(&a.hypotheses);
    let tp: Throughput = if tp_path.exists() {
        inputs.push(&tp_path);
        serde_json::from_str(&std::fs::read_to_string(&tp_path)?).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
    } else {
        throughput(0, 0, std::time::Duration::ZERO)
    };
    let report = evaluate(&EvalInputs {
        hypotheses: &hyps,
        references: &refs,
        knowledge: Some(&knowledge),
        kb: kb.as_ref(),
        alignments: alignments.as_deref().map(|al| (al, &sw)),
        ppl,
        throughput: tp,
    })?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dst, text + "\n")?;
    let human = format!(
        "BLEU-4 {:.2}  ROUGE-L {:.4}  Distinct-1/2 {:.4}/{:.4}  safe {:.3}{}{} -> {}",
        report.bleu4,
        report.rouge_l,
        report.distinct1,
        report.distinct2,
        report.safe_rate,
        report.ppl.map(|p| format!("  PPL {p:.3}")).unwrap_or_default(),
        report.wiki_f1.map(|w| format!("  wikiF1 {w:.4}")).unwrap_or_default(),
        dst.display()
    );
    let summary = serde_json::to_value(&report).map_err(|e| Error::Config(e.to_string()))?;
    ctx.finish(out, "evaluate", summary, &human, &inputs, &[dst])
}

fn analyze_cmd(ctx: &Ctx, out: &mut dyn Write, what: Analyze) -> Result<()> {
    let paths = ctx.cfg.paths.clone();
    let or = |p: Option<PathBuf>, d: &PathBuf| p.unwrap_or_else(|| d.clone());
    match what {
        Analyze::Geometry {
            checkpoint,
            vocab,
            kb,
            probes,
            alignments,
            corpus,
            stopwords,
            out: dst,
        } => {
            let (ck, vp, kp) = (or(checkpoint, &paths.checkpoint), or(vocab, &paths.vocab), or(kb, &paths.kb));
            let (model, vocab) = load_model(&ck, &vp)?;
            let kb = KnowledgeBase::load(&kp)?;
            let sw = stopword_list(&stopwords.or(paths.stopwords.clone()))?;
            let mut know = Vec::new();
            for p in &probes {
                if let Some(k) = kb.title_match(&p.to_lowercase()) {
                    know.extend(knowledge_content_tokens(&kb.items()[k].text, &sw).into_iter().filter(|t| vocab.get(t).is_some()));
                }
            }
            let report = embedding_report(&model, &vocab, &probes, &know)?;
            let mut inputs = vec![ck.clone(), vp.clone(), kp.clone()];
            let aligned = match (alignments, corpus) {
                (Some(al), Some(cp)) => {
                    let records = load_alignments(&al)?;
                    let examples = load_dialog_corpus(&cp)?;
                    inputs.push(al);
                    inputs.push(cp);
                    Some(aligned_knowledge_distance(&model, &vocab, &kb, &examples, &records, &sw)?)
                }
                (None, None) => None,
                _ => return Err(Error::Config("--alignments and --corpus go together".into())),
            };
            let dst = or(dst, &paths.report);
            let value = json!({"embedding": report, "aligned_knowledge_distance": aligned});
            std::fs::write(&dst, serde_json::to_string_pretty(&value).map_err(|e| Error::Config(e.to_string()))? + "\n")?;
            let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let mut human = format!("{} points projected to 2-D -> {}", report.labels.len(), dst.display());
            if let Some(d) = aligned {
                human.push_str(&format!("\nmean aligned-token distance {d:.4}"));
            }
            ctx.finish(out, "analyze geometry", value, &human, &refs, &[&dst])
        }
        Analyze::Variant {
            kind,
            alignments,
            kb,
            corpus,
            nouns,
            out: dst,
        } => {
            let kind = VariantKind::parse(&kind)?;
            let (ap, kp, cp) = (or(alignments, &paths.alignments), or(kb, &paths.kb), or(corpus, &paths.train));
            let records = load_alignments(&ap)?;
            let kb = KnowledgeBase::load(&kp)?;
            let examples = load_dialog_corpus(&cp)?;
            let mut lex = NounLexicon::from_kb(&kb);
            let mut inputs = vec![ap.clone(), kp.clone(), cp.clone()];
            if let Some(n) = nouns {
                lex.load_extra(&n)?;
                inputs.push(n);
            }
            let params = VariantParams {
                kind,
                seed: ctx.cfg.seed,
            };
            let v = apply_variant(params, &records, &kb, &examples, &lex)?;
            std::fs::write(&dst, alignments_to_jsonl(&v))?;
            let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            ctx.finish(
                out,
                "analyze variant",
                json!({"kind": kind.as_str(), "records": v.len(), "out": dst}),
                &format!("{} variant: {} records -> {}", kind.as_str(), v.len(), dst.display()),
                &refs,
                &[&dst],
            )
        }
        Analyze::Strategies {
            retriever,
            kb,
            vocab,
            corpus,
            stopwords,
            out: dir,
        } => {
            let (rp, kp, vp, cp) = (
                or(retriever, &paths.retriever),
                or(kb, &paths.kb),
                or(vocab, &paths.vocab),
                or(corpus, &paths.train),
            );
            let model = RetrieverModel::load(&rp)?;
            let vocab = Vocabulary::load(&vp)?;
            check_vocab(&model.vocab_fingerprint, &vocab, "retriever")?;
            let kb = KnowledgeBase::load(&kp)?;
            let examples = load_dialog_corpus(&cp)?;
            let sw = stopword_list(&stopwords.or(paths.stopwords.clone()))?;
            let index = build_index(&model, &kb, &vocab)?;
            let ab = strategy_ablation(&model, &index, &kb, &vocab, &examples, &sw)?;
            std::fs::create_dir_all(&dir)?;
            let mut outputs = Vec::new();
            for (name, records) in [
                ("full", &ab.full),
                ("without_stopword_masking", &ab.without_stopword_masking),
                ("without_exact_matching", &ab.without_exact_matching),
            ] {
                let p = dir.join(format!("{name}.jsonl"));
                std::fs::write(&p, alignments_to_jsonl(records))?;
                outputs.push(p);
            }
            let rows: Vec<_> = ab
                .summary()
                .into_iter()
                .map(|(name, n, diff)| json!({"setting": name, "records": n, "differs_from_full": diff}))
                .collect();
            let summary_path = dir.join("summary.json");
            let value = json!({ "settings": rows });
            std::fs::write(&summary_path, serde_json::to_string_pretty(&value).map_err(|e| Error::Config(e.to_string()))? + "\n")?;
            outputs.insert(0, summary_path);
            let human: Vec<String> = ab
                .summary()
                .into_iter()
                .map(|(name, n, diff)| format!("{name:<26} {n:>7} records  {:>6.2}% differ", 100.0 * diff))
                .collect();
            let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
            ctx.finish(out, "analyze strategies", value, &human.join("\n"), &[&rp, &kp, &vp, &cp], &outs)
        }
    }
}

fn chat(
    ctx: &Ctx,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    checkpoint: &Path,
    vocab_path: &Path,
    context_turns: usize,
) -> Result<()> {
    let (model, vocab) = load_model(checkpoint, vocab_path)?;
    let mut history: Vec<String> = Vec::new();
    let mut line = String::new();
    loop {
        if !ctx.json {
            write!(out, "> ")?;
            out.flush()?;
        }
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let utterance = line.trim();
        if utterance.is_empty() {
            continue;
        }
        if utterance == "quit" {
            return Ok(());
        }
        let context = &history[history.len().saturating_sub(context_turns)..];
        match model.respond(context, utterance, &vocab, &ctx.cfg.decode) {
            Ok(r) => {
                if ctx.json {
                    writeln!(out, "{}", json!({ "response": r }))?;
                } else {
                    writeln!(out, "{r}")?;
                }
                history.push(utterance.to_string());
                history.push(r);
            }
            // A bad turn should not end the session.
            Err(e @ (Error::TooLong { .. } | Error::DegenerateInput(_))) => eprintln!("error[{}]: {e}", e.name()),
            Err(e) => return Err(e),
        }
    }
}
