mod manifest;
mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pesg_core::evaluation::{abstractness, lead3, mean_abstractness, mean_rouge, rouge_all, AbstractnessStats, RougeSet};
use pesg_core::inference::detokenize;
use pesg_core::retrieval::ProtoIndex;
use pesg_core::synth::synth_corpus;
use pesg_core::tensor_core::Tensor;
use pesg_core::text::{read_corpus, tokenize, write_corpus, Example, RawRecord, Vocabulary};
use pesg_core::training::{corpus_vocabulary, paired_examples, source_examples, train, RunDir};
use pesg_core::{Pesg64, TrainConfig};

use manifest::Manifest;

const VOCAB_FILE: &str = "vocab.txt";
const INDEX_FILE: &str = "index.tsv";

#[derive(Parser)]
#[command(name = "pesg", version, about = "Prototype-editing summary generator")]
struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "PESG_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic case corpus (JSONL).
    SynthCorpus {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a frequency-ranked vocabulary from documents and summaries.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the TF-IDF prototype index over a corpus.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k prototypes for every document of a query corpus (CSV).
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Skip index entry i for query i (queries are the indexed corpus).
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the output directory holds checkpoints and logs.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; built from the corpus when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 50_000)]
        vocab_cap: usize,
        /// Polishing hops K.
        #[arg(long)]
        hops: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode summaries for a corpus, one per line.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        /// Also write per-step gate and attention traces as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROUGE-1/2/L per example plus the mean (CSV).
    Evaluate {
        /// Candidate summaries, one per line.
        #[arg(long)]
        cand: PathBuf,
        /// References: one per line, or a JSONL corpus (its summaries).
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extractive-fragment and novel n-gram statistics (CSV).
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Candidate summaries to analyse instead of the references.
        #[arg(long)]
        cand: Option<PathBuf>,
        /// Write Lead-3 summaries of the corpus documents here.
        #[arg(long)]
        lead3: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the cross-attention matrix S and its weights for one example.
    Inspect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Editing gate and copy probability per decoding step (CSV + SVG).
    InspectGate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fact-checker scores of greedy summaries (CSV).
    Check {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per hop count (CSV: K,R1,R2,RL).
    HopSweep {
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluation corpus; defaults to the training corpus.
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        /// Inclusive range such as `1..4`, or a comma list.
        #[arg(long, default_value = "1..4")]
        hops: String,
        #[arg(long, default_value_t = 50_000)]
        vocab_cap: usize,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Training settings; each flag overrides the config file.
#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    max_src: Option<usize>,
    #[arg(long)]
    max_tgt: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    init_std: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Training output directory.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint step; latest when absent.
    #[arg(long)]
    step: Option<u64>,
    #[arg(long)]
    corpus: PathBuf,
    /// Exclude prototype i for record i (the corpus is the training corpus).
    #[arg(long)]
    exclude_self: bool,
}

struct Ctx {
    data_dir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { data_dir: cli.data_dir };
    match run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string().replace('\n', " ")).collect();
            eprintln!("error: {}", msg.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("create {}", parent.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("write {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Vec<RawRecord>> {
    read_corpus(path).with_context(|| format!("read corpus {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Summaries from a JSONL corpus, or lines of a plain text file.
fn read_summaries(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(load_corpus(path)?.iter().map(|r| r.summary_text().to_string()).collect())
    } else {
        read_lines(path)
    }
}

fn train_config(args: &TrainArgs, ctx: &Ctx) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(p) => {
            let p = ctx.path(p);
            let text = fs::read_to_string(&p).with_context(|| format!("read {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parse {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident => $g:ident),*) => { $(if let Some(v) = args.$f { c.$g = v; })* };
    }
    set!(emb_dim => emb_dim, hidden => hidden, batch_size => batch_size, keep_prob => keep_prob, lr => lr,
         steps => steps, seed => seed, checkpoint_every => checkpoint_every,
         max_src => max_src, max_tgt => max_tgt, epsilon => epsilon, eta => eta, init_std => init_std);
    c.validate()?;
    Ok(c)
}

struct LoadedRun {
    model: Pesg64,
    vocab: Vocabulary,
    examples: Vec<Example>,
    checkpoint: PathBuf,
    config: TrainConfig,
}

fn load_run(ctx: &Ctx, args: &RunArgs) -> Result<LoadedRun> {
    let dir = RunDir::new(ctx.path(&args.run));
    let (config, _) = dir.read_config().context("read run configuration")?;
    let (model, step) = dir.load_model::<f64>(args.step).context("load checkpoint")?;
    let vocab = Vocabulary::load(&dir.root.join(VOCAB_FILE)).context("load run vocabulary")?;
    let index = ProtoIndex::load(&dir.root.join(INDEX_FILE)).context("load run index")?;
    let records = load_corpus(&ctx.path(&args.corpus))?;
    let examples = source_examples(&records, &index, &vocab, config.limits(), args.exclude_self)?;
    Ok(LoadedRun {
        model,
        vocab,
        examples,
        checkpoint: dir.checkpoint_path(step),
        config,
    })
}

impl LoadedRun {
    fn example(&self, i: usize) -> Result<&Example> {
        self.examples
            .get(i)
            .with_context(|| format!("example {i} out of range (corpus has {})", self.examples.len()))
    }

    fn manifest(&self, command: &str, ctx: &Ctx, args: &RunArgs, extra: serde_json::Value) -> Result<Manifest> {
        let dir = ctx.path(&args.run);
        Manifest::new(command, json!({ "train": self.config, "options": extra, "step": args.step }))
            .seed(self.config.seed)
            .checkpoint(&self.checkpoint)?
            .input("corpus", &ctx.path(&args.corpus))?
            .input("vocab", &dir.join(VOCAB_FILE))?
            .input("index", &dir.join(INDEX_FILE))
    }
}

fn rouge_csv(scores: &[RougeSet]) -> String {
    let mut s = String::from("id,R1_P,R1_R,R1_F,R2_P,R2_R,R2_F,RL_P,RL_R,RL_F\n");
    let row = |s: &mut String, id: &str, r: &RougeSet| {
        let _ = writeln!(
            s,
            "{id},{},{},{},{},{},{},{},{},{}",
            r.r1.precision, r.r1.recall, r.r1.f1, r.r2.precision, r.r2.recall, r.r2.f1, r.rl.precision, r.rl.recall, r.rl.f1
        );
    };
    for (i, r) in scores.iter().enumerate() {
        row(&mut s, &i.to_string(), r);
    }
    row(&mut s, "mean", &mean_rouge(scores));
    s
}

fn matrix_csv(t: &Tensor<f64>) -> String {
    let mut s = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = (0..t.cols()).map(|j| t.get(i, j).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn parse_hops(arg: &str) -> Result<Vec<usize>> {
    let arg = arg.trim();
    let hops: Vec<usize> = if let Some((a, b)) = arg.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim_start_matches('=').trim().parse()?);
        if a > b {
            bail!("empty hop range {arg}");
        }
        (a..=b).collect()
    } else {
        arg.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if hops.is_empty() || hops.contains(&0) {
        bail!("hop counts must be positive, got {arg}");
    }
    Ok(hops)
}

fn train_into(
    ctx: &Ctx,
    corpus_path: &Path,
    records: &[RawRecord],
    vocab: &Vocabulary,
    config: &TrainConfig,
    out: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let index = ProtoIndex::build(records)?;
    let data = paired_examples(records, &index, vocab, config.limits(), true)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    index.save(&out.join(INDEX_FILE))?;
    let every = config.steps.div_ceil(20).max(1);
    let summary = train::<f64>(config, vocab.len(), &data, out, |m| {
        if m.step % every == 0 {
            eprintln!(
                "step {} L_s/token {:.4} L_l {:.4} L_g {:.4} grad_norm {:.3}",
                m.step, m.seq_per_token, m.local, m.global, m.grad_norm
            );
        }
    })?;
    let dir = RunDir::new(out);
    let last = dir.checkpoint_path(summary.last_step);
    Manifest::new("train", json!({ "train": config }))
        .seed(config.seed)
        .checkpoint(&last)?
        .input("corpus", &ctx.path(corpus_path))?
        .output("vocab", &out.join(VOCAB_FILE))?
        .output("index", &out.join(INDEX_FILE))?
        .output("metrics", &dir.metrics_path())?
        .output("config", &dir.config_path())?
        .write_beside(out)?;
    Ok(last)
}

fn run(ctx: &Ctx, command: Command) -> Result<()> {
    match command {
        Command::SynthCorpus { n, seed, out } => {
            if n == 0 {
                bail!("--n must be positive");
            }
            let out = ctx.path(&out);
            ensure_parent(&out)?;
            write_corpus(&out, &synth_corpus(n, seed))?;
            Manifest::new("synth-corpus", json!({ "n": n }))
                .seed(seed)
                .output("corpus", &out)?
                .write_beside(&out)?;
        }
        Command::BuildVocab { corpus, cap, out } => {
            let (corpus, out) = (ctx.path(&corpus), ctx.path(&out));
            let vocab = corpus_vocabulary(&load_corpus(&corpus)?, cap)?;
            ensure_parent(&out)?;
            vocab.save(&out)?;
            Manifest::new("build-vocab", json!({ "cap": cap }))
                .input("corpus", &corpus)?
                .output("vocab", &out)?
                .write_beside(&out)?;
            println!("{} entries", vocab.len());
        }
        Command::BuildIndex { corpus, out } => {
            let (corpus, out) = (ctx.path(&corpus), ctx.path(&out));
            let index = ProtoIndex::build(&load_corpus(&corpus)?)?;
            ensure_parent(&out)?;
            index.save(&out)?;
            Manifest::new("build-index", json!({}))
                .input("corpus", &corpus)?
                .output("index", &out)?
                .write_beside(&out)?;
        }
        Command::Retrieve { index, corpus, k, exclude_self, out } => {
            let (index_path, corpus, out) = (ctx.path(&index), ctx.path(&corpus), ctx.path(&out));
            let index = ProtoIndex::load(&index_path)?;
            let mut s = String::from("query,rank,id,score\n");
            for (q, rec) in load_corpus(&corpus)?.iter().enumerate() {
                let hits = index.top_k(rec.doc_text(), k, exclude_self.then_some(q));
                for (rank, h) in hits.iter().enumerate() {
                    let _ = writeln!(s, "{q},{},{},{}", rank + 1, h.id, h.score);
                }
            }
            write_text(&out, &s)?;
            Manifest::new("retrieve", json!({ "k": k, "exclude_self": exclude_self }))
                .input("index", &index_path)?
                .input("corpus", &corpus)?
                .output("hits", &out)?
                .write_beside(&out)?;
        }
        Command::Train { corpus, vocab, vocab_cap, hops, train: targs, out } => {
            let mut config = train_config(&targs, ctx)?;
            if let Some(k) = hops {
                config.hops = k;
            }
            let records = load_corpus(&ctx.path(&corpus))?;
            let vocab = match vocab {
                Some(p) => Vocabulary::load(&ctx.path(&p))?,
                None => corpus_vocabulary(&records, vocab_cap)?,
            };
            let last = train_into(ctx, &corpus, &records, &vocab, &config, &ctx.path(&out))?;
            println!("{}", last.display());
        }
        Command::Generate { run: rargs, beam, max_len, trace, out } => {
            let r = load_run(ctx, &rargs)?;
            let out = ctx.path(&out);
            let mut lines = String::new();
            let mut traces = Vec::new();
            for (i, ex) in r.examples.iter().enumerate() {
                let h = r.model.summarize(ex, beam, max_len).with_context(|| format!("example {i}"))?;
                lines.push_str(&detokenize(&h.tokens, &r.vocab, &ex.oov)?);
                lines.push('\n');
                if trace.is_some() {
                    let steps: Vec<_> = h
                        .tokens
                        .iter()
                        .zip(&h.trace)
                        .map(|(&tok, t)| {
                            json!({
                                "token": detokenize(&[tok], &r.vocab, &ex.oov).unwrap_or_default(),
                                "gamma": t.gamma,
                                "p_gen": t.p_gen,
                                "attention": t.attn,
                                "fact_attention": t.delta_m,
                                "pattern_attention": t.delta_s,
                            })
                        })
                        .collect();
                    traces.push(json!({ "example": i, "log_prob": h.log_prob, "steps": steps }));
                }
            }
            write_text(&out, &lines)?;
            let mut m = r
                .manifest("generate", ctx, &rargs, json!({ "beam": beam, "max_len": max_len }))?
                .output("summaries", &out)?;
            if let Some(t) = trace {
                let t = ctx.path(&t);
                write_text(&t, &(serde_json::to_string_pretty(&traces)? + "\n"))?;
                m = m.output("trace", &t)?;
            }
            m.write_beside(&out)?;
        }
        Command::Evaluate { cand, refs, out } => {
            let (cand, refs, out) = (ctx.path(&cand), ctx.path(&refs), ctx.path(&out));
            let c = read_lines(&cand)?;
            let r = read_summaries(&refs)?;
            if c.len() != r.len() {
                bail!("{} candidates but {} references", c.len(), r.len());
            }
            let scores: Vec<RougeSet> = c.iter().zip(&r).map(|(c, r)| rouge_all(&tokenize(c), &tokenize(r))).collect();
            write_text(&out, &rouge_csv(&scores))?;
            Manifest::new("evaluate", json!({}))
                .input("candidates", &cand)?
                .input("references", &refs)?
                .output("scores", &out)?
                .write_beside(&out)?;
            let m = mean_rouge(&scores);
            println!("R1 {:.4} R2 {:.4} RL {:.4}", m.r1.f1, m.r2.f1, m.rl.f1);
        }
        Command::Stats { corpus, cand, lead3: lead_out, out } => {
            let (corpus_path, out) = (ctx.path(&corpus), ctx.path(&out));
            let records = load_corpus(&corpus_path)?;
            let summaries = match &cand {
                Some(p) => read_lines(&ctx.path(p))?,
                None => records.iter().map(|r| r.summary_text().to_string()).collect(),
            };
            if summaries.len() != records.len() {
                bail!("{} summaries for {} documents", summaries.len(), records.len());
            }
            let mut stats: Vec<AbstractnessStats> = Vec::new();
            for (i, (rec, summ)) in records.iter().zip(&summaries).enumerate() {
                let st = abstractness(&tokenize(rec.doc_text()), &tokenize(summ)).with_context(|| format!("record {i}"))?;
                stats.push(st);
            }
            let mut s = String::from("id,coverage,density,compression,novel_1,novel_2,novel_3,novel_4\n");
            let row = |s: &mut String, id: &str, a: &AbstractnessStats| {
                let _ = writeln!(
                    s,
                    "{id},{},{},{},{},{},{},{}",
                    a.coverage, a.density, a.compression, a.novel[0], a.novel[1], a.novel[2], a.novel[3]
                );
            };
            for (i, a) in stats.iter().enumerate() {
                row(&mut s, &i.to_string(), a);
            }
            row(&mut s, "mean", &mean_abstractness(&stats));
            write_text(&out, &s)?;
            let mut m = Manifest::new("stats", json!({ "candidates": cand.is_some() })).input("corpus", &corpus_path)?;
            if let Some(p) = &cand {
                m = m.input("candidates", &ctx.path(p))?;
            }
            m = m.output("stats", &out)?;
            if let Some(p) = lead_out {
                let p = ctx.path(&p);
                let text: String = records
                    .iter()
                    .map(|r| lead3(&tokenize(r.doc_text())).join(" ") + "\n")
                    .collect();
                write_text(&p, &text)?;
                m = m.output("lead3", &p)?;
            }
            m.write_beside(&out)?;
        }
        Command::Inspect { run: rargs, example, out } => {
            let r = load_run(ctx, &rargs)?;
            let ins = r.model.inspect(r.example(example)?)?;
            let out = ctx.path(&out);
            fs::create_dir_all(&out)?;
            let gates = ins.sru_gates.iter().map(matrix_csv).collect::<String>();
            let files = [
                ("s.csv", matrix_csv(&ins.s)),
                ("a_s.csv", matrix_csv(&ins.a_s)),
                ("a_d.csv", matrix_csv(&ins.a_d)),
                ("e_row.csv", matrix_csv(&ins.e_row)),
                ("sru_gates.csv", gates),
            ];
            let mut m = r.manifest("inspect", ctx, &rargs, json!({ "example": example }))?;
            for (name, body) in files {
                let p = out.join(name);
                write_text(&p, &body)?;
                m = m.output(name, &p)?;
            }
            m.write_beside(&out)?;
        }
        Command::InspectGate { run: rargs, example, max_len, out } => {
            let r = load_run(ctx, &rargs)?;
            let ex = r.example(example)?;
            let h = r.model.summarize(ex, 1, max_len)?;
            let out = ctx.path(&out);
            fs::create_dir_all(&out)?;
            let mut csv = String::from("step,token,gamma,p_gen\n");
            for (t, (&tok, tr)) in h.tokens.iter().zip(&h.trace).enumerate() {
                let word = detokenize(&[tok], &r.vocab, &ex.oov)?;
                let word = if tok == pesg_core::text::EOS { "</s>".to_string() } else { word };
                let _ = writeln!(csv, "{},\"{}\",{},{}", t + 1, word.replace('"', "\"\""), tr.gamma, tr.p_gen);
            }
            let gamma: Vec<f64> = h.trace.iter().map(|t| t.gamma).collect();
            let p_gen: Vec<f64> = h.trace.iter().map(|t| t.p_gen).collect();
            let chart = svg::line_chart(
                &format!("example {example}: editing gate and generation probability"),
                &[
                    svg::Series { name: "gamma", color: "#1f77b4", values: &gamma },
                    svg::Series { name: "p_gen", color: "#d62728", values: &p_gen },
                ],
            );
            let (cp, sp) = (out.join("gate.csv"), out.join("gate.svg"));
            write_text(&cp, &csv)?;
            write_text(&sp, &chart)?;
            r.manifest("inspect-gate", ctx, &rargs, json!({ "example": example, "max_len": max_len }))?
                .output("gate.csv", &cp)?
                .output("gate.svg", &sp)?
                .write_beside(&out)?;
        }
        Command::Check { run: rargs, max_len, out } => {
            let r = load_run(ctx, &rargs)?;
            let out = ctx.path(&out);
            let mut s = String::from("id,tau_r_local,tau_f_local,tau_r_global,tau_f_global\n");
            let mut sum = [0.0; 4];
            for (i, ex) in r.examples.iter().enumerate() {
                let (_, t) = r.model.check_summary(ex, 1, max_len)?;
                let _ = writeln!(s, "{i},{},{},{},{}", t[0], t[1], t[2], t[3]);
                for (a, b) in sum.iter_mut().zip(t) {
                    *a += b;
                }
            }
            let n = r.examples.len().max(1) as f64;
            let _ = writeln!(s, "mean,{},{},{},{}", sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n);
            write_text(&out, &s)?;
            r.manifest("check", ctx, &rargs, json!({ "max_len": max_len }))?
                .output("scores", &out)?
                .write_beside(&out)?;
        }
        Command::HopSweep { corpus, eval_corpus, hops, vocab_cap, beam, max_len, train: targs, out } => {
            let hops = parse_hops(&hops)?;
            let base = train_config(&targs, ctx)?;
            let records = load_corpus(&ctx.path(&corpus))?;
            let vocab = corpus_vocabulary(&records, vocab_cap)?;
            let (eval_records, self_exclude) = match &eval_corpus {
                Some(p) => (load_corpus(&ctx.path(p))?, false),
                None => (records.clone(), true),
            };
            let out = ctx.path(&out);
            fs::create_dir_all(&out)?;
            let mut csv = String::from("K,R1,R2,RL\n");
            let mut m = Manifest::new("hop-sweep", json!({ "train": base, "hops": hops, "beam": beam, "max_len": max_len }))
                .seed(base.seed)
                .input("corpus", &ctx.path(&corpus))?;
            if let Some(p) = &eval_corpus {
                m = m.input("eval_corpus", &ctx.path(p))?;
            }
            for &k in &hops {
                let config = TrainConfig { hops: k, ..base.clone() };
                let dir = out.join(format!("K{k}"));
                eprintln!("training K = {k}");
                let last = train_into(ctx, &corpus, &records, &vocab, &config, &dir)?;
                let (model, _) = RunDir::new(&dir).load_model::<f64>(None)?;
                let index = ProtoIndex::load(&dir.join(INDEX_FILE))?;
                let examples = source_examples(&eval_records, &index, &vocab, config.limits(), self_exclude)?;
                let mut scores = Vec::new();
                for (ex, rec) in examples.iter().zip(&eval_records) {
                    let h = model.summarize(ex, beam, max_len)?;
                    let cand = detokenize(&h.tokens, &vocab, &ex.oov)?;
                    scores.push(rouge_all(&tokenize(&cand), &tokenize(rec.summary_text())));
                }
                let mr = mean_rouge(&scores);
                let _ = writeln!(csv, "{k},{},{},{}", mr.r1.f1, mr.r2.f1, mr.rl.f1);
                m = m.output(&format!("K{k}_checkpoint"), &last)?;
            }
            let p = out.join("hop_sweep.csv");
            write_text(&p, &csv)?;
            m.output("hop_sweep.csv", &p)?.write_beside(&out)?;
            print!("{csv}");
        }
    }
    Ok(())
}
