use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kgfuse::checkpoint::{write_atomic, Checkpoint, CheckpointKind};
use kgfuse::config::RunConfig;
use kgfuse::fusion::{FusedModel, FusionConfig};
use kgfuse::kg_store::{ingest_tsv, KnowledgeGraph, Triple};
use kgfuse::kgbert::{export_embeddings, serialize_triple, train_scorer, KgEmbeddingTable, ScorerTrainOptions, TripleScorer};
use kgfuse::linker::EntityLexicon;
use kgfuse::metrics::{
    comparison_tsv, evaluate, evaluate_pair, render_comparison, report_tsv, run_qa, summarize, BaseLm,
    Evaluation, FusedLm, LanguageModel,
};
use kgfuse::pipeline::{self, ExperimentConfig};
use kgfuse::synth::{self, QaExample};
use kgfuse::text::Vocab;
use kgfuse::trainer::{encode_corpus, link_corpus, train_fused, train_lm};
use kgfuse::transformer::AttentionMode;
use kgfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "kgfuse", version, about = "Knowledge-graph fusion for small causal language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-graph files.
    Kg {
        #[command(subcommand)]
        cmd: KgCmd,
        #[command(flatten)]
        common: Common,
    },
    /// Synthetic KG, corpora and QA sets.
    Synth {
        #[command(subcommand)]
        cmd: SynthCmd,
        #[command(flatten)]
        common: Common,
    },
    /// Triple scorer and embedding export.
    Kgbert {
        #[command(subcommand)]
        cmd: KgbertCmd,
        #[command(flatten)]
        common: Common,
    },
    /// Causal LM pretraining.
    Lm {
        #[command(subcommand)]
        cmd: LmCmd,
        #[command(flatten)]
        common: Common,
    },
    /// Fusion training.
    Fuse {
        #[command(subcommand)]
        cmd: FuseCmd,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluation of one checkpoint.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline against fused comparison tables.
    Report {
        #[command(subcommand)]
        cmd: ReportCmd,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum KgCmd {
    /// Validate and normalize a triple TSV into `<out>/graph.tsv`.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reject malformed lines instead of skipping them.
        #[arg(long)]
        strict: bool,
    },
    /// Print entity, relation and triple counts.
    Stats {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write graph, templates, corpora, QA sets and vocabulary.
    Gen,
}

#[derive(Args)]
struct Data {
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand)]
enum KgbertCmd {
    /// Train on every KG triple; writes `scorer.ckpt`, `embeddings.tsv`, `loss.tsv`.
    Train {
        #[command(flatten)]
        data: Data,
    },
    /// Score the triples of a TSV file; writes `scores.tsv`.
    Score {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        triples: PathBuf,
    },
}

#[derive(Subcommand)]
enum LmCmd {
    /// Writes `lm.ckpt` and `loss.tsv`.
    Pretrain {
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FuseCmd {
    /// Writes `fused.ckpt` and `loss.tsv`.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: Data,
    /// LM or fused checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Token P/R/F1, exact match and factual accuracy; writes `qa_report.tsv`.
    Qa(EvalArgs),
    /// BLEU, ROUGE-L and perplexity; writes `gen_report.tsv`.
    Gen(EvalArgs),
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Writes `comparison.txt` and `comparison.tsv`.
    Compare {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        cfg.check_paths()?;
        let out = common.out.clone().or_else(|| cfg.out.clone());
        Ok(Ctx { cfg, out })
    }

    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        match flag {
            Some(p) => Ok(p.clone()),
            None => self
                .cfg
                .data_path(key)
                .map(Path::to_path_buf)
                .map_err(|_| Error::Config(format!("give --{key} or set data.{key} in the config"))),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .ok_or_else(|| Error::Config("give --out or set `out` in the config".into()))?;
        Ok(dir)
    }

    fn graph(&self, data: &Data) -> Result<KnowledgeGraph> {
        Ok(ingest_tsv(self.path(&data.kg, "kg")?, true)?.graph)
    }

    fn vocab(&self, flag: &Option<PathBuf>) -> Result<Vocab> {
        Vocab::load(self.path(flag, "vocab")?)
    }
}

/// Stage every output in memory, then write each one atomically.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Self {
        Outputs { dir, files: Vec::new() }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn commit(self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (name, bytes) in &self.files {
            write_atomic(&self.dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn loss_log(losses: &[f64]) -> String {
    let mut s = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{l:.8}");
    }
    s
}

/// On divergence the model still holds the last good parameters; keep them
/// as `last_good.ckpt` and report the failure.
fn finish_training(result: Result<Vec<f64>>, dir: &Path, last_good: impl FnOnce() -> Checkpoint) -> Result<Vec<f64>> {
    match result {
        Err(e @ Error::Divergence { .. }) => {
            fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
            last_good().save(&dir.join("last_good.ckpt"))?;
            Err(e)
        }
        other => other,
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn kg(cmd: KgCmd, ctx: &Ctx) -> Result<()> {
    match cmd {
        KgCmd::Ingest { input, strict } => {
            let ing = ingest_tsv(ctx.path(&input, "kg")?, strict)?;
            let mut out = Outputs::new(ctx.out_dir()?);
            out.add("graph.tsv", ing.graph.to_tsv());
            out.commit()?;
            println!(
                "ingested {} triples ({} duplicates, {} malformed lines skipped)",
                ing.graph.num_triples(),
                ing.duplicates,
                ing.skipped
            );
        }
        KgCmd::Stats { input } => {
            let g = ingest_tsv(ctx.path(&input, "kg")?, false)?.graph;
            println!("entities\t{}", g.num_entities());
            println!("relations\t{}", g.num_relations());
            println!("triples\t{}", g.num_triples());
        }
    }
    Ok(())
}

fn synth_gen(ctx: &Ctx) -> Result<()> {
    let mut spec = ctx.cfg.synth.clone();
    spec.seed = ctx.cfg.seed;
    let data = synth::generate(&spec)?;
    let vocab = pipeline::build_vocab(&data)?;
    let g = &data.graph;
    let mut out = Outputs::new(ctx.out_dir()?);
    out.add("graph.tsv", g.to_tsv());
    out.add("templates.tsv", synth::templates_to_tsv(&data.templates));
    out.add("pretrain.txt", data.pretrain_corpus.join("\n") + "\n");
    out.add("fusion.txt", data.fusion_corpus.join("\n") + "\n");
    out.add("qa_holdout.tsv", synth::qa_to_tsv(g, &data.qa_holdout));
    out.add("qa_seen.tsv", synth::qa_to_tsv(g, &data.qa_seen));
    out.add("vocab.txt", vocab.to_file_string());
    out.commit()?;
    println!(
        "{} triples: {} held out, {} pretraining, {} fusion",
        g.num_triples(),
        data.split.holdout.len(),
        data.split.pretrain.len(),
        data.split.fusion.len()
    );
    Ok(())
}

fn kgbert(cmd: KgbertCmd, ctx: &Ctx) -> Result<()> {
    let defaults = ExperimentConfig::default();
    match cmd {
        KgbertCmd::Train { data } => {
            let g = ctx.graph(&data)?;
            let vocab = ctx.vocab(&data.vocab)?;
            let dir = ctx.out_dir()?;
            let cfg = &ctx.cfg;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut scorer = TripleScorer::init(cfg.model.config(vocab.len(), AttentionMode::Bidirectional), &mut rng)?;
            let t = cfg.train_options(defaults.scorer_train.epochs, defaults.scorer_train.optim.lr, 1);
            let opts = ScorerTrainOptions {
                epochs: t.epochs,
                batch_size: t.batch_size,
                optim: t.optim,
                seed: t.seed,
                negatives_per_positive: 1,
            };
            let result = train_scorer(&g, &vocab, &mut scorer, g.triples(), &opts);
            let losses = finish_training(result, &dir, || Checkpoint::from_scorer(&scorer, 0, cfg.seed))?;
            let table = export_embeddings(&g, &vocab, &scorer)?;
            let mut out = Outputs::new(dir);
            out.add("scorer.ckpt", Checkpoint::from_scorer(&scorer, losses.len() as u64, cfg.seed).to_bytes());
            out.add("embeddings.tsv", table.to_file_string(&g));
            out.add("loss.tsv", loss_log(&losses));
            out.commit()?;
            println!("trained scorer for {} steps, final loss {:.4}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
        }
        KgbertCmd::Score { data, checkpoint, triples } => {
            let g = ctx.graph(&data)?;
            let vocab = ctx.vocab(&data.vocab)?;
            let scorer = Checkpoint::load(&checkpoint)?.to_scorer()?;
            let mut report = String::from("subject\trelation\tobject\tin_graph\tscore\n");
            for (i, line) in read_lines(&triples)?.iter().enumerate() {
                let f: Vec<&str> = line.split('\t').map(str::trim).collect();
                if f.len() < 3 {
                    return Err(Error::Parse {
                        path: triples.display().to_string(),
                        line: i + 1,
                        msg: "expected subject<TAB>relation<TAB>object".into(),
                    });
                }
                let t = Triple::new(g.entity(f[0])?, g.relation(f[1])?, g.entity(f[2])?);
                let s = scorer.score(&serialize_triple(&g, &t, &vocab)?)?;
                let _ = writeln!(report, "{}\t{}\t{}\t{}\t{s:.6}", f[0], f[1], f[2], g.contains(&t));
            }
            let mut out = Outputs::new(ctx.out_dir()?);
            out.add("scores.tsv", report.clone());
            out.commit()?;
            print!("{report}");
        }
    }
    Ok(())
}

fn lm_pretrain(vocab: Option<PathBuf>, corpus: Option<PathBuf>, ctx: &Ctx) -> Result<()> {
    let defaults = ExperimentConfig::default();
    let cfg = &ctx.cfg;
    let vocab = ctx.vocab(&vocab)?;
    let lines = read_lines(&ctx.path(&corpus, "corpus")?)?;
    let dir = ctx.out_dir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lm = kgfuse::transformer::TransformerModel::init(cfg.model.config(vocab.len(), AttentionMode::Causal), &mut rng)?;
    let opts = cfg.train_options(defaults.lm_train.epochs, defaults.lm_train.optim.lr, 2);
    let result = train_lm(&mut lm, &encode_corpus(&vocab, &lines), &opts);
    let losses = finish_training(result, &dir, || Checkpoint::from_lm(&lm, 0, cfg.seed))?;
    let mut out = Outputs::new(dir);
    out.add("lm.ckpt", Checkpoint::from_lm(&lm, losses.len() as u64, cfg.seed).to_bytes());
    out.add("loss.tsv", loss_log(&losses));
    out.commit()?;
    println!("pretrained LM for {} steps, final loss {:.4}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn fuse_train(
    data: Data,
    lm: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    corpus: Option<PathBuf>,
    ctx: &Ctx,
) -> Result<()> {
    let defaults = ExperimentConfig::default();
    let cfg = &ctx.cfg;
    let g = ctx.graph(&data)?;
    let vocab = ctx.vocab(&data.vocab)?;
    let base = Checkpoint::load(&ctx.path(&lm, "lm")?)?.to_lm()?;
    let table = KgEmbeddingTable::load(&ctx.path(&embeddings, "embeddings")?, &g)?;
    let lines = read_lines(&ctx.path(&corpus, "corpus")?)?;
    let dir = ctx.out_dir()?;
    let mut fc = FusionConfig::new(cfg.fusion_mode, &base.config);
    fc.radius = cfg.fusion_radius;
    fc.cotrain_kg = cfg.cotrain_kg;
    if let Some(l) = cfg.fusion_layer {
        fc.layer = l;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fm = FusedModel::init(&base, &table, fc, &mut rng)?;
    let lexicon = EntityLexicon::build(&g, None, true)?;
    let linked = link_corpus(&lexicon, &vocab, &encode_corpus(&vocab, &lines));
    let opts = cfg.train_options(defaults.fusion_train.epochs, defaults.fusion_train.optim.lr, 3);
    let result = train_fused(&mut fm, &linked, &g, &opts, cfg.train_base);
    let losses = finish_training(result, &dir, || Checkpoint::from_fused(&fm, 0, cfg.seed))?;
    let mut out = Outputs::new(dir);
    out.add("fused.ckpt", Checkpoint::from_fused(&fm, losses.len() as u64, cfg.seed).to_bytes());
    out.add("loss.tsv", loss_log(&losses));
    out.commit()?;
    println!(
        "trained {} fusion for {} steps, final loss {:.4}, alpha {:.4}",
        fm.fusion.mode,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        fm.alpha()
    );
    Ok(())
}

/// A loaded LM or fused checkpoint behind the common evaluation interface.
enum Loaded {
    Base(kgfuse::transformer::TransformerModel),
    Fused(FusedModel),
}

impl Loaded {
    fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        match ck.kind {
            CheckpointKind::Lm => Ok(Loaded::Base(ck.to_lm()?)),
            CheckpointKind::Fused => Ok(Loaded::Fused(ck.to_fused()?)),
            CheckpointKind::Scorer => Err(Error::Checkpoint(format!(
                "{}: a scorer checkpoint cannot be evaluated as a language model",
                path.display()
            ))),
        }
    }

    fn name(&self) -> String {
        match self {
            Loaded::Base(_) => pipeline::BASELINE_NAME.to_string(),
            Loaded::Fused(f) => pipeline::fused_name(f.fusion.mode),
        }
    }

    fn with_lm<T>(&self, name: String, env: &EvalEnv, f: impl FnOnce(&dyn LanguageModel) -> Result<T>) -> Result<T> {
        match self {
            Loaded::Base(model) => f(&BaseLm {
                name,
                model,
                vocab: &env.vocab,
            }),
            Loaded::Fused(model) => f(&FusedLm {
                name,
                model,
                vocab: &env.vocab,
                lexicon: &env.lexicon,
                graph: &env.graph,
            }),
        }
    }
}

struct EvalEnv {
    graph: KnowledgeGraph,
    vocab: Vocab,
    lexicon: EntityLexicon,
    qa: Vec<QaExample>,
    templates: synth::Templates,
}

impl EvalEnv {
    fn load(ctx: &Ctx, data: &Data, qa: &Option<PathBuf>, templates: &Option<PathBuf>) -> Result<Self> {
        let graph = ctx.graph(data)?;
        let vocab = ctx.vocab(&data.vocab)?;
        let lexicon = EntityLexicon::build(&graph, None, true)?;
        let qa = synth::load_qa(&ctx.path(qa, "qa")?, &graph)?;
        let templates = match ctx.path(templates, "templates") {
            Ok(p) => synth::load_templates(&p)?,
            Err(_) => synth::default_templates(&graph),
        };
        Ok(EvalEnv {
            graph,
            vocab,
            lexicon,
            qa,
            templates,
        })
    }

    fn gen_items(&self) -> Result<Vec<kgfuse::metrics::GenExample>> {
        self.qa
            .iter()
            .map(|q| {
                Ok(kgfuse::metrics::GenExample {
                    prompt: q.question.clone(),
                    reference: synth::render_sentence(&self.graph, &self.templates, &q.triple)?,
                })
            })
            .collect()
    }

    fn evaluate(&self, model: &Loaded, name: String) -> Result<Evaluation> {
        let gen = self.gen_items()?;
        let refs: Vec<String> = gen.iter().map(|g| g.reference.clone()).collect();
        let ppl = encode_corpus(&self.vocab, &refs);
        model.with_lm(name, self, |lm| evaluate(lm, &self.qa, &gen, &ppl, &self.lexicon))
    }
}

fn eval(cmd: EvalCmd, ctx: &Ctx) -> Result<()> {
    let (args, is_qa) = match cmd {
        EvalCmd::Qa(a) => (a, true),
        EvalCmd::Gen(a) => (a, false),
    };
    let env = EvalEnv::load(ctx, &args.data, &args.qa, &args.templates)?;
    let model = Loaded::load(&args.checkpoint)?;
    let dir = ctx.out_dir()?;
    let name = model.name();
    let report = if is_qa {
        let qa = model.with_lm(name.clone(), &env, |lm| run_qa(lm, &env.qa, &env.lexicon))?;
        summarize(&name, qa, Vec::new(), f64::NAN)?.report
    } else {
        env.evaluate(&model, name)?.report
    };
    let keep: &[&str] = if is_qa {
        &["precision", "recall", "f1", "exact_match", "factual_accuracy"]
    } else {
        &["bleu", "rouge_l", "perplexity"]
    };
    let full = report_tsv(&report);
    let mut lines = full.lines();
    let mut tsv = format!("{}\n", lines.next().unwrap_or_default());
    for line in lines {
        if line.split('\t').nth(1).is_some_and(|m| keep.contains(&m)) {
            let _ = writeln!(tsv, "{line}");
        }
    }
    let mut out = Outputs::new(dir);
    out.add(if is_qa { "qa_report.tsv" } else { "gen_report.tsv" }, tsv.clone());
    out.commit()?;
    print!("{tsv}");
    Ok(())
}

fn report_compare(
    data: Data,
    baseline: PathBuf,
    fused: PathBuf,
    qa: Option<PathBuf>,
    templates: Option<PathBuf>,
    ctx: &Ctx,
) -> Result<()> {
    let env = EvalEnv::load(ctx, &data, &qa, &templates)?;
    let base = Loaded::load(&baseline)?;
    let treated = Loaded::load(&fused)?;
    let dir = ctx.out_dir()?;
    let base_name = base.name();
    let mut fused_name = treated.name();
    if fused_name == base_name {
        fused_name = format!("{fused_name} ({})", fused.display());
    }
    let mode = match &treated {
        Loaded::Fused(f) => f.fusion.mode.to_string(),
        Loaded::Base(_) => "none".to_string(),
    };
    let b = env.evaluate(&base, base_name)?;
    let f = env.evaluate(&treated, fused_name)?;
    let cmp = evaluate_pair(&b, &f, ctx.cfg.seed)?;
    let rows = [(mode.as_str(), &cmp)];
    let table = render_comparison(&mode, &rows);
    let mut out = Outputs::new(dir);
    out.add("comparison.txt", table.clone());
    out.add("comparison.tsv", comparison_tsv(&rows));
    out.commit()?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Kg { cmd, common } => kg(cmd, &Ctx::new(&common)?),
        Command::Synth { cmd: SynthCmd::Gen, common } => synth_gen(&Ctx::new(&common)?),
        Command::Kgbert { cmd, common } => kgbert(cmd, &Ctx::new(&common)?),
        Command::Lm {
            cmd: LmCmd::Pretrain { vocab, corpus },
            common,
        } => lm_pretrain(vocab, corpus, &Ctx::new(&common)?),
        Command::Fuse {
            cmd: FuseCmd::Train {
                data,
                lm,
                embeddings,
                corpus,
            },
            common,
        } => fuse_train(data, lm, embeddings, corpus, &Ctx::new(&common)?),
        Command::Eval { cmd, common } => eval(cmd, &Ctx::new(&common)?),
        Command::Report {
            cmd: ReportCmd::Compare {
                data,
                baseline,
                fused,
                qa,
                templates,
            },
            common,
        } => report_compare(data, baseline, fused, qa, templates, &Ctx::new(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
