//! `wfcompose`: corpus generation, pretraining, capability training,
//! generation, evaluation, attribution, analysis and gradient checks.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use wfcompose::analysis::{
    export_embeddings, pmi_network, read_routing_log, usage_cosine_similarity, usage_histogram,
};
use wfcompose::checkpoint::Checkpoint;
use wfcompose::gradcheck::{run_gradcheck, GradcheckConfig};
use wfcompose::inference::{attribution_report, evaluate_suite, DecodeConfig, Generator};
use wfcompose::pretrain::{pretrain, PretrainConfig};
use wfcompose::trainer::{RoutingLogEntry, Trainer, TrainingConfig};
use wfcompose::workflow::corpus::{generate_corpus, Corpus, CorpusConfig};
use wfcompose::workflow::tokenizer::Tokenizer;
use wfcompose::workflow::{Split, TaskRecord};
use wfcompose::FORMAT_VERSION;

#[derive(Parser)]
#[command(name = "wfcompose", version, about = "Capability-basis workflow generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task corpus.
    GenCorpus(GenCorpusArgs),
    /// Pretrain the base model on the training split.
    Pretrain(PretrainArgs),
    /// Train capability bases and composer on a frozen base.
    Train(TrainArgs),
    /// Generate workflows for free-text tasks or a task file.
    Generate(GenerateArgs),
    /// Solve and executability rates on a corpus split.
    Evaluate(EvaluateArgs),
    /// Counterfactual attribution of each task's best success.
    Attribute(AttributeArgs),
    /// Routing diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Finite-difference check of every training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tasks_per_domain: Option<usize>,
    #[arg(long)]
    workflows_per_task: Option<usize>,
    #[arg(long)]
    heldout_per_domain: Option<usize>,
    #[arg(long)]
    heldout_unseen_tasks: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required_unless_present = "resume")]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long)]
    reproducible: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue the run stored in this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write the checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Sample instead of greedy decoding.
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "tasks", required_unless_present = "tasks")]
    task: Option<String>,
    /// JSON-lines task records, or one task text per line.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Heldout => Split::Heldout,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-domain basis usage counts from a routing log.
    Usage(LogArgs),
    /// Cosine similarity of per-domain usage frequencies.
    Similarity(LogArgs),
    /// Positive-PMI co-activation pairs.
    Pmi {
        #[command(flatten)]
        log: LogArgs,
        #[arg(long, default_value_t = 20)]
        top_pairs: usize,
    },
    /// Task embeddings, routing vectors and the routing-structure gap.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "heldout")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct LogArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Every tunable of every subcommand; all fields optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Overrides every component seed.
    seed: Option<u64>,
    corpus: CorpusConfig,
    pretrain: PretrainConfig,
    training: TrainingConfig,
    decode: DecodeConfig,
    gradcheck: GradcheckConfig,
}

impl RunConfig {
    /// Defaults, then the file, then `seed` from the command line.
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| {
                    anyhow::Error::new(wfcompose::Error::Config(format!("{}: {e}", p.display())))
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = Some(s);
        }
        if let Some(s) = cfg.seed {
            cfg.pretrain.seed = s;
            cfg.training.seed = s;
            cfg.decode.seed = s;
            cfg.gradcheck.seed = s;
        }
        Ok(cfg)
    }

    fn apply_decode(&mut self, d: &DecodeArgs) {
        if let Some(n) = d.max_new_tokens {
            self.decode.max_new_tokens = n;
        }
        if d.sample {
            self.decode.sample = true;
        }
        if let Some(t) = d.temperature {
            self.decode.temperature = t;
        }
    }
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    format_version: u32,
    command: &'a str,
    config: &'a T,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(path: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    write_json(
        path,
        &Echo {
            format_version: FORMAT_VERSION,
            command,
            config,
        },
    )
}

/// `<out>.<suffix>` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    out.with_file_name(name)
}

fn jsonl_writer(path: &Path, append: bool) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::read(path)?)
}

fn check_vocab(ckpt: &Checkpoint, tk: &Tokenizer) -> Result<()> {
    if ckpt.base.config.vocab_size != tk.vocab_size() {
        return Err(wfcompose::Error::Config(format!(
            "checkpoint vocab_size {} differs from the tokenizer's {}",
            ckpt.base.config.vocab_size,
            tk.vocab_size()
        ))
        .into());
    }
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), a.seed)?;
    let c = &mut cfg.corpus;
    if let Some(n) = a.tasks_per_domain {
        c.tasks_per_domain = n;
    }
    if let Some(n) = a.workflows_per_task {
        c.workflows_per_task = n;
    }
    if let Some(n) = a.heldout_per_domain {
        c.heldout_per_domain = n;
    }
    if let Some(n) = a.heldout_unseen_tasks {
        c.heldout_unseen_tasks = n;
    }
    let seed = cfg.seed.unwrap_or(7);
    let corpus = generate_corpus(seed, &cfg.corpus)?;
    corpus.write_dir(&a.out)?;
    echo_config(&a.out.join("config.json"), "gen-corpus", &cfg)?;
    let m = &corpus.manifest.counts;
    println!("wrote corpus to {} ({m:?})", a.out.display());
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), a.seed)?;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    let corpus = Corpus::read_dir(&a.corpus)?;
    let tk = Tokenizer::new();
    cfg.pretrain.model.vocab_size = tk.vocab_size();
    echo_config(&sibling(&a.out, "config.json"), "pretrain", &cfg)?;
    let mut log = jsonl_writer(&sibling(&a.out, "log.jsonl"), false)?;
    let base = pretrain(&tk, &corpus.train, &cfg.pretrain, |e| {
        if e.step % 50 == 0 {
            info!("pretrain step {} epoch {} loss {:.4}", e.step, e.epoch, e.loss);
        }
        write_line(&mut log, e).map_err(|e| wfcompose::Error::Io(std::io::Error::other(e.to_string())))
    })?;
    log.flush()?;
    Checkpoint::base_only(base).write(&a.out)?;
    println!("wrote base checkpoint {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let corpus = Corpus::read_dir(&a.corpus)?;
    let tk = Tokenizer::new();
    let (mut trainer, cfg, append) = if let Some(resume) = &a.resume {
        let ckpt = load_checkpoint(resume)?;
        check_vocab(&ckpt, &tk)?;
        let t = Trainer::resume(ckpt, corpus.train.clone(), &tk)?;
        let cfg = RunConfig {
            training: t.config.clone(),
            ..RunConfig::default()
        };
        (t, cfg, true)
    } else {
        let mut cfg = RunConfig::load(a.config.as_deref(), a.seed)?;
        if let Some(e) = a.epochs {
            cfg.training.epochs = e;
        }
        if a.max_steps.is_some() {
            cfg.training.max_steps = a.max_steps;
        }
        if a.reproducible {
            cfg.training.reproducible = true;
        }
        let base = a.base.as_ref().expect("clap requires --base without --resume");
        let ckpt = load_checkpoint(base)?;
        check_vocab(&ckpt, &tk)?;
        let t = Trainer::new(ckpt.base, corpus.train.clone(), &tk, cfg.training.clone())?;
        (t, cfg, false)
    };
    echo_config(&sibling(&a.out, "config.json"), "train", &cfg)?;
    let mut log = jsonl_writer(&sibling(&a.out, "train_log.jsonl"), append)?;
    let mut routing = jsonl_writer(&sibling(&a.out, "routing.jsonl"), append)?;
    let total = trainer.total_steps();
    info!("training {} steps from step {}", total, trainer.step_index());
    while !trainer.is_done() {
        let rec = trainer.step()?;
        write_line(&mut log, &rec.log)?;
        for r in &rec.routing {
            write_line(&mut routing, r)?;
        }
        let s = rec.log.step + 1;
        if s % 100 == 0 {
            info!("step {s}/{total} total loss {:.4}", rec.log.loss.total);
        }
        if a.checkpoint_every.is_some_and(|n| s % n == 0) {
            log.flush()?;
            routing.flush()?;
            trainer.checkpoint().write(&a.out)?;
        }
    }
    log.flush()?;
    routing.flush()?;
    trainer.checkpoint().write(&a.out)?;
    println!("wrote checkpoint {} after {} steps", a.out.display(), trainer.step_index());
    Ok(())
}

fn read_task_lines(path: &Path) -> Result<Vec<Result<TaskRecord, String>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<TaskRecord>(t).map_err(|_| t.to_string()));
    }
    Ok(out)
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), a.seed)?;
    cfg.apply_decode(&a.decode);
    let ckpt = load_checkpoint(&a.ckpt)?;
    let tk = Tokenizer::new();
    check_vocab(&ckpt, &tk)?;
    let generator = Generator::new(&ckpt.base, ckpt.capability.as_ref(), &tk);
    let inputs = match (&a.task, &a.tasks) {
        (Some(t), _) => vec![Err(t.clone())],
        (None, Some(p)) => read_task_lines(p)?,
        (None, None) => bail!("one of --task or --tasks is required"),
    };
    echo_config(&sibling(&a.out, "config.json"), "generate", &cfg)?;
    let mut out = jsonl_writer(&a.out, false)?;
    for input in inputs {
        let r = match input {
            Ok(task) => generator.generate_for_task(&task, &cfg.decode)?,
            Err(text) => generator.generate(&text, &cfg.decode)?,
        };
        write_line(&mut out, &r)?;
    }
    out.flush()?;
    println!("wrote generations to {}", a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), None)?;
    cfg.apply_decode(&a.decode);
    let ckpt = load_checkpoint(&a.ckpt)?;
    let tk = Tokenizer::new();
    check_vocab(&ckpt, &tk)?;
    let corpus = Corpus::read_dir(&a.corpus)?;
    let split: Split = a.split.into();
    let generator = Generator::new(&ckpt.base, ckpt.capability.as_ref(), &tk);
    let (report, results) = evaluate_suite(&generator, corpus.split(split), split.name(), &cfg.decode)?;
    echo_config(&sibling(&a.out, "config.json"), "evaluate", &cfg)?;
    let mut gens = jsonl_writer(&sibling(&a.out, "generations.jsonl"), false)?;
    let mut routing = jsonl_writer(&sibling(&a.out, "routing.jsonl"), false)?;
    for (task, r) in corpus.split(split).iter().zip(&results) {
        write_line(&mut gens, r)?;
        if let Some(d) = &r.routing {
            write_line(
                &mut routing,
                &RoutingLogEntry {
                    format_version: FORMAT_VERSION,
                    step: None,
                    task_id: task.task_id.clone(),
                    domain: task.domain,
                    alpha: d.alpha.clone(),
                    temperature: d.temperature,
                    active_set: d.active_set.clone(),
                },
            )?;
        }
    }
    gens.flush()?;
    routing.flush()?;
    write_json(&a.out, &report)?;
    println!(
        "{} split: solve rate {:.2}%, executability {:.2}% over {} tasks",
        report.split, report.solve_rate, report.executability_rate, report.tasks
    );
    Ok(())
}

fn attribute_cmd(a: AttributeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let tk = Tokenizer::new();
    check_vocab(&ckpt, &tk)?;
    let corpus = Corpus::read_dir(&a.corpus)?;
    let generator = Generator::new(&ckpt.base, ckpt.capability.as_ref(), &tk);
    let summary = attribution_report(&generator, corpus.split(a.split.into()))?;
    write_json(&a.out, &summary)?;
    println!(
        "positive-Δ fraction of the top-routed basis: {:.3} over {} tasks ({} excluded)",
        summary.positive_fraction,
        summary.tasks.len(),
        summary.excluded.len()
    );
    Ok(())
}

fn load_log(path: &Path) -> Result<(Vec<RoutingLogEntry>, usize)> {
    let (entries, skipped) = read_routing_log(path)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed routing log lines");
    }
    Ok((entries, skipped))
}

fn analyze_cmd(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Usage(a) => {
            let (entries, skipped) = load_log(&a.log)?;
            let stats = usage_histogram(&entries, skipped)?;
            write_json(&a.out, &stats)?;
            println!("max active-slot share {:.3}", stats.max_slot_share());
        }
        AnalyzeCommand::Similarity(a) => {
            let (entries, skipped) = load_log(&a.log)?;
            let sim = usage_cosine_similarity(&usage_histogram(&entries, skipped)?)?;
            write_json(&a.out, &sim)?;
        }
        AnalyzeCommand::Pmi { log, top_pairs } => {
            let (entries, _) = load_log(&log.log)?;
            let net = pmi_network(&entries, top_pairs)?;
            write_json(&log.out, &net)?;
            println!("{} positive-PMI pairs over {} routed tasks", net.edges.len(), net.tasks);
        }
        AnalyzeCommand::Embed { ckpt, corpus, split, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let tk = Tokenizer::new();
            check_vocab(&ckpt, &tk)?;
            let corpus = Corpus::read_dir(&corpus)?;
            let generator = Generator::new(&ckpt.base, ckpt.capability.as_ref(), &tk);
            let (records, structure) = export_embeddings(&generator, corpus.split(split.into()))?;
            let mut w = jsonl_writer(&out, false)?;
            for r in &records {
                write_line(&mut w, r)?;
            }
            w.flush()?;
            write_json(&sibling(&out, "structure.json"), &structure)?;
            println!("routing-structure gap {:.4} (dense {:.4})", structure.gap, structure.gap_dense);
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let cfg = RunConfig::load(a.config.as_deref(), None)?;
    let rows = run_gradcheck(&cfg.gradcheck)?;
    println!("{:<10} {:<6} {:>6} {:>14} {:>14}  result", "term", "params", "coords", "max abs err", "max rel err");
    for r in &rows {
        println!(
            "{:<10} {:<6} {:>6} {:>14.3e} {:>14.3e}  {}",
            r.term,
            r.params,
            r.coordinates,
            r.max_abs_error,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Table<'a> {
            format_version: u32,
            rows: &'a [wfcompose::gradcheck::GradcheckRow],
        }
        write_json(out, &Table { format_version: FORMAT_VERSION, rows: &rows })?;
    }
    Ok(rows.iter().all(|r| r.passed))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<wfcompose::Error>() {
        Some(wfcompose::Error::Numerical { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Attribute(a) => attribute_cmd(a),
        Command::Analyze(c) => analyze_cmd(c),
        Command::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
