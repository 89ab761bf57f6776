//! `xgpt`: data generation, staged training, captioning, evaluation and
//! checkpoint averaging.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xgpt_core::checkpoint;
use xgpt_core::data::{generate_dataset, load_dataset, Example};
use xgpt_core::decoding::caption;
use xgpt_core::metrics::{bleu4, cider, parse_captions, report, EvalCorpus};
use xgpt_core::model::SharedTransformer;
use xgpt_core::parallel::{default_threads, map_indexed, with_threads};
use xgpt_core::training::{average_checkpoints, prepare, read_checkpoint_index, run_stage, LogLine, Stage, Trainer, DEFAULT_TOP_K};
use xgpt_core::verify::{full_suite, TOLERANCE};
use xgpt_core::vocab::Vocabulary;
use xgpt_core::Error;

use config::{RunConfig, RESOLVED_FILE};

#[derive(Parser, Debug)]
#[command(name = "xgpt", version, about = "Cross-modal generative pre-training for captioning")]
struct Cli {
    /// Worker threads; falls back to XGPT_THREADS. 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic region/caption dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Run a pre-training stage.
    Pretrain {
        #[arg(long, default_value = "out-domain")]
        stage: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Captioning-only training.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Caption every image of a dataset.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Model configuration; defaults to the checkpoint directory's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score candidate captions against references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value = "bleu4,cider")]
        metrics: String,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Average the best checkpoints of a run directory.
    AvgCkpt {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of ic,imlm,ida,tifg.
    #[arg(long)]
    tasks: Option<String>,
    /// Share one layer stack between encoder and decoder: on or off.
    #[arg(long)]
    share: Option<String>,
    /// Denoising placeholder per span (single) or per token (multi).
    #[arg(long)]
    ida_mask: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Separate validation dataset; otherwise the last `val_count` examples.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Initial weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn resolve_config(stage: Stage, run: &RunArgs) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = &run.config {
        c.apply_file(p)?;
    }
    c.stage = stage;
    let flags = [
        ("tasks", run.tasks.clone()),
        ("share", run.share.clone()),
        ("ida_mask", run.ida_mask.clone()),
        ("steps", run.steps.map(|v| v.to_string())),
        ("seed", run.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, &v).map_err(|e| Failure::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
        }
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    Ok(c)
}

fn load_model(cfg: &RunConfig, vocab: &Vocabulary, feat_dim: usize, init: Option<&Path>) -> CliResult<SharedTransformer> {
    let mc = cfg.model_config(vocab.len(), feat_dim);
    Ok(match init {
        Some(p) => SharedTransformer::from_tensors(mc, &checkpoint::load(p)?)?,
        None => SharedTransformer::new(mc, cfg.seed)?,
    })
}

fn train_command(stage: Stage, run: &RunArgs, threads: usize) -> CliResult<()> {
    let cfg = resolve_config(stage, run)?;
    let (examples, vocab) = load_dataset(&run.data)?;
    let (train, val): (Vec<Example>, Vec<Example>) = match &run.val {
        Some(dir) => (examples, load_dataset(dir)?.0),
        None => {
            if examples.len() <= cfg.val_count {
                return Err(Failure::Usage(format!(
                    "{} examples leave nothing to train on after holding out val_count = {}",
                    examples.len(),
                    cfg.val_count
                )));
            }
            let cut = examples.len() - cfg.val_count;
            (examples[..cut].to_vec(), examples[cut..].to_vec())
        }
    };
    let feat_dim = train[0].regions.feat_dim();
    let model = load_model(&cfg, &vocab, feat_dim, run.init.as_deref())?;
    std::fs::create_dir_all(&run.out).map_err(|e| io_failure(&run.out, e))?;
    let resolved = run.out.join(RESOLVED_FILE);
    std::fs::write(&resolved, cfg.resolved_text()).map_err(|e| io_failure(&resolved, e))?;
    let (train, val) = (prepare(&train, &vocab), prepare(&val, &vocab));
    with_threads(threads, |mode| -> CliResult<()> {
        let mut trainer = Trainer::new(model, cfg.plan(mode)?)?;
        run_stage(&mut trainer, &train, &val, Some(&run.out), |line| {
            if let LogLine::Val { step, validation } = line {
                eprintln!("step {step}: val IC loss {:.4}, exact match {:.3}", validation.ic_loss, validation.exact_match);
            }
        })?;
        Ok(())
    })
}

fn caption_command(
    ckpt: &Path,
    data: &Path,
    config: Option<&Path>,
    beam: Option<usize>,
    max_len: Option<usize>,
    out: Option<&Path>,
    threads: usize,
) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    let config = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(RESOLVED_FILE),
    };
    cfg.apply_file(&config)?;
    if let Some(b) = beam {
        cfg.beam = b;
    }
    if let Some(m) = max_len {
        cfg.max_len = m;
    }
    if cfg.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let (examples, vocab) = load_dataset(data)?;
    let feat_dim = examples.first().map_or(1, |e| e.regions.feat_dim());
    let model = load_model(&cfg, &vocab, feat_dim, Some(ckpt))?;
    let dc = cfg.decode_config();
    let lines = with_threads(threads, |mode| {
        map_indexed(&examples, mode, |_, e| caption(&model, &e.regions, &dc).map(|h| format!("{}\t{}\n", e.id, vocab.render(&h.tokens))))
    });
    let text: String = lines.into_iter().collect::<xgpt_core::Result<Vec<_>>>()?.concat();
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_failure(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_captions(path: &Path) -> CliResult<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    Ok(parse_captions(&text)?)
}

fn eval_command(candidates: &Path, references: &Path, metrics: &str) -> CliResult<()> {
    let names: Vec<&str> = metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if let Some(bad) = names.iter().find(|m| !matches!(**m, "bleu4" | "cider")) {
        return Err(Failure::Usage(format!("unknown metric {bad:?}; expected bleu4 or cider")));
    }
    let corpus = EvalCorpus::from_maps(&read_captions(candidates)?, &read_captions(references)?)?;
    let mut rows = Vec::new();
    for m in names {
        rows.push((m, if m == "bleu4" { bleu4(&corpus) } else { cider(&corpus)? }));
    }
    print!("{}", report(&rows));
    Ok(())
}

fn gradcheck_command(seed: u64) -> CliResult<()> {
    let mut worst = 0.0f64;
    for (name, r) in full_suite(seed) {
        let e = r.max_rel_err();
        worst = worst.max(e);
        match &r.failure {
            Some(f) => println!("{name}\tfailed: {f}"),
            None => println!("{name}\t{e:.3e}"),
        }
    }
    println!("max\t{worst:.3e}");
    if worst <= TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("max relative error {worst:.3e} exceeds {TOLERANCE:e}")))
    }
}

fn avg_command(run: &Path, top: usize, out: &Path) -> CliResult<()> {
    if top == 0 {
        return Err(Failure::Usage("--top must be at least 1".into()));
    }
    let index = read_checkpoint_index(run)?;
    let avg = average_checkpoints(&index, top)?;
    checkpoint::save(out, &avg)?;
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let threads = cli.threads.unwrap_or_else(default_threads);
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::GenData { out, count, seed, noise } => {
            if count == 0 || !(noise >= 0.0 && noise.is_finite()) {
                return Err(Failure::Usage("--count must be positive and --noise non-negative".into()));
            }
            generate_dataset(count, seed, noise, &out)?;
            Ok(())
        }
        Command::Pretrain { stage, run } => {
            let stage: Stage = stage.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            if stage == Stage::Finetune {
                return Err(Failure::Usage("use the finetune command for fine-tuning".into()));
            }
            train_command(stage, &run, threads)
        }
        Command::Finetune { run } => train_command(Stage::Finetune, &run, threads),
        Command::Caption { ckpt, data, config, beam, max_len, out } => {
            caption_command(&ckpt, &data, config.as_deref(), beam, max_len, out.as_deref(), threads)
        }
        Command::Eval { candidates, references, metrics } => eval_command(&candidates, &references, &metrics),
        Command::Gradcheck { seed } => gradcheck_command(seed),
        Command::AvgCkpt { run, top, out } => avg_command(&run, top, &out),
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
