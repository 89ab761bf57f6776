//! Staged multi-task training: one optimizer step per active task per
//! iteration, periodic validation, checkpoints and top-k averaging.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::corruption::{sample_ida, sample_imlm, IdaMode, IDA_MASK_RATE};
use crate::data::Example;
use crate::decoding::{greedy, DecodeConfig, ModelScorer};
use crate::error::{Error, Result};
use crate::model::{Session, SharedTransformer};
use crate::objectives::{loss_ic, loss_ida, loss_imlm, loss_tifg, LossWeights, Task};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::parallel::{map_indexed, Parallelism};
use crate::params::ParamGrads;
use crate::representation::RegionSet;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_INDEX: &str = "checkpoints.tsv";
pub const DEFAULT_TOP_K: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    OutDomain,
    InDomain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::OutDomain => "out-domain",
            Stage::InDomain => "in-domain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn default_weights(self) -> LossWeights {
        match self {
            Stage::OutDomain | Stage::Finetune => LossWeights::uniform(),
            Stage::InDomain => LossWeights::in_domain(),
        }
    }

    pub fn default_schedule(self) -> LrSchedule {
        match self {
            Stage::OutDomain => LrSchedule::default(),
            Stage::InDomain | Stage::Finetune => LrSchedule::reduced(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "out-domain" => Ok(Stage::OutDomain),
            "in-domain" => Ok(Stage::InDomain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected out-domain, in-domain or finetune"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    /// Active tasks in the fixed IC, IMLM, IDA, TIFG order.
    pub tasks: Vec<Task>,
    pub weights: LossWeights,
    /// Training iterations.
    pub steps: u64,
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub seed: u64,
    pub eval_interval: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub ida_mode: IdaMode,
    pub ida_rate: f64,
    pub parallelism: Parallelism,
}

impl TrainPlan {
    pub fn for_stage(stage: Stage) -> Self {
        TrainPlan {
            stage,
            tasks: if stage == Stage::Finetune { vec![Task::Ic] } else { Task::ALL.to_vec() },
            weights: stage.default_weights(),
            steps: 1000,
            batch_size: 32,
            grad_accum: 1,
            seed: 0,
            eval_interval: 250,
            schedule: stage.default_schedule(),
            adam: AdamConfig::default(),
            ida_mode: IdaMode::Single,
            ida_rate: IDA_MASK_RATE,
            parallelism: Parallelism::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks selected".into()));
        }
        if self.tasks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tasks must be distinct and in IC, IMLM, IDA, TIFG order".into()));
        }
        if self.stage == Stage::Finetune && self.tasks != [Task::Ic] {
            return Err(Error::Config("fine-tuning trains captioning only".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch size, accumulation and eval interval must be positive".into()));
        }
        if !(self.ida_rate > 0.0 && self.ida_rate <= 1.0) {
            return Err(Error::Config(format!("denoising mask rate must lie in (0, 1], got {}", self.ida_rate)));
        }
        self.weights.validate()?;
        self.schedule.validate()
    }
}

/// Regions plus the tokenized caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub regions: RegionSet,
    pub tokens: Vec<u32>,
}

pub fn prepare(examples: &[Example], vocab: &Vocabulary) -> Vec<TrainExample> {
    examples
        .iter()
        .map(|e| TrainExample { regions: e.regions.clone(), tokens: vocab.tokenize(&e.caption) })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLoss {
    pub task: Task,
    /// Mean weighted loss over contributing examples.
    pub loss: f64,
    pub examples: usize,
    /// Optimizer step taken for this task, if any.
    pub step: Option<u64>,
}

/// Summed gradient and loss over a set of examples.
#[derive(Clone, Debug)]
pub struct GradientSum {
    pub loss: f64,
    pub examples: usize,
    pub grads: ParamGrads,
}

fn example_gradient(
    model: &SharedTransformer,
    ex: &TrainExample,
    key: u64,
    task: Task,
    weight: f64,
    plan: &TrainPlan,
) -> Result<Option<(f64, ParamGrads)>> {
    let tape = Tape::new();
    let s = if model.config().dropout > 0.0 {
        let purpose = format!("dropout/{}", task.name());
        Session::train(&tape, model, RngStream::new(plan.seed, key, &purpose).rng())
    } else {
        Session::eval(&tape, model)
    };
    let mut rng = RngStream::new(plan.seed, key, task.name()).rng();
    let v = model.config().vocab_size;
    let loss = match task {
        Task::Ic => loss_ic(&s, &ex.regions, &ex.tokens, weight)?,
        Task::Imlm => match sample_imlm(&ex.tokens, v, &mut rng)? {
            Some(m) => Some(loss_imlm(&s, &m, &ex.regions, weight)?),
            None => None,
        },
        Task::Ida => match sample_ida(&ex.tokens, plan.ida_mode, plan.ida_rate, &mut rng)? {
            Some(m) => Some(loss_ida(&s, &m, &ex.regions, weight)?),
            None => None,
        },
        Task::Tifg if ex.tokens.is_empty() => None,
        Task::Tifg => Some(loss_tifg(&s, &ex.tokens, &ex.regions, weight)?),
    };
    let Some(loss) = loss else { return Ok(None) };
    let value = loss.item();
    let grads = tape.backward(loss)?.param_grads(model.params().len());
    Ok(Some((value, grads)))
}

/// Per-example gradients for `task`, computed under `plan.parallelism` and
/// summed in example order. Examples the task cannot use are skipped.
pub fn gradient_sum(
    model: &SharedTransformer,
    batch: &[(&TrainExample, u64)],
    task: Task,
    weight: f64,
    plan: &TrainPlan,
) -> Result<GradientSum> {
    let results = map_indexed(batch, plan.parallelism, |_, (ex, key)| example_gradient(model, ex, *key, task, weight, plan));
    let mut sum = GradientSum { loss: 0.0, examples: 0, grads: ParamGrads::zeros(model.params().len()) };
    for r in results {
        if let Some((loss, g)) = r? {
            sum.loss += loss;
            sum.examples += 1;
            sum.grads.add_scaled(&g, 1.0);
        }
    }
    Ok(sum)
}

/// Model, optimizer and plan for one stage.
pub struct Trainer {
    pub model: SharedTransformer,
    pub optimizer: Adam,
    plan: TrainPlan,
    iteration: u64,
}

impl Trainer {
    pub fn new(model: SharedTransformer, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let optimizer = Adam::new(model.params(), plan.adam);
        Ok(Trainer { model, optimizer, plan, iteration: 0 })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Updates the model once per active task, in task order, on `batch`.
    /// Tasks with zero weight, or with no usable example, take no step.
    pub fn train_iteration(&mut self, batch: &[(&TrainExample, u64)]) -> Result<Vec<TaskLoss>> {
        let mut record = Vec::with_capacity(self.plan.tasks.len());
        let chunk = batch.len().div_ceil(self.plan.grad_accum).max(1);
        for &task in &self.plan.tasks {
            let weight = self.plan.weights.get(task);
            if weight == 0.0 {
                record.push(TaskLoss { task, loss: 0.0, examples: 0, step: None });
                continue;
            }
            let mut total = GradientSum { loss: 0.0, examples: 0, grads: ParamGrads::zeros(self.model.params().len()) };
            for micro in batch.chunks(chunk) {
                let part = gradient_sum(&self.model, micro, task, weight, &self.plan)?;
                total.loss += part.loss;
                total.examples += part.examples;
                total.grads.add_scaled(&part.grads, 1.0);
            }
            if total.examples == 0 {
                record.push(TaskLoss { task, loss: 0.0, examples: 0, step: None });
                continue;
            }
            let n = total.examples as f64;
            total.grads.scale(1.0 / n);
            let rate = self.plan.schedule.lr_at(self.optimizer.steps() + 1);
            self.optimizer.step(self.model.params_mut(), &total.grads, rate)?;
            self.model.params_mut().round_to_f32();
            record.push(TaskLoss { task, loss: total.loss / n, examples: total.examples, step: Some(self.optimizer.steps()) });
        }
        Ok(record)
    }

    /// Dataset indices for the next iteration, drawn without replacement.
    pub fn next_batch_indices(&self, dataset_len: usize) -> Vec<usize> {
        let mut rng = RngStream::new(self.plan.seed, self.iteration + 1, "batch").rng();
        sample(&mut rng, dataset_len, self.plan.batch_size.min(dataset_len)).into_vec()
    }

    /// Draws the next batch from `data` and trains on it.
    pub fn step(&mut self, data: &[TrainExample]) -> Result<Vec<TaskLoss>> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let iter = self.iteration + 1;
        let batch: Vec<(&TrainExample, u64)> = self
            .next_batch_indices(data.len())
            .into_iter()
            .map(|i| (&data[i], RngStream::example_key(iter, i as u64)))
            .collect();
        let record = self.train_iteration(&batch)?;
        self.iteration = iter;
        Ok(record)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub ic_loss: f64,
    /// Fraction of examples whose greedy caption equals the reference.
    pub exact_match: f64,
}

/// Mean captioning loss and greedy exact-match with dropout off.
pub fn validate(model: &SharedTransformer, data: &[TrainExample], mode: Parallelism) -> Result<Validation> {
    if data.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let cfg = DecodeConfig { beam: 1, ..DecodeConfig::default() };
    let rows = map_indexed(data, mode, |_, ex| -> Result<(f64, bool)> {
        let tape = Tape::inference();
        let s = Session::eval(&tape, model);
        let loss = loss_ic(&s, &ex.regions, &ex.tokens, 1.0)?.map_or(0.0, |l| l.item());
        let hyp = greedy(&mut ModelScorer::new(model, &ex.regions)?, &cfg)?;
        Ok((loss, hyp.finished && hyp.tokens == ex.tokens))
    });
    let (mut loss, mut hits) = (0.0, 0usize);
    for r in rows {
        let (l, hit) = r?;
        loss += l;
        hits += hit as usize;
    }
    let n = data.len() as f64;
    Ok(Validation { ic_loss: loss / n, exact_match: hits as f64 / n })
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogLine {
    Task { step: u64, task: Task, loss: f64 },
    Val { step: u64, validation: Validation },
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogLine::Task { step, task, loss } => write!(f, "{step}\t{task}\t{loss}"),
            LogLine::Val { step, validation } => write!(f, "{step}\t{}\t{}", validation.ic_loss, validation.exact_match),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub validation: Validation,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub log: Vec<LogLine>,
    pub checkpoints: Vec<CheckpointRecord>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt-{step:06}.bin")
}

fn write_lines<T: fmt::Display>(path: &Path, header: Option<&str>, lines: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(h);
        text.push('\n');
    }
    for l in lines {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains for `plan.steps` iterations, validating and checkpointing every
/// `eval_interval` iterations and after the last one. With `out` set, the
/// metric log, checkpoints and their index are written there.
pub fn run_stage(
    trainer: &mut Trainer,
    train: &[TrainExample],
    val: &[TrainExample],
    out: Option<&Path>,
    mut progress: impl FnMut(&LogLine),
) -> Result<StageReport> {
    if val.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = StageReport::default();
    let plan = trainer.plan().clone();
    for it in 1..=plan.steps {
        for t in trainer.step(train)? {
            if t.step.is_some() {
                let line = LogLine::Task { step: it, task: t.task, loss: t.loss };
                progress(&line);
                report.log.push(line);
            }
        }
        if it % plan.eval_interval == 0 || it == plan.steps {
            let validation = validate(&trainer.model, val, plan.parallelism)?;
            let line = LogLine::Val { step: it, validation };
            progress(&line);
            report.log.push(line);
            let path = match out {
                Some(dir) => {
                    let p = dir.join(checkpoint_file_name(it));
                    checkpoint::save(&p, &trainer.model.params().named_tensors())?;
                    Some(p)
                }
                None => None,
            };
            report.checkpoints.push(CheckpointRecord { step: it, validation, path });
        }
    }
    if let Some(dir) = out {
        write_lines(&dir.join(METRICS_FILE), None, &report.log)?;
        let index: Vec<String> = report
            .checkpoints
            .iter()
            .map(|c| format!("{}\t{}\t{}\t{}", checkpoint_file_name(c.step), c.step, c.validation.ic_loss, c.validation.exact_match))
            .collect();
        write_lines(&dir.join(CHECKPOINT_INDEX), Some("file\tstep\tval_ic_loss\tval_exact_match"), &index)?;
    }
    Ok(report)
}

/// Indices of the `k` lowest scores, best first; ties keep the earlier index.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `(file, validation IC loss)` rows from a run directory's index.
pub fn read_checkpoint_index(dir: &Path) -> Result<Vec<(PathBuf, f64)>> {
    let path = dir.join(CHECKPOINT_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let score = cols.get(2).and_then(|s| s.parse::<f64>().ok());
            match (cols.first(), score) {
                (Some(f), Some(s)) => Ok((dir.join(f), s)),
                _ => Err(Error::Input(format!("{}: malformed row {}", path.display(), i + 2))),
            }
        })
        .collect()
}

/// Mean of the `k` checkpoints with the lowest scores.
pub fn average_checkpoints(files: &[(PathBuf, f64)], k: usize) -> Result<Vec<(String, Tensor)>> {
    if k == 0 {
        return Err(Error::Input("top-k needs k >= 1".into()));
    }
    let scores: Vec<f64> = files.iter().map(|f| f.1).collect();
    let chosen = select_top_k(&scores, k);
    let loaded = chosen.iter().map(|&i| checkpoint::load(&files[i].0)).collect::<Result<Vec<_>>>()?;
    checkpoint::average(&loaded)
}
