//! The four generative training losses.
//!
//! Every loss is a per-position mean on a single example, scaled by its task
//! weight. Encoder inputs always place region rows before text rows; segment
//! embeddings mark the modality of each row.

use crate::autodiff::Var;
use crate::corruption::{MaskedSample, Strategy};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, Session, SEGMENT_REGION, SEGMENT_TEXT};
use crate::representation::{embed_tokens_at, region_tokens, RegionSet};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Ic,
    Imlm,
    Ida,
    Tifg,
}

impl Task {
    /// Canonical update order within an iteration.
    pub const ALL: [Task; 4] = [Task::Ic, Task::Imlm, Task::Ida, Task::Tifg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ic => "ic",
            Task::Imlm => "imlm",
            Task::Ida => "ida",
            Task::Tifg => "tifg",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}; valid tasks are ic, imlm, ida, tifg")))
    }
}

/// Comma-separated task names, returned in canonical order without repeats.
pub fn parse_tasks(list: &str) -> Result<Vec<Task>> {
    let mut tasks: Vec<Task> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    tasks.sort();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(Error::Config("task list is empty".into()));
    }
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ic: f64,
    pub imlm: f64,
    pub ida: f64,
    pub tifg: f64,
}

impl LossWeights {
    pub fn uniform() -> Self {
        LossWeights {
            ic: 1.0,
            imlm: 1.0,
            ida: 1.0,
            tifg: 1.0,
        }
    }

    /// Captioning at full weight, the cross-modal tasks reduced to 0.3.
    pub fn in_domain() -> Self {
        LossWeights {
            ic: 1.0,
            imlm: 0.3,
            ida: 0.3,
            tifg: 0.3,
        }
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Ic => self.ic,
            Task::Imlm => self.imlm,
            Task::Ida => self.ida,
            Task::Tifg => self.tifg,
        }
    }

    pub fn set(&mut self, task: Task, value: f64) {
        match task {
            Task::Ic => self.ic = value,
            Task::Imlm => self.imlm = value,
            Task::Ida => self.ida = value,
            Task::Tifg => self.tifg = value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in Task::ALL {
            let w = self.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight for {t} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Text rows: token, position and text-segment embeddings.
pub fn text_rows<'t>(s: &Session<'t, '_>, ids: &[u32], positions: &[usize]) -> Result<Var<'t>> {
    s.with_segment(embed_tokens_at(s, ids, positions)?, SEGMENT_TEXT)
}

fn sequential(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Final encoder layer over `[regions ; text]`, or regions alone.
fn encode_pair<'t>(s: &Session<'t, '_>, refined: Var<'t>, text: Option<Var<'t>>) -> Result<Var<'t>> {
    let regions = s.with_segment(refined, SEGMENT_REGION)?;
    let input = match text {
        Some(t) => Var::concat(&[regions, t], 0)?,
        None => regions,
    };
    s.encode(input, None)
}

/// Encoder memory for captioning an image.
pub fn caption_memory<'t>(s: &Session<'t, '_>, regions: &RegionSet) -> Result<Var<'t>> {
    let (_, refined) = region_tokens(s, regions)?;
    encode_pair(s, refined, None)
}

/// Teacher-forced negative log-likelihood of `targets`: decoder input at
/// position `p_i` is the previous target (or `[BOS]` first).
fn teacher_forced<'t>(s: &Session<'t, '_>, memory: Var<'t>, targets: &[u32], positions: &[usize]) -> Result<Var<'t>> {
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    let x = text_rows(s, &inputs, positions)?;
    let logits = s.decode(x, memory, None)?;
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    logits.cross_entropy(&ids, &vec![1.0; ids.len()])
}

/// Captioning loss: regions alone in the encoder; decoder predicts the
/// caption followed by `[EOS]`. `None` for an empty caption.
pub fn loss_ic<'t>(s: &Session<'t, '_>, regions: &RegionSet, caption: &[u32], weight: f64) -> Result<Option<Var<'t>>> {
    if caption.is_empty() {
        return Ok(None);
    }
    let memory = caption_memory(s, regions)?;
    let mut targets = caption.to_vec();
    targets.push(EOS);
    let nll = teacher_forced(s, memory, &targets, &sequential(targets.len()))?;
    Ok(Some(nll.scale(weight)))
}

/// Masked-fragment loss: the noised caption joins the regions in the
/// encoder; the decoder regenerates only the fragment, at its own positions.
pub fn loss_imlm<'t>(s: &Session<'t, '_>, sample: &MaskedSample, regions: &RegionSet, weight: f64) -> Result<Var<'t>> {
    if sample.strategy != Strategy::Imlm || sample.target_tokens.is_empty() {
        return Err(Error::Input("masked-fragment loss needs a non-empty fragment sample".into()));
    }
    let (_, refined) = region_tokens(s, regions)?;
    let text = text_rows(s, &sample.corrupted, &sequential(sample.corrupted.len()))?;
    let memory = encode_pair(s, refined, Some(text))?;
    let nll = teacher_forced(s, memory, &sample.target_tokens, &sample.target_positions)?;
    Ok(nll.scale(weight))
}

/// Replaces each text row by a softmax mixture of region rows, scored by
/// `a_t·x_i + a_r·y_j + a_p·(x_i ⊙ y_j)`.
pub fn attend_text_to_regions<'t>(s: &Session<'t, '_>, text: Var<'t>, regions: Var<'t>) -> Result<Var<'t>> {
    let h = s.config().width;
    let a = s.layout().align;
    let text_score = text.matmul(s.p(a.text).reshape(&[h, 1])?)?;
    let region_score = regions.matmul(s.p(a.region).reshape(&[h, 1])?)?.transpose()?;
    let pair_score = text.mul(s.p(a.product))?.matmul(regions.transpose()?)?;
    let scores = pair_score.add(text_score)?.add(region_score)?;
    scores.softmax(1)?.matmul(regions)
}

/// Denoising loss: every corrupted-caption row is replaced by its region
/// mixture; the decoder rebuilds the whole caption plus `[EOS]`.
pub fn loss_ida<'t>(s: &Session<'t, '_>, sample: &MaskedSample, regions: &RegionSet, weight: f64) -> Result<Var<'t>> {
    if !matches!(sample.strategy, Strategy::IdaSingle | Strategy::IdaMulti) {
        return Err(Error::Input("denoising loss needs a denoising sample".into()));
    }
    let (_, refined) = region_tokens(s, regions)?;
    let embedded = embed_tokens_at(s, &sample.corrupted, &sequential(sample.corrupted.len()))?;
    let mixed = attend_text_to_regions(s, embedded, refined)?;
    let text = s.with_segment(mixed, SEGMENT_TEXT)?;
    let memory = encode_pair(s, refined, Some(text))?;
    let mut targets = sample.original.clone();
    targets.push(EOS);
    let nll = teacher_forced(s, memory, &targets, &sequential(targets.len()))?;
    Ok(nll.scale(weight))
}

/// Predicted region rows from the caption alone: learned queries, one per
/// region slot, attend to each other without a causal mask.
pub fn generate_features<'t>(s: &Session<'t, '_>, caption: &[u32], n: usize) -> Result<Var<'t>> {
    if caption.is_empty() {
        return Err(Error::Input("feature generation needs a caption".into()));
    }
    if n == 0 || n > s.config().max_regions {
        return Err(Error::Input(format!("{n} region queries outside 1..={}", s.config().max_regions)));
    }
    let l = s.layout();
    let memory = s.encode(text_rows(s, caption, &sequential(caption.len()))?, None)?;
    let queries = s.with_segment(s.p(l.tifg_query).narrow(0, 0, n)?, SEGMENT_REGION)?;
    let hidden = s.decode_hidden(queries, memory, &AttentionMask::full(n, n), None)?;
    hidden.linear(s.p(l.tifg_w), Some(s.p(l.tifg_b)))
}

/// `(1/N) Σ_i ‖x_i − x̄_i‖²`.
pub fn mean_row_sq_error<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let n = pred.shape()[0] as f64;
    let d = pred.sub(target)?;
    Ok(d.mul(d)?.sum().scale(1.0 / n))
}

/// Feature-generation loss against the detached, pre-refinement region
/// projections.
pub fn loss_tifg<'t>(s: &Session<'t, '_>, caption: &[u32], regions: &RegionSet, weight: f64) -> Result<Var<'t>> {
    let (projected, _) = region_tokens(s, regions)?;
    loss_tifg_against(s, caption, projected.detach(), weight)
}

/// Feature-generation loss against fixed `targets` rows.
pub fn loss_tifg_against<'t>(s: &Session<'t, '_>, caption: &[u32], targets: Var<'t>, weight: f64) -> Result<Var<'t>> {
    let pred = generate_features(s, caption, targets.shape()[0])?;
    Ok(mean_row_sq_error(pred, targets)?.scale(weight))
}
