//! Greedy and beam-search caption generation.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Session, SharedTransformer};
use crate::objectives::{caption_memory, text_rows};
use crate::representation::RegionSet;
use crate::tensor::Tensor;
use crate::vocab::{EOS, NUM_RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    /// Most tokens generated, `[EOS]` included.
    pub max_len: usize,
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_len: 20, beam: 2 }
    }
}

/// Next-token log-probabilities after a prefix of generated tokens.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
    /// Longest prefix the scorer accepts, if bounded.
    fn max_prefix(&self) -> Option<usize> {
        None
    }
}

fn step_limit<S: StepScorer>(scorer: &S, cfg: &DecodeConfig) -> usize {
    scorer.max_prefix().map_or(cfg.max_len, |m| cfg.max_len.min(m + 1))
}

/// Log-softmax over `[EOS]` and the ordinary tokens; every other reserved id
/// gets −∞.
pub fn masked_log_softmax(logits: &[f64]) -> Vec<f64> {
    let allowed = |i: usize| i as u32 == EOS || i as u32 >= NUM_RESERVED;
    let top = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| (v - top).exp())
        .sum();
    let lse = top + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Scores prefixes with a frozen model, re-running the decoder over the
/// whole prefix at every step.
pub struct ModelScorer<'m> {
    model: &'m SharedTransformer,
    memory: Arc<Tensor>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m SharedTransformer, regions: &RegionSet) -> Result<Self> {
        let tape = Tape::inference();
        let s = Session::eval(&tape, model);
        let memory = caption_memory(&s, regions)?.value();
        Ok(ModelScorer { model, memory })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_prefix(&self) -> Option<usize> {
        Some(self.model.config().max_positions - 1)
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let s = Session::eval(&tape, self.model);
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(crate::vocab::BOS);
        ids.extend_from_slice(prefix);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let x = text_rows(&s, &ids, &positions)?;
        let memory = tape.constant_arc(self.memory.clone());
        let t = ids.len();
        let hidden = s.decode_hidden(x, memory, &crate::model::AttentionMask::causal(t), None)?;
        let last = s.lm_logits(hidden.narrow(0, t - 1, 1)?)?.value();
        Ok(masked_log_softmax(last.data()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, `[EOS]` excluded.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

fn best_token(logp: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in logp.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b| v > logp[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Input("no token has finite probability".into()))
}

/// Argmax at each step from `[BOS]`; ties go to the lowest id.
pub fn greedy<S: StepScorer>(scorer: &mut S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut total = 0.0;
    for _ in 0..step_limit(scorer, cfg) {
        let logp = scorer.log_probs(&tokens)?;
        let next = best_token(&logp)?;
        total += logp[next];
        if next as u32 == EOS {
            return Ok(Hypothesis { tokens, log_prob: total, finished: true });
        }
        tokens.push(next as u32);
    }
    Ok(Hypothesis { tokens, log_prob: total, finished: false })
}

/// Higher total first, then the lexicographically smaller sequence.
fn rank(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Length-unnormalized beam search. Expansions ending in `[EOS]` retire;
/// the search ends when no live hypothesis can beat the best retired one.
pub fn beam<S: StepScorer>(scorer: &mut S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Input("beam size must be at least 1".into()));
    }
    // Sequences carry their `[EOS]` while ranking so ties order consistently.
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..step_limit(scorer, cfg) {
        let mut candidates = Vec::new();
        for (seq, total) in &live {
            let logp = scorer.log_probs(seq)?;
            for (v, &lp) in logp.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = seq.clone();
                next.push(v as u32);
                candidates.push((next, total + lp));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam);
        live.clear();
        for c in candidates {
            if *c.0.last().expect("non-empty") == EOS {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        done.sort_by(rank);
        let best_done = done.first().map(|d| d.1);
        let best_live = live.first().map(|l| l.1);
        match (best_done, best_live) {
            (_, None) => break,
            (Some(d), Some(l)) if d >= l => break,
            _ => {}
        }
    }
    let mut pool: Vec<(Vec<u32>, f64)> = done.into_iter().chain(live).collect();
    pool.sort_by(rank);
    let (mut tokens, log_prob) = pool.into_iter().next().expect("at least one hypothesis");
    let finished = tokens.last() == Some(&EOS);
    if finished {
        tokens.pop();
    }
    Ok(Hypothesis { tokens, log_prob, finished })
}

/// Captions `regions` with `cfg.beam` (1 selects the greedy path).
pub fn caption(model: &SharedTransformer, regions: &RegionSet, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::new(model, regions)?;
    if cfg.beam == 1 {
        greedy(&mut scorer, cfg)
    } else {
        beam(&mut scorer, cfg)
    }
}
