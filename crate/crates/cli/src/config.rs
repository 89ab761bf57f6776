//! Run configuration: `key = value` lines, `#` comments.

use std::path::Path;

use xgpt_core::corruption::{IdaMode, IDA_MASK_RATE};
use xgpt_core::decoding::DecodeConfig;
use xgpt_core::model::ModelConfig;
use xgpt_core::objectives::{parse_tasks, LossWeights, Task};
use xgpt_core::optim::LrSchedule;
use xgpt_core::parallel::Parallelism;
use xgpt_core::representation::MAX_REGIONS;
use xgpt_core::training::{Stage, TrainPlan};
use xgpt_core::{Error, Result};

pub const RESOLVED_FILE: &str = "config.resolved";

/// Every knob of a run. Unset optional values fall back to the stage's
/// defaults when the plan is built.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: Option<usize>,
    pub dropout: f64,
    pub share: bool,
    pub max_positions: usize,
    pub max_regions: usize,
    pub stage: Stage,
    pub tasks: Option<Vec<Task>>,
    pub lambda: [Option<f64>; 4],
    pub steps: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub eval_interval: u64,
    pub lr_peak: Option<f64>,
    pub lr_floor: Option<f64>,
    pub warmup: Option<u64>,
    pub ida_mask: IdaMode,
    pub ida_mask_rate: f64,
    pub val_count: usize,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DecodeConfig::default();
        RunConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_width: None,
            dropout: 0.1,
            share: true,
            max_positions: 64,
            max_regions: MAX_REGIONS,
            stage: Stage::OutDomain,
            tasks: None,
            lambda: [None; 4],
            steps: 1000,
            batch_size: 32,
            grad_accum: 1,
            seed: 0,
            eval_interval: 250,
            lr_peak: None,
            lr_floor: None,
            warmup: None,
            ida_mask: IdaMode::Single,
            ida_mask_rate: IDA_MASK_RATE,
            val_count: 64,
            beam: d.beam,
            max_len: d.max_len,
        }
    }
}

const LAMBDA_KEYS: [&str; 4] = ["lambda_ic", "lambda_imlm", "lambda_ida", "lambda_tifg"];

pub const KEYS: [&str; 27] = [
    "layers", "width", "heads", "ffn_width", "dropout", "share", "max_positions", "max_regions", "stage", "tasks",
    "lambda_ic", "lambda_imlm", "lambda_ida", "lambda_tifg", "steps", "batch_size", "grad_accum", "seed",
    "eval_interval", "lr_peak", "lr_floor", "warmup", "ida_mask", "ida_mask_rate", "val_count", "beam", "max_len",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("expected on or off, got {v:?}"))),
    }
}

fn ida_mode_name(m: IdaMode) -> &'static str {
    match m {
        IdaMode::Single => "single",
        IdaMode::Multi => "multi",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "layers" => self.layers = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "ffn_width" => self.ffn_width = Some(num(key, v)?),
            "dropout" => self.dropout = num(key, v)?,
            "share" => self.share = parse_switch(v)?,
            "max_positions" => self.max_positions = num(key, v)?,
            "max_regions" => self.max_regions = num(key, v)?,
            "stage" => self.stage = v.parse()?,
            "tasks" => self.tasks = Some(parse_tasks(v)?),
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "grad_accum" => self.grad_accum = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "eval_interval" => self.eval_interval = num(key, v)?,
            "lr_peak" => self.lr_peak = Some(num(key, v)?),
            "lr_floor" => self.lr_floor = Some(num(key, v)?),
            "warmup" => self.warmup = Some(num(key, v)?),
            "ida_mask" => self.ida_mask = v.parse()?,
            "ida_mask_rate" => self.ida_mask_rate = num(key, v)?,
            "val_count" => self.val_count = num(key, v)?,
            "beam" => self.beam = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            _ => match LAMBDA_KEYS.iter().position(|k| *k == key) {
                Some(i) => self.lambda[i] = Some(num(key, v)?),
                None => return Err(Error::Config(format!("unknown config key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.tasks.clone().unwrap_or_else(|| TrainPlan::for_stage(self.stage).tasks)
    }

    pub fn weights(&self) -> LossWeights {
        let mut w = self.stage.default_weights();
        for (t, l) in Task::ALL.iter().zip(self.lambda) {
            if let Some(l) = l {
                w.set(*t, l);
            }
        }
        w
    }

    pub fn schedule(&self) -> LrSchedule {
        let d = self.stage.default_schedule();
        LrSchedule {
            peak: self.lr_peak.unwrap_or(d.peak),
            floor: self.lr_floor.unwrap_or(d.floor),
            warmup: self.warmup.unwrap_or(d.warmup),
        }
    }

    pub fn model_config(&self, vocab_size: usize, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            ffn_width: self.ffn_width.unwrap_or(4 * self.width),
            dropout: self.dropout,
            vocab_size,
            feat_dim,
            max_positions: self.max_positions,
            max_regions: self.max_regions,
            share: self.share,
        }
    }

    pub fn plan(&self, parallelism: Parallelism) -> Result<TrainPlan> {
        let mut p = TrainPlan::for_stage(self.stage);
        p.tasks = self.tasks();
        p.weights = self.weights();
        p.steps = self.steps;
        p.batch_size = self.batch_size;
        p.grad_accum = self.grad_accum;
        p.seed = self.seed;
        p.eval_interval = self.eval_interval;
        p.schedule = self.schedule();
        p.ida_mode = self.ida_mask;
        p.ida_rate = self.ida_mask_rate;
        p.parallelism = parallelism;
        p.validate()?;
        Ok(p)
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig { max_len: self.max_len, beam: self.beam }
    }

    /// Every key with stage defaults filled in; parses back to the same run.
    pub fn resolved_text(&self) -> String {
        let w = self.weights();
        let s = self.schedule();
        let tasks: Vec<&str> = self.tasks().iter().map(|t| t.name()).collect();
        let values: [String; 27] = [
            self.layers.to_string(),
            self.width.to_string(),
            self.heads.to_string(),
            self.ffn_width.unwrap_or(4 * self.width).to_string(),
            self.dropout.to_string(),
            if self.share { "on" } else { "off" }.to_string(),
            self.max_positions.to_string(),
            self.max_regions.to_string(),
            self.stage.to_string(),
            tasks.join(","),
            w.ic.to_string(),
            w.imlm.to_string(),
            w.ida.to_string(),
            w.tifg.to_string(),
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.grad_accum.to_string(),
            self.seed.to_string(),
            self.eval_interval.to_string(),
            s.peak.to_string(),
            s.floor.to_string(),
            s.warmup.to_string(),
            ida_mode_name(self.ida_mask).to_string(),
            self.ida_mask_rate.to_string(),
            self.val_count.to_string(),
            self.beam.to_string(),
            self.max_len.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# desk run\nwidth = 32 # narrower\n\nshare = off\n").unwrap();
        assert_eq!(c.width, 32);
        assert!(!c.share);
        let err = c.apply_text("colour = red\n").unwrap_err();
        assert!(err.to_string().contains("colour"));
        assert!(c.apply_text("width 32\n").is_err());
    }

    #[test]
    fn stage_defaults_and_overrides() {
        let mut c = RunConfig::default();
        c.set("stage", "in-domain").unwrap();
        assert_eq!(c.weights(), LossWeights::in_domain());
        c.set("lambda_tifg", "0.5").unwrap();
        assert_eq!(c.weights().tifg, 0.5);
        c.set("stage", "finetune").unwrap();
        assert_eq!(c.tasks(), vec![Task::Ic]);
        c.set("tasks", "ic,ida").unwrap();
        assert!(c.plan(Parallelism::Sequential).is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("stage = in-domain\nida_mask = multi\nlr_peak = 0.003\n").unwrap();
        let text = c.resolved_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back.resolved_text(), text);
        assert_eq!(back.plan(Parallelism::Sequential).unwrap(), c.plan(Parallelism::Sequential).unwrap());
        assert_eq!(text.lines().count(), KEYS.len());
    }
}
