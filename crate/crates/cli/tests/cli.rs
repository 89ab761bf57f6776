use std::path::Path;
use std::process::{Command, Output};

use xgpt_core::checkpoint;
use xgpt_core::data::load_dataset;
use xgpt_core::decoding::{greedy, DecodeConfig, ModelScorer};
use xgpt_core::model::SharedTransformer;

fn xgpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xgpt"))
        .args(args)
        .env_remove("XGPT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 16] = [
    "--set", "layers=1", "--set", "width=16", "--set", "heads=2", "--set", "batch_size=4", "--set", "val_count=4",
    "--set", "eval_interval=2", "--set", "max_positions=24", "--set", "max_regions=4",
];

fn pretrain(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--threads", "1", "pretrain", "--data", p(data), "--out", p(out), "--steps", "5"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    xgpt(&args)
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&xgpt(&["gen-data", "--out", p(&a), "--count", "8", "--seed", "1"]));
    ok(&xgpt(&["gen-data", "--out", p(&b), "--count", "8", "--seed", "1"]));
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    for f in ["manifest.tsv", "features.bin", "vocab.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(xgpt(&["gen-data", "--count", "8"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&xgpt(&["gen-data", "--out", p(&data), "--count", "12"]));
    let out = pretrain(&data, &dir.path().join("r"), &["--tasks", "ic,mlm"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("imlm") && msg.contains("tifg"), "{msg}");
    assert_eq!(pretrain(&data, &dir.path().join("r"), &["--share", "maybe"]).status.code(), Some(1));
    assert_eq!(pretrain(&data, &dir.path().join("r"), &["--set", "colour=red"]).status.code(), Some(1));
    let missing = xgpt(&["eval", "--candidates", "/nonexistent/c", "--references", "/nonexistent/r"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn training_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&xgpt(&["gen-data", "--out", p(&data), "--count", "16", "--seed", "3"]));

    let run = dir.path().join("run");
    ok(&pretrain(&data, &run, &["--tasks", "ic,imlm,ida,tifg", "--ida-mask", "multi"]));
    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("tasks = ic,imlm,ida,tifg") && resolved.contains("ida_mask = multi"));
    let index = std::fs::read_to_string(run.join("checkpoints.tsv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 3);
    let metrics = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\timlm\t")).count(), 5);

    // The resolved configuration alone reproduces the run in single-threaded mode.
    let again = dir.path().join("again");
    let out = xgpt(&["--threads", "1", "pretrain", "--config", p(&run.join("config.resolved")), "--data", p(&data), "--out", p(&again)]);
    ok(&out);
    for f in ["ckpt-000005.bin", "metrics.tsv", "config.resolved"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let avg = dir.path().join("avg.bin");
    ok(&xgpt(&["avg-ckpt", "--run", p(&run), "--out", p(&avg)]));
    assert_eq!(checkpoint::load(&avg).unwrap().len(), checkpoint::load(&run.join("ckpt-000005.bin")).unwrap().len());

    let tuned = dir.path().join("tuned");
    let mut args = vec!["--threads", "1", "finetune", "--data", p(&data), "--out", p(&tuned), "--init", p(&avg), "--steps", "2"];
    args.extend_from_slice(&TINY);
    ok(&xgpt(&args));
    let resolved = std::fs::read_to_string(tuned.join("config.resolved")).unwrap();
    assert!(resolved.contains("stage = finetune") && resolved.contains("tasks = ic\n"));

    let ckpt = tuned.join("ckpt-000002.bin");
    let captions = xgpt(&["caption", "--ckpt", p(&ckpt), "--data", p(&data), "--beam", "1", "--max-len", "6"]);
    ok(&captions);
    let text = String::from_utf8(captions.stdout).unwrap();
    assert_eq!(text.lines().count(), 16);

    let (examples, vocab) = load_dataset(&data).unwrap();
    let mut mc = xgpt_core::model::ModelConfig::tiny(1, 16, 2, vocab.len(), examples[0].regions.feat_dim());
    mc.max_positions = 24;
    mc.max_regions = 4;
    let model = SharedTransformer::from_tensors(mc, &checkpoint::load(&ckpt).unwrap()).unwrap();
    let cfg = DecodeConfig { max_len: 6, beam: 1 };
    for (line, e) in text.lines().zip(&examples) {
        let g = greedy(&mut ModelScorer::new(&model, &e.regions).unwrap(), &cfg).unwrap();
        assert_eq!(line, format!("{}\t{}", e.id, vocab.render(&g.tokens)));
    }

    let cands = dir.path().join("cands.tsv");
    std::fs::write(&cands, &text).unwrap();
    let refs = data.join("manifest.tsv");
    let scored = xgpt(&["eval", "--candidates", p(&cands), "--references", p(&refs)]);
    ok(&scored);
    let report = String::from_utf8(scored.stdout).unwrap();
    assert!(report.starts_with("bleu4\t") && report.contains("\ncider\t"), "{report}");
    let perfect = xgpt(&["eval", "--candidates", p(&refs), "--references", p(&refs), "--metrics", "bleu4"]);
    assert_eq!(String::from_utf8(perfect.stdout).unwrap(), "bleu4\t1.0000\n");
    assert_eq!(xgpt(&["eval", "--candidates", p(&refs), "--references", p(&refs), "--metrics", "meteor"]).status.code(), Some(1));
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let out = xgpt(&["gradcheck", "--seed", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let max: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max\t"))
        .and_then(|v| v.parse().ok())
        .expect("summary line");
    assert_eq!(out.status.success(), max <= 1e-4, "{text}");
    assert_eq!(out.status.code().unwrap() == 2, max > 1e-4);
}
