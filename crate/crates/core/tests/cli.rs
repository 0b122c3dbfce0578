mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::{cli, s, small_run_config, tree, write_config};
use msdiff::checkpoint;
use msdiff::config::RunConfig;
use msdiff::data::{read_dataset, read_manifest, Forge};
use msdiff::diffusion::{train, TrainConfig, TrainMode};
use msdiff::embedding::Vocab;
use msdiff::eval::{mini_bench, Bench, EvalReport};
use msdiff::exec::Exec;
use msdiff::model::Model;
use msdiff::params::ParamGroup;
use msdiff::rng::Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msdiff"))
}

/// Dataset plus a trained checkpoint in `dir`.
fn trained(dir: &Path, cfg: &RunConfig, num: usize) -> (PathBuf, PathBuf) {
    let cfg_path = write_config(dir, cfg);
    let data = dir.join("data");
    assert_eq!(cli(&["gen-data", "--out", &s(&data), "--num", &num.to_string(), "--seed", "3", "--config", &s(&cfg_path)]), 0);
    let ckpt = dir.join("m.ckpt");
    assert_eq!(cli(&["train", "--config", &s(&cfg_path), "--data", &s(&data), "--out", &s(&ckpt)]), 0);
    (data, ckpt)
}

fn loss_log(ckpt: &Path) -> Vec<(usize, f64)> {
    let text = std::fs::read_to_string(format!("{}.loss.csv", ckpt.display())).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,L_IP,L_am"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect()
}

fn first_subject_flag(data: &Path) -> (String, String) {
    let m = read_manifest(data).unwrap();
    let rec = &m.samples[0];
    let sub = rec.subjects.iter().find(|x| !x.is_pad).unwrap();
    let b = sub.bbox;
    let entity = Vocab::toy().token(sub.entity).unwrap().to_string();
    (rec.caption.clone(), format!("{}:{entity}:{},{},{},{}", s(&data.join(sub.crop.as_ref().unwrap())), b[0], b[1], b[2], b[3]))
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config(21);
    cfg.train.steps = 0;
    cfg.train.base_steps = 0;
    let (_, ckpt) = trained(dir.path(), &cfg, 4);
    let loaded = checkpoint::load(&ckpt).unwrap();
    let init = Model::init(cfg.model.clone(), Vocab::toy(), 21).unwrap();
    assert_eq!(loaded.step, 0);
    for id in init.params.ids() {
        let a = init.params.tensor(id).data();
        let b = loaded.model.params.tensor(id).data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", init.params.name(id));
    }
    assert!(loss_log(&ckpt).is_empty());
}

#[test]
fn fifty_steps_twice_same_log() {
    let mut cfg = small_run_config(8);
    cfg.train.steps = 50;
    cfg.train.base_steps = 20;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ca) = trained(a.path(), &cfg, 20);
    let (_, cb) = trained(b.path(), &cfg, 20);
    let la = std::fs::read(format!("{}.loss.csv", ca.display())).unwrap();
    let lb = std::fs::read(format!("{}.loss.csv", cb.display())).unwrap();
    assert_eq!(la, lb);
    assert_eq!(loss_log(&ca).len(), 50);
    assert_eq!(std::fs::read(ca).unwrap(), std::fs::read(cb).unwrap());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&small_run_config(0).to_json()).unwrap();
    v["train"]["learning_rate_typo"] = serde_json::json!(0.1);
    let cfg_path = dir.path().join("bad.json");
    std::fs::write(&cfg_path, v.to_string()).unwrap();
    let out = bin()
        .args(["train", "--config", &s(&cfg_path), "--data", &s(dir.path()), "--out", &s(&dir.path().join("x.ckpt"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate_typo") && err.contains("train"), "{err}");
}

#[test]
fn sampling_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config(13);
    cfg.train.steps = 30;
    cfg.train.base_steps = 10;
    let (data, ckpt) = trained(dir.path(), &cfg, 10);
    let (prompt, flag) = first_subject_flag(&data);
    let ck = s(&ckpt);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let o = s(&out);
        let mut args = vec!["sample", "--ckpt", &ck, "--prompt", &prompt, "--seed", "4", "--num-samples", "2", "--out", &o];
        args.extend(extra);
        (cli(&args), out)
    };

    // gamma 0 silences the image branch entirely.
    let (code, with_subject) = run("g0", &["--subject", &flag, "--gamma", "0"]);
    assert_eq!(code, 0);
    let (code, without) = run("none", &["--gamma", "0"]);
    assert_eq!(code, 0);
    let (ta, tb) = (tree(&with_subject), tree(&without));
    assert_eq!(ta.len(), 2);
    assert_eq!(ta, tb);

    let (code, full) = run("g1", &["--subject", &flag]);
    assert_eq!(code, 0);
    assert_ne!(tree(&full), ta);

    for bad in ["nocolon", "x.ppm:circle", "x.ppm:circle:0,0,1", "x.ppm:circle:0.9,0,0.1,1"] {
        let (code, _) = run("bad", &["--subject", bad]);
        assert_eq!(code, 1, "{bad}");
    }
    let (code, _) = run("bad", &["--subject", &flag.replace(":circle:", ":dragon:").replace(":square:", ":dragon:").replace(":triangle:", ":dragon:").replace(":star:", ":dragon:")]);
    assert_eq!(code, 1);
    let (code, _) = run("missing", &["--subject", "/nonexistent/a.ppm:circle:0,0,1,1"]);
    assert_eq!(code, 2);
}

#[test]
fn eval_defaults_and_empty_bench() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config(17);
    cfg.train.steps = 10;
    cfg.train.base_steps = 5;
    cfg.sample.num_steps = 3;
    let (_, ckpt) = trained(dir.path(), &cfg, 6);

    let empty = dir.path().join("empty.json");
    Bench::empty().save(&empty).unwrap();
    let report = dir.path().join("r0.json");
    assert_eq!(cli(&["eval", "--ckpt", &s(&ckpt), "--bench", &s(&empty), "--out", &s(&report)]), 0);
    let r: EvalReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r.cases.is_empty());
    assert_eq!(r.failed_cases, 0);

    let one = dir.path().join("one.json");
    Bench { cases: mini_bench().cases[..1].to_vec(), ..Bench::empty() }.save(&one).unwrap();
    let report = dir.path().join("r1.json");
    assert_eq!(cli(&["eval", "--ckpt", &s(&ckpt), "--bench", &s(&one), "--out", &s(&report)]), 0);
    let r: EvalReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.config.samples_per_case, 5);
    assert_eq!(r.cases[0].samples.len(), 5);
}

#[test]
fn training_lowers_the_denoising_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config(29);
    cfg.train.steps = 2000;
    cfg.train.base_steps = 1000;
    let (_, ckpt) = trained(dir.path(), &cfg, 500);
    let log = loss_log(&ckpt);
    assert_eq!(log.len(), 2000);
    let mean = |xs: &[(usize, f64)]| xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64;
    let (head, tail) = (mean(&log[..100]), mean(&log[1900..]));
    assert!(tail < head, "initial {head} final {tail}");
}

#[test]
fn adapter_training_leaves_the_base_untouched() {
    let cfg = small_run_config(31);
    let vocab = Vocab::toy();
    let data = Forge::new(cfg.data.forge_config(), vocab.clone()).unwrap().generate(31, 24, Exec::Sequential).unwrap();
    let mut model = Model::init(cfg.model.clone(), vocab, 31).unwrap();
    let base_only = TrainConfig { steps: 20, base_steps: 20, mode: TrainMode::TwoPhase, ..cfg.train.clone() };
    train(&mut model, &data, &base_only, &mut Rng::new(1), Exec::Sequential, |_, _| Ok(())).unwrap();
    let snapshot = |m: &Model| -> Vec<(String, ParamGroup, Vec<u64>)> {
        m.params.ids().map(|id| (m.params.name(id).to_string(), m.params.group(id), m.params.tensor(id).data().iter().map(|v| v.to_bits()).collect())).collect()
    };
    let before = snapshot(&model);
    let adapter = TrainConfig { steps: 20, base_steps: 0, mode: TrainMode::TwoPhase, ..cfg.train.clone() };
    train(&mut model, &data, &adapter, &mut Rng::new(2), Exec::Sequential, |_, _| Ok(())).unwrap();
    let after = snapshot(&model);
    let mut adapter_moved = false;
    for (b, a) in before.iter().zip(&after) {
        match b.1 {
            ParamGroup::Adapter => adapter_moved |= b.2 != a.2,
            _ => assert_eq!(b.2, a.2, "{} changed", b.0),
        }
    }
    assert!(adapter_moved);
}

#[test]
fn dataset_written_by_cli_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small_run_config(0));
    let data = dir.path().join("d");
    assert_eq!(cli(&["gen-data", "--out", &s(&data), "--num", "5", "--seed", "1", "--config", &s(&cfg_path), "--jitter", "0.5"]), 0);
    assert_eq!(read_dataset(&data, &Vocab::toy()).unwrap().len(), 5);
    let out = bin().args(["train", "--config", &s(&cfg_path), "--data", &s(&dir.path().join("nope")), "--out", &s(&dir.path().join("c"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
