mod common;

use common::{cli, s, small_run_config, tree, write_config};
use msdiff::data::{read_dataset, read_manifest, write_dataset, Forge};
use msdiff::embedding::Vocab;
use msdiff::exec::Exec;

#[test]
fn ten_samples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config(4);
    let vocab = Vocab::toy();
    let samples = Forge::new(cfg.data.forge_config(), vocab.clone()).unwrap().generate(4, 10, Exec::Sequential).unwrap();
    assert_eq!(samples.len(), 10);
    write_dataset(&samples, dir.path()).unwrap();
    let back = read_dataset(dir.path(), &vocab).unwrap();
    assert_eq!(back, samples);
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config(5);
    let samples = Forge::new(cfg.data.forge_config(), Vocab::toy()).unwrap().generate(5, 3, Exec::Sequential).unwrap();
    let manifest = write_dataset(&samples, dir.path()).unwrap();
    let victim = dir.path().join(&manifest.samples[1].target);
    std::fs::remove_file(&victim).unwrap();
    let err = read_dataset(dir.path(), &Vocab::toy()).unwrap_err().to_string();
    assert!(err.contains(&victim.display().to_string()), "{err}");
}

#[test]
fn zero_samples_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(cli(&["gen-data", "--out", &s(&out), "--num", "0", "--seed", "1"]), 0);
    let m = read_manifest(&out).unwrap();
    assert_eq!((m.count, m.samples.len()), (0, 0));
    assert!(read_dataset(&out, &Vocab::toy()).unwrap().is_empty());
}

#[test]
fn gen_data_hundred_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config(0);
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("d");
    assert_eq!(cli(&["gen-data", "--out", &s(&out), "--num", "100", "--seed", "2", "--config", &s(&cfg_path)]), 0);
    let data = read_dataset(&out, &Vocab::toy()).unwrap();
    assert_eq!(data.len(), 100);
    for d in &data {
        assert!(d.num_active() >= 1);
        assert_eq!(d.target.shape(), &[cfg.data.canvas, cfg.data.canvas, 3]);
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(cli(&["gen-data", "--out", &s(d.path()), "--num", "12", "--seed", "9"]), 0);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 12);
    assert_eq!(ta, tb);
}
