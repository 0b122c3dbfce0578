mod common;

use common::small_run_config;
use msdiff::checkpoint;
use msdiff::data::Forge;
use msdiff::diffusion::{sample_many, train, SampleRequest};
use msdiff::embedding::Vocab;
use msdiff::exec::Exec;
use msdiff::model::Model;
use msdiff::rng::Rng;

#[test]
fn save_load_forward_is_bitwise() {
    let mut cfg = small_run_config(41);
    cfg.train.steps = 6;
    cfg.train.base_steps = 3;
    let vocab = Vocab::toy();
    let data = Forge::new(cfg.data.forge_config(), vocab.clone()).unwrap().generate(41, 8, Exec::Sequential).unwrap();
    let mut model = Model::init(cfg.model.clone(), vocab, 41).unwrap();
    let mut rng = Rng::new(41);
    train(&mut model, &data, &cfg.train, &mut rng, Exec::Sequential, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, &cfg, Some(rng.state())).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.step, 6);
    assert_eq!(loaded.rng, Some(rng.state()));

    let s = &data[0];
    let req = SampleRequest { prompt_ids: s.caption_ids.clone(), subjects: s.active_subjects().map(|x| x.to_input()).collect(), interpolation: None };
    let a = sample_many(&model, &req, &cfg.sample, 7, 2, Exec::Sequential).unwrap();
    let b = sample_many(&loaded.model, &req, &cfg.sample, 7, 2, Exec::Sequential).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    // Re-saving the loaded model reproduces the file.
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&again, &loaded.model, &loaded.config, loaded.rng).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small_run_config(1);
    let model = Model::init(cfg.model.clone(), Vocab::toy(), 1).unwrap();
    let bytes = checkpoint::encode(&model.params, &cfg, &model.vocab, None).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 8], "t").is_err());
    assert!(checkpoint::from_bytes(&bytes[..4], "t").is_err());
    let mut extra = bytes.clone();
    extra.extend([0u8; 8]);
    assert!(checkpoint::from_bytes(&extra, "t").is_err());
    assert!(checkpoint::from_bytes(&bytes, "t").is_ok());
}

#[test]
fn parallel_matches_sequential() {
    // More workers than cores so the split really interleaves.
    msdiff::exec::configure_threads(4);
    let cfg = small_run_config(51);
    let vocab = Vocab::toy();
    let forge = Forge::new(cfg.data.forge_config(), vocab.clone()).unwrap();
    let seq = forge.generate(51, 12, Exec::Sequential).unwrap();
    let par = forge.generate(51, 12, Exec::Parallel).unwrap();
    assert_eq!(seq, par);

    let run = |exec: Exec| {
        let mut model = Model::init(cfg.model.clone(), vocab.clone(), 51).unwrap();
        let mut train_cfg = cfg.train.clone();
        train_cfg.steps = 4;
        train_cfg.base_steps = 2;
        let logs = train(&mut model, &seq, &train_cfg, &mut Rng::new(3), exec, |_, _| Ok(())).unwrap();
        let s = &seq[0];
        let req = SampleRequest { prompt_ids: s.caption_ids.clone(), subjects: s.active_subjects().map(|x| x.to_input()).collect(), interpolation: None };
        let imgs = sample_many(&model, &req, &cfg.sample, 9, 3, exec).unwrap();
        logs.iter().map(|l| l.loss.to_bits()).chain(imgs.iter().flat_map(|o| o.image.data().iter().map(|v| v.to_bits()))).collect::<Vec<u64>>()
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Parallel);
    assert_eq!(a, b);
}

