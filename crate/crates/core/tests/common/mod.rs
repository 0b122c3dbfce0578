#![allow(dead_code)]

use std::path::Path;

use msdiff::config::RunConfig;
use msdiff::embedding::PatchEncoderConfig;
use msdiff::resampler::ResamplerConfig;

/// A model small enough for multi-thousand-step runs inside the test suite.
pub fn small_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    let m = &mut cfg.model;
    m.text.dim = 8;
    m.text.heads = 1;
    m.patch = PatchEncoderConfig { patch: 4, dim: 8, crop_size: 8 };
    m.resampler = ResamplerConfig { depth: 1, n_t: 2, d_q: 8, d_i: 8, d_c: 8, heads: 1, num_freqs: 2, grounding_hidden: 16, ..ResamplerConfig::default() };
    m.denoiser.latent_h = 4;
    m.denoiser.latent_w = 4;
    m.denoiser.base_width = 8;
    m.denoiser.heads = 1;
    m.denoiser.n_t = 2;
    m.denoiser.dummy_count = 2;
    m.denoiser.time_dim = 8;
    m.denoiser.attn_resolutions = vec![4, 2];
    cfg.data.canvas = cfg.model.canvas();
    cfg.data.forge.crop_size = 8;
    cfg.sample.num_steps = 10;
    cfg
}

pub fn cli(args: &[&str]) -> i32 {
    msdiff::cli::run(std::iter::once("msdiff").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
