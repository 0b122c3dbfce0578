//! Component ablations on the mini-bench: the full model against a copy
//! without masked cross-attention and a copy with a linear projector in
//! place of the grounding resampler. All variants of one seed share the
//! dataset, the text-only base training and the adapter training stream.

use serde::{Deserialize, Serialize};

use crate::checkpoint::restore_params;
use crate::config::RunConfig;
use crate::data::{Forge, TrainingSample};
use crate::diffusion::{train, TrainConfig, TrainMode};
use crate::embedding::Vocab;
use crate::error::Result;
use crate::eval::{bench_run, mini_bench, EvalReport};
use crate::exec::Exec;
use crate::model::{Model, ModelConfig};
use crate::params::ParamGroup;
use crate::resampler::ProjectorKind;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutMaskedAttention,
    LinearProjector,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::WithoutMaskedAttention, Variant::LinearProjector];

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutMaskedAttention => cfg.denoiser.masked_attention = false,
            Variant::LinearProjector => cfg.resampler.projector = ProjectorKind::Linear,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub run: RunConfig,
    pub base_steps: usize,
    pub adapter_steps: usize,
    pub samples_per_case: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { run: RunConfig::default(), base_steps: 5000, adapter_steps: 5000, samples_per_case: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub seed: u64,
    /// Mean of the last 100 logged `L_IP` values of adapter training.
    pub final_l_ip: f64,
    pub layout_adherence: f64,
    pub subject_fidelity: f64,
    pub report: EvalReport,
}

fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Train and score every variant under `seed`.
pub fn run_ablation(cfg: &AblationConfig, seed: u64, variants: &[Variant], exec: Exec) -> Result<Vec<VariantOutcome>> {
    let run = &cfg.run;
    let vocab = Vocab::toy();
    let forge = Forge::new(run.data.forge_config(), vocab.clone())?;
    let data: Vec<TrainingSample> = forge.generate(seed, run.data.num_samples, exec)?;

    let base_cfg = TrainConfig { steps: cfg.base_steps, base_steps: cfg.base_steps, mode: TrainMode::TwoPhase, ..run.train.clone() };
    let mut base = Model::init(run.model.clone(), vocab.clone(), seed)?;
    train(&mut base, &data, &base_cfg, &mut Rng::with_stream(seed, 1), exec, |_, _| Ok(()))?;
    let shared: std::collections::BTreeMap<String, crate::tensor::Tensor> = base
        .params
        .ids()
        .filter(|&id| base.params.group(id) != ParamGroup::Adapter)
        .map(|id| (base.params.name(id).to_string(), base.params.tensor(id).clone()))
        .collect();

    let adapter_cfg = TrainConfig { steps: cfg.adapter_steps, base_steps: 0, mode: TrainMode::TwoPhase, ..run.train.clone() };
    let bench = mini_bench();
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut model = Model::init(variant.model_config(&run.model), vocab.clone(), seed)?;
        let mut own: std::collections::BTreeMap<String, crate::tensor::Tensor> = model
            .params
            .ids()
            .map(|id| (model.params.name(id).to_string(), model.params.tensor(id).clone()))
            .collect();
        own.extend(shared.clone());
        restore_params(&mut model.params, &own, "shared base")?;
        let logs = train(&mut model, &data, &adapter_cfg, &mut Rng::with_stream(seed, 2), exec, |_, _| Ok(()))?;
        let l_ip: Vec<f64> = logs.iter().map(|l| l.l_ip).collect();
        let report = bench_run(&model, &bench, &run.sample, cfg.samples_per_case, seed, exec)?;
        let agg = report.aggregate.clone().unwrap_or(crate::eval::Scores {
            subject_fidelity: 0.0,
            m_dino: 0.0,
            text_fidelity: 0.0,
            layout_adherence: 0.0,
        });
        out.push(VariantOutcome {
            variant,
            seed,
            final_l_ip: tail_mean(&l_ip, 100),
            layout_adherence: agg.layout_adherence,
            subject_fidelity: agg.subject_fidelity,
            report,
        });
    }
    Ok(out)
}
