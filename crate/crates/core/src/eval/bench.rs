use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{m_dino, subject_fidelity};
use super::scores::{layout_adherence, text_fidelity};
use crate::data::{crop_resize, read_file, render, write_file, SceneSpec, SubjectSpec};
use crate::diffusion::{sample_many, SampleRequest, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::geometry::BoxNorm;
use crate::model::Model;
use crate::palette::{Background, ShapeKind, SubjectColor};
use crate::resampler::SubjectInput;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BENCH_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SAMPLES_PER_CASE: usize = 5;
pub const SINGLE: &str = "single";
pub const DEFAULT_BOX: [f64; 4] = [0.25, 0.25, 0.75, 0.75];

const PAIR_LR: [[f64; 4]; 2] = [[0.00, 0.25, 0.50, 0.75], [0.50, 0.25, 1.00, 0.75]];
const CENTER_AND_FULL: [[f64; 4]; 2] = [[0.25, 0.25, 0.75, 0.75], [0.00, 0.00, 1.00, 1.00]];
const THREE_LR: [[f64; 4]; 3] = [[0.00, 0.25, 0.35, 0.75], [0.35, 0.25, 0.65, 0.75], [0.65, 0.25, 1.00, 0.75]];

/// Combination types and their preset boxes.
pub const COMBO_TYPES: [(&str, &[[f64; 4]]); 14] = [
    (SINGLE, &[DEFAULT_BOX]),
    ("living+living", &PAIR_LR),
    ("living+object", &PAIR_LR),
    ("object+object", &PAIR_LR),
    ("living+upwearing", &[[0.25, 0.25, 0.75, 0.75], [0.25, 0.00, 0.75, 0.25]]),
    ("living+midwearing", &[[0.25, 0.25, 0.75, 0.75], [0.25, 0.25, 0.75, 0.75]]),
    ("living+wholewearing", &[[0.25, 0.25, 0.75, 0.75], [0.25, 0.25, 0.75, 0.75]]),
    ("midwearing+downwearing", &[[0.25, 0.25, 0.75, 0.60], [0.25, 0.60, 0.75, 1.00]]),
    ("living+scene", &CENTER_AND_FULL),
    ("object+scene", &CENTER_AND_FULL),
    ("living+living+living", &THREE_LR),
    ("object+object+object", &THREE_LR),
    ("living+object+scene", &[[0.00, 0.25, 0.50, 0.75], [0.50, 0.25, 1.00, 0.75], [0.00, 0.00, 1.00, 1.00]]),
    ("upwearing+midwearing+downwearing", &[[0.25, 0.00, 0.75, 0.25], [0.25, 0.25, 0.75, 0.60], [0.25, 0.60, 0.75, 1.00]]),
];

/// Types shipped in the mini-bench, with the prompt template used for each.
pub const MINI_BENCH_TYPES: [(&str, &str); 9] = [
    ("living+living", "a {0} and a {1} {S}"),
    ("living+object", "a {0} and a {1} {S}"),
    ("object+object", "a {0} and a {1} {S}"),
    ("living+upwearing", "a {0} wearing a {1} {S}"),
    ("living+midwearing", "a {0} wearing a {1} {S}"),
    ("living+wholewearing", "a {0} wearing a {1} {S}"),
    ("midwearing+downwearing", "a {0} and a {1} {S}"),
    ("living+living+living", "a {0}, a {1}, and a {2} {S}"),
    ("upwearing+midwearing+downwearing", "a {0}, a {1}, and a {2} {S}"),
];

const SCENES: [Background; 2] = [Background::Gray, Background::White];

pub fn preset_boxes(combo_type: &str) -> Option<&'static [[f64; 4]]> {
    COMBO_TYPES.iter().find(|(name, _)| *name == combo_type).map(|(_, b)| *b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub combo_type: String,
    pub prompt: String,
    /// Preset boxes of the combination type when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
    /// `"<color>_<shape>"`, e.g. `"red_circle"`.
    pub subject_ids: Vec<String>,
    pub seed: u64,
}

impl BenchCase {
    pub fn resolved_boxes(&self) -> Result<Vec<BoxNorm>> {
        let preset = preset_boxes(&self.combo_type)
            .ok_or_else(|| Error::Contract(format!("unknown combination type {:?}", self.combo_type)))?;
        let raw: Vec<[f64; 4]> = self.boxes.clone().unwrap_or_else(|| preset.to_vec());
        ensure!(
            (1..=3).contains(&self.subject_ids.len()) && raw.len() == self.subject_ids.len(),
            Contract,
            "case has {} boxes for {} subjects",
            raw.len(),
            self.subject_ids.len()
        );
        raw.into_iter().map(BoxNorm::try_from).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bench {
    pub format_version: u32,
    pub cases: Vec<BenchCase>,
}

impl Bench {
    pub fn empty() -> Self {
        Bench { format_version: BENCH_FORMAT_VERSION, cases: Vec::new() }
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let bench: Bench = serde_json::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
        if bench.format_version != BENCH_FORMAT_VERSION {
            return Err(Error::Version { expected: BENCH_FORMAT_VERSION, found: bench.format_version });
        }
        for c in &bench.cases {
            ensure!(preset_boxes(&c.combo_type).is_some(), Contract, "unknown combination type {:?}", c.combo_type);
        }
        Ok(bench)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Bench::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }
}

pub fn subject_id(color: SubjectColor, shape: ShapeKind) -> String {
    format!("{color}_{shape}")
}

pub fn parse_subject_id(id: &str) -> Result<(SubjectColor, ShapeKind)> {
    let (c, s) = id.split_once('_').ok_or_else(|| Error::parse("subject id", format!("expected <color>_<shape>, got {id:?}")))?;
    Ok((c.parse()?, s.parse()?))
}

/// Reference image of a bench subject: the shape drawn upright at the
/// canvas center on gray, cut to its tight box.
pub fn reference_crop(color: SubjectColor, shape: ShapeKind, canvas: usize, crop_size: usize) -> Result<Tensor> {
    let spec = SceneSpec {
        subjects: vec![SubjectSpec { shape, color, center: (0.5, 0.5), scale: 0.5, rotation: 0.0 }],
        background: Background::Gray,
        canvas,
    };
    let frame = render(&spec)?;
    crop_resize(&frame.image, &frame.annotations[0].bbox, crop_size)
}

fn instantiate(template: &str, mentions: &[String], scene: Background) -> String {
    let mut out = template.replace("{S}", &format!("on a {scene} background"));
    for (k, m) in mentions.iter().enumerate() {
        out = out.replace(&format!("{{{k}}}"), m);
    }
    out
}

/// The shipped miniature bench: two scene variants of each type in
/// [`MINI_BENCH_TYPES`] plus two single-subject cases.
pub fn mini_bench() -> Bench {
    let mut cases = Vec::new();
    let push = |combo: &str, template: &str, n: usize, offset: usize, scene: Background, cases: &mut Vec<BenchCase>| {
        let subjects: Vec<(SubjectColor, ShapeKind)> = (0..n)
            .map(|k| (SubjectColor::ALL[(offset + 2 * k) % 5], ShapeKind::ALL[(offset + k) % 4]))
            .collect();
        let mentions: Vec<String> = subjects.iter().map(|(c, s)| format!("{c} {s}")).collect();
        let seed = cases.len() as u64;
        cases.push(BenchCase {
            combo_type: combo.to_string(),
            prompt: instantiate(template, &mentions, scene),
            boxes: Some(preset_boxes(combo).expect("known type").to_vec()),
            subject_ids: subjects.iter().map(|(c, s)| subject_id(*c, *s)).collect(),
            seed,
        });
    };
    for (t, (combo, template)) in MINI_BENCH_TYPES.iter().enumerate() {
        let n = combo.split('+').count();
        for (v, scene) in SCENES.iter().enumerate() {
            push(combo, template, n, t + v, *scene, &mut cases);
        }
    }
    for (v, scene) in SCENES.iter().enumerate() {
        push(SINGLE, "a {0} {S}", 1, 3 + v, *scene, &mut cases);
    }
    Bench { format_version: BENCH_FORMAT_VERSION, cases }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub subject_fidelity: f64,
    pub m_dino: f64,
    pub text_fidelity: f64,
    pub layout_adherence: f64,
}

impl Scores {
    fn mean<'a>(items: impl Iterator<Item = &'a Scores>) -> Option<Scores> {
        let mut acc = Scores { subject_fidelity: 0.0, m_dino: 0.0, text_fidelity: 0.0, layout_adherence: 0.0 };
        let mut n = 0usize;
        for s in items {
            acc.subject_fidelity += s.subject_fidelity;
            acc.m_dino += s.m_dino;
            acc.text_fidelity += s.text_fidelity;
            acc.layout_adherence += s.layout_adherence;
            n += 1;
        }
        (n > 0).then(|| {
            let k = 1.0 / n as f64;
            Scores {
                subject_fidelity: acc.subject_fidelity * k,
                m_dino: acc.m_dino * k,
                text_fidelity: acc.text_fidelity * k,
                layout_adherence: acc.layout_adherence * k,
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub per_subject_fidelity: Vec<f64>,
    /// Mean of `per_subject_fidelity` alongside the other scores.
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub index: usize,
    pub combo_type: String,
    pub prompt: String,
    pub boxes: Vec<[f64; 4]>,
    pub subject_ids: Vec<String>,
    pub samples: Vec<SampleScores>,
    pub mean: Option<Scores>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub seed: u64,
    pub samples_per_case: usize,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config: ReportConfig,
    pub cases: Vec<CaseReport>,
    /// Mean over successful cases.
    pub aggregate: Option<Scores>,
    pub failed_cases: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores of one generated image against a case.
pub fn score_image(image: &Tensor, prompt: &str, subjects: &[(BoxNorm, SubjectColor, Tensor)]) -> Result<SampleScores> {
    let per: Vec<f64> = subjects.iter().map(|(b, _, r)| subject_fidelity(image, r, b)).collect::<Result<_>>()?;
    let layout: Vec<(BoxNorm, SubjectColor)> = subjects.iter().map(|(b, c, _)| (*b, *c)).collect();
    let scores = Scores {
        subject_fidelity: per.iter().sum::<f64>() / per.len() as f64,
        m_dino: m_dino(&per)?,
        text_fidelity: text_fidelity(image, prompt)?,
        layout_adherence: layout_adherence(image, &layout)?,
    };
    Ok(SampleScores { per_subject_fidelity: per, scores })
}

fn run_case(model: &Model, case: &BenchCase, sampler: &SamplerConfig, n: usize, seed: u64, exec: Exec) -> Result<(Vec<BoxNorm>, Vec<SampleScores>)> {
    let boxes = case.resolved_boxes()?;
    let crop_size = model.config.patch.crop_size;
    let mut subjects = Vec::with_capacity(boxes.len());
    let mut inputs = Vec::with_capacity(boxes.len());
    for (id, b) in case.subject_ids.iter().zip(&boxes) {
        let (color, shape) = parse_subject_id(id)?;
        let crop = reference_crop(color, shape, model.canvas(), crop_size)?;
        inputs.push(SubjectInput { image: crop.clone(), entity: model.vocab.shape_id(shape), bbox: *b });
        subjects.push((*b, color, crop));
    }
    let req = SampleRequest { prompt_ids: model.vocab.encode(&case.prompt)?, subjects: inputs, interpolation: None };
    let case_seed = Rng::with_stream(seed, case.seed).next_u64();
    let outputs = sample_many(model, &req, sampler, case_seed, n, exec)?;
    let scores = outputs.iter().map(|o| score_image(&o.image, &case.prompt, &subjects)).collect::<Result<_>>()?;
    Ok((boxes, scores))
}

/// Generate `samples_per_case` images for every case and score them. A
/// failing case is recorded in its report entry and the run continues.
pub fn bench_run(model: &Model, bench: &Bench, sampler: &SamplerConfig, samples_per_case: usize, seed: u64, exec: Exec) -> Result<EvalReport> {
    ensure!(samples_per_case >= 1, Contract, "samples_per_case must be at least 1");
    sampler.validate(model.schedule().len())?;
    let mut cases = Vec::with_capacity(bench.cases.len());
    for (index, case) in bench.cases.iter().enumerate() {
        let mut report = CaseReport {
            index,
            combo_type: case.combo_type.clone(),
            prompt: case.prompt.clone(),
            boxes: Vec::new(),
            subject_ids: case.subject_ids.clone(),
            samples: Vec::new(),
            mean: None,
            error: None,
        };
        match run_case(model, case, sampler, samples_per_case, seed, exec) {
            Ok((boxes, samples)) => {
                report.boxes = boxes.iter().map(BoxNorm::coords).collect();
                report.mean = Scores::mean(samples.iter().map(|s| &s.scores));
                report.samples = samples;
            }
            Err(e) => report.error = Some(e.to_string()),
        }
        cases.push(report);
    }
    let aggregate = Scores::mean(cases.iter().filter_map(|c| c.mean.as_ref()));
    let failed_cases = cases.iter().filter(|c| c.error.is_some()).count();
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        config: ReportConfig { seed, samples_per_case, sampler: sampler.clone() },
        cases,
        aggregate,
        failed_cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Vocab;

    #[test]
    fn mini_bench_shape() {
        let b = mini_bench();
        assert_eq!(b.cases.len(), 20);
        let vocab = Vocab::toy();
        for c in &b.cases {
            let boxes = c.resolved_boxes().unwrap();
            assert_eq!(boxes.len(), c.subject_ids.len());
            vocab.encode(&c.prompt).unwrap();
            super::super::scores::parse_mentions(&c.prompt).unwrap();
        }
        assert_eq!(b.cases[0].prompt, "a red circle and a blue square on a gray background");
    }

    #[test]
    fn single_defaults_to_center_box() {
        let case = BenchCase {
            combo_type: SINGLE.into(),
            prompt: "a red circle".into(),
            boxes: None,
            subject_ids: vec!["red_circle".into()],
            seed: 0,
        };
        assert_eq!(case.resolved_boxes().unwrap(), vec![BoxNorm::CENTER]);
    }

    #[test]
    fn subject_ids() {
        assert_eq!(parse_subject_id("blue_star").unwrap(), (SubjectColor::Blue, ShapeKind::Star));
        assert!(parse_subject_id("bluestar").is_err());
        assert!(parse_subject_id("blue_dog").is_err());
    }

    #[test]
    fn shipped_asset_matches_generator() {
        let shipped = include_str!("../../assets/mini_bench.json");
        assert_eq!(shipped, mini_bench().to_json());
    }
}
