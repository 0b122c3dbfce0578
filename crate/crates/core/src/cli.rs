//! The `msdiff` command line: gen-data, train, sample and eval.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{crop_resize, read_dataset, read_ppm, write_dataset, write_file, write_pgm, write_ppm, Forge};
use crate::diffusion::{sample_many, train, PseudoLayoutConfig, SampleRequest, StepLog};
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::eval::{bench_run, Bench, DEFAULT_SAMPLES_PER_CASE};
use crate::exec::{configure_threads_from_env, Exec};
use crate::geometry::BoxNorm;
use crate::model::Model;
use crate::resampler::SubjectInput;
use crate::rng::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "msdiff", version, about = "Toy multi-subject grounded diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grounded dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Run a bench file against a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Run config supplying the remaining data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// `image.ppm:entity:x0,y0,x1,y1`, up to four times.
    #[arg(long = "subject")]
    pub subjects: Vec<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `threshold,switch_step`.
    #[arg(long = "pseudo-layout")]
    pub pseudo_layout: Option<String>,
    #[arg(long = "num-samples", default_value_t = 1)]
    pub num_samples: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one PGM attention heatmap per subject.
    #[arg(long = "dump-attn")]
    pub dump_attn: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "samples-per-case", default_value_t = DEFAULT_SAMPLES_PER_CASE)]
    pub samples_per_case: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Parse `image.ppm:entity:x0,y0,x1,y1`. The image path may itself
/// contain colons; the last two fields are split from the right.
pub fn parse_subject_flag(flag: &str) -> Result<(PathBuf, String, BoxNorm)> {
    let bad = |why: &str| Error::parse("--subject", format!("{why} in {flag:?}; expected image.ppm:entity:x0,y0,x1,y1"));
    let mut parts = flag.rsplitn(3, ':');
    let bbox = parts.next().ok_or_else(|| bad("missing box"))?;
    let entity = parts.next().ok_or_else(|| bad("missing entity"))?;
    let image = parts.next().filter(|p| !p.is_empty()).ok_or_else(|| bad("missing image path"))?;
    if entity.is_empty() {
        return Err(bad("empty entity"));
    }
    let bbox = BoxNorm::parse(bbox).map_err(|e| bad(&e.to_string()))?;
    Ok((PathBuf::from(image), entity.to_string(), bbox))
}

pub fn parse_pseudo_layout(flag: &str) -> Result<PseudoLayoutConfig> {
    let bad = || Error::parse("--pseudo-layout", format!("expected threshold,switch_step but got {flag:?}"));
    let (thr, switch) = flag.split_once(',').ok_or_else(bad)?;
    Ok(PseudoLayoutConfig {
        threshold: thr.trim().parse().map_err(|_| bad())?,
        switch_step: switch.trim().parse().map_err(|_| bad())?,
        use_prior: false,
    })
}

pub fn cmd_gen_data(args: &GenDataArgs, exec: Exec) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(j) = args.jitter {
        cfg.data.jitter = j;
    }
    let forge = Forge::new(cfg.data.forge_config(), Vocab::toy())?;
    let samples = forge.generate(args.seed, args.num, exec)?;
    write_dataset(&samples, &args.out)?;
    Ok(())
}

fn loss_csv_line(log: &StepLog) -> String {
    format!("{},{},{}\n", log.step, log.l_ip, log.l_am)
}

fn step_checkpoint_path(out: &Path, step: usize) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(format!(".step{step:06}"));
    PathBuf::from(name)
}

pub fn cmd_train(args: &TrainArgs, exec: Exec) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let vocab = Vocab::toy();
    let data = read_dataset(&args.data, &vocab)?;
    let mut model = Model::init(cfg.model.clone(), vocab, cfg.seed)?;
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut csv = String::from("step,L_IP,L_am\n");
    let every = cfg.train.checkpoint_every;
    train(&mut model, &data, &cfg.train, &mut rng, exec, |log, m| {
        csv.push_str(&loss_csv_line(log));
        if every > 0 && log.step % every == 0 && log.step < cfg.train.steps {
            checkpoint::save(&step_checkpoint_path(&args.out, log.step), m, &cfg, None)?;
        }
        Ok(())
    })
    .map(|_| ())?;
    checkpoint::save(&args.out, &model, &cfg, Some(rng.state()))?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_file(&log_path, csv.as_bytes())
}

fn load_subject(model: &Model, flag: &str) -> Result<SubjectInput> {
    let (path, entity, bbox) = parse_subject_flag(flag)?;
    let image = read_ppm(&path)?;
    let crop = crop_resize(&image, &BoxNorm::FULL, model.config.patch.crop_size)?;
    let entity = model.vocab.id(&entity).map_err(|_| Error::parse("--subject", format!("unknown entity {entity:?} in {flag:?}")))?;
    Ok(SubjectInput { image: crop, entity, bbox })
}

pub fn cmd_sample(args: &SampleArgs, exec: Exec) -> Result<()> {
    let ck = checkpoint::load(&args.ckpt)?;
    let model = ck.model;
    let mut sampler = ck.config.sample.clone();
    if let Some(g) = args.gamma {
        sampler.gamma = g;
    }
    if let Some(s) = args.guidance {
        sampler.guidance_scale = s;
    }
    if let Some(n) = args.steps {
        sampler.num_steps = n;
    }
    if let Some(p) = &args.pseudo_layout {
        sampler.pseudo_layout = Some(parse_pseudo_layout(p)?);
    }
    sampler.validate(model.schedule().len())?;
    if args.subjects.len() > crate::resampler::MAX_SUBJECTS {
        return Err(Error::parse("--subject", format!("at most {} subjects, got {}", crate::resampler::MAX_SUBJECTS, args.subjects.len())));
    }
    let subjects = args.subjects.iter().map(|f| load_subject(&model, f)).collect::<Result<Vec<_>>>()?;
    let req = SampleRequest { prompt_ids: model.vocab.encode(&args.prompt)?, subjects, interpolation: None };
    let seed = args.seed.unwrap_or(ck.config.seed);
    let outputs = sample_many(&model, &req, &sampler, seed, args.num_samples, exec)?;
    for (i, out) in outputs.iter().enumerate() {
        write_ppm(&args.out.join(format!("sample_{i:03}.ppm")), &out.image)?;
        if args.dump_attn {
            for (j, map) in out.heatmaps.iter().enumerate() {
                write_pgm(&args.out.join(format!("sample_{i:03}_attn_{j}.pgm")), map)?;
            }
        }
    }
    Ok(())
}

/// Returns whether every case succeeded.
pub fn cmd_eval(args: &EvalArgs, exec: Exec) -> Result<bool> {
    let ck = checkpoint::load(&args.ckpt)?;
    let bench = Bench::load(&args.bench)?;
    let mut sampler = ck.config.sample.clone();
    if let Some(n) = args.steps {
        sampler.num_steps = n;
    }
    let seed = args.seed.unwrap_or(ck.config.seed);
    let report = bench_run(&ck.model, &bench, &sampler, args.samples_per_case, seed, exec)?;
    write_file(&args.out, report.to_json().as_bytes())?;
    Ok(report.failed_cases == 0)
}

/// Run the CLI on `args` (including the program name) and return the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads_from_env() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let exec = Exec::default();
    let outcome = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, exec).map(|_| true),
        Command::Train(a) => cmd_train(a, exec).map(|_| true),
        Command::Sample(a) => cmd_sample(a, exec).map(|_| true),
        Command::Eval(a) => cmd_eval(a, exec),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: some bench cases failed; see the report");
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } | Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_flag() {
        let (p, e, b) = parse_subject_flag("dir/a.ppm:circle:0,0.25,0.5,0.75").unwrap();
        assert_eq!(p, PathBuf::from("dir/a.ppm"));
        assert_eq!(e, "circle");
        assert_eq!(b.coords(), [0.0, 0.25, 0.5, 0.75]);
        let (p, _, _) = parse_subject_flag("C:/x.ppm:star:0,0,1,1").unwrap();
        assert_eq!(p, PathBuf::from("C:/x.ppm"));
        for bad in ["a.ppm:circle", "a.ppm:circle:0,0,1", ":circle:0,0,1,1", "a.ppm::0,0,1,1", "a.ppm:circle:0.5,0,0.5,1"] {
            let err = parse_subject_flag(bad).unwrap_err().to_string();
            assert!(err.contains(bad), "{err}");
        }
    }

    #[test]
    fn pseudo_layout_flag() {
        let p = parse_pseudo_layout("0.5,20").unwrap();
        assert_eq!((p.threshold, p.switch_step), (0.5, 20));
        assert!(parse_pseudo_layout("0.5").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["msdiff", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["msdiff", "sample", "--prompt", "a"]), EXIT_USAGE);
    }
}
