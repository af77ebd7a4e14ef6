//! Command-line driver for the two-stage pipeline.
//!
//! Every subcommand reads one JSON [`RunConfig`]; command-line flags override
//! file fields, which override defaults. Each run writes its resolved config
//! as `<output_dir>/<subcommand>.config.json` and holds `<output_dir>/.lock`
//! while it runs.
//!
//! Artifacts under the output directory:
//!
//! | subcommand   | files                                                        |
//! |--------------|--------------------------------------------------------------|
//! | `make-data`  | `pack/pack.json`, `pack/core_NN.f32`                         |
//! | `train-sft`  | `sft_checkpoint.json`, `sft_history.csv`                     |
//! | `train-grpo` | `grpo_checkpoint.json`, `grpo_log.jsonl`                     |
//! | `sample`     | `samples/NNN_<prompt>.f32`, `samples/NNN_<prompt>.ppm`       |
//! | `eval`       | `report.json`, `multimodal_report.json`, `transcripts.json`  |
//! | `ablate`     | `ablation.csv`, `ablation.json`                              |

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rolekit::checkpoint::Checkpoint;
use rolekit::encoders::{BuiltinScorer, Scorer};
use rolekit::evalbench::{
    eval_multimodal, eval_prompts, eval_t2i, generate_images, run_ablation, write_ablation_csv, write_report,
    AblationSuite,
};
use rolekit::flowgen::{MlpShape, SamplerConfig};
use rolekit::grporl::GrpoConfig;
use rolekit::pipeline::{grpo_stage, initial_checkpoint, sft_stage, ExperimentConfig};
use rolekit::rewards::{RewardWeights, Thresholds};
use rolekit::scorer::{ProcessScorer, SCORER_ENV};
use rolekit::sft::{write_history_csv, MixerConfig, SftConfig};
use rolekit::toyworld::{
    build_pack, load_pack, make_character, write_pack, write_raw_f32, CharacterPack, PackSizes, ToyImage, HEIGHT, WIDTH,
};
use rolekit::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackSection {
    /// Pack directory; when absent the pack is synthesized from the seeds.
    pub path: Option<PathBuf>,
    pub character_seed: u64,
    pub pack_seed: u64,
    pub sizes: PackSizes,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub weights: RewardWeights,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub semantic_seed: u64,
    pub structure_seed: u64,
    /// External scorer command line; falls back to the environment variable
    /// named by [`SCORER_ENV`], then to the built-in encoders.
    pub scorer_command: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Every pack prompt is evaluated this many times.
    pub repeats: usize,
    /// Also run the query-to-image pipeline when the checkpoint has a text model.
    pub multimodal: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { repeats: 4, multimodal: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub suite: AblationSuite,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { suite: AblationSuite::Stage, seeds: vec![0, 1, 2] }
    }
}

/// Everything a run needs. Section seeds are derived from `seed` on
/// resolution, so one number reproduces a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pack: PackSection,
    pub model: MlpShape,
    pub sft: SftConfig,
    pub mixer: MixerConfig,
    pub grpo: GrpoConfig,
    pub sampler: SamplerConfig,
    pub rewards: RewardSection,
    pub encoders: EncoderSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    /// Checkpoint read by `sample` and `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Starting point of `train-grpo`.
    pub sft_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pack: PackSection::default(),
            model: MlpShape::image(),
            sft: SftConfig::default(),
            mixer: MixerConfig::default(),
            grpo: GrpoConfig::default(),
            sampler: SamplerConfig::default(),
            rewards: RewardSection::default(),
            encoders: EncoderSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            checkpoint: None,
            sft_checkpoint: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Parse { path: origin.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_error("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    /// The training and evaluation settings, with seeds derived from `seed`.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            shape: self.model,
            sft: self.sft,
            mixer: self.mixer,
            grpo: self.grpo,
            sampler: self.sampler,
            weights: self.rewards.weights,
            thresholds: self.rewards.thresholds,
            eval_repeats: self.eval.repeats,
            seed: self.seed,
        }
        .with_seed(self.seed)
    }

    /// Copy with derived seeds written back into every section.
    pub fn resolved(&self) -> Self {
        let e = self.experiment();
        Self { sft: e.sft, mixer: e.mixer, grpo: e.grpo, sampler: e.sampler, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        self.pack.sizes.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(config_error("ablation.seeds", "must list at least one seed"));
        }
        for (field, path) in
            [("pack.path", &self.pack.path), ("checkpoint", &self.checkpoint), ("sft_checkpoint", &self.sft_checkpoint)]
        {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(config_error(field, format!("`{}` does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

#[derive(Debug, Parser)]
#[command(name = "rolekit", version, about = "Character personalization pipeline for a toy image generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a character pack.
    MakeData(CommonArgs),
    /// Unified supervised fine-tuning from a fresh initialization.
    TrainSft(CommonArgs),
    /// Policy optimization from an SFT checkpoint.
    TrainGrpo(GrpoArgs),
    /// Generate images for every pack prompt.
    Sample(CommonArgs),
    /// Score a checkpoint.
    Eval(CommonArgs),
    /// Run a stage or reward ablation.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Pack directory.
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub sft_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GrpoArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Start from a random initialization instead of an SFT checkpoint.
    #[arg(long)]
    pub allow_cold_start: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Stage,
    Reward,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub suite: Option<SuiteArg>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeData(_) => "make-data",
            Command::TrainSft(_) => "train-sft",
            Command::TrainGrpo(_) => "train-grpo",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::MakeData(c) | Command::TrainSft(c) | Command::Sample(c) | Command::Eval(c) => c,
            Command::TrainGrpo(g) => &g.common,
            Command::Ablate(a) => &a.common,
        }
    }
}

/// Config file, then flags, then seed resolution and validation.
pub fn resolve_config(command: &Command) -> Result<RunConfig> {
    let common = command.common();
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(p) = &common.pack {
        config.pack.path = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        config.checkpoint = Some(p.clone());
    }
    if let Some(p) = &common.sft_checkpoint {
        config.sft_checkpoint = Some(p.clone());
    }
    match command {
        Command::TrainGrpo(GrpoArgs { iterations: Some(n), .. }) => config.grpo.iterations = *n,
        Command::Ablate(a) => {
            if let Some(s) = a.suite {
                config.ablation.suite = match s {
                    SuiteArg::Stage => AblationSuite::Stage,
                    SuiteArg::Reward => AblationSuite::Reward,
                };
            }
            if let Some(seeds) = &a.seeds {
                config.ablation.seeds = seeds.clone();
            }
        }
        _ => {}
    }
    let config = config.resolved();
    config.validate()?;
    Ok(config)
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn scorer_for(config: &RunConfig) -> Result<Box<dyn Scorer>> {
    let command = config.encoders.scorer_command.clone().or_else(|| std::env::var(SCORER_ENV).ok());
    Ok(match command.filter(|c| !c.trim().is_empty()) {
        Some(cmd) => Box::new(ProcessScorer::spawn(&cmd)?),
        None => Box::new(BuiltinScorer::new(config.encoders.semantic_seed, config.encoders.structure_seed)),
    })
}

fn pack_for(config: &RunConfig) -> Result<CharacterPack> {
    match &config.pack.path {
        Some(dir) => load_pack(dir),
        None => synthesize_pack(config),
    }
}

fn synthesize_pack(config: &RunConfig) -> Result<CharacterPack> {
    build_pack(&make_character(config.pack.character_seed), config.pack.pack_seed, config.pack.sizes)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Binary PPM (`P6`) rendering of an image.
pub fn ppm_bytes(image: &ToyImage) -> Vec<u8> {
    let mut out = format!("P6\n{WIDTH} {HEIGHT}\n255\n").into_bytes();
    out.extend(image.to_rgb8());
    out
}

fn load_checkpoint(path: Option<&PathBuf>, field: &str, command: &str) -> Result<Checkpoint> {
    let path = path.ok_or_else(|| config_error(field, format!("required by {command}")))?;
    Checkpoint::load(path)
}

/// Runs a parsed command; returns the paths it wrote.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>> {
    let config = resolve_config(command)?;
    let out = config.output_dir.clone();
    let _lock = OutputLock::acquire(&out)?;
    let resolved_path = out.join(format!("{}.config.json", command.name()));
    write_text(&resolved_path, &config.to_json()?)?;
    let mut written = vec![resolved_path];
    let experiment = config.experiment();

    match command {
        Command::MakeData(_) => {
            let pack = synthesize_pack(&config)?;
            let dir = out.join("pack");
            write_pack(&pack, &dir)?;
            written.push(dir);
        }
        Command::TrainSft(_) => {
            let pack = pack_for(&config)?;
            let scorer = scorer_for(&config)?;
            let (ckpt, history) = sft_stage(&pack, &experiment, scorer.as_ref())?;
            let ckpt_path = out.join("sft_checkpoint.json");
            ckpt.save(&ckpt_path)?;
            let hist_path = out.join("sft_history.csv");
            write_history_csv(&history, &hist_path)?;
            written.extend([ckpt_path, hist_path]);
        }
        Command::TrainGrpo(args) => {
            let pack = pack_for(&config)?;
            let start = match (&config.sft_checkpoint, args.allow_cold_start) {
                (Some(p), _) => Checkpoint::load(p)?,
                (None, true) => initial_checkpoint(&pack, &experiment)?,
                (None, false) => {
                    return Err(config_error(
                        "sft_checkpoint",
                        "train-grpo starts from an SFT checkpoint; set it or pass --allow-cold-start",
                    ))
                }
            };
            let scorer = scorer_for(&config)?;
            let log_path = out.join("grpo_log.jsonl");
            let file = File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            let mut log = BufWriter::new(file);
            let (ckpt, _) = grpo_stage(&start, &pack, &experiment, scorer.as_ref(), Some(&mut log))?;
            log.flush().map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            let ckpt_path = out.join("grpo_checkpoint.json");
            ckpt.save(&ckpt_path)?;
            written.extend([log_path, ckpt_path]);
        }
        Command::Sample(_) => {
            let ckpt = load_checkpoint(config.checkpoint.as_ref(), "checkpoint", "sample")?;
            let pack = pack_for(&config)?;
            let scorer = scorer_for(&config)?;
            let prompts = eval_prompts(&pack, config.eval.repeats);
            let images = generate_images(&ckpt.velocity, &pack, &prompts, &config.sampler, scorer.as_ref())?;
            let dir = out.join("samples");
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            for (i, (image, prompt)) in images.iter().zip(&prompts).enumerate() {
                let stem = format!("{i:03}_{}", prompt.label());
                let raw = dir.join(format!("{stem}.f32"));
                write_raw_f32(image, &raw)?;
                let ppm = dir.join(format!("{stem}.ppm"));
                fs::write(&ppm, ppm_bytes(image)).map_err(|e| Error::Io { path: ppm.clone(), source: e })?;
                written.extend([raw, ppm]);
            }
        }
        Command::Eval(_) => {
            let ckpt = load_checkpoint(config.checkpoint.as_ref(), "checkpoint", "eval")?;
            let pack = pack_for(&config)?;
            let scorer = scorer_for(&config)?;
            let prompts = eval_prompts(&pack, config.eval.repeats);
            let outcome = eval_t2i(&ckpt.velocity, &pack, &prompts, &config.sampler, scorer.as_ref())?;
            let report_path = out.join("report.json");
            write_report(&outcome.report, &report_path)?;
            written.push(report_path);
            if let (Some(lm), true) = (&ckpt.lm, config.eval.multimodal) {
                let queries: Vec<String> = pack.mm_samples.iter().map(|s| s.user_input.clone()).collect();
                let mm = eval_multimodal(&ckpt.velocity, lm, &pack, &queries, &config.sampler, scorer.as_ref());
                match mm {
                    Ok(mm) => {
                        let path = out.join("multimodal_report.json");
                        write_report(&mm.report, &path)?;
                        let transcripts = out.join("transcripts.json");
                        write_json(&transcripts, &mm.transcripts)?;
                        written.extend([path, transcripts]);
                    }
                    Err(Error::InvalidArgument(msg)) => eprintln!("multimodal evaluation skipped: {msg}"),
                    Err(e) => return Err(e),
                }
            }
        }
        Command::Ablate(_) => {
            let pack = pack_for(&config)?;
            let scorer = scorer_for(&config)?;
            let rows =
                run_ablation(config.ablation.suite, &pack, &experiment, &config.ablation.seeds, scorer.as_ref())?;
            let csv_path = out.join("ablation.csv");
            write_ablation_csv(&rows, &csv_path)?;
            let json_path = out.join("ablation.json");
            write_json(&json_path, &rows)?;
            written.extend([csv_path, json_path]);
        }
    }
    Ok(written)
}

/// Parses `args` (program name first) and runs the command. Returns the exit
/// code: 0 on success, 1 on runtime failure, 2 on usage or config errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
