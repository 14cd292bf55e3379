//! `polyseg` command line: prepare, train, evaluate, report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::datapipe::{self, AugmentPolicy, ImageSample, PrepareOptions};
use crate::error::{Result, SegError};
use crate::evaluator::{self, RunReport, TableFormat};
use crate::models::{build_model, Arch, ModelConfig};
use crate::trainer::{self, TrainConfig};

/// Bundled model and data settings for the five reference runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunPreset {
    Run1,
    Run2,
    Run3,
    Run4,
    Run5,
}

impl RunPreset {
    pub fn arch(self) -> Arch {
        match self {
            RunPreset::Run1 => Arch::Unet,
            RunPreset::Run2 => Arch::LeakyUnet,
            RunPreset::Run3 => Arch::ResUnet,
            RunPreset::Run4 => Arch::InceptionUnet,
            RunPreset::Run5 => Arch::PraNetLite,
        }
    }

    /// The first two runs use a single pooling stage.
    pub fn depth(self) -> usize {
        match self {
            RunPreset::Run1 | RunPreset::Run2 => 1,
            _ => 4,
        }
    }

    pub fn crop(self) -> bool {
        true
    }

    pub fn augment(self) -> bool {
        true
    }

    pub fn model_config(self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.arch());
        cfg.depth = self.depth();
        cfg
    }
}

#[derive(Debug, Parser)]
#[command(name = "polyseg", about = "Polyp segmentation workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a prepared dataset (originals, cropped copies, augmented copies).
    Prepare(PrepareArgs),
    /// Train one architecture and write its best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a run report.
    Evaluate(EvaluateArgs),
    /// Render run reports as a results table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AugmentKind {
    Rotation,
    Zoom,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Append a polyp-centred crop of every sample.
    #[arg(long)]
    crop: bool,
    #[arg(long, default_value_t = datapipe::DEFAULT_BBOX_MARGIN)]
    margin: f64,
    #[arg(long, value_delimiter = ',')]
    augment: Vec<AugmentKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take crop/augment settings from a run preset.
    #[arg(long, value_enum)]
    preset: Option<RunPreset>,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|_| format!("valid architectures: {}", Arch::valid_names()))
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TrainConfig JSON file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_arch, required_unless_present = "preset")]
    arch: Option<Arch>,
    #[arg(long)]
    data: PathBuf,
    /// Best-checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<RunPreset>,
    /// ModelConfig JSON file; `--arch` and size flags override its fields.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square training resolution.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// History destination; defaults to `<out>.history.jsonl`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = evaluator::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the checkpoint file stem.
    #[arg(long)]
    run_id: Option<String>,
    /// Square evaluation resolution; defaults to the training resolution.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

/// Exit code for an error.
pub fn exit_code(err: &SegError) -> i32 {
    match err {
        SegError::NonFinite { .. } => 3,
        SegError::Io(_) | SegError::Image(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().ansi().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_nonempty(dir: &Path) -> Result<Vec<ImageSample>> {
    let samples = datapipe::load_dataset(dir)?;
    if samples.is_empty() {
        return Err(SegError::Load {
            path: dir.to_path_buf(),
            msg: "no image/mask pairs".into(),
        });
    }
    Ok(samples)
}

fn cmd_prepare(a: &PrepareArgs, out: &mut dyn Write) -> Result<()> {
    let samples = load_nonempty(&a.input)?;
    let mut augment = a.augment.clone();
    let mut crop = a.crop;
    if let Some(p) = a.preset {
        crop |= p.crop();
        if p.augment() && augment.is_empty() {
            augment = vec![AugmentKind::Rotation, AugmentKind::Zoom];
        }
    }
    let policy = (!augment.is_empty()).then(|| AugmentPolicy {
        rotation: augment.contains(&AugmentKind::Rotation),
        zoom: augment.contains(&AugmentKind::Zoom),
        ..AugmentPolicy::default()
    });
    let opts = PrepareOptions {
        crop,
        margin: a.margin,
        augment: policy,
        seed: a.seed,
    };
    let prepared = datapipe::prepare(&samples, &opts)?;
    datapipe::write_dataset(&prepared, &a.output)?;
    writeln!(out, "prepared {} samples", prepared.len())?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SegError::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut train_cfg = TrainConfig::from_json(&read_text(&a.config)?)?;
    let mut model_cfg = match (&a.model_config, a.preset) {
        (Some(path), _) => ModelConfig::from_json(&read_text(path)?)?,
        (None, Some(p)) => p.model_config(),
        (None, None) => ModelConfig::new(a.arch.expect("clap requires --arch without --preset")),
    };
    if let Some(arch) = a.arch.or(a.preset.map(RunPreset::arch)) {
        model_cfg.arch = arch;
    }
    if let Some(p) = a.preset.filter(|_| a.model_config.is_none()) {
        model_cfg.depth = p.depth();
    }
    if let Some(w) = a.base_width {
        model_cfg.base_width = w;
    }
    if let Some(d) = a.depth {
        model_cfg.depth = d;
    }
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    train_cfg.checkpoint_path = Some(a.out.clone());
    train_cfg.validate()?;
    model_cfg.validate()?;
    if a.size % model_cfg.spatial_multiple() != 0 {
        return Err(SegError::Config(format!(
            "--size {} is not divisible by 2^depth = {}",
            a.size,
            model_cfg.spatial_multiple()
        )));
    }

    let samples = load_nonempty(&a.data)?
        .iter()
        .map(|s| datapipe::resize(s, a.size, a.size))
        .collect::<Result<Vec<_>>>()?;
    let (train_set, val_set) = datapipe::split(&samples, a.train_fraction, train_cfg.seed)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(SegError::Config(format!(
            "{} samples are too few to split at train fraction {}",
            samples.len(),
            a.train_fraction
        )));
    }
    let model = build_model(&model_cfg)?;
    let (_, history) = trainer::train(model, &train_set, &val_set, &train_cfg)?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.jsonl");
        PathBuf::from(p)
    });
    fs::write(&history_path, history.to_jsonl())?;
    let last = history.records.last().expect("at least one epoch");
    writeln!(
        out,
        "trained {} for {} epochs: train_loss {:.4} val_loss {:.4} val_dice {:.4}",
        model_cfg.arch,
        history.len(),
        last.train_loss,
        last.val_loss,
        last.val_dice
    )?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(SegError::Domain("threshold must be in (0,1)".into()));
    }
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let size = a.size.map(|s| [s, s]).or(ckpt.input_size);
    let samples = load_nonempty(&a.data)?
        .iter()
        .map(|s| match size {
            Some([h, w]) => datapipe::resize(s, h, w),
            None => Ok(s.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        a.checkpoint
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string()
    });
    let report = evaluator::evaluate(&ckpt.model, &samples, a.threshold, &run_id)?;
    fs::write(&a.out, report.to_json())?;
    write!(out, "{}", evaluator::format_table(&[report], TableFormat::Csv)?)?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            RunReport::from_json(&read_text(p)?).map_err(|e| SegError::Load {
                path: p.clone(),
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let format = match a.format {
        FormatArg::Csv => TableFormat::Csv,
        FormatArg::Markdown => TableFormat::Markdown,
    };
    write!(out, "{}", evaluator::format_table(&reports, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("polyseg").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn unknown_flag_is_rejected() {
        let (code, out, err) = run_capture(&["report", "--inputs", "a.json", "--bogus"]);
        assert_eq!(code, 2);
        assert!(out.is_empty());
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn bogus_arch_lists_names() {
        let (code, _, err) = run_capture(&["train", "--config", "c.json", "--arch", "bogus", "--data", "d", "--out", "o"]);
        assert_eq!(code, 2);
        assert!(err.contains("pranet-lite") && err.contains("inception-unet"), "{err}");
    }

    #[test]
    fn presets_mirror_runs() {
        assert_eq!(RunPreset::Run3.arch(), Arch::ResUnet);
        assert_eq!(RunPreset::Run1.depth(), 1);
        assert_eq!(RunPreset::Run5.model_config().arch, Arch::PraNetLite);
    }
}
