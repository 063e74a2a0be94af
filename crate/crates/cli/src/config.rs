//! Command-line flags and their validated form.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use regseg_core::metrics::{CITYSCAPES_CLASSES, DEFAULT_EXCLUDED};
use regseg_core::{DilationSchedule, Error, Preset, Result};

/// Backbone output stride; image extents must be multiples of it.
pub const OUTPUT_STRIDE: usize = 16;
pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ITERS: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "regseg", version, about = "RegSeg inference and architecture analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: Args,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Layer table, parameter and MAC counts, field of view.
    Describe,
    /// Per-layer field-of-view table and hole-free check.
    Fov,
    /// Segment an image or a directory of images.
    Infer,
    /// Score predicted label maps against ground truth.
    Eval,
    /// Time the full model and the block comparison.
    Bench,
    /// Run the built-in verification suites.
    Selftest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct Args {
    /// Built-in preset name.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// TOML preset file; overrides --preset.
    #[arg(long, global = true)]
    pub preset_file: Option<PathBuf>,
    /// Dilation schedule, e.g. "(1,1)+(1,2)+4*(1,4)+7*(1,14)".
    #[arg(long, global = true)]
    pub schedule: Option<String>,
    /// Weight container; random weights when absent.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Image size as HxW.
    #[arg(long, global = true)]
    pub size: Option<String>,
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Classes left out of mIOU^R; empty string for none. Defaults to 14,15,16
    /// with 19 classes and to none otherwise.
    #[arg(long, global = true)]
    pub exclude_classes: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub report: Option<ReportFormat>,
    /// Also write colorized predictions (infer).
    #[arg(long, global = true)]
    pub color: bool,
    /// Palette file of `class_id R G B` lines (infer --color).
    #[arg(long, global = true)]
    pub palette: Option<PathBuf>,
    /// Seed for random weights and inputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Analyze only the stem and the first N backbone blocks (fov).
    #[arg(long, global = true)]
    pub prefix: Option<usize>,
    /// Also measure the field of view on the linearized twin at --size (fov).
    #[arg(long, global = true)]
    pub measure: bool,
    /// Skip the full-model timing (bench).
    #[arg(long, global = true)]
    pub skip_model: bool,
    /// Skip the block comparison (bench).
    #[arg(long, global = true)]
    pub skip_blocks: bool,
}

/// Flags resolved against defaults and validated.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: Preset,
    pub weights: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub size: (usize, usize),
    pub warmup: usize,
    pub iters: usize,
    pub threads: Option<usize>,
    pub excluded: Vec<usize>,
    pub report: ReportFormat,
    pub color: bool,
    pub palette: Option<PathBuf>,
    pub seed: u64,
    pub prefix: Option<usize>,
    pub measure: bool,
    pub skip_model: bool,
    pub skip_blocks: bool,
}

fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `HxW`.
pub fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| config(format!("size '{text}' is not HxW")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| config(format!("size '{text}' is not HxW")))
    };
    Ok((p(h)?, p(w)?))
}

pub fn check_size((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(config(format!(
            "size {h}x{w}: both extents must be positive multiples of {OUTPUT_STRIDE}"
        )));
    }
    Ok(())
}

pub fn parse_class_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| config(format!("bad class index '{s}'"))))
        .collect()
}

impl RunConfig {
    pub fn from_args(args: &Args) -> Result<Self> {
        let mut preset = match (&args.preset_file, &args.preset) {
            (Some(path), _) => Preset::load(path).map_err(|e| match e {
                Error::Io { .. } => config(e.to_string()),
                other => other,
            })?,
            (None, Some(name)) => Preset::by_name(name)?,
            (None, None) => Preset::regseg(),
        };
        if let Some(s) = &args.schedule {
            let schedule = DilationSchedule::parse(s).map_err(|e| config(format!("--schedule: {e}")))?;
            preset = preset.with_schedule(schedule);
        }
        if let Some(c) = args.classes {
            preset.num_classes = c;
        }
        preset
            .build()
            .map_err(|e| config(format!("preset '{}': {e}", preset.name)))?;

        let size = match &args.size {
            Some(s) => parse_size(s)?,
            None => (1024, 2048),
        };
        check_size(size)?;
        let warmup = args.warmup.unwrap_or(DEFAULT_WARMUP);
        let iters = args.iters.unwrap_or(DEFAULT_ITERS);
        if warmup == 0 || iters == 0 {
            return Err(config("--warmup and --iters must be at least 1"));
        }
        if args.threads == Some(0) {
            return Err(config("--threads must be at least 1"));
        }
        let excluded = match &args.exclude_classes {
            Some(s) => parse_class_list(s)?,
            None if preset.num_classes == CITYSCAPES_CLASSES.len() => DEFAULT_EXCLUDED.to_vec(),
            None => Vec::new(),
        };
        if let Some(&bad) = excluded.iter().find(|&&c| c >= preset.num_classes) {
            return Err(config(format!(
                "excluded class {bad} out of range for {} classes",
                preset.num_classes
            )));
        }
        Ok(RunConfig {
            preset,
            weights: args.weights.clone(),
            input: args.input.clone(),
            labels: args.labels.clone(),
            output: args.output.clone(),
            size,
            warmup,
            iters,
            threads: args.threads,
            excluded,
            report: args.report.unwrap_or_default(),
            color: args.color,
            palette: args.palette.clone(),
            seed: args.seed,
            prefix: args.prefix,
            measure: args.measure,
            skip_model: args.skip_model,
            skip_blocks: args.skip_blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_args(&Args::default()).unwrap();
        assert_eq!((c.warmup, c.iters), (10, 100));
        assert_eq!(c.size, (1024, 2048));
        assert_eq!(c.excluded, vec![14, 15, 16]);
        assert_eq!(c.preset.num_classes, 19);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            Args {
                warmup: Some(0),
                ..Args::default()
            },
            Args {
                iters: Some(0),
                ..Args::default()
            },
            Args {
                size: Some("100x64".into()),
                ..Args::default()
            },
            Args {
                size: Some("64".into()),
                ..Args::default()
            },
            Args {
                schedule: Some("(1,1".into()),
                ..Args::default()
            },
            Args {
                schedule: Some("12*(1,1)".into()),
                ..Args::default()
            },
            Args {
                preset: Some("nope".into()),
                ..Args::default()
            },
            Args {
                exclude_classes: Some("1,x".into()),
                ..Args::default()
            },
            Args {
                exclude_classes: Some("19".into()),
                ..Args::default()
            },
            Args {
                classes: Some(1),
                ..Args::default()
            },
        ];
        for a in bad {
            assert!(matches!(RunConfig::from_args(&a), Err(Error::Config(_))), "{a:?}");
        }
    }

    #[test]
    fn overrides() {
        let a = Args {
            schedule: Some("(1,1)+(1,2)+(1,4)+10*(1,6)".into()),
            classes: Some(11),
            exclude_classes: Some(String::new()),
            size: Some("768X768".into()),
            ..Args::default()
        };
        let c = RunConfig::from_args(&a).unwrap();
        assert_eq!(c.preset.schedule.to_string(), "(1,1)+(1,2)+(1,4)+10*(1,6)");
        assert_eq!(c.preset.num_classes, 11);
        assert!(c.excluded.is_empty());
        assert!(RunConfig::from_args(&Args {
            preset: Some("regseg-camvid".into()),
            ..Args::default()
        })
        .unwrap()
        .excluded
        .is_empty());
        assert_eq!(c.size, (768, 768));
    }
}
