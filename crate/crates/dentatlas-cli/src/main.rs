//! `dentatlas` — build unbiased dental templates and parametric dental
//! shape models from labeled tooth volumes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dentatlas::pipeline::{
    self, EvalSettings, MeshSource, PipelineConfig,
};
use dentatlas::ErrorClass;

#[derive(Parser)]
#[command(name = "dentatlas", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write or inspect pipeline configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Generate a synthetic phantom cohort with known ground truth.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Crop, mask and reassign one subject's volume + labels.
    Enhance {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Pairwise registration: rigid, affine, then symmetric diffeomorphic.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        fixed_guidance: Option<PathBuf>,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        moving_guidance: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Groupwise template construction.
    Atlas {
        #[command(subcommand)]
        action: AtlasAction,
    },
    /// Transfer atlas tooth labels onto a subject and score them.
    Label {
        #[arg(long)]
        atlas_dir: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Extract tooth or isosurface meshes as ASCII PLY.
    Mesh {
        /// Label map; one PLY per tooth (or one with --label).
        #[arg(long, conflicts_with = "volume")]
        labels: Option<PathBuf>,
        /// Restrict label extraction to one FDI code.
        #[arg(long, requires = "labels")]
        label: Option<u16>,
        /// Scalar volume for a single isosurface.
        #[arg(long, requires = "iso")]
        volume: Option<PathBuf>,
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Establish point-to-point correspondence against the atlas teeth.
    Correspond {
        /// Atlas label map (atlas_labels.mha from `atlas build`).
        #[arg(long)]
        atlas_labels: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fit a PCA shape model and report how many modes reach a threshold.
    Pca {
        /// Corresponded shape set header (e.g. dentition.json).
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long, default_value_t = 0.85)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Synthesize shapes along one principal component.
    Synth {
        #[arg(long)]
        model: PathBuf,
        /// 1-based principal component index.
        #[arg(long)]
        pc: usize,
        /// Coefficient range in SD units, e.g. -3..+3.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_sd_range)]
        sd: (f64, f64),
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run the phantom evaluation: unbiased-atlas and labeling experiments.
    Eval {
        #[arg(long)]
        out: PathBuf,
        /// Scaled-down sizes for a smoke run.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Write the full default configuration.
    Init {
        #[arg(long, default_value = "dentatlas.json")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PhantomAction {
    /// Generate a template and an antithetic cohort.
    Make {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        dims: usize,
        #[arg(long, default_value_t = 2.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Subcommand)]
enum AtlasAction {
    /// Build the groupwise template from a cohort manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn parse_sd_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected LO..HI, got {s:?}"))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|_| format!("bad range start {lo:?}"))?;
    let hi: f64 = hi
        .trim()
        .trim_start_matches('+')
        .parse()
        .map_err(|_| format!("bad range end {hi:?}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok((lo, hi))
}

fn load_config(arg: &ConfigArg) -> dentatlas::Result<PipelineConfig> {
    match &arg.config {
        Some(path) => PipelineConfig::read(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn init_thread_pool(cfg: &PipelineConfig) {
    if cfg.parallelism > 0 {
        // ignore failure when a pool already exists (tests, repeated init)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, outcome) = dispatch(cli.command);
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error ({stage}): {err}");
            match err.class() {
                ErrorClass::Config => ExitCode::from(2),
                ErrorClass::Data => ExitCode::from(3),
                ErrorClass::Numerical => ExitCode::from(4),
            }
        }
    }
}

fn dispatch(command: Command) -> (&'static str, dentatlas::Result<ExitCode>) {
    match command {
        Command::Config { action } => ("config", run_config(action)),
        Command::Phantom { action } => ("phantom make", run_phantom(action)),
        Command::Enhance {
            volume,
            labels,
            out,
            config,
        } => ("enhance", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let report = pipeline::run_enhance(&cfg, &volume, &labels, &out)?;
                println!(
                    "enhanced: labels bbox {:?}..{:?}, crop {:?}..{:?}, dims {:?}",
                    report.labels_bbox_min,
                    report.labels_bbox_max,
                    report.crop_min,
                    report.crop_max,
                    report.cropped_dims
                );
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Register {
            fixed,
            fixed_guidance,
            moving,
            moving_guidance,
            out,
            config,
        } => ("register", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let report = pipeline::run_register(
                    &cfg,
                    &fixed,
                    fixed_guidance.as_deref(),
                    &moving,
                    moving_guidance.as_deref(),
                    &out,
                )?;
                println!(
                    "registered: metric {:.4}, round-trip {:.3} vox, min jacobian {:.3}",
                    report.final_metric,
                    report.round_trip_residual_vox,
                    report.min_interior_jacobian
                );
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Atlas { action } => ("atlas build", run_atlas(action)),
        Command::Label {
            atlas_dir,
            volume,
            labels,
            out,
            config,
        } => ("label", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let result = pipeline::run_label(&cfg, &atlas_dir, &volume, &labels, &out)?;
                println!(
                    "labeled {} teeth, success rate {:.3}",
                    result.assignments.len(),
                    result.success_rate
                );
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Mesh {
            labels,
            label,
            volume,
            iso,
            out,
            config,
        } => ("mesh", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let source = match (&labels, &volume) {
                    (Some(path), None) => MeshSource::Labels {
                        path,
                        label,
                    },
                    (None, Some(path)) => MeshSource::Volume {
                        path,
                        iso: iso.unwrap_or(0.5),
                    },
                    _ => {
                        return Err(dentatlas::Error::Config(
                            "provide exactly one of --labels or --volume".into(),
                        ))
                    }
                };
                let written = pipeline::run_mesh(&cfg, source, &out)?;
                println!("wrote {} mesh file(s)", written.len());
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Correspond {
            atlas_labels,
            manifest,
            out,
            config,
        } => ("correspond", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let outputs = pipeline::run_correspond(&cfg, &atlas_labels, &manifest, &out)?;
                println!(
                    "corresponded {} subjects: dentition ({} vertices) + 28 per-tooth sets",
                    outputs.dentition.n_subjects(),
                    outputs.dentition.n_vertices()
                );
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Pca {
            shapes,
            threshold,
            out,
            config,
        } => ("pca", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let report = pipeline::run_pca(&cfg, &shapes, threshold, &out)?;
                println!(
                    "{} of {} modes explain {:.1}% of the variance",
                    report.components_needed,
                    report.n_modes,
                    threshold * 100.0
                );
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Synth {
            model,
            pc,
            sd,
            steps,
            out,
            config,
        } => ("synth", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let written = pipeline::run_synth(&cfg, &model, pc, sd, steps, &out)?;
                println!("wrote {} shapes along PC{pc}", written.len());
                Ok(ExitCode::SUCCESS)
            })
        }),
        Command::Eval {
            out,
            quick,
            seed,
            config,
        } => ("eval", {
            load_config(&config).and_then(|cfg| {
                init_thread_pool(&cfg);
                let mut settings = if quick {
                    EvalSettings::quick()
                } else {
                    EvalSettings::default()
                };
                if let Some(s) = seed {
                    settings.seed = s;
                }
                let report = pipeline::run_eval(&cfg, &settings, &out)?;
                for check in &report.checks {
                    println!("{}", check.line());
                }
                println!(
                    "labeling: guided {:.3} vs intensity-only {:.3}; atlas-to-hidden {:.3} mm \
                     (best subject {:.3} mm); atlas build {:.0} s",
                    report.guided_success_rate,
                    report.intensity_only_success_rate,
                    report.atlas_distance_mm,
                    report
                        .subject_distances_mm
                        .iter()
                        .fold(f64::INFINITY, |a, &b| a.min(b)),
                    report.atlas_runtime_seconds
                );
                if report.all_passed {
                    println!("eval: all checks passed");
                    Ok(ExitCode::SUCCESS)
                } else {
                    Err(dentatlas::Error::NumericalFailure(
                        "evaluation checks failed (see report.json)".into(),
                    ))
                }
            })
        }),
    }
}

fn run_config(action: ConfigAction) -> dentatlas::Result<ExitCode> {
    match action {
        ConfigAction::Init { out } => {
            PipelineConfig::default().write(&out)?;
            println!("wrote default configuration to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_phantom(action: PhantomAction) -> dentatlas::Result<ExitCode> {
    match action {
        PhantomAction::Make {
            seed,
            n,
            dims,
            amplitude,
            noise,
            out,
            config,
        } => {
            let cfg = load_config(&config)?;
            init_thread_pool(&cfg);
            let outputs = pipeline::run_phantom_make(&cfg, seed, n, dims, amplitude, noise, &out)?;
            println!(
                "phantom cohort written: manifest {}, template {}",
                outputs.manifest_path.display(),
                outputs.template_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_atlas(action: AtlasAction) -> dentatlas::Result<ExitCode> {
    match action {
        AtlasAction::Build {
            manifest,
            out,
            config,
        } => {
            let cfg = load_config(&config)?;
            init_thread_pool(&cfg);
            let outputs = pipeline::run_atlas_build(&cfg, &manifest, &out)?;
            let last = outputs.result.trace.last();
            println!(
                "atlas built: {} subjects, {} iterations, final mean metric {:.4}, \
                 mean field norm {:.3} vox",
                outputs.result.subjects.len(),
                outputs.result.trace.len(),
                last.map(|r| r.mean_metric).unwrap_or(f64::NAN),
                last.map(|r| r.mean_field_norm_vox).unwrap_or(f64::NAN)
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
