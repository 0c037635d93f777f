//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::gradcheck::{format_table, run_gradcheck};
use crate::nn::load_checkpoint;
use crate::phantom::{generate_dataset, MANIFEST_NAME};
use crate::pipeline::experiment::{ablate_cues, ablation_cases, checkpoint_name, run_fold, run_full_experiment, split_sizes, RunDir, METHODS};
use crate::pipeline::{majority_vote, predict, prepare, prepare_manifest, split_dataset, PrepConfig};
use crate::saliency::{generate_saliency_limited, read_saliency, write_saliency};
use crate::volume::{read_mask, read_volume, write_mask, write_volume};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "sdlseg", version, about = "Saliency-guided 3D U-Net segmentation of tumor bed volumes")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; keys not given keep their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from the single-core preset (16 epochs, lr 5e-4, no dropout)
    /// instead of the full schedule. Ignored when `--config` is given.
    #[arg(long)]
    pub desk: bool,
    /// Override a configuration key, e.g. `--set epochs=20` or
    /// `--set phantom.tbv_offset_hu=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// CT plus saliency map (two input channels).
    SdlSeg,
    /// CT only (one input channel).
    Unet,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::SdlSeg => METHODS[0].0,
            Method::Unet => METHODS[1].0,
        }
    }

    fn channels(self) -> usize {
        match self {
            Method::SdlSeg => 2,
            Method::Unet => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Double,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    Phantom {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of patients [default: from config, 29].
        #[arg(long)]
        patients: Option<usize>,
        /// Fractions per patient [default: from config, 5].
        #[arg(long)]
        fractions: Option<usize>,
        /// Master seed [default: from config, 7].
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compute the saliency map of a CT (HU) and breast mask.
    Saliency {
        #[arg(long, value_name = "FILE")]
        ct: PathBuf,
        #[arg(long, value_name = "FILE")]
        breast: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Keep only the N largest cues [default: all].
        #[arg(long, value_name = "N")]
        max_cues: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Resample, crop, compute saliency and window one image.
    Preprocess {
        #[arg(long, value_name = "FILE")]
        ct: PathBuf,
        #[arg(long, value_name = "FILE")]
        breast: PathBuf,
        #[arg(long, value_name = "FILE")]
        label: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train cross-validation folds on a dataset manifest.
    Train {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "sdl-seg")]
        method: Method,
        /// Train only this fold [default: all folds].
        #[arg(long)]
        fold: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Segment a preprocessed image with a checkpoint.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Windowed CT on the network grid (see `preprocess`).
        #[arg(long, value_name = "FILE")]
        ct: PathBuf,
        /// Saliency map; required by saliency-guided models, rejected by CT-only ones.
        #[arg(long, value_name = "FILE")]
        saliency: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Fuse fold masks by majority vote.
    Vote {
        #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
        masks: Vec<PathBuf>,
        /// Probability maps in the same order, used to break exact ties.
        #[arg(long, value_name = "FILE", num_args = 1..)]
        probs: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Compare a predicted mask with the ground truth.
    Eval {
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
    },
    /// Cue-count ablation with a saliency-guided checkpoint.
    Ablate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
        /// Number of phantom cases [default: from config, 20].
        #[arg(long)]
        cases: Option<usize>,
        /// Markers per phantom case and largest cue count [default: from config, 5].
        #[arg(long)]
        markers: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks of every layer and a tiny network.
    Gradcheck {
        #[arg(long, value_enum, default_value = "double")]
        precision: Precision,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Largest number of entries checked per tensor.
        #[arg(long, default_value_t = 12)]
        samples: usize,
    },
    /// Full cross-validated comparison of the two methods.
    Experiment {
        /// Existing dataset manifest [default: generate one under the run directory].
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
        /// Worker threads for fold-parallel training [default: from config, 1].
        #[arg(long)]
        jobs: Option<usize>,
        /// Also run the cue ablation with the best saliency-guided fold.
        #[arg(long)]
        ablate: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn resolve(cfg: &ConfigArgs, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let base = match &cfg.config {
        Some(p) => RunConfig::load(p)?,
        None if cfg.desk => RunConfig::desk(),
        None => RunConfig::default(),
    };
    let mut overrides = cfg.overrides.clone();
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push(format!("{k}={v}"));
        }
    }
    let c = base.with_overrides(&overrides)?;
    c.validate()?;
    Ok(c)
}

fn ensure_dir(d: &Path) -> Result<()> {
    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Runs a parsed command.
pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom {
            out,
            patients,
            fractions,
            seed,
            cfg,
        } => {
            let c = resolve(
                &cfg,
                &[
                    ("patients", patients.map(|v| v.to_string())),
                    ("fractions", fractions.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                ],
            )?;
            ensure_dir(&out)?;
            let m = generate_dataset(&c.phantom, c.patients, c.fractions, c.seed, &out)?;
            std::fs::write(out.join("config.echo.json"), c.to_json()).map_err(|e| Error::io(&out, e))?;
            println!("wrote {} CT volumes; manifest {}", m.ct_count(), out.join(MANIFEST_NAME).display());
        }
        Command::Saliency {
            ct,
            breast,
            out,
            max_cues,
            cfg,
        } => {
            let c = resolve(&cfg, &[])?;
            let s = generate_saliency_limited(&read_volume(&ct)?, &read_mask(&breast)?, &c.saliency(), max_cues)?;
            write_saliency(&s, &out)?;
            println!("cues: {}", s.cue_count);
        }
        Command::Preprocess {
            ct,
            breast,
            label,
            out_dir,
            cfg,
        } => {
            let c = resolve(&cfg, &[])?;
            let label = label.map(read_mask).transpose()?;
            let p = prepare("input", 0, &read_volume(&ct)?, &read_mask(&breast)?, label.as_ref(), &PrepConfig::from_run(&c))?;
            ensure_dir(&out_dir)?;
            write_volume(&p.ct_norm, out_dir.join("ct_norm.rvol"))?;
            write_saliency(&p.saliency, out_dir.join("saliency.rvol"))?;
            write_mask(&p.breast, out_dir.join("breast.rvol"))?;
            if let Some(l) = &p.label {
                write_mask(l, out_dir.join("label.rvol"))?;
            }
            std::fs::write(out_dir.join("config.echo.json"), c.to_json()).map_err(|e| Error::io(&out_dir, e))?;
            println!("dims {:?}, cues {}", p.ct_norm.dims(), p.saliency.cue_count);
        }
        Command::Train {
            manifest,
            run_dir,
            method,
            fold,
            cfg,
        } => {
            let c = resolve(&cfg, &[])?;
            let run = RunDir::create(&run_dir)?;
            run.echo_config(&c)?;
            let (m, root) = crate::phantom::Manifest::load(&manifest)?;
            let cases = prepare_manifest(&m, &root, &PrepConfig::from_run(&c))?;
            let ids: Vec<String> = m.patients.iter().map(|p| p.id.clone()).collect();
            let plan = split_dataset(&ids, c.seed, split_sizes(&c))?;
            write_json(&run.reports().join("split.json"), &plan)?;
            let folds: Vec<usize> = match fold {
                Some(k) if k >= plan.folds.len() => {
                    return Err(Error::InvalidArgument(format!("fold {k} does not exist ({} folds)", plan.folds.len())))
                }
                Some(k) => vec![k],
                None => (0..plan.folds.len()).collect(),
            };
            for k in folds {
                let o = run_fold(&c, &cases, &plan, method.name(), method.channels(), k, &run)?;
                println!(
                    "fold {k}: best epoch {} val DSC {:.4} -> {}",
                    o.best_epoch,
                    o.best_val_dsc,
                    run.checkpoints().join(checkpoint_name(method.name(), k)).display()
                );
            }
        }
        Command::Predict {
            checkpoint,
            ct,
            saliency,
            out_dir,
            threshold,
        } => {
            let t0 = Instant::now();
            let ck = load_checkpoint(&checkpoint)?;
            let ct = read_volume(&ct)?;
            let sal = saliency.map(read_saliency).transpose()?;
            let load_s = t0.elapsed().as_secs_f64();
            let p = predict(&ck.params, &ct, sal.as_ref(), threshold)?;
            let t1 = Instant::now();
            ensure_dir(&out_dir)?;
            write_volume(&p.prob, out_dir.join("prob.rvol"))?;
            write_mask(&p.mask, out_dir.join("mask.rvol"))?;
            let data_s = load_s + p.data_seconds + t1.elapsed().as_secs_f64();
            println!("foreground voxels: {}", p.mask.count());
            println!("data handling time: {data_s:.3} s");
            println!("computation time: {:.3} s", p.compute_seconds);
        }
        Command::Vote { masks, probs, out } => {
            let m = masks.iter().map(read_mask).collect::<Result<Vec<_>>>()?;
            let p = probs.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
            let fused = majority_vote(&m, (!p.is_empty()).then_some(p.as_slice()))?;
            write_mask(&fused, &out)?;
            println!("fused {} masks: {} foreground voxels", m.len(), fused.count());
        }
        Command::Eval { pred, truth } => {
            let m = evaluate(&read_mask(&pred)?, &read_mask(&truth)?)?;
            let fmt = |v: Option<f64>| v.map_or("undefined (empty mask)".to_string(), |v| format!("{v:.6}"));
            println!("DSC: {:.6}", m.dsc);
            println!("HD95 (mm): {}", fmt(m.hd95_mm));
            println!("ASD (mm): {}", fmt(m.asd_mm));
        }
        Command::Ablate {
            checkpoint,
            run_dir,
            cases,
            markers,
            cfg,
        } => {
            let c = resolve(
                &cfg,
                &[
                    ("ablation_cases", cases.map(|v| v.to_string())),
                    ("ablation_markers", markers.map(|v| v.to_string())),
                ],
            )?;
            let run = RunDir::create(&run_dir)?;
            run.echo_config(&c)?;
            let ck = load_checkpoint(&checkpoint)?;
            let set = ablation_cases(&c, c.ablation_cases, c.ablation_markers)?;
            let r = ablate_cues(&ck.params, &set, &c, c.ablation_markers)?;
            write_json(&run.reports().join("ablation.json"), &r)?;
            for (n, m) in r.cues.iter().zip(&r.median_dsc) {
                let flag = if r.degenerate[*n] { " (no cues: all-zero saliency)" } else { "" };
                println!("cues {n}: median DSC {m:.4}{flag}");
            }
        }
        Command::Gradcheck { precision, seed, samples } => {
            let Precision::Double = precision;
            let entries = run_gradcheck(seed, samples)?;
            println!("{}", format_table(&entries));
            let failed = entries.iter().filter(|e| !e.passed()).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
            println!("all {} gradient checks passed", entries.len());
        }
        Command::Experiment {
            manifest,
            run_dir,
            jobs,
            ablate,
            cfg,
        } => {
            let c = resolve(&cfg, &[("jobs", jobs.map(|v| v.to_string()))])?;
            let run = RunDir::create(&run_dir)?;
            run.echo_config(&c)?;
            let manifest = match manifest {
                Some(m) => m,
                None => {
                    let d = run_dir.join("data");
                    generate_dataset(&c.phantom, c.patients, c.fractions, c.seed, &d)?;
                    d.join(MANIFEST_NAME)
                }
            };
            let out = run_full_experiment(&manifest, &c, &run)?;
            print!("{}", out.report.table());
            for t in &out.timing {
                println!(
                    "{}: training {:.1} s, prediction data handling {:.3} s, computation {:.3} s over {} forward passes",
                    t.method, t.train_seconds, t.data_seconds, t.compute_seconds, t.predictions
                );
            }
            if ablate {
                let set = ablation_cases(&c, c.ablation_cases, c.ablation_markers)?;
                let r = ablate_cues(&out.best_sdl, &set, &c, c.ablation_markers)?;
                write_json(&run.reports().join("ablation.json"), &r)?;
                println!("ablation median DSC by cue count: {:?}", r.median_dsc);
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
