//! Cross-validated comparison of the saliency-guided network against a
//! CT-only network, and the cue-count ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::infer::{majority_vote, predict, Prediction};
use super::prep::{prepare, prepare_manifest, PrepConfig, PreparedCase};
use super::split::{split_dataset, FoldPlan, SplitSizes};
use super::train::{samples, train_fold, write_log_csv, TrainOutcome, TrainSettings};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{build_report, dsc, evaluate, MetricRecord, Report};
use crate::nn::{save_checkpoint, UNetParams};
use crate::phantom::{generate_phantom, patient_specs, Manifest};
use crate::volume;

pub const SDL: &str = "sdl_seg";
pub const BASELINE: &str = "unet";

/// The two compared methods with their input channel counts.
pub const METHODS: [(&str, usize); 2] = [(SDL, 2), (BASELINE, 1)];

/// Standard run directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["logs", "checkpoints", "predictions", "reports"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn echo_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.root.join("config.echo.json");
        std::fs::write(&p, cfg.to_json()).map_err(|e| Error::io(&p, e))
    }
}

pub fn split_sizes(cfg: &RunConfig) -> SplitSizes {
    SplitSizes {
        n_test: cfg.n_test,
        n_folds: cfg.n_folds,
        n_val: cfg.n_val_per_fold,
        n_train: cfg.n_train_per_fold,
    }
}

pub fn train_settings(cfg: &RunConfig, in_channels: usize, fold: usize) -> TrainSettings {
    TrainSettings {
        network: cfg.network(in_channels),
        adam: cfg.adam(),
        epochs: cfg.epochs,
        loss_classes: cfg.loss_classes,
        threshold: cfg.threshold,
        seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(fold as u64 * 7919 + in_channels as u64),
    }
}

fn select<'a>(cases: &'a [PreparedCase], patients: &[String]) -> Vec<&'a PreparedCase> {
    cases.iter().filter(|c| patients.contains(&c.patient)).collect()
}

/// Trains one fold of one method, writing its log and checkpoint.
pub fn run_fold(cfg: &RunConfig, cases: &[PreparedCase], plan: &FoldPlan, method: &str, in_channels: usize, fold: usize, run: &RunDir) -> Result<TrainOutcome> {
    let f = &plan.folds[fold];
    let train = samples(&select(cases, &f.train), in_channels)?;
    let val = samples(&select(cases, &f.val), in_channels)?;
    let settings = train_settings(cfg, in_channels, fold);
    let out = train_fold(&train, &val, &settings)?;
    write_log_csv(&out.log, &run.logs().join(format!("{method}_fold{fold}.csv")))?;
    let mut meta = BTreeMap::new();
    meta.insert("method".to_string(), serde_json::json!(method));
    meta.insert("fold".to_string(), serde_json::json!(fold));
    meta.insert("best_epoch".to_string(), serde_json::json!(out.best_epoch));
    meta.insert("best_val_dsc".to_string(), serde_json::json!(out.best_val_dsc));
    meta.insert("seed".to_string(), serde_json::json!(settings.seed));
    save_checkpoint(&run.checkpoints().join(checkpoint_name(method, fold)), &out.params, Some(&out.optimizer), &meta)?;
    Ok(out)
}

pub fn checkpoint_name(method: &str, fold: usize) -> String {
    format!("{method}_fold{fold}.ckpt")
}

/// Runs `f(0..n)` on up to `jobs` threads, results in index order.
fn parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every index ran")).collect()
}

/// Per test image: fold DSCs and the fused DSC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub method: String,
    pub case: String,
    pub fraction: String,
    pub fold_dsc: Vec<f64>,
    pub fused_dsc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub train_seconds: f64,
    pub data_seconds: f64,
    pub compute_seconds: f64,
    pub predictions: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub plan: FoldPlan,
    pub report: Report,
    pub fusion: Vec<FusionRecord>,
    pub best_epochs: BTreeMap<String, Vec<usize>>,
    pub timing: Vec<MethodTiming>,
    /// Best-validation SDL checkpoint, used for the ablation.
    pub best_sdl: UNetParams<f32>,
    pub cases: Vec<PreparedCase>,
}

/// Trains all folds for both methods, fuses their test predictions by
/// majority vote and writes logs, checkpoints, fused masks and the report
/// under `run`.
pub fn run_full_experiment(manifest_path: &Path, cfg: &RunConfig, run: &RunDir) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (manifest, root) = Manifest::load(manifest_path)?;
    let prep = PrepConfig::from_run(cfg);
    let cases = prepare_manifest(&manifest, &root, &prep)?;
    let ids: Vec<String> = manifest.patients.iter().map(|p| p.id.clone()).collect();
    let plan = split_dataset(&ids, cfg.seed, split_sizes(cfg))?;
    std::fs::write(
        run.reports().join("split.json"),
        serde_json::to_string_pretty(&plan).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(run.reports(), e))?;
    let test = select(&cases, &plan.test);

    let mut records = Vec::new();
    let mut fusion = Vec::new();
    let mut best_epochs = BTreeMap::new();
    let mut timing = Vec::new();
    let mut best_sdl: Option<(f64, UNetParams<f32>)> = None;
    for (method, in_ch) in METHODS {
        let t0 = Instant::now();
        let outcomes = parallel(plan.folds.len(), cfg.jobs, |k| {
            log::info!("training {method} fold {k}");
            run_fold(cfg, &cases, &plan, method, in_ch, k, run)
        })?;
        let train_seconds = t0.elapsed().as_secs_f64();
        best_epochs.insert(method.to_string(), outcomes.iter().map(|o| o.best_epoch).collect());
        if method == SDL {
            for o in &outcomes {
                if best_sdl.as_ref().map_or(true, |(d, _)| o.best_val_dsc > *d) {
                    best_sdl = Some((o.best_val_dsc, o.params.clone()));
                }
            }
        }
        let (mut data_s, mut comp_s) = (0.0, 0.0);
        let pred_dir = run.predictions().join(method);
        std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
        for c in &test {
            let sal = (in_ch == 2).then_some(&c.saliency);
            let preds = outcomes
                .iter()
                .map(|o| predict(&o.params, &c.ct_norm, sal, cfg.threshold))
                .collect::<Result<Vec<Prediction>>>()?;
            data_s += preds.iter().map(|p| p.data_seconds).sum::<f64>();
            comp_s += preds.iter().map(|p| p.compute_seconds).sum::<f64>();
            let masks: Vec<_> = preds.iter().map(|p| p.mask.clone()).collect();
            let probs: Vec<_> = preds.iter().map(|p| p.prob.clone()).collect();
            let fused = majority_vote(&masks, Some(&probs))?;
            let label = c.label.as_ref().expect("manifest cases carry labels");
            let fold_dsc = masks.iter().map(|m| dsc(m, label)).collect::<Result<Vec<_>>>()?;
            let m = evaluate(&fused, label)?;
            volume::write_mask(&fused, pred_dir.join(format!("{}_{}.rvol", c.patient, c.fraction_id())))?;
            fusion.push(FusionRecord {
                method: method.to_string(),
                case: c.patient.clone(),
                fraction: c.fraction_id(),
                fold_dsc,
                fused_dsc: m.dsc,
            });
            records.push(MetricRecord::new(&c.patient, &c.fraction_id(), method, m));
        }
        timing.push(MethodTiming {
            method: method.to_string(),
            train_seconds,
            data_seconds: data_s,
            compute_seconds: comp_s,
            predictions: test.len() * outcomes.len(),
        });
    }
    let report = build_report(&records)?;
    report.write(&run.reports())?;
    std::fs::write(
        run.reports().join("fusion.json"),
        serde_json::to_string_pretty(&fusion).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(run.reports(), e))?;
    std::fs::write(
        run.logs().join("timing.json"),
        serde_json::to_string_pretty(&timing).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(run.logs(), e))?;
    Ok(ExperimentOutput {
        plan,
        report,
        fusion,
        best_epochs,
        timing,
        best_sdl: best_sdl.expect("at least one fold").1,
        cases,
    })
}

/// Prepared phantom images with exactly `markers` markers, drawn from
/// patient streams that do not overlap the main dataset.
pub fn ablation_cases(cfg: &RunConfig, count: usize, markers: usize) -> Result<Vec<PreparedCase>> {
    let prep = PrepConfig::from_run(cfg);
    (0..count)
        .map(|i| {
            let patient = 100_000 + i;
            let spec = patient_specs(&cfg.phantom, cfg.seed, patient, 1, Some(markers))?.remove(0);
            let ph = generate_phantom(&spec)?;
            prepare(&format!("A{i:02}"), 0, &ph.ct, &ph.breast, Some(&ph.tbv), &prep)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCase {
    pub case: String,
    pub cue_count: usize,
    /// DSC for 0, 1, ..., max cues.
    pub dsc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cues: Vec<usize>,
    pub cases: Vec<AblationCase>,
    pub median_dsc: Vec<f64>,
    /// True for cue counts that give an all-zero saliency channel.
    pub degenerate: Vec<bool>,
}

impl AblationReport {
    /// Whether the median DSC never drops from `from` to `to` cues.
    pub fn median_non_decreasing(&self, from: usize, to: usize) -> bool {
        (from..to).all(|n| self.median_dsc[n + 1] >= self.median_dsc[n])
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// DSC of a saliency-guided model when only the `n` largest cues feed the
/// saliency channel, for `n = 0..=max_cues`.
pub fn ablate_cues(params: &UNetParams<f32>, cases: &[PreparedCase], cfg: &RunConfig, max_cues: usize) -> Result<AblationReport> {
    if params.config.in_channels != 2 {
        return Err(Error::InvalidArgument("cue ablation needs a saliency-guided model".into()));
    }
    if cases.is_empty() {
        return Err(Error::Empty("no ablation cases".into()));
    }
    let sal = cfg.saliency();
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let label = c
            .label
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("ablation case {} has no label", c.patient)))?;
        let dscs = (0..=max_cues)
            .map(|n| {
                let s = c.saliency_with_cues(&sal, n)?;
                let p = predict(params, &c.ct_norm, Some(&s), cfg.threshold)?;
                dsc(&p.mask, label)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(AblationCase {
            case: c.patient.clone(),
            cue_count: c.saliency.cue_count,
            dsc: dscs,
        });
    }
    let median_dsc = (0..=max_cues)
        .map(|n| median(&mut out.iter().map(|c| c.dsc[n]).collect::<Vec<_>>()))
        .collect();
    Ok(AblationReport {
        cues: (0..=max_cues).collect(),
        degenerate: (0..=max_cues).map(|n| n == 0).collect(),
        cases: out,
        median_dsc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_preserves_order() {
        let r = parallel(7, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(r, vec![0, 1, 4, 9, 16, 25, 36]);
        assert!(parallel(3, 2, |i| if i == 1 { Err(Error::Empty("x".into())) } else { Ok(i) }).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
