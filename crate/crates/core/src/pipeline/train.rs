//! Single-fold training loop with best-validation model selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::infer::{network_input, target_tensor};
use super::prep::PreparedCase;
use crate::error::{Error, Result};
use crate::metrics::dsc;
use crate::nn::{hybrid_loss, init_params, update_bn_running_stats, Adam, AdamConfig, Dropout, LossClasses, Tensor5, UNet, UNetConfig, UNetParams};
use crate::phantom::stream;
use crate::volume::Mask3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub network: UNetConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub loss_classes: LossClasses,
    pub threshold: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: UNetParams<f32>,
    pub optimizer: Adam,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub log: Vec<EpochLog>,
}

pub struct Sample {
    pub input: Tensor5<f32>,
    pub label: Mask3,
}

/// Network inputs and labels for a set of prepared cases.
pub fn samples(cases: &[&PreparedCase], in_channels: usize) -> Result<Vec<Sample>> {
    cases
        .iter()
        .map(|c| {
            let sal = (in_channels == 2).then_some(&c.saliency);
            let label = c
                .label
                .clone()
                .ok_or_else(|| Error::InvalidArgument(format!("case {} F{} has no label", c.patient, c.fraction)))?;
            Ok(Sample {
                input: network_input(in_channels, &c.ct_norm, sal)?,
                label,
            })
        })
        .collect()
}

/// Index of the best validation DSC; ties go to the earliest epoch.
pub fn select_best(log: &[EpochLog]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in log.iter().enumerate() {
        if best.map_or(true, |b| e.val_dsc > log[b].val_dsc) {
            best = Some(i);
        }
    }
    best
}

fn mask_of(out: &Tensor5<f32>, like: &Mask3, threshold: f32) -> Result<Mask3> {
    Mask3::new(*like.geometry(), out.data().iter().map(|&p| (p >= threshold) as u8).collect())
}

/// Mean DSC of thresholded eval-mode predictions.
pub fn mean_dsc(params: &UNetParams<f32>, set: &[Sample], threshold: f32) -> Result<f64> {
    let net = UNet::new(params);
    let mut total = 0.0;
    for s in set {
        let out = net.forward_eval(&s.input)?;
        total += dsc(&mask_of(&out, &s.label, threshold)?, &s.label)?;
    }
    Ok(total / set.len() as f64)
}

/// Trains for `settings.epochs` epochs with batch size 1 and returns the
/// parameters of the epoch with the best mean validation DSC.
pub fn train_fold(train: &[Sample], val: &[Sample], settings: &TrainSettings) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("fold needs training and validation images".into()));
    }
    if settings.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be positive".into()));
    }
    let mut params = init_params::<f32>(&settings.network, settings.seed)?;
    let mut opt = Adam::new(settings.adam, &params);
    let mut rng = stream(settings.seed, usize::MAX >> 16, None);
    let targets = train.iter().map(|s| target_tensor(&s.label)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(settings.epochs);
    let mut best: Option<(UNetParams<f32>, Adam)> = None;
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let net = UNet::new(&params);
            let (out, tape) = net.forward_train(&train[i].input, Dropout::Sample(&mut rng))?;
            let (loss, grad) = hybrid_loss(&out, &targets[i], settings.loss_classes)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss {loss} at epoch {epoch}, step {step}")));
            }
            let grads = net.backward(&tape, &grad, false)?;
            opt.update(&mut params, &grads)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
            update_bn_running_stats(&mut params, &tape);
            total += loss;
        }
        if !params.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }
        let val_dsc = mean_dsc(&params, val, settings.threshold)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_dsc,
        };
        log::info!("epoch {epoch}: loss {:.6} val dsc {:.4}", entry.train_loss, val_dsc);
        log.push(entry);
        if select_best(&log) == Some(log.len() - 1) {
            best = Some((params.clone(), opt.clone()));
        }
    }
    let b = select_best(&log).expect("at least one epoch");
    let (params, optimizer) = best.expect("best epoch recorded");
    Ok(TrainOutcome {
        params,
        optimizer,
        best_epoch: log[b].epoch,
        best_val_dsc: log[b].val_dsc,
        log,
    })
}

/// Training log as CSV (`epoch,train_loss,val_dsc`).
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_dsc\n");
    for e in log {
        text.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_dsc));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
