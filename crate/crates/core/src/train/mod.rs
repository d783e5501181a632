//! Class weighting, dataset splitting and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, fmt_metric, ConfusionCounts};
use crate::model::{encoder_inputs, CheckpointMeta, Model, ModelConfig};
use crate::preproc::{BevWindow, MOVING};

pub const DEFAULT_EPSILON: f64 = 1.02;
pub const DEFAULT_HOLDOUT: &str = "08";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    /// Offset inside the log of the class-weight formula.
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            epochs: 30,
            lr: 1e-3,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            shuffle: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.epsilon > 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon must exceed 1, got {}", self.epsilon)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        self.model.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStats {
    pub f_static: f64,
    pub f_moving: f64,
    pub w_static: f64,
    pub w_moving: f64,
}

impl ClassStats {
    /// `w_c = 1 / ln(f_c + ε)`.
    pub fn from_frequencies(f_static: f64, f_moving: f64, epsilon: f64) -> ClassStats {
        ClassStats {
            f_static,
            f_moving,
            w_static: class_weight(f_static, epsilon),
            w_moving: class_weight(f_moving, epsilon),
        }
    }

    pub fn weights(&self) -> [f32; 2] {
        [self.w_static as f32, self.w_moving as f32]
    }
}

pub fn class_weight(freq: f64, epsilon: f64) -> f64 {
    1.0 / (freq + epsilon).ln()
}

/// Class frequencies over the occupied cells of all labeled windows.
pub fn class_frequencies(windows: &[BevWindow], epsilon: f64) -> Result<ClassStats> {
    let (mut moving, mut total) = (0u64, 0u64);
    for w in windows {
        let label = w.label_mask.as_ref().ok_or(Error::MissingLabels)?;
        for (&l, &o) in label.data.iter().zip(&w.occupancy.data) {
            if o {
                total += 1;
                moving += u64::from(l == MOVING);
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let f_moving = moving as f64 / total as f64;
    let f_static = (total - moving) as f64 / total as f64;
    Ok(ClassStats::from_frequencies(f_static, f_moving, epsilon))
}

/// Splits sequence ids into (train, validation) by holding out one id.
pub fn split_sequences(ids: &[String], holdout: &str) -> Result<(Vec<String>, Vec<String>)> {
    if !ids.iter().any(|s| s == holdout) {
        return Err(Error::MissingSequence(holdout.to_string()));
    }
    let (val, train): (Vec<String>, Vec<String>) = ids.iter().cloned().partition(|s| s == holdout);
    Ok((train, val))
}

/// Splits windows by sequence id; see [`split_sequences`].
pub fn split_dataset(windows: Vec<BevWindow>, holdout: &str) -> Result<(Vec<BevWindow>, Vec<BevWindow>)> {
    if !windows.iter().any(|w| w.sequence_id == holdout) {
        return Err(Error::MissingSequence(holdout.to_string()));
    }
    Ok(windows.into_iter().partition(|w| w.sequence_id != holdout))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: ConfusionCounts,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,val_iou_moving,val_precision,val_recall";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for m in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{}",
            m.epoch,
            m.train_loss,
            fmt_metric(m.val.iou_moving()),
            fmt_metric(m.val.precision()),
            fmt_metric(m.val.recall())
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest validation IoU (the last
    /// epoch when IoU is never defined).
    pub best: Model,
    pub best_meta: CheckpointMeta,
    pub last: Model,
    pub last_meta: CheckpointMeta,
    pub metrics: Vec<EpochMetrics>,
    pub stats: ClassStats,
}

pub fn train(train_set: &[BevWindow], val_set: &[BevWindow], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train_set, val_set, cfg, |_| {})
}

/// Trains from a fresh initialization seeded by `cfg.seed`; `on_epoch` sees
/// each epoch's metrics as soon as they are known.
pub fn train_with(
    train_set: &[BevWindow],
    val_set: &[BevWindow],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    train_from(model, train_set, val_set, cfg, on_epoch)
}

pub fn train_from(
    mut model: Model,
    train_set: &[BevWindow],
    val_set: &[BevWindow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = class_frequencies(train_set, cfg.epsilon)?;
    let weights = stats.weights();
    log::info!(
        "class frequencies static={:.4} moving={:.4}, weights {:.3}/{:.3}",
        stats.f_static,
        stats.f_moving,
        stats.w_static,
        stats.w_moving
    );
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<AdamState> = model.params().iter().map(|(_, t)| AdamState::new(t.numel())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let freq = [stats.f_static, stats.f_moving];
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model, CheckpointMeta)> = None;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&BevWindow> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut target = Vec::new();
            let mut valid = Vec::new();
            for w in &batch {
                target.extend_from_slice(&w.label_mask.as_ref().ok_or(Error::MissingLabels)?.data);
                valid.extend_from_slice(&w.occupancy.data);
            }
            if !valid.iter().any(|&v| v) {
                log::warn!("epoch {epoch} batch {b}: no occupied cells, skipped");
                continue;
            }
            let mut g = Graph::new();
            let pass = model.build(&mut g, encoder_inputs(model.config(), &batch)?, true, None)?;
            let loss = g.weighted_ce(pass.logits, &target, &weights, &valid)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss: value });
            }
            g.backward(loss)?;
            for (((_, p), &v), st) in model.params_mut().iter_mut().zip(&pass.params).zip(&mut states) {
                if let Some(grad) = g.grad(v) {
                    adam_step(p.data_mut(), grad, st, &adam);
                }
            }
            loss_sum += value;
            batches += 1;
        }
        let val = if val_set.is_empty() {
            ConfusionCounts::default()
        } else {
            evaluate(&model, val_set, cfg.batch_size)?
        };
        let m = EpochMetrics {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val iou {}",
            m.train_loss,
            fmt_metric(m.val.iou_moving())
        );
        on_epoch(&m);
        let meta = CheckpointMeta {
            epoch,
            class_frequencies: freq,
        };
        if let Some(iou) = m.val.iou_moving() {
            if best.as_ref().is_none_or(|(b, _, _)| iou > *b) {
                best = Some((iou, model.clone(), meta));
            }
        }
        metrics.push(m);
    }
    let last_meta = CheckpointMeta {
        epoch: cfg.epochs.saturating_sub(1),
        class_frequencies: freq,
    };
    let (best, best_meta) = match best {
        Some((_, m, meta)) => (m, meta),
        None => (model.clone(), last_meta.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_meta,
        last: model,
        last_meta,
        metrics,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        let s = ClassStats::from_frequencies(0.95, 0.05, 1.02);
        assert!((s.w_static - 1.0 / 1.97f64.ln()).abs() < 1e-12);
        assert!((s.w_static - 1.475).abs() < 1e-3);
        assert!((s.w_moving - 14.78).abs() < 0.01);
        let s = ClassStats::from_frequencies(0.5, 0.5, 1.02);
        assert_eq!(s.w_static, s.w_moving);
        assert!((s.w_static - 1.0 / 1.52f64.ln()).abs() < 1e-12);
        assert!((s.w_static - 2.387).abs() < 5e-3);
        assert!((class_weight(0.0, 1.02) - 50.5).abs() < 0.01);
    }

    #[test]
    fn split_by_sequence() {
        let ids: Vec<String> = (0..11).map(|i| format!("{i:02}")).collect();
        let (train, val) = split_sequences(&ids, "08").unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(val, vec!["08".to_string()]);
        let two = vec!["00".to_string(), "01".to_string()];
        let (t, v) = split_sequences(&two, "01").unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(matches!(split_sequences(&ids, "99"), Err(Error::MissingSequence(_))));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epsilon: 1.0, ..Default::default() }.validate().is_err());
    }
}
