//! Moving-class confusion counting, IoU and the latency harness.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{logits_to_masks, Model};
use crate::preproc::{BevWindow, Grid, MOVING};

/// Global pixel counts with "moving" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Adds the occupied cells of one window.
    pub fn accumulate(&mut self, pred: &Grid<u8>, label: &Grid<u8>, occupancy: &Grid<bool>) -> Result<()> {
        if !pred.same_shape(label) || !pred.same_shape(occupancy) {
            return Err(Error::Shape(format!(
                "prediction {}x{}, label {}x{}, occupancy {}x{}",
                pred.rows, pred.cols, label.rows, label.cols, occupancy.rows, occupancy.cols
            )));
        }
        for ((&p, &l), &o) in pred.data.iter().zip(&label.data).zip(&occupancy.data) {
            if !o {
                continue;
            }
            match (p == MOVING, l == MOVING) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp + fn)`; `None` when nothing moving was labeled or
    /// predicted.
    pub fn iou_moving(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `{:.6}` or `n/a`.
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

/// Runs `forward` over `windows` in batches and accumulates counts.
pub fn evaluate_with(
    windows: &[BevWindow],
    batch_size: usize,
    mut forward: impl FnMut(&[&BevWindow]) -> Result<crate::autodiff::Tensor<f32>>,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&BevWindow> = chunk.iter().collect();
        let masks = logits_to_masks(&forward(&refs)?)?;
        for (w, pred) in chunk.iter().zip(&masks) {
            let label = w.label_mask.as_ref().ok_or(Error::MissingLabels)?;
            counts.accumulate(pred, label, &w.occupancy)?;
        }
    }
    Ok(counts)
}

pub fn evaluate(model: &Model, windows: &[BevWindow], batch_size: usize) -> Result<ConfusionCounts> {
    evaluate_with(windows, batch_size, |b| model.forward(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub residual_mode: String,
    pub precision: String,
    pub counts: ConfusionCounts,
}

pub const EVAL_CSV_HEADER: &str = "variant,residual_mode,precision,iou_moving,tp,fp,fn,tn";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for r in rows {
        let c = &r.counts;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.residual_mode,
            r.precision,
            fmt_metric(c.iou_moving()),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        );
    }
    s
}

pub const MIN_TIMED_ITERS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub precision: String,
    pub warmup: usize,
    pub times_ms: Vec<f64>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl LatencyReport {
    pub fn mean_ms(&self) -> f64 {
        self.times_ms.iter().sum::<f64>() / self.times_ms.len() as f64
    }

    fn sorted(&self) -> Vec<f64> {
        let mut s = self.times_ms.clone();
        s.sort_by(f64::total_cmp);
        s
    }

    pub fn p50_ms(&self) -> f64 {
        nearest_rank(&self.sorted(), 50.0)
    }

    pub fn p99_ms(&self) -> f64 {
        nearest_rank(&self.sorted(), 99.0)
    }

    /// One row per timed iteration, then a `summary` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,latency_ms,mean_ms,p50_ms,p99_ms,precision\n");
        for (i, t) in self.times_ms.iter().enumerate() {
            let _ = writeln!(s, "{i},{t:.6},,,,{}", self.precision);
        }
        let _ = writeln!(
            s,
            "summary,,{:.6},{:.6},{:.6},{}",
            self.mean_ms(),
            self.p50_ms(),
            self.p99_ms(),
            self.precision
        );
        s
    }
}

/// Times `run` after `warmup` untimed calls.
pub fn benchmark_fn(
    precision: &str,
    warmup: usize,
    iters: usize,
    mut run: impl FnMut() -> Result<()>,
) -> Result<LatencyReport> {
    if iters < MIN_TIMED_ITERS {
        return Err(Error::InvalidConfig(format!("need at least {MIN_TIMED_ITERS} timed iterations, got {iters}")));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut times_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        run()?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport {
        precision: precision.to_string(),
        warmup,
        times_ms,
    })
}

/// Forward-pass latency on one in-memory window.
pub fn benchmark(model: &Model, window: &BevWindow, warmup: usize, iters: usize) -> Result<LatencyReport> {
    benchmark_fn("fp32", warmup, iters, || model.forward(&[window]).map(|_| ()))
}
