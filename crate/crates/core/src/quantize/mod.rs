//! Simulated reduced-precision inference: weights and block outputs pass
//! through a quantize-dequantize round trip while arithmetic stays f32.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use half::f16;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ActivationObserver, CheckpointMeta, Model};
use crate::preproc::BevWindow;

pub const INT8_MAX: f64 = 127.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Fp32, Precision::Fp16, Precision::Int8];

    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
        }
    }

    pub fn bytes_per_value(&self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
            Precision::Int8 => 1,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown precision {s:?}")))
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn fp16_round(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

pub fn max_abs(values: &[f32]) -> f64 {
    values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

/// Symmetric per-tensor scale `maxabs / 127`; 1 for an all-zero tensor.
pub fn int8_scale(maxabs: f64) -> f64 {
    if maxabs > 0.0 {
        maxabs / INT8_MAX
    } else {
        1.0
    }
}

/// `round_half_even(v / scale)` clamped to ±127.
pub fn int8_quantize(v: f32, scale: f64) -> i8 {
    (v as f64 / scale).round_ties_even().clamp(-INT8_MAX, INT8_MAX) as i8
}

pub fn int8_dequantize(q: i8, scale: f64) -> f32 {
    (q as f64 * scale) as f32
}

/// Quantize-dequantize with the tensor's own max-abs scale.
pub fn fake_quantize(values: &mut [f32], precision: Precision) {
    match precision {
        Precision::Fp32 => {}
        Precision::Fp16 => values.iter_mut().for_each(|v| *v = fp16_round(*v)),
        Precision::Int8 => {
            let scale = int8_scale(max_abs(values));
            fake_quantize_int8(values, scale);
        }
    }
}

pub fn fake_quantize_int8(values: &mut [f32], scale: f64) {
    for v in values {
        *v = int8_dequantize(int8_quantize(*v, scale), scale);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeReport {
    pub precision: Precision,
    pub parameters: usize,
    pub bytes: usize,
}

impl SizeReport {
    pub fn megabytes(&self) -> f64 {
        self.bytes as f64 / 1e6
    }
}

/// Serialized checkpoint size at `precision`: container framing plus the
/// parameter payload, plus one f32 scale per tensor for int8.
pub fn size_report(model: &Model, precision: Precision) -> SizeReport {
    let container = model.to_container(&CheckpointMeta::default());
    let parameters = model.param_count();
    let scales = if precision == Precision::Int8 { 4 * model.params().len() } else { 0 };
    SizeReport {
        precision,
        parameters,
        bytes: container.overhead_bytes() + parameters * precision.bytes_per_value() + scales,
    }
}

/// A copy of `model` whose weights went through the precision's round trip.
pub fn quantize_weights(model: &Model, precision: Precision) -> (Model, SizeReport) {
    let mut q = model.clone();
    for (_, t) in q.params_mut() {
        fake_quantize(t.data_mut(), precision);
    }
    (q, size_report(model, precision))
}

/// Records the largest |activation| seen at each block output.
#[derive(Default)]
struct MaxAbsRecorder {
    max: BTreeMap<String, f64>,
}

impl ActivationObserver for MaxAbsRecorder {
    fn observe(&mut self, block: &str, values: &mut [f32]) {
        let m = max_abs(values);
        let e = self.max.entry(block.to_string()).or_insert(0.0);
        *e = e.max(m);
    }
}

/// Per-block activation scales (max-abs over the first `k` windows / 127).
pub fn calibrate_activations(model: &Model, windows: &[BevWindow], k: usize) -> Result<BTreeMap<String, f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("calibration needs at least one window".into()));
    }
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rec = MaxAbsRecorder::default();
    for w in windows.iter().take(k) {
        model.forward_observed(&[w], Some(&mut rec))?;
    }
    Ok(rec.max.into_iter().map(|(name, m)| (name, int8_scale(m))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantScheme {
    pub precision: Precision,
    /// Required for int8.
    pub activation_scales: Option<BTreeMap<String, f64>>,
}

impl QuantScheme {
    pub fn fp32() -> Self {
        QuantScheme { precision: Precision::Fp32, activation_scales: None }
    }

    pub fn fp16() -> Self {
        QuantScheme { precision: Precision::Fp16, activation_scales: None }
    }

    pub fn int8(scales: BTreeMap<String, f64>) -> Self {
        QuantScheme { precision: Precision::Int8, activation_scales: Some(scales) }
    }
}

struct ActivationQuantizer<'a> {
    scheme: &'a QuantScheme,
    missing: Option<String>,
}

impl ActivationObserver for ActivationQuantizer<'_> {
    fn observe(&mut self, block: &str, values: &mut [f32]) {
        match self.scheme.precision {
            Precision::Fp32 => {}
            Precision::Fp16 => fake_quantize(values, Precision::Fp16),
            Precision::Int8 => match self.scheme.activation_scales.as_ref().and_then(|s| s.get(block)) {
                Some(&scale) => fake_quantize_int8(values, scale),
                None => {
                    self.missing.get_or_insert_with(|| block.to_string());
                }
            },
        }
    }
}

/// A model prepared for simulated inference at one precision.
pub struct QuantizedModel {
    model: Model,
    scheme: QuantScheme,
}

impl QuantizedModel {
    pub fn new(model: &Model, scheme: QuantScheme) -> Result<Self> {
        if scheme.precision == Precision::Int8 && scheme.activation_scales.is_none() {
            return Err(Error::MissingCalibration);
        }
        let (model, _) = quantize_weights(model, scheme.precision);
        Ok(QuantizedModel { model, scheme })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn forward(&self, windows: &[&BevWindow]) -> Result<Tensor<f32>> {
        if self.scheme.precision == Precision::Fp32 {
            return self.model.forward(windows);
        }
        let mut q = ActivationQuantizer { scheme: &self.scheme, missing: None };
        let out = self.model.forward_observed(windows, Some(&mut q))?;
        if let Some(block) = q.missing {
            log::error!("no activation scale for block {block}");
            return Err(Error::MissingCalibration);
        }
        Ok(out)
    }
}

pub fn quantized_forward(model: &Model, windows: &[&BevWindow], scheme: &QuantScheme) -> Result<Tensor<f32>> {
    QuantizedModel::new(model, scheme.clone())?.forward(windows)
}
