//! The multi-encoder segmentation network, its ablation variants and
//! checkpoint I/O.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{BlockStyle, ModelConfig, Variant};

use crate::autodiff::{Graph, Tensor, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::preproc::{residual, BevWindow, Grid, MOVING, STATIC};

/// Receives every downsampling/upsampling block output during a forward
/// pass and may rewrite it in place (used for activation calibration and
/// simulated quantization).
pub trait ActivationObserver {
    fn observe(&mut self, block: &str, values: &mut [f32]);
}

pub struct DbWeights {
    pub w5: Var,
    pub b5: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Downsampling block: 5×5 and 3×3 convolution branches with ReLU, joined
/// along channels, then an optional 2×2 max-pool.
pub fn db_block(g: &mut Graph<f32>, x: Var, w: &DbWeights, style: BlockStyle, pool: bool) -> Result<Var> {
    let a = g.conv2d(x, w.w5, w.b5, 2)?;
    let a = g.relu(a)?;
    let b_in = match style {
        BlockStyle::Parallel => x,
        BlockStyle::Sequential => a,
    };
    let b = g.conv2d(b_in, w.w3, w.b3, 1)?;
    let b = g.relu(b)?;
    let y = g.concat_channels(&[a, b])?;
    if pool {
        g.maxpool2(y)
    } else {
        Ok(y)
    }
}

pub struct UbWeights {
    pub up_w: Var,
    pub up_b: Var,
    pub conv_w: Var,
    pub conv_b: Var,
}

/// Upsampling block: stride-2 transposed convolution and a 3×3 convolution,
/// each followed by ReLU.
pub fn ub_block(g: &mut Graph<f32>, x: Var, w: &UbWeights) -> Result<Var> {
    let up = g.conv_transpose2d(x, w.up_w, w.up_b)?;
    let up = g.relu(up)?;
    let y = g.conv2d(up, w.conv_w, w.conv_b, 1)?;
    g.relu(y)
}

/// `concat(e1, e2, e3, e1⊙e2⊙e3)`.
pub fn fuse(g: &mut Graph<f32>, e1: Var, e2: Var, e3: Var) -> Result<Var> {
    let p = g.mul(e2, e3)?;
    let p = g.mul(e1, p)?;
    g.concat_channels(&[e1, e2, e3, p])
}

struct UpStep {
    cin: usize,
    cout: usize,
    /// Encoder stage whose features are appended after this block.
    skip: Option<usize>,
}

struct Plan {
    enc_in: [usize; 3],
    joint_in: Option<[usize; 4]>,
    ups: Vec<UpStep>,
    head_in: usize,
}

impl Plan {
    fn new(cfg: &ModelConfig) -> Plan {
        let e = cfg.encoder_channels;
        let mult = if cfg.variant.is_multi() { 4 } else { 1 };
        let stage = e.map(|c| c * mult);
        let enc_in = [cfg.encoder_input_channels(), e[0], e[1]];
        let d = cfg.decoder_channels;
        let mut ups = Vec::new();
        let joint_in = if cfg.variant.has_joint() {
            let j = cfg.joint_channels;
            ups.push(UpStep { cin: j[3], cout: d[0], skip: None });
            ups.push(UpStep { cin: d[0], cout: d[1], skip: None });
            ups.push(UpStep { cin: d[1], cout: d[2], skip: Some(1) });
            Some([stage[2], j[0], j[1], j[2]])
        } else {
            ups.push(UpStep { cin: stage[2], cout: d[2], skip: Some(1) });
            None
        };
        ups.push(UpStep { cin: d[2] + stage[1], cout: d[3], skip: Some(0) });
        ups.push(UpStep { cin: d[3] + stage[0], cout: d[4], skip: None });
        Plan { enc_in, joint_in, ups, head_in: d[4] }
    }
}

/// Parameter name, shape and fan-in, in initialization order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let plan = Plan::new(cfg);
    let mut out = Vec::new();
    let mut db = |prefix: &str, cin: usize, cout: usize| {
        let half = cout / 2;
        let cin3 = match cfg.block_style {
            BlockStyle::Parallel => cin,
            BlockStyle::Sequential => half,
        };
        out.push((format!("{prefix}.b5.w"), vec![half, cin, 5, 5], cin * 25));
        out.push((format!("{prefix}.b5.b"), vec![half], 0));
        out.push((format!("{prefix}.b3.w"), vec![half, cin3, 3, 3], cin3 * 9));
        out.push((format!("{prefix}.b3.b"), vec![half], 0));
    };
    for e in 0..cfg.encoders() {
        for j in 0..3 {
            db(&format!("enc{e}.db{j}"), plan.enc_in[j], cfg.encoder_channels[j]);
        }
    }
    if let Some(jin) = plan.joint_in {
        for j in 0..4 {
            db(&format!("joint.db{j}"), jin[j], cfg.joint_channels[j]);
        }
    }
    for (i, u) in plan.ups.iter().enumerate() {
        out.push((format!("dec.ub{i}.up.w"), vec![u.cin, u.cout, 2, 2], u.cin));
        out.push((format!("dec.ub{i}.up.b"), vec![u.cout], 0));
        out.push((format!("dec.ub{i}.conv.w"), vec![u.cout, u.cout, 3, 3], u.cout * 9));
        out.push((format!("dec.ub{i}.conv.b"), vec![u.cout], 0));
    }
    out.push(("head.w".into(), vec![2, plan.head_in, 1, 1], plan.head_in));
    out.push(("head.b".into(), vec![2], 0));
    out
}

/// Stacks the per-encoder input channels of a batch of windows.
pub fn encoder_inputs(cfg: &ModelConfig, windows: &[&BevWindow]) -> Result<Vec<Tensor<f32>>> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let plane = cfg.rows * cfg.cols;
    let cin = cfg.encoder_input_channels();
    let mut bufs = vec![Vec::with_capacity(windows.len() * cin * plane); cfg.encoders()];
    for w in windows {
        if w.rows() != cfg.rows || w.cols() != cfg.cols {
            return Err(Error::Shape(format!(
                "window {} is {}x{}, model expects {}x{}",
                w.id(),
                w.rows(),
                w.cols(),
                cfg.rows,
                cfg.cols
            )));
        }
        let recomputed;
        let res = if w.residual_mode == cfg.residual_mode {
            &w.residual
        } else {
            recomputed = residual(cfg.residual_mode, &w.frames)?;
            &recomputed
        };
        if cfg.variant.is_multi() {
            for (i, buf) in bufs.iter_mut().enumerate() {
                buf.extend_from_slice(&w.frames[i].data);
                buf.extend_from_slice(&res.data);
            }
        } else {
            let buf = &mut bufs[0];
            for f in &w.frames {
                buf.extend_from_slice(&f.data);
            }
            buf.extend_from_slice(&res.data);
            if cfg.variant.uses_semantics() {
                let sem = w.semantics.as_ref().ok_or_else(|| {
                    Error::Shape(format!("window {} has no semantic images", w.id()))
                })?;
                for s in sem {
                    buf.extend_from_slice(&s.data);
                }
            }
        }
    }
    bufs.into_iter()
        .map(|b| Tensor::from_vec(&[windows.len(), cin, cfg.rows, cfg.cols], b))
        .collect()
}

/// Graph handles of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves, aligned with [`Model::params`].
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Training-set frequencies of the static and moving classes.
    pub class_frequencies: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<(String, Tensor<f32>)>,
}

impl Model {
    /// He-uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::from_vec(&shape, data).expect("layout shape")
                };
                (name, t)
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the network on `g`. Parameters become leaves that require
    /// gradients iff `trainable`.
    pub fn build(
        &self,
        g: &mut Graph<f32>,
        inputs: Vec<Tensor<f32>>,
        trainable: bool,
        mut observer: Option<&mut dyn ActivationObserver>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if inputs.len() != cfg.encoders() {
            return Err(Error::Shape(format!("{} encoder inputs for {} encoders", inputs.len(), cfg.encoders())));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        let by_name: HashMap<&str, Var> = self.params.iter().map(|(n, _)| n.as_str()).zip(params.iter().copied()).collect();
        let p = |name: String| -> Result<Var> {
            by_name
                .get(name.as_str())
                .copied()
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
        };
        let dbw = |prefix: &str| -> Result<DbWeights> {
            Ok(DbWeights {
                w5: p(format!("{prefix}.b5.w"))?,
                b5: p(format!("{prefix}.b5.b"))?,
                w3: p(format!("{prefix}.b3.w"))?,
                b3: p(format!("{prefix}.b3.b"))?,
            })
        };
        let mut observe = |g: &mut Graph<f32>, name: &str, v: Var| {
            if let Some(o) = observer.as_deref_mut() {
                o.observe(name, g.value_mut(v).data_mut());
            }
        };

        let plan = Plan::new(cfg);
        let mut stages: Vec<[Var; 3]> = Vec::new();
        for (e, input) in inputs.into_iter().enumerate() {
            let mut x = g.constant(input);
            let mut s = [x; 3];
            for (j, slot) in s.iter_mut().enumerate() {
                let name = format!("enc{e}.db{j}");
                x = db_block(g, x, &dbw(&name)?, cfg.block_style, true)?;
                observe(g, &name, x);
                *slot = x;
            }
            stages.push(s);
        }
        let fused: [Var; 3] = if cfg.variant.is_multi() {
            let mut f = [stages[0][0]; 3];
            for (j, slot) in f.iter_mut().enumerate() {
                *slot = fuse(g, stages[0][j], stages[1][j], stages[2][j])?;
            }
            f
        } else {
            stages[0]
        };

        let mut x = fused[2];
        if plan.joint_in.is_some() {
            for j in 0..4 {
                let name = format!("joint.db{j}");
                x = db_block(g, x, &dbw(&name)?, cfg.block_style, j < 2)?;
                observe(g, &name, x);
            }
        }
        for (i, step) in plan.ups.iter().enumerate() {
            let name = format!("dec.ub{i}");
            let w = UbWeights {
                up_w: p(format!("{name}.up.w"))?,
                up_b: p(format!("{name}.up.b"))?,
                conv_w: p(format!("{name}.conv.w"))?,
                conv_b: p(format!("{name}.conv.b"))?,
            };
            x = ub_block(g, x, &w)?;
            observe(g, &name, x);
            if let Some(s) = step.skip {
                x = g.concat_channels(&[x, fused[s]])?;
            }
        }
        let logits = g.conv2d(x, p("head.w".into())?, p("head.b".into())?, 0)?;
        Ok(ForwardPass { logits, params })
    }

    /// Logits `[N, 2, rows, cols]` for a batch of windows.
    pub fn forward(&self, windows: &[&BevWindow]) -> Result<Tensor<f32>> {
        self.forward_observed(windows, None)
    }

    pub fn forward_observed(
        &self,
        windows: &[&BevWindow],
        observer: Option<&mut dyn ActivationObserver>,
    ) -> Result<Tensor<f32>> {
        let inputs = encoder_inputs(&self.config, windows)?;
        let mut g = Graph::new();
        let pass = self.build(&mut g, inputs, false, observer)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Per-cell class decision for one window.
    pub fn predict(&self, window: &BevWindow) -> Result<Grid<u8>> {
        let logits = self.forward(&[window])?;
        Ok(logits_to_masks(&logits)?.remove(0))
    }

    pub fn to_container(&self, meta: &CheckpointMeta) -> Container {
        let mut c = Container::default();
        c.header = self.config.to_pairs();
        c.push("epoch", meta.epoch);
        c.push("f_static", meta.class_frequencies[0]);
        c.push("f_moving", meta.class_frequencies[1]);
        c.tensors = self.params.clone();
        c
    }

    /// Rebuilds a model from a container, checking every parameter against
    /// the architecture its config describes.
    pub fn from_container(c: &Container) -> Result<(Model, CheckpointMeta)> {
        let config = ModelConfig::from_pairs(&c.header_map())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let meta = CheckpointMeta {
            epoch: c.parse("epoch")?,
            class_frequencies: [c.parse("f_static")?, c.parse("f_moving")?],
        };
        let layout = param_layout(&config);
        if layout.len() != c.tensors.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} tensors stored, architecture has {}",
                c.tensors.len(),
                layout.len()
            )));
        }
        let stored: BTreeMap<&str, &Tensor<f32>> = c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, _) in layout {
            let t = stored
                .get(name.as_str())
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.push((name, (*t).clone()));
        }
        Ok((Model { config, params }, meta))
    }
}

/// Moving wherever the moving logit is strictly larger.
pub fn logits_to_masks(logits: &Tensor<f32>) -> Result<Vec<Grid<u8>>> {
    let [n, c, h, w] = logits.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 logit channels, got {c}")));
    }
    let plane = h * w;
    let d = logits.data();
    (0..n)
        .map(|s| {
            let st = &d[(2 * s) * plane..(2 * s + 1) * plane];
            let mv = &d[(2 * s + 1) * plane..(2 * s + 2) * plane];
            let data = st.iter().zip(mv).map(|(a, b)| if b > a { MOVING } else { STATIC }).collect();
            Grid::from_vec(h, w, data)
        })
        .collect()
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    model.to_container(meta).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    Model::from_container(&Container::load(path)?)
}

/// Loads a checkpoint and insists that it was trained with `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint is {} / {} at {}x{}, requested {} / {} at {}x{}",
            model.config.variant,
            model.config.residual_mode,
            model.config.rows,
            model.config.cols,
            expected.variant,
            expected.residual_mode,
            expected.rows,
            expected.cols
        )));
    }
    Ok((model, meta))
}
