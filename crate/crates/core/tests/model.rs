mod common;

use motionseg::autodiff::{Graph, Tensor};
use motionseg::container::Container;
use motionseg::model::{
    db_block, fuse, load_checkpoint, load_checkpoint_for, save_checkpoint, ub_block, BlockStyle, CheckpointMeta,
    DbWeights, Model, ModelConfig, UbWeights, Variant,
};
use motionseg::preproc::{BevImage, BevWindow, ResidualMode};
use motionseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn window() -> BevWindow {
    common::moving_windows(3, 16, ResidualMode::Mul, "00", 10).remove(0)
}

fn meta() -> CheckpointMeta {
    CheckpointMeta { epoch: 7, class_frequencies: [0.8, 0.2] }
}

#[test]
fn desk_logits_have_input_resolution() {
    let w = window();
    for variant in Variant::ALL {
        for mode in [ResidualMode::Mul, ResidualMode::Sub, ResidualMode::None] {
            let model = Model::new(ModelConfig::desk(variant, mode), 1).unwrap();
            let logits = model.forward(&[&w, &w]).unwrap();
            assert_eq!(logits.shape(), &[2, 2, 96, 64], "{variant} {mode}");
            assert!(logits.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn paper_scale_logits_have_input_resolution() {
    let mut w = window();
    let blank = BevImage::new(480, 320);
    w.frames = [blank.clone(), blank.clone(), blank.clone()];
    w.residual = blank.clone();
    w.semantics = Some([blank.clone(), blank.clone(), blank]);
    w.occupancy = motionseg::preproc::Grid::new(480, 320);
    w.label_mask = None;
    for variant in [Variant::MultiEncoderJoint, Variant::SingleEncoder] {
        let model = Model::new(ModelConfig::paper(variant, ResidualMode::Mul), 1).unwrap();
        assert_eq!(model.forward(&[&w]).unwrap().shape(), &[1, 2, 480, 320]);
    }
}

#[test]
fn block_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f32>::new();
    let x = g.constant(random_tensor(&[1, 2, 8, 8], &mut rng));
    let w = DbWeights {
        w5: g.constant(random_tensor(&[2, 2, 5, 5], &mut rng)),
        b5: g.constant(Tensor::zeros(&[2])),
        w3: g.constant(random_tensor(&[2, 2, 3, 3], &mut rng)),
        b3: g.constant(Tensor::zeros(&[2])),
    };
    let pooled = db_block(&mut g, x, &w, BlockStyle::Parallel, true).unwrap();
    assert_eq!(g.value(pooled).shape(), &[1, 4, 4, 4]);
    let full = db_block(&mut g, x, &w, BlockStyle::Parallel, false).unwrap();
    assert_eq!(g.value(full).shape(), &[1, 4, 8, 8]);

    // Five chained upsampling blocks restore a /32 input to full size.
    let mut y = g.constant(random_tensor(&[1, 4, 3, 2], &mut rng));
    for _ in 0..5 {
        let u = UbWeights {
            up_w: g.constant(random_tensor(&[4, 4, 2, 2], &mut rng)),
            up_b: g.constant(Tensor::zeros(&[4])),
            conv_w: g.constant(random_tensor(&[4, 4, 3, 3], &mut rng)),
            conv_b: g.constant(Tensor::zeros(&[4])),
        };
        y = ub_block(&mut g, y, &u).unwrap();
    }
    assert_eq!(g.value(y).shape(), &[1, 4, 96, 64]);
}

#[test]
fn fuse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let e1t = random_tensor(&[1, 16, 4, 4], &mut rng);
    let e1 = g.constant(e1t.clone());
    let ones = g.constant(Tensor::filled(&[1, 16, 4, 4], 1.0));
    let zeros = g.constant(Tensor::zeros(&[1, 16, 4, 4]));
    let f = fuse(&mut g, e1, ones, ones).unwrap();
    assert_eq!(g.value(f).shape(), &[1, 64, 4, 4]);
    let plane = 16 * 16;
    assert_eq!(&g.value(f).data()[3 * plane..], e1t.data());
    let z = fuse(&mut g, e1, zeros, ones).unwrap();
    let d = g.value(z).data();
    assert!(d[3 * plane..].iter().all(|&v| v == 0.0));
    assert_eq!(&d[..plane], e1t.data());
    let bad = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
    assert!(matches!(fuse(&mut g, e1, bad, ones), Err(Error::Shape(_))));
}

/// Sets the input-channel slice `[b, b+c)` equal to `[a, a+c)` along `axis`.
fn copy_slice(t: &mut Tensor<f32>, axis: usize, a: usize, b: usize, c: usize) {
    let shape = t.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let d = t.data_mut();
    for o in 0..outer {
        for k in 0..c {
            let src = (o * dim + a + k) * inner;
            let dst = (o * dim + b + k) * inner;
            for i in 0..inner {
                d[dst + i] = d[src + i];
            }
        }
    }
}

/// Ties the three encoders and gives every consumer of fused features equal
/// weights on the second and third encoder blocks, so swapping the two past
/// frames only permutes identical terms.
fn tie(model: &mut Model) {
    let cfg = model.config().clone();
    let enc0: Vec<(String, Tensor<f32>)> =
        model.params().iter().filter(|(n, _)| n.starts_with("enc0.")).cloned().collect();
    for (name, t) in &enc0 {
        for e in 1..3 {
            *model.param_mut(&name.replacen("enc0", &format!("enc{e}"), 1)).unwrap() = t.clone();
        }
    }
    let e = cfg.encoder_channels;
    let d = cfg.decoder_channels;
    // (tensor, axis, offset of the fused block, encoder width)
    let mut consumers = vec![];
    if cfg.variant.has_joint() {
        consumers.push(("joint.db0.b5.w", 1, 0, e[2]));
        consumers.push(("joint.db0.b3.w", 1, 0, e[2]));
        consumers.push(("dec.ub3.up.w", 0, d[2], e[1]));
        consumers.push(("dec.ub4.up.w", 0, d[3], e[0]));
    } else {
        consumers.push(("dec.ub0.up.w", 0, 0, e[2]));
        consumers.push(("dec.ub1.up.w", 0, d[2], e[1]));
        consumers.push(("dec.ub2.up.w", 0, d[3], e[0]));
    }
    for (name, axis, off, c) in consumers {
        copy_slice(model.param_mut(name).unwrap(), axis, off + c, off + 2 * c, c);
    }
}

fn swap_past(w: &BevWindow) -> BevWindow {
    let mut s = w.clone();
    s.frames.swap(1, 2);
    s.with_residual(ResidualMode::Sub).unwrap().with_residual(ResidualMode::Mul).unwrap()
}

#[test]
fn tied_encoders_are_invariant_to_swapping_past_frames() {
    let w = window();
    let swapped = swap_past(&w);
    assert_eq!(swapped.residual, w.residual);
    for variant in [Variant::MultiEncoderJoint, Variant::MultiEncoder] {
        let mut model = Model::new(ModelConfig::desk(variant, ResidualMode::Mul), 4).unwrap();
        let untied = model.forward(&[&swapped]).unwrap();
        let reference = model.forward(&[&w]).unwrap();
        assert_eq!(untied.shape(), reference.shape());
        tie(&mut model);
        let a = model.forward(&[&w]).unwrap();
        let b = model.forward(&[&swapped]).unwrap();
        let scale = a.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let diff = a.data().iter().zip(b.data()).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff <= 1e-5 * scale.max(1.0), "{variant}: diff {diff}");
        // Without tying, the swap is visible.
        let diff_untied = reference.data().iter().zip(untied.data()).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff_untied > 1e-4, "{variant}: untied diff {diff_untied}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let w = window();
    for variant in Variant::ALL {
        let model = Model::new(ModelConfig::desk(variant, ResidualMode::Sub), 9).unwrap();
        let path = dir.path().join(format!("{variant}.ckpt"));
        save_checkpoint(&path, &model, &meta()).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back, model);
        let a = model.forward(&[&w]).unwrap();
        let b = back.forward(&[&w]).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn mismatched_or_corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::desk(Variant::MultiEncoderJoint, ResidualMode::Mul), 2).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &meta()).unwrap();

    let other = ModelConfig::desk(Variant::MultiEncoder, ResidualMode::Mul);
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::IncompatibleCheckpoint(_))));

    // Config says one variant, tensors belong to another.
    let mut c = model.to_container(&meta());
    let donor = Model::new(other, 2).unwrap();
    c.tensors = donor.params().to_vec();
    assert!(matches!(Model::from_container(&c), Err(Error::IncompatibleCheckpoint(_))));

    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join("cut.ckpt");
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[0] = b'X';
    assert!(matches!(Container::from_bytes(&flipped), Err(Error::Format(_))));
}

#[test]
fn parameter_count_depends_only_on_config() {
    for variant in Variant::ALL {
        let cfg = ModelConfig::desk(variant, ResidualMode::Mul);
        let a = Model::new(cfg.clone(), 1).unwrap();
        let b = Model::new(cfg.clone(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a, b);
        assert_eq!(a, Model::new(cfg, 1).unwrap());
        println!("{variant}: {} parameters", a.param_count());
    }
    let paper = Model::new(ModelConfig::paper(Variant::MultiEncoderJoint, ResidualMode::Mul), 0).unwrap();
    // Fits the 35 MB fp32 budget.
    assert!(paper.param_count() * 4 <= 35_000_000, "{}", paper.param_count());
}

#[test]
fn zero_input_yields_head_bias() {
    let mut w = window();
    for f in &mut w.frames {
        f.data.fill(0.0);
    }
    w.residual.data.fill(0.0);
    for variant in [Variant::MultiEncoderJoint, Variant::SingleEncoder] {
        let mut model = Model::new(ModelConfig::desk(variant, ResidualMode::Mul), 5).unwrap();
        model.param_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.25, -0.75]);
        let logits = model.forward(&[&w]).unwrap();
        let plane = 96 * 64;
        assert!(logits.data()[..plane].iter().all(|&v| v == 0.25));
        assert!(logits.data()[plane..].iter().all(|&v| v == -0.75));
    }
}

#[test]
fn semantics_variant_requires_semantic_images() {
    let mut w = window();
    w.semantics = None;
    let model = Model::new(ModelConfig::desk(Variant::SingleEncoderSemantics, ResidualMode::Mul), 0).unwrap();
    assert!(matches!(model.forward(&[&w]), Err(Error::Shape(_))));
}

#[test]
fn wrong_grid_is_a_shape_error() {
    let mut cfg = ModelConfig::desk(Variant::MultiEncoderJoint, ResidualMode::Mul);
    cfg.rows = 64;
    let model = Model::new(cfg, 0).unwrap();
    assert!(matches!(model.forward(&[&window()]), Err(Error::Shape(_))));
}
