mod common;

use motionseg::evaluate::evaluate;
use motionseg::model::{ModelConfig, Variant};
use motionseg::preproc::{BevWindow, ResidualMode};
use motionseg::train::{class_frequencies, class_weight, metrics_csv, split_dataset, train, TrainConfig};
use motionseg::Error;
use proptest::prelude::*;

fn few_windows(n: usize) -> Vec<BevWindow> {
    common::moving_windows(31, 30, ResidualMode::Mul, "00", 40).into_iter().step_by(3).take(n).collect()
}

fn config(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        epochs,
        seed: 7,
        model: ModelConfig::desk(Variant::MultiEncoderJoint, ResidualMode::Mul),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let windows = few_windows(3);
    let cfg = TrainConfig { lr: 0.0, ..config(2, 2) };
    let out = train(&windows, &[], &cfg).unwrap();
    let init = motionseg::model::Model::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(out.last, init);
}

#[test]
fn same_seed_gives_identical_runs() {
    let windows = few_windows(4);
    let cfg = config(2, 2);
    let a = train(&windows, &windows[..1], &cfg).unwrap();
    let b = train(&windows, &windows[..1], &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.last, b.last);
    let c = train(&windows, &windows[..1], &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn overfits_a_handful_of_windows() {
    let windows = few_windows(5);
    assert_eq!(windows.len(), 5);
    let out = train(&windows, &windows, &config(200, 5)).unwrap();
    let first = out.metrics.first().unwrap().train_loss;
    let last = out.metrics.last().unwrap().train_loss;
    assert!(last < 0.2 * first, "loss {first} -> {last}");
    let iou = evaluate(&out.last, &windows, 5).unwrap().iou_moving().unwrap();
    assert!(iou >= 0.95, "train IoU {iou}");

    // The trained network reads the residual channel.
    let w = windows.iter().max_by_key(|w| w.moving_cells()).unwrap();
    let mut blind = w.clone();
    blind.residual.data.fill(0.0);
    let a = out.last.forward(&[w]).unwrap();
    let b = out.last.forward(&[&blind]).unwrap();
    let delta = a.data().iter().zip(b.data()).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
    assert!(delta > 0.0);
}

#[test]
fn best_checkpoint_tracks_validation_iou() {
    let windows = few_windows(4);
    let out = train(&windows[..3], &windows[3..], &config(4, 3)).unwrap();
    let best = out
        .metrics
        .iter()
        .filter_map(|m| m.val.iou_moving().map(|i| (i, m.epoch)))
        .fold(None::<(f64, usize)>, |acc, (i, e)| match acc {
            Some((b, _)) if b >= i => acc,
            _ => Some((i, e)),
        });
    if let Some((iou, epoch)) = best {
        assert_eq!(out.best_meta.epoch, epoch);
        let again = evaluate(&out.best, &windows[3..], 3).unwrap().iou_moving().unwrap();
        assert_eq!(again, iou);
    }
    assert_eq!(out.last_meta.epoch, 3);
}

#[test]
fn class_frequencies_count_occupied_cells() {
    let windows = few_windows(3);
    let stats = class_frequencies(&windows, 1.02).unwrap();
    let (mut moving, mut total) = (0usize, 0usize);
    for w in &windows {
        total += w.occupancy.data.iter().filter(|&&o| o).count();
        moving += w.moving_cells();
    }
    assert!((stats.f_moving - moving as f64 / total as f64).abs() < 1e-12);
    assert!((stats.f_static + stats.f_moving - 1.0).abs() < 1e-12);
    assert!(stats.w_moving > stats.w_static);
}

#[test]
fn unlabeled_or_empty_training_sets_are_rejected() {
    let mut windows = few_windows(1);
    assert!(matches!(train(&[], &[], &config(1, 1)), Err(Error::EmptyDataset)));
    windows[0].label_mask = None;
    assert!(matches!(train(&windows, &[], &config(1, 1)), Err(Error::MissingLabels)));
}

#[test]
fn holdout_split_is_by_sequence() {
    let mut windows = few_windows(4);
    windows[1].sequence_id = "08".into();
    windows[3].sequence_id = "08".into();
    let (tr, val) = split_dataset(windows.clone(), "08").unwrap();
    assert_eq!((tr.len(), val.len()), (2, 2));
    assert!(val.iter().all(|w| w.sequence_id == "08"));
    assert!(matches!(split_dataset(windows, "05"), Err(Error::MissingSequence(_))));
}

proptest! {
    #[test]
    fn rarer_classes_weigh_more(a in 0.0f64..1.0, b in 0.0f64..1.0, eps in 1.001f64..2.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(class_weight(lo, eps) >= class_weight(hi, eps));
        prop_assert!(class_weight(lo, eps) > 0.0);
    }
}
