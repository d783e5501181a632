#![allow(dead_code)]

use motionseg::ingest::build_windows;
use motionseg::ingest::synth::{generate_scene, SceneConfig};
use motionseg::preproc::{build_bev_window, BevWindow, GridSpec, ResidualMode};

/// Desk-grid windows of one synthetic sequence.
pub fn scene_windows(seed: u64, frames: usize, moving_cars: usize, mode: ResidualMode, id: &str) -> Vec<BevWindow> {
    let config = SceneConfig { seed, frames, moving_cars, ..SceneConfig::default() };
    let scene = generate_scene(&config).unwrap();
    let seq: Vec<_> = scene.frames.into_iter().zip(scene.poses).collect();
    build_windows(&seq, id)
        .iter()
        .map(|w| build_bev_window(w, &GridSpec::desk(), mode).unwrap())
        .collect()
}

/// Windows with at least `min_cells` moving cells.
pub fn moving_windows(seed: u64, frames: usize, mode: ResidualMode, id: &str, min_cells: usize) -> Vec<BevWindow> {
    scene_windows(seed, frames, 6, mode, id)
        .into_iter()
        .filter(|w| w.moving_cells() >= min_cells)
        .collect()
}
