//! On-disk layout: KITTI-style sequence trees and preprocessed window files.
//!
//! ```text
//! <root>/sequences/<id>/velodyne/000000.bin
//! <root>/sequences/<id>/labels/000000.label
//! <root>/sequences/<id>/poses.txt
//! ```

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::ingest::{load_labels, load_point_cloud, load_poses, write_labels, write_point_cloud, write_poses, PointCloud, Pose};
use crate::preproc::{BevImage, BevWindow, Grid, GridSpec};

pub const RUNS_FILE: &str = "augment_runs.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sequence_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sequences").join(id)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

/// Writes one sequence. Labels are written when every frame carries them.
pub fn write_sequence(root: &Path, id: &str, frames: &[PointCloud], poses: &[Pose]) -> Result<()> {
    if frames.len() != poses.len() {
        return Err(Error::Shape(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    let dir = sequence_dir(root, id);
    let velo = dir.join("velodyne");
    create_dir(&velo)?;
    let labeled = frames.iter().all(|f| f.labels.is_some());
    if labeled {
        create_dir(&dir.join("labels"))?;
    }
    for (i, f) in frames.iter().enumerate() {
        write_point_cloud(velo.join(frame_name(i, "bin")), f)?;
        if labeled {
            write_labels(dir.join("labels").join(frame_name(i, "label")), f)?;
        }
    }
    write_poses(dir.join("poses.txt"), poses)
}

/// Sequence ids under `<root>/sequences`, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("sequences");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        if e.path().is_dir() {
            ids.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == ext) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a sequence; labels are attached when a `labels/` directory exists.
pub fn load_sequence(root: &Path, id: &str) -> Result<Vec<(PointCloud, Pose)>> {
    let dir = sequence_dir(root, id);
    if !dir.is_dir() {
        return Err(Error::MissingSequence(format!("{id} (expected {})", dir.display())));
    }
    let scans = sorted_files(&dir.join("velodyne"), "bin")?;
    let poses = load_poses(dir.join("poses.txt"))?;
    if poses.len() != scans.len() {
        return Err(Error::MalformedFile {
            path: dir.join("poses.txt"),
            reason: format!("{} poses for {} scans", poses.len(), scans.len()),
        });
    }
    let label_dir = dir.join("labels");
    let labeled = label_dir.is_dir();
    scans
        .iter()
        .zip(poses)
        .map(|(scan, pose)| {
            let mut cloud = load_point_cloud(scan)?;
            if labeled {
                let stem = scan.file_stem().unwrap_or_default().to_string_lossy();
                cloud = load_labels(label_dir.join(format!("{stem}.label")), cloud)?;
            }
            Ok((cloud, pose))
        })
        .collect()
}

pub fn write_runs(path: &Path, runs: &[Range<usize>]) -> Result<()> {
    let mut s = String::new();
    for r in runs {
        s.push_str(&format!("{} {}\n", r.start, r.end));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_runs(path: &Path) -> Result<Vec<Range<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut runs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { line: i + 1, reason: format!("bad run line {line:?}") })?;
        match nums[..] {
            [a, b] if a < b => runs.push(a..b),
            _ => return Err(Error::Parse { line: i + 1, reason: format!("expected `start end`, got {line:?}") }),
        }
    }
    Ok(runs)
}

fn image_tensor(imgs: &[&BevImage]) -> Result<Tensor<f32>> {
    let (r, c) = (imgs[0].rows, imgs[0].cols);
    let mut data = Vec::with_capacity(imgs.len() * r * c);
    for i in imgs {
        data.extend_from_slice(&i.data);
    }
    Tensor::from_vec(&[imgs.len(), r, c], data)
}

fn split_images<const N: usize>(t: &Tensor<f32>, rows: usize, cols: usize) -> Result<[BevImage; N]> {
    if t.shape() != [N, rows, cols] {
        return Err(Error::Format(format!("image stack has shape {:?}, expected [{N}, {rows}, {cols}]", t.shape())));
    }
    let plane = rows * cols;
    let v: Vec<BevImage> = t
        .data()
        .chunks_exact(plane)
        .map(|c| Grid::from_vec(rows, cols, c.to_vec()))
        .collect::<Result<_>>()?;
    Ok(v.try_into().map_err(|_| Error::Format("image count".into()))?)
}

pub fn window_container(w: &BevWindow, spec: &GridSpec) -> Result<Container> {
    let mut c = Container::default();
    c.header = spec.to_pairs();
    c.push("sequence_id", &w.sequence_id);
    c.push("frame_index", w.frame_index);
    c.push("augmented", w.augmented);
    c.push("motion_points", w.motion_points);
    c.push("residual_mode", w.residual_mode);
    let (rows, cols) = (w.rows(), w.cols());
    let f = &w.frames;
    c.tensors.push(("frames".into(), image_tensor(&[&f[0], &f[1], &f[2]])?));
    c.tensors.push(("residual".into(), image_tensor(&[&w.residual])?));
    if let Some(l) = &w.label_mask {
        c.tensors.push(("label".into(), Tensor::from_vec(&[1, rows, cols], l.data.iter().map(|&v| v as f32).collect())?));
    }
    c.tensors.push((
        "occupancy".into(),
        Tensor::from_vec(&[1, rows, cols], w.occupancy.data.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?,
    ));
    if let Some(s) = &w.semantics {
        c.tensors.push(("semantics".into(), image_tensor(&[&s[0], &s[1], &s[2]])?));
    }
    Ok(c)
}

pub fn window_from_container(c: &Container) -> Result<(BevWindow, GridSpec)> {
    let spec = GridSpec::from_pairs(&c.header_map()).map_err(|e| Error::Format(e.to_string()))?;
    let (rows, cols) = (spec.rows(), spec.cols());
    let need = |name: &str| c.tensor(name).ok_or_else(|| Error::Format(format!("window file lacks `{name}`")));
    let [residual] = split_images::<1>(need("residual")?, rows, cols)?;
    let [occ] = split_images::<1>(need("occupancy")?, rows, cols)?;
    let label_mask = match c.tensor("label") {
        Some(t) => {
            let [l] = split_images::<1>(t, rows, cols)?;
            Some(l.map(|v| v as u8))
        }
        None => None,
    };
    let semantics = c.tensor("semantics").map(|t| split_images::<3>(t, rows, cols)).transpose()?;
    let window = BevWindow {
        frames: split_images::<3>(need("frames")?, rows, cols)?,
        residual_mode: c.parse("residual_mode")?,
        residual,
        label_mask,
        occupancy: occ.map(|v| v > 0.5),
        semantics,
        sequence_id: c.require("sequence_id")?.to_string(),
        frame_index: c.parse("frame_index")?,
        augmented: c.parse("augmented")?,
        motion_points: c.parse("motion_points")?,
    };
    Ok((window, spec))
}

pub fn save_window(path: &Path, w: &BevWindow, spec: &GridSpec) -> Result<()> {
    window_container(w, spec)?.save(path)
}

pub fn load_window(path: &Path) -> Result<(BevWindow, GridSpec)> {
    window_from_container(&Container::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub window_id: String,
    pub motion_points: usize,
    pub augmented: bool,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        writeln!(f, "{} {} {}", e.window_id, e.motion_points, e.augmented).map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Parse { line: i + 1, reason: format!("bad manifest line {line:?}") };
            let t: Vec<&str> = line.split_whitespace().collect();
            match t[..] {
                [id, mp, aug] => Ok(ManifestEntry {
                    window_id: id.to_string(),
                    motion_points: mp.parse().map_err(|_| bad())?,
                    augmented: aug.parse().map_err(|_| bad())?,
                }),
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Loads every window listed in `<dir>/manifest.txt` from `<dir>/<id>.win`.
pub fn load_windows(dir: &Path) -> Result<(Vec<BevWindow>, GridSpec)> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut windows = Vec::with_capacity(entries.len());
    let mut spec = None;
    for e in entries {
        let (w, s) = load_window(&dir.join(format!("{}.win", e.window_id)))?;
        if spec.is_some_and(|prev| prev != s) {
            return Err(Error::Format(format!("window {} uses a different grid", e.window_id)));
        }
        spec = Some(s);
        windows.push(w);
    }
    Ok((windows, spec.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_windows, generate_scene, SceneConfig};
    use crate::preproc::{build_bev_window, ResidualMode};

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_scene(&SceneConfig { frames: 4, ..Default::default() }).unwrap();
        write_sequence(dir.path(), "03", &seq.frames, &seq.poses).unwrap();
        assert_eq!(list_sequences(dir.path()).unwrap(), vec!["03"]);
        let back = load_sequence(dir.path(), "03").unwrap();
        assert_eq!(back.len(), 4);
        for ((c, p), (oc, op)) in back.iter().zip(seq.frames.iter().zip(&seq.poses)) {
            assert_eq!(c, oc);
            assert!((p.matrix() - op.matrix()).abs().max() < 1e-12);
        }
        assert!(matches!(load_sequence(dir.path(), "09"), Err(Error::MissingSequence(_))));
    }

    #[test]
    fn window_file_round_trip() {
        let seq = generate_scene(&SceneConfig { frames: 3, ..Default::default() }).unwrap();
        let frames: Vec<_> = seq.frames.into_iter().zip(seq.poses).collect();
        let spec = GridSpec::desk();
        let w = build_bev_window(&build_windows(&frames, "00")[0], &spec, ResidualMode::Sub).unwrap();
        let c = window_container(&w, &spec).unwrap();
        let c2 = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let (back, s) = window_from_container(&c2).unwrap();
        assert_eq!(back, w);
        assert_eq!(s, spec);
    }

    #[test]
    fn runs_and_manifest_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(RUNS_FILE);
        write_runs(&p, &[0..4, 10..14]).unwrap();
        assert_eq!(read_runs(&p).unwrap(), vec![0..4, 10..14]);
        let m = dir.path().join(MANIFEST_FILE);
        let entries = vec![ManifestEntry { window_id: "00_000002".into(), motion_points: 25, augmented: false }];
        write_manifest(&m, &entries).unwrap();
        assert_eq!(read_manifest(&m).unwrap(), entries);
    }
}
