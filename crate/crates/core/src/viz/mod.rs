//! PPM/PGM rendering of windows and masks. Images are drawn with the
//! forward axis pointing up and +y (left of the vehicle) on the left.

use crate::preproc::{BevImage, BevWindow, Grid, MOVING};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Visits cells in image order (top-left first).
fn image_cells(rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows).rev().flat_map(move |r| (0..cols).rev().map(move |c| (r, c)))
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Binary PGM of a `[0,1]` image.
pub fn gray_pgm(img: &BevImage) -> Vec<u8> {
    let mut out = header("P5", img.cols, img.rows);
    out.extend(image_cells(img.rows, img.cols).map(|(r, c)| to_byte(img.get(r, c))));
    out
}

/// Binary PGM of a class mask: moving cells white, everything else black.
pub fn mask_pgm(mask: &Grid<u8>) -> Vec<u8> {
    let mut out = header("P5", mask.cols, mask.rows);
    out.extend(image_cells(mask.rows, mask.cols).map(|(r, c)| if mask.get(r, c) == MOVING { 255 } else { 0 }));
    out
}

/// Binary PPM with the current frame in red, t−1 in green and t−2 in blue.
pub fn frames_ppm(window: &BevWindow) -> Vec<u8> {
    let [now, p1, p2] = &window.frames;
    let mut out = header("P6", now.cols, now.rows);
    for (r, c) in image_cells(now.rows, now.cols) {
        out.extend([to_byte(now.get(r, c)), to_byte(p1.get(r, c)), to_byte(p2.get(r, c))]);
    }
    out
}

pub fn residual_pgm(window: &BevWindow) -> Vec<u8> {
    gray_pgm(&window.residual)
}

/// Pixel offset of cell `(r, c)` in the raster payload.
pub fn pixel_index(rows: usize, cols: usize, r: usize, c: usize) -> usize {
    (rows - 1 - r) * cols + (cols - 1 - c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_and_header() {
        let mut g = Grid::<f32>::new(3, 2);
        g.set(2, 1, 1.0);
        let img = gray_pgm(&g);
        let head = b"P5\n2 3\n255\n";
        assert_eq!(&img[..head.len()], head);
        let px = &img[head.len()..];
        assert_eq!(px.len(), 6);
        assert_eq!(px[pixel_index(3, 2, 2, 1)], 255);
        assert_eq!(pixel_index(3, 2, 2, 1), 0);
        assert_eq!(px.iter().filter(|&&v| v > 0).count(), 1);
    }
}
