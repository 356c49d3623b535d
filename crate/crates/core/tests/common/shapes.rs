//! Image fixtures for edge extraction checks.

#![allow(dead_code)]

use gensynth_core::guidance::EdgeMap;
use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, RngCore};

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

pub fn constant_image(w: u32, h: u32, v: u8) -> DynamicImage {
    DynamicImage::ImageRgb8(RgbImage::from_pixel(w, h, Rgb([v, v, v])))
}

pub fn rectangle_image(w: u32, h: u32, r: Rect, bg: u8, fg: u8) -> DynamicImage {
    DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
        let inside = x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
        let v = if inside { fg } else { bg };
        Rgb([v, v, v])
    }))
}

/// Distance from the centre of pixel (x, y) to the rectangle's outline,
/// which runs along pixel boundaries.
pub fn distance_to_border(x: u32, y: u32, r: Rect) -> f64 {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (x0, y0, x1, y1) = (r.x0 as f64, r.y0 as f64, r.x1 as f64, r.y1 as f64);
    let seg = |ax: f64, ay: f64, bx: f64, by: f64| {
        let (dx, dy) = (bx - ax, by - ay);
        let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        (px - ax - t * dx).hypot(py - ay - t * dy)
    };
    seg(x0, y0, x1, y0)
        .min(seg(x1, y0, x1, y1))
        .min(seg(x0, y1, x1, y1))
        .min(seg(x0, y0, x0, y1))
}

/// Fraction of the rectangle's inner ring of pixels that has an edge pixel
/// within one pixel (8-neighbourhood or itself).
pub fn border_coverage(edges: &EdgeMap, r: Rect) -> f64 {
    let mut ring = Vec::new();
    for x in r.x0..r.x1 {
        ring.push((x, r.y0));
        ring.push((x, r.y1 - 1));
    }
    for y in r.y0 + 1..r.y1 - 1 {
        ring.push((r.x0, y));
        ring.push((r.x1 - 1, y));
    }
    let hit = ring
        .iter()
        .filter(|&&(x, y)| {
            (x.saturating_sub(1)..=(x + 1).min(edges.width - 1))
                .any(|nx| (y.saturating_sub(1)..=(y + 1).min(edges.height - 1)).any(|ny| edges.get(nx, ny) > 0))
        })
        .count();
    hit as f64 / ring.len() as f64
}

/// Edge pixels farther than `max` from the outline.
pub fn stray_edges(edges: &EdgeMap, r: Rect, max: f64) -> usize {
    let mut n = 0;
    for y in 0..edges.height {
        for x in 0..edges.width {
            if edges.get(x, y) > 0 && distance_to_border(x, y, r) > max {
                n += 1;
            }
        }
    }
    n
}

/// Blocky noise: random rectangles over a random background, plus mild
/// per-pixel noise.
pub fn random_image(rng: &mut impl RngCore, w: u32, h: u32) -> DynamicImage {
    let mut img = RgbImage::from_pixel(w, h, Rgb([rng.random(), rng.random(), rng.random()]));
    for _ in 0..rng.random_range(1..6) {
        let x0 = rng.random_range(0..w - 4);
        let y0 = rng.random_range(0..h - 4);
        let x1 = rng.random_range(x0 + 2..w);
        let y1 = rng.random_range(y0 + 2..h);
        let c = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, c);
            }
        }
    }
    for p in img.pixels_mut() {
        for ch in p.0.iter_mut() {
            *ch = ch.saturating_add_signed(rng.random_range(-8i8..=8));
        }
    }
    DynamicImage::ImageRgb8(img)
}
