//! Canny edge detection on an 8-bit grayscale plane.

/// Row-major f64 plane.
pub(crate) struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

// Separable blur, borders replicated.
fn blur(src: &Plane, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (src.width, src.height);
    let pass = |src: &Plane, dx: isize, dy: isize| {
        let mut data = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                data[y as usize * w + x as usize] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let o = i as isize - r;
                        kv * src.at(x + o * dx, y + o * dy)
                    })
                    .sum();
            }
        }
        Plane { width: w, height: h, data }
    };
    pass(&pass(src, 1, 0), 0, 1)
}

/// Binary edge mask (true = edge) from Gaussian smoothing, Sobel gradients,
/// non-maximum suppression and 8-connected hysteresis.
pub(crate) fn canny(gray: &Plane, sigma: f64, low: f64, high: f64) -> Vec<bool> {
    let (w, h) = (gray.width, gray.height);
    let smooth = blur(gray, sigma);
    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| smooth.at(x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let m = Plane { width: w, height: h, data: mag };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = m.data[i];
            if v == 0.0 {
                continue;
            }
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            // Strict on one side, inclusive on the other: a two-pixel plateau
            // keeps exactly one pixel.
            if v > m.at(x - dx, y - dy) && v >= m.at(x + dx, y + dy) {
                thin[i] = v;
            }
        }
    }

    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= high).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.4);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn vertical_step_gives_single_column() {
        let (w, h) = (16, 8);
        let data = (0..w * h).map(|i| if i % w >= 8 { 255.0 } else { 0.0 }).collect();
        let e = canny(&Plane { width: w, height: h, data }, 1.4, 50.0, 150.0);
        for y in 0..h {
            let cols: Vec<usize> = (0..w).filter(|&x| e[y * w + x]).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!(cols[0] == 7 || cols[0] == 8);
        }
    }
}
