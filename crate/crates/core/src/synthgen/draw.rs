//! Rasterization of the benchmark shapes.
//!
//! Each object is defined in canonical coordinates (unit radius around the
//! origin), rotated, then affinely normalized so its tight bounds fill the
//! target ground-truth box exactly. Coverage is estimated with a 3x3
//! supersampling grid per pixel, giving anti-aliased edges.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::BBox;

const SUBSAMPLES: usize = 3;
const STAR_INNER_RADIUS: f64 = 0.4;
const BACKGROUND_GRAY: f64 = 0.5;

pub const COLOR_RGB: [[f64; 3]; 3] = [
    [0.85, 0.12, 0.12], // red
    [0.12, 0.75, 0.12], // green
    [0.15, 0.25, 0.88], // blue
];

pub fn noise_background(size: usize, noise_std: f64, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let mut pixels = Array3::zeros((3, size, size));
    let normal = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
    for y in 0..size {
        for x in 0..size {
            // Gray noise: a single luminance draw shared by all channels.
            let v = (BACKGROUND_GRAY + normal.sample(rng)).clamp(0.0, 1.0);
            for c in 0..3 {
                pixels[[c, y, x]] = v;
            }
        }
    }
    pixels
}

/// Rotation draw per shape kind, restricted to the shape's symmetry period.
/// Circles are rotation-invariant and consume no draw.
pub fn sample_rotation(shape_idx: usize, rng: &mut ChaCha12Rng) -> f64 {
    use std::f64::consts::PI;
    match shape_idx {
        0 => 0.0,
        1 => rng.gen_range(0.0..PI / 2.0),
        2 => rng.gen_range(0.0..2.0 * PI / 3.0),
        3 => rng.gen_range(0.0..2.0 * PI / 5.0),
        _ => unreachable!("shape index out of range"),
    }
}

enum Outline {
    Ellipse,
    Polygon(Vec<(f64, f64)>),
}

fn canonical_polygon(shape_idx: usize, rotation: f64) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let vertex = |radius: f64, angle: f64| {
        let a = angle + rotation - PI / 2.0; // first vertex points up at rotation 0
        (radius * a.cos(), radius * a.sin())
    };
    match shape_idx {
        1 => (0..4).map(|k| vertex(1.0, k as f64 * PI / 2.0)).collect(),
        2 => (0..3)
            .map(|k| vertex(1.0, k as f64 * 2.0 * PI / 3.0))
            .collect(),
        3 => (0..10)
            .map(|k| {
                let r = if k % 2 == 0 { 1.0 } else { STAR_INNER_RADIUS };
                vertex(r, k as f64 * PI / 5.0)
            })
            .collect(),
        _ => unreachable!("not a polygon shape"),
    }
}

/// Even-odd ray cast; handles the concave star.
fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Blend the shape for class `class_id` into `pixels`, filling `bbox` tightly.
pub fn render_shape(pixels: &mut Array3<f64>, class_id: usize, bbox: &BBox, rotation: f64) {
    let shape_idx = class_id % 4;
    let color = COLOR_RGB[class_id / 4];

    let outline = if shape_idx == 0 {
        Outline::Ellipse
    } else {
        // Normalize the rotated polygon so its bounds land exactly on the box.
        let verts = canonical_polygon(shape_idx, rotation);
        let (mut vx0, mut vy0, mut vx1, mut vy1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &verts {
            vx0 = vx0.min(x);
            vy0 = vy0.min(y);
            vx1 = vx1.max(x);
            vy1 = vy1.max(y);
        }
        let sx = bbox.width() / (vx1 - vx0);
        let sy = bbox.height() / (vy1 - vy0);
        Outline::Polygon(
            verts
                .into_iter()
                .map(|(x, y)| (bbox.x0 + (x - vx0) * sx, bbox.y0 + (y - vy0) * sy))
                .collect(),
        )
    };

    let (cx, cy) = bbox.center();
    let rx = bbox.width() / 2.0;
    let ry = bbox.height() / 2.0;
    let inside = |x: f64, y: f64| -> bool {
        match &outline {
            Outline::Ellipse => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Outline::Polygon(verts) => point_in_polygon(x, y, verts),
        }
    };

    let h = pixels.shape()[1];
    let w = pixels.shape()[2];
    let px0 = bbox.x0.floor().max(0.0) as usize;
    let py0 = bbox.y0.floor().max(0.0) as usize;
    let px1 = (bbox.x1.ceil() as usize).min(w);
    let py1 = (bbox.y1.ceil() as usize).min(h);

    let inv = 1.0 / SUBSAMPLES as f64;
    for y in py0..py1 {
        for x in px0..px1 {
            let mut hits = 0usize;
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let fx = x as f64 + (sx as f64 + 0.5) * inv;
                    let fy = y as f64 + (sy as f64 + 0.5) * inv;
                    if inside(fx, fy) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let alpha = hits as f64 * inv * inv;
            for c in 0..3 {
                let bg = pixels[[c, y, x]];
                pixels[[c, y, x]] = bg + (color[c] - bg) * alpha;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn polygon_test_accepts_centroid_of_triangle() {
        let verts = canonical_polygon(2, 0.0);
        assert!(point_in_polygon(0.0, 0.0, &verts));
        assert!(!point_in_polygon(2.0, 2.0, &verts));
    }

    #[test]
    fn star_is_concave() {
        let verts = canonical_polygon(3, 0.0);
        // Midway between two adjacent outer points lies outside the star but
        // inside its convex hull.
        let (x0, y0) = verts[0];
        let (x2, y2) = verts[2];
        let (mx, my) = ((x0 + x2) / 2.0, (y0 + y2) / 2.0);
        assert!(!point_in_polygon(mx, my, &verts));
        assert!(point_in_polygon(0.0, 0.0, &verts));
    }

    #[test]
    fn shape_fills_its_box_tightly() {
        for class in 0..12 {
            let mut pixels = Array3::from_elem((3, 64, 64), 0.5);
            let bbox = BBox::new(10.0, 14.0, 50.0, 46.0);
            render_shape(&mut pixels, class, &bbox, 0.3);
            // Some paint lands inside the box...
            let mut max_delta: f64 = 0.0;
            for y in 14..46 {
                for x in 10..50 {
                    max_delta = max_delta.max((pixels[[0, y, x]] - 0.5).abs());
                }
            }
            assert!(max_delta > 0.05, "class {class} drew nothing");
            // ...and none clearly outside it (allow the boundary column/row).
            for y in 0..64 {
                for x in 0..64 {
                    let outside = (x + 1) < 10 || x > 50 || (y + 1) < 14 || y > 46;
                    if outside {
                        assert_eq!(pixels[[0, y, x]], 0.5, "paint at ({x},{y}) class {class}");
                    }
                }
            }
        }
    }

    #[test]
    fn background_noise_is_gray_and_clamped() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let px = noise_background(16, 0.2, &mut rng);
        for y in 0..16 {
            for x in 0..16 {
                let v = px[[0, y, x]];
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, px[[1, y, x]]);
                assert_eq!(v, px[[2, y, x]]);
            }
        }
    }
}
