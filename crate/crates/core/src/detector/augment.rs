//! Training-time data augmentation: random horizontal flip and random
//! down-scaling onto a gray canvas of the original size, so the network
//! input dimensions never change. Boxes are transformed alongside.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::nn::resize_bilinear;
use crate::synthgen::{AnnotatedImage, BBox};

const MIN_SCALE: f64 = 0.7;
const CANVAS_GRAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub hflip: bool,
    pub scale: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            scale: 1.0,
        }
    }

    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        Self {
            hflip: rng.gen_bool(0.5),
            scale: rng.gen_range(MIN_SCALE..=1.0),
        }
    }
}

pub fn apply(image: &AnnotatedImage, aug: &Augmentation) -> AnnotatedImage {
    let (c, h, w) = image.pixels.dim();
    let mut pixels = image.pixels.clone();
    let mut boxes = image.boxes.clone();

    if aug.hflip {
        let mut flipped = pixels.clone();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    flipped[[ci, y, x]] = pixels[[ci, y, w - 1 - x]];
                }
            }
        }
        pixels = flipped;
        for b in &mut boxes {
            let (x0, x1) = (w as f64 - b.x1, w as f64 - b.x0);
            b.x0 = x0;
            b.x1 = x1;
        }
    }

    if aug.scale < 1.0 {
        let nh = ((h as f64 * aug.scale).round() as usize).max(1);
        let nw = ((w as f64 * aug.scale).round() as usize).max(1);
        let resized = resize_bilinear(&pixels, nh, nw);
        let oy = (h - nh) / 2;
        let ox = (w - nw) / 2;
        let mut canvas = ndarray::Array3::from_elem((c, h, w), CANVAS_GRAY);
        for ci in 0..c {
            for y in 0..nh {
                for x in 0..nw {
                    canvas[[ci, oy + y, ox + x]] = resized[[ci, y, x]];
                }
            }
        }
        pixels = canvas;
        let sy = nh as f64 / h as f64;
        let sx = nw as f64 / w as f64;
        for b in &mut boxes {
            *b = BBox::new(
                b.x0 * sx + ox as f64,
                b.y0 * sy + oy as f64,
                b.x1 * sx + ox as f64,
                b.y1 * sy + oy as f64,
            );
        }
    }

    AnnotatedImage {
        pixels,
        boxes,
        labels: image.labels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn probe_image() -> AnnotatedImage {
        let mut pixels = Array3::from_elem((3, 16, 16), 0.2);
        pixels[[0, 4, 2]] = 1.0;
        AnnotatedImage {
            pixels,
            boxes: vec![BBox::new(1.0, 3.0, 4.0, 6.0)],
            labels: vec![0],
        }
    }

    #[test]
    fn identity_is_identity() {
        let img = probe_image();
        let out = apply(&img, &Augmentation::identity());
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.boxes, img.boxes);
    }

    #[test]
    fn hflip_mirrors_pixels_and_boxes() {
        let img = probe_image();
        let out = apply(
            &img,
            &Augmentation {
                hflip: true,
                scale: 1.0,
            },
        );
        assert_eq!(out.pixels[[0, 4, 13]], 1.0);
        let b = out.boxes[0];
        assert_eq!((b.x0, b.x1), (12.0, 15.0));
        assert_eq!((b.y0, b.y1), (3.0, 6.0));
        assert!(b.x0 < b.x1);
    }

    #[test]
    fn downscale_keeps_boxes_inside_canvas() {
        let img = probe_image();
        let out = apply(
            &img,
            &Augmentation {
                hflip: false,
                scale: 0.7,
            },
        );
        assert_eq!(out.pixels.dim(), (3, 16, 16));
        let b = out.boxes[0];
        assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 16.0 && b.y1 <= 16.0);
        assert!(b.width() < img.boxes[0].width());
    }
}
