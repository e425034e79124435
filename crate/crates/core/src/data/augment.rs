//! Paired geometric and photometric augmentation.
//!
//! One random similarity transform (scale plus rotation about the slice
//! center) is applied to the image and its label map via inverse warping:
//! bilinear sampling for intensities, nearest-neighbor for labels, both with
//! clamp-to-edge so no new label values appear. Intensity jitter applies to
//! the image only.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Rotation in radians, counterclockwise.
    pub rotation: f64,
    pub intensity_scale: f64,
    pub intensity_shift: f64,
}

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const ROTATION_LIMIT_DEG: f64 = 15.0;
pub const INTENSITY_SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const INTENSITY_SHIFT_LIMIT: f64 = 0.1;

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            rotation: 0.0,
            intensity_scale: 1.0,
            intensity_shift: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let limit = ROTATION_LIMIT_DEG.to_radians();
        AugmentParams {
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rotation: rng.random_range(-limit..=limit),
            intensity_scale: rng.random_range(INTENSITY_SCALE_RANGE.0..=INTENSITY_SCALE_RANGE.1),
            intensity_shift: rng.random_range(-INTENSITY_SHIFT_LIMIT..=INTENSITY_SHIFT_LIMIT),
        }
    }
}

/// Source coordinates for output pixel (y, x) under the inverse transform.
fn source_coords(
    y: usize,
    x: usize,
    height: usize,
    width: usize,
    params: &AugmentParams,
) -> (f64, f64) {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    let (s, c) = params.rotation.sin_cos();
    // Forward transform scales then rotates; invert by rotating back and
    // dividing by the scale.
    let sy = (c * dy + s * dx) / params.scale + cy;
    let sx = (-s * dy + c * dx) / params.scale + cx;
    (sy, sx)
}

fn bilinear(values: &[f32], height: usize, width: usize, sy: f64, sx: f64) -> f32 {
    let sy = sy.clamp(0.0, height as f64 - 1.0);
    let sx = sx.clamp(0.0, width as f64 - 1.0);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let v00 = values[y0 * width + x0] as f64;
    let v01 = values[y0 * width + x1] as f64;
    let v10 = values[y1 * width + x0] as f64;
    let v11 = values[y1 * width + x1] as f64;
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bottom = v10 * (1.0 - fx) + v11 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn nearest(values: &[u8], height: usize, width: usize, sy: f64, sx: f64) -> u8 {
    let y = (sy.round().clamp(0.0, height as f64 - 1.0)) as usize;
    let x = (sx.round().clamp(0.0, width as f64 - 1.0)) as usize;
    values[y * width + x]
}

/// Apply one shared geometric transform to an image and its optional label,
/// then photometric jitter to the image alone.
pub fn augment_pair(
    image: &[f32],
    label: Option<&[u8]>,
    height: usize,
    width: usize,
    params: &AugmentParams,
) -> (Vec<f32>, Option<Vec<u8>>) {
    debug_assert_eq!(image.len(), height * width);
    let mut out_image = vec![0f32; height * width];
    let mut out_label = label.map(|_| vec![0u8; height * width]);
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = source_coords(y, x, height, width, params);
            out_image[y * width + x] = bilinear(image, height, width, sy, sx);
            if let (Some(out), Some(src)) = (&mut out_label, label) {
                out[y * width + x] = nearest(src, height, width, sy, sx);
            }
        }
    }
    for v in &mut out_image {
        *v = (*v as f64 * params.intensity_scale + params.intensity_shift) as f32;
    }
    (out_image, out_label)
}

/// Sample parameters from the seed and apply them; identical seeds give
/// identical outputs.
pub fn augment_seeded(
    image: &[f32],
    label: Option<&[u8]>,
    height: usize,
    width: usize,
    seed: u64,
) -> (Vec<f32>, Option<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng);
    augment_pair(image, label, height, width, &params)
}
