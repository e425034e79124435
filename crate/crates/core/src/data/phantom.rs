//! Synthetic cross-modality phantom generator.
//!
//! Both domains share one anatomy model (an organ-like blob with up to three
//! substructures) but draw disjoint subject seeds, so the cohorts are
//! unpaired. The source domain renders with a mild monotone intensity curve;
//! the target domain renders with an inverted-contrast curve plus a smooth
//! multiplicative bias field and heavier noise, which produces a measurable
//! class-conditional intensity shift between domains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, normalize_intensities, SliceDataset, SliceRecord, Subject};
use crate::error::{Error, Result};
use crate::types::Modality;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub subjects_per_domain: usize,
    pub slices_per_subject: usize,
    /// Square slice side length in pixels.
    pub size: usize,
    /// Total classes including background; the anatomy model supports 2..=5.
    pub num_classes: usize,
    /// Relative jitter on structure radii and centers.
    pub shape_jitter: f64,
    /// Gaussian intensity noise per domain.
    pub noise_source: f64,
    pub noise_target: f64,
    /// Amplitude of the target domain's multiplicative bias field.
    pub bias_strength: f64,
    /// Source intensity curve exponent (monotone increasing).
    pub source_gamma: f64,
    /// Target intensity curve v = offset + slope * tissue (contrast inversion
    /// when slope < 0).
    pub target_slope: f64,
    pub target_offset: f64,
    pub spacing: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            subjects_per_domain: 8,
            slices_per_subject: 4,
            size: 64,
            num_classes: 5,
            shape_jitter: 0.12,
            noise_source: 0.02,
            noise_target: 0.03,
            bias_strength: 0.2,
            source_gamma: 0.9,
            target_slope: -0.85,
            target_offset: 0.95,
            spacing: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.rot.sin_cos();
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u / self.ry).powi(2) + (v / self.rx).powi(2) <= 1.0
    }
}

/// Per-subject anatomy: structure geometry in normalized [0,1] coordinates
/// (radii relative to the slice side).
struct Anatomy {
    organ: Ellipse,
    subs: Vec<Ellipse>,
    tissue_jitter: [f64; 5],
    bias_dir: (f64, f64),
    texture_freq: (f64, f64),
    texture_phase: f64,
}

fn jittered(rng: &mut ChaCha8Rng, base: f64, jitter: f64) -> f64 {
    base * (1.0 + rng.random_range(-jitter..jitter))
}

fn sample_anatomy(rng: &mut ChaCha8Rng, jitter: f64, num_classes: usize) -> Anatomy {
    let organ = Ellipse {
        cy: 0.5 + rng.random_range(-0.05..0.05),
        cx: 0.5 + rng.random_range(-0.05..0.05),
        ry: jittered(rng, 0.30, jitter),
        rx: jittered(rng, 0.26, jitter),
        rot: rng.random_range(-0.5..0.5),
    };
    let mut subs = Vec::new();
    // Substructures sit at fixed anchors inside or on the organ, scaled by
    // the organ radii so they stay anatomically plausible under jitter.
    let anchors = [
        (-0.40, -0.30, 0.115, 0.100),
        (0.35, 0.30, 0.095, 0.085),
        (0.05, -0.80, 0.085, 0.075),
    ];
    for &(ay, ax, ry, rx) in anchors.iter().take(num_classes.saturating_sub(2)) {
        subs.push(Ellipse {
            cy: organ.cy + ay * organ.ry + rng.random_range(-0.02..0.02),
            cx: organ.cx + ax * organ.rx + rng.random_range(-0.02..0.02),
            ry: jittered(rng, ry, jitter),
            rx: jittered(rng, rx, jitter),
            rot: rng.random_range(-0.6..0.6),
        });
    }
    let mut tissue_jitter = [0.0; 5];
    for t in tissue_jitter.iter_mut() {
        *t = rng.random_range(-0.02..0.02);
    }
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    Anatomy {
        organ,
        subs,
        tissue_jitter,
        bias_dir: (angle.sin(), angle.cos()),
        texture_freq: (rng.random_range(1.5..3.5), rng.random_range(1.5..3.5)),
        texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

/// Base tissue reflectivity per class, before any modality curve.
const TISSUE: [f64; 5] = [0.15, 0.55, 0.80, 0.35, 0.95];

#[derive(Clone, Copy, PartialEq)]
enum DomainSide {
    Source,
    Target,
}

fn render_subject(
    cfg: &PhantomConfig,
    side: DomainSide,
    subject_idx: usize,
) -> Result<Subject> {
    let domain_code = match side {
        DomainSide::Source => 1,
        DomainSide::Target => 2,
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, domain_code, subject_idx as u64]));
    let anatomy = sample_anatomy(&mut rng, cfg.shape_jitter, cfg.num_classes);
    let noise_sigma = match side {
        DomainSide::Source => cfg.noise_source,
        DomainSide::Target => cfg.noise_target,
    };
    let noise = Normal::new(0.0, noise_sigma.max(1e-9))
        .map_err(|e| Error::Config(format!("invalid noise level: {e}")))?;

    let n = cfg.size;
    let s_count = cfg.slices_per_subject;
    let mut slices = Vec::with_capacity(s_count);
    for s in 0..s_count {
        // Through-plane profile: structures grow then shrink across slices.
        let profile = 0.82
            + 0.25 * (std::f64::consts::PI * (s as f64 + 0.5) / s_count as f64).sin();
        let drift_y = rng.random_range(-0.01..0.01);
        let drift_x = rng.random_range(-0.01..0.01);
        let scale_ellipse = |e: &Ellipse| Ellipse {
            cy: e.cy + drift_y,
            cx: e.cx + drift_x,
            ry: e.ry * profile,
            rx: e.rx * profile,
            rot: e.rot,
        };
        let organ = scale_ellipse(&anatomy.organ);
        let subs: Vec<Ellipse> = anatomy.subs.iter().map(&scale_ellipse).collect();

        let mut label = vec![0u8; n * n];
        let mut image = vec![0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let yn = (y as f64 + 0.5) / n as f64;
                let xn = (x as f64 + 0.5) / n as f64;
                let mut class = 0usize;
                if organ.contains(yn, xn) {
                    class = 1;
                }
                for (k, sub) in subs.iter().enumerate() {
                    if sub.contains(yn, xn) {
                        class = k + 2;
                    }
                }
                label[y * n + x] = class as u8;

                let texture = 0.02
                    * (std::f64::consts::TAU
                        * (anatomy.texture_freq.0 * yn + anatomy.texture_freq.1 * xn)
                        + anatomy.texture_phase)
                        .sin();
                let tissue =
                    (TISSUE[class] + anatomy.tissue_jitter[class] + texture).clamp(0.0, 1.0);
                let rendered = match side {
                    DomainSide::Source => tissue.powf(cfg.source_gamma),
                    DomainSide::Target => {
                        let inverted = cfg.target_offset + cfg.target_slope * tissue;
                        let bias = 1.0
                            + cfg.bias_strength
                                * ((yn - 0.5) * anatomy.bias_dir.0
                                    + (xn - 0.5) * anatomy.bias_dir.1);
                        inverted * bias
                    }
                };
                image[y * n + x] = (rendered + noise.sample(&mut rng)) as f32;
            }
        }
        normalize_intensities(&mut image);
        slices.push(SliceRecord {
            image,
            label: Some(label),
        });
    }

    let prefix = match side {
        DomainSide::Source => "src",
        DomainSide::Target => "tgt",
    };
    Ok(Subject {
        id: format!("{prefix}{subject_idx:02}"),
        slices,
    })
}

/// Generate unpaired source and target phantom cohorts. Both are fully
/// labeled; callers treat target labels as evaluation-only.
pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<(SliceDataset, SliceDataset)> {
    if !(2..=5).contains(&cfg.num_classes) {
        return Err(Error::Config(format!(
            "phantom anatomy supports 2..=5 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.size < 16 {
        return Err(Error::Config("phantom size must be at least 16".into()));
    }
    if cfg.subjects_per_domain == 0 || cfg.slices_per_subject == 0 {
        return Err(Error::Config("phantom needs at least one subject and slice".into()));
    }

    let build = |side: DomainSide, modality: Modality| -> Result<SliceDataset> {
        let subjects = (0..cfg.subjects_per_domain)
            .map(|i| render_subject(cfg, side, i))
            .collect::<Result<Vec<_>>>()?;
        let ds = SliceDataset {
            modality,
            spacing: cfg.spacing,
            height: cfg.size,
            width: cfg.size,
            num_classes: cfg.num_classes,
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    };
    Ok((
        build(DomainSide::Source, Modality::Mri)?,
        build(DomainSide::Target, Modality::Ct)?,
    ))
}

/// Class-conditional intensity histograms over labeled pixels: one
/// probability row per class with `bins` buckets spanning [-1, 1].
pub fn class_intensity_histograms(dataset: &SliceDataset, bins: usize) -> Vec<Vec<f64>> {
    let mut hist = vec![vec![0.0f64; bins]; dataset.num_classes];
    for subject in &dataset.subjects {
        for slice in &subject.slices {
            let Some(label) = &slice.label else { continue };
            for (&v, &c) in slice.image.iter().zip(label.iter()) {
                let t = ((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0);
                let b = ((t * bins as f64) as usize).min(bins - 1);
                hist[c as usize][b] += 1.0;
            }
        }
    }
    for row in &mut hist {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    hist
}

/// Mean L1 distance between class-conditional histograms, over classes
/// populated on both sides. Ranges over [0, 2].
pub fn histogram_l1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut used = 0usize;
    for (ra, rb) in a.iter().zip(b.iter()) {
        if ra.iter().sum::<f64>() == 0.0 || rb.iter().sum::<f64>() == 0.0 {
            continue;
        }
        total += ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}
