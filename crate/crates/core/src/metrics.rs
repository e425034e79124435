//! Evaluation metrics: per-class Dice overlap (%) and average symmetric
//! surface distance (mm), computed per subject and averaged across subjects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dice overlap between two binary masks, in percent.
///
/// Returns `100 * 2|A∩B| / (|A| + |B|)`; two empty masks count as a
/// perfect match (100).
pub fn dice_score(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return 100.0;
    }
    100.0 * 2.0 * inter as f64 / total as f64
}

/// Border pixels of a binary mask: mask pixels with at least one 4-neighbor
/// outside the mask. Pixels at the image edge count as border because the
/// out-of-grid side is outside the mask.
pub fn surface_pixels(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    debug_assert_eq!(mask.len(), height * width);
    let inside = |y: isize, x: isize| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !inside(yi - 1, xi) || !inside(yi + 1, xi) || !inside(yi, xi - 1)
                || !inside(yi, xi + 1)
            {
                out.push((y, x));
            }
        }
    }
    out
}

fn mean_min_distance(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> f64 {
    let (sy, sx) = spacing;
    let mut sum = 0.0;
    for &(ay, ax) in from {
        let mut best = f64::INFINITY;
        for &(by, bx) in to {
            let dy = (ay as f64 - by as f64) * sy;
            let dx = (ax as f64 - bx as f64) * sx;
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        sum += best.sqrt();
    }
    sum / from.len() as f64
}

/// Average symmetric surface distance between two binary masks, in mm.
///
/// Surfaces are 4-neighbor border pixels; distances are Euclidean with the
/// given (row, column) pixel spacing in mm. The result is the mean of the
/// two directed mean surface distances. Returns `None` when either mask is
/// empty, in which case the distance is undefined.
pub fn asd(pred: &[bool], gt: &[bool], height: usize, width: usize, spacing: (f64, f64)) -> Option<f64> {
    let sp = surface_pixels(pred, height, width);
    let sg = surface_pixels(gt, height, width);
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let d_pg = mean_min_distance(&sp, &sg, spacing);
    let d_gp = mean_min_distance(&sg, &sp, spacing);
    Some(0.5 * (d_pg + d_gp))
}

/// Per-subject evaluation: volumetric Dice per class plus slice-averaged ASD.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectEval {
    pub id: String,
    pub slice_count: usize,
    /// Per-class Dice (%) over the pooled subject volume.
    pub dice_percent: Vec<f64>,
    /// Per-class ASD (mm), averaged over slices where both masks are
    /// nonempty; `None` when no slice had both masks present.
    pub asd_mm: Vec<Option<f64>>,
    /// Per-class count of slices skipped in the ASD average because the
    /// prediction or ground truth was empty on that slice.
    pub asd_skipped_slices: Vec<usize>,
}

/// Evaluate one subject's stacked slices against ground truth.
///
/// `pred_slices` and `gt_slices` hold one `height*width` label grid per
/// slice. Dice is computed over the pooled volume; ASD is computed per 2D
/// slice and averaged, skipping slices where either mask is empty.
pub fn evaluate_volume(
    id: &str,
    pred_slices: &[Vec<u8>],
    gt_slices: &[Vec<u8>],
    height: usize,
    width: usize,
    num_classes: usize,
    spacing: (f64, f64),
) -> Result<SubjectEval> {
    if pred_slices.len() != gt_slices.len() {
        return Err(Error::Shape(format!(
            "subject `{id}`: {} predicted slices vs {} ground-truth slices",
            pred_slices.len(),
            gt_slices.len()
        )));
    }
    if pred_slices.is_empty() {
        return Err(Error::Shape(format!("subject `{id}` has no slices")));
    }
    let pixels = height * width;
    for (i, (p, g)) in pred_slices.iter().zip(gt_slices.iter()).enumerate() {
        if p.len() != pixels || g.len() != pixels {
            return Err(Error::Shape(format!(
                "subject `{id}` slice {i}: expected {pixels} pixels ({height}x{width}), got pred {} / gt {}",
                p.len(),
                g.len()
            )));
        }
    }

    let mut dice_percent = Vec::with_capacity(num_classes);
    let mut asd_mm = Vec::with_capacity(num_classes);
    let mut asd_skipped = Vec::with_capacity(num_classes);
    for c in 0..num_classes as u8 {
        let pred_vol: Vec<bool> = pred_slices.iter().flatten().map(|&v| v == c).collect();
        let gt_vol: Vec<bool> = gt_slices.iter().flatten().map(|&v| v == c).collect();
        dice_percent.push(dice_score(&pred_vol, &gt_vol));

        let mut dists = Vec::new();
        let mut skipped = 0usize;
        for (p, g) in pred_slices.iter().zip(gt_slices.iter()) {
            let pm: Vec<bool> = p.iter().map(|&v| v == c).collect();
            let gm: Vec<bool> = g.iter().map(|&v| v == c).collect();
            match asd(&pm, &gm, height, width, spacing) {
                Some(d) => dists.push(d),
                None => skipped += 1,
            }
        }
        asd_mm.push(if dists.is_empty() {
            None
        } else {
            Some(dists.iter().sum::<f64>() / dists.len() as f64)
        });
        asd_skipped.push(skipped);
    }

    Ok(SubjectEval {
        id: id.to_string(),
        slice_count: pred_slices.len(),
        dice_percent,
        asd_mm,
        asd_skipped_slices: asd_skipped,
    })
}

/// Dataset-level evaluation report: per-class means over subjects plus the
/// per-subject breakdown. Class 0 is background; the headline numbers are
/// the foreground means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub spacing_mm: (f64, f64),
    /// Per-class Dice (%) averaged over subjects.
    pub dice_percent: Vec<f64>,
    /// Mean Dice (%) over foreground classes (1..C).
    pub mean_foreground_dice: f64,
    /// Per-class ASD (mm) averaged over subjects where defined.
    pub asd_mm: Vec<Option<f64>>,
    /// Mean ASD (mm) over foreground classes where defined.
    pub mean_foreground_asd: Option<f64>,
    /// Per-class count of subjects whose ASD was undefined (excluded from
    /// the class mean).
    pub asd_undefined_subjects: Vec<usize>,
    pub subjects: Vec<SubjectEval>,
}

impl EvalReport {
    /// Average per-subject results into a dataset report.
    pub fn from_subjects(
        subjects: Vec<SubjectEval>,
        num_classes: usize,
        spacing_mm: (f64, f64),
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Config("evaluation requires at least one subject".into()));
        }
        for s in &subjects {
            if s.dice_percent.len() != num_classes || s.asd_mm.len() != num_classes {
                return Err(Error::Shape(format!(
                    "subject `{}` was evaluated with {} classes, expected {num_classes}",
                    s.id,
                    s.dice_percent.len()
                )));
            }
        }

        let n = subjects.len() as f64;
        let mut dice_percent = vec![0.0; num_classes];
        let mut asd_sum = vec![0.0; num_classes];
        let mut asd_count = vec![0usize; num_classes];
        for s in &subjects {
            for c in 0..num_classes {
                dice_percent[c] += s.dice_percent[c] / n;
                if let Some(d) = s.asd_mm[c] {
                    asd_sum[c] += d;
                    asd_count[c] += 1;
                }
            }
        }
        let asd_mm: Vec<Option<f64>> = (0..num_classes)
            .map(|c| (asd_count[c] > 0).then(|| asd_sum[c] / asd_count[c] as f64))
            .collect();
        let asd_undefined_subjects: Vec<usize> =
            (0..num_classes).map(|c| subjects.len() - asd_count[c]).collect();

        let fg = 1..num_classes;
        let mean_foreground_dice = if num_classes > 1 {
            fg.clone().map(|c| dice_percent[c]).sum::<f64>() / (num_classes - 1) as f64
        } else {
            dice_percent[0]
        };
        let fg_asd: Vec<f64> = fg.filter_map(|c| asd_mm[c]).collect();
        let mean_foreground_asd = if fg_asd.is_empty() {
            None
        } else {
            Some(fg_asd.iter().sum::<f64>() / fg_asd.len() as f64)
        };

        Ok(EvalReport {
            num_classes,
            spacing_mm,
            dice_percent,
            mean_foreground_dice,
            asd_mm,
            mean_foreground_asd,
            asd_undefined_subjects,
            subjects,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable table with one row per class plus foreground means.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>14}\n",
            "class", "dice %", "asd mm", "asd undefined"
        ));
        for c in 0..self.num_classes {
            let asd = match self.asd_mm[c] {
                Some(d) => format!("{d:.3}"),
                None => "undefined".to_string(),
            };
            out.push_str(&format!(
                "{:<12} {:>10.2} {:>10} {:>14}\n",
                c, self.dice_percent[c], asd, self.asd_undefined_subjects[c]
            ));
        }
        let mean_asd = match self.mean_foreground_asd {
            Some(d) => format!("{d:.3}"),
            None => "undefined".to_string(),
        };
        out.push_str(&format!(
            "{:<12} {:>10.2} {:>10} {:>14}\n",
            "fg mean", self.mean_foreground_dice, mean_asd, ""
        ));
        out.push_str(&format!(
            "subjects: {}; spacing: {:.3}x{:.3} mm\n",
            self.subjects.len(),
            self.spacing_mm.0,
            self.spacing_mm.1
        ));
        out
    }

    /// CSV with one row per (subject, class) pair plus per-class mean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,class,dice_percent,asd_mm,asd_skipped_slices\n");
        for s in &self.subjects {
            for c in 0..self.num_classes {
                let asd = s.asd_mm[c].map(|d| format!("{d:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{:.6},{},{}\n",
                    s.id, c, s.dice_percent[c], asd, s.asd_skipped_slices[c]
                ));
            }
        }
        for c in 0..self.num_classes {
            let asd = self.asd_mm[c].map(|d| format!("{d:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "mean,{},{:.6},{},{}\n",
                c, self.dice_percent[c], asd, self.asd_undefined_subjects[c]
            ));
        }
        out
    }
}
