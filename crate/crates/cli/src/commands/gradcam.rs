//! `gradcam`: render class-attribution heatmaps over input slices as PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::{ImageFormat, Rgb, RgbImage};
use xmodseg_core::data::{assemble_batch, load_manifest, BatchOptions};
use xmodseg_core::train::{gradcam_map, Trainer, GRADCAM_LAYERS};

#[derive(clap::Args)]
pub struct Args {
    /// Training configuration file (JSON); architecture must match the checkpoint
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory to probe
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest directory holding the slices to explain
    #[arg(long)]
    pub data: PathBuf,
    /// Subject id (defaults to the first subject)
    #[arg(long)]
    pub subject: Option<String>,
    /// Slice index within the subject (defaults to the middle slice)
    #[arg(long)]
    pub slice: Option<usize>,
    /// Class index to attribute (defaults to every foreground class)
    #[arg(long)]
    pub class: Option<usize>,
    /// Layer to probe: encoder, neck, or dynamic-conv
    #[arg(long, default_value = "dynamic-conv")]
    pub layer: String,
    /// Output directory for the PNG overlays
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if !GRADCAM_LAYERS.contains(&args.layer.as_str()) {
        bail!(
            "unknown layer `{}`; options: {}",
            args.layer,
            GRADCAM_LAYERS.join(", ")
        );
    }
    let cfg = super::load_config(&args.config)?;
    let dataset = load_manifest(&args.data)?;
    let trainer = Trainer::from_checkpoint(cfg, &args.checkpoint)?;

    let si = match &args.subject {
        Some(id) => dataset
            .subjects
            .iter()
            .position(|s| &s.id == id)
            .with_context(|| format!("subject `{id}` not found"))?,
        None => 0,
    };
    let subject = dataset
        .subjects
        .get(si)
        .context("dataset has no subjects")?;
    let slice_idx = args.slice.unwrap_or(subject.slices.len() / 2);
    let record = subject
        .slices
        .get(slice_idx)
        .with_context(|| format!("subject `{}` has no slice {slice_idx}", subject.id))?;

    let (images, _) = assemble_batch(
        &dataset,
        &[(si, slice_idx)],
        &BatchOptions::plain(trainer.dtype()),
        trainer.device(),
    )?;
    let t_class = trainer.text_class_features(dataset.modality)?;

    let classes: Vec<usize> = match args.class {
        Some(c) => {
            if c >= dataset.num_classes {
                bail!(
                    "class {c} out of range; dataset has {} classes",
                    dataset.num_classes
                );
            }
            vec![c]
        }
        None => (1..dataset.num_classes).collect(),
    };

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory `{}`", args.out.display()))?;
    for c in classes {
        let map = gradcam_map(&trainer.net, &images.values, &t_class, c, &args.layer)?;
        let heat = map.narrow(0, 0, 1)?.flatten_all()?.to_vec1::<f32>()?;
        let name = format!(
            "cam_{}_s{:03}_{}_class{}.png",
            subject.id, slice_idx, args.layer, c
        );
        let path = args.out.join(name);
        overlay_png(
            &record.image,
            &heat,
            dataset.height,
            dataset.width,
            &path,
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Grayscale base from a [-1, 1] slice with a warm tint scaled by heatmap
/// activation in [0, 1].
fn overlay_png(
    image: &[f32],
    heat: &[f32],
    h: usize,
    w: usize,
    path: &Path,
) -> anyhow::Result<()> {
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let base = ((image[y * w + x] + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0;
            let a = heat[y * w + x].clamp(0.0, 1.0);
            let r = base + (255.0 - base) * a;
            let g = base * (1.0 - 0.5 * a as f32);
            let b = base * (1.0 - a);
            img.put_pixel(x as u32, y as u32, Rgb([r as u8, g as u8, b as u8]));
        }
    }
    img.save_with_format(path, ImageFormat::Png)
        .with_context(|| format!("writing `{}`", path.display()))?;
    Ok(())
}
