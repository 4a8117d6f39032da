use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use segforge_core::augment::{augmented_copy, fit_to_size};
use segforge_core::phantom::generate_phantom;
use segforge_core::preprocess::{hu_histogram, prepare_image, resize_nearest_mask};
use segforge_core::SlicePair;

use super::{AugmentArgs, HistogramArgs, PhantomArgs, PreprocessArgs};
use crate::config::RunConfig;
use crate::io::{self, csv, create_dir, load_slices, mask_volume, write_atomic, write_slice, write_volume, IMAGE_SUFFIX, MANIFEST, MASK_SUFFIX};
use crate::render::bar_chart;

pub fn cmd_phantom(args: &PhantomArgs, cfg: &RunConfig) -> Result<()> {
    create_dir(&args.out_dir)?;
    let volumes: Vec<_> = (0..args.count as u64)
        .into_par_iter()
        .map(|i| {
            let pc = cfg.phantom_config(i);
            generate_phantom(&pc).map(|v| (pc.seed, v))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (i, (seed, (image, mask))) in volumes.iter().enumerate() {
        let stem = format!("phantom_{i:03}");
        write_volume(&args.out_dir.join(format!("{stem}{IMAGE_SUFFIX}")), image)?;
        write_volume(&args.out_dir.join(format!("{stem}{MASK_SUFFIX}")), mask)?;
        rows.push(format!("{stem},{stem}{IMAGE_SUFFIX},{stem}{MASK_SUFFIX},{seed}"));
    }
    write_atomic(&args.out_dir.join(MANIFEST), csv("stem,image,mask,seed", rows).as_bytes())
}

pub fn cmd_histogram(args: &HistogramArgs, _cfg: &RunConfig) -> Result<()> {
    let v = io::read_volume(&args.input)?;
    let h = hu_histogram(&v, args.lo, args.hi, args.bin_width)?;
    let rows = h.counts.iter().enumerate().map(|(i, n)| {
        let (lo, hi) = h.edges(i);
        format!("{lo},{hi},{n}")
    });
    write_atomic(&args.out, csv("bin_lo,bin_hi,count", rows).as_bytes())?;
    if let Some(img) = &args.image {
        write_atomic(img, &bar_chart(&h.counts, 2, 200).pgm())?;
    }
    let outside = v.voxels().len() as u64 - h.total();
    if outside > 0 {
        eprintln!("{outside} voxels fell outside [{}, {})", args.lo, args.hi);
    }
    Ok(())
}

pub fn cmd_preprocess(args: &PreprocessArgs, cfg: &RunConfig) -> Result<()> {
    let slices = load_slices(&args.in_dir)?;
    if slices.is_empty() {
        bail!("no *{IMAGE_SUFFIX} files in {}", args.in_dir.display());
    }
    create_dir(&args.out_dir)?;
    let (ow, oh) = cfg.slice_size;
    let done: Vec<_> = slices
        .par_iter()
        .map(|s| {
            let (w, h) = s.image.dims();
            let spacing = (s.spacing.0 * w as f32 / ow as f32, s.spacing.1 * h as f32 / oh as f32, s.spacing.2);
            (prepare_image(&s.image, (ow, oh)), s.mask.as_ref().map(|m| resize_nearest_mask(m, ow, oh)), spacing)
        })
        .collect();
    let mut rows = Vec::new();
    for (s, (img, mask, spacing)) in slices.iter().zip(&done) {
        write_slice(&args.out_dir.join(format!("{}{IMAGE_SUFFIX}", s.stem)), img, *spacing)?;
        let mask_name = match mask {
            Some(m) => {
                let name = format!("{}{MASK_SUFFIX}", s.stem);
                write_volume(&args.out_dir.join(&name), &mask_volume(m, *spacing)?)?;
                name
            }
            None => String::new(),
        };
        rows.push(format!("{},{}{IMAGE_SUFFIX},{mask_name}", s.stem, s.stem));
    }
    write_atomic(&args.out_dir.join(MANIFEST), csv("stem,image,mask", rows).as_bytes())
}

pub fn cmd_augment(args: &AugmentArgs, cfg: &RunConfig) -> Result<()> {
    let slices = load_slices(&args.in_dir)?;
    if slices.is_empty() {
        bail!("no *{IMAGE_SUFFIX} files in {}", args.in_dir.display());
    }
    let n = slices.len();
    if args.target_count < n {
        bail!("--target-count {} is below the {n} input pairs", args.target_count);
    }
    let acfg = cfg.augment_config();
    acfg.validate()?;
    let fitted: Vec<SlicePair> = slices
        .iter()
        .map(|s| {
            let m = s.mask.clone().with_context(|| format!("{}: no mask file next to the image", s.stem))?;
            Ok(fit_to_size(&SlicePair::new(s.image.clone(), m), acfg.output_size))
        })
        .collect::<Result<_>>()?;
    let copies: Vec<SlicePair> = (0..args.target_count - n)
        .into_par_iter()
        .map(|k| augmented_copy(&fitted, &acfg, k))
        .collect::<Result<_, _>>()?;
    create_dir(&args.out_dir)?;
    let mut rows = Vec::new();
    let mut emit = |stem: &str, p: &SlicePair, src: &io::NamedSlice| -> Result<()> {
        let (w, h) = src.image.dims();
        let (ow, oh) = p.image.dims();
        let spacing = (src.spacing.0 * w as f32 / ow as f32, src.spacing.1 * h as f32 / oh as f32, src.spacing.2);
        write_slice(&args.out_dir.join(format!("{stem}{IMAGE_SUFFIX}")), &p.image, spacing)?;
        write_volume(&args.out_dir.join(format!("{stem}{MASK_SUFFIX}")), &mask_volume(&p.mask, spacing)?)?;
        rows.push(format!("{stem},{}", src.stem));
        Ok(())
    };
    for (s, p) in slices.iter().zip(&fitted) {
        emit(&s.stem, p, s)?;
    }
    for (k, p) in copies.iter().enumerate() {
        let stem = format!("aug_{k:05}");
        if slices.iter().any(|s| s.stem == stem) {
            bail!("input slice {stem} collides with an augmented copy name");
        }
        emit(&stem, p, &slices[k % n])?;
    }
    write_atomic(&args.out_dir.join(MANIFEST), csv("stem,source", rows).as_bytes())
}
