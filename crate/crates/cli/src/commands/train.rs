use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use segforge_core::autodiff::{Shape, Tensor};
use segforge_core::model::{build_unet, Model};
use segforge_core::postprocess::{label_components, postprocess_pipeline};
use segforge_core::preprocess::{prepare_image, resize_bilinear};
use segforge_core::trainer::{load_checkpoint, run_epoch, save_checkpoint, split_dataset, PreparedSet, TrainState};
use segforge_core::{Slice2D, SlicePair};

use super::{PredictArgs, TrainArgs};
use crate::config::RunConfig;
use crate::io::{csv, create_dir, load_pairs, load_slices, mask_volume, sibling, write_atomic, write_slice, write_volume, MANIFEST, MASK_SUFFIX, PROB_SUFFIX};
use crate::render::{line_chart, pgm16, pgm_mask, BLUE, GREEN, RED};

/// Configuration entries stored in a checkpoint, prefixed `run.`.
pub fn run_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.entries().into_iter().map(|(k, v)| (format!("run.{k}"), v)).collect()
}

fn check_sizes(pairs: &[(String, SlicePair)], (w, h): (usize, usize)) -> Result<()> {
    for (stem, p) in pairs {
        if p.image.dims() != (w, h) {
            let (pw, ph) = p.image.dims();
            bail!("{stem} is {pw}x{ph} but the model expects {w}x{h}; run preprocess first");
        }
    }
    Ok(())
}

fn persist(state: &TrainState, meta: &[(String, String)], out: &Path) -> Result<()> {
    write_atomic(out, &save_checkpoint(state, meta))?;
    let h = &state.history;
    write_atomic(&sibling(out, "history.csv"), h.to_csv().as_bytes())?;
    let col = |f: fn(&segforge_core::trainer::EpochRecord) -> f64| h.records.iter().map(f).collect::<Vec<_>>();
    let (tl, vl) = (col(|r| r.train_loss), col(|r| r.val_loss));
    write_atomic(&sibling(out, "loss.ppm"), &line_chart(&[(&tl, BLUE), (&vl, RED)], 480, 300).ppm())?;
    let (acc, dice) = (col(|r| r.val_accuracy), col(|r| r.val_dice));
    write_atomic(&sibling(out, "accuracy.ppm"), &line_chart(&[(&acc, GREEN), (&dice, BLUE)], 480, 300).ppm())?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let tcfg = cfg.train_config();
    let mcfg = cfg.model_config();
    let pairs = load_pairs(&args.data_dir)?;
    if pairs.is_empty() {
        bail!("no training slices in {}", args.data_dir.display());
    }
    check_sizes(&pairs, cfg.slice_size)?;
    let (train, val) = match &args.val_dir {
        Some(dir) => {
            let val = load_pairs(dir)?;
            if val.is_empty() {
                bail!("no validation slices in {}", dir.display());
            }
            check_sizes(&val, cfg.slice_size)?;
            (pairs, val)
        }
        None => {
            let (train, val, test) = split_dataset(&pairs, tcfg.val_fraction, cfg.test_fraction, cfg.seed)?;
            let part = |set: &[(String, SlicePair)], name: &'static str| set.iter().map(move |(s, _)| format!("{s},{name}")).collect::<Vec<_>>();
            let rows = [part(&train, "train"), part(&val, "val"), part(&test, "test")].concat();
            write_atomic(&sibling(&args.out, "split.csv"), csv("stem,part", rows).as_bytes())?;
            (train, val)
        }
    };
    if train.is_empty() || val.is_empty() {
        bail!("split left an empty training or validation part ({} slices in total)", train.len() + val.len());
    }
    let meta = run_meta(cfg);
    let mut state = match &args.resume {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let ck = load_checkpoint(&bytes).with_context(|| format!("loading {}", p.display()))?;
            if let Some((k, v)) = meta.iter().find(|e| !ck.meta.contains(e)) {
                bail!("checkpoint was written with a different configuration (`{}` is now `{v}`)", k.trim_start_matches("run."));
            }
            ck.state
        }
        None => TrainState::new(build_unet(&mcfg)?),
    };
    let strip = |v: Vec<(String, SlicePair)>| v.into_iter().map(|(_, p)| p).collect::<Vec<_>>();
    let sdm = tcfg.loss.needs_distance_map();
    let tset = PreparedSet::new(&strip(train), sdm)?;
    let vset = PreparedSet::new(&strip(val), sdm)?;
    let mut ran = 0;
    while !state.is_finished(&tcfg) && args.stop_after.is_none_or(|b| ran < b) {
        let r = run_epoch(&mut state, &tset, &vset, &tcfg)?;
        ran += 1;
        eprintln!(
            "epoch {:>3}  loss {:.4}  val_loss {:.4}  val_dice {:.4}  val_acc {:.4}  lr {:.3e}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_accuracy, r.lr
        );
        persist(&state, &meta, &args.out)?;
    }
    if ran == 0 {
        persist(&state, &meta, &args.out)?;
    }
    Ok(())
}

/// Probability map at model resolution for one slice.
pub fn predict_slice(model: &Model, image: &Slice2D) -> Result<Slice2D> {
    let (h, w) = model.config().input_size;
    let x = prepare_image(image, (w, h));
    let t = Tensor::new(Shape::new(1, 1, h, w), x.into_pixels())?;
    let p = model.forward(&t)?;
    Ok(Slice2D::new(w, h, p.data().to_vec())?)
}

pub fn cmd_predict(args: &PredictArgs, cfg: &RunConfig) -> Result<()> {
    let bytes = fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let ck = load_checkpoint(&bytes).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = ck.state.best_model();
    let slices = load_slices(&args.input)?;
    if slices.is_empty() {
        bail!("no images in {}", args.input.display());
    }
    let post = cfg.postprocess;
    let done: Vec<_> = slices
        .par_iter()
        .map(|s| -> Result<_> {
            let p = predict_slice(&model, &s.image)?;
            let (w, h) = s.image.dims();
            let mask = postprocess_pipeline(&p, (w, h), &post)?;
            let prob = if p.dims() == (w, h) { p } else { resize_bilinear(&p, w, h) };
            Ok((prob, mask))
        })
        .collect::<Result<_>>()?;
    create_dir(&args.out_dir)?;
    let mut rows = Vec::new();
    for (s, (prob, mask)) in slices.iter().zip(&done) {
        let d = &args.out_dir;
        write_slice(&d.join(format!("{}{PROB_SUFFIX}", s.stem)), prob, s.spacing)?;
        write_volume(&d.join(format!("{}{MASK_SUFFIX}", s.stem)), &mask_volume(mask, s.spacing)?)?;
        write_atomic(&d.join(format!("{}_prob.pgm", s.stem)), &pgm16(prob))?;
        write_atomic(&d.join(format!("{}_mask.pgm", s.stem)), &pgm_mask(mask))?;
        let (_, areas) = label_components(mask);
        rows.push(format!("{},{},{}", s.stem, mask.count(), areas.len()));
    }
    write_atomic(&args.out_dir.join(MANIFEST), csv("stem,foreground_px,components", rows).as_bytes())
}
