use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use segforge_core::metrics::{evaluate, iou_histogram, roc_auc};
use segforge_core::Slice2D;

use super::{CompareArgs, EvaluateArgs};
use crate::config::RunConfig;
use crate::io::{csv, load_masks, plane_stems, read_volume, sibling, write_atomic, PROB_SUFFIX};
use crate::render::unit_curve;
use crate::report::{compare, parse_report, report_text};

pub const IOU_BINS: usize = 10;

fn load_probs(dir: &Path) -> Result<HashMap<String, Slice2D>> {
    let mut out = HashMap::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(PROB_SUFFIX) {
            let v = read_volume(&dir.join(&name))?;
            for (z, s) in plane_stems(stem, v.dims().2).into_iter().enumerate() {
                out.insert(s, v.extract_slice(z)?);
            }
        }
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs, _cfg: &RunConfig) -> Result<()> {
    let truths = load_masks(&args.truth_dir)?;
    if truths.is_empty() {
        bail!("no masks in {}", args.truth_dir.display());
    }
    let mut preds: HashMap<String, _> = load_masks(&args.pred_dir)?.into_iter().collect();
    let mut probs = load_probs(&args.pred_dir)?;
    let (mut p, mut q, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for (stem, truth) in &truths {
        let pred = preds.remove(stem).with_context(|| format!("no prediction for {stem}"))?;
        // binary predictions double as scores when no probability map exists
        q.push(probs.remove(stem).unwrap_or_else(|| pred.to_slice()));
        p.push(pred);
        t.push(truth.clone());
    }
    if let Some(extra) = preds.keys().min() {
        bail!("prediction {extra} has no ground truth");
    }
    let r = evaluate(&p, &q, &t)?;
    write_atomic(&args.out, report_text(&r).as_bytes())?;

    let c = &r.classes.confusion;
    let confusion = csv(
        "actual,predicted_background,predicted_foreground",
        [format!("background,{},{}", c.tn, c.fp), format!("foreground,{},{}", c.fn_, c.tp)],
    );
    write_atomic(&sibling(&args.out, "confusion.csv"), confusion.as_bytes())?;

    let per_slice = truths.iter().zip(r.per_slice_dice.iter().zip(&r.per_slice_iou)).map(|((s, _), (d, i))| format!("{s},{d},{i}"));
    write_atomic(&sibling(&args.out, "per_slice.csv"), csv("stem,dice,iou", per_slice).as_bytes())?;

    let hist = iou_histogram(&r.per_slice_iou, IOU_BINS)?;
    let rows = hist.iter().enumerate().map(|(i, n)| format!("{},{},{n}", i as f64 / IOU_BINS as f64, (i + 1) as f64 / IOU_BINS as f64));
    write_atomic(&sibling(&args.out, "iou_hist.csv"), csv("bin_lo,bin_hi,count", rows).as_bytes())?;

    let roc = match roc_auc(&q, &t) {
        Ok(c) => c.points,
        Err(_) => Vec::new(),
    };
    let rows = roc.iter().map(|(f, t)| format!("{f},{t}"));
    write_atomic(&sibling(&args.out, "roc.csv"), csv("fpr,tpr", rows).as_bytes())?;
    write_atomic(&sibling(&args.out, "roc.ppm"), &unit_curve(&roc, 256).ppm())?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn cmd_compare(args: &CompareArgs, _cfg: &RunConfig) -> Result<()> {
    let read = |p: &Path| -> Result<_> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        parse_report(&text).with_context(|| format!("parsing {}", p.display()))
    };
    let rows = compare(&read(&args.report_a)?, &read(&args.report_b)?)?;
    let lines = rows.iter().map(|c| format!("{},{},{},{}", c.metric, cell(c.a), cell(c.b), cell(c.delta)));
    write_atomic(&args.out, csv("metric,a,b,delta", lines).as_bytes())?;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("{:<22} {:>12} {:>12} {:>12}", "metric", "a", "b", "b-a");
    for c in &rows {
        println!("{:<22} {:>12} {:>12} {:>12}", c.metric, show(c.a), show(c.b), show(c.delta));
    }
    Ok(())
}
