//! `key=value` text form of an evaluation report.

use anyhow::{bail, Context, Result};
use segforge_core::metrics::{ClassStats, EvalReport};

/// Placeholder for metrics that are undefined on the evaluated set.
pub const NONE: &str = "none";

fn opt(v: Option<f64>) -> String {
    v.map_or(NONE.to_string(), |x| x.to_string())
}

/// Every scalar field of `r`, in a fixed order.
pub fn report_entries(r: &EvalReport) -> Vec<(String, String)> {
    let c = &r.classes.confusion;
    let mut e: Vec<(String, String)> = vec![
        ("slices".into(), r.per_slice_dice.len().to_string()),
        ("dice".into(), r.dice.to_string()),
        ("iou".into(), r.iou.to_string()),
        ("mean_iou".into(), r.mean_iou.to_string()),
        ("binary_accuracy".into(), r.binary_accuracy.to_string()),
        ("mean_slice_dice".into(), r.mean_slice_dice.to_string()),
        ("mean_slice_iou".into(), r.mean_slice_iou.to_string()),
        ("assd".into(), opt(r.assd)),
        ("hausdorff".into(), opt(r.hausdorff)),
        ("distance_slices".into(), r.distance_slices.to_string()),
        ("auc".into(), opt(r.auc)),
        ("tp".into(), c.tp.to_string()),
        ("fp".into(), c.fp.to_string()),
        ("fn".into(), c.fn_.to_string()),
        ("tn".into(), c.tn.to_string()),
    ];
    let mut class = |name: &str, s: &ClassStats| {
        e.push((format!("{name}.precision"), s.precision.to_string()));
        e.push((format!("{name}.recall"), s.recall.to_string()));
        e.push((format!("{name}.f1"), s.f1.to_string()));
        e.push((format!("{name}.support"), s.support.to_string()));
    };
    class("background", &r.classes.background);
    class("foreground", &r.classes.foreground);
    e
}

pub fn report_text(r: &EvalReport) -> String {
    report_entries(r).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parse report text into `(key, value)` with `None` for undefined values.
pub fn parse_report(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').with_context(|| format!("report line {} is not key=value", i + 1))?;
        let v = v.trim();
        let val = if v == NONE { None } else { Some(v.parse::<f64>().with_context(|| format!("report value `{v}` for `{k}`"))?) };
        if out.iter().any(|(seen, _): &(String, _)| seen == k) {
            bail!("report key `{k}` repeated");
        }
        out.push((k.trim().to_string(), val));
    }
    Ok(out)
}

/// A compared metric: `delta = b − a` when both are defined.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

pub fn compare(a: &[(String, Option<f64>)], b: &[(String, Option<f64>)]) -> Result<Vec<Comparison>> {
    let keys = |r: &[(String, Option<f64>)]| r.iter().map(|(k, _)| k.clone()).collect::<Vec<_>>();
    if keys(a) != keys(b) {
        bail!("reports have different fields");
    }
    Ok(a.iter()
        .zip(b)
        .map(|((k, x), (_, y))| Comparison {
            metric: k.clone(),
            a: *x,
            b: *y,
            delta: x.zip(*y).map(|(x, y)| y - x),
        })
        .collect())
}
