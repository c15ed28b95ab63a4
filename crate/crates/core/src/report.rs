//! Multi-seed aggregation: summaries, gains, Welch tests, tuning curves and
//! result tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tuner::TuningTrace;

/// Significance level used by every comparison table.
pub const ALPHA: f64 = 0.1;

/// Relative improvement of `method_mean` over `baseline_mean` in percent,
/// rounded to 4 decimals.
pub fn gain_percent(baseline_mean: f64, method_mean: f64) -> Result<f64> {
    if !(baseline_mean > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gain needs a positive baseline, got {baseline_mean}"
        )));
    }
    let g = 100.0 * (baseline_mean - method_mean) / baseline_mean;
    Ok((g * 1e4).round() / 1e4)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sample_variance(xs).sqrt()
}

/// Two-sided Welch t-test.
pub fn welch_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "Welch test needs at least two samples per group".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Welch test samples".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(WelchResult {
            t,
            df: na + nb - 2.0,
            p,
            significant: p < alpha,
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult {
        t,
        df,
        p,
        significant: p < alpha,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset_id: String,
    pub method: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl RunSummary {
    pub fn from_scores(dataset_id: &str, method: &str, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty(format!("no scores for {dataset_id}/{method}")));
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            method: method.into(),
            mean: mean(&scores),
            std: sample_std(&scores),
            scores,
        })
    }
}

/// Final incumbent scores of runs sharing one dataset and method. Runs whose
/// evaluations all failed are skipped.
pub fn summarize(traces: &[TuningTrace]) -> Result<RunSummary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Empty("no traces to summarize".into()))?;
    for t in traces {
        if t.method != first.method || t.dataset_id != first.dataset_id {
            return Err(Error::InvalidArgument(format!(
                "mixed runs in one summary: {}/{} and {}/{}",
                first.dataset_id, first.method, t.dataset_id, t.method
            )));
        }
    }
    let scores: Vec<f64> = traces
        .iter()
        .filter_map(|t| {
            let s = t.final_incumbent();
            if s.is_none() {
                log::warn!(
                    "{}/{} seed {} has no successful evaluation",
                    t.dataset_id,
                    t.method,
                    t.seed
                );
            }
            s
        })
        .collect();
    RunSummary::from_scores(&first.dataset_id, &first.method, scores)
}

/// One comparison row: a method against the pure-BO baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_id: String,
    pub baseline: RunSummary,
    pub method: RunSummary,
    pub gain: f64,
    /// `None` when either side has fewer than two runs.
    pub welch: Option<WelchResult>,
}

pub fn compare(baseline: &RunSummary, method: &RunSummary) -> Result<Comparison> {
    Ok(Comparison {
        dataset_id: baseline.dataset_id.clone(),
        gain: gain_percent(baseline.mean, method.mean)?,
        welch: welch_t_test(&baseline.scores, &method.scores, ALPHA).ok(),
        baseline: baseline.clone(),
        method: method.clone(),
    })
}

fn star(c: &Comparison) -> &'static str {
    if c.welch.map_or(false, |w| w.significant) {
        "*"
    } else {
        ""
    }
}

fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out += &(widths
        .iter()
        .map(|w| "-".repeat(*w))
        .collect::<Vec<_>>()
        .join("  ")
        + "\n");
    for r in rows {
        out += &line(r);
    }
    out
}

fn comparison_cells(c: &Comparison) -> Vec<String> {
    vec![
        c.dataset_id.clone(),
        format!("{:.4}", c.baseline.mean),
        format!("{:.4}", c.baseline.std),
        format!("{:.4}", c.method.mean),
        format!("{:.4}", c.method.std),
        format!("{:.4}{}", c.gain, star(c)),
        c.welch.map_or("-".into(), |w| format!("{:.4}", w.p)),
    ]
}

fn comparison_header(method: &str) -> Vec<String> {
    ["dataset", "bo_mean", "bo_std"]
        .iter()
        .map(|s| s.to_string())
        .chain([
            format!("{method}_mean"),
            format!("{method}_std"),
            "gain_pct".into(),
            "p".into(),
        ])
        .collect()
}

/// Human-readable table with one row per dataset; `*` marks p < 0.1.
pub fn format_comparison_table(rows: &[Comparison]) -> String {
    let method = rows
        .first()
        .map_or("portfolio".to_string(), |r| r.method.method.clone());
    let cells: Vec<Vec<String>> = rows.iter().map(comparison_cells).collect();
    aligned(&comparison_header(&method), &cells)
}

pub fn format_comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from(
        "dataset,baseline,method,bo_mean,bo_std,method_mean,method_std,gain_pct,t,p,significant\n",
    );
    for c in rows {
        let (t, p, sig) = c.welch.map_or((String::new(), String::new(), false), |w| {
            (w.t.to_string(), w.p.to_string(), w.significant)
        });
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.dataset_id,
            c.baseline.method,
            c.method.method,
            c.baseline.mean,
            c.baseline.std,
            c.method.mean,
            c.method.std,
            c.gain,
            t,
            p,
            sig
        );
    }
    out
}

/// Mean control score of models tuned one way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub label: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Gain against the first row; `None` for the first row itself.
    pub gain: Option<f64>,
    pub p: Option<f64>,
}

/// Rows ordered as given; the first row is the baseline.
pub fn control_rows(groups: &[(String, Vec<f64>)]) -> Result<Vec<ControlRow>> {
    let base = groups
        .first()
        .ok_or_else(|| Error::Empty("no control results".into()))?;
    let base_mean = mean(&base.1);
    groups
        .iter()
        .enumerate()
        .map(|(i, (label, scores))| {
            if scores.is_empty() {
                return Err(Error::Empty(format!("no control scores for {label}")));
            }
            let m = mean(scores);
            let (gain, p) = if i == 0 {
                (None, None)
            } else {
                (
                    gain_percent(base_mean, m).ok(),
                    welch_t_test(&base.1, scores, ALPHA).ok().map(|w| w.p),
                )
            };
            Ok(ControlRow {
                label: label.clone(),
                scores: scores.clone(),
                mean: m,
                std: sample_std(scores),
                gain,
                p,
            })
        })
        .collect()
}

pub fn format_control_table(rows: &[ControlRow]) -> String {
    let header: Vec<String> = ["method", "score_mean", "score_std", "gain_pct", "p"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.4}", r.mean),
                format!("{:.4}", r.std),
                r.gain.map_or("-".into(), |g| format!("{g:.4}")),
                r.p.map_or("-".into(), |p| format!("{p:.4}")),
            ]
        })
        .collect();
    aligned(&header, &cells)
}

pub fn format_control_csv(rows: &[ControlRow]) -> String {
    let mut out = String::from("method,score_mean,score_std,gain_pct,p\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.mean,
            r.std,
            r.gain.map_or(String::new(), |g| g.to_string()),
            r.p.map_or(String::new(), |p| p.to_string())
        );
    }
    out
}

/// Gains per dataset and portfolio size; the best size of each dataset is
/// marked with `<`.
pub fn format_size_table(sizes: &[usize], rows: &[(String, Vec<f64>)]) -> String {
    let header: Vec<String> = std::iter::once("dataset".to_string())
        .chain(sizes.iter().map(|p| format!("p={p}")))
        .collect();
    let cells: Vec<Vec<String>> =
        rows.iter()
            .map(|(id, gains)| {
                let best = gains
                    .iter()
                    .enumerate()
                    .fold(None, |acc: Option<(usize, f64)>, (i, g)| match acc {
                        Some((_, b)) if b >= *g => acc,
                        _ => Some((i, *g)),
                    })
                    .map(|(i, _)| i);
                std::iter::once(id.clone())
                    .chain(
                        gains.iter().enumerate().map(|(i, g)| {
                            format!("{g:.4}{}", if Some(i) == best { "<" } else { " " })
                        }),
                    )
                    .collect()
            })
            .collect();
    aligned(&header, &cells)
}

/// Incumbent curves of several seeds side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub seeds: Vec<u64>,
    /// `iterations x seeds`.
    pub per_seed: Vec<Vec<Option<f64>>>,
    pub median: Vec<Option<f64>>,
    /// The curve of the seed with the lowest final incumbent.
    pub best: Vec<Option<f64>>,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn curve_table(traces: &[TuningTrace]) -> Result<CurveTable> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces for curves".into()));
    }
    let len = traces.iter().map(|t| t.entries.len()).max().unwrap_or(0);
    let per_seed: Vec<Vec<Option<f64>>> = (1..=len)
        .map(|it| {
            traces
                .iter()
                .map(|t| t.incumbent_after(it.min(t.entries.len())))
                .collect()
        })
        .collect();
    let median_curve = per_seed
        .iter()
        .map(|row| median(&row.iter().flatten().copied().collect::<Vec<_>>()))
        .collect();
    let best_seed = traces
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.final_incumbent().map(|s| (i, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    let best = per_seed
        .iter()
        .map(|row| best_seed.and_then(|i| row[i]))
        .collect();
    Ok(CurveTable {
        seeds: traces.iter().map(|t| t.seed).collect(),
        per_seed,
        median: median_curve,
        best,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn curves_csv(table: &CurveTable) -> String {
    let mut out = String::from("iteration");
    for s in &table.seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out += ",median,best\n";
    for (i, row) in table.per_seed.iter().enumerate() {
        let _ = write!(out, "{}", i + 1);
        for v in row {
            let _ = write!(out, ",{}", cell(*v));
        }
        let _ = writeln!(out, ",{},{}", cell(table.median[i]), cell(table.best[i]));
    }
    out
}

/// Writes the curve CSV to `path`.
pub fn export_curves(traces: &[TuningTrace], path: &Path) -> Result<CurveTable> {
    let table = curve_table(traces)?;
    std::fs::write(path, curves_csv(&table))?;
    Ok(table)
}

/// Static SVG of the curves: every seed in grey, median in blue, best run in
/// red.
pub fn curves_svg(title: &str, table: &CurveTable) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let values: Vec<f64> = table.per_seed.iter().flatten().flatten().copied().collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo.min(0.0), lo.max(0.0) + 1.0)
    };
    let n = table.per_seed.len().max(2) as f64;
    let px = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1.0);
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let path = |series: &mut dyn Iterator<Item = Option<f64>>| {
        let mut d = String::new();
        for (i, v) in series.enumerate() {
            if let Some(v) = v {
                let _ = write!(
                    d,
                    "{}{:.2},{:.2} ",
                    if d.is_empty() { "M" } else { "L" },
                    px(i),
                    py(v)
                );
            }
        }
        d
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">iteration</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 15.0,
        PAD - 5.0,
        H - PAD,
        lo,
        PAD - 5.0,
        PAD + 4.0,
        hi,
    );
    for s in 0..table.seeds.len() {
        let d = path(&mut table.per_seed.iter().map(|row| row[s]));
        let _ = writeln!(
            svg,
            "<path d=\"{d}\" fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"1\"/>"
        );
    }
    let d = path(&mut table.median.iter().copied());
    let _ = writeln!(
        svg,
        "<path d=\"{d}\" fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2.5\"/>"
    );
    let d = path(&mut table.best.iter().copied());
    let _ = writeln!(svg, "<path d=\"{d}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"/>");
    svg += "</svg>\n";
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
