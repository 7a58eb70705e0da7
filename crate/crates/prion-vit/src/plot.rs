//! Prediction scatter artifacts: a CSV of (target, prediction) pairs and a
//! dependency-free SVG with a y = x reference line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 70.0;

fn check_lengths(targets: &[f64], predictions: &[f64]) -> Result<()> {
    if targets.len() != predictions.len() {
        return Err(Error::ShapeMismatch {
            op: "scatter",
            lhs: vec![targets.len()],
            rhs: vec![predictions.len()],
        });
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset("scatter needs at least one pair".into()));
    }
    Ok(())
}

pub fn write_scatter_csv(path: &Path, targets: &[f64], predictions: &[f64]) -> Result<()> {
    check_lengths(targets, predictions)?;
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Other(format!("open {}: {e}", path.display())))?;
    w.write_record(["target_c", "prediction_c"])
        .map_err(|e| Error::Other(format!("write {}: {e}", path.display())))?;
    for (t, p) in targets.iter().zip(predictions) {
        w.write_record([t.to_string(), p.to_string()])
            .map_err(|e| Error::Other(format!("write {}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("flush {}", path.display()), e))
}

pub fn read_scatter_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Other(format!("open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Other(format!("read {}: {e}", path.display())))?;
    if headers.iter().collect::<Vec<_>>() != ["target_c", "prediction_c"] {
        return Err(Error::Manifest(format!(
            "{}: expected header target_c,prediction_c",
            path.display()
        )));
    }
    let mut targets = Vec::new();
    let mut predictions = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Other(format!("read {}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Manifest(format!("{}: bad row {record:?}", path.display())))
        };
        targets.push(parse(0)?);
        predictions.push(parse(1)?);
    }
    Ok((targets, predictions))
}

/// Render the scatter as a self-contained SVG document.
pub fn scatter_svg(targets: &[f64], predictions: &[f64]) -> Result<String> {
    check_lengths(targets, predictions)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in targets.iter().chain(predictions) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite {
            what: "scatter input",
            name: "scatter_svg".into(),
        });
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.03 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let scale = (SIZE - 2.0 * MARGIN) / (hi - lo);
    let to_x = |v: f64| MARGIN + (v - lo) * scale;
    let to_y = |v: f64| SIZE - MARGIN - (v - lo) * scale;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SIZE} {SIZE}\" \
         width=\"{SIZE}\" height=\"{SIZE}\">\n\
         <rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    );

    let ticks = 5usize;
    for i in 0..=ticks {
        let v = lo + (hi - lo) * i as f64 / ticks as f64;
        let x = to_x(v);
        let y = to_y(v);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
             fill=\"#444\">{v:.1}</text>\n\
             <text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"12\" text-anchor=\"end\" \
             fill=\"#444\">{v:.1}</text>\n",
            MARGIN,
            SIZE - MARGIN,
            MARGIN,
            SIZE - MARGIN,
            SIZE - MARGIN + 18.0,
            MARGIN - 8.0,
        );
    }

    let _ = write!(
        svg,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{0}\" height=\"{0}\" fill=\"none\" \
         stroke=\"#333\"/>\n\
         <line x1=\"{1:.1}\" y1=\"{2:.1}\" x2=\"{3:.1}\" y2=\"{4:.1}\" stroke=\"#c33\" \
         stroke-dasharray=\"6 4\"/>\n\
         <text x=\"{5:.1}\" y=\"{6:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         fill=\"#111\">target (&#176;C)</text>\n\
         <text x=\"{7:.1}\" y=\"{8:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         fill=\"#111\" transform=\"rotate(-90 {7:.1} {8:.1})\">prediction (&#176;C)</text>\n",
        SIZE - 2.0 * MARGIN,
        to_x(lo),
        to_y(lo),
        to_x(hi),
        to_y(hi),
        SIZE / 2.0,
        SIZE - 18.0,
        20.0,
        SIZE / 2.0,
    );

    for (t, p) in targets.iter().zip(predictions) {
        let _ = write!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#3572b0\" fill-opacity=\"0.6\"/>\n",
            to_x(*t),
            to_y(*p)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Write `scatter.csv` and `scatter.svg` into `out_dir`.
pub fn emit_scatter(out_dir: &Path, targets: &[f64], predictions: &[f64]) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("create {}", out_dir.display()), e))?;
    write_scatter_csv(&out_dir.join("scatter.csv"), targets, predictions)?;
    let svg = scatter_svg(targets, predictions)?;
    std::fs::write(out_dir.join("scatter.svg"), svg)
        .map_err(|e| Error::io(format!("write {}", out_dir.join("scatter.svg").display()), e))
}
