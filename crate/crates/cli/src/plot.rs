//! Truth-vs-prediction comparison plots as standalone SVG documents.
//!
//! Two tracks over the segment-index axis, truth above prediction; every
//! segment labeled 1 draws one vertical tick on its track.

use std::path::Path;

use diarize_core::labels::LabelVector;

use crate::CliError;

const TRACK_HEIGHT: f64 = 40.0;
const MARGIN: f64 = 70.0;

/// Render the comparison, optionally restricted to segment indices
/// [from, to).
pub fn render_comparison(
    truth: &LabelVector,
    pred: &LabelVector,
    out: &Path,
    window: Option<(usize, usize)>,
) -> Result<(), CliError> {
    if truth.len() != pred.len() {
        return Err(CliError::Data(format!(
            "truth has {} segments but prediction has {}",
            truth.len(),
            pred.len()
        )));
    }
    let (from, to) = match window {
        Some((f, t)) => (f.min(truth.len()), t.min(truth.len())),
        None => (0, truth.len()),
    };
    if from > to {
        return Err(CliError::Usage(format!(
            "empty plot window: from {from} after to {to}"
        )));
    }
    let span = (to - from).max(1);
    let step = (1100.0 / span as f64).clamp(0.05, 24.0);
    let width = MARGIN * 2.0 + span as f64 * step;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"200\" \
         viewBox=\"0 0 {width:.0} 200\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (row, (vector, name, color)) in [
        (truth, "truth", "#1f6f43"),
        (pred, "prediction", "#28418f"),
    ]
    .iter()
    .enumerate()
    {
        let top = 30.0 + row as f64 * (TRACK_HEIGHT + 40.0);
        svg.push_str(&format!(
            "<text x=\"8\" y=\"{:.1}\" font-size=\"13\" font-family=\"sans-serif\">{name}</text>\n",
            top + TRACK_HEIGHT / 2.0 + 4.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999\" stroke-width=\"1\"/>\n",
            top + TRACK_HEIGHT,
            width - MARGIN,
            top + TRACK_HEIGHT
        ));
        for (i, &c) in vector.classes[from..to].iter().enumerate() {
            if c == 1 {
                let x = MARGIN + i as f64 * step;
                svg.push_str(&format!(
                    "<line x1=\"{x:.2}\" y1=\"{top:.1}\" x2=\"{x:.2}\" y2=\"{:.1}\" \
                     stroke=\"{color}\" stroke-width=\"1\"/>\n",
                    top + TRACK_HEIGHT
                ));
            }
        }
    }
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"190\" font-size=\"12\" font-family=\"sans-serif\">segment {from}</text>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"190\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"end\">segment {to}</text>\n",
        width - MARGIN
    ));
    svg.push_str("</svg>\n");

    std::fs::write(out, svg)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))
}
