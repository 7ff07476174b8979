//! SVG renderings of evaluation artifacts: per-fold ROC curves with the
//! mean ± 1.5σ band, and row-normalized 2×2 confusion matrices.
//!
//! Everything is emitted as self-contained SVG markup (no external renderer),
//! so the functions are deterministic string builders that the CLI writes to
//! disk verbatim.

use crate::error::Result;
use crate::metrics::{confusion_matrix_normalized, ConfusionCounts, MeanRoc, RocCurve};

// ROC canvas geometry (pixels).
const W: f64 = 480.0;
const H: f64 = 420.0;
const ML: f64 = 56.0; // left margin (y labels)
const MR: f64 = 20.0;
const MT: f64 = 40.0; // top margin (title)
const MB: f64 = 48.0; // bottom margin (x labels)

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Map FPR ∈ [0,1] to a canvas x coordinate.
fn map_x(fpr: f64) -> f64 {
    ML + fpr.clamp(0.0, 1.0) * (W - ML - MR)
}

/// Map TPR ∈ [0,1] to a canvas y coordinate (origin bottom-left).
fn map_y(tpr: f64) -> f64 {
    H - MB - tpr.clamp(0.0, 1.0) * (H - MT - MB)
}

fn polyline_points(points: impl Iterator<Item = (f64, f64)>) -> String {
    points
        .map(|(f, t)| format!("{:.2},{:.2}", map_x(f), map_y(t)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    out.push_str(&format!(
        "<rect x='{ML}' y='{MT}' width='{:.0}' height='{:.0}' fill='none' stroke='#333'/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x, y) = (map_x(v), map_y(v));
        out.push_str(&format!(
            "<line x1='{x:.1}' y1='{:.1}' x2='{x:.1}' y2='{:.1}' stroke='#333'/>\n",
            H - MB,
            H - MB + 4.0
        ));
        out.push_str(&format!(
            "<text x='{x:.1}' y='{:.1}' font-size='11' text-anchor='middle'>{v:.1}</text>\n",
            H - MB + 16.0
        ));
        out.push_str(&format!(
            "<line x1='{:.1}' y1='{y:.1}' x2='{ML}' y2='{y:.1}' stroke='#333'/>\n",
            ML - 4.0
        ));
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='11' text-anchor='end'>{v:.1}</text>\n",
            ML - 7.0,
            y + 4.0
        ));
    }
    out.push_str(&format!(
        "<text x='{:.1}' y='{:.1}' font-size='12' text-anchor='middle'>{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 10.0,
        esc(x_label)
    ));
    out.push_str(&format!(
        "<text x='14' y='{:.1}' font-size='12' text-anchor='middle' \
         transform='rotate(-90 14 {:.1})'>{}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        esc(y_label)
    ));
}

/// Render per-fold ROC curves plus an optional mean curve with its ±1.5σ band.
pub fn roc_svg(folds: &[RocCurve], mean: Option<&MeanRoc>, title: &str) -> Result<String> {
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns='http://www.w3.org/2000/svg' viewBox='0 0 {W:.0} {H:.0}' \
         font-family='sans-serif'>\n"
    ));
    out.push_str(&format!(
        "<text x='{:.1}' y='24' font-size='15' text-anchor='middle'>{}</text>\n",
        W / 2.0,
        esc(title)
    ));
    axes(&mut out, "False positive rate", "True positive rate");

    // Chance diagonal.
    out.push_str(&format!(
        "<line x1='{:.1}' y1='{:.1}' x2='{:.1}' y2='{:.1}' stroke='#999' \
         stroke-dasharray='5,4'/>\n",
        map_x(0.0),
        map_y(0.0),
        map_x(1.0),
        map_y(1.0)
    ));

    if let Some(m) = mean {
        // Band polygon: upper edge left-to-right, lower edge back.
        let mut pts: Vec<(f64, f64)> = m
            .fpr_grid
            .iter()
            .zip(&m.upper)
            .map(|(&f, &t)| (f, t))
            .collect();
        pts.extend(
            m.fpr_grid
                .iter()
                .zip(&m.lower)
                .rev()
                .map(|(&f, &t)| (f, t)),
        );
        out.push_str(&format!(
            "<polygon points='{}' fill='#4878b0' fill-opacity='0.18' stroke='none'/>\n",
            polyline_points(pts.into_iter())
        ));
    }

    for curve in folds {
        out.push_str(&format!(
            "<polyline points='{}' fill='none' stroke='#9db8d2' stroke-width='1'/>\n",
            polyline_points(curve.points.iter().copied())
        ));
    }

    if let Some(m) = mean {
        out.push_str(&format!(
            "<polyline points='{}' fill='none' stroke='#1f4e8c' stroke-width='2.2'/>\n",
            polyline_points(m.fpr_grid.iter().copied().zip(m.mean_tpr.iter().copied()))
        ));
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='12' text-anchor='end'>AUC = {:.3} &#177; {:.3}</text>\n",
            map_x(0.97),
            map_y(0.06),
            m.mean_auc,
            m.std_auc
        ));
    } else if folds.len() == 1 {
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='12' text-anchor='end'>AUC = {:.3}</text>\n",
            map_x(0.97),
            map_y(0.06),
            folds[0].auc
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

// Confusion-matrix canvas geometry.
const CW: f64 = 420.0;
const CH: f64 = 400.0;
const CL: f64 = 110.0; // left margin (true-class labels)
const CT: f64 = 80.0; // top margin (title + predicted labels)
const CELL: f64 = 130.0;

/// Blend white → dark blue by `v` ∈ [0,1].
fn cell_fill(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 26.0), lerp(255.0, 71.0), lerp(255.0, 134.0))
}

/// Render the row-normalized confusion matrix; cells show the normalized
/// share plus the raw count, and an empty true-class row reads "n/a".
pub fn confusion_svg(c: ConfusionCounts, title: &str) -> Result<String> {
    let (m, empty) = confusion_matrix_normalized(c);
    let raw = [[c.true_neg, c.false_pos], [c.false_neg, c.true_pos]];
    let classes = ["sMCI", "pMCI"];

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns='http://www.w3.org/2000/svg' viewBox='0 0 {CW:.0} {CH:.0}' \
         font-family='sans-serif'>\n"
    ));
    out.push_str(&format!(
        "<text x='{:.1}' y='28' font-size='15' text-anchor='middle'>{}</text>\n",
        CW / 2.0,
        esc(title)
    ));
    out.push_str(&format!(
        "<text x='{:.1}' y='52' font-size='12' text-anchor='middle'>Predicted</text>\n",
        CL + CELL
    ));
    out.push_str(&format!(
        "<text x='20' y='{:.1}' font-size='12' text-anchor='middle' \
         transform='rotate(-90 20 {:.1})'>True</text>\n",
        CT + CELL,
        CT + CELL
    ));
    for (j, name) in classes.iter().enumerate() {
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='12' text-anchor='middle'>{name}</text>\n",
            CL + CELL * (j as f64 + 0.5),
            CT - 8.0
        ));
    }
    for (i, name) in classes.iter().enumerate() {
        out.push_str(&format!(
            "<text x='{:.1}' y='{:.1}' font-size='12' text-anchor='end'>{name}</text>\n",
            CL - 8.0,
            CT + CELL * (i as f64 + 0.5) + 4.0
        ));
    }

    for i in 0..2 {
        for j in 0..2 {
            let (x, y) = (CL + CELL * j as f64, CT + CELL * i as f64);
            let v = m[i][j];
            out.push_str(&format!(
                "<rect x='{x:.1}' y='{y:.1}' width='{CELL:.0}' height='{CELL:.0}' \
                 fill='{}' stroke='#333'/>\n",
                cell_fill(if empty[i] { 0.0 } else { v })
            ));
            let text_color = if !empty[i] && v > 0.55 { "#fff" } else { "#222" };
            if empty[i] {
                out.push_str(&format!(
                    "<text x='{:.1}' y='{:.1}' font-size='14' text-anchor='middle' \
                     fill='{text_color}'>n/a</text>\n",
                    x + CELL / 2.0,
                    y + CELL / 2.0
                ));
            } else {
                out.push_str(&format!(
                    "<text x='{:.1}' y='{:.1}' font-size='16' text-anchor='middle' \
                     fill='{text_color}'>{v:.2}</text>\n",
                    x + CELL / 2.0,
                    y + CELL / 2.0 - 4.0
                ));
                out.push_str(&format!(
                    "<text x='{:.1}' y='{:.1}' font-size='11' text-anchor='middle' \
                     fill='{text_color}'>n = {}</text>\n",
                    x + CELL / 2.0,
                    y + CELL / 2.0 + 16.0,
                    raw[i][j]
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{mean_roc_curve, roc_auc};

    fn sample_curve() -> RocCurve {
        roc_auc(
            &[0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1],
            &[1, 1, 0, 1, 0, 1, 0, 0],
        )
        .unwrap()
    }

    #[test]
    fn roc_svg_contains_curves_band_and_auc_legend() {
        let folds = vec![sample_curve(), sample_curve()];
        let mean = mean_roc_curve(&folds).unwrap();
        let svg = roc_svg(&folds, Some(&mean), "ROC").unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3, "2 folds + mean");
        assert_eq!(svg.matches("<polygon").count(), 1, "one band polygon");
        assert!(svg.contains(&format!("AUC = {:.3}", mean.mean_auc)));
        // Chance diagonal is dashed.
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn roc_svg_single_curve_reports_its_auc() {
        let c = sample_curve();
        let svg = roc_svg(std::slice::from_ref(&c), None, "fold 0").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains(&format!("AUC = {:.3}", c.auc)));
        assert!(!svg.contains("<polygon"));
    }

    #[test]
    fn roc_coordinates_map_into_the_axes_box() {
        // (0,0) lands at the bottom-left corner, (1,1) at the top-right.
        assert_eq!((map_x(0.0), map_y(0.0)), (ML, H - MB));
        assert_eq!((map_x(1.0), map_y(1.0)), (W - MR, MT));
        // Out-of-range values clamp instead of escaping the canvas.
        assert_eq!(map_x(1.7), W - MR);
        assert_eq!(map_y(-0.3), H - MB);
    }

    #[test]
    fn confusion_svg_shows_normalized_rows_and_counts() {
        let c = ConfusionCounts {
            true_pos: 9,
            false_neg: 1,
            true_neg: 8,
            false_pos: 2,
        };
        let svg = confusion_svg(c, "Confusion").unwrap();
        for cell in ["0.80", "0.20", "0.10", "0.90"] {
            assert!(svg.contains(cell), "missing normalized cell {cell}");
        }
        for count in ["n = 8", "n = 2", "n = 1", "n = 9"] {
            assert!(svg.contains(count), "missing raw count {count}");
        }
        assert_eq!(svg.matches("<rect").count(), 4);
    }

    #[test]
    fn confusion_svg_flags_empty_row_as_na() {
        let c = ConfusionCounts {
            true_pos: 0,
            false_neg: 0,
            true_neg: 5,
            false_pos: 1,
        };
        let svg = confusion_svg(c, "one-class subset").unwrap();
        assert_eq!(svg.matches(">n/a<").count(), 2, "whole positive row is n/a");
    }

    #[test]
    fn titles_are_xml_escaped() {
        let svg = roc_svg(&[sample_curve()], None, "A & B <int>").unwrap();
        assert!(svg.contains("A &amp; B &lt;int&gt;"));
        assert!(!svg.contains("A & B"));
    }
}
