use std::fs;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::CurvePoint;
use crate::hspl::LossBreakdown;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub type Series = (String, Vec<(f64, f64)>);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("plot: {e}"))
}

/// Line chart of one or more series as an SVG file.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

pub fn pr_series(name: &str, points: &[CurvePoint]) -> Series {
    (name.to_string(), points.iter().map(|p| (p.recall, p.precision)).collect())
}

pub fn froc_series(name: &str, points: &[CurvePoint]) -> Series {
    (name.to_string(), points.iter().map(|p| (p.fp_avg, p.recall)).collect())
}

/// Moving average of each loss term over `window` steps.
pub fn loss_series(losses: &[(usize, LossBreakdown)], window: usize) -> Vec<Series> {
    let w = window.max(1);
    let smooth = |f: fn(&LossBreakdown) -> f64| -> Vec<(f64, f64)> {
        losses
            .chunks(w)
            .map(|c| {
                let step = c.last().unwrap().0 as f64;
                (step, c.iter().map(|(_, l)| f(l)).sum::<f64>() / c.len() as f64)
            })
            .collect()
    };
    vec![
        ("L_cls".into(), smooth(|l| l.l_cls)),
        ("L_reg".into(), smooth(|l| l.l_reg)),
        ("L_con".into(), smooth(|l| l.l_con)),
        ("L_final".into(), smooth(|l| l.l_final)),
    ]
}

#[derive(serde::Deserialize)]
struct LossRow {
    step: usize,
    #[serde(flatten)]
    losses: LossBreakdown,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, LossBreakdown)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LossRow>()
        .map(|row| row.map(|r| (r.step, r.losses)).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hspl::LossLogWriter;

    #[test]
    fn writes_svg_and_reads_loss_log() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            CurvePoint {
                threshold: 0.9,
                precision: 1.0,
                recall: 0.5,
                fp_avg: 0.0,
            },
            CurvePoint {
                threshold: 0.5,
                precision: 0.8,
                recall: 1.0,
                fp_avg: 0.5,
            },
        ];
        let p = dir.path().join("pr.svg");
        line_chart(&p, "PR", "recall", "precision", &[pr_series("a", &pts), pr_series("b", &pts)]).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("<svg"));

        let log = dir.path().join("l.csv");
        let mut w = LossLogWriter::create(&log).unwrap();
        let l = LossBreakdown {
            l_cls: 1.0,
            l_reg: 0.5,
            l_con: 0.25,
            l_final: 1.5,
        };
        w.write(0, &l).unwrap();
        w.write(1, &l).unwrap();
        w.flush().unwrap();
        let rows = read_loss_log(&log).unwrap();
        assert_eq!(rows, vec![(0, l), (1, l)]);
        let s = loss_series(&rows, 2);
        assert_eq!(s[3].1, vec![(1.0, 1.5)]);
        line_chart(&dir.path().join("loss.svg"), "loss", "step", "value", &s).unwrap();
    }
}
