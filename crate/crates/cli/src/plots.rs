use std::path::Path;

use disentangle_seg::eval::EvalReport;
use disentangle_seg::trainer::{EpochSummary, StepMetrics};
use disentangle_seg::{Error, Result};
use plotters::prelude::*;

const PANEL: (u32, u32) = (900, 300);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidValue(format!("plot: {e}"))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::InvalidValue(format!("{}: {other:?}", path.display())),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn panel(area: &DrawingArea<SVGBackend, plotters::coord::Shift>, title: &str, x_desc: &str, series: &[Series]) -> Result<()> {
    let x_max = series
        .iter()
        .flat_map(|(_, _, pts)| pts.iter().map(|p| p.0))
        .fold(1.0_f64, f64::max);
    let (y_lo, y_hi) = range(series.iter().flat_map(|(_, _, pts)| pts.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(8)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, y_lo..y_hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .draw()
        .map_err(plot_err)?;
    for (label, color, pts) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(plot_err)?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    Ok(())
}

/// Per-step losses and MI estimates plus per-epoch validation DSC, stacked
/// into one SVG.
pub fn loss_curves(steps: &[StepMetrics], epochs: &[EpochSummary], out: &Path) -> Result<()> {
    let root = SVGBackend::new(out, (PANEL.0, PANEL.1 * 4)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((4, 1));
    let at = |f: fn(&StepMetrics) -> f64| steps.iter().map(|m| (m.step as f64, f(m))).collect::<Vec<_>>();

    panel(&panels[0], "segmentation loss", "step", &[("seg", BLUE, at(|m| m.seg_loss))])?;
    panel(
        &panels[1],
        "reconstruction loss",
        "step",
        &[
            ("a1d1", BLUE, at(|m| m.rec_a1d1)),
            ("a2d2", CYAN, at(|m| m.rec_a2d2)),
            ("a1d2", RED, at(|m| m.rec_a1d2)),
            ("a2d1", MAGENTA, at(|m| m.rec_a2d1)),
        ],
    )?;
    panel(
        &panels[2],
        "MI estimate (nats)",
        "step",
        &[
            ("pair 1", BLUE, at(|m| m.mi_estimate_1)),
            ("pair 2", RED, at(|m| m.mi_estimate_2)),
        ],
    )?;
    let val: Vec<(f64, f64)> = epochs.iter().map(|e| (e.epoch as f64, e.val_dsc)).collect();
    panel(&panels[3], "validation DSC", "epoch", &[("val", GREEN, val)])?;
    root.present().map_err(plot_err)
}

/// One bar per (report, domain) with the mean DSC, whiskers at one std.
pub fn dsc_bars(reports: &[(String, EvalReport)], out: &Path) -> Result<()> {
    let bars: Vec<(String, f64, f64)> = reports
        .iter()
        .flat_map(|(label, r)| {
            r.domains
                .iter()
                .map(move |d| (format!("{label}:{}", d.domain_id), d.mean_dsc, d.std_dsc))
        })
        .collect();
    let root = SVGBackend::new(out, (PANEL.0, PANEL.1 + 100)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = bars.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption("DSC by domain", ("sans-serif", 18))
        .margin(8)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => bars.get(*i).map(|b| b.0.clone()).unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("mean DSC")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .margin(12)
                .style(BLUE.mix(0.6).filled())
                .data(bars.iter().enumerate().map(|(i, b)| (i, b.1.clamp(0.0, 1.0)))),
        )
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, mean, std))| {
            let x = SegmentValue::CenterOf(i);
            PathElement::new(
                vec![(x.clone(), (mean - std).clamp(0.0, 1.0)), (x, (mean + std).clamp(0.0, 1.0))],
                BLACK,
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
