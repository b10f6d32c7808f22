use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dcdg::training::{read_epoch_csv, AblationMode};
use dcdg::Error;
use plotters::coord::Shift;
use plotters::prelude::*;
use serde::Deserialize;

use crate::{io_err, CliError, CliResult, ExitCode, ReportArgs};

const SIZE: (u32, u32) = (800, 500);

type Series = (Vec<(f64, f64)>, RGBColor);

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(ExitCode::Io, anyhow!("{}: {e}", path.display()))
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(s, _)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    ((x0, x1), (y0 - pad, y1 + pad))
}

/// Optional fixed y-range and grey horizontal reference lines.
#[derive(Default)]
struct Frame {
    y: Option<(f64, f64)>,
    refs: &'static [f64],
}

fn draw_lines<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, series: &[Series], frame: &Frame) -> Result<(), String> {
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let ((x0, x1), fitted) = bounds(series);
    let (y0, y1) = frame.y.unwrap_or(fitted);
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .light_line_style(WHITE)
        .draw()
        .map_err(|e| e.to_string())?;
    let grey = RGBColor(190, 190, 190);
    for &r in frame.refs {
        chart
            .draw_series(LineSeries::new([(x0, r), (x1, r)], grey.stroke_width(1)))
            .map_err(|e| e.to_string())?;
    }
    chart
        .draw_series([Rectangle::new([(x0, y0), (x1, y1)], BLACK.stroke_width(1))])
        .map_err(|e| e.to_string())?;
    for (pts, color) in series {
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| e.to_string())?;
    }
    root.present().map_err(|e| e.to_string())
}

/// Renders the same figure as PNG and SVG next to each other.
fn line_plot(out: &Path, stem: &str, series: &[Series], frame: &Frame) -> CliResult<Vec<PathBuf>> {
    let png = out.join(format!("{stem}.png"));
    let svg = out.join(format!("{stem}.svg"));
    draw_lines(BitMapBackend::new(&png, SIZE).into_drawing_area(), series, frame).map_err(|e| plot_err(&png, e))?;
    draw_lines(SVGBackend::new(&svg, SIZE).into_drawing_area(), series, frame).map_err(|e| plot_err(&svg, e))?;
    Ok(vec![png, svg])
}

fn column(logs: &[(f64, Option<f64>)]) -> Vec<(f64, f64)> {
    logs.iter().filter_map(|&(e, v)| v.map(|v| (e, v))).collect()
}

fn run_plots(run: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let csv = run.join("epochs.csv");
    if !csv.exists() {
        return Err(io_err(&csv, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let logs = read_epoch_csv(&csv)?;
    let ep = |f: &dyn Fn(&dcdg::training::EpochLog) -> Option<f64>| {
        column(&logs.iter().map(|l| (l.epoch as f64, f(l))).collect::<Vec<_>>())
    };
    let mut written = line_plot(
        out,
        "losses",
        &[
            (ep(&|l| l.l_d), RED),
            (ep(&|l| l.l_adv), BLUE),
            (ep(&|l| l.l_fm), MAGENTA),
            (ep(&|l| Some(l.l_seg)), BLACK),
            (ep(&|l| l.val_dice), GREEN),
        ],
        &Frame::default(),
    )?;
    let mil = ep(&|l| l.mil);
    if mil.is_empty() {
        println!("note: {} has no adaptation phase; MIL/MIU plot omitted", run.display());
    } else {
        written.extend(line_plot(
            out,
            "mil_miu",
            &[
                (mil, BLUE),
                (ep(&|l| l.miu), RED),
                (ep(&|l| Some(l.mil? + l.miu?)), GREEN),
                (ep(&|l| Some(l.mil? - l.miu?)), BLACK),
            ],
            &Frame {
                y: Some((-0.1, 1.1)),
                refs: &[0.0, 0.5, 1.0],
            },
        )?);
    }
    Ok(written)
}

#[derive(Deserialize)]
struct LongRow {
    mode: AblationMode,
    #[allow(dead_code)]
    seed: u64,
    #[allow(dead_code)]
    case_id: String,
    dice: f64,
}

fn read_long(path: &Path) -> CliResult<BTreeMap<usize, Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => plot_err(path, format!("{other:?}")),
    })?;
    let mut by_mode: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<LongRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("row {}: {e}", i + 1),
        })?;
        let idx = AblationMode::ALL.iter().position(|&m| m == row.mode).expect("known mode");
        by_mode.entry(idx).or_default().push(row.dice);
    }
    if by_mode.is_empty() {
        return Err(Error::Data(format!("{} has no rows", path.display())).into());
    }
    Ok(by_mode)
}

fn draw_boxes<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, groups: &BTreeMap<usize, Vec<f64>>) -> Result<(), String> {
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let all = groups.values().flatten();
    let lo = all.clone().copied().fold(f64::MAX, f64::min);
    let hi = all.copied().fold(f64::MIN, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let n = AblationMode::ALL.len() as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(-0.5..n - 0.5, (lo - pad)..(hi + pad))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .light_line_style(WHITE)
        .draw()
        .map_err(|e| e.to_string())?;
    chart
        .draw_series([Rectangle::new([(-0.5, lo - pad), (n - 0.5, hi + pad)], BLACK.stroke_width(1))])
        .map_err(|e| e.to_string())?;
    for (&i, values) in groups {
        let q = Quartiles::new(values);
        let [w0, q1, med, q3, w1] = q.values().map(f64::from);
        let x = i as f64;
        let style = Palette99::pick(i).stroke_width(2);
        chart
            .draw_series([
                Rectangle::new([(x - 0.3, q1), (x + 0.3, q3)], style),
                Rectangle::new([(x - 0.3, med), (x + 0.3, med)], style),
            ])
            .map_err(|e| e.to_string())?;
        chart
            .draw_series([
                PathElement::new(vec![(x, w0), (x, q1)], style),
                PathElement::new(vec![(x, q3), (x, w1)], style),
                PathElement::new(vec![(x - 0.15, w0), (x + 0.15, w0)], style),
                PathElement::new(vec![(x - 0.15, w1), (x + 0.15, w1)], style),
            ])
            .map_err(|e| e.to_string())?;
    }
    root.present().map_err(|e| e.to_string())
}

fn ablation_plot(table: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let groups = read_long(table)?;
    let png = out.join("ablation_boxplot.png");
    let svg = out.join("ablation_boxplot.svg");
    draw_boxes(BitMapBackend::new(&png, SIZE).into_drawing_area(), &groups).map_err(|e| plot_err(&png, e))?;
    draw_boxes(SVGBackend::new(&svg, SIZE).into_drawing_area(), &groups).map_err(|e| plot_err(&svg, e))?;
    Ok(vec![png, svg])
}

/// Writes `losses`, `mil_miu` and `ablation_boxplot` figures (PNG and SVG)
/// and returns the written paths.
pub fn report(args: &ReportArgs) -> CliResult<Vec<PathBuf>> {
    if args.run.is_none() && args.ablation.is_none() {
        return Err(CliError::new(ExitCode::Config, anyhow!("nothing to report: pass --run and/or --ablation")));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut written = Vec::new();
    if let Some(run) = &args.run {
        written.extend(run_plots(run, &args.out)?);
    }
    if let Some(table) = &args.ablation {
        written.extend(ablation_plot(table, &args.out)?);
    }
    for p in &written {
        log::info!("wrote {}", p.display());
    }
    Ok(written)
}
