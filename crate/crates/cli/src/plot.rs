//! CSV table reading and deterministic SVG line charts: fixed canvas,
//! fixed palette, no timestamps, coordinates rounded to a fixed width —
//! identical tables render identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use profitlab::{Error, Result};

pub struct Table {
    pub source: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let source = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{source}: empty table")))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != columns.len() {
            return Err(Error::Data(format!(
                "{source}: row {} has {} fields, header has {}",
                i + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table {
        source,
        columns,
        rows,
    })
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", self.source)))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c == name)
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                r[idx].parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: column `{name}` holds non-numeric {:?}",
                        self.source, r[idx]
                    ))
                })
            })
            .collect()
    }

    pub fn str_column(&self, name: &str) -> Result<Vec<&str>> {
        let idx = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
    pub markers: bool,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 616.0;
const TOP: f64 = 46.0;
const BOTTOM: f64 = 344.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2",
];

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn range_of(values: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if !v.is_finite() {
            return Err(Error::Data("plot: non-finite value".to_string()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::Data("plot: empty series".to_string()));
    }
    if hi - lo < 1e-12 {
        return Ok((lo - 0.5, hi + 0.5));
    }
    let pad = 0.05 * (hi - lo);
    Ok((lo - pad, hi + pad))
}

/// Deterministic SVG line chart. `x_ticks` overrides the five automatic
/// ticks with labeled positions (used for categorical axes).
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_ticks: Option<&[(f64, String)]>,
) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::Data("plot: nothing to draw".to_string()));
    }
    let (x0, x1) = range_of(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(x_ticks.iter().flat_map(|t| t.iter().map(|(x, _)| *x))),
    )?;
    let (y0, y1) = range_of(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))?;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (RIGHT - LEFT);
    let sy = |y: f64| BOTTOM - (y - y0) / (y1 - y0) * (BOTTOM - TOP);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        (LEFT + RIGHT) / 2.0,
        escape(title)
    );

    // Axes, ticks, and gridlines.
    let auto_ticks: Vec<(f64, String)>;
    let xt: &[(f64, String)] = match x_ticks {
        Some(t) => t,
        None => {
            auto_ticks = (0..5)
                .map(|i| {
                    let x = x0 + (x1 - x0) * i as f64 / 4.0;
                    (x, fmt_num(x))
                })
                .collect();
            &auto_ticks
        }
    };
    for (x, label) in xt {
        let px = sx(*x);
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.2}\" y1=\"{BOTTOM}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>",
            BOTTOM + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            BOTTOM + 20.0,
            escape(label)
        );
    }
    for i in 0..5 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            svg,
            "<line x1=\"{LEFT}\" y1=\"{py:.2}\" x2=\"{RIGHT}\" y2=\"{py:.2}\" stroke=\"#dddddd\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            LEFT - 8.0,
            py + 4.0,
            fmt_num(y)
        );
    }
    let _ = writeln!(
        svg,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"#333333\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"#333333\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        (LEFT + RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{}</text>",
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        escape(y_label)
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        let mut path = String::new();
        for (x, y) in &s.points {
            let _ = write!(path, "{:.2},{:.2} ", sx(*x), sy(*y));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
            path.trim_end()
        );
        if s.markers {
            for (x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                    sx(*x),
                    sy(*y)
                );
            }
        }
        let ly = TOP + 10.0 + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
            RIGHT - 150.0,
            RIGHT - 126.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            RIGHT - 120.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const METRICS: [&str; 3] = ["token_accuracy", "answer_em", "perplexity"];

/// One curve per input density table (header `p,density`).
pub fn density_chart(tables: &[(String, Table)]) -> Result<String> {
    let mut series = Vec::new();
    for (label, table) in tables {
        let xs = table.f64_column("p")?;
        let ys = table.f64_column("density")?;
        series.push(Series {
            label: label.clone(),
            points: xs.into_iter().zip(ys).collect(),
            dashed: false,
            markers: false,
        });
    }
    line_chart(
        "Target-probability density",
        "p",
        "density",
        &series,
        None,
    )
}

/// Distinct group keys in first-appearance order.
fn group_keys<'a>(keys: &[&'a str]) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for &k in keys {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn metric_series(
    table: &Table,
    group_col: &str,
    xs: &[f64],
    metric: &str,
) -> Result<Vec<Series>> {
    let groups = table.str_column(group_col)?;
    let ys = table.f64_column(metric)?;
    let mut series = Vec::new();
    for key in group_keys(&groups) {
        let mut points: Vec<(f64, f64)> = groups
            .iter()
            .zip(xs.iter().zip(&ys))
            .filter(|(g, _)| **g == key)
            .map(|(_, (&x, &y))| (x, y))
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        series.push(Series {
            label: key.to_string(),
            points,
            dashed: false,
            markers: true,
        });
    }
    Ok(series)
}

/// Threshold table (`tau,mode,...`) or rank table (`objective,rank,...`),
/// one SVG per metric.
pub fn sweep_charts(table: &Table) -> Result<Vec<(String, String)>> {
    if table.has_column("tau") {
        threshold_charts(table)
    } else if table.has_column("rank") {
        rank_charts(table)
    } else {
        Err(Error::Data(format!(
            "{}: missing column `tau` or `rank`",
            table.source
        )))
    }
}

fn threshold_charts(table: &Table) -> Result<Vec<(String, String)>> {
    let taus = table.f64_column("tau")?;
    let mut out = Vec::new();
    let mut metrics: Vec<&str> = METRICS.to_vec();
    metrics.push("supervised_fraction");
    for metric in metrics {
        let series = metric_series(table, "mode", &taus, metric)?;
        let svg = line_chart(
            &format!("Threshold sweep: {metric}"),
            "tau",
            metric,
            &series,
            None,
        )?;
        out.push((format!("threshold_{metric}.svg"), svg));
    }
    Ok(out)
}

fn rank_charts(table: &Table) -> Result<Vec<(String, String)>> {
    let rank_strs = table.str_column("rank")?;
    let objectives = table.str_column("objective")?;
    let mut ranks: Vec<usize> = Vec::new();
    for &r in &rank_strs {
        if r != "full" {
            let v = r.parse().map_err(|_| {
                Error::Data(format!("{}: rank {:?} is not a number or `full`", table.source, r))
            })?;
            if !ranks.contains(&v) {
                ranks.push(v);
            }
        }
    }
    ranks.sort_unstable();
    if ranks.is_empty() {
        return Err(Error::Data(format!(
            "{}: no numeric rank rows",
            table.source
        )));
    }
    // Categorical axis: rank r sits at its index in the sorted grid.
    let pos =
        |r: usize| ranks.iter().position(|&x| x == r).expect("rank present") as f64;
    let ticks: Vec<(f64, String)> = ranks
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64, r.to_string()))
        .collect();
    let mut out = Vec::new();
    for metric in METRICS {
        let ys = table.f64_column(metric)?;
        let mut series = Vec::new();
        for key in group_keys(&objectives) {
            let mut points = Vec::new();
            let mut full_value = None;
            for ((&obj, &rank), &y) in objectives.iter().zip(&rank_strs).zip(&ys) {
                if obj != key {
                    continue;
                }
                if rank == "full" {
                    full_value = Some(y);
                } else {
                    points.push((pos(rank.parse().expect("validated above")), y));
                }
            }
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            series.push(Series {
                label: key.to_string(),
                points,
                dashed: false,
                markers: true,
            });
            if let Some(v) = full_value {
                series.push(Series {
                    label: format!("{key} full"),
                    points: vec![(-0.3, v), (ranks.len() as f64 - 0.7, v)],
                    dashed: true,
                    markers: false,
                });
            }
        }
        let svg = line_chart(
            &format!("LoRA rank sweep: {metric}"),
            "rank",
            metric,
            &series,
            Some(&ticks),
        )?;
        out.push((format!("rank_{metric}.svg"), svg));
    }
    Ok(out)
}

/// Trajectory table (`objective,epoch,...`), one SVG per metric.
pub fn trajectory_charts(table: &Table) -> Result<Vec<(String, String)>> {
    let epochs = table.f64_column("epoch")?;
    let mut out = Vec::new();
    for metric in METRICS {
        let series = metric_series(table, "objective", &epochs, metric)?;
        let svg = line_chart(
            &format!("Epoch trajectory: {metric}"),
            "epoch",
            metric,
            &series,
            None,
        )?;
        out.push((format!("trajectory_{metric}.svg"), svg));
    }
    Ok(out)
}
