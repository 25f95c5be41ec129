//! SVG line charts from the CSVs this crate writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: CSV has no data rows")]
    Empty { line: u64 },
    #[error("CSV has no numeric column to plot")]
    NothingToPlot,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 150.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug)]
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(text: &str) -> Result<Table, PlotError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let parse_err = |e: csv::Error| PlotError::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                format!("expected {expected_len} fields, found {len}")
            }
            _ => e.to_string(),
        },
    };
    let header: Vec<String> = r.headers().map_err(parse_err)?.iter().map(|s| s.trim().to_string()).collect();
    if header.iter().all(String::is_empty) {
        return Err(PlotError::Empty { line: 1 });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(parse_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(|s| s.trim().to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(PlotError::Empty { line: 2 });
    }
    Ok(Table { header, rows })
}

/// Column types come from the first data row: a cell that parses as a number
/// makes its column numeric, and later rows must agree. Empty cells are gaps.
fn build_series(t: &Table) -> Result<(Vec<Series>, Option<Vec<String>>), PlotError> {
    let first = &t.rows[0].1;
    let numeric: Vec<bool> = first.iter().map(|c| c.is_empty() || c.parse::<f64>().is_ok()).collect();
    for (line, row) in &t.rows {
        for (j, cell) in row.iter().enumerate() {
            if numeric[j] && !cell.is_empty() && cell.parse::<f64>().is_err() {
                return Err(PlotError::Parse {
                    line: *line,
                    message: format!("column {:?}: {cell:?} is not a number", t.header[j]),
                });
            }
        }
    }
    // a non-numeric first column becomes categorical x labels
    let categorical = !numeric[0];
    let labels = categorical.then(|| t.rows.iter().map(|(_, r)| r[0].clone()).collect());
    let keys: Vec<usize> = (1..t.header.len()).filter(|&j| !numeric[j]).collect();
    let values: Vec<usize> = (1..t.header.len()).filter(|&j| numeric[j]).collect();
    let mut series: BTreeMap<(usize, String), Vec<(f64, f64)>> = BTreeMap::new();
    for (i, (_, row)) in t.rows.iter().enumerate() {
        let x = if categorical { i as f64 } else { row[0].parse().unwrap_or(i as f64) };
        let group: Vec<&str> = keys.iter().map(|&k| row[k].as_str()).collect();
        for &j in &values {
            if let Ok(y) = row[j].parse::<f64>() {
                series.entry((j, group.join("/"))).or_default().push((x, y));
            }
        }
    }
    let out: Vec<Series> = series
        .into_iter()
        .map(|((j, group), points)| Series {
            name: if group.is_empty() {
                t.header[j].clone()
            } else {
                format!("{} ({group})", t.header[j])
            },
            points,
        })
        .collect();
    if out.is_empty() {
        return Err(PlotError::NothingToPlot);
    }
    Ok((out, labels))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Renders a CSV as a self-contained SVG line chart, one polyline per series.
pub fn render_svg(csv_text: &str, title: &str) -> Result<String, PlotError> {
    let table = read_table(csv_text)?;
    let (series, labels) = build_series(&table)?;
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (x0, x1) = span(x0, x1);
    let (y0, y1) = span(y0, y1);
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        ml + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<g stroke="#333" stroke-width="1"><line x1="{ml}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{:.1}"/></g>"##,
        mt + ph,
        ml + pw,
        mt + ph,
        mt + ph
    );
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let y = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            sy(y) + 4.0,
            fmt_tick(y)
        );
        if labels.is_none() {
            let x = x0 + f * (x1 - x0);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(x),
                mt + ph + 16.0,
                fmt_tick(x)
            );
        }
    }
    if let Some(labels) = &labels {
        for (i, l) in labels.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(i as f64),
                mt + ph + 16.0,
                escape(l)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        HEIGHT - 10.0,
        escape(&table.header[0])
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = mt + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - mr + 10.0,
            WIDTH - mr + 30.0,
            WIDTH - mr + 34.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        let t = format!("{v:.3}");
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
