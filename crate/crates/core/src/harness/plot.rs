use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsRecord;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 46.0;

/// Fifteen distinguishable stroke colours, one per task.
const PALETTE: [&str; 15] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79", "#ad494a", "#637939", "#843c39", "#7b4173",
];

fn color(task: usize) -> &'static str {
    PALETTE[task % PALETTE.len()]
}

/// Dice-vs-round chart of one client's records, one polyline per task.
pub fn client_svg(client: usize, records: &[&MetricsRecord]) -> String {
    let channels = records.first().map_or(0, |r| r.dice.len());
    let max_round = records.iter().map(|r| r.round).max().unwrap_or(0);
    let span = max_round.max(1) as f64;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |round: usize| LEFT + plot_w * round as f64 / span;
    let y = |dice: f64| TOP + plot_h * (1.0 - dice.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">client {client}</text>"#,
        LEFT + plot_w / 2.0
    );

    // axes with ticks on [0, 1] Dice and [0, max round]
    let (x0, x1, y0, y1) = (x(0), x(max_round.max(1)), y(0.0), y(1.0));
    let _ = writeln!(s, r#"<g stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    for i in 0..=5 {
        let d = i as f64 / 5.0;
        let yy = y(d);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{yy}" x2="{x1}" y2="{yy}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{d:.1}</text>"##,
            x0 - 6.0,
            yy + 4.0
        );
    }
    let ticks = max_round.max(1).min(10);
    for i in 0..=ticks {
        let round = (max_round.max(1) * i).div_ceil(ticks);
        let xx = x(round);
        let _ = writeln!(
            s,
            r#"<line x1="{xx}" y1="{y0}" x2="{xx}" y2="{}" stroke="black"/><text x="{xx}" y="{}" text-anchor="middle">{round}</text>"#,
            y0 + 4.0,
            y0 + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">dice</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for task in 0..channels {
        let points: Vec<String> = records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.round), y(r.dice[task])))
            .collect();
        let c = color(task);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        // one mark on the latest point of every series
        if let Some(last) = records.last() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#,
                x(last.round),
                y(last.dice[task])
            );
        }
        let ly = TOP + 4.0 + 16.0 * task as f64;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">task {}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            task + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `dice_client_<k>.svg` for every client present in `records`.
pub fn emit_plots(records: &[MetricsRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::contract("no records to plot"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clients = records.iter().map(|r| r.client + 1).max().unwrap_or(0);
    let mut paths = Vec::with_capacity(clients);
    for c in 0..clients {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.client == c).collect();
        if rows.is_empty() {
            continue;
        }
        let path = dir.join(format!("dice_client_{c}.svg"));
        fs::write(&path, client_svg(c, &rows)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
