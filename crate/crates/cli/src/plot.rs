//! Static SVG training curves.

use std::fmt::Write as _;

use ldg::trainer::EpochMetrics;

const W: f64 = 640.0;
const H: f64 = 240.0;
const PAD: f64 = 48.0;

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn panel(out: &mut String, top: f64, title: &str, epochs: &[usize], series: &[Series]) {
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let x0 = epochs.first().copied().unwrap_or(1) as f64;
    let x1 = epochs.last().copied().unwrap_or(1) as f64;
    let sx = |e: usize| PAD + (e as f64 - x0) / (x1 - x0).max(1.0) * (W - 2.0 * PAD);
    let sy = |v: f64| top + H - PAD / 2.0 - (v - lo) / (hi - lo) * (H - PAD);

    writeln!(out, r#"<text x="{PAD}" y="{}" font-size="14">{title}</text>"#, top + 16.0).unwrap();
    writeln!(
        out,
        r##"<rect x="{PAD}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        top + PAD / 2.0,
        W - 2.0 * PAD,
        H - PAD
    )
    .unwrap();
    writeln!(out, r#"<text x="4" y="{}" font-size="10">{hi:.4}</text>"#, top + PAD / 2.0 + 10.0).unwrap();
    writeln!(out, r#"<text x="4" y="{}" font-size="10">{lo:.4}</text>"#, top + H - PAD / 2.0).unwrap();
    for &e in epochs {
        writeln!(out, r#"<text x="{}" y="{}" font-size="10">{e}</text>"#, sx(e) - 3.0, top + H - 4.0).unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = epochs
            .iter()
            .zip(&s.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&e, &v)| format!("{:.2},{:.2}", sx(e), sy(v)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            s.color
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{}">{}</text>"#,
            W - PAD - 110.0,
            top + PAD / 2.0 + 14.0 * (i as f64 + 1.0),
            s.color,
            s.name
        )
        .unwrap();
    }
}

/// Loss components and validation MAR against epoch.
pub fn training_curves(rows: &[EpochMetrics]) -> String {
    let epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    let col = |f: fn(&EpochMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif">"#,
        2.0 * H
    )
    .unwrap();
    let losses = [
        Series { name: "l_events", color: "#1f77b4", values: col(|r| r.loss.l_events) },
        Series { name: "l_nonevents", color: "#ff7f0e", values: col(|r| r.loss.l_nonevents) },
        Series { name: "l_kl", color: "#2ca02c", values: col(|r| r.loss.l_kl) },
        Series { name: "total", color: "#000000", values: col(|r| r.loss.total) },
    ];
    panel(&mut out, 0.0, "training loss", &epochs, &losses);
    let mar = [Series { name: "valid MAR", color: "#d62728", values: col(|r| r.mar) }];
    panel(&mut out, H, "validation MAR", &epochs, &mar);
    out.push_str("</svg>\n");
    out
}
