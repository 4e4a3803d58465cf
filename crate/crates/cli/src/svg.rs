//! Static SVG figures written as plain text.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Overlaid histograms of learned delays, one translucent series per group,
/// with unit-width bins over `[1, tau_max]`.
pub fn tau_histogram(groups: &[(String, Vec<f64>)], tau_max: f64) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let n_bins = (tau_max - 1.0).ceil().max(1.0) as usize;
    let counts: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, taus)| {
            let mut c = vec![0.0; n_bins];
            for &t in taus {
                let b = ((t - 1.0).floor().max(0.0) as usize).min(n_bins - 1);
                c[b] += 1.0;
            }
            let total = taus.len().max(1) as f64;
            c.iter().map(|v| v / total).collect()
        })
        .collect();
    let peak = counts.iter().flatten().fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
    let bar = pw / n_bins as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">Learned receptive field of the target by regime</text>"#,
        left + pw / 2.0
    );
    for (g, c) in counts.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        for (b, v) in c.iter().enumerate() {
            let bh = v / peak * ph;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45" stroke="{color}"/>"#,
                left + b as f64 * bar,
                top + ph - bh,
                bar,
                bh
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for b in (0..=n_bins).step_by(n_bins.div_ceil(10).max(1)) {
        let x = left + b as f64 * bar;
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            top + ph + 16.0,
            b + 1
        );
    }
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            left - 6.0,
            top + ph - frac * ph + 4.0,
            frac * peak
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">tau (steps)</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">fraction of windows</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (g, (label, taus)) in groups.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        let mean = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
        let y = top + 10.0 + g as f64 * 20.0;
        let x = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{color}" fill-opacity="0.6"/><text x="{:.2}" y="{:.2}">{} (mean {mean:.2})</text>"#,
            y - 10.0,
            x + 18.0,
            y,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of a square matrix with row/column names and every cell labelled.
/// Rows are receivers, columns are sources.
pub fn heatmap(names: &[String], m: &[f64], title: &str) -> String {
    let n = names.len();
    let cell = 56.0;
    let (left, top) = (90.0, 70.0);
    let w = left + n as f64 * cell + 20.0;
    let h = top + n as f64 * cell + 20.0;
    let peak = m.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-12);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (j, name) in names.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + (j as f64 + 0.5) * cell,
            top - 8.0,
            escape(name)
        );
    }
    for i in 0..n {
        let y = top + i as f64 * cell;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + cell / 2.0 + 4.0,
            escape(&names[i])
        );
        for j in 0..n {
            let v = m[i * n + j];
            let shade = (255.0 * (1.0 - (v / peak).clamp(0.0, 1.0))).round() as u8;
            let ink = if shade < 110 { "white" } else { "black" };
            let x = left + j as f64 * cell;
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#999"/><text class="cell" x="{:.2}" y="{:.2}" text-anchor="middle" fill="{ink}">{v:.2}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
