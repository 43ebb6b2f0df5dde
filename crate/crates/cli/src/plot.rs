//! Optional SVG score-vs-lead curves. The CSV files are the contract;
//! these are a convenience rendered without any graphics dependency.

use std::path::{Path, PathBuf};

use stormlatent_core::metrics::RunScores;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn render(title: &str, ylabel: &str, series: &[Series], max_lead: f64) -> String {
    let sx = |lead: f64| MARGIN + (lead - 1.0) / (max_lead - 1.0).max(1.0) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
    // Axes with a y grid at 0, 0.25, ..., 1.
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = sy(v);
        s.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v}</text>\n",
            W - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">lead step</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{ylabel}</text>\n",
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    ));
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|(lead, v)| format!("{:.1},{:.1}", sx(*lead), sy(*v)))
            .collect();
        if !path.is_empty() {
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
            ser.label
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn series_for(scores: &RunScores, pick: fn(&stormlatent_core::metrics::ScoreRow) -> Option<f64>) -> (Vec<Series>, f64) {
    let mut thresholds: Vec<f64> = scores.rows.iter().map(|r| r.threshold).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let max_lead = scores.rows.iter().map(|r| r.lead_step).max().unwrap_or(1) as f64;
    let series = thresholds
        .iter()
        .map(|&t| Series {
            label: format!("{t} mm/h"),
            points: scores
                .rows
                .iter()
                .filter(|r| r.threshold == t)
                .filter_map(|r| pick(r).map(|v| (r.lead_step as f64, v)))
                .collect(),
        })
        .collect();
    (series, max_lead)
}

/// One SVG per score; returns (score name, file path) pairs.
pub fn score_curves(scores: &RunScores, out: &Path) -> std::io::Result<Vec<(String, PathBuf)>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let picks: [(&str, fn(&stormlatent_core::metrics::ScoreRow) -> Option<f64>); 2] =
        [("pod", |r| r.pod), ("csi", |r| r.csi)];
    for (name, pick) in picks {
        let (series, max_lead) = series_for(scores, pick);
        let svg = render(
            &format!("{} by lead step", name.to_uppercase()),
            &name.to_uppercase(),
            &series,
            max_lead,
        );
        let path = out.join(format!("{name}_by_lead.svg"));
        std::fs::write(&path, svg)?;
        written.push((name.to_string(), path));
    }
    Ok(written)
}

/// CSI@0.2 by lead, one curve per ablation variant.
pub fn variant_curves(curves: &[(String, RunScores)], out: &Path) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let mut series = Vec::new();
    let mut max_lead: f64 = 1.0;
    for (label, scores) in curves {
        let points: Vec<(f64, f64)> = scores
            .rows
            .iter()
            .filter(|r| (r.threshold - 0.2).abs() < 1e-12)
            .filter_map(|r| r.csi.map(|v| (r.lead_step as f64, v)))
            .collect();
        max_lead = max_lead.max(points.iter().map(|p| p.0).fold(1.0, f64::max));
        series.push(Series { label: label.clone(), points });
    }
    let svg = render("CSI@0.2 by lead step", "CSI", &series, max_lead);
    let path = out.join("ablation_csi_by_lead.svg");
    std::fs::write(&path, svg)?;
    Ok(path)
}
