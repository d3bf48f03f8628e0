use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{read_metrics, MetricsRow};
use super::pipeline::{compare_to_baseline, Layout};
use crate::error::{Error, Result};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 40.0, 50.0); // left, right, top, bottom

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    )
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) {
    let (l, r, t, b) = MARGIN;
    let _ = writeln!(out, "<path d=\"M{l} {t} V{} H{}\" fill=\"none\" stroke=\"black\"/>", H - b, W - r);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let py = H - b - f * (H - t - b);
        let px = l + f * (W - l - r);
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            l - 4.0,
            py + 4.0,
            y.0 + f * (y.1 - y.0)
        );
        let _ = writeln!(
            out,
            "<text x=\"{px:.1}\" y=\"{}\" text-anchor=\"middle\">{:.0}</text>",
            H - b + 14.0,
            x.0 + f * (x.1 - x.0)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (l + W - r) / 2.0,
        H - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0})\">{1}</text>",
        (t + H - b) / 2.0,
        esc(y_label)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN.2 + 6.0 + 14.0 * i as f64;
        let x = W - MARGIN.1 - 150.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            y - 8.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            y + 1.0,
            esc(name)
        );
    }
}

/// A line chart with one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let (l, r, t, b) = MARGIN;
    let sx = |v: f64| l + (v - xr.0) / (xr.1 - xr.0) * (W - l - r);
    let sy = |v: f64| H - b - (v - yr.0) / (yr.1 - yr.0) * (H - t - b);
    let mut out = svg_open(title);
    axes(&mut out, xr, yr, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            d.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut out, &series.iter().map(|s| s.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per entry, one bar per (label, value) inside it.
pub fn bar_chart(title: &str, y_label: &str, groups: &[(String, Vec<(String, f64)>)]) -> String {
    let yr = (0.0, groups.iter().flat_map(|g| g.1.iter().map(|b| b.1)).fold(1e-12, f64::max) * 1.1);
    let (l, r, t, b) = MARGIN;
    let mut out = svg_open(title);
    let _ = writeln!(out, "<path d=\"M{l} {t} V{} H{}\" fill=\"none\" stroke=\"black\"/>", H - b, W - r);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            l - 4.0,
            H - b - f * (H - t - b) + 4.0,
            yr.0 + f * (yr.1 - yr.0)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0})\">{1}</text>",
        (t + H - b) / 2.0,
        esc(y_label)
    );
    let gw = (W - l - r) / groups.len().max(1) as f64;
    let mut labels: Vec<&str> = Vec::new();
    for (gi, (name, bars)) in groups.iter().enumerate() {
        let bw = gw * 0.8 / bars.len().max(1) as f64;
        for (bi, (label, v)) in bars.iter().enumerate() {
            let li = match labels.iter().position(|x| x == label) {
                Some(i) => i,
                None => {
                    labels.push(label);
                    labels.len() - 1
                }
            };
            let h = v / yr.1 * (H - t - b);
            let x = l + gi as f64 * gw + 0.1 * gw + bi as f64 * bw;
            let _ = writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"><title>{} {}: {v:.4}</title></rect>",
                H - b - h,
                bw * 0.9,
                PALETTE[li % PALETTE.len()],
                esc(name),
                esc(label)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            l + (gi as f64 + 0.5) * gw,
            H - b + 14.0,
            esc(name)
        );
    }
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

fn domain_name(d: u32) -> String {
    if d == 0 {
        "source".into()
    } else {
        format!("shift-{d}")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mean over subjects per epoch, for one domain of one run's traces.
fn epoch_means(rows: &[MetricsRow], domain: u32, field: fn(&MetricsRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut by_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.domain == domain) {
        if let Some(v) = field(r) {
            by_epoch.entry(r.epoch).or_default().push(v);
        }
    }
    by_epoch.into_iter().map(|(e, v)| (e as f64, mean(&v))).collect()
}

/// Writes the summary table, curve plots and the lambda sweep chart. Returns
/// the written paths.
pub fn cmd_report(root: &Path, n_perm: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(root);
    let eval_path = layout.metrics().join("eval.csv");
    if !eval_path.exists() {
        return Err(Error::InvalidState(format!("no metrics at {}; run evaluate first", eval_path.display())));
    }
    let eval = read_metrics(&eval_path)?;
    if eval.is_empty() {
        return Err(Error::InvalidState("metrics are empty".into()));
    }
    let report = layout.report();
    fs::create_dir_all(&report)?;
    let mut written = Vec::new();

    let domains: Vec<u32> = {
        let mut d: Vec<u32> = eval.iter().map(|r| r.domain).collect();
        d.sort();
        d.dedup();
        d
    };
    let mut table: BTreeMap<&str, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for r in &eval {
        table.entry(&r.run_id).or_default().entry(r.domain).or_default().push(r.dice_mean);
    }
    let comparisons = compare_to_baseline(&eval, n_perm, seed)?;
    let p_of: BTreeMap<(&str, u32), Option<f64>> =
        comparisons.iter().map(|c| ((c.run_id.as_str(), c.domain), c.p_value)).collect();

    let mut text =
        String::from("Mean foreground Dice per domain (p: paired permutation test against baseline-strong)\n\n");
    let _ = write!(text, "{:<32}", "run");
    for d in &domains {
        let _ = write!(text, "{:>22}", domain_name(*d));
    }
    text.push('\n');
    let mut csv = String::from("run_id,domain,n,mean_dice,p_value\n");
    for (run, per_domain) in &table {
        let _ = write!(text, "{run:<32}");
        for d in &domains {
            match per_domain.get(d) {
                Some(v) => {
                    let p = p_of.get(&(*run, *d)).copied().flatten();
                    let cell = match p {
                        Some(p) => format!("{:.4} (p={p:.3})", mean(v)),
                        None => format!("{:.4}", mean(v)),
                    };
                    let _ = write!(text, "{cell:>22}");
                    let _ = writeln!(
                        csv,
                        "{run},{d},{},{},{}",
                        v.len(),
                        mean(v),
                        p.map(|p| p.to_string()).unwrap_or_default()
                    );
                }
                None => {
                    let _ = write!(text, "{:>22}", "-");
                }
            }
        }
        text.push('\n');
    }

    let kde_path = layout.kde_comparison();
    if kde_path.exists() {
        let body = fs::read_to_string(&kde_path)?;
        let kls: Vec<f64> = body.lines().skip(1).filter_map(|l| l.rsplit(',').next()?.parse().ok()).collect();
        if !kls.is_empty() {
            let below = kls.iter().filter(|v| **v < 0.1).count();
            let _ = write!(
                text,
                "\nKDE vs Gaussian fit: KL < 0.1 on {below}/{} channels ({:.1}%), median KL {:.4}\n",
                kls.len(),
                100.0 * below as f64 / kls.len() as f64,
                {
                    let mut s = kls.clone();
                    s.sort_by(f64::total_cmp);
                    s[s.len() / 2]
                }
            );
        }
    }
    let p = report.join("summary.txt");
    fs::write(&p, &text)?;
    written.push(p);
    let p = report.join("summary.csv");
    fs::write(&p, &csv)?;
    written.push(p);

    let mut trace_files: Vec<PathBuf> = fs::read_dir(layout.metrics())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("tta-") && n.ends_with(".csv"))
        })
        .collect();
    trace_files.sort();
    for path in trace_files {
        let rows = read_metrics(&path)?;
        let Some(run_id) = rows.first().map(|r| r.run_id.clone()) else { continue };
        let mut ds: Vec<u32> = rows.iter().map(|r| r.domain).collect();
        ds.sort();
        ds.dedup();
        for (what, field) in [
            ("loss", (|r: &MetricsRow| r.loss_total) as fn(&MetricsRow) -> Option<f64>),
            ("dice", |r: &MetricsRow| Some(r.dice_mean)),
        ] {
            let series: Vec<(String, Vec<(f64, f64)>)> =
                ds.iter().map(|d| (domain_name(*d), epoch_means(&rows, *d, field))).collect();
            let svg = line_chart(&format!("{run_id}: mean {what} per epoch"), "epoch", what, &series);
            let p = report.join(format!("curve-{what}-{run_id}.svg"));
            fs::write(&p, svg)?;
            written.push(p);
        }
    }

    // Lambda sweep: final Dice of FoE-CNN-PCA runs, one bar per lambda.
    let mut sweep: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in eval.iter().filter(|r| r.method == "foe_cnn_pca") {
        if let Some((prefix, lambda)) = r.run_id.rsplit_once("-l") {
            let label = format!("{prefix} λ={lambda}");
            sweep.entry(domain_name(r.domain)).or_default().entry(label).or_default().push(r.dice_mean);
        }
    }
    if !sweep.is_empty() {
        let groups: Vec<(String, Vec<(String, f64)>)> =
            sweep.into_iter().map(|(d, bars)| (d, bars.into_iter().map(|(l, v)| (l, mean(&v))).collect())).collect();
        let p = report.join("lambda-sweep.svg");
        fs::write(&p, bar_chart("FoE-CNN-PCA final Dice by λ", "mean Dice", &groups))?;
        written.push(p);
    }
    Ok(written)
}
