//! Static SVG figures rendered from persisted runs. Output is a pure
//! function of the input files, so identical runs give byte-equal plots.

use crate::config::Task;
use crate::error::{CliError, CliResult};
use crate::report::RunReport;
use crate::runner::{seed_dir, write, REPORT_JSON, SCORES_DIR};
use dsui_core::uq::{pr_curve, read_scores_csv, roc_curve};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.txt";
const HIST_BINS: usize = 20;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

/// What was written and what was skipped, with reasons.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub emitted: Vec<PathBuf>,
    pub skipped: Vec<(String, String)>,
}

impl Manifest {
    fn render(&self, root: &Path) -> String {
        let mut s = String::new();
        for p in &self.emitted {
            let rel = p.strip_prefix(root).unwrap_or(p);
            let _ = writeln!(s, "emitted {}", rel.display());
        }
        for (what, why) in &self.skipped {
            let _ = writeln!(s, "skipped {}: {}", what, why);
        }
        s
    }
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; the last
/// bin is closed so every value in range is counted once.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        counts[i.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::MIN_POSITIVE);
        PAD + (x - self.x.0) / span * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::MIN_POSITIVE);
        H - PAD - (y - self.y.0) / span * (H - 2.0 * PAD)
    }

    fn open(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, esc(title));
        let _ = writeln!(
            s,
            r#"<path d="M{p:.1} {t:.1} V{b:.1} H{r:.1}" stroke="black" fill="none"/>"#,
            p = PAD,
            t = PAD,
            b = H - PAD,
            r = W - PAD
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (self.x.0 + f * (self.x.1 - self.x.0), self.y.0 + f * (self.y.1 - self.y.0));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#, self.px(xv), H - PAD + 15.0, xv);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, PAD - 5.0, self.py(yv) + 4.0, yv);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, esc(xlabel));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            esc(ylabel)
        );
        s
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD + 5.0 + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, W - PAD - 110.0, y, c);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - PAD - 95.0, y + 9.0, esc(n));
    }
}

/// Line chart of one or more series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)], frame_x: (f64, f64), frame_y: (f64, f64)) -> String {
    let f = Frame { x: frame_x, y: frame_y };
    let mut s = f.open(title, xlabel, ylabel);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            path.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Overlaid histograms sharing one bin grid.
pub fn histogram_chart(title: &str, xlabel: &str, groups: &[(&str, Vec<usize>)], range: (f64, f64)) -> String {
    let bins = groups.first().map_or(1, |g| g.1.len());
    let top = groups.iter().flat_map(|g| g.1.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let f = Frame { x: range, y: (0.0, top) };
    let mut s = f.open(title, xlabel, "count");
    let bw = (range.1 - range.0) / bins as f64;
    for (gi, (_, counts)) in groups.iter().enumerate() {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let x0 = f.px(range.0 + i as f64 * bw);
            let x1 = f.px(range.0 + (i + 1) as f64 * bw);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.5"/>"#,
                x0,
                f.py(c as f64),
                (x1 - x0).max(0.5),
                f.py(0.0) - f.py(c as f64),
                PALETTE[gi % PALETTE.len()]
            );
        }
    }
    legend(&mut s, &groups.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Bars with ±std whiskers.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64, f64)]) -> String {
    let f = Frame { x: (0.0, bars.len().max(1) as f64), y: (0.0, 1.0) };
    let mut s = f.open(title, "", ylabel);
    for (i, (name, m, sd)) in bars.iter().enumerate() {
        let (x0, x1) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x0,
            f.py(*m),
            x1 - x0,
            f.py(0.0) - f.py(*m),
            PALETTE[i % PALETTE.len()]
        );
        let xc = (x0 + x1) / 2.0;
        let _ = writeln!(s, r#"<path d="M{:.2} {:.2} V{:.2}" stroke="black"/>"#, xc, f.py(m - sd), f.py(m + sd));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#, xc, f.py(*m) - 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn emit(manifest: &mut Manifest, path: PathBuf, svg: &str) -> CliResult<()> {
    write(&path, svg.as_bytes())?;
    manifest.emitted.push(path);
    Ok(())
}

fn curves_for_run(run_dir: &Path, report: &RunReport, out: &Path, manifest: &mut Manifest) -> CliResult<()> {
    let tag = &report.config_hash;
    let Some(seed) = report.seeds().into_iter().min() else {
        return Ok(());
    };
    let scores = seed_dir(run_dir, seed).join(SCORES_DIR);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&scores)
        .map_err(|e| CliError::io(&scores, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (values, labels) = read_scores_csv(&f)?;
        match (roc_curve(&values, &labels), pr_curve(&values, &labels)) {
            (Ok(roc), Ok(pr)) => {
                let svg = line_chart(&format!("ROC {} (seed {})", stem, seed), "false positive rate", "true positive rate", &[(stem.as_str(), roc)], (0.0, 1.0), (0.0, 1.0));
                emit(manifest, out.join(format!("{}-roc-{}.svg", tag, stem)), &svg)?;
                let svg = line_chart(&format!("PR {} (seed {})", stem, seed), "recall", "precision", &[(stem.as_str(), pr)], (0.0, 1.0), (0.0, 1.0));
                emit(manifest, out.join(format!("{}-pr-{}.svg", tag, stem)), &svg)?;
            }
            _ => manifest
                .skipped
                .push((format!("{} roc/pr {}", tag, stem), "scores contain a single label".into())),
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-12);
        let pos: Vec<f64> = values.iter().zip(&labels).filter(|(_, l)| **l).map(|(v, _)| *v).collect();
        let neg: Vec<f64> = values.iter().zip(&labels).filter(|(_, l)| !**l).map(|(v, _)| *v).collect();
        let svg = histogram_chart(
            &format!("scores {} (seed {})", stem, seed),
            "uncertainty score",
            &[("normal", histogram(&neg, HIST_BINS, lo, hi)), ("abnormal", histogram(&pos, HIST_BINS, lo, hi))],
            (lo, hi),
        );
        emit(manifest, out.join(format!("{}-hist-{}.svg", tag, stem)), &svg)?;
    }
    Ok(())
}

fn epsilon_of(metric: &str) -> Option<(f64, String)> {
    // keys look like "auroc/eps0.3-entropy-softmax"
    let (kind, rest) = metric.split_once('/')?;
    let rest = rest.strip_prefix("eps")?;
    let (eps, tail) = rest.split_once('-')?;
    Some((eps.parse().ok()?, format!("{}/{}", kind, tail)))
}

fn epsilon_curves(report: &RunReport, out: &Path, manifest: &mut Manifest) -> CliResult<()> {
    let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for (k, m) in &report.mean {
        if let Some((eps, name)) = epsilon_of(k) {
            series.entry(name).or_default().push((eps, *m));
        }
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    for kind in ["auroc", "aupr"] {
        let chosen: Vec<(&str, Vec<(f64, f64)>)> = series
            .iter()
            .filter(|(n, _)| n.starts_with(kind))
            .map(|(n, p)| (n.as_str(), p.clone()))
            .collect();
        if chosen.is_empty() {
            continue;
        }
        let xmax = chosen.iter().flat_map(|c| c.1.iter().map(|p| p.0)).fold(0.0, f64::max);
        let svg = line_chart(&format!("{} vs epsilon (mean of {} seeds)", kind, report.rows.len()), "epsilon", kind, &chosen, (0.0, xmax.max(1e-12)), (0.0, 1.0));
        emit(manifest, out.join(format!("{}-eps-{}.svg", report.config_hash, kind)), &svg)?;
    }
    Ok(())
}

/// Renders every figure for the given run directories into `out`.
pub fn emit_plots(run_dirs: &[PathBuf], out: &Path) -> CliResult<Manifest> {
    if run_dirs.is_empty() {
        return Err(CliError::Validation("no runs to plot".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut manifest = Manifest::default();
    let mut bars = Vec::new();
    for dir in run_dirs {
        let report = RunReport::load(&dir.join(REPORT_JSON))?;
        let tag = report.config_hash.clone();
        curves_for_run(dir, &report, out, &mut manifest)?;
        if report.task == Task::FgsmSweep {
            epsilon_curves(&report, out, &mut manifest)?;
        } else {
            manifest
                .skipped
                .push((format!("{} metric-vs-epsilon", tag), format!("task {} has no epsilon sweep", report.task.name())));
        }
        if report.task == Task::Misclassification {
            manifest
                .skipped
                .push((format!("{} ood curves", tag), "task has no out-of-domain set".into()));
        }
        for (k, m) in &report.mean {
            if k.starts_with("auroc/") && epsilon_of(k).is_none() {
                bars.push((format!("{} {}", &tag[..6.min(tag.len())], &k[6..]), *m, report.std[k]));
            }
        }
    }
    if bars.is_empty() {
        manifest.skipped.push(("auroc bars".into(), "no single-set AUROC metrics".into()));
    } else {
        emit(&mut manifest, out.join("auroc-bars.svg"), &bar_chart("mean AUROC ± std", "AUROC", &bars))?;
    }
    write(&out.join(MANIFEST_FILE), manifest.render(out).as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let v: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 / 999.0).collect();
        let h = histogram(&v, 13, 0.0, 1.0);
        assert_eq!(h.iter().sum::<usize>(), v.len());
        assert_eq!(histogram(&[5.0, 5.0], 4, 5.0, 5.0).iter().sum::<usize>(), 2);
    }

    #[test]
    fn epsilon_keys_parse() {
        assert_eq!(epsilon_of("auroc/eps0.3-entropy-softmax"), Some((0.3, "auroc/entropy-softmax".into())));
        assert_eq!(epsilon_of("auroc/entropy-softmax"), None);
    }

    #[test]
    fn charts_are_deterministic() {
        let pts = vec![(0.0, 0.0), (0.5, 0.7), (1.0, 1.0)];
        let a = line_chart("t", "x", "y", &[("s", pts.clone())], (0.0, 1.0), (0.0, 1.0));
        let b = line_chart("t", "x", "y", &[("s", pts)], (0.0, 1.0), (0.0, 1.0));
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }
}
