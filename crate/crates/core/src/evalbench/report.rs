//! Report files: `report.txt` (key=value), `metrics.csv`, `report.md`, loss
//! curve SVGs and encoder embedding dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EvalError, ExperimentSpec, MetricRow, Result, RunOutcome};
use crate::prompting::stage_parameter_count;

/// Per-stage prompt parameter count printed in the published efficiency table.
pub const REPORTED_PER_STAGE: usize = 3000;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: BTreeMap<String, String>,
    pub rows: Vec<MetricRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

impl Report {
    /// `(task, method)` pairs in first-seen order.
    pub fn methods(&self) -> Vec<(String, String)> {
        let mut seen: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.task.clone(), r.method.clone());
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        seen
    }

    pub fn median_mae(&self, task: &str, method: &str) -> Option<f64> {
        median(self.rows.iter().filter(|r| r.task == task && r.method == method).map(|r| r.mae).collect())
    }

    pub fn median_rmse(&self, task: &str, method: &str) -> Option<f64> {
        median(self.rows.iter().filter(|r| r.task == task && r.method == method).map(|r| r.rmse).collect())
    }

    /// Recomputes the per-row and median entries from `rows`.
    pub fn refresh(&mut self) {
        self.entries.retain(|k, _| !k.starts_with("metric.") && !k.starts_with("median."));
        for r in &self.rows {
            let base = format!("metric.{}.{}.seed{}", r.task, r.method, r.seed);
            self.entries.insert(format!("{base}.mae"), r.mae.to_string());
            self.entries.insert(format!("{base}.rmse"), r.rmse.to_string());
        }
        for (task, method) in self.methods() {
            let base = format!("median.{task}.{method}");
            if let (Some(mae), Some(rmse)) = (self.median_mae(&task, &method), self.median_rmse(&task, &method)) {
                self.entries.insert(format!("{base}.mae"), mae.to_string());
                self.entries.insert(format!("{base}.rmse"), rmse.to_string());
            }
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={}\n", v.replace('\n', " "))).collect()
    }

    pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| EvalError::Invalid(format!("report line without `=`: {l}"))))
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::from("# Transfer benchmark\n\n");
        if let Some(h) = self.entries.get("config_hash") {
            let _ = writeln!(md, "Config `{h}`, seeds {}.\n", self.entries.get("seeds").map(String::as_str).unwrap_or("?"));
        }
        md.push_str("| task | method | median MAE | median RMSE | seeds |\n|---|---|---|---|---|\n");
        for (task, method) in self.methods() {
            let n = self.rows.iter().filter(|r| r.task == task && r.method == method).count();
            let (mae, rmse) = (self.median_mae(&task, &method).unwrap_or(f64::NAN), self.median_rmse(&task, &method).unwrap_or(f64::NAN));
            let _ = writeln!(md, "| {task} | {method} | {mae:.4} | {rmse:.4} | {n} |");
        }
        let params: Vec<_> = self.entries.iter().filter(|(k, _)| k.starts_with("params.")).collect();
        if !params.is_empty() {
            md.push_str("\n## Trainable parameters per stage\n\n");
            for (k, v) in params {
                let _ = writeln!(md, "- `{}`: {v}", &k["params.".len()..]);
            }
        }
        let errors: Vec<_> = self.entries.iter().filter(|(k, _)| k.starts_with("error.")).collect();
        if !errors.is_empty() {
            md.push_str("\n## Failures\n\n");
            for (k, v) in errors {
                let _ = writeln!(md, "- `{}`: {v}", &k["error.".len()..]);
            }
        }
        md
    }

    /// Writes `report.txt`, `metrics.csv` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let p = dir.join("report.txt");
        fs::write(&p, self.to_text()).map_err(io(&p))?;
        let p = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| EvalError::Invalid(format!("{}: {e}", p.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Invalid(format!("{}: {e}", p.display())))?;
        }
        w.flush().map_err(io(&p))?;
        let p = dir.join("report.md");
        fs::write(&p, self.to_markdown()).map_err(io(&p))?;
        Ok(())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| EvalError::Invalid(format!("{}: {e}", path.display())))).collect()
}

/// Concatenates the rows and entries of several report directories and
/// recomputes the medians. On conflicting keys the first directory wins.
pub fn merge_reports(dirs: &[impl AsRef<Path>]) -> Result<Report> {
    let mut merged = Report::default();
    for d in dirs {
        let d = d.as_ref();
        for row in read_metrics_csv(&d.join("metrics.csv"))? {
            if !merged.rows.contains(&row) {
                merged.rows.push(row);
            }
        }
        let p = d.join("report.txt");
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        for (k, v) in Report::parse_entries(&text)? {
            merged.entries.entry(k).or_insert(v);
        }
    }
    let mut seeds: Vec<u64> = merged.rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    merged.entries.insert("seeds".into(), seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    merged.refresh();
    Ok(merged)
}

/// A plain SVG line chart of one or more series against their index.
pub fn svg_line_plot(title: &str, series: &[(&str, &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) } } else { (0.0, 1.0) };
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| M + (W - 2.0 * M) * i as f64 / (len - 1) as f64;
    let y = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(svg, "<path d=\"M{M} {M} V{} H{}\" stroke=\"black\" fill=\"none\"/>", H - M, W - M);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.4}</text>", M - 4.0, M + 4.0);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.4}</text>", M - 4.0, H - M);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>", W / 2.0, H - 12.0);
    for (k, (name, values)) in series.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let pts: Vec<String> = values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect();
        if !pts.is_empty() {
            let _ = writeln!(svg, "<polyline points=\"{}\" stroke=\"{colour}\" fill=\"none\" stroke-width=\"1.5\"/>", pts.join(" "));
        }
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>", W - M - 120.0, M + 16.0 * k as f64, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Builds the report of an experiment and writes it, with loss plots and
/// embedding dumps, into `dir`.
pub fn write_report(dir: &Path, spec: &ExperimentSpec, outcomes: &[RunOutcome]) -> Result<Report> {
    let cfg = &spec.config;
    let mut report = Report::default();
    let e = &mut report.entries;
    e.insert("config_hash".into(), cfg.hash());
    e.insert("seeds".into(), spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    e.insert("setting".into(), format!("{:?}", spec.setting).to_lowercase());
    e.insert("synth.num_nodes".into(), spec.synth.num_nodes.to_string());
    e.insert("synth.num_sources".into(), spec.synth.num_sources.to_string());
    e.insert("synth.target.phase_shift".into(), spec.synth.target.phase_shift.to_string());
    e.insert("synth.target.speed_scale".into(), spec.synth.target.speed_scale.to_string());
    e.insert("params.domain_stage.expected".into(), stage_parameter_count(cfg.domain_banks, cfg.num_prompts, cfg.d_hidden).to_string());
    e.insert("params.task_stage.expected".into(), stage_parameter_count(cfg.task_banks, cfg.num_prompts, cfg.d_hidden).to_string());
    e.insert("params.reported_per_stage".into(), REPORTED_PER_STAGE.to_string());
    e.insert(
        "params.reported_discrepancy".into(),
        format!(
            "two banks of num_prompts x d_hidden give {} per stage at 25 x 128; the published table lists about {}",
            stage_parameter_count(crate::config::BankMode::Separate, 25, 128),
            REPORTED_PER_STAGE
        ),
    );
    for o in outcomes {
        let s = o.seed;
        e.insert(format!("distance.seed{s}"), o.distance.to_string());
        e.insert(format!("isolation.seed{s}"), if o.isolated { "ok" } else { "violated" }.into());
        for (k, v) in &o.param_counts {
            e.insert(format!("params.{k}"), v.to_string());
        }
        for (k, v) in &o.errors {
            e.insert(format!("error.seed{s}.{k}"), v.clone());
        }
        for l in &o.logs {
            let base = format!("stage.seed{s}.{}", l.stage);
            e.insert(format!("{base}.initial_val"), l.initial_val.to_string());
            e.insert(format!("{base}.best_val"), l.best_val().to_string());
            e.insert(format!("{base}.best_epoch"), l.best_epoch.to_string());
            e.insert(format!("{base}.epochs"), l.val_curve.len().to_string());
        }
        for (method, h) in &o.horizons {
            for (k, v) in h.iter().enumerate() {
                e.insert(format!("horizon.forecast.{method}.seed{s}.step{:02}", k + 1), v.to_string());
            }
        }
        report.rows.extend(o.rows.iter().cloned());
    }
    report.refresh();
    report.write(dir)?;

    let plots = dir.join("plots");
    let dumps = dir.join("embeddings");
    for o in outcomes {
        if !o.logs.is_empty() {
            fs::create_dir_all(&plots).map_err(io(&plots))?;
        }
        for l in &o.logs {
            let p = plots.join(format!("loss_seed{}_{}.svg", o.seed, l.stage));
            let svg = svg_line_plot(&format!("{} (seed {})", l.stage, o.seed), &[("train", &l.train_curve), ("validation", &l.val_curve)]);
            fs::write(&p, svg).map_err(io(&p))?;
        }
        if !o.embeddings.is_empty() {
            fs::create_dir_all(&dumps).map_err(io(&dumps))?;
        }
        for (variant, emb) in &o.embeddings {
            let p = dumps.join(format!("seed{}_{variant}.csv", o.seed));
            let mut text = String::new();
            for row in emb.rows() {
                text.push_str(&row.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
                text.push('\n');
            }
            fs::write(&p, text).map_err(io(&p))?;
        }
    }
    Ok(report)
}
