//! Run artifacts: metrics rows, checkpoints, evaluation logs, stability
//! metrics, normalized scores and SVG learning curves.

use crate::approx::Mlp;
use crate::config::RunConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// One line of `metrics.csv`. Absent values are written as empty cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub fqe_loss: Option<f64>,
    pub bc_loss: Option<f64>,
    pub mmd_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_min: Option<f64>,
}

pub const METRIC_FIELDS: [&str; 6] =
    ["fqe_loss", "bc_loss", "mmd_loss", "policy_loss", "eval_return_mean", "eval_return_min"];

impl MetricsRow {
    pub fn field(&self, name: &str) -> Option<f64> {
        match name {
            "step" => Some(self.step as f64),
            "fqe_loss" => self.fqe_loss,
            "bc_loss" => self.bc_loss,
            "mmd_loss" => self.mmd_loss,
            "policy_loss" => self.policy_loss,
            "eval_return_mean" => self.eval_return_mean,
            "eval_return_min" => self.eval_return_min,
            _ => None,
        }
    }
}

/// Per-episode returns of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub seed: u64,
    pub returns: Vec<f64>,
}

impl EvalRecord {
    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.returns.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// A network snapshot: shape manifest plus flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub name: String,
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of(step: usize, name: &str, net: &Mlp) -> Self {
        Self { step, name: name.to_string(), sizes: net.sizes().to_vec(), params: net.params().to_vec() }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        Mlp::from_flat(&self.sizes, self.params.clone())
    }
}

/// Receives everything a training run produces as it happens.
pub trait Observer {
    fn metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }

    fn evaluation(&mut self, _record: &EvalRecord) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub evaluations: Vec<EvalRecord>,
}

impl Observer for Recorder {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }

    fn evaluation(&mut self, record: &EvalRecord) -> Result<()> {
        self.evaluations.push(record.clone());
        Ok(())
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoints.jsonl";
pub const EVAL_FILE: &str = "eval_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = ".lock";

/// A run directory owned by this process until dropped.
pub struct RunDir {
    root: PathBuf,
    metrics: csv::Writer<File>,
    checkpoints: BufWriter<File>,
    evals: BufWriter<File>,
}

impl RunDir {
    /// Creates (or reuses) `root`, takes its lock and writes the config copy.
    pub fn create(root: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        OpenOptions::new().write(true).create_new(true).open(root.join(LOCK_FILE)).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("run directory {} is locked by another process", root.display()))
            } else {
                Error::Io(e)
            }
        })?;
        fs::write(root.join(CONFIG_FILE), config.to_toml())?;
        let metrics = csv::Writer::from_path(root.join(METRICS_FILE)).map_err(csv_error)?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
            checkpoints: BufWriter::new(File::create(root.join(CHECKPOINT_FILE))?),
            evals: BufWriter::new(File::create(root.join(EVAL_FILE))?),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_report<T: Serialize>(&mut self, report: &T) -> Result<()> {
        self.flush()?;
        let text = serde_json::to_string_pretty(report)?;
        fs::write(self.root.join(REPORT_FILE), text + "\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.checkpoints.flush()?;
        self.evals.flush()?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = self.flush();
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

impl Observer for RunDir {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.serialize(row).map_err(csv_error)
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        serde_json::to_writer(&mut self.checkpoints, ckpt)?;
        self.checkpoints.write_all(b"\n")?;
        Ok(())
    }

    fn evaluation(&mut self, record: &EvalRecord) -> Result<()> {
        serde_json::to_writer(&mut self.evals, record)?;
        self.evals.write_all(b"\n")?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("metrics csv: {e}"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn read_checkpoints(path: &Path) -> Result<Vec<Checkpoint>> {
    read_jsonl(path)
}

pub fn read_eval_log(path: &Path) -> Result<Vec<EvalRecord>> {
    read_jsonl(path)
}

/// Latest checkpoint with the given name.
pub fn latest_checkpoint<'a>(ckpts: &'a [Checkpoint], name: &str) -> Option<&'a Checkpoint> {
    ckpts.iter().filter(|c| c.name == name).max_by_key(|c| c.step)
}

/// Spread of returns within and across evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `100 (mean - worst episode) / |mean|` at the final evaluation.
    pub worst_episode_pct: f64,
    /// `100 (mean - worst evaluation mean) / |mean|` over the last ten
    /// evaluations, `mean` being the average of their means.
    pub worst_evaluation_pct: f64,
    pub evaluations_used: usize,
    /// Set when fewer than ten evaluations were available.
    pub short_log: bool,
}

pub const STABILITY_WINDOW: usize = 10;

pub fn stability_metrics(log: &[EvalRecord]) -> Result<StabilityReport> {
    let last = log.last().ok_or_else(|| Error::InvalidInput("empty evaluation log".into()))?;
    if log.iter().any(|r| r.returns.is_empty()) {
        return Err(Error::InvalidInput("evaluation without episodes".into()));
    }
    let pct = |mean: f64, worst: f64| {
        if mean == 0.0 {
            if worst == mean { 0.0 } else { f64::INFINITY }
        } else {
            100.0 * (mean - worst) / mean.abs()
        }
    };
    let worst_episode_pct = pct(last.mean(), last.min());
    let window = &log[log.len().saturating_sub(STABILITY_WINDOW)..];
    let means: Vec<f64> = window.iter().map(EvalRecord::mean).collect();
    let overall = means.iter().sum::<f64>() / means.len() as f64;
    let worst = means.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(StabilityReport {
        worst_episode_pct,
        worst_evaluation_pct: pct(overall, worst),
        evaluations_used: window.len(),
        short_log: window.len() < STABILITY_WINDOW,
    })
}

/// `100 (raw - random) / (expert - random)`, unclamped.
pub fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if expert_ref == random_ref {
        return Err(Error::Degenerate("expert and random references coincide".into()));
    }
    Ok(100.0 * (raw - random_ref) / (expert_ref - random_ref))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;

/// Learning curve of `field` as an SVG document. One run gives a single
/// polyline through every row that has the field; several runs give the
/// per-step mean line and a mean±std band polygon.
pub fn emit_plot(runs: &[Vec<MetricsRow>], field: &str) -> Result<String> {
    if field != "step" && !METRIC_FIELDS.contains(&field) {
        return Err(Error::InvalidInput(format!("unknown metric field '{field}'")));
    }
    let series: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|rows| rows.iter().filter_map(|r| r.field(field).map(|v| (r.step as f64, v))).collect())
        .collect();
    if series.iter().all(|s: &Vec<(f64, f64)>| s.is_empty()) {
        return Err(Error::Data(format!("no rows with a value for '{field}'")));
    }
    let (line, band) = if series.len() == 1 {
        (series[0].clone(), None)
    } else {
        let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for s in &series {
            for &(x, y) in s {
                by_step.entry(x as u64).or_default().push(y);
            }
        }
        let stats: Vec<(f64, f64, f64)> = by_step
            .into_iter()
            .map(|(x, ys)| {
                let (m, sd) = mean_std(&ys);
                (x as f64, m, sd)
            })
            .collect();
        let line = stats.iter().map(|&(x, m, _)| (x, m)).collect();
        let upper: Vec<(f64, f64)> = stats.iter().map(|&(x, m, sd)| (x, m + sd)).collect();
        let lower: Vec<(f64, f64)> = stats.iter().rev().map(|&(x, m, sd)| (x, m - sd)).collect();
        (line, Some([upper, lower].concat()))
    };

    let pts = band.as_deref().unwrap_or(&line);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.iter().chain(&line) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let coords = |p: &[(f64, f64)]| {
        p.iter().map(|&(x, y)| format!("{:.3},{:.3}", sx(x), sy(y))).collect::<Vec<_>>().join(" ")
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!("<title>{field}</title>\n"));
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"14\">{field}</text>\n",
        MARGIN / 2.0
    ));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"10\">{y0:.4}</text>\n<text x=\"{MARGIN}\" y=\"{}\" font-size=\"10\">{y1:.4}</text>\n",
        HEIGHT - MARGIN + 12.0,
        MARGIN - 4.0
    ));
    if let Some(b) = &band {
        svg.push_str(&format!(
            "<polygon class=\"band\" points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
            coords(b)
        ));
    }
    svg.push_str(&format!(
        "<polyline class=\"curve\" points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
        coords(&line)
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(returns: &[f64]) -> EvalRecord {
        EvalRecord { step: 0, seed: 0, returns: returns.to_vec() }
    }

    #[test]
    fn stability_examples() {
        let flat = stability_metrics(&[record(&[3.0; 10])]).unwrap();
        assert_eq!((flat.worst_episode_pct, flat.worst_evaluation_pct), (0.0, 0.0));
        assert!(flat.short_log);
        let mut eps = vec![10.0; 9];
        eps.push(5.0);
        let r = stability_metrics(&[record(&eps)]).unwrap();
        assert!((r.worst_episode_pct - 100.0 * 4.5 / 9.5).abs() < 1e-12);
        assert!(stability_metrics(&[]).is_err());
    }

    #[test]
    fn stability_window_is_last_ten() {
        let mut log: Vec<EvalRecord> = (0..12).map(|_| record(&[4.0])).collect();
        log[0] = record(&[-100.0]);
        log[11] = record(&[2.0]);
        let r = stability_metrics(&log).unwrap();
        assert_eq!(r.evaluations_used, 10);
        assert!(!r.short_log);
        let mean = (9.0 * 4.0 + 2.0) / 10.0;
        assert!((r.worst_evaluation_pct - 100.0 * (mean - 2.0) / mean).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        assert_eq!(normalized_score(50.0, 0.0, 100.0).unwrap(), 50.0);
        assert_eq!(normalized_score(3.0, 3.0, 7.0).unwrap(), 0.0);
        assert_eq!(normalized_score(7.0, 3.0, 7.0).unwrap(), 100.0);
        assert!(normalized_score(9.0, 3.0, 7.0).unwrap() > 100.0);
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
    }

    fn rows(vals: &[f64]) -> Vec<MetricsRow> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| MetricsRow { step: i * 10, policy_loss: Some(v), ..Default::default() })
            .collect()
    }

    fn points_of(svg: &str, class: &str) -> Vec<(f64, f64)> {
        let tag = format!("class=\"{class}\" points=\"");
        let start = svg.find(&tag).unwrap() + tag.len();
        let end = start + svg[start..].find('"').unwrap();
        svg[start..end]
            .split(' ')
            .map(|p| {
                let (x, y) = p.split_once(',').unwrap();
                (x.parse().unwrap(), y.parse().unwrap())
            })
            .collect()
    }

    #[test]
    fn single_run_polyline_has_one_vertex_per_row() {
        let svg = emit_plot(&[rows(&[1.0, 3.0, 2.0, 5.0])], "policy_loss").unwrap();
        assert_eq!(points_of(&svg, "curve").len(), 4);
        assert!(!svg.contains("class=\"band\""));
    }

    #[test]
    fn constant_metric_gives_flat_line_and_flat_band() {
        let runs = vec![rows(&[2.0; 5]), rows(&[2.0; 5])];
        let svg = emit_plot(&runs, "policy_loss").unwrap();
        let line = points_of(&svg, "curve");
        assert!(line.iter().all(|p| p.1 == line[0].1));
        let band = points_of(&svg, "band");
        assert!(band.iter().all(|p| p.1 == line[0].1));
    }

    #[test]
    fn band_is_mean_plus_minus_std() {
        let runs = vec![rows(&[0.0, 0.0]), rows(&[2.0, 4.0])];
        let svg = emit_plot(&runs, "policy_loss").unwrap();
        let band = points_of(&svg, "band");
        let line = points_of(&svg, "curve");
        assert_eq!(band.len(), 4);
        // Second step has mean 2, std 2: band spans [0, 4], the full y range.
        assert!((band[1].1 - MARGIN).abs() < 1e-3);
        assert!((band[2].1 - (HEIGHT - MARGIN)).abs() < 1e-3);
        assert!((line[1].1 - HEIGHT / 2.0).abs() < 1e-3);
    }

    #[test]
    fn plot_errors() {
        assert!(emit_plot(&[vec![]], "policy_loss").is_err());
        assert!(emit_plot(&[rows(&[1.0])], "no_such_field").is_err());
    }

    #[test]
    fn run_dir_round_trip_and_lock() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let cfg = RunConfig::default();
        {
            let mut run = RunDir::create(&root, &cfg).unwrap();
            assert!(RunDir::create(&root, &cfg).is_err());
            let row = MetricsRow { step: 3, bc_loss: Some(0.25), ..Default::default() };
            run.metrics(&row).unwrap();
            run.checkpoint(&Checkpoint::of(3, "policy", &Mlp::zeros(&[2, 1]))).unwrap();
            run.evaluation(&record(&[1.0, 2.0])).unwrap();
            run.write_report(&serde_json::json!({"ok": true})).unwrap();
        }
        assert!(!root.join(LOCK_FILE).exists());
        assert_eq!(read_metrics(&root.join(METRICS_FILE)).unwrap()[0].bc_loss, Some(0.25));
        let header = fs::read_to_string(root.join(METRICS_FILE)).unwrap();
        assert!(header.starts_with("step,fqe_loss,bc_loss,mmd_loss,policy_loss,eval_return_mean,eval_return_min\n"));
        let ck = read_checkpoints(&root.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck[0].to_mlp().unwrap(), Mlp::zeros(&[2, 1]));
        assert_eq!(read_eval_log(&root.join(EVAL_FILE)).unwrap()[0].returns, vec![1.0, 2.0]);
        let back = RunConfig::from_toml(&fs::read_to_string(root.join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
