//! Tables and figures from a directory of run records.

use crate::error::{CliError, CliResult, Context};
use crate::plot::{bar_plot, line_plot, scatter_plot, Series};
use crate::run::{RunRecord, RunStatus};
use crate::sweep::find_records;
use delaylab::container::write_atomic;
use delaylab::embedmetrics::{correlate_reports, fit_line, MetricCorrelation, METRIC_NAMES};
use delaylab::models::ModelKind;
use delaylab::MetricReport;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Metrics drawn against epoch.
pub const EPOCH_PANELS: [&str; 4] = ["mlp_decode_r2", "linear_decode_r2", "neighbors_overlap", "conditional_variance"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub kind: ModelKind,
    pub d: usize,
    /// Noise variance bits; keys sort by value for non-negative noise.
    pub noise_bits: u64,
}

impl GroupKey {
    pub fn of(r: &RunRecord) -> Self {
        Self { kind: r.model.kind, d: r.model.d, noise_bits: r.noise_variance.to_bits() }
    }

    pub fn noise(&self) -> f64 {
        f64::from_bits(self.noise_bits)
    }

    pub fn label(&self) -> String {
        format!("{} d={}", self.kind, self.d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub median: f64,
}

/// Mean, standard error and median; standard error is 0 for a single value.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { n, mean, stderr, median: median(values) })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `100 · (high − low) / low`.
pub fn percent_growth(low: f64, high: f64) -> f64 {
    100.0 * (high - low) / low
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    /// `(epoch, validation MASE)` per epoch.
    pub curve: Vec<(usize, f64)>,
}

fn read_curve(dir: &Path, record: &RunRecord) -> Vec<(usize, f64)> {
    let from_log = std::fs::read_to_string(dir.join(&record.files.train_log)).ok().map(|text| {
        text.lines()
            .skip(1)
            .filter_map(|l| {
                let mut f = l.split(',');
                let e = f.next()?.parse().ok()?;
                let m = f.nth(1)?.parse().ok()?;
                Some((e, m))
            })
            .collect::<Vec<_>>()
    });
    match from_log {
        Some(c) if !c.is_empty() => c,
        _ => record.checkpoints.iter().map(|c| (c.epoch, c.validation_mase)).collect(),
    }
}

pub fn load_runs(dir: &Path) -> CliResult<Vec<LoadedRun>> {
    let runs: Vec<LoadedRun> = find_records(dir)?
        .into_iter()
        .map(|(d, record)| {
            let curve = read_curve(&d, &record);
            LoadedRun { dir: d, record, curve }
        })
        .collect();
    if runs.is_empty() {
        return Err(CliError::validation("records", format!("no {} under {}", crate::run::RECORD_FILE, dir.display())));
    }
    Ok(runs)
}

/// Final reports of runs that completed and reached MASE < 1.
pub fn included_finals(runs: &[LoadedRun]) -> Vec<&MetricReport> {
    runs.iter()
        .filter(|r| r.record.status == RunStatus::Complete && r.record.included)
        .filter_map(|r| r.record.final_report())
        .collect()
}

/// Everything `report` writes, keyed by file name.
#[derive(Debug, Default)]
pub struct ReportFiles {
    pub tables: BTreeMap<String, String>,
}

fn write(out: &Path, name: &str, text: &str, files: &mut ReportFiles) -> CliResult<()> {
    write_atomic(&out.join(name), text.as_bytes()).ctx(name)?;
    files.tables.insert(name.to_string(), text.to_string());
    Ok(())
}

fn by_group(runs: &[LoadedRun]) -> BTreeMap<GroupKey, Vec<&LoadedRun>> {
    let mut m: BTreeMap<GroupKey, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        m.entry(GroupKey::of(&r.record)).or_default().push(r);
    }
    m
}

fn noise_levels(runs: &[LoadedRun]) -> Vec<u64> {
    let mut v: Vec<u64> = runs.iter().map(|r| r.record.noise_variance.to_bits()).collect();
    v.sort_by(|a, b| f64::from_bits(*a).total_cmp(&f64::from_bits(*b)));
    v.dedup();
    v
}

fn learning_curves(runs: &[LoadedRun], out: &Path, files: &mut ReportFiles) -> CliResult<()> {
    let mut csv = String::from("kind,d,noise_variance,epoch,n,mean_mase,stderr\n");
    let mut per_noise: BTreeMap<u64, Vec<Series>> = BTreeMap::new();
    for (key, group) in by_group(runs) {
        let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in group {
            for &(e, m) in &r.curve {
                at.entry(e).or_default().push(m);
            }
        }
        let mut series = Series { label: key.label(), ..Series::default() };
        let mut band = Vec::new();
        for (e, vals) in at {
            let s = summarize(&vals).expect("non-empty");
            let _ = writeln!(csv, "{},{},{},{},{},{},{}", key.kind, key.d, key.noise(), e, s.n, s.mean, s.stderr);
            series.points.push((e as f64, s.mean));
            band.push(s.stderr);
        }
        series.band = Some(band);
        per_noise.entry(key.noise_bits).or_default().push(series);
    }
    write(out, "learning_curves.csv", &csv, files)?;
    for (noise, series) in per_noise {
        let v = f64::from_bits(noise);
        line_plot(&out.join(format!("learning_curves_noise{v}.svg")), &format!("Validation MASE, noise {v}"), "epoch", "MASE", &series)?;
    }
    Ok(())
}

fn metrics_vs_epoch(runs: &[LoadedRun], out: &Path, files: &mut ReportFiles) -> CliResult<()> {
    let mut csv = String::from("kind,d,noise_variance,epoch,metric,n,mean,stderr\n");
    let mut panels: BTreeMap<&str, Vec<Series>> = BTreeMap::new();
    for (key, group) in by_group(runs) {
        for metric in std::iter::once("mase").chain(METRIC_NAMES) {
            let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in &group {
                for rep in &r.record.reports {
                    if let Some(v) = rep.metric(metric) {
                        at.entry(rep.epoch).or_default().push(v);
                    }
                }
            }
            let mut series = Series { label: format!("{} noise {}", key.label(), key.noise()), ..Series::default() };
            let mut band = Vec::new();
            for (e, vals) in at {
                let s = summarize(&vals).expect("non-empty");
                let _ = writeln!(csv, "{},{},{},{},{},{},{},{}", key.kind, key.d, key.noise(), e, metric, s.n, s.mean, s.stderr);
                series.points.push((e as f64, s.mean));
                band.push(s.stderr);
            }
            series.band = Some(band);
            if let Some(p) = EPOCH_PANELS.iter().find(|p| **p == metric) {
                panels.entry(p).or_default().push(series);
            }
        }
    }
    write(out, "metrics_vs_epoch.csv", &csv, files)?;
    for (metric, series) in panels {
        line_plot(&out.join(format!("metric_vs_epoch_{metric}.svg")), metric, "epoch", metric, &series)?;
    }
    Ok(())
}

fn correlation_rows(stratum: &str, table: &[MetricCorrelation], csv: &mut String) {
    for c in table {
        let (slope, intercept, r2) = match &c.fit {
            Some(f) => (format!("{}", f.slope), format!("{}", f.intercept), format!("{}", f.r2)),
            None => Default::default(),
        };
        let _ = writeln!(csv, "{stratum},{},{},{},{},{slope},{intercept},{r2}", c.metric, c.transform, c.n, opt(c.pearson));
    }
}

fn metric_vs_mase(runs: &[LoadedRun], out: &Path, files: &mut ReportFiles) -> CliResult<()> {
    let finals = included_finals(runs);
    let mut csv = format!("kind,d,noise_variance,seed,final_mase,{}\n", METRIC_NAMES.join(","));
    for r in &finals {
        let vals: Vec<String> = METRIC_NAMES.iter().map(|m| opt(r.metric(m))).collect();
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.kind, r.d, r.noise_variance, r.seed, r.mase, vals.join(","));
    }
    write(out, "metric_vs_mase.csv", &csv, files)?;

    let mut corr = String::from("stratum,metric,transform,n,pearson,slope,intercept,r2\n");
    let owned: Vec<MetricReport> = finals.iter().map(|r| (*r).clone()).collect();
    let pooled = correlate_reports(&owned).ok();
    if let Some(t) = &pooled {
        correlation_rows("pooled", t, &mut corr);
    }
    for noise in noise_levels(runs) {
        let sub: Vec<MetricReport> = owned.iter().filter(|r| r.noise_variance.to_bits() == noise).cloned().collect();
        if let Ok(t) = correlate_reports(&sub) {
            correlation_rows(&format!("noise={}", f64::from_bits(noise)), &t, &mut corr);
        }
    }
    write(out, "correlations.csv", &corr, files)?;

    for metric in METRIC_NAMES {
        let decoder = metric.ends_with("decode_r2");
        let mut groups: BTreeMap<GroupKey, Series> = BTreeMap::new();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for r in &finals {
            if let Some(v) = r.metric(metric) {
                let y = if decoder { 1.0 - v } else { v };
                let key = GroupKey { kind: r.kind, d: r.d, noise_bits: r.noise_variance.to_bits() };
                groups
                    .entry(key)
                    .or_insert_with(|| Series { label: format!("{} noise {}", key.label(), key.noise()), ..Series::default() })
                    .points
                    .push((r.mase, y));
                xs.push(r.mase);
                ys.push(y);
            }
        }
        if xs.is_empty() {
            continue;
        }
        let fit = fit_line(&xs, &ys).map(|f| (f.slope, f.intercept, format!("fit R2={:.3}", f.r2)));
        let ylabel = if decoder { format!("1 - {metric}") } else { metric.to_string() };
        let series: Vec<Series> = groups.into_values().collect();
        scatter_plot(&out.join(format!("metric_vs_mase_{metric}.svg")), &ylabel, "final MASE", &ylabel, &series, fit)?;
    }
    Ok(())
}

fn final_mase_by_noise(runs: &[LoadedRun], out: &Path, files: &mut ReportFiles) -> CliResult<()> {
    let mut csv = String::from("kind,d,noise_variance,n,mean_mase,stderr,median_mase\n");
    let mut bars = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in included_finals(runs) {
        groups.entry(GroupKey { kind: r.kind, d: r.d, noise_bits: r.noise_variance.to_bits() }).or_default().push(r.mase);
    }
    for (key, vals) in groups {
        let s = summarize(&vals).expect("non-empty");
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", key.kind, key.d, key.noise(), s.n, s.mean, s.stderr, s.median);
        bars.push((format!("{} {} n{}", key.kind, key.d, key.noise()), s.mean, s.stderr));
    }
    write(out, "final_mase_by_noise.csv", &csv, files)?;
    bar_plot(&out.join("final_mase_by_noise.svg"), "Final validation MASE", "MASE", &bars)
}

/// Per-(kind, d, seed) growth between the lowest and highest noise level.
pub fn growth_pairs(runs: &[LoadedRun]) -> Vec<(ModelKind, usize, u64, f64, f64, f64)> {
    let levels = noise_levels(runs);
    let (Some(&lo), Some(&hi)) = (levels.first(), levels.last()) else { return Vec::new() };
    if lo == hi {
        return Vec::new();
    }
    let mut by: BTreeMap<(ModelKind, usize, u64), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in runs {
        let rec = &r.record;
        let Some(m) = rec.final_mase.filter(|_| rec.included) else { continue };
        let e = by.entry((rec.model.kind, rec.model.d, rec.seed)).or_default();
        let bits = rec.noise_variance.to_bits();
        if bits == lo {
            e.0 = Some(m);
        } else if bits == hi {
            e.1 = Some(m);
        }
    }
    by.into_iter()
        .filter_map(|((k, d, s), (a, b))| Some((k, d, s, a?, b?, percent_growth(a?, b?))))
        .collect()
}

fn growth(runs: &[LoadedRun], out: &Path, files: &mut ReportFiles) -> CliResult<()> {
    let pairs = growth_pairs(runs);
    let mut csv = String::from("kind,d,seed,mase_low_noise,mase_high_noise,growth_percent\n");
    let mut per_kind: BTreeMap<ModelKind, Vec<f64>> = BTreeMap::new();
    for (k, d, s, a, b, g) in &pairs {
        let _ = writeln!(csv, "{k},{d},{s},{a},{b},{g}");
        per_kind.entry(*k).or_default().push(*g);
    }
    write(out, "percent_growth.csv", &csv, files)?;
    let mut summary = String::from("kind,n,median_growth_percent,mean_growth_percent,stderr\n");
    let mut bars = Vec::new();
    for (k, vals) in per_kind {
        let s = summarize(&vals).expect("non-empty");
        let _ = writeln!(summary, "{k},{},{},{},{}", s.n, s.median, s.mean, s.stderr);
        bars.push((k.to_string(), s.mean, s.stderr));
    }
    write(out, "percent_growth_summary.csv", &summary, files)?;
    bar_plot(&out.join("percent_growth.svg"), "MASE growth with noise (%)", "percent", &bars)
}

fn pc_scatter(runs: &[LoadedRun], out: &Path, files: &mut ReportFiles) -> CliResult<()> {
    let mut best: BTreeMap<ModelKind, &LoadedRun> = BTreeMap::new();
    for r in runs {
        let (Some(m), Some(_)) = (r.record.final_mase, &r.record.files.embedding_pcs) else { continue };
        let e = best.entry(r.record.model.kind).or_insert(r);
        if m < e.record.final_mase.unwrap_or(f64::INFINITY) {
            *e = r;
        }
    }
    for (kind, r) in best {
        let name = r.record.files.embedding_pcs.as_ref().expect("filtered");
        let Ok(text) = std::fs::read_to_string(r.dir.join(name)) else { continue };
        let stem = format!("pc_scatter_{}_d{}", kind, r.record.model.d);
        write(out, &format!("{stem}.csv"), &text, files)?;
        let header: Vec<&str> = text.lines().next().unwrap_or_default().split(',').collect();
        let n_pc = header.iter().filter(|h| h.starts_with("pc")).count();
        let rows: Vec<Vec<f64>> =
            text.lines().skip(1).map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect()).collect();
        let mut series = Vec::new();
        for (a, b) in [(0usize, 1usize), (2, 3)] {
            if b < n_pc {
                series.push(Series {
                    label: format!("pc{} vs pc{}", a + 1, b + 1),
                    points: rows.iter().map(|v| (v[2 + a], v[2 + b])).collect(),
                    band: None,
                });
            }
        }
        if !series.is_empty() {
            scatter_plot(&out.join(format!("{stem}.svg")), &format!("{kind} embedding, top PCs"), "PC", "PC", &series, None)?;
        }
    }
    Ok(())
}

/// Write all tables and figures for the records under `records`.
pub fn report(records: &Path, out: &Path) -> CliResult<ReportFiles> {
    let runs = load_runs(records)?;
    std::fs::create_dir_all(out).ctx(&out.display().to_string())?;
    let mut files = ReportFiles::default();
    learning_curves(&runs, out, &mut files)?;
    metrics_vs_epoch(&runs, out, &mut files)?;
    metric_vs_mase(&runs, out, &mut files)?;
    final_mase_by_noise(&runs, out, &mut files)?;
    growth(&runs, out, &mut files)?;
    pc_scatter(&runs, out, &mut files)?;
    Ok(files)
}
