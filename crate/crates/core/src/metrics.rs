//! Aggregation of raw simulation series into report tables and charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edgesim::SimulationRawResults;

pub const DEFAULT_WARMUP: f64 = 15_000.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no requests were served, shares are undefined")]
    ZeroTotal,
    #[error("simulation lasts {duration} s, not longer than the {warmup} s warmup")]
    DurationTooShort { duration: f64, warmup: f64 },
    #[error("raw results contain no MDC samples")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub t: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub mdc_id: usize,
    pub served_inference: u64,
    pub served_training: u64,
    pub share_pct: f64,
    pub busy_thread_s: f64,
    pub thread_share_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub mdc_id: Option<usize>,
    pub mean_w: f64,
    pub idle_w: f64,
    pub dynamic_w: f64,
    pub dynamic_share: f64,
    pub energy_wh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub warmup: f64,
    /// First sample instant at or after the warmup.
    pub window_start: f64,
    pub window_end: f64,
    pub per_mdc: Vec<PowerRow>,
    pub total: PowerRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub tag: String,
    pub n_mdcs: usize,
    pub utilization: Vec<EnvelopePoint>,
    pub busy_utilization: Vec<EnvelopePoint>,
    pub live_agents: Vec<(f64, u64)>,
    /// `(t, cumulative rejections per MDC)`.
    pub rejections: Vec<(f64, Vec<u64>)>,
    pub shares: Vec<ShareRow>,
    pub power: Option<PowerSummary>,
    /// Time-average of the mean reservation utilization after warmup.
    pub warm_utilization_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub warmup: f64,
    pub scenarios: BTreeMap<String, ScenarioReport>,
}

fn grouped_by_time(raw: &SimulationRawResults) -> Vec<(f64, Vec<&crate::edgesim::SampleRow>)> {
    let mut out: Vec<(f64, Vec<&crate::edgesim::SampleRow>)> = Vec::new();
    for row in &raw.samples {
        match out.last_mut() {
            Some((t, rows)) if *t == row.t => rows.push(row),
            _ => out.push((row.t, vec![row])),
        }
    }
    out
}

fn envelope(raw: &SimulationRawResults, value: impl Fn(&crate::edgesim::SampleRow) -> f64) -> Vec<EnvelopePoint> {
    grouped_by_time(raw)
        .into_iter()
        .map(|(t, rows)| {
            let vals: Vec<f64> = rows.iter().map(|r| value(r)).collect();
            EnvelopePoint {
                t,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Pointwise mean/min/max of reserved-thread utilization across MDCs.
pub fn utilization_envelope(raw: &SimulationRawResults) -> Vec<EnvelopePoint> {
    let cap = raw.meta.config.mdc.capacity() as f64;
    envelope(raw, |r| r.reserved_threads as f64 / cap)
}

/// Same as [`utilization_envelope`] but counting executing threads.
pub fn busy_utilization_envelope(raw: &SimulationRawResults) -> Vec<EnvelopePoint> {
    let cap = raw.meta.config.mdc.capacity() as f64;
    envelope(raw, |r| r.busy_threads as f64 / cap)
}

pub fn rejection_series(raw: &SimulationRawResults) -> Vec<(f64, Vec<u64>)> {
    grouped_by_time(raw)
        .into_iter()
        .map(|(t, rows)| (t, rows.iter().map(|r| r.rejections_cum).collect()))
        .collect()
}

/// Served-request percentage per MDC, with thread-second shares alongside.
pub fn task_shares(raw: &SimulationRawResults) -> Result<Vec<ShareRow>, MetricsError> {
    let last = grouped_by_time(raw).pop().ok_or(MetricsError::Empty)?.1;
    let served = |r: &crate::edgesim::SampleRow| r.served_inference_cum + r.served_training_cum;
    let total: u64 = last.iter().map(|r| served(r)).sum();
    if total == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    let total_ts: f64 = last.iter().map(|r| r.busy_thread_s_cum).sum();
    Ok(last
        .iter()
        .map(|r| ShareRow {
            mdc_id: r.mdc_id,
            served_inference: r.served_inference_cum,
            served_training: r.served_training_cum,
            share_pct: served(r) as f64 / total as f64 * 100.0,
            busy_thread_s: r.busy_thread_s_cum,
            thread_share_pct: if total_ts > 0.0 { r.busy_thread_s_cum / total_ts * 100.0 } else { 0.0 },
        })
        .collect())
}

/// Mean power after `warmup`, split into the fixed idle floor and the
/// dynamic part. Energy covers the whole run.
pub fn power_summary(raw: &SimulationRawResults, warmup: f64) -> Result<PowerSummary, MetricsError> {
    let groups = grouped_by_time(raw);
    let (t_end, last) = groups.last().ok_or(MetricsError::Empty)?;
    if warmup >= *t_end {
        return Err(MetricsError::DurationTooShort { duration: *t_end, warmup });
    }
    let (t_start, first) = groups.iter().find(|(t, _)| *t >= warmup).expect("t_end > warmup");
    let cfg = &raw.meta.config;
    let idle_w = cfg.power.idle_w * cfg.mdc.pus as f64;
    let span = t_end - t_start;
    let per_mdc: Vec<PowerRow> = first
        .iter()
        .zip(last.iter())
        .map(|(a, b)| {
            let mean_w = (b.energy_j_cum - a.energy_j_cum) / span;
            let dynamic_w = mean_w - idle_w;
            PowerRow {
                mdc_id: Some(a.mdc_id),
                mean_w,
                idle_w,
                dynamic_w,
                dynamic_share: dynamic_w / mean_w,
                energy_wh: b.energy_j_cum / 3600.0,
            }
        })
        .collect();
    let mean_w: f64 = per_mdc.iter().map(|r| r.mean_w).sum();
    let total_idle: f64 = per_mdc.iter().map(|r| r.idle_w).sum();
    let total = PowerRow {
        mdc_id: None,
        mean_w,
        idle_w: total_idle,
        dynamic_w: mean_w - total_idle,
        dynamic_share: (mean_w - total_idle) / mean_w,
        energy_wh: per_mdc.iter().map(|r| r.energy_wh).sum(),
    };
    Ok(PowerSummary {
        warmup,
        window_start: *t_start,
        window_end: *t_end,
        per_mdc,
        total,
    })
}

/// Trapezoid-rule energy of one MDC's interval-mean power series, in Wh.
pub fn trapezoid_energy_wh(raw: &SimulationRawResults, mdc: usize) -> f64 {
    let pts: Vec<(f64, f64)> = raw.series(mdc).map(|r| (r.t, r.mean_power_w)).collect();
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum::<f64>()
        / 3600.0
}

fn time_average(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return points.first().map(|p| p.1);
    }
    let span = points.last()?.0 - points.first()?.0;
    let area: f64 = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    Some(area / span)
}

pub fn scenario_report(tag: &str, raw: &SimulationRawResults, warmup: f64) -> ScenarioReport {
    let utilization = utilization_envelope(raw);
    let warm: Vec<(f64, f64)> = utilization.iter().filter(|p| p.t >= warmup).map(|p| (p.t, p.mean)).collect();
    ScenarioReport {
        tag: tag.to_string(),
        n_mdcs: raw.n_mdcs(),
        busy_utilization: busy_utilization_envelope(raw),
        live_agents: raw.live_agents.clone(),
        rejections: rejection_series(raw),
        shares: task_shares(raw).unwrap_or_default(),
        power: power_summary(raw, warmup).ok(),
        warm_utilization_mean: time_average(&warm),
        utilization,
    }
}

pub fn build_report<'a>(runs: impl IntoIterator<Item = (&'a str, &'a SimulationRawResults)>, warmup: f64) -> SimulationReport {
    SimulationReport {
        warmup,
        scenarios: runs
            .into_iter()
            .map(|(tag, raw)| (tag.to_string(), scenario_report(tag, raw, warmup)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub n_mdcs: usize,
    pub mean_power_w: Option<f64>,
    pub idle_power_w: Option<f64>,
    pub dynamic_power_w: Option<f64>,
    pub dynamic_share: Option<f64>,
    pub energy_wh: Option<f64>,
    pub warm_utilization_mean: Option<f64>,
    pub rejections_total: u64,
    pub shares_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub warmup: f64,
    pub scenarios: BTreeMap<String, ScenarioSummary>,
    /// `"A/B"` -> ratio of warmed-up total mean power.
    pub power_ratios: BTreeMap<String, f64>,
    /// `"A/B"` -> ratio of warmed-up dynamic power.
    pub dynamic_ratios: BTreeMap<String, f64>,
}

impl SimulationReport {
    pub fn summary(&self) -> ReportSummary {
        let scenarios: BTreeMap<String, ScenarioSummary> = self
            .scenarios
            .iter()
            .map(|(tag, s)| {
                let p = s.power.as_ref().map(|p| &p.total);
                (
                    tag.clone(),
                    ScenarioSummary {
                        n_mdcs: s.n_mdcs,
                        mean_power_w: p.map(|p| p.mean_w),
                        idle_power_w: p.map(|p| p.idle_w),
                        dynamic_power_w: p.map(|p| p.dynamic_w),
                        dynamic_share: p.map(|p| p.dynamic_share),
                        energy_wh: p.map(|p| p.energy_wh),
                        warm_utilization_mean: s.warm_utilization_mean,
                        rejections_total: s.rejections.last().map_or(0, |(_, v)| v.iter().sum()),
                        shares_pct: s.shares.iter().map(|r| r.share_pct).collect(),
                    },
                )
            })
            .collect();
        let mut power_ratios = BTreeMap::new();
        let mut dynamic_ratios = BTreeMap::new();
        for (a, sa) in &scenarios {
            for (b, sb) in &scenarios {
                if a == b {
                    continue;
                }
                if let (Some(x), Some(y)) = (sa.mean_power_w, sb.mean_power_w) {
                    power_ratios.insert(format!("{a}/{b}"), x / y);
                }
                if let (Some(x), Some(y)) = (sa.dynamic_power_w, sb.dynamic_power_w) {
                    if y > 0.0 {
                        dynamic_ratios.insert(format!("{a}/{b}"), x / y);
                    }
                }
            }
        }
        ReportSummary {
            warmup: self.warmup,
            scenarios,
            power_ratios,
            dynamic_ratios,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), MetricsError> {
    fs::write(path, contents).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn utilization_csv(s: &ScenarioReport) -> String {
    let mut out = String::from("t,mean,min,max,busy_mean,busy_min,busy_max,live_agents\n");
    for (i, p) in s.utilization.iter().enumerate() {
        let b = s.busy_utilization[i];
        let live = s.live_agents.get(i).map_or(0, |l| l.1);
        let _ = writeln!(
            out,
            "{:.3},{},{},{},{},{},{},{live}",
            p.t,
            f6(p.mean),
            f6(p.min),
            f6(p.max),
            f6(b.mean),
            f6(b.min),
            f6(b.max)
        );
    }
    out
}

pub fn rejections_csv(s: &ScenarioReport) -> String {
    let mut out = String::from("t");
    for m in 0..s.n_mdcs {
        let _ = write!(out, ",mdc_{m}");
    }
    out.push('\n');
    for (t, v) in &s.rejections {
        let _ = write!(out, "{t:.3}");
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn shares_csv(s: &ScenarioReport) -> String {
    let mut out = String::from("mdc_id,served_inference,served_training,share_pct,busy_thread_s,thread_share_pct\n");
    for r in &s.shares {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mdc_id,
            r.served_inference,
            r.served_training,
            f6(r.share_pct),
            f6(r.busy_thread_s),
            f6(r.thread_share_pct)
        );
    }
    out
}

pub fn power_csv(s: &ScenarioReport) -> String {
    let mut out = String::from("mdc_id,mean_w,idle_w,dynamic_w,dynamic_share,energy_wh\n");
    if let Some(p) = &s.power {
        for r in p.per_mdc.iter().chain(std::iter::once(&p.total)) {
            let id = r.mdc_id.map_or("total".to_string(), |m| m.to_string());
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{}",
                f6(r.mean_w),
                f6(r.idle_w),
                f6(r.dynamic_w),
                f6(r.dynamic_share),
                f6(r.energy_wh)
            );
        }
    }
    out
}

/// Writes `<out>/<tag>/{utilization,rejections,shares,power}.{csv,svg}` and
/// `<out>/summary.json`.
pub fn render_report(report: &SimulationReport, out_dir: impl AsRef<Path>) -> Result<(), MetricsError> {
    let out_dir = out_dir.as_ref();
    let mk = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| MetricsError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    mk(out_dir)?;
    for (tag, s) in &report.scenarios {
        let dir = out_dir.join(tag);
        mk(&dir)?;
        write_file(&dir.join("utilization.csv"), &utilization_csv(s))?;
        write_file(&dir.join("rejections.csv"), &rejections_csv(s))?;
        write_file(&dir.join("shares.csv"), &shares_csv(s))?;
        write_file(&dir.join("power.csv"), &power_csv(s))?;

        let util = vec![
            ("mean".to_string(), s.utilization.iter().map(|p| (p.t, p.mean)).collect()),
            ("min".to_string(), s.utilization.iter().map(|p| (p.t, p.min)).collect()),
            ("max".to_string(), s.utilization.iter().map(|p| (p.t, p.max)).collect()),
        ];
        write_file(
            &dir.join("utilization.svg"),
            &svg::line_chart(&format!("{tag}: MDC reservation utilization"), "time (s)", &util),
        )?;
        let rej: Vec<(String, Vec<(f64, f64)>)> = (0..s.n_mdcs)
            .map(|m| {
                (
                    format!("mdc_{m}"),
                    s.rejections.iter().map(|(t, v)| (*t, v[m] as f64)).collect(),
                )
            })
            .collect();
        write_file(
            &dir.join("rejections.svg"),
            &svg::line_chart(&format!("{tag}: rejected sessions"), "time (s)", &rej),
        )?;
        let bars: Vec<(String, Vec<f64>)> = s
            .shares
            .iter()
            .map(|r| (format!("mdc_{}", r.mdc_id), vec![r.share_pct]))
            .collect();
        write_file(
            &dir.join("shares.svg"),
            &svg::bar_chart(&format!("{tag}: served request share (%)"), &["share"], &bars),
        )?;
        let bars: Vec<(String, Vec<f64>)> = s
            .power
            .iter()
            .flat_map(|p| p.per_mdc.iter())
            .map(|r| (format!("mdc_{}", r.mdc_id.unwrap_or(0)), vec![r.idle_w, r.dynamic_w.max(0.0)]))
            .collect();
        write_file(
            &dir.join("power.svg"),
            &svg::bar_chart(&format!("{tag}: mean power after warmup (W)"), &["idle", "dynamic"], &bars),
        )?;
    }
    let summary = serde_json::to_string_pretty(&report.summary()).expect("summary serializes");
    write_file(&out_dir.join("summary.json"), &(summary + "\n"))
}

/// Minimal standalone SVG charts.
pub mod svg {
    use std::fmt::Write as _;

    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 9] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    ];

    fn header(title: &str) -> String {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        );
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
        let _ = writeln!(
            s,
            "<path d=\"M{PAD},{PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
            H - PAD,
            W - PAD
        );
        s
    }

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    /// One `<polyline>` per series, one vertex per point.
    pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
        let all = series.iter().flat_map(|(_, pts)| pts.iter());
        let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= 0.0 {
            y1 = 1.0;
        }
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - y / y1 * (H - 2.0 * PAD);
        let mut s = header(title);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>", W / 2.0, H - 12.0, escape(x_label));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>", PAD - 4.0, PAD + 4.0, y1);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">0</text>", PAD - 4.0, H - PAD);
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                "<polyline data-series=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                escape(name),
                coords.join(" ")
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{}</text>",
                W - PAD + 4.0,
                PAD + 12.0 * i as f64,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Stacked bars, one per category.
    pub fn bar_chart(title: &str, stack_names: &[&str], bars: &[(String, Vec<f64>)]) -> String {
        let top = bars
            .iter()
            .map(|(_, v)| v.iter().sum::<f64>())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let n = bars.len().max(1) as f64;
        let slot = (W - 2.0 * PAD) / n;
        let scale = |v: f64| v / top * (H - 2.0 * PAD);
        let mut s = header(title);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.1}</text>", PAD - 4.0, PAD + 4.0, top);
        for (i, (name, stack)) in bars.iter().enumerate() {
            let x = PAD + slot * i as f64 + slot * 0.15;
            let mut base = H - PAD;
            for (j, v) in stack.iter().enumerate() {
                let h = scale(*v);
                base -= h;
                let _ = writeln!(
                    s,
                    "<rect data-stack=\"{}\" x=\"{x:.2}\" y=\"{base:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
                    escape(stack_names.get(j).copied().unwrap_or("")),
                    slot * 0.7,
                    COLORS[j % COLORS.len()]
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
                x + slot * 0.35,
                H - PAD + 14.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
