//! Seed aggregation, FLUX-to-FLUX-CN style delta rows, and the text/CSV
//! renderings of result tables. Values here are mAP in percent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{MapReport, MetricsError};
use crate::generation::Regime;

/// One finished detector run, mAP in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: String,
    /// Absent for configurations that do not depend on the real-data regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    pub seed: u64,
    pub map50: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map5095: Option<f64>,
}

impl RunMetrics {
    pub fn from_report(config: impl Into<String>, regime: Option<Regime>, seed: u64, report: &MapReport) -> Self {
        Self {
            config: config.into(),
            regime,
            seed,
            map50: report.map50 * 100.0,
            map5095: Some(report.map5095 * 100.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// `"62.9 [3.0]"`.
    pub fn cell(&self) -> String {
        format!("{:.1} [{:.1}]", self.mean, self.std)
    }
}

/// Mean and sample standard deviation (n - 1); the deviation of a single
/// value is 0.
pub fn mean_std(values: &[f64]) -> Result<MeanStd, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    pub run_count: usize,
    pub seeds: Vec<u64>,
    pub map50: MeanStd,
    /// Present when every run reported it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map5095: Option<MeanStd>,
}

impl ConfigAggregate {
    pub fn key(&self) -> String {
        match self.regime {
            Some(r) => format!("{}@{r}", self.config),
            None => self.config.clone(),
        }
    }
}

/// Aggregates in first-appearance order of (config, regime).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_config: Vec<ConfigAggregate>,
    pub run_count: usize,
}

impl AggregateReport {
    pub fn get(&self, config: &str, regime: Option<Regime>) -> Option<&ConfigAggregate> {
        self.per_config.iter().find(|c| c.config == config && c.regime == regime)
    }

    /// Picks the listed (config, regime) entries in the given order under new
    /// names. Missing entries are an alignment error.
    pub fn relabel(&self, mapping: &[(&str, Option<Regime>, &str)]) -> Result<AggregateReport, MetricsError> {
        let per_config = mapping
            .iter()
            .map(|&(from, regime, to)| {
                self.get(from, regime)
                    .map(|c| ConfigAggregate {
                        config: to.to_string(),
                        ..c.clone()
                    })
                    .ok_or_else(|| {
                        MetricsError::Alignment(format!(
                            "no runs for {from}{}",
                            regime.map(|r| format!(" at {r}")).unwrap_or_default()
                        ))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AggregateReport {
            run_count: per_config.iter().map(|c| c.run_count).sum(),
            per_config,
        })
    }
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateReport, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: Vec<((String, Option<Regime>), Vec<&RunMetrics>)> = Vec::new();
    for r in runs {
        let key = (r.config.clone(), r.regime);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let per_config = groups
        .into_iter()
        .map(|((config, regime), rs)| {
            let map50 = mean_std(&rs.iter().map(|r| r.map50).collect::<Vec<_>>())?;
            let m5095: Option<Vec<f64>> = rs.iter().map(|r| r.map5095).collect();
            Ok(ConfigAggregate {
                config,
                regime,
                run_count: rs.len(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                map50,
                map5095: m5095.map(|v| mean_std(&v)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(AggregateReport {
        per_config,
        run_count: runs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    pub baseline: MeanStd,
    pub variant: MeanStd,
    /// mAP50 difference rounded to one decimal.
    pub delta: f64,
}

/// `+4.1`, `-1.9`, `0.0`.
pub fn format_delta(delta: f64) -> String {
    let rounded = (delta * 10.0).round() / 10.0;
    if rounded == 0.0 {
        "0.0".to_string()
    } else {
        format!("{rounded:+.1}")
    }
}

/// Variant minus baseline mAP50 for each config, in the baseline's order.
/// Both reports must hold exactly the same (config, regime) keys.
pub fn delta_table(baseline: &AggregateReport, variant: &AggregateReport) -> Result<Vec<DeltaRow>, MetricsError> {
    if baseline.per_config.len() != variant.per_config.len() {
        return Err(MetricsError::Alignment(format!(
            "{} baseline configs, {} variant configs",
            baseline.per_config.len(),
            variant.per_config.len()
        )));
    }
    baseline
        .per_config
        .iter()
        .map(|b| {
            let v = variant
                .get(&b.config, b.regime)
                .ok_or_else(|| MetricsError::Alignment(format!("variant has no {}", b.key())))?;
            Ok(DeltaRow {
                config: b.config.clone(),
                regime: b.regime,
                baseline: b.map50,
                variant: v.map50,
                delta: ((v.map50.mean - b.map50.mean) * 10.0).round() / 10.0,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<String>,
}

fn render_grid(header: &[String], rows: &[Vec<String>], rules_after: &[usize]) -> String {
    let cols = header.len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            std::iter::once(&header[c])
                .chain(rows.iter().map(|r| &r[c]))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                s.push_str(" | ");
            }
            let pad = widths[c] - cell.chars().count();
            s.push_str(cell);
            if c + 1 < cols {
                s.push_str(&" ".repeat(pad));
            }
        }
        s.trim_end().to_string()
    };
    let rule: String = "-".repeat(widths.iter().sum::<usize>() + 3 * (cols - 1));
    let mut out = String::new();
    writeln!(out, "{}", line(header)).unwrap();
    writeln!(out, "{rule}").unwrap();
    for (i, r) in rows.iter().enumerate() {
        writeln!(out, "{}", line(r)).unwrap();
        if rules_after.contains(&i) {
            writeln!(out, "{rule}").unwrap();
        }
    }
    out
}

/// mAP50 and mAP50:95 per regime, one row per configuration:
///
/// ```text
/// Training data | mAP50 r8   | mAP50 r24  | mAP50:95 r8 | mAP50:95 r24
/// ```
///
/// Regime-independent configurations repeat their value under both regimes.
/// `rows` lists (row label, config name).
pub fn render_map_table(report: &AggregateReport, rows: &[(&str, &str)]) -> String {
    let regimes = Regime::ALL;
    let mut header = vec!["Training data".to_string()];
    for m in ["mAP50", "mAP50:95"] {
        header.extend(regimes.iter().map(|r| format!("{m} {r}")));
    }
    let mut body = Vec::new();
    let mut rules = Vec::new();
    for (i, (label, config)) in rows.iter().enumerate() {
        let lookup = |r: Regime| report.get(config, Some(r)).or_else(|| report.get(config, None));
        if regimes.iter().all(|&r| report.get(config, Some(r)).is_none()) && report.get(config, None).is_some() {
            rules.push(i);
        }
        let mut cells = vec![label.to_string()];
        cells.extend(regimes.iter().map(|&r| lookup(r).map(|c| c.map50.cell()).unwrap_or_else(|| "-".into())));
        cells.extend(
            regimes
                .iter()
                .map(|&r| lookup(r).and_then(|c| c.map5095).map(|m| m.cell()).unwrap_or_else(|| "-".into())),
        );
        body.push(cells);
    }
    render_grid(&header, &body, &rules)
}

/// Baseline, variant and delta per row, grouped by regime.
pub fn render_delta_table(rows: &[DeltaRow], baseline_name: &str, variant_name: &str) -> String {
    let header = vec![
        "Training data".to_string(),
        baseline_name.to_string(),
        variant_name.to_string(),
        format!("Delta ({baseline_name} -> {variant_name})"),
    ];
    let mut body = Vec::new();
    let mut rules = Vec::new();
    let mut current: Option<Option<Regime>> = None;
    for r in rows {
        if current != Some(r.regime) {
            if current.is_some() {
                rules.push(body.len() - 1);
            }
            current = Some(r.regime);
            if let Some(reg) = r.regime {
                body.push(vec![format!("[{} real per class]", reg.per_class()), String::new(), String::new(), String::new()]);
            }
        }
        body.push(vec![r.config.clone(), r.baseline.cell(), r.variant.cell(), format_delta(r.delta)]);
    }
    render_grid(&header, &body, &rules)
}

/// `config,regime,metric,mean,std` lines for bar charts.
pub fn bar_chart_csv(report: &AggregateReport) -> String {
    let mut out = String::from("config,regime,metric,mean,std\n");
    for c in &report.per_config {
        let regime = c.regime.map(|r| r.as_str()).unwrap_or("");
        writeln!(out, "{},{regime},map50,{:.4},{:.4}", c.config, c.map50.mean, c.map50.std).unwrap();
        if let Some(m) = c.map5095 {
            writeln!(out, "{},{regime},map5095,{:.4},{:.4}", c.config, m.mean, m.std).unwrap();
        }
    }
    out
}
