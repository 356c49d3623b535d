//! Result tables and bar-chart data from stored per-run metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gensynth_core::generation::Regime;
use gensynth_core::metrics::{
    aggregate_runs, bar_chart_csv, delta_table, render_delta_table, render_map_table, AggregateReport, DeltaRow,
    RunMetrics,
};
use serde::Serialize;

use crate::failure::Failure;
use crate::pipeline::Ctx;

/// Row label and config name, in table order.
const MAP_ROWS: [(&str, &str); 9] = [
    ("3d-model-sim", "sim"),
    ("real only", "real"),
    ("FLUX", "flux"),
    ("real + 3d-model-sim", "real+sim"),
    ("real + FLUX", "real+flux"),
    ("real + FLUX + 3d-model-sim", "real+flux+sim"),
    ("FLUX-CN", "flux_cn"),
    ("real + FLUX-CN", "real+flux_cn"),
    ("real + FLUX-CN + 3d-model-sim", "real+flux_cn+sim"),
];

/// (baseline config, variant config, row label with `{n}` for the real count).
const DELTA_ROWS: [(&str, &str, &str); 3] = [
    ("flux", "flux_cn", "synthetic only"),
    ("real+flux", "real+flux_cn", "+ {n} real"),
    ("real+flux+sim", "real+flux_cn+sim", "+ {n} real + 3d-model-sim"),
];

#[derive(Clone, Debug, Serialize)]
pub struct Rendered {
    pub aggregate: AggregateReport,
    pub deltas: Vec<DeltaRow>,
    pub map_table: String,
    pub delta_table: String,
    pub bars_csv: String,
}

pub fn read_runs(path: &Path) -> Result<Vec<RunMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::dependency(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// `metrics/<regime>/runs.jsonl` files under a run directory.
pub fn find_runs(run_dir: &Path) -> Vec<PathBuf> {
    Regime::ALL
        .iter()
        .map(|r| run_dir.join("metrics").join(r.as_str()).join("runs.jsonl"))
        .filter(|p| p.exists())
        .collect()
}

pub fn render(runs: &[RunMetrics]) -> Result<Rendered> {
    let aggregate = aggregate_runs(runs)?;
    let mut rows: Vec<(&str, &str)> = MAP_ROWS
        .iter()
        .copied()
        .filter(|(_, c)| aggregate.per_config.iter().any(|a| a.config == *c))
        .collect();
    // Configurations outside the reference layout go at the end under their
    // own names.
    let mut extra: Vec<&str> = Vec::new();
    for a in &aggregate.per_config {
        if !MAP_ROWS.iter().any(|(_, c)| *c == a.config) && !extra.contains(&a.config.as_str()) {
            extra.push(&a.config);
        }
    }
    rows.extend(extra.iter().map(|c| (*c, *c)));

    let mut map_table = String::from("mAP on the real test set, mean [std] over runs\n\n");
    map_table.push_str(&render_map_table(&aggregate, &rows));

    let mut deltas = Vec::new();
    let mut delta_text = String::from("mAP50 on the real test set, mean [std] over runs\n\n");
    for regime in Regime::ALL {
        let n = regime.per_class();
        let labels: Vec<String> = DELTA_ROWS.iter().map(|(_, _, l)| l.replace("{n}", &n.to_string())).collect();
        let base_map: Vec<(&str, Option<Regime>, &str)> =
            DELTA_ROWS.iter().zip(&labels).map(|((b, _, _), l)| (*b, Some(regime), l.as_str())).collect();
        let var_map: Vec<(&str, Option<Regime>, &str)> =
            DELTA_ROWS.iter().zip(&labels).map(|((_, v, _), l)| (*v, Some(regime), l.as_str())).collect();
        let (Ok(base), Ok(var)) = (aggregate.relabel(&base_map), aggregate.relabel(&var_map)) else {
            writeln!(delta_text, "[{n} real per class: runs missing, section skipped]").unwrap();
            continue;
        };
        deltas.extend(delta_table(&base, &var)?);
    }
    if !deltas.is_empty() {
        delta_text.push_str(&render_delta_table(&deltas, "FLUX", "FLUX-CN"));
    }
    Ok(Rendered {
        bars_csv: bar_chart_csv(&aggregate),
        aggregate,
        deltas,
        map_table,
        delta_table: delta_text,
    })
}

fn load_all(files: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    let mut runs = Vec::new();
    for f in files {
        runs.extend(read_runs(f)?);
    }
    if runs.is_empty() {
        return Err(Failure::dependency("no run metrics found; run `gensynth evaluate` first").into());
    }
    Ok(runs)
}

const OUTPUTS: [&str; 4] = ["aggregate.json", "table_map.txt", "table_delta.txt", "bars.csv"];

fn write_outputs(out_dir: &Path, r: &Rendered, write_json: &mut dyn FnMut(PathBuf, &Rendered) -> Result<()>) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = OUTPUTS.iter().map(|n| out_dir.join(n)).collect();
    write_json(paths[0].clone(), r)?;
    for (p, text) in paths[1..].iter().zip([&r.map_table, &r.delta_table, &r.bars_csv]) {
        gensynth_core::artifact::write_atomic(p, text.as_bytes())?;
    }
    Ok(paths)
}

/// The `report` stage inside a run directory.
pub fn report_stage(ctx: &Ctx, files: &[PathBuf]) -> Result<()> {
    let inputs: Vec<(PathBuf, &str)> = files.iter().map(|f| (f.clone(), "evaluate")).collect();
    ctx.stage("report", &inputs, &(), |run| {
        let rendered = render(&load_all(files)?)?;
        let out_dir = ctx.path("report");
        let paths = write_outputs(&out_dir, &rendered, &mut |p, r| {
            run.write_json(p, AggregateBody::from(r))
        })?;
        for p in paths.into_iter().skip(1) {
            run.output(p);
        }
        print!("{}\n{}", rendered.map_table, rendered.delta_table);
        Ok(())
    })?;
    Ok(())
}

/// Standalone report over arbitrary runs files.
pub fn report_files(files: &[PathBuf], out_dir: &Path, config_hash: &str) -> Result<Rendered> {
    let rendered = render(&load_all(files)?)?;
    write_outputs(out_dir, &rendered, &mut |p, r| {
        let art = crate::pipeline::Artifact {
            stage: "report".to_string(),
            config_hash: config_hash.to_string(),
            inputs: files
                .iter()
                .map(|f| Ok((f.display().to_string(), gensynth_core::artifact::file_hash(f)?)))
                .collect::<Result<_>>()?,
            body: AggregateBody::from(r),
        };
        gensynth_core::artifact::write_json_atomic(&p, &art)?;
        Ok(())
    })?;
    Ok(rendered)
}

#[derive(Serialize)]
struct AggregateBody<'a> {
    aggregate: &'a AggregateReport,
    deltas: &'a [DeltaRow],
}

impl<'a> From<&'a Rendered> for AggregateBody<'a> {
    fn from(r: &'a Rendered) -> Self {
        Self {
            aggregate: &r.aggregate,
            deltas: &r.deltas,
        }
    }
}
