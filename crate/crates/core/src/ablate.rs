//! Grid ablations over pre-training settings. Each cell is a generation-0
//! run (pre-train, fine-tune on the supervised split, evaluate) under its
//! own output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::experiment::ExperimentConfig;
use crate::nst::run_generation;
use crate::pipeline::Workspace;

/// One grid axis: the config keys it sets and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub name: String,
    pub keys: Vec<String>,
    pub values: Vec<String>,
}

fn alias(name: &str) -> Vec<String> {
    match name {
        "reduction" => vec![
            "encoder.time_reduction".into(),
            "encoder_large.time_reduction".into(),
        ],
        "segment" => vec!["pretrain.run.chunk_frames".into()],
        other => vec![other.to_string()],
    }
}

/// Parses `name=v1,v2,...` axes. `reduction` and `segment` (pre-training
/// crop in frames) are shorthands; any other name is a dotted config key.
pub fn parse_grid(specs: &[String]) -> Result<Vec<GridAxis>> {
    if specs.is_empty() {
        return Err(config("grid", "at least one axis is required"));
    }
    specs
        .iter()
        .map(|s| {
            let (name, vals) = s
                .split_once('=')
                .ok_or_else(|| config("grid", format!("expected name=v1,v2 in {s:?}")))?;
            let name = name.trim();
            let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
            if name.is_empty() || values.iter().any(String::is_empty) {
                return Err(config("grid", format!("empty axis name or value in {s:?}")));
            }
            Ok(GridAxis {
                name: name.to_string(),
                keys: alias(name),
                values,
            })
        })
        .collect()
}

/// Every combination of axis values, first axis slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new()];
    for a in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                (0..a.values.len()).map(move |i| {
                    let mut c = c.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    /// Axis name to value.
    pub cell: Vec<(String, String)>,
    pub dir: PathBuf,
    pub dev_wer: f64,
    pub dev_wer_fused: f64,
}

fn cell_name(cell: &[(String, String)]) -> String {
    cell.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Runs every grid cell. `text` is the base config file's contents,
/// `overrides` apply before the cell's own settings, and `base` resolves
/// relative data paths.
pub fn run_ablation(
    text: &str,
    base: &Path,
    overrides: &[String],
    axes: &[GridAxis],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for idx in grid_cells(axes) {
        let cell: Vec<(String, String)> = axes
            .iter()
            .zip(&idx)
            .map(|(a, &i)| (a.name.clone(), a.values[i].clone()))
            .collect();
        let mut ov = overrides.to_vec();
        for (a, &i) in axes.iter().zip(&idx) {
            ov.extend(a.keys.iter().map(|k| format!("{k}={}", a.values[i])));
        }
        let cfg = ExperimentConfig::parse_at(text, &ov, base)?;
        let dir = out.join(cell_name(&cell));
        let ws = Workspace::open(cfg, &dir)?;
        let m = run_generation(&ws, 0, None)?;
        rows.push(AblationRow {
            cell,
            dir,
            dev_wer: m.dev_wer.unwrap_or(f64::NAN),
            dev_wer_fused: m.dev_wer_fused.unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Dev WER as CSV. A two-axis grid puts the first axis down the rows and
/// the second across the columns; other grids get one row per cell.
pub fn ablation_table(axes: &[GridAxis], rows: &[AblationRow], fused: bool) -> String {
    let value = |r: &AblationRow| if fused { r.dev_wer_fused } else { r.dev_wer };
    let mut s = String::new();
    if axes.len() == 2 {
        s.push_str(&format!("{}\\{}", axes[0].name, axes[1].name));
        for v in &axes[1].values {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
        for (i, v0) in axes[0].values.iter().enumerate() {
            s.push_str(v0);
            for j in 0..axes[1].values.len() {
                let r = &rows[i * axes[1].values.len() + j];
                s.push_str(&format!(",{}", value(r)));
            }
            s.push('\n');
        }
        return s;
    }
    let names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
    s.push_str(&format!(
        "{},{}\n",
        names.join(","),
        if fused { "dev_wer_fused" } else { "dev_wer" }
    ));
    for r in rows {
        let vals: Vec<&str> = r.cell.iter().map(|(_, v)| v.as_str()).collect();
        s.push_str(&format!("{},{}\n", vals.join(","), value(r)));
    }
    s
}
