//! Prompt-source × multi-scale ablation grid.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{backend_label, run_eval, EvalOptions};
use crate::config::{PromptStyle, RunConfig, DEFAULT_N_SCALES};
use crate::error::{PipelineError, Result};
use crate::layout::{write_atomic, write_json, ProjectLayout};

pub const ABLATION_LABELS: [&str; 4] = ["CLIP", "CLIP&LLM", "CLIP&M_S", "CLIP&LLM&M_S"];

/// Fields the grid is allowed to vary between rows.
const TOGGLED: [&str; 3] = ["prompt_style", "multiscale_enabled", "n_scales"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub backend_id: String,
    pub run_id: String,
    pub overall: f64,
    pub macro_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub dataset_id: String,
    pub backends: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Names of the `RunConfig` fields whose values differ between `a` and `b`.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        unreachable!("RunConfig serializes to an object");
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

fn grid_configs(template: &RunConfig, backend: &str) -> Vec<RunConfig> {
    let n_multi = if template.n_scales > 1 { template.n_scales } else { DEFAULT_N_SCALES };
    [
        (PromptStyle::Baseline, false),
        (PromptStyle::CoarseToFine, false),
        (PromptStyle::Baseline, true),
        (PromptStyle::CoarseToFine, true),
    ]
    .into_iter()
    .map(|(style, multi)| RunConfig {
        backend_id: backend.to_owned(),
        prompt_style: style,
        multiscale_enabled: multi,
        n_scales: if multi { n_multi } else { 1 },
        ..template.clone()
    })
    .collect()
}

impl AblationGrid {
    /// Aligned text table; the best value of each backend column is wrapped in `**`.
    pub fn render(&self) -> String {
        let cell = |v: f64| format!("{:.2}", v * 100.0);
        let columns: Vec<Vec<String>> = (0..self.backends.len())
            .map(|col| {
                let best = self
                    .rows
                    .iter()
                    .map(|r| cell(r.cells[col].overall))
                    .max_by(|a, b| a.parse::<f64>().unwrap_or(0.0).total_cmp(&b.parse::<f64>().unwrap_or(0.0)))
                    .unwrap_or_default();
                self.rows
                    .iter()
                    .map(|r| {
                        let v = cell(r.cells[col].overall);
                        if v == best {
                            format!("**{v}**")
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let headers: Vec<String> = self.backends.iter().map(|b| backend_label(b)).collect();
        let label_w = ABLATION_LABELS.iter().map(|l| l.len()).max().unwrap_or(0).max("method".len());
        let widths: Vec<usize> = headers
            .iter()
            .zip(&columns)
            .map(|(h, col)| col.iter().map(String::len).chain([h.len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "{} ablation (overall accuracy, %)", self.dataset_id.to_ascii_uppercase());
        let _ = write!(out, "{:<label_w$}", "method");
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<label_w$}", row.label);
            for (col, w) in columns.iter().zip(&widths) {
                let _ = write!(out, "  {:>w$}", col[r]);
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the four grid rows for every backend and writes
/// `runs/ablation-<dataset>/ablation.{json,txt}`.
pub fn run_ablation_grid(layout: &ProjectLayout, template: &RunConfig, backends: &[String]) -> Result<AblationGrid> {
    if backends.is_empty() {
        return Err(PipelineError::Invalid("at least one backend is required".into()));
    }
    let mut rows: Vec<AblationRow> = ABLATION_LABELS
        .iter()
        .map(|l| AblationRow {
            label: (*l).to_owned(),
            cells: Vec::new(),
        })
        .collect();
    for backend in backends {
        let configs = grid_configs(template, backend);
        for (row, config) in rows.iter_mut().zip(&configs) {
            let diff = config_diff(&configs[0], config);
            if let Some(field) = diff.iter().find(|f| !TOGGLED.contains(&f.as_str())) {
                return Err(PipelineError::Inconsistent(format!(
                    "ablation row {} differs from {} in `{field}`",
                    row.label, ABLATION_LABELS[0]
                )));
            }
            let run = run_eval(layout, config, EvalOptions { pair_baseline: false })?;
            if run.label != row.label {
                return Err(PipelineError::Inconsistent(format!(
                    "config for row {} resolved to {}",
                    row.label, run.label
                )));
            }
            row.cells.push(AblationCell {
                backend_id: backend.clone(),
                run_id: run.run_id,
                overall: run.accuracy.overall,
                macro_avg: run.accuracy.macro_avg,
            });
        }
    }
    let grid = AblationGrid {
        dataset_id: template.dataset_id.clone(),
        backends: backends.to_vec(),
        rows,
    };
    let dir = layout.run_dir(&format!("ablation-{}", template.dataset_id));
    write_json(&dir.join("ablation.json"), &grid)?;
    write_atomic(&dir.join("ablation.txt"), grid.render().as_bytes())?;
    Ok(grid)
}
