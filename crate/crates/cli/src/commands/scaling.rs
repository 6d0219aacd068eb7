use std::path::{Path, PathBuf};

use dcl_core::consensus::{estimate_iterations, run_consensus};
use dcl_core::graph::transition_matrix;
use rand::Rng;
use rayon::prelude::*;

use super::cell_rng;
use crate::config::{GraphKind, ScalingConfig};
use crate::error::CliResult;
use crate::output::{header, num, write_csv};

pub const COLUMNS: [&str; 8] = ["graph_type", "S", "eps", "delta", "lambda2", "predicted_t", "measured_t", "error"];

struct Cell {
    eps: f64,
    lambda2: f64,
    predicted: Option<usize>,
    measured: f64,
}

fn measure(cfg: &ScalingConfig, kind: GraphKind, s: usize) -> dcl_core::Result<Cell> {
    let g = kind.build(s, cfg.degree, cfg.seed)?;
    let w = transition_matrix::<f64>(&g, cfg.eps)?;
    let spectrum = w.spectrum();
    let predicted = estimate_iterations(s, cfg.delta, spectrum.gap).ok();
    let mut total = 0usize;
    for trial in 0..cfg.trials {
        let mut rng = cell_rng(cfg.seed, &[kind as u64, s as u64, trial as u64]);
        let xi: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..1.0)).collect();
        total += run_consensus(&w, &xi, cfg.delta, None)?.iterations;
    }
    Ok(Cell {
        eps: w.eps(),
        lambda2: spectrum.lambda2,
        predicted,
        measured: total as f64 / cfg.trials as f64,
    })
}

pub fn run(cfg: &ScalingConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let sizes = cfg.node_counts()?;
    let cells: Vec<(GraphKind, usize)> = cfg.graphs.iter().flat_map(|&g| sizes.iter().map(move |&s| (g, s))).collect();
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|&(kind, s)| {
            let mut row = vec![kind.name().to_string(), s.to_string()];
            match measure(cfg, kind, s) {
                Ok(c) => {
                    row.extend([
                        num(c.eps),
                        num(cfg.delta),
                        num(c.lambda2),
                        c.predicted.map(|p| p.to_string()).unwrap_or_default(),
                        num(c.measured),
                        String::new(),
                    ]);
                }
                Err(e) => {
                    log::warn!("{} S={s}: {e}", kind.name());
                    row.extend([String::new(), num(cfg.delta), String::new(), String::new(), String::new(), e.to_string()]);
                }
            }
            row
        })
        .collect();
    let path = write_csv(&out.join("scaling.csv"), &header("scaling", cfg)?, &COLUMNS, &rows)?;
    Ok(vec![path])
}
