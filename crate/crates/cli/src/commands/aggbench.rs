use std::path::{Path, PathBuf};

use dcl_core::graph::transition_matrix;
use dcl_core::sharing::{
    chunked_aggregate, plain_aggregate, shamir_aggregate, AggregateConfig, AggregateOutcome, TopologySource, Unobserved,
};
use rand::Rng;
use rayon::prelude::*;

use super::cell_rng;
use crate::config::{AggbenchConfig, GraphKind, Method};
use crate::error::{CliError, CliResult};
use crate::output::{header, num, write_csv};

pub const COLUMNS: [&str; 10] = [
    "method",
    "S",
    "n_chunks",
    "tol",
    "repeat",
    "rounds",
    "total_iterations",
    "scalar_messages",
    "abs_error",
    "error",
];

fn aggregate(cfg: &AggbenchConfig, method: Method, s: usize, repeat: usize) -> dcl_core::Result<(AggregateOutcome<f64>, f64)> {
    let mut rng = cell_rng(cfg.seed, &[s as u64, repeat as u64]);
    let values: Vec<f64> = (0..s).map(|_| rng.gen_range(cfg.value_low..cfg.value_high)).collect();
    let truth: f64 = values.iter().sum();
    let agg = AggregateConfig { eps: cfg.eps, ..AggregateConfig::with_tol(cfg.tol) };
    let round_seed: u64 = rng.gen();
    let outcome = match method {
        Method::Plain | Method::Shamir => {
            let g = cfg.graph.build(s, cfg.degree, cfg.seed)?;
            let w = transition_matrix(&g, cfg.eps)?;
            if method == Method::Plain {
                plain_aggregate(&values, &w, &agg, &mut Unobserved)?
            } else {
                shamir_aggregate(&values, &w, &agg, None, round_seed, &mut Unobserved)?
            }
        }
        Method::Chunk => {
            let source = match cfg.graph {
                GraphKind::Random => TopologySource::RandomRegular { nodes: s, degree: cfg.degree, eps: cfg.eps },
                kind => TopologySource::relabel(&kind.build(s, cfg.degree, cfg.seed)?, cfg.eps)?,
            };
            chunked_aggregate(&values, &source, cfg.n_chunks, &agg, None, round_seed, &mut Unobserved)?
        }
    };
    let err = (outcome.total - truth).abs();
    Ok((outcome, err))
}

pub fn run(cfg: &AggbenchConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    if cfg.sizes.is_empty() || cfg.methods.is_empty() || cfg.repeats == 0 || cfg.n_chunks == 0 {
        return Err(CliError::Config("aggbench needs sizes, methods, and positive repeats and n_chunks".into()));
    }
    if !(cfg.value_low < cfg.value_high) || !(cfg.tol > 0.0) {
        return Err(CliError::Config("need value_low < value_high and tol > 0".into()));
    }
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &s in &cfg.sizes {
            for repeat in 0..cfg.repeats {
                cells.push((method, s, repeat));
            }
        }
    }
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|&(method, s, repeat)| {
            let chunks = if method == Method::Chunk { cfg.n_chunks.to_string() } else { String::new() };
            let mut row = vec![method.name().to_string(), s.to_string(), chunks, num(cfg.tol), repeat.to_string()];
            match aggregate(cfg, method, s, repeat) {
                Ok((o, err)) => row.extend([
                    o.rounds.to_string(),
                    o.total_iterations.to_string(),
                    o.scalar_messages.to_string(),
                    num(err),
                    String::new(),
                ]),
                Err(e) => {
                    log::warn!("{} S={s}: {e}", method.name());
                    row.extend([String::new(), String::new(), String::new(), String::new(), e.to_string()]);
                }
            }
            row
        })
        .collect();
    let path = write_csv(&out.join("aggbench.csv"), &header("aggbench", cfg)?, &COLUMNS, &rows)?;
    Ok(vec![path])
}
