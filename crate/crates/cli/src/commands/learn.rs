use std::fs;
use std::path::{Path, PathBuf};

use dcl_core::graph::transition_matrix;
use dcl_core::learning::{federated_em, CovarianceForm, Dataset, EmOptions, EmResult, Hyperparams};
use dcl_core::linalg::Matrix;
use dcl_core::sharing::{AggregateConfig, Aggregator, TopologySource};
use serde::Serialize;

use crate::config::{AggregatorKind, CovarianceKind, GraphKind, LearnConfig};
use crate::error::{CliError, CliResult};
use crate::output::{header, num, write_csv, write_json};

pub const TRACE_COLUMNS: [&str; 2] = ["round", "objective"];

#[derive(Serialize)]
struct Model<'a> {
    config: &'a LearnConfig,
    agents: Vec<u64>,
    mu: Vec<Vec<f64>>,
    /// Row-major precision matrices.
    #[serde(rename = "Lambda")]
    lambda: Vec<Vec<f64>>,
    pi: Vec<Vec<f64>>,
    trace: Vec<f64>,
    rounds: usize,
    converged: bool,
    total_iterations: usize,
    scalar_messages: usize,
    reseeded: Vec<(usize, usize)>,
}

/// Agent files `agent_<id>.csv` in `dir`, ordered by id.
pub fn agent_files(dir: &Path) -> CliResult<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let id = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("agent_"))
            .and_then(|n| n.strip_suffix(".csv"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(id) = id {
            files.push((id, path));
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Io(format!("{}: no agent_<id>.csv files", dir.display())));
    }
    Ok(files)
}

/// Reads one sample per row. `#` lines are comments; a first row that is not
/// numeric is taken as a column header.
pub fn read_agent_csv(path: &Path) -> CliResult<Matrix<f64>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Config(format!("{}:{line}: {e}", path.display()))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                    return Err(CliError::Config(format!("{}:{line}: non-finite value {v}", path.display())));
                }
                if let Some(prev) = rows.first() {
                    if prev.len() != row.len() {
                        return Err(CliError::Config(format!(
                            "{}:{line}: expected {} columns, found {}",
                            path.display(),
                            prev.len(),
                            row.len()
                        )));
                    }
                }
                rows.push(row);
            }
            Err(_) if first => {}
            Err(e) => return Err(CliError::Config(format!("{}:{line}: {e}", path.display()))),
        }
        first = false;
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no samples", path.display())));
    }
    Ok(Matrix::from_rows(&rows))
}

fn aggregator(cfg: &LearnConfig, agents: usize) -> CliResult<Aggregator<f64>> {
    let agg = AggregateConfig::with_tol(cfg.consensus_tol);
    let graph = || cfg.graph.build(agents, cfg.degree, cfg.seed);
    Ok(match cfg.aggregator {
        AggregatorKind::Direct => Aggregator::Direct,
        AggregatorKind::Consensus => Aggregator::Consensus { w: transition_matrix(&graph()?, None)?, cfg: agg },
        AggregatorKind::Shamir => Aggregator::Shamir {
            w: transition_matrix(&graph()?, None)?,
            cfg: agg,
            coeff_range: None,
        },
        AggregatorKind::Chunk => Aggregator::Chunked {
            source: match cfg.graph {
                GraphKind::Random => TopologySource::RandomRegular { nodes: agents, degree: cfg.degree, eps: None },
                _ => TopologySource::relabel(&graph()?, None)?,
            },
            n_chunks: cfg.n_chunks,
            cfg: agg,
            chunk_range: None,
        },
    })
}

fn write_outputs(cfg: &LearnConfig, ids: Vec<u64>, res: &EmResult<f64>, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = Model {
        config: cfg,
        agents: ids,
        mu: res.params.means.clone(),
        lambda: res.params.precisions.iter().map(|p| p.as_slice().to_vec()).collect(),
        pi: res.params.weights.clone(),
        trace: res.objective_trace.clone(),
        rounds: res.rounds,
        converged: res.converged,
        total_iterations: res.cost.total_iterations,
        scalar_messages: res.cost.scalar_messages,
        reseeded: res.reseeded.clone(),
    };
    let rows: Vec<Vec<String>> = res
        .objective_trace
        .iter()
        .enumerate()
        .map(|(i, &v)| vec![i.to_string(), num(v)])
        .collect();
    Ok(vec![
        write_json(&out.join("model.json"), &model)?,
        write_csv(&out.join("trace.csv"), &header("learn", cfg)?, &TRACE_COLUMNS, &rows)?,
    ])
}

/// `base` is the directory against which a relative `data_dir` resolves.
pub fn run(cfg: &LearnConfig, base: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    if cfg.components == 0 || cfg.max_rounds == 0 || !(cfg.tol > 0.0) || !(cfg.consensus_tol > 0.0) {
        return Err(CliError::Config("components, max_rounds, tol and consensus_tol must be positive".into()));
    }
    let data_dir = base.join(&cfg.data_dir);
    let files = agent_files(&data_dir)?;
    let mut ids = Vec::new();
    let mut blocks = Vec::new();
    for (id, path) in files {
        ids.push(id);
        blocks.push(read_agent_csv(&path)?);
    }
    let data = Dataset::new(blocks)?;
    let hyper = Hyperparams {
        gamma: cfg.gamma,
        lambda0: cfg.lambda0,
        rho: cfg.rho,
        covariance: match cfg.covariance {
            CovarianceKind::Derived => CovarianceForm::Derived,
            CovarianceKind::Uncentered => CovarianceForm::Uncentered,
        },
    };
    let opts = EmOptions {
        tol: cfg.tol,
        max_rounds: cfg.max_rounds,
        seed: cfg.seed,
        ..EmOptions::default()
    };
    let agg = aggregator(cfg, data.agents())?;
    let res = federated_em(&data, cfg.components, &hyper, &agg, &opts)?;
    let written = write_outputs(cfg, ids, &res, out)?;
    if !res.converged {
        return Err(CliError::Convergence(format!("EM did not converge within {} rounds", cfg.max_rounds)));
    }
    Ok(written)
}
