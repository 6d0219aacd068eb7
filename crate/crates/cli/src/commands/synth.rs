use std::path::{Path, PathBuf};

use dcl_core::learning::{sample_mixture, MixtureParams};
use dcl_core::linalg::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::cell_rng;
use crate::config::SynthConfig;
use crate::error::{CliError, CliResult};
use crate::output::{header, num, write_csv, write_json};

#[derive(Serialize)]
struct Truth<'a> {
    config: &'a SynthConfig,
    means: Vec<Vec<f64>>,
    /// Row-major precision matrices.
    precisions: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    counts: Vec<usize>,
    labels: Vec<Vec<usize>>,
}

fn agent_weights<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> CliResult<Vec<Vec<f64>>> {
    if let Some(w) = &cfg.weights {
        if w.len() != cfg.agents || w.iter().any(|row| row.len() != cfg.components) {
            return Err(CliError::Config(format!("weights must be {} rows of {} entries", cfg.agents, cfg.components)));
        }
        return Ok(w.clone());
    }
    Ok((0..cfg.agents)
        .map(|_| {
            let raw: Vec<f64> = (0..cfg.components)
                .map(|_| (cfg.skew * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / z).collect()
        })
        .collect())
}

pub fn truth_params(cfg: &SynthConfig) -> CliResult<MixtureParams<f64>> {
    if cfg.agents == 0 || cfg.components == 0 || cfg.dim == 0 {
        return Err(CliError::Config("agents, components and dim must be positive".into()));
    }
    if !(cfg.skew >= 0.0) || !(cfg.separation > 0.0) {
        return Err(CliError::Config("skew must be non-negative and separation positive".into()));
    }
    let mut rng = cell_rng(cfg.seed, &[0]);
    let m = cfg.dim;
    let means = (0..cfg.components)
        .map(|_| (0..m).map(|_| cfg.separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let precisions = (0..cfg.components)
        .map(|_| {
            let b = Matrix::from_row_major(m, m, (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut cov = b.matmul(&b.transpose()).scale(1.0 / m as f64).add(&Matrix::identity(m).scale(0.5));
            cov.symmetrize();
            cov.cholesky().map(|c| c.inverse())
        })
        .collect::<dcl_core::Result<Vec<_>>>()?;
    let weights = agent_weights(cfg, &mut rng)?;
    let params = MixtureParams { means, precisions, weights };
    params.validate()?;
    Ok(params)
}

pub fn run(cfg: &SynthConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let counts: Vec<usize> = match cfg.samples.as_slice() {
        [n] => vec![*n; cfg.agents],
        list if list.len() == cfg.agents => list.to_vec(),
        list => {
            return Err(CliError::Config(format!("samples has {} entries for {} agents", list.len(), cfg.agents)));
        }
    };
    if counts.contains(&0) {
        return Err(CliError::Config("every agent needs at least one sample".into()));
    }
    let truth = truth_params(cfg)?;
    let mut rng = cell_rng(cfg.seed, &[1]);
    let (data, labels) = sample_mixture(&truth, &counts, &mut rng)?;

    let head = header("synth", cfg)?;
    let columns: Vec<String> = (0..cfg.dim).map(|j| format!("x{j}")).collect();
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut written = Vec::new();
    for a in 0..data.agents() {
        let x = data.agent(a);
        let rows: Vec<Vec<String>> = (0..x.rows()).map(|i| x.row(i).iter().map(|&v| num(v)).collect()).collect();
        let mut agent_head = head.clone();
        agent_head.push(format!("# agent={a}"));
        written.push(write_csv(&out.join(format!("agent_{a}.csv")), &agent_head, &columns, &rows)?);
    }
    let record = Truth {
        config: cfg,
        means: truth.means.clone(),
        precisions: truth.precisions.iter().map(|p| p.as_slice().to_vec()).collect(),
        weights: truth.weights.clone(),
        counts,
        labels,
    };
    written.push(write_json(&out.join("truth.json"), &record)?);
    Ok(written)
}
