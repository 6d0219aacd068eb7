use std::path::{Path, PathBuf};

use dcl_core::privacy::{collusion_breach, eaves_breach, min_chunks_collusion, min_chunks_eaves, AttackScenario};
use dcl_core::simnet::{monte_carlo_breach, TrialReport};
use serde::Serialize;

use crate::config::PrivacyConfig;
use crate::error::{CliError, CliResult};
use crate::output::{header, num, write_csv, write_json};

pub const COLLUSION_COLUMNS: [&str; 4] = ["n_chunks", "colluders", "exact", "bound"];
pub const EAVES_COLUMNS: [&str; 6] = ["n_chunks", "tapped", "edge_total", "tapped_fraction", "exact", "bound"];
pub const SIZING_COLUMNS: [&str; 4] = ["attack", "adversaries", "eta", "min_chunks"];

#[derive(Serialize)]
struct MonteCarlo<'a> {
    config: &'a PrivacyConfig,
    reports: Vec<TrialReport>,
}

fn validate(cfg: &PrivacyConfig) -> CliResult<(usize, usize)> {
    let edge_total = cfg.edge_total.unwrap_or(cfg.agents * cfg.degree);
    let colluders_max = cfg.colluders_max.unwrap_or(cfg.agents.saturating_sub(1));
    if cfg.chunks_max == 0 || cfg.tapped_step == 0 {
        return Err(CliError::Config("chunks_max and tapped_step must be positive".into()));
    }
    if cfg.degree == 0 || cfg.degree >= cfg.agents || colluders_max >= cfg.agents || cfg.degree > edge_total {
        return Err(CliError::Config(format!(
            "invalid grid: agents={}, degree={}, colluders_max={colluders_max}, edge_total={edge_total}",
            cfg.agents, cfg.degree
        )));
    }
    if let Some(eta) = cfg.eta {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(CliError::Config(format!("eta must lie in (0, 1), got {eta}")));
        }
    }
    Ok((edge_total, colluders_max))
}

pub fn run(cfg: &PrivacyConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (edge_total, colluders_max) = validate(cfg)?;
    let head = header("privacy", cfg)?;
    let mut collusion = Vec::new();
    let mut eaves = Vec::new();
    for nc in 1..=cfg.chunks_max {
        for nl in 1..=colluders_max {
            let (exact, bound) = collusion_breach(cfg.agents, cfg.degree, nl, nc)?;
            collusion.push(vec![nc.to_string(), nl.to_string(), num(exact), num(bound)]);
        }
        for ne in (0..=edge_total).step_by(cfg.tapped_step) {
            let (exact, bound) = eaves_breach(edge_total, cfg.degree, ne, nc)?;
            eaves.push(vec![
                nc.to_string(),
                ne.to_string(),
                edge_total.to_string(),
                num(ne as f64 / edge_total as f64),
                num(exact),
                num(bound),
            ]);
        }
    }
    let mut written = vec![
        write_csv(&out.join("privacy_collusion.csv"), &head, &COLLUSION_COLUMNS, &collusion)?,
        write_csv(&out.join("privacy_eavesdropping.csv"), &head, &EAVES_COLUMNS, &eaves)?,
    ];

    if let Some(eta) = cfg.eta {
        let cell = |r: dcl_core::Result<usize>| match r {
            Ok(n) => Ok(n.to_string()),
            Err(dcl_core::Error::NoFiniteChunks(_)) => Ok("inf".to_string()),
            Err(e) => Err(e),
        };
        let mut rows = Vec::new();
        for nl in 1..=colluders_max {
            let n = cell(min_chunks_collusion(eta, cfg.agents, cfg.degree, nl))?;
            rows.push(vec!["collusion".into(), nl.to_string(), num(eta), n]);
        }
        for ne in (0..=edge_total).step_by(cfg.tapped_step) {
            let n = cell(min_chunks_eaves(eta, edge_total, cfg.degree, ne))?;
            rows.push(vec!["eavesdropping".into(), ne.to_string(), num(eta), n]);
        }
        written.push(write_csv(&out.join("privacy_sizing.csv"), &head, &SIZING_COLUMNS, &rows)?);
    }

    if cfg.mc_trials > 0 {
        let mut scenarios = Vec::new();
        for &chunks in &cfg.mc_chunks {
            for &colluders in cfg.mc_colluders.iter().filter(|&&c| c <= colluders_max) {
                scenarios.push(AttackScenario::Collusion { agents: cfg.agents, degree: cfg.degree, colluders, chunks });
            }
            for &tapped in cfg.mc_tapped.iter().filter(|&&t| t <= edge_total) {
                scenarios.push(AttackScenario::Eavesdropping { edge_total, degree: cfg.degree, tapped, chunks });
            }
        }
        let reports = scenarios
            .iter()
            .enumerate()
            .map(|(i, sc)| monte_carlo_breach(sc, cfg.mc_trials, cfg.seed.wrapping_add(i as u64)))
            .collect::<dcl_core::Result<Vec<_>>>()?;
        written.push(write_json(&out.join("privacy_montecarlo.json"), &MonteCarlo { config: cfg, reports })?);
    }
    Ok(written)
}
