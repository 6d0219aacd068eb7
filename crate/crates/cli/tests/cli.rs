use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcl")).args(args).output().expect("spawn dcl")
}

fn run(cmd: &str, dir: &Path, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join(format!("{cmd}.toml"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    dcl(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}, stderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

/// Header comment lines and data records of a CSV written by the tool.
fn read_csv(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let text = fs::read_to_string(path).unwrap();
    let comments = text.lines().take_while(|l| l.starts_with('#')).map(String::from).collect();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let records = reader.records().map(|r| r.unwrap()).collect();
    (comments, records)
}

fn f(r: &csv::StringRecord, i: usize) -> f64 {
    r[i].parse().unwrap()
}

#[test]
fn scaling_writes_rows_for_every_cell() {
    let dir = TempDir::new().unwrap();
    let o = run("scaling", dir.path(), "graphs = [\"ring\", \"expander\"]\nsizes = [3, 7, 12]\ntrials = 2\n", &[]);
    ok(&o);
    let (head, rows) = read_csv(&dir.path().join("out/scaling.csv"));
    assert!(head.iter().any(|l| l == "# command=scaling"));
    assert!(head.iter().any(|l| l == "# delta=0.001"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(&r[7], "", "row {r:?} flagged an error");
        assert!(f(r, 6) >= 1.0);
    }
    assert_eq!((&rows[0][0], &rows[0][1]), ("ring", "3"));
}

#[test]
fn scaling_flags_failed_cells_and_continues() {
    let dir = TempDir::new().unwrap();
    let o = run("scaling", dir.path(), "graphs = [\"random\"]\nsizes = [7, 8]\ndegree = 3\n", &[]);
    ok(&o);
    let (_, rows) = read_csv(&dir.path().join("out/scaling.csv"));
    assert!(!rows[0][7].is_empty(), "odd S with odd degree must fail");
    assert!(rows[1][7].is_empty());
}

#[test]
fn privacy_grid_satisfies_bounds() {
    let dir = TempDir::new().unwrap();
    let o = run("privacy", dir.path(), "chunks_max = 10\ntapped_step = 10\neta = 0.05\n", &[]);
    ok(&o);
    let (_, collusion) = read_csv(&dir.path().join("out/privacy_collusion.csv"));
    assert_eq!(collusion.len(), 10 * 99);
    for r in &collusion {
        assert!(f(r, 2) <= f(r, 3));
    }
    let cell = |nc: &str, nl: &str| collusion.iter().find(|r| &r[0] == nc && &r[1] == nl).map(|r| f(r, 2)).unwrap();
    assert!(cell("1", "50") > 0.85);
    assert!(cell("10", "1") <= 1e-14);
    let (_, eaves) = read_csv(&dir.path().join("out/privacy_eavesdropping.csv"));
    assert_eq!(eaves.len(), 10 * 31);
    for r in &eaves {
        assert!(f(r, 4) <= f(r, 5));
    }
    assert!(dir.path().join("out/privacy_sizing.csv").exists());
    assert!(!dir.path().join("out/privacy_montecarlo.json").exists());
}

#[test]
fn privacy_monte_carlo_report() {
    let dir = TempDir::new().unwrap();
    let cfg = "agents = 20\nchunks_max = 2\nmc_trials = 2000\nmc_chunks = [1]\nmc_colluders = [5]\nmc_tapped = [10]\n";
    ok(&run("privacy", dir.path(), cfg, &[]));
    let text = fs::read_to_string(dir.path().join("out/privacy_montecarlo.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let reports = json["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert_eq!(r["trials"], 2000);
        let rate = r["empirical_rate"].as_f64().unwrap();
        assert!(r["ci_low"].as_f64().unwrap() <= rate && rate <= r["ci_high"].as_f64().unwrap());
    }
}

#[test]
fn aggbench_counts_and_accuracy() {
    let dir = TempDir::new().unwrap();
    let o = run("aggbench", dir.path(), "sizes = [7, 13]\nn_chunks = 4\nrepeats = 2\n", &[]);
    ok(&o);
    let (_, rows) = read_csv(&dir.path().join("out/aggbench.csv"));
    assert_eq!(rows.len(), 3 * 2 * 2);
    for r in &rows {
        assert_eq!(&r[9], "");
        assert!(f(r, 8) <= 1e-4 * 13.0 * 2.0);
    }
    for s in ["7", "13"] {
        let msgs = |m: &str| -> f64 {
            rows.iter().filter(|r| &r[0] == m && &r[1] == s).map(|r| f(r, 7)).sum()
        };
        let ratio = msgs("shamir") / msgs("chunk");
        let target = s.parse::<f64>().unwrap() / 4.0;
        assert!((ratio / target - 1.0).abs() <= 0.3, "S={s}: ratio {ratio} vs {target}");
    }
}

#[test]
fn aggbench_single_chunk_is_one_round() {
    let dir = TempDir::new().unwrap();
    ok(&run("aggbench", dir.path(), "sizes = [9]\nmethods = [\"chunk\"]\nn_chunks = 1\n", &[]));
    let (_, rows) = read_csv(&dir.path().join("out/aggbench.csv"));
    assert_eq!(&rows[0][5], "1");
}

#[test]
fn synth_is_deterministic_and_sized() {
    let dir = TempDir::new().unwrap();
    let cfg = "agents = 2\nsamples = [50, 80]\ndim = 3\ncomponents = 2\n";
    ok(&run("synth", dir.path(), cfg, &["--seed", "4"]));
    let first: Vec<String> = (0..2)
        .map(|a| fs::read_to_string(dir.path().join(format!("out/agent_{a}.csv"))).unwrap())
        .collect();
    let (head, rows) = read_csv(&dir.path().join("out/agent_1.csv"));
    assert!(head.iter().any(|l| l == "# seed=4"));
    assert_eq!(rows.len(), 80);
    assert_eq!(rows[0].len(), 3);
    ok(&run("synth", dir.path(), cfg, &["--seed", "4"]));
    for (a, text) in first.iter().enumerate() {
        assert_eq!(text, &fs::read_to_string(dir.path().join(format!("out/agent_{a}.csv"))).unwrap());
    }
    ok(&run("synth", dir.path(), cfg, &["--seed", "5"]));
    assert_ne!(first[0], fs::read_to_string(dir.path().join("out/agent_0.csv")).unwrap());
}

#[test]
fn synth_component_frequencies_match_weights() {
    let dir = TempDir::new().unwrap();
    let n = 4000usize;
    let cfg = format!("agents = 2\nsamples = [{n}]\nweights = [[0.2, 0.8], [0.6, 0.4]]\n");
    ok(&run("synth", dir.path(), &cfg, &[]));
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/truth.json")).unwrap()).unwrap();
    for (a, p) in [(0usize, 0.2f64), (1, 0.6)] {
        let labels = truth["labels"][a].as_array().unwrap();
        assert_eq!(labels.len(), n);
        let hits = labels.iter().filter(|l| l.as_u64() == Some(0)).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - n as f64 * p).abs() <= 3.0 * sigma, "agent {a}: {hits}");
    }
}

fn synth_then_learn(dir: &Path, learn_cfg: &str) -> Output {
    let data = dir.join("data");
    let synth_cfg = dir.join("synth.toml");
    fs::write(&synth_cfg, "agents = 3\nsamples = [150]\nseed = 11\n").unwrap();
    ok(&dcl(&["synth", "--config", synth_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    run("learn", dir, learn_cfg, &[])
}

#[test]
fn learn_converges_with_ascending_trace() {
    let dir = TempDir::new().unwrap();
    let o = synth_then_learn(dir.path(), "data_dir = \"data\"\naggregator = \"chunk\"\nn_chunks = 3\n");
    ok(&o);
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/model.json")).unwrap()).unwrap();
    assert_eq!(model["converged"], true);
    assert_eq!(model["pi"].as_array().unwrap().len(), 3);
    assert_eq!(model["Lambda"][0].as_array().unwrap().len(), 4);
    assert!(model["scalar_messages"].as_u64().unwrap() > 0);
    let (_, trace) = read_csv(&dir.path().join("out/trace.csv"));
    let values: Vec<f64> = trace.iter().map(|r| f(r, 1)).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0] - 1e-5 * w[0].abs()));
}

#[test]
fn learn_identical_agents_share_weights() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let mut text = String::from("# shared\nx0,x1\n");
    for i in 0..60 {
        let c = if i % 3 == 0 { 4.0 } else { -4.0 };
        text.push_str(&format!("{},{}\n", c + (i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()));
    }
    for a in 0..3 {
        fs::write(data.join(format!("agent_{a}.csv")), &text).unwrap();
    }
    ok(&run("learn", dir.path(), "data_dir = \"data\"\n", &[]));
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/model.json")).unwrap()).unwrap();
    let pi = model["pi"].as_array().unwrap();
    for a in 1..3 {
        for k in 0..2 {
            let (x, y) = (pi[0][k].as_f64().unwrap(), pi[a][k].as_f64().unwrap());
            assert!((x - y).abs() <= 1e-12, "agent {a} component {k}: {x} vs {y}");
        }
    }
}

#[test]
fn exit_code_for_config_error() {
    let dir = TempDir::new().unwrap();
    let o = run("scaling", dir.path(), "no_such_key = 1\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = run("privacy", dir.path(), "degree = 0\n", &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_code_for_missing_files() {
    let dir = TempDir::new().unwrap();
    let o = run("learn", dir.path(), "data_dir = \"absent\"\n", &[]);
    assert_eq!(o.status.code(), Some(4));
    let o = dcl(&["scaling", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn malformed_csv_reports_line() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("agent_0.csv"), "# c\nx0,x1\n1,2\n3,4\n5,oops\n").unwrap();
    let o = run("learn", dir.path(), "data_dir = \"data\"\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("agent_0.csv:5"), "{err}");
}

#[test]
fn exit_code_for_non_convergence() {
    let dir = TempDir::new().unwrap();
    let o = synth_then_learn(dir.path(), "data_dir = \"data\"\nmax_rounds = 1\ntol = 1e-14\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(dir.path().join("out/model.json").exists());
}
