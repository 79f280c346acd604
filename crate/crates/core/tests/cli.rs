use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dfac::report::{FactorizationTable, ModelSnapshot};

fn dfac(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfac")).args(args).env("DFAC_OUT_DIR", out).output().expect("run dfac")
}

const SHORT: &[&str] = &["--episodes", "600", "--samples", "1000"];

fn trained(dir: &Path, algo: &str) {
    let mut args = vec!["train", "--algo", algo, "--env", "two_step", "--seed", "3"];
    args.extend_from_slice(SHORT);
    let out = dfac(&args, dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bogus_algorithm_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfac(&["train", "--algo", "bogus"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn unknown_flag_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!dfac(&["train", "--frobnicate"], dir.path()).status.success());
    assert!(!dfac(&["train", "--config", "/nonexistent/config.toml"], dir.path()).status.success());
    assert!(!dfac(&["train", "--game", "/nonexistent/game.toml"], dir.path()).status.success());
    let out = dfac(&["eval"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("snapshot"));
}

#[test]
fn train_writes_artifacts_to_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "ddn");
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("episode,greedy_return_mean,td_loss,epsilon"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "500");
    assert!(row[1..].iter().all(|f| f.split('.').nth(1).map(str::len) == Some(6)));

    let text = fs::read_to_string(dir.path().join("factorization.json")).unwrap();
    let table = FactorizationTable::from_json(&text).unwrap();
    assert_eq!(FactorizationTable::from_json(&table.to_json().unwrap()).unwrap(), table);
    for st in &table.states {
        for (j, cell) in st.joint.iter().enumerate() {
            let sum = st.agents[0][j / 2].mean + st.agents[1][j % 2].mean;
            assert!((cell.moments.mean - sum).abs() <= 1e-9);
        }
    }

    let snap = ModelSnapshot::load(&dir.path().join("model.snapshot")).unwrap();
    assert_eq!(snap.config.total_episodes, 600);
    assert_eq!(snap.config.seed, 3);
    snap.model().unwrap();
    assert!(!fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn out_flag_overrides_env_dir_and_config_is_read() {
    let env_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let config = env_dir.path().join("train.toml");
    fs::write(&config, "algorithm = \"vdn\"\ntotal_episodes = 500\neval_interval = 250\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dfac"))
        .args(["train", "--samples", "1000", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(out_dir.path())
        .env("DFAC_OUT_DIR", env_dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(out_dir.path().join("metrics.csv")).unwrap().lines().count(), 3);
    assert!(!env_dir.path().join("metrics.csv").exists());
    let snap = ModelSnapshot::load(&out_dir.path().join("model.snapshot")).unwrap();
    assert_eq!(snap.algorithm.to_string(), "vdn");

    fs::write(&config, "no_such_field = 1\n").unwrap();
    assert!(!dfac(&["train", "--config", config.to_str().unwrap()], out_dir.path()).status.success());
}

#[test]
fn eval_table_and_cdf_on_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "dmix");

    let out = dfac(&["eval", "--episodes", "50"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("episodes 50"));
    assert!(stdout.contains("greedy_return_mean"));

    fs::remove_file(dir.path().join("factorization.json")).unwrap();
    let out = dfac(&["table", "--samples", "1000"], dir.path());
    assert!(out.status.success());
    let table =
        FactorizationTable::from_json(&fs::read_to_string(dir.path().join("factorization.json")).unwrap()).unwrap();
    assert!(table.state("2A").unwrap().state_value.is_some());

    let out = dfac(&["cdf", "--state", "2B", "--actions", "B,B", "--samples", "400"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("cdf_2B_B-B.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("cumulative_probability,agent_1,agent_2,joint,grid_value,true_cdf"));
    for (i, line) in lines.enumerate() {
        let p: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert_eq!(p, (i + 1) as f64 / 400.0);
    }

    assert!(!dfac(&["cdf", "--state", "3C", "--actions", "B,B"], dir.path()).status.success());
    assert!(!dfac(&["cdf", "--state", "2B", "--actions", "B,C"], dir.path()).status.success());
}

#[test]
fn custom_game_file_trains() {
    let dir = tempfile::tempdir().unwrap();
    let game = dir.path().join("climb.toml");
    fs::write(
        &game,
        r#"
agents = 2
actions = ["X", "Y"]
states = ["s"]
initial = "s"
horizon = 1

[transitions.s]
"X,X" = "terminal"
"X,Y" = "terminal"
"Y,X" = "terminal"
"Y,Y" = "terminal"

[payoffs.s]
"X,X" = { mu = 1.0, sigma2 = 0.0 }
"X,Y" = { mu = 0.0, sigma2 = 0.0 }
"Y,X" = { mu = 0.0, sigma2 = 0.0 }
"Y,Y" = { mu = 2.0, sigma2 = 1.0 }
"#,
    )
    .unwrap();
    let out = dfac(
        &["train", "--algo", "ddn", "--game", game.to_str().unwrap(), "--episodes", "500", "--samples", "1000"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = dfac(&["cdf", "--state", "s", "--actions", "Y,Y", "--samples", "100"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("cdf_s_Y-Y.csv").exists());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfac(&["selftest"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 5);
}
