use std::fs;
use std::path::Path;

use fedara::cli::{main_with_args, EXIT_CONFIG, EXIT_OK};

fn run(cmd: &str, config: &Path) -> i32 {
    main_with_args(["fedara", cmd, config.to_str().unwrap()])
}

fn write_config(dir: &Path, name: &str, body: &str, out: &Path) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{body}output = \"{}\"\n", out.display())).unwrap();
    path
}

#[test]
fn schedule_csv_shape_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sched");
    let cfg = write_config(dir.path(), "s.cfg", "method = fedara\nr_init = 8\nT = 100\nseed = 1\n", &out);
    assert_eq!(run("schedule", &cfg), EXIT_OK);
    let text = fs::read_to_string(out.join("schedule.csv")).unwrap();
    let rows: Vec<(usize, usize)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (t, b) = l.split_once(',').unwrap();
            (t.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(text.lines().next(), Some("t,budget"));
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[0].1, 32);
    assert_eq!(rows[100].1, 8);
    assert_eq!(rows[28], (28, 10));
    assert!(rows.windows(2).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn drift_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("drift");
    let cfg = write_config(dir.path(), "d.cfg", "trials = 100\nr_values = 2,4,8\n", &out);
    assert_eq!(run("drift", &cfg), EXIT_OK);
    let text = fs::read_to_string(out.join("drift.csv")).unwrap();
    assert_eq!(text.lines().count(), 2 * 3 + 1);
    assert_eq!(text.lines().next(), Some("flavor,r,mc_mean,stderr,closed_form,slope"));
}

#[test]
fn drift_rejects_few_trials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.cfg", "trials = 99\n", &dir.path().join("x"));
    assert_eq!(run("drift", &cfg), EXIT_CONFIG);
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let body = "method = fedlora\nr_init = 4\nT = 10\nt_w = 2\nt_f = 3\nseed = 5\nnum_clients = 20\nclients_per_round = 4\nn = 800\n";
    let cfg = write_config(dir.path(), "r.cfg", body, &out);
    assert_eq!(run("run", &cfg), EXIT_OK);
    let rounds = fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(
        rounds.lines().next(),
        Some("round,method,bytes_up,bytes_down,train_loss,val_acc,avg_rank,frozen_sites,mag,dir")
    );
    assert_eq!(rounds.lines().count(), 11);
    let per_round: Vec<usize> = rounds
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[2].parse::<usize>().unwrap() + f[3].parse::<usize>().unwrap()
        })
        .collect();
    assert!(per_round.iter().all(|&b| b == per_round[0]));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains(&format!("total_bytes={}", 10 * per_round[0])), "{summary}");
    let ranks = fs::read_to_string(out.join("ranks.csv")).unwrap();
    assert_eq!(ranks.lines().count(), 5);
    assert!(!out.join("rounds.csv.tmp").exists());
}

#[test]
fn partition_stats_lists_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let body = "method = fedsvd\nr_init = 4\nT = 20\nseed = 2\nnum_clients = 12\npartition = pathological\nlabels_per_client = 2\n";
    let cfg = write_config(dir.path(), "p.cfg", body, &out);
    assert_eq!(run("partition-stats", &cfg), EXIT_OK);
    let text = fs::read_to_string(out.join("partition_stats.csv")).unwrap();
    assert_eq!(text.lines().count(), 13);
    for line in text.lines().skip(1) {
        let labels = line.split(',').skip(3).filter(|c| *c != "0").count();
        assert!(labels <= 2, "{line}");
    }
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let unknown = write_config(dir.path(), "u.cfg", "method = fedara\nr_init = 8\nT = 100\nseed = 1\nfoo = 3\n", &out);
    assert_eq!(run("run", &unknown), EXIT_CONFIG);
    let bad_rank = write_config(dir.path(), "b.cfg", "method = fedara\nr_init = 8\nT_r = 20\nT = 100\nseed = 1\n", &out);
    assert_eq!(run("schedule", &bad_rank), EXIT_CONFIG);
    assert_eq!(run("run", &dir.path().join("missing.cfg")), EXIT_CONFIG);
    assert_eq!(main_with_args(["fedara", "bogus"]), EXIT_CONFIG);
}

#[test]
fn missing_dataset_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "method = fedsvd\nr_init = 4\nT = 10\nt_w = 2\nt_f = 3\nseed = 1\ndata = \"{}\"\n",
        dir.path().join("nope.csv").display()
    );
    let cfg = write_config(dir.path(), "m.cfg", &body, &dir.path().join("o"));
    assert_eq!(run("run", &cfg), fedara::cli::EXIT_RUNTIME);
}
