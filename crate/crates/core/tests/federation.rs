use fedara::config::{ExperimentConfig, Method};
use fedara::federation::run_experiment;
use fedara::Error;

fn config(method: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "method = {method}\nr_init = 8\nT = 30\nt_w = 3\nt_f = 10\nseed = 21\nn = 1500\n\
         num_clients = 20\nclients_per_round = 5\n{extra}"
    ))
    .unwrap()
}

/// Independent byte count: header 16, one mask byte per site (r_init = 8),
/// 4 * (4 x 16 + 4) head bytes, and 4 bytes per retained scalar.
fn expected_payload(retained: usize, width: usize) -> usize {
    16 + 4 + 4 * 68 + 4 * retained * width
}

#[test]
fn byte_accounting_matches_formula_every_round() {
    let art = run_experiment(&config("fedara", "")).unwrap();
    for r in &art.records {
        let payload = expected_payload(r.mask_count, 33);
        assert_eq!(r.bytes_down, 5 * payload, "round {}", r.round);
        assert_eq!(r.bytes_up, 5 * (payload + 4), "round {}", r.round);
    }
    assert_eq!(art.records[0].bytes_down, 5 * 4516);
    let total: usize = art.records.iter().map(|r| r.bytes_up + r.bytes_down).sum();
    assert_eq!(art.ledger.total(), total);
}

#[test]
fn warmup_broadcasts_full_payload() {
    let art = run_experiment(&config("fedara", "")).unwrap();
    for r in &art.records[..3] {
        assert_eq!(r.bytes_down, 5 * 4516);
    }
}

#[test]
fn average_rank_never_increases_and_budget_reached() {
    let art = run_experiment(&config("fedara", "")).unwrap();
    assert!(art.records.windows(2).all(|w| w[1].avg_rank <= w[0].avg_rank));
    let last = art.records.last().unwrap();
    assert!(last.avg_rank <= 2.0 + 1.0, "final average rank {}", last.avg_rank);
    assert_eq!(art.final_mask.count(), art.final_model.sites().iter().map(|s| s.live_rank()).sum::<usize>());
}

#[test]
fn fixed_rank_methods_have_constant_traffic() {
    for method in ["fedlora", "fedsvd"] {
        let art = run_experiment(&config(method, "")).unwrap();
        let first = art.ledger.rounds()[0];
        assert!(art.ledger.rounds().iter().all(|r| *r == first));
        assert_eq!(art.ledger.total(), 30 * (first.bytes_down + first.bytes_up));
    }
    let lora = run_experiment(&config("fedlora", "")).unwrap();
    assert_eq!(lora.records[0].bytes_down, 5 * expected_payload(32, 32));
}

#[test]
fn constant_budget_reproduces_fixed_rank_run() {
    let ara = run_experiment(&config("fedara", "T_r = 8\n")).unwrap();
    let svd = run_experiment(&config("fedsvd", "T_r = 8\n")).unwrap();
    assert_eq!(ara.final_model, svd.final_model);
    for (a, s) in ara.records.iter().zip(&svd.records) {
        assert_eq!(a.val_acc, s.val_acc);
        assert_eq!(a.train_loss, s.train_loss);
        assert_eq!(a.bytes_down, s.bytes_down);
    }
    assert_eq!(ara.final_mask.count(), 32);
}

#[test]
fn runs_are_reproducible() {
    let a = run_experiment(&config("fedara", "")).unwrap();
    let b = run_experiment(&config("fedara", "")).unwrap();
    assert_eq!(a.rounds_csv(), b.rounds_csv());
    assert_eq!(a.ranks_csv(), b.ranks_csv());
    assert_eq!(a.payload_digest, b.payload_digest);
}

#[test]
fn different_seeds_differ() {
    let a = run_experiment(&config("fedsvd", "")).unwrap();
    let mut other = config("fedsvd", "");
    other.seed = 99;
    let b = run_experiment(&other).unwrap();
    assert_ne!(a.payload_digest, b.payload_digest);
}

#[test]
fn module_pruning_changes_only_the_count() {
    let on = run_experiment(&config("fedara", "T_r = 0\nmodule_pruning = true\n")).unwrap();
    let off = run_experiment(&config("fedara", "T_r = 0\nmodule_pruning = false\n")).unwrap();
    assert_eq!(on.payload_digest, off.payload_digest);
    assert_eq!(on.final_model.head_w(), off.final_model.head_w());
    let last_on = on.records.last().unwrap();
    let last_off = off.records.last().unwrap();
    assert_eq!(last_on.frozen_sites, 4);
    assert_eq!(last_off.frozen_sites, 0);
    assert_eq!(last_on.trainable_params, 4 * 16 + 4);
    assert!(last_off.trainable_params > last_on.trainable_params);
}

#[test]
fn dead_eval_site_reports_missing_direction() {
    let art = run_experiment(&config("fedara", "T_r = 0\n")).unwrap();
    let last = art.records.last().unwrap();
    assert_eq!(last.mag, 0.0);
    assert_eq!(last.dir, None);
    let line = art.rounds_csv().lines().last().unwrap().to_string();
    assert!(line.ends_with(','), "{line}");
}

#[test]
fn learning_improves_over_chance() {
    let art = run_experiment(&config("fedsvd", "")).unwrap();
    assert!(art.test_accuracy > 0.5, "test accuracy {}", art.test_accuracy);
    assert!(art.pretrain_accuracy > 0.5);
}

#[test]
fn invalid_method_is_config_error() {
    let err = ExperimentConfig::parse("method = fedprox\nr_init = 8\nT = 30\nseed = 1\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!("fedara".parse::<Method>().unwrap(), Method::FedAra);
}

#[test]
fn csv_dataset_source() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let mut rng = fedara::numerics::Rng::new(4);
    let ds = fedara::data::gen_synthetic(&mut rng, 600, 16, 4, 3.0).unwrap();
    ds.save_csv(&path).unwrap();
    let cfg = config("fedlora", &format!("data = \"{}\"\n", path.display()));
    let art = run_experiment(&cfg).unwrap();
    assert_eq!(art.records.len(), 30);

    let wrong = config("fedlora", &format!("data = \"{}\"\nd = 20\n", path.display()));
    assert!(matches!(run_experiment(&wrong), Err(Error::Config(_))));
}
