use rtb_explore::bidder::GroupPolicy;
use rtb_explore::controller::ControllerConfig;
use rtb_explore::experiment::{self, AuditRecord, ExperimentConfig, Phase, Report, SweepSummary};

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        n_warmup_requests: 8_000,
        n_online_requests: 24_000,
        n_holdout_requests: 3_000,
        ..ExperimentConfig::default()
    };
    cfg.market.drift.iter_mut().enumerate().for_each(|(i, d)| d.tick = 15_000 + 5_000 * i as u64);
    cfg.controller.min_window_fill = 100;
    cfg.pool.min_fill = 50;
    cfg
}

fn run_logged(cfg: &ExperimentConfig) -> (Report, Vec<AuditRecord>) {
    let mut log = Vec::new();
    let mut sink = |r: &AuditRecord| log.push(r.clone());
    let report = experiment::run_with_audit(cfg, Some(&mut sink)).unwrap();
    (report, log)
}

#[test]
fn groups_train_only_on_their_own_wins() {
    let cfg = small(3);
    let (report, log) = run_logged(&cfg);
    for rec in &log {
        match rec.phase {
            Phase::Warmup => assert_eq!(rec.group, None),
            Phase::Online => {
                let g = rec.group.expect("online decisions belong to a group");
                if rec.won {
                    assert_eq!(rec.trained_by, Some(g));
                    assert!(rec.clearing_price.is_some() && rec.clicked.is_some());
                } else {
                    assert_eq!(rec.trained_by, None);
                    assert!(rec.clearing_price.is_none() && rec.clicked.is_none());
                }
            }
        }
    }
    for g in &report.groups {
        assert_eq!(g.training_events, g.impressions);
        let wins = log.iter().filter(|r| r.group == Some(g.group) && r.won).count() as u64;
        assert_eq!(wins, g.impressions);
    }
}

#[test]
fn traffic_split_is_even_and_complete() {
    let cfg = small(4);
    let (report, log) = run_logged(&cfg);
    let total: u64 = report.groups.iter().map(|g| g.requests).sum();
    assert_eq!(total, cfg.n_online_requests as u64);
    let n = total as f64;
    let sigma = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for g in &report.groups {
        assert!((g.requests as f64 - n / 3.0).abs() <= 3.0 * sigma, "{:?}: {}", g.group, g.requests);
    }
    assert_eq!(log.iter().filter(|r| r.phase == Phase::Warmup).count(), cfg.n_warmup_requests);
    let mut ids: Vec<u64> = log.iter().map(|r| r.request_id).collect();
    ids.dedup();
    assert_eq!(ids.len(), log.len(), "each request is decided once");
}

#[test]
fn only_exploring_groups_modify_bids() {
    let (report, log) = run_logged(&small(5));
    for rec in log.iter().filter(|r| r.phase == Phase::Online) {
        match rec.group.unwrap() {
            GroupPolicy::Control => assert!(rec.modifier.is_none() && rec.uncertainty.is_none()),
            GroupPolicy::UncertaintyExplore => assert!(rec.uncertainty.is_some()),
            GroupPolicy::RandomExplore => assert!(rec.uncertainty.is_none()),
        }
        if let Some(m) = rec.modifier {
            assert!((1.0..=3.0).contains(&m));
            assert!((rec.final_bid - rec.base_bid * m).abs() <= 1e-15 * rec.final_bid);
        } else {
            assert_eq!(rec.final_bid, rec.base_bid);
        }
    }
    assert_eq!(report.group(GroupPolicy::Control).explored, 0);
    assert!(report.group(GroupPolicy::UncertaintyExplore).explored > 0);
    assert!(report.group(GroupPolicy::RandomExplore).explored > 0);
}

#[test]
fn zero_explore_fraction_disables_exploration() {
    let mut cfg = small(6);
    cfg.controller = ControllerConfig { explore_fraction: 0.0, ..cfg.controller };
    let report = experiment::run(&cfg).unwrap();
    for g in &report.groups {
        assert_eq!(g.explored, 0, "{:?}", g.group);
    }
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let a = experiment::run(&small(7)).unwrap();
    let b = experiment::run(&small(7)).unwrap();
    let c = experiment::run(&small(8)).unwrap();
    assert_eq!(a.to_toml(), b.to_toml());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_ne!(a.to_toml(), c.to_toml());
    assert_eq!(Report::from_toml(&a.to_toml()).unwrap(), a);
}

#[test]
fn holdout_is_shared_and_deltas_are_relative_to_control() {
    let r = experiment::run(&small(9)).unwrap();
    assert_eq!(r.holdout_size, 3_000);
    assert!(r.holdout_positives > 0 && r.holdout_positives < r.holdout_size);
    let c = r.group(GroupPolicy::Control).clone();
    assert_eq!(c.delta_auc, 0.0);
    for g in &r.groups {
        assert!(g.auc > 0.0 && g.auc < 1.0 && g.log_loss > 0.0);
        assert!((g.delta_auc - (g.auc - c.auc) / c.auc).abs() < 1e-12);
        assert!((g.delta_log_loss - (g.log_loss - c.log_loss) / c.log_loss).abs() < 1e-12);
    }
    let u = r.group(GroupPolicy::UncertaintyExplore).mean_uncertainty;
    let x = r.group(GroupPolicy::RandomExplore).mean_uncertainty;
    assert!((r.uncertainty_gap - (x - u) / x).abs() < 1e-12);
}

#[test]
fn sweep_summary_counts_seeds() {
    let reports: Vec<Report> = [1, 2].iter().map(|&s| experiment::run(&small(s)).unwrap()).collect();
    let one = SweepSummary::from_reports(&reports[..1]);
    assert_eq!(one.n_seeds, 1);
    assert_eq!(one.seeds, vec![1]);
    let both = SweepSummary::from_reports(&reports);
    assert_eq!(both.n_seeds, 2);
    assert!(both.offline_direction <= 2 && both.uncertainty_gap_positive <= 2);
    let csv = SweepSummary::aggregate_csv(&reports);
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = ExperimentConfig { n_online_requests: 0, ..ExperimentConfig::default() };
    assert!(experiment::run(&cfg).is_err());
    let mut cfg = small(1);
    cfg.controller.q_low = 0.9;
    cfg.controller.q_high = 0.5;
    assert!(experiment::run(&cfg).is_err());
}
