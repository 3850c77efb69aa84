//! Three-group A/B experiment.
//!
//! 1. Warm-up: one model buys warm-up traffic with the control policy and
//!    learns from its wins; it is then cloned into three identical group
//!    models.
//! 2. Online: every request goes to exactly one group, uniformly at random.
//!    A group bids with its own model and policy and trains only on the
//!    impressions it wins.
//! 3. Holdout: fresh requests after the online phase, each paired with the
//!    ad the warm-up model would choose among freshly drawn candidates and
//!    labelled from the ground-truth CTR, are scored by each group's final
//!    model. Every group is evaluated on the same pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bidder::{self, BidError, GroupPolicy, ModifierPool, PoolConfig, Strategy};
use crate::controller::{Controller, ControllerConfig, ControllerError};
use crate::features::{Encoder, FeatureConfig, FeatureError};
use crate::market::{AuctionOutcome, Market, MarketConfig, MarketError};
use crate::metrics::{self, MetricError};
use crate::model::{CtrModel, ModelConfig, ModelError};
use crate::rng::{derive, SimRng};
use crate::uncertainty::{self, UncertaintyError};

mod streams {
    pub const MARKET: u64 = 1;
    pub const REQUESTS: u64 = 2;
    pub const ROUTING: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const POOL: u64 = 5;
    pub const HOLDOUT: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const WARMUP: u64 = 10;
    /// Per-group streams start here: base + 16·group + {0 bid, 1 auction, 2 train}.
    pub const GROUP_BASE: u64 = 100;
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Bid(#[from] BidError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_warmup_requests: usize,
    pub n_online_requests: usize,
    pub n_holdout_requests: usize,
    pub ads_per_request: usize,
    /// MC-dropout samples per request.
    pub mc_samples: usize,
    pub market: MarketConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub controller: ControllerConfig,
    pub pool: PoolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_warmup_requests: 200_000,
            n_online_requests: 600_000,
            n_holdout_requests: 100_000,
            ads_per_request: 10,
            mc_samples: 30,
            market: MarketConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            controller: ControllerConfig::default(),
            pool: PoolConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.n_warmup_requests == 0 || self.n_online_requests == 0 || self.n_holdout_requests == 0 {
            return bad("request counts must be positive");
        }
        if self.ads_per_request == 0 || self.ads_per_request > self.market.n_ads as usize {
            return bad("ads_per_request must be in 1..=market.n_ads");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be positive");
        }
        if self.pool.min_fill > self.pool.capacity || self.pool.capacity == 0 {
            return bad("pool capacity must be positive and at least min_fill");
        }
        self.market.validate()?;
        self.model.validate()?;
        self.controller.validate()?;
        Encoder::new(&self.features)?;
        if self.market.total_publishers() as u64 > self.features.publisher_space as u64 * 4 {
            return bad("publisher catalog is far larger than its hash space");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Online,
}

/// One line of the per-decision audit log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRecord {
    pub phase: Phase,
    pub group: Option<GroupPolicy>,
    pub request_id: u64,
    pub publisher_id: u32,
    pub dimension_key: Option<u64>,
    pub chosen_ad: u32,
    pub pctr: f64,
    pub base_bid: f64,
    pub uncertainty: Option<f64>,
    pub mu_unc: Option<f64>,
    pub modifier: Option<f64>,
    pub final_bid: f64,
    pub won: bool,
    pub clearing_price: Option<f64>,
    pub clicked: Option<bool>,
    /// Group whose model trained on this impression, if any.
    pub trained_by: Option<GroupPolicy>,
    pub forward_passes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupLedger {
    pub requests: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub spend: f64,
    pub revenue: f64,
    pub training_events: u64,
    pub explored: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: GroupPolicy,
    pub requests: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub training_events: u64,
    pub explored: u64,
    pub spend: f64,
    pub revenue: f64,
    pub ctr: f64,
    /// Spend per click over all campaigns.
    pub realized_cpc: f64,
    /// Campaigns whose spend exceeds clicks × CPC goal.
    pub campaigns_over_cpc_goal: u64,
    pub auc: f64,
    pub log_loss: f64,
    pub mean_uncertainty: f64,
    pub delta_revenue: f64,
    pub delta_ctr: f64,
    pub delta_auc: f64,
    pub delta_log_loss: f64,
    pub delta_mean_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub warmup_impressions: u64,
    pub holdout_size: u64,
    pub holdout_positives: u64,
    /// `(unc_random − unc_uncertainty) / unc_random` on the holdout.
    pub uncertainty_gap: f64,
    pub groups: Vec<GroupReport>,
}

pub const CSV_HEADER: &str = "group,revenue,ctr,auc,logloss,mean_unc,delta_revenue,delta_ctr,delta_auc,delta_logloss";

impl Report {
    pub fn group(&self, policy: GroupPolicy) -> &GroupReport {
        self.groups
            .iter()
            .find(|g| g.group == policy)
            .expect("report has every group")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                g.group.name(),
                g.revenue,
                g.ctr,
                g.auc,
                g.log_loss,
                g.mean_uncertainty,
                g.delta_revenue,
                g.delta_ctr,
                g.delta_auc,
                g.delta_log_loss
            ));
        }
        out
    }
}

/// Relative difference of `value` over `baseline`.
pub fn relative_delta(value: f64, baseline: f64) -> f64 {
    (value - baseline) / baseline
}

/// How much lower the uncertainty group's mean holdout uncertainty is than
/// the random group's, relative to the random group.
pub fn holdout_uncertainty_gap(report: &Report) -> f64 {
    gap(
        report.group(GroupPolicy::RandomExplore).mean_uncertainty,
        report.group(GroupPolicy::UncertaintyExplore).mean_uncertainty,
    )
}

fn gap(random: f64, uncertainty: f64) -> f64 {
    if random == uncertainty {
        0.0
    } else {
        (random - uncertainty) / random
    }
}

struct Group {
    policy: GroupPolicy,
    model: CtrModel,
    bid_rng: SimRng,
    auction_rng: SimRng,
    train_rng: SimRng,
    ledger: GroupLedger,
    /// Per campaign: (spend, clicks).
    campaigns: Vec<(f64, u64)>,
}

impl Group {
    fn new(policy: GroupPolicy, index: u64, seed: u64, model: CtrModel, n_campaigns: usize) -> Self {
        let base = streams::GROUP_BASE + 16 * index;
        Self {
            policy,
            model,
            bid_rng: derive(seed, base),
            auction_rng: derive(seed, base + 1),
            train_rng: derive(seed, base + 2),
            ledger: GroupLedger::default(),
            campaigns: vec![(0.0, 0); n_campaigns],
        }
    }
}

/// Runs the experiment without an audit log.
pub fn run(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    run_with_audit(cfg, None)
}

/// Runs the experiment, handing every warm-up and online decision to
/// `audit` when given.
pub fn run_with_audit(
    cfg: &ExperimentConfig,
    mut audit: Option<&mut dyn FnMut(&AuditRecord)>,
) -> Result<Report, ExperimentError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let encoder = Encoder::new(&cfg.features)?;
    let mut market = Market::new(cfg.market.clone(), derive(seed, streams::MARKET))?;
    let mut request_rng = derive(seed, streams::REQUESTS);
    let k = cfg.ads_per_request;

    // Warm-up: one shared model under the control policy.
    let mut shared = CtrModel::new(cfg.model.clone(), encoder.spaces(), &mut derive(seed, streams::MODEL_INIT))?;
    let mut warm_bid_rng = derive(seed, streams::WARMUP);
    let mut warm_auction_rng = derive(seed, streams::WARMUP + 1);
    let mut warm_train_rng = derive(seed, streams::WARMUP + 2);
    let mut warmup_impressions = 0;
    for _ in 0..cfg.n_warmup_requests {
        let req = market.gen_request(&mut request_rng);
        let ads = market.sample_candidates(k, &mut request_rng);
        let d = bidder::decide(&req, &ads, &shared, &encoder, Strategy::Control, &mut warm_bid_rng)?;
        let outcome = market.run_auction(d.final_bid, &req, &d.chosen_ad, &mut warm_auction_rng)?;
        if let AuctionOutcome::Won { clicked, .. } = outcome {
            shared.train_step(&encoder.encode(&req, &d.chosen_ad), clicked, &mut warm_train_rng)?;
            warmup_impressions += 1;
        }
        if let Some(sink) = audit.as_deref_mut() {
            sink(&audit_record(Phase::Warmup, None, &req, None, &d, &outcome));
        }
    }

    let n_campaigns = cfg.market.n_campaigns as usize;
    let mut groups: Vec<Group> = GroupPolicy::ALL
        .iter()
        .enumerate()
        .map(|(i, &p)| Group::new(p, i as u64, seed, shared.clone(), n_campaigns))
        .collect();
    // `shared` stays frozen from here on and picks the holdout ads.
    let mut controller = Controller::new(cfg.controller.clone())?;
    let mut pool = ModifierPool::new(cfg.pool.clone(), derive(seed, streams::POOL));
    let mut routing_rng = derive(seed, streams::ROUTING);

    for _ in 0..cfg.n_online_requests {
        let req = market.gen_request(&mut request_rng);
        let ads = market.sample_candidates(k, &mut request_rng);
        let group = &mut groups[routing_rng.random_range(0..GroupPolicy::ALL.len())];
        let strategy = match group.policy {
            GroupPolicy::Control => Strategy::Control,
            GroupPolicy::UncertaintyExplore => Strategy::Uncertainty {
                controller: &mut controller,
                pool: &mut pool,
                n_samples: cfg.mc_samples,
            },
            GroupPolicy::RandomExplore => Strategy::Random { pool: &pool },
        };
        let d = bidder::decide(&req, &ads, &group.model, &encoder, strategy, &mut group.bid_rng)?;
        let outcome = market.run_auction(d.final_bid, &req, &d.chosen_ad, &mut group.auction_rng)?;
        let ledger = &mut group.ledger;
        ledger.requests += 1;
        ledger.explored += d.explored as u64;
        if let AuctionOutcome::Won { clearing_price, clicked } = outcome {
            ledger.impressions += 1;
            ledger.spend += clearing_price;
            let campaign = &mut group.campaigns[d.chosen_ad.campaign_id as usize];
            campaign.0 += clearing_price;
            if clicked {
                ledger.clicks += 1;
                ledger.revenue += d.chosen_ad.cpc_goal;
                campaign.1 += 1;
            }
            group
                .model
                .train_step(&encoder.encode(&req, &d.chosen_ad), clicked, &mut group.train_rng)?;
            ledger.training_events += 1;
        }
        if let Some(sink) = audit.as_deref_mut() {
            let key = matches!(group.policy, GroupPolicy::UncertaintyExplore).then(|| controller.key(&req));
            sink(&audit_record(Phase::Online, Some(group.policy), &req, key, &d, &outcome));
        }
    }

    // Holdout on fresh traffic.
    let mut holdout_rng = derive(seed, streams::HOLDOUT);
    let mut holdout = Vec::with_capacity(cfg.n_holdout_requests);
    let mut labels = Vec::with_capacity(cfg.n_holdout_requests);
    for _ in 0..cfg.n_holdout_requests {
        let req = market.gen_request(&mut holdout_rng);
        let ads = market.sample_candidates(k, &mut holdout_rng);
        let ad = bidder::decide(&req, &ads, &shared, &encoder, Strategy::Control, &mut holdout_rng)?.chosen_ad;
        let ctr = market.true_ctr(&req, &ad)?;
        labels.push(holdout_rng.random::<f64>() < ctr);
        holdout.push((req, ad));
    }

    let mut evals = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut eval_rng = derive(seed, streams::EVAL);
        let mut scores = Vec::with_capacity(holdout.len());
        let mut unc_sum = 0.0;
        for (req, ad) in &holdout {
            scores.push(g.model.predict_deterministic(&encoder.encode(req, ad))?);
            unc_sum += uncertainty::estimate(&g.model, &encoder, req, cfg.mc_samples, &mut eval_rng)?.std;
        }
        evals.push((
            metrics::auc(&scores, &labels)?,
            metrics::log_loss(&scores, &labels)?,
            unc_sum / holdout.len() as f64,
        ));
    }

    let goals: Vec<f64> = {
        let mut goals = vec![0.0; n_campaigns];
        for ad in market.ads() {
            goals[ad.campaign_id as usize] = ad.cpc_goal;
        }
        goals
    };
    let mut reports: Vec<GroupReport> = groups
        .iter()
        .zip(&evals)
        .map(|(g, &(auc, log_loss, mean_uncertainty))| {
            let l = &g.ledger;
            GroupReport {
                group: g.policy,
                requests: l.requests,
                impressions: l.impressions,
                clicks: l.clicks,
                training_events: l.training_events,
                explored: l.explored,
                spend: l.spend,
                revenue: l.revenue,
                ctr: ratio(l.clicks as f64, l.impressions as f64),
                realized_cpc: ratio(l.spend, l.clicks as f64),
                campaigns_over_cpc_goal: g
                    .campaigns
                    .iter()
                    .zip(&goals)
                    .filter(|((spend, clicks), goal)| *spend > *clicks as f64 * **goal)
                    .count() as u64,
                auc,
                log_loss,
                mean_uncertainty,
                delta_revenue: 0.0,
                delta_ctr: 0.0,
                delta_auc: 0.0,
                delta_log_loss: 0.0,
                delta_mean_uncertainty: 0.0,
            }
        })
        .collect();
    let control = reports[0].clone();
    for r in &mut reports {
        r.delta_revenue = relative_delta(r.revenue, control.revenue);
        r.delta_ctr = relative_delta(r.ctr, control.ctr);
        r.delta_auc = relative_delta(r.auc, control.auc);
        r.delta_log_loss = relative_delta(r.log_loss, control.log_loss);
        r.delta_mean_uncertainty = relative_delta(r.mean_uncertainty, control.mean_uncertainty);
    }

    let mut report = Report {
        seed,
        warmup_impressions,
        holdout_size: holdout.len() as u64,
        holdout_positives: labels.iter().filter(|&&l| l).count() as u64,
        uncertainty_gap: 0.0,
        groups: reports,
    };
    report.uncertainty_gap = holdout_uncertainty_gap(&report);
    Ok(report)
}

/// Whether a run reproduces the direction of the offline comparison: the
/// uncertainty group beats control on AUC and log loss, and is at least as
/// good as the random group on both.
pub fn offline_direction_holds(report: &Report) -> bool {
    let c = report.group(GroupPolicy::Control);
    let u = report.group(GroupPolicy::UncertaintyExplore);
    let r = report.group(GroupPolicy::RandomExplore);
    u.auc > c.auc && u.log_loss < c.log_loss && u.auc >= r.auc && u.log_loss <= r.log_loss
}

/// Seeds (out of `n_seeds`) on which a comparison held.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub revenue: usize,
    pub ctr: usize,
    pub auc: usize,
    /// Counted when log loss is lower or equal.
    pub log_loss: usize,
}

impl MetricCounts {
    fn tally(&mut self, better: &GroupReport, than: &GroupReport) {
        self.revenue += (better.revenue >= than.revenue) as usize;
        self.ctr += (better.ctr >= than.ctr) as usize;
        self.auc += (better.auc >= than.auc) as usize;
        self.log_loss += (better.log_loss <= than.log_loss) as usize;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_seeds: usize,
    pub seeds: Vec<u64>,
    pub uncertainty_vs_random: MetricCounts,
    pub uncertainty_vs_control: MetricCounts,
    pub random_vs_control: MetricCounts,
    /// Seeds where the uncertainty group's holdout uncertainty is strictly
    /// below the random group's.
    pub uncertainty_gap_positive: usize,
    /// Seeds satisfying [`offline_direction_holds`].
    pub offline_direction: usize,
    pub majority_uncertainty_ge_random_auc: bool,
    pub majority_uncertainty_le_random_log_loss: bool,
    pub majority_offline_direction: bool,
    pub majority_gap_positive: bool,
}

pub const AGGREGATE_CSV_HEADER: &str =
    "seed,group,delta_revenue,delta_ctr,delta_auc,delta_logloss,auc,logloss,mean_unc,uncertainty_gap";

impl SweepSummary {
    pub fn from_reports(reports: &[Report]) -> Self {
        let mut s = Self {
            n_seeds: reports.len(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            uncertainty_vs_random: MetricCounts::default(),
            uncertainty_vs_control: MetricCounts::default(),
            random_vs_control: MetricCounts::default(),
            uncertainty_gap_positive: 0,
            offline_direction: 0,
            majority_uncertainty_ge_random_auc: false,
            majority_uncertainty_le_random_log_loss: false,
            majority_offline_direction: false,
            majority_gap_positive: false,
        };
        for r in reports {
            let c = r.group(GroupPolicy::Control);
            let u = r.group(GroupPolicy::UncertaintyExplore);
            let rnd = r.group(GroupPolicy::RandomExplore);
            s.uncertainty_vs_random.tally(u, rnd);
            s.uncertainty_vs_control.tally(u, c);
            s.random_vs_control.tally(rnd, c);
            s.uncertainty_gap_positive += (u.mean_uncertainty < rnd.mean_uncertainty) as usize;
            s.offline_direction += offline_direction_holds(r) as usize;
        }
        let majority = |k: usize| 2 * k > s.n_seeds;
        s.majority_uncertainty_ge_random_auc = majority(s.uncertainty_vs_random.auc);
        s.majority_uncertainty_le_random_log_loss = majority(s.uncertainty_vs_random.log_loss);
        s.majority_offline_direction = majority(s.offline_direction);
        s.majority_gap_positive = majority(s.uncertainty_gap_positive);
        s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }

    /// One row per (seed, group) with deltas against that seed's control.
    pub fn aggregate_csv(reports: &[Report]) -> String {
        let mut out = String::from(AGGREGATE_CSV_HEADER);
        out.push('\n');
        for r in reports {
            for g in &r.groups {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.seed,
                    g.group.name(),
                    g.delta_revenue,
                    g.delta_ctr,
                    g.delta_auc,
                    g.delta_log_loss,
                    g.auc,
                    g.log_loss,
                    g.mean_uncertainty,
                    r.uncertainty_gap
                ));
            }
        }
        out
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn audit_record(
    phase: Phase,
    group: Option<GroupPolicy>,
    req: &crate::market::BidRequest,
    dimension_key: Option<u64>,
    d: &bidder::BidDecision,
    outcome: &AuctionOutcome,
) -> AuditRecord {
    let (clearing_price, clicked) = match *outcome {
        AuctionOutcome::Won { clearing_price, clicked } => (Some(clearing_price), Some(clicked)),
        AuctionOutcome::Lost => (None, None),
    };
    AuditRecord {
        phase,
        group,
        request_id: req.request_id,
        publisher_id: req.publisher_id,
        dimension_key,
        chosen_ad: d.chosen_ad.ad_id,
        pctr: d.pctr,
        base_bid: d.base_bid,
        uncertainty: d.uncertainty.map(|u| u.std),
        mu_unc: d.mu_unc,
        modifier: d.modifier,
        final_bid: d.final_bid,
        won: outcome.won(),
        clearing_price,
        clicked,
        trained_by: outcome.won().then_some(group).flatten(),
        forward_passes: d.forward_passes,
    }
}
