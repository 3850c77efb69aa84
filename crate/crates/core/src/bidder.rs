//! Bidding policy.
//!
//! Every candidate ad is scored once in deterministic mode and the ad with
//! the highest expected value per impression (`pCTR × CPC goal`) wins the
//! internal ranking. Exploration then scales that base bid by a modifier:
//! from the uncertainty controller, from the pool of modifiers the
//! uncertainty group has been granted, or not at all.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerError};
use crate::features::Encoder;
use crate::market::{AdCandidate, BidRequest};
use crate::model::{CtrModel, ModelError};
use crate::rng::SimRng;
use crate::uncertainty::{self, UncertaintyError, UncertaintyEstimate};

#[derive(Debug, Error, PartialEq)]
pub enum BidError {
    #[error("no candidate ads")]
    NoCandidates,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPolicy {
    Control,
    UncertaintyExplore,
    RandomExplore,
}

impl GroupPolicy {
    pub const ALL: [GroupPolicy; 3] = [
        GroupPolicy::Control,
        GroupPolicy::UncertaintyExplore,
        GroupPolicy::RandomExplore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupPolicy::Control => "control",
            GroupPolicy::UncertaintyExplore => "uncertainty",
            GroupPolicy::RandomExplore => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidDecision {
    pub chosen_ad: AdCandidate,
    pub pctr: f64,
    pub base_bid: f64,
    pub modifier: Option<f64>,
    pub final_bid: f64,
    pub explored: bool,
    pub uncertainty: Option<UncertaintyEstimate>,
    /// Controller mean for the request's dimension, when one was consulted.
    pub mu_unc: Option<f64>,
    /// Model forward passes spent on this decision.
    pub forward_passes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub capacity: usize,
    pub min_fill: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            capacity: 50_000,
            min_fill: 1_000,
        }
    }
}

/// Reservoir of modifiers granted to the uncertainty group, read by the
/// random group. Only modifiers and the grant rate cross between groups.
#[derive(Clone, Debug)]
pub struct ModifierPool {
    cfg: PoolConfig,
    values: Vec<f64>,
    published: u64,
    offers: u64,
    rng: SimRng,
}

impl ModifierPool {
    /// `rng` drives reservoir replacement only.
    pub fn new(cfg: PoolConfig, rng: SimRng) -> Self {
        Self {
            values: Vec::with_capacity(cfg.capacity.min(1 << 20)),
            cfg,
            published: 0,
            offers: 0,
            rng,
        }
    }

    /// Reservoir sampling (algorithm R): after `t` publishes every published
    /// modifier is retained with equal probability.
    pub fn publish(&mut self, modifier: f64) {
        self.published += 1;
        if self.values.len() < self.cfg.capacity {
            self.values.push(modifier);
        } else if self.cfg.capacity > 0 {
            let j = self.rng.random_range(0..self.published);
            if (j as usize) < self.cfg.capacity {
                self.values[j as usize] = modifier;
            }
        }
    }

    /// Counts one uncertainty-group decision for the grant-rate estimate.
    pub fn record_offer(&mut self) {
        self.offers += 1;
    }

    pub fn is_ready(&self) -> bool {
        self.published >= self.cfg.min_fill as u64 && !self.values.is_empty()
    }

    /// Share of uncertainty-group decisions that received a modifier.
    pub fn grant_rate(&self) -> f64 {
        if self.offers == 0 {
            0.0
        } else {
            self.published as f64 / self.offers as f64
        }
    }

    /// Uniform draw from the reservoir; `None` until ready.
    pub fn sample(&self, rng: &mut SimRng) -> Option<f64> {
        self.is_ready()
            .then(|| self.values[rng.random_range(0..self.values.len())])
    }

    pub fn contents(&self) -> &[f64] {
        &self.values
    }
}

/// What a group may touch when exploring. The random group only ever sees
/// the pool.
pub enum Strategy<'a> {
    Control,
    Uncertainty {
        controller: &'a mut Controller,
        pool: &'a mut ModifierPool,
        n_samples: usize,
    },
    Random {
        pool: &'a ModifierPool,
    },
}

pub fn base_bid(pctr: f64, cpc_goal: f64) -> f64 {
    pctr * cpc_goal
}

/// Scores `ads`, picks the best and applies the strategy's exploration.
pub fn decide(
    request: &BidRequest,
    ads: &[AdCandidate],
    model: &CtrModel,
    encoder: &Encoder,
    strategy: Strategy<'_>,
    rng: &mut SimRng,
) -> Result<BidDecision, BidError> {
    let passes_before = model.forward_passes();
    let mut best: Option<(&AdCandidate, f64, f64)> = None;
    for ad in ads {
        let pctr = model.predict_deterministic(&encoder.encode(request, ad))?;
        let bid = base_bid(pctr, ad.cpc_goal);
        let better = match best {
            None => true,
            Some((b, _, b_bid)) => bid > b_bid || (bid == b_bid && ad.ad_id < b.ad_id),
        };
        if better {
            best = Some((ad, pctr, bid));
        }
    }
    let (ad, pctr, base) = best.ok_or(BidError::NoCandidates)?;

    let mut uncertainty = None;
    let mut mu_unc = None;
    let modifier = match strategy {
        Strategy::Control => None,
        Strategy::Uncertainty {
            controller,
            pool,
            n_samples,
        } => {
            let est = uncertainty::estimate(model, encoder, request, n_samples, rng)?;
            let key = controller.key(request);
            controller.ingest(key, est.std)?;
            let snap = controller.snapshot(key);
            let granted = controller.modifier(est.std, &snap, rng);
            pool.record_offer();
            if let Some(m) = granted {
                pool.publish(m);
            }
            uncertainty = Some(est);
            mu_unc = Some(snap.mu_unc);
            granted
        }
        Strategy::Random { pool } => {
            let eligible = rng.random::<f64>() < pool.grant_rate();
            if eligible {
                pool.sample(rng)
            } else {
                None
            }
        }
    };

    let final_bid = modifier.map_or(base, |m| base * m);
    Ok(BidDecision {
        chosen_ad: ad.clone(),
        pctr,
        base_bid: base,
        modifier,
        final_bid,
        explored: modifier.is_some(),
        uncertainty,
        mu_unc,
        forward_passes: model.forward_passes() - passes_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerConfig;
    use crate::features::FeatureConfig;
    use crate::model::ModelConfig;
    use crate::rng::derive;

    fn setup() -> (CtrModel, Encoder, Vec<AdCandidate>) {
        let enc = Encoder::new(&FeatureConfig::default()).unwrap();
        let model = CtrModel::new(ModelConfig::default(), enc.spaces(), &mut derive(3, 0)).unwrap();
        let ads = (0..10)
            .map(|i| AdCandidate { ad_id: i * 3, campaign_id: i % 4, cpc_goal: 0.5 + 0.1 * i as f64 })
            .collect();
        (model, enc, ads)
    }

    fn req(i: u64) -> BidRequest {
        BidRequest { request_id: i, publisher_id: (i % 40) as u32, user_segment: (i % 8) as u32, context_slot: (i % 4) as u32, timestamp: i }
    }

    #[test]
    fn base_bid_values() {
        assert_eq!(base_bid(0.02, 1.0), 0.02);
        assert_eq!(base_bid(0.0, 7.5), 0.0);
        assert_eq!(base_bid(0.04, 1.3), 2.0 * base_bid(0.02, 1.3));
    }

    #[test]
    fn control_never_modifies() {
        let (model, enc, ads) = setup();
        let mut rng = derive(1, 1);
        for i in 0..50 {
            let d = decide(&req(i), &ads, &model, &enc, Strategy::Control, &mut rng).unwrap();
            assert_eq!(d.final_bid, d.base_bid);
            assert!(d.uncertainty.is_none() && !d.explored);
            assert_eq!(d.forward_passes, ads.len() as u64);
        }
    }

    #[test]
    fn chosen_ad_is_argmax() {
        let (model, enc, ads) = setup();
        let d = decide(&req(1), &ads, &model, &enc, Strategy::Control, &mut derive(1, 1)).unwrap();
        for ad in &ads {
            let p = model.predict_deterministic(&enc.encode(&req(1), ad)).unwrap();
            assert!(base_bid(p, ad.cpc_goal) <= d.base_bid);
        }
    }

    #[test]
    fn ties_break_to_lowest_ad_id() {
        let enc = Encoder::new(&FeatureConfig::default()).unwrap();
        let model = CtrModel::zeros(ModelConfig::default(), enc.spaces()).unwrap();
        let ads: Vec<AdCandidate> = [9, 4, 7]
            .iter()
            .map(|&i| AdCandidate { ad_id: i, campaign_id: 0, cpc_goal: 1.0 })
            .collect();
        let d = decide(&req(0), &ads, &model, &enc, Strategy::Control, &mut derive(1, 1)).unwrap();
        assert_eq!(d.chosen_ad.ad_id, 4);
    }

    #[test]
    fn argmax_invariant_to_goal_scaling() {
        let (model, enc, ads) = setup();
        for c in [0.01, 0.5, 3.0, 1e3] {
            let scaled: Vec<AdCandidate> = ads.iter().map(|a| AdCandidate { cpc_goal: a.cpc_goal * c, ..a.clone() }).collect();
            for i in 0..20 {
                let a = decide(&req(i), &ads, &model, &enc, Strategy::Control, &mut derive(1, 1)).unwrap();
                let b = decide(&req(i), &scaled, &model, &enc, Strategy::Control, &mut derive(1, 1)).unwrap();
                assert_eq!(a.chosen_ad.ad_id, b.chosen_ad.ad_id);
            }
        }
    }

    #[test]
    fn empty_ads_rejected() {
        let (model, enc, _) = setup();
        let r = decide(&req(0), &[], &model, &enc, Strategy::Control, &mut derive(1, 1));
        assert_eq!(r.unwrap_err(), BidError::NoCandidates);
    }

    #[test]
    fn uncertainty_budget_and_bid_scaling() {
        let (model, enc, ads) = setup();
        let cfg = ControllerConfig { explore_fraction: 1.0, q_low: 0.0, q_high: 1.0, min_window_fill: 1, ..ControllerConfig::default() };
        let mut controller = Controller::new(cfg).unwrap();
        let mut pool = ModifierPool::new(PoolConfig::default(), derive(0, 5));
        let mut rng = derive(1, 1);
        let mut explored = 0;
        for i in 0..200 {
            let d = decide(
                &req(i),
                &ads,
                &model,
                &enc,
                Strategy::Uncertainty { controller: &mut controller, pool: &mut pool, n_samples: 30 },
                &mut rng,
            )
            .unwrap();
            assert_eq!(d.forward_passes, 40);
            assert!(d.uncertainty.is_some());
            if let Some(m) = d.modifier {
                explored += 1;
                assert!((1.0..=3.0).contains(&m));
                assert_eq!(d.final_bid, d.base_bid * m);
            } else {
                assert_eq!(d.final_bid, d.base_bid);
            }
        }
        assert_eq!(explored, pool.contents().len());
        assert!(explored > 100);
    }

    #[test]
    fn uncertainty_without_exploration_keeps_base_bid() {
        let (model, enc, ads) = setup();
        let cfg = ControllerConfig { explore_fraction: 0.0, min_window_fill: 1, ..ControllerConfig::default() };
        let mut controller = Controller::new(cfg).unwrap();
        let mut pool = ModifierPool::new(PoolConfig::default(), derive(0, 5));
        let mut rng = derive(1, 1);
        for i in 0..100 {
            let d = decide(&req(i), &ads, &model, &enc, Strategy::Uncertainty { controller: &mut controller, pool: &mut pool, n_samples: 5 }, &mut rng).unwrap();
            assert_eq!(d.final_bid, d.base_bid);
        }
        assert_eq!(pool.grant_rate(), 0.0);
    }

    #[test]
    fn random_group_waits_for_pool() {
        let (model, enc, ads) = setup();
        let mut pool = ModifierPool::new(PoolConfig { capacity: 10, min_fill: 3 }, derive(0, 5));
        let mut rng = derive(1, 1);
        for _ in 0..4 {
            pool.record_offer();
        }
        pool.publish(2.0);
        pool.publish(2.0);
        let d = decide(&req(0), &ads, &model, &enc, Strategy::Random { pool: &pool }, &mut rng).unwrap();
        assert!(!d.explored);
        pool.publish(2.0);
        pool.publish(2.0);
        // grant rate is now 1
        let d = decide(&req(0), &ads, &model, &enc, Strategy::Random { pool: &pool }, &mut rng).unwrap();
        assert_eq!(d.modifier, Some(2.0));
        assert_eq!(d.final_bid, d.base_bid * 2.0);
        assert_eq!(d.forward_passes, ads.len() as u64);
        assert!(d.uncertainty.is_none());
    }

    #[test]
    fn reservoir_is_bounded_and_uniform() {
        let mut pool = ModifierPool::new(PoolConfig { capacity: 1_000, min_fill: 1 }, derive(0, 5));
        for i in 0..100_000 {
            pool.publish(i as f64);
        }
        assert_eq!(pool.contents().len(), 1_000);
        // Mean of a uniform sample of 0..100_000 is ~50_000 with sd ~ 900.
        let mean = pool.contents().iter().sum::<f64>() / 1_000.0;
        assert!((mean - 49_999.5).abs() < 4_000.0, "{mean}");
    }
}
