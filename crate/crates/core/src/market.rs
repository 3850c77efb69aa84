//! Synthetic RTB market.
//!
//! Publishers and ads carry latent vectors; the ground-truth click
//! probability of an impression is a logistic latent-factor model. Each
//! publisher has its own lognormal distribution for the highest competing
//! bid. Auctions are second-price with a fixed floor, and a lost auction
//! carries no information at all.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("unknown publisher {0}")]
    UnknownPublisher(u32),
    #[error("unknown ad {0}")]
    UnknownAd(u32),
    #[error("segment {0} outside catalog of {1}")]
    UnknownSegment(u32, u32),
    #[error("negative or non-finite bid {0}")]
    InvalidBid(f64),
    #[error("invalid market config: {0}")]
    Config(String),
}

/// A scheduled cold-start event: at `tick`, `new_publishers` fresh publishers
/// become active and the `retire` oldest active ones stop sending traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftBatch {
    pub tick: u64,
    pub new_publishers: usize,
    #[serde(default)]
    pub retire: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    /// Publishers active at tick 0.
    pub n_publishers: usize,
    pub n_segments: u32,
    pub n_slots: u32,
    pub n_ads: u32,
    pub n_campaigns: u32,
    pub latent_dim: usize,
    /// Per-coordinate std of publisher and ad latent vectors.
    pub latent_std: f64,
    /// Baseline logit of the ground-truth CTR.
    pub base_logit: f64,
    pub segment_offset_std: f64,
    pub zipf_exponent: f64,
    pub floor: f64,
    /// Center of the per-publisher log competitor price.
    pub competitor_log_price: f64,
    /// Std of the per-publisher deviation from `competitor_log_price`.
    pub competitor_log_price_std: f64,
    /// How strongly competitors price a publisher's true quality: log-price
    /// units per unit of log mean CTR relative to the baseline CTR.
    pub competitor_quality_coupling: f64,
    /// Lognormal scale of the competitor top bid within a publisher.
    pub competitor_scale: f64,
    pub cpc_goal_min: f64,
    pub cpc_goal_max: f64,
    pub drift: Vec<DriftBatch>,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            n_publishers: 150,
            n_segments: 8,
            n_slots: 4,
            n_ads: 200,
            n_campaigns: 20,
            latent_dim: 4,
            latent_std: 0.6,
            base_logit: -4.0,
            segment_offset_std: 0.3,
            zipf_exponent: 1.1,
            floor: 0.001,
            competitor_log_price: -3.8,
            competitor_log_price_std: 0.3,
            competitor_quality_coupling: 1.0,
            competitor_scale: 0.25,
            cpc_goal_min: 0.5,
            cpc_goal_max: 1.5,
            drift: vec![
                DriftBatch { tick: 350_000, new_publishers: 60, retire: 0 },
                DriftBatch { tick: 500_000, new_publishers: 60, retire: 0 },
            ],
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |m: &str| Err(MarketError::Config(m.to_string()));
        if self.n_publishers == 0 || self.n_segments == 0 || self.n_slots == 0 {
            return bad("publisher, segment and slot counts must be positive");
        }
        if self.n_ads == 0 || self.n_campaigns == 0 {
            return bad("ad and campaign counts must be positive");
        }
        if !(self.competitor_scale > 0.0) || !(self.zipf_exponent > 0.0) {
            return bad("competitor_scale and zipf_exponent must be positive");
        }
        if !(self.floor >= 0.0) {
            return bad("floor must be non-negative");
        }
        if !(self.cpc_goal_min > 0.0 && self.cpc_goal_max >= self.cpc_goal_min) {
            return bad("cpc goal range must be positive and ordered");
        }
        let nums = [
            self.latent_std,
            self.base_logit,
            self.segment_offset_std,
            self.competitor_log_price,
            self.competitor_log_price_std,
            self.competitor_quality_coupling,
        ];
        if nums.iter().any(|v| !v.is_finite()) {
            return bad("market parameters must be finite");
        }
        if self.drift.windows(2).any(|w| w[0].tick > w[1].tick) {
            return bad("drift schedule must be sorted by tick");
        }
        Ok(())
    }

    pub fn total_publishers(&self) -> usize {
        self.n_publishers + self.drift.iter().map(|b| b.new_publishers).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidRequest {
    pub request_id: u64,
    pub publisher_id: u32,
    pub user_segment: u32,
    pub context_slot: u32,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub ad_id: u32,
    pub campaign_id: u32,
    /// What the advertiser pays per click.
    pub cpc_goal: f64,
}

/// Result of one auction from the bidder's point of view. A loss carries no
/// price and no click, so censored data cannot leak downstream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AuctionOutcome {
    Lost,
    Won { clearing_price: f64, clicked: bool },
}

impl AuctionOutcome {
    pub fn won(&self) -> bool {
        matches!(self, AuctionOutcome::Won { .. })
    }
}

#[derive(Clone, Debug)]
struct Publisher {
    latent: Vec<f64>,
    competitor_location: f64,
    popularity: f64,
    activated_at: u64,
    active: bool,
}

#[derive(Clone, Debug)]
pub struct Market {
    cfg: MarketConfig,
    publishers: Vec<Publisher>,
    ads: Vec<AdCandidate>,
    ad_latents: Vec<Vec<f64>>,
    segment_offsets: Vec<f64>,
    /// Popularity rank of every publisher that will ever exist, including
    /// future drift batches.
    ranks: Vec<u32>,
    active: Vec<u32>,
    popularity: WeightedIndex<f64>,
    next_drift: usize,
    tick: u64,
    gen_rng: SimRng,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normal_vec(rng: &mut SimRng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl Market {
    /// Builds the catalog from `gen_rng`, which the market keeps for later
    /// drift batches.
    pub fn new(cfg: MarketConfig, mut gen_rng: SimRng) -> Result<Self, MarketError> {
        cfg.validate()?;
        let total = cfg.total_publishers();
        let mut ranks: Vec<u32> = (1..=total as u32).collect();
        ranks.shuffle(&mut gen_rng);

        let ad_latents: Vec<Vec<f64>> = (0..cfg.n_ads)
            .map(|_| normal_vec(&mut gen_rng, cfg.latent_dim, cfg.latent_std))
            .collect();
        let campaign_goals: Vec<f64> = (0..cfg.n_campaigns)
            .map(|_| gen_rng.random_range(cfg.cpc_goal_min..=cfg.cpc_goal_max))
            .collect();
        let ads = (0..cfg.n_ads)
            .map(|ad_id| {
                let campaign_id = gen_rng.random_range(0..cfg.n_campaigns);
                AdCandidate {
                    ad_id,
                    campaign_id,
                    cpc_goal: campaign_goals[campaign_id as usize],
                }
            })
            .collect();
        let segment_offsets = normal_vec(&mut gen_rng, cfg.n_segments as usize, cfg.segment_offset_std);

        let mut market = Self {
            publishers: Vec::with_capacity(total),
            ads,
            ad_latents,
            segment_offsets,
            ranks,
            active: Vec::new(),
            popularity: WeightedIndex::new([1.0]).expect("non-empty weights"),
            next_drift: 0,
            tick: 0,
            gen_rng,
            cfg,
        };
        for _ in 0..market.cfg.n_publishers {
            market.add_publisher(0);
        }
        market.rebuild_popularity();
        Ok(market)
    }

    fn add_publisher(&mut self, tick: u64) {
        let id = self.publishers.len();
        let latent = normal_vec(&mut self.gen_rng, self.cfg.latent_dim, self.cfg.latent_std);
        let mean_ctr = self
            .ad_latents
            .iter()
            .map(|v| sigmoid(self.cfg.base_logit + dot(&latent, v)))
            .sum::<f64>()
            / self.ad_latents.len() as f64;
        let quality = (mean_ctr / sigmoid(self.cfg.base_logit)).ln();
        let noise: f64 = self.gen_rng.sample(StandardNormal);
        let competitor_location = self.cfg.competitor_log_price
            + self.cfg.competitor_log_price_std * noise
            + self.cfg.competitor_quality_coupling * quality;
        let popularity = (self.ranks[id] as f64).powf(-self.cfg.zipf_exponent);
        self.publishers.push(Publisher {
            latent,
            competitor_location,
            popularity,
            activated_at: tick,
            active: true,
        });
    }

    fn rebuild_popularity(&mut self) {
        self.active = (0..self.publishers.len() as u32)
            .filter(|&p| self.publishers[p as usize].active)
            .collect();
        let weights = self.active.iter().map(|&p| self.publishers[p as usize].popularity);
        self.popularity = WeightedIndex::new(weights).expect("at least one active publisher");
    }

    pub fn config(&self) -> &MarketConfig {
        &self.cfg
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn active_publishers(&self) -> &[u32] {
        &self.active
    }

    /// Tick at which a publisher started sending traffic.
    pub fn activated_at(&self, publisher_id: u32) -> Option<u64> {
        self.publishers.get(publisher_id as usize).map(|p| p.activated_at)
    }

    pub fn ads(&self) -> &[AdCandidate] {
        &self.ads
    }

    pub fn ad(&self, ad_id: u32) -> Result<&AdCandidate, MarketError> {
        self.ads.get(ad_id as usize).ok_or(MarketError::UnknownAd(ad_id))
    }

    /// Applies every drift batch scheduled at or before `tick`. Returns how
    /// many batches were applied.
    pub fn drift_step(&mut self, tick: u64) -> usize {
        let mut applied = 0;
        while let Some(batch) = self.cfg.drift.get(self.next_drift).cloned() {
            if batch.tick > tick {
                break;
            }
            // Keep at least one publisher alive.
            let retire = batch.retire.min((self.active.len() + batch.new_publishers).saturating_sub(1));
            let mut oldest: Vec<u32> = self.active.clone();
            oldest.sort_by_key(|&p| (self.publishers[p as usize].activated_at, p));
            for &p in oldest.iter().take(retire) {
                self.publishers[p as usize].active = false;
            }
            for _ in 0..batch.new_publishers {
                self.add_publisher(batch.tick);
            }
            self.next_drift += 1;
            applied += 1;
        }
        if applied > 0 {
            self.rebuild_popularity();
        }
        applied
    }

    /// Draws the next request. The market clock advances by one tick per
    /// request and due drift batches are applied first.
    pub fn gen_request(&mut self, rng: &mut SimRng) -> BidRequest {
        self.drift_step(self.tick);
        let publisher_id = self.active[self.popularity.sample(rng)];
        let user_segment = rng.random_range(0..self.cfg.n_segments);
        let context_slot = rng.random_range(0..self.cfg.n_slots);
        let req = BidRequest {
            request_id: self.tick,
            publisher_id,
            user_segment,
            context_slot,
            timestamp: self.tick,
        };
        self.tick += 1;
        req
    }

    /// Samples `k` distinct ads from the catalog.
    pub fn sample_candidates(&self, k: usize, rng: &mut SimRng) -> Vec<AdCandidate> {
        let k = k.min(self.ads.len());
        index::sample(rng, self.ads.len(), k)
            .into_iter()
            .map(|i| self.ads[i].clone())
            .collect()
    }

    /// Ground-truth click probability.
    pub fn true_ctr(&self, request: &BidRequest, ad: &AdCandidate) -> Result<f64, MarketError> {
        let publisher = self
            .publishers
            .get(request.publisher_id as usize)
            .ok_or(MarketError::UnknownPublisher(request.publisher_id))?;
        let ad_latent = self
            .ad_latents
            .get(ad.ad_id as usize)
            .ok_or(MarketError::UnknownAd(ad.ad_id))?;
        let offset = self
            .segment_offsets
            .get(request.user_segment as usize)
            .ok_or(MarketError::UnknownSegment(request.user_segment, self.cfg.n_segments))?;
        Ok(sigmoid(self.cfg.base_logit + dot(&publisher.latent, ad_latent) + offset))
    }

    /// Runs a second-price auction against the publisher's competitor top
    /// bid. The competitor bid and the click coin are always drawn, so the
    /// stream stays aligned whatever the bid.
    pub fn run_auction(
        &self,
        bid: f64,
        request: &BidRequest,
        ad: &AdCandidate,
        rng: &mut SimRng,
    ) -> Result<AuctionOutcome, MarketError> {
        if !(bid >= 0.0) || !bid.is_finite() {
            return Err(MarketError::InvalidBid(bid));
        }
        let ctr = self.true_ctr(request, ad)?;
        let location = self.publishers[request.publisher_id as usize].competitor_location;
        let z: f64 = rng.sample(StandardNormal);
        let competitor = (location + self.cfg.competitor_scale * z).exp();
        let click_draw: f64 = rng.random();
        Ok(second_price(bid, competitor, self.cfg.floor, click_draw < ctr))
    }

    /// Ground-truth factors of an impression: publisher latent, ad latent and
    /// segment offset.
    pub fn latents(&self, request: &BidRequest, ad: &AdCandidate) -> (Vec<f64>, Vec<f64>, f64) {
        (
            self.publishers[request.publisher_id as usize].latent.clone(),
            self.ad_latents[ad.ad_id as usize].clone(),
            self.segment_offsets[request.user_segment as usize],
        )
    }
}

/// Second-price rule: win iff `bid` strictly exceeds both the competitor and
/// the floor; the winner pays the larger of the two.
pub fn second_price(bid: f64, competitor: f64, floor: f64, clicked: bool) -> AuctionOutcome {
    let threshold = competitor.max(floor);
    if bid > threshold {
        AuctionOutcome::Won {
            clearing_price: threshold,
            clicked,
        }
    } else {
        AuctionOutcome::Lost
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
