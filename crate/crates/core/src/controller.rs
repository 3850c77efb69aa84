//! Streaming exploration controller.
//!
//! Uncertainties are bucketed by a dimension key (user segment by default). For
//! each bucket the controller keeps the last `window_len` observations and
//! exposes their exact mean and nearest-rank quantiles. A request's bid
//! modifier is `unc / μ`, clamped to `[m_min, m_max]`, granted only when the
//! request passes an explore coin flip and its uncertainty lies inside the
//! bucket's `[q_low, q_high]` quantile band.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_sum::ExactSum;
use crate::market::BidRequest;
use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("uncertainty must be finite and non-negative, got {0}")]
    InvalidUncertainty(f64),
    #[error("invalid controller config: {0}")]
    Config(String),
}

/// Which request attributes group uncertainty statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKind {
    Global,
    Publisher,
    Segment,
    Slot,
    PublisherSlot,
    SegmentSlot,
}

impl DimensionKind {
    pub fn key(self, r: &BidRequest) -> u64 {
        match self {
            DimensionKind::Global => 0,
            DimensionKind::Publisher => r.publisher_id as u64,
            DimensionKind::Segment => r.user_segment as u64,
            DimensionKind::Slot => r.context_slot as u64,
            DimensionKind::PublisherSlot => ((r.publisher_id as u64) << 32) | r.context_slot as u64,
            DimensionKind::SegmentSlot => ((r.user_segment as u64) << 32) | r.context_slot as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Share of requests eligible for exploration.
    pub explore_fraction: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub m_min: f64,
    pub m_max: f64,
    /// Observations retained per dimension key.
    pub window_len: usize,
    /// Observations needed before a window's snapshot is usable.
    pub min_window_fill: usize,
    pub dimension: DimensionKind,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            explore_fraction: 0.10,
            q_low: 0.30,
            q_high: 0.99,
            m_min: 1.0,
            m_max: 3.0,
            window_len: 10_000,
            min_window_fill: 500,
            dimension: DimensionKind::Segment,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.explore_fraction) {
            return bad("explore_fraction must be in [0, 1]");
        }
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return bad("quantiles must satisfy 0 <= q_low < q_high <= 1");
        }
        if !(self.m_min >= 1.0 && self.m_max >= self.m_min && self.m_max.is_finite()) {
            return bad("modifier clamps must satisfy 1 <= m_min <= m_max");
        }
        if !(self.window_len >= self.min_window_fill && self.min_window_fill >= 1) {
            return bad("window_len >= min_window_fill >= 1 required");
        }
        Ok(())
    }
}

/// Statistics of one dimension's window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerSnapshot {
    pub mu_unc: f64,
    pub q_low_value: f64,
    pub q_high_value: f64,
    pub count: usize,
    pub ready: bool,
}

/// 1-based nearest rank: the smallest `k` in `1..=n` with `k / n >= q`.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    debug_assert!(n > 0);
    let nf = n as f64;
    let mut k = ((q * nf).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / nf >= q {
        k -= 1;
    }
    while k < n && (k as f64 / nf) < q {
        k += 1;
    }
    k
}

#[derive(Clone, Debug, Default)]
struct Window {
    arrival: VecDeque<f64>,
    sorted: Vec<f64>,
    sum: ExactSum,
}

impl Window {
    fn push(&mut self, v: f64, cap: usize) {
        if self.arrival.len() == cap {
            let old = self.arrival.pop_front().expect("window is full");
            let pos = self.sorted.partition_point(|x| x.total_cmp(&old).is_lt());
            debug_assert_eq!(self.sorted[pos].to_bits(), old.to_bits());
            self.sorted.remove(pos);
            self.sum.remove(old);
        }
        self.arrival.push_back(v);
        let pos = self.sorted.partition_point(|x| x.total_cmp(&v).is_lt());
        self.sorted.insert(pos, v);
        self.sum.add(v);
    }

    fn snapshot(&self, cfg: &ControllerConfig) -> ControllerSnapshot {
        let n = self.sorted.len();
        if n == 0 {
            return ControllerSnapshot {
                mu_unc: 0.0,
                q_low_value: 0.0,
                q_high_value: 0.0,
                count: 0,
                ready: false,
            };
        }
        ControllerSnapshot {
            mu_unc: self.sum.value() / n as f64,
            q_low_value: self.sorted[nearest_rank(cfg.q_low, n) - 1],
            q_high_value: self.sorted[nearest_rank(cfg.q_high, n) - 1],
            count: n,
            ready: n >= cfg.min_window_fill,
        }
    }
}

/// Per-dimension windows. Each call takes `&mut self` or `&self`, so a
/// snapshot can never observe a half-applied ingest; share across threads
/// behind a lock.
#[derive(Clone, Debug)]
pub struct Controller {
    cfg: ControllerConfig,
    windows: HashMap<u64, Window>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Result<Self, ControllerError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            windows: HashMap::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn key(&self, request: &BidRequest) -> u64 {
        self.cfg.dimension.key(request)
    }

    pub fn ingest(&mut self, key: u64, unc: f64) -> Result<(), ControllerError> {
        if !unc.is_finite() || unc < 0.0 {
            return Err(ControllerError::InvalidUncertainty(unc));
        }
        let cap = self.cfg.window_len;
        self.windows.entry(key).or_default().push(unc, cap);
        Ok(())
    }

    pub fn snapshot(&self, key: u64) -> ControllerSnapshot {
        self.windows
            .get(&key)
            .map(|w| w.snapshot(&self.cfg))
            .unwrap_or_else(|| Window::default().snapshot(&self.cfg))
    }

    /// Retained observations of `key` in arrival order.
    pub fn window(&self, key: u64) -> Vec<f64> {
        self.windows
            .get(&key)
            .map(|w| w.arrival.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn modifier(&self, unc: f64, snap: &ControllerSnapshot, rng: &mut SimRng) -> Option<f64> {
        modifier(unc, snap, &self.cfg, rng)
    }
}

/// `unc / μ` without clamping, `None` for a degenerate window.
pub fn unclamped_modifier(unc: f64, snap: &ControllerSnapshot) -> Option<f64> {
    (snap.mu_unc > 0.0).then(|| unc / snap.mu_unc)
}

/// Bid modifier for one request, or `None` for no exploration. The explore
/// coin is always drawn first so the stream advances identically whatever
/// the outcome.
pub fn modifier(unc: f64, snap: &ControllerSnapshot, cfg: &ControllerConfig, rng: &mut SimRng) -> Option<f64> {
    let eligible = rng.random::<f64>() < cfg.explore_fraction;
    if !eligible || !snap.ready {
        return None;
    }
    if unc < snap.q_low_value || unc > snap.q_high_value {
        return None;
    }
    unclamped_modifier(unc, snap).map(|m| m.clamp(cfg.m_min, cfg.m_max))
}
