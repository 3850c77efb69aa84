//! Request-level MC-dropout uncertainty.
//!
//! The request is encoded with every ad field set to its dummy index, then
//! scored `n` times with independent dropout masks. The uncertainty is the
//! sample standard deviation of those predictions.

use thiserror::Error;

use crate::features::Encoder;
use crate::market::BidRequest;
use crate::model::{CtrModel, ModelError};
use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("at least one sample is required")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyEstimate {
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
}

impl UncertaintyEstimate {
    /// Sample mean and Bessel-corrected standard deviation; a single sample
    /// or identical samples give exactly zero.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        let first = *samples.first()?;
        let n = samples.len();
        if samples.iter().all(|&s| s == first) {
            return Some(Self { mean: first, std: 0.0, n_samples: n });
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let ss: f64 = samples.iter().map(|s| (s - mean).powi(2)).sum();
        Some(Self {
            mean,
            std: (ss / (n - 1) as f64).sqrt(),
            n_samples: n,
        })
    }
}

/// Runs exactly `n` stochastic forward passes on the ad-masked encoding of
/// `request`.
pub fn estimate(
    model: &CtrModel,
    encoder: &Encoder,
    request: &BidRequest,
    n: usize,
    rng: &mut SimRng,
) -> Result<UncertaintyEstimate, UncertaintyError> {
    if n == 0 {
        return Err(UncertaintyError::NoSamples);
    }
    let fv = encoder.encode_request_masked(request);
    let samples = model.predict_samples(&fv, n, rng)?;
    Ok(UncertaintyEstimate::from_samples(&samples).expect("n >= 1"))
}

/// Forward passes per request for `num_ads` scored ads plus `n` uncertainty
/// samples.
pub fn prediction_budget(num_ads: usize, n: usize) -> usize {
    num_ads + n
}
