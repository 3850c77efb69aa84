//! Hashed categorical encoding.
//!
//! Every field value is hashed with salted FNV-1a into `[1, space)`; index 0
//! of every field is reserved as the dummy value that masking substitutes
//! for ad-owned fields.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{AdCandidate, BidRequest};

pub const NUM_FIELDS: usize = 5;

/// Index every masked field is set to.
pub const DUMMY_INDEX: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Field {
    Publisher = 0,
    Segment = 1,
    Slot = 2,
    Ad = 3,
    Campaign = 4,
}

impl Field {
    pub const ALL: [Field; NUM_FIELDS] = [
        Field::Publisher,
        Field::Segment,
        Field::Slot,
        Field::Ad,
        Field::Campaign,
    ];

    pub fn is_ad_field(self) -> bool {
        matches!(self, Field::Ad | Field::Campaign)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("hash space for field {0:?} must be at least 2, got {1}")]
    SpaceTooSmall(Field, u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub salt: u64,
    pub publisher_space: u32,
    pub segment_space: u32,
    pub slot_space: u32,
    pub ad_space: u32,
    pub campaign_space: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            salt: 0x5eed_cafe_f00d_d00d,
            publisher_space: 1 << 14,
            segment_space: 1 << 10,
            slot_space: 1 << 10,
            ad_space: 1 << 10,
            campaign_space: 1 << 10,
        }
    }
}

impl FeatureConfig {
    pub fn spaces(&self) -> [u32; NUM_FIELDS] {
        [
            self.publisher_space,
            self.segment_space,
            self.slot_space,
            self.ad_space,
            self.campaign_space,
        ]
    }
}

/// One hashed index per field, in [`Field::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureVector {
    pub indices: [u32; NUM_FIELDS],
}

impl FeatureVector {
    pub fn get(&self, field: Field) -> u32 {
        self.indices[field as usize]
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `salt (u64 LE) ‖ field (u8) ‖ value (u64 LE)`.
pub fn salted_hash(salt: u64, field: Field, value: u64) -> u64 {
    let mut h = FNV_OFFSET;
    let bytes = salt
        .to_le_bytes()
        .into_iter()
        .chain(std::iter::once(field as u8))
        .chain(value.to_le_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Clone, Debug)]
pub struct Encoder {
    salt: u64,
    spaces: [u32; NUM_FIELDS],
}

impl Encoder {
    pub fn new(cfg: &FeatureConfig) -> Result<Self, FeatureError> {
        let spaces = cfg.spaces();
        for field in Field::ALL {
            let s = spaces[field as usize];
            if s < 2 {
                return Err(FeatureError::SpaceTooSmall(field, s));
            }
        }
        Ok(Self { salt: cfg.salt, spaces })
    }

    pub fn spaces(&self) -> [u32; NUM_FIELDS] {
        self.spaces
    }

    pub fn index(&self, field: Field, value: u64) -> u32 {
        let space = self.spaces[field as usize] as u64;
        1 + (salted_hash(self.salt, field, value) % (space - 1)) as u32
    }

    pub fn encode(&self, request: &BidRequest, ad: &AdCandidate) -> FeatureVector {
        let mut fv = self.encode_request_masked(request);
        fv.indices[Field::Ad as usize] = self.index(Field::Ad, ad.ad_id as u64);
        fv.indices[Field::Campaign as usize] = self.index(Field::Campaign, ad.campaign_id as u64);
        fv
    }

    /// Same as `mask_ad_features(encode(request, ad))` for any ad.
    pub fn encode_request_masked(&self, request: &BidRequest) -> FeatureVector {
        let mut indices = [DUMMY_INDEX; NUM_FIELDS];
        indices[Field::Publisher as usize] = self.index(Field::Publisher, request.publisher_id as u64);
        indices[Field::Segment as usize] = self.index(Field::Segment, request.user_segment as u64);
        indices[Field::Slot as usize] = self.index(Field::Slot, request.context_slot as u64);
        FeatureVector { indices }
    }
}

/// Replaces every ad-owned field with [`DUMMY_INDEX`].
pub fn mask_ad_features(fv: &FeatureVector) -> FeatureVector {
    let mut out = *fv;
    for field in Field::ALL {
        if field.is_ad_field() {
            out.indices[field as usize] = DUMMY_INDEX;
        }
    }
    out
}
