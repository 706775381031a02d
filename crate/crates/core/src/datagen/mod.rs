//! Trace libraries, the interleaving procedure, and the 57-dim token encoding.
//!
//! Token layout (57 dims):
//!
//! ```text
//!   0        start symbol
//!   1..=50   labels, [open₀, close₀, open₁, close₁, …, open₂₄, close₂₄]
//!   51       payload flag
//!   52..=56  payload (the 5-dim state)
//! ```

mod encode;
mod interleave;
mod library;

pub use encode::{
    decode_obs, encode_obs, encode_special, EncodedTrace, SpecialSymbol, LABEL_DIMS, PAYLOAD_DIM0,
    PAYLOAD_FLAG_DIM, START_DIM, TOKEN_DIM,
};
pub use interleave::{
    generate_traces, interleave, plan_trace, sample_num_systems, trace_rng, zipf_pmf, InterleavedTrace, ObsRef,
    Segment, TokenKind, TracePlan,
};
pub use library::{build_library, LibraryRole, TraceLibrary};

use serde::{Deserialize, Serialize};

use crate::error::DatagenError;

pub const CONTEXT_LEN: usize = 251;
pub const N_LABEL_PAIRS: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub zipf_s: f64,
    pub zipf_cap: usize,
    /// Poisson rate for the number of cuts is `cut_rate_multiplier · N`.
    pub cut_rate_multiplier: f64,
    pub context_len: usize,
    pub label_pairs: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            zipf_s: 1.5,
            zipf_cap: 25,
            cut_rate_multiplier: 2.0,
            context_len: CONTEXT_LEN,
            label_pairs: N_LABEL_PAIRS,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.zipf_cap == 0 || self.zipf_cap > self.label_pairs {
            return Err(DatagenError::InvalidConfig(format!(
                "zipf_cap {} must be in 1..={}",
                self.zipf_cap, self.label_pairs
            )));
        }
        if self.label_pairs > N_LABEL_PAIRS {
            return Err(DatagenError::InvalidConfig(format!(
                "at most {N_LABEL_PAIRS} label pairs fit the token layout"
            )));
        }
        if self.context_len < 3 || self.context_len > CONTEXT_LEN {
            return Err(DatagenError::InvalidConfig(format!(
                "context_len {} must be in 3..={CONTEXT_LEN}",
                self.context_len
            )));
        }
        if !(self.zipf_s > 0.0) || !(self.cut_rate_multiplier >= 0.0) {
            return Err(DatagenError::InvalidConfig(
                "zipf_s and cut_rate_multiplier must be positive".into(),
            ));
        }
        Ok(())
    }
}
