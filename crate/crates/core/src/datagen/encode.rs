use crate::dynsys::{State, STATE_DIM};
use crate::error::DatagenError;

use super::N_LABEL_PAIRS;

pub const TOKEN_DIM: usize = 57;
pub const START_DIM: usize = 0;
pub const LABEL_DIMS: std::ops::Range<usize> = 1..1 + 2 * N_LABEL_PAIRS;
pub const PAYLOAD_FLAG_DIM: usize = 1 + 2 * N_LABEL_PAIRS;
pub const PAYLOAD_DIM0: usize = PAYLOAD_FLAG_DIM + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialSymbol {
    Start,
    Open,
    Close,
}

/// One-hot row for a special symbol. `pair` is ignored for `Start`.
pub fn encode_special(kind: SpecialSymbol, pair: usize) -> Result<[f32; TOKEN_DIM], DatagenError> {
    let mut row = [0.0f32; TOKEN_DIM];
    let dim = match kind {
        SpecialSymbol::Start => START_DIM,
        SpecialSymbol::Open | SpecialSymbol::Close if pair >= N_LABEL_PAIRS => {
            return Err(DatagenError::PairOutOfRange(pair))
        }
        SpecialSymbol::Open => 1 + 2 * pair,
        SpecialSymbol::Close => 2 + 2 * pair,
    };
    row[dim] = 1.0;
    Ok(row)
}

pub fn encode_obs(x: &State) -> [f32; TOKEN_DIM] {
    let mut row = [0.0f32; TOKEN_DIM];
    row[PAYLOAD_FLAG_DIM] = 1.0;
    for (dst, v) in row[PAYLOAD_DIM0..].iter_mut().zip(x) {
        *dst = *v as f32;
    }
    row
}

/// Payload of an observation row, or `None` for special rows.
pub fn decode_obs(row: &[f32]) -> Option<[f32; STATE_DIM]> {
    if row[PAYLOAD_FLAG_DIM] != 1.0 {
        return None;
    }
    let mut x = [0.0f32; STATE_DIM];
    x.copy_from_slice(&row[PAYLOAD_DIM0..PAYLOAD_DIM0 + STATE_DIM]);
    Some(x)
}

/// Dense model inputs and loss targets for one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTrace {
    pub len: usize,
    /// `len × 57`, row-major.
    pub tokens: Vec<f32>,
    /// `len × 5`, row-major; zero where the mask is off.
    pub targets: Vec<f32>,
    pub loss_mask: Vec<bool>,
}

impl EncodedTrace {
    pub fn token_row(&self, t: usize) -> &[f32] {
        &self.tokens[t * TOKEN_DIM..(t + 1) * TOKEN_DIM]
    }

    pub fn target_row(&self, t: usize) -> &[f32] {
        &self.targets[t * STATE_DIM..(t + 1) * STATE_DIM]
    }
}
