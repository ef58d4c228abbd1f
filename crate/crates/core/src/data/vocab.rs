use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paging::TokenId;

/// Document / preamble marker.
pub const DOC: TokenId = 0;
pub const QUERY: TokenId = 1;
/// Marks a planted fact or needle.
pub const FACT: TokenId = 2;
pub const IS: TokenId = 3;
pub const SENT_END: TokenId = 4;
const RESERVED: usize = 5;

/// Split of the id space. The last id is the bookmark; ids `0..5` are
/// structural; the rest is filler (half, Zipf-distributed), keys (a
/// quarter) and values (the remainder). Keys never occur in filler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabProfile {
    pub vocab_size: usize,
    pub filler: Range<usize>,
    pub keys: Range<usize>,
    pub values: Range<usize>,
}

impl VocabProfile {
    pub fn new(vocab_size: usize) -> Result<Self> {
        let usable = vocab_size.saturating_sub(RESERVED + 1);
        if usable < 8 {
            return Err(Error::InvalidConfig(format!("vocab_size {vocab_size} is too small for a vocabulary profile")));
        }
        let n_filler = usable / 2;
        let n_keys = usable / 4;
        let filler = RESERVED..RESERVED + n_filler;
        let keys = filler.end..filler.end + n_keys;
        let values = keys.end..vocab_size - 1;
        Ok(Self { vocab_size, filler, keys, values })
    }

    pub fn bookmark(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    /// Zipf-distributed filler token (rank 1 is the most frequent).
    pub fn filler_token<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let zipf = Zipf::new(self.filler.len() as f64, 1.1).expect("valid zipf");
        let rank = zipf.sample(rng) as usize;
        (self.filler.start + rank.clamp(1, self.filler.len()) - 1) as TokenId
    }

    pub fn filler<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<TokenId> {
        (0..n).map(|_| self.filler_token(rng)).collect()
    }

    pub fn key_token<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        rng.random_range(self.keys.clone()) as TokenId
    }

    pub fn value_token<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        rng.random_range(self.values.clone()) as TokenId
    }

    pub fn is_key(&self, t: TokenId) -> bool {
        self.keys.contains(&(t as usize))
    }
}
