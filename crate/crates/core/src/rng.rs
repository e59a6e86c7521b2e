//! Counter-based random streams.
//!
//! Every coupled member draws from its own ChaCha12 stream. The key is
//! derived from `(seed, domain, group)`, the stream id is the member index,
//! and independent *channels* inside a member (the shared input and one
//! private input per level) start at disjoint word offsets. Two levels of
//! the same member therefore see the same shared noise no matter which
//! group they belong to, while groups, members and replications never
//! share draws. Streams are addressed, not advanced, so parallel sampling
//! gives the same numbers in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Identifier recorded in output metadata.
pub const GENERATOR: &str = "chacha12/rand_chacha-0.9;key=splitmix64(seed,domain,group);stream=member;channel-offset=2^40";

/// Word offset between channels of one member stream.
const CHANNEL_STRIDE: u128 = 1 << 40;

/// What a stream is used for; keeps e.g. calibration draws apart from the
/// samples they calibrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Samples,
    Calibration,
    Localization,
    Other(u64),
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Samples => 0x5A4D_504C_4553,
            Domain::Calibration => 0x4341_4C49_4252,
            Domain::Localization => 0x4C4F_4341_4C49,
            Domain::Other(t) => t.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x0123_4567,
        }
    }
}

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a tag into a seed; used for per-replication seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Address of the stream of one coupled member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: Domain,
    pub group: u64,
    pub member: u64,
}

impl StreamKey {
    pub fn new(seed: u64, domain: Domain, group: usize, member: usize) -> Self {
        Self {
            seed,
            domain,
            group: group as u64,
            member: member as u64,
        }
    }

    /// Generator for channel `channel` of this member. Channel 0 is the
    /// shared input; level `ℓ` uses channel `ℓ + 1` by convention.
    pub fn channel(&self, channel: u64) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        let mut state = derive_seed(self.seed, self.domain.tag());
        state = derive_seed(state, self.group);
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(self.member);
        rng.set_word_pos(u128::from(channel) * CHANNEL_STRIDE);
        rng
    }

    pub fn shared(&self) -> ChaCha12Rng {
        self.channel(0)
    }

    pub fn level(&self, level: usize) -> ChaCha12Rng {
        self.channel(level as u64 + 1)
    }
}
