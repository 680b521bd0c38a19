//! Splittable, serializable random streams.
//!
//! Every source of randomness in a run is an [`RngStream`]. Child streams are
//! derived by hashing the parent seed with a label, so branches, replicas and
//! noise-scale pairs get mutually independent streams that do not depend on
//! how much of the parent has been consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Complete position of a stream, enough to resume it bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for an experiment seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"critbatch/root");
        hasher.update(seed.to_le_bytes());
        Self::from_digest(hasher)
    }

    /// Independent child stream keyed by `label`. Depends only on this
    /// stream's seed and the label, never on the current position.
    pub fn child(&self, label: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"critbatch/child");
        hasher.update(self.inner.get_seed());
        hasher.update(self.inner.get_stream().to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label);
        Self::from_digest(hasher)
    }

    pub fn child_u64(&self, tag: &str, index: u64) -> Self {
        let mut label = tag.as_bytes().to_vec();
        label.push(0);
        label.extend_from_slice(&index.to_le_bytes());
        self.child(&label)
    }

    fn from_digest(hasher: Sha256) -> Self {
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Self {
            inner: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
