//! Shared fixtures for the criterion benchmarks in `benches/`.

use dcsst::attention::{AttentionConfig, SelfAttention};
use dcsst::nn::{Builder, ParamStore};
use dcsst::rng::{self, Rng};
use dcsst::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng::standard_normal(rng))
}

pub fn self_attention(dim: usize, heads: usize, seed: u64) -> (SelfAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "bench-attn", 0);
    let mut b = Builder {
        store: &mut store,
        rng: &mut r,
        randomize_all: Some(0.5),
    };
    let attn = SelfAttention::build(&mut b, "attn", AttentionConfig::new(dim, heads).expect("valid attention config"));
    (attn, store)
}
