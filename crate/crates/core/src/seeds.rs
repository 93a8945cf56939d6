//! Seed derivation: every stochastic component runs on a counter-based
//! generator seeded from (base seed, purpose tag, index), so draws are
//! independent streams and reproducible bit-for-bit.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tags keep unrelated streams disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ParamInit,
    Mask,
    Shuffle,
    SampleRender,
    LabelDeck,
    FinetuneInit,
    MaskStats,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ParamInit => 1,
            Stream::Mask => 2,
            Stream::Shuffle => 3,
            Stream::SampleRender => 4,
            Stream::LabelDeck => 5,
            Stream::FinetuneInit => 6,
            Stream::MaskStats => 7,
        }
    }
}

pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(base ^ stream.tag().wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}
