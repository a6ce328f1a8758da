//! Counter-based random number generation.
//!
//! Every random draw in this crate is addressed by an explicit key
//! `(root seed, stream tag, replication, agent, step, lane)` and produced by
//! the Philox-2x64-10 bijection on that key. There is no mutable generator
//! state anywhere: regenerating a draw from the same key is bit-identical,
//! draws under distinct keys come from distinct counter blocks, and swapping
//! agent indices swaps the corresponding streams exactly. This is what makes
//! label-equivariance tests and common-random-number comparisons possible.

const PHILOX_M: u64 = 0xD2B7_4407_B1CE_6E93;
const PHILOX_W: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mul_hi_lo(a: u64, b: u64) -> (u64, u64) {
    let wide = (a as u128) * (b as u128);
    ((wide >> 64) as u64, wide as u64)
}

/// One Philox-2x64 block: maps (counter, key) to two 64-bit words.
#[inline]
pub fn philox2x64(mut c0: u64, mut c1: u64, mut key: u64) -> (u64, u64) {
    for _ in 0..10 {
        let (hi, lo) = mul_hi_lo(c0, PHILOX_M);
        c0 = hi ^ key ^ c1;
        c1 = lo;
        key = key.wrapping_add(PHILOX_W);
    }
    (c0, c1)
}

/// SplitMix64 finalizer, used to spread root seeds across stream tags.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tag separating the independent stream families under one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    Wiener,
    Action,
    Init,
    Perturb,
    Generic(u64),
}

impl StreamTag {
    fn salt(self) -> u64 {
        match self {
            StreamTag::Wiener => 0x57,
            StreamTag::Action => 0xAC,
            StreamTag::Init => 0x17,
            StreamTag::Perturb => 0x5B,
            StreamTag::Generic(k) => 0x6E00 ^ k,
        }
    }
}

/// Stateless stream addressed by a root seed; all draws are keyed explicitly.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    key: u64,
}

impl Streams {
    pub fn new(root_seed: u64) -> Self {
        Streams {
            key: splitmix64(root_seed),
        }
    }

    /// Derives an independent root for a named sub-purpose (e.g. an ensemble
    /// pre-run that must not share noise with the main simulation).
    pub fn derived(root_seed: u64, label: &str) -> Self {
        let mut h = splitmix64(root_seed);
        for b in label.as_bytes() {
            h = splitmix64(h ^ (*b as u64));
        }
        Streams { key: h }
    }

    #[inline]
    fn block(&self, tag: StreamTag, rep: u64, agent: u64, step: u64, lane: u64) -> (u64, u64) {
        debug_assert!(agent < (1 << 24) && lane < (1 << 8) && step < (1 << 32));
        let c0 = (rep << 24) | agent;
        let c1 = (tag.salt() << 40) | (step << 8) | lane;
        philox2x64(c0, c1, self.key)
    }

    /// Two uniforms in (0, 1], one block.
    #[inline]
    pub fn uniform_pair(&self, tag: StreamTag, rep: u64, agent: u64, step: u64, lane: u64) -> (f64, f64) {
        let (a, b) = self.block(tag, rep, agent, step, lane);
        (u64_to_unit(a), u64_to_unit(b))
    }

    /// One uniform in (0, 1].
    #[inline]
    pub fn uniform(&self, tag: StreamTag, rep: u64, agent: u64, step: u64, lane: u64) -> f64 {
        self.uniform_pair(tag, rep, agent, step, lane).0
    }

    /// Standard normal pair via Box-Muller on one block.
    #[inline]
    pub fn normal_pair(&self, tag: StreamTag, rep: u64, agent: u64, step: u64, lane: u64) -> (f64, f64) {
        let (u1, u2) = self.uniform_pair(tag, rep, agent, step, lane);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        (r * th.cos(), r * th.sin())
    }

    /// Fills `out` with standard normals for the given key, lane-indexed in
    /// pairs so each component is individually addressable.
    #[inline]
    pub fn fill_normals(&self, tag: StreamTag, rep: u64, agent: u64, step: u64, out: &mut [f64]) {
        let mut lane = 0u64;
        let mut i = 0usize;
        while i < out.len() {
            let (z0, z1) = self.normal_pair(tag, rep, agent, step, lane);
            out[i] = z0;
            if i + 1 < out.len() {
                out[i + 1] = z1;
            }
            i += 2;
            lane += 1;
        }
    }
}

#[inline]
fn u64_to_unit(x: u64) -> f64 {
    // 53-bit mantissa, shifted into (0, 1] so ln() is always finite.
    (((x >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
}
