//! Mask generation: dynamic channel-patch masking and the baseline
//! strategies, all pure functions of (config, seed).
//!
//! A mask is an `n x c` binary matrix over (patch position, channel);
//! entry 1 means the patch is hidden from the encoder and becomes a
//! reconstruction target.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    PatchOnly,
    ChannelOnly,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dcp,
    RandomPatchFixed,
    RandomPatchDynamic,
    ChannelFixed,
    HcsDynamic,
    ChannelPlusPatchFixed,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dcp" => Ok(Strategy::Dcp),
            "random_patch_fixed" => Ok(Strategy::RandomPatchFixed),
            "random_patch_dynamic" => Ok(Strategy::RandomPatchDynamic),
            "channel_fixed" => Ok(Strategy::ChannelFixed),
            "hcs_dynamic" => Ok(Strategy::HcsDynamic),
            "channel_plus_patch_fixed" => Ok(Strategy::ChannelPlusPatchFixed),
            other => Err(Error::Config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskConfig {
    pub strategy: Strategy,
    /// Patch mask ratio in [0, 1).
    pub r_p: f64,
    /// Probability of the patch-only branch.
    pub p_patch: f64,
    /// Probability of the channel-only branch.
    pub p_channel: f64,
    /// Sample patch positions independently per channel (true) or
    /// duplicate channel 0's mask (false).
    #[serde(default = "default_true")]
    pub independent_spatial: bool,
    /// Channel mask ratio for the fixed-channel baseline.
    #[serde(default = "default_r_c")]
    pub r_c: f64,
    /// Support of the dynamic-ratio patch baseline.
    #[serde(default = "default_dynamic_ratios")]
    pub dynamic_ratios: Vec<f64>,
}

fn default_true() -> bool {
    true
}
fn default_r_c() -> f64 {
    0.5
}
fn default_dynamic_ratios() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

impl MaskConfig {
    /// Always merge patch and channel masks (union), small patch ratio.
    pub fn dcp_combination() -> Self {
        Self {
            strategy: Strategy::Dcp,
            r_p: 0.25,
            p_patch: 0.0,
            p_channel: 0.0,
            independent_spatial: true,
            r_c: default_r_c(),
            dynamic_ratios: default_dynamic_ratios(),
        }
    }

    /// Switch between patch and channel masks per draw, larger patch ratio.
    pub fn dcp_alternate() -> Self {
        Self {
            strategy: Strategy::Dcp,
            r_p: 0.75,
            p_patch: 0.5,
            p_channel: 0.5,
            independent_spatial: true,
            r_c: default_r_c(),
            dynamic_ratios: default_dynamic_ratios(),
        }
    }

    pub fn baseline(strategy: Strategy, r_p: f64) -> Self {
        Self {
            strategy,
            r_p,
            p_patch: 0.0,
            p_channel: 0.0,
            independent_spatial: true,
            r_c: default_r_c(),
            dynamic_ratios: default_dynamic_ratios(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r_p) {
            return Err(Error::InvalidMaskRatio(self.r_p));
        }
        if self.p_patch < 0.0 || self.p_channel < 0.0 || self.p_patch + self.p_channel > 1.0 {
            return Err(Error::Config(format!(
                "branch probabilities p_patch={} p_channel={} must be nonnegative with sum <= 1",
                self.p_patch, self.p_channel
            )));
        }
        Ok(())
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self::dcp_alternate()
    }
}

/// Binary mask over (position, channel) plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskPlan {
    pub n: usize,
    pub c: usize,
    /// Row-major n x c, entry `i * c + j`; 1 = masked.
    mask: Vec<u8>,
    pub branch: Branch,
    /// Channel indices whose whole column is masked by the channel part.
    pub masked_channels: Vec<usize>,
    /// Seed the generator was run with.
    pub seed_trace: u64,
    /// For combined plans, the (patch, channel) parts the union came from.
    pub constituents: Option<Box<(MaskPlan, MaskPlan)>>,
}

impl MaskPlan {
    fn new(n: usize, c: usize, branch: Branch, seed: u64) -> Self {
        Self {
            n,
            c,
            mask: vec![0; n * c],
            branch,
            masked_channels: Vec::new(),
            seed_trace: seed,
            constituents: None,
        }
    }

    /// Empty mask (nothing hidden), used for full-visibility passes.
    pub fn empty(n: usize, c: usize) -> Self {
        Self::new(n, c, Branch::PatchOnly, 0)
    }

    /// Deterministic plan masking an explicit set of (position, channel)
    /// cells; evaluation probes use this to target specific slots.
    pub fn from_cells(n: usize, c: usize, cells: &[(usize, usize)]) -> Result<Self> {
        let mut plan = MaskPlan::new(n, c, Branch::PatchOnly, 0);
        for &(i, j) in cells {
            if i >= n || j >= c {
                return Err(Error::Config(format!("cell ({i},{j}) outside {n}x{c}")));
            }
            plan.mask[i * c + j] = 1;
        }
        if plan.visible_count() == 0 {
            return Err(Error::Config("cell mask hides everything".into()));
        }
        Ok(plan)
    }

    /// Deterministic plan masking exactly the given channel columns,
    /// used by evaluation probes and reconstruction exports.
    pub fn for_channels(n: usize, c: usize, channels: &[usize]) -> Result<Self> {
        let mut sorted = channels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() >= c || sorted.iter().any(|&j| j >= c) {
            return Err(Error::Config(format!(
                "cannot fully mask channels {sorted:?} of {c}"
            )));
        }
        let mut plan = MaskPlan::new(n, c, Branch::ChannelOnly, 0);
        for &j in &sorted {
            for i in 0..n {
                plan.mask[i * c + j] = 1;
            }
        }
        plan.masked_channels = sorted;
        Ok(plan)
    }

    pub fn is_masked(&self, pos: usize, channel: usize) -> bool {
        self.mask[pos * self.c + channel] == 1
    }

    pub fn raw(&self) -> &[u8] {
        &self.mask
    }

    /// Total number of masked patches (P in the reconstruction loss).
    pub fn masked_count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }

    pub fn visible_count(&self) -> usize {
        self.n * self.c - self.masked_count()
    }

    pub fn column_sum(&self, channel: usize) -> usize {
        (0..self.n)
            .map(|i| self.mask[i * self.c + channel] as usize)
            .sum()
    }

    /// Elementwise union of two masks with identical dimensions.
    pub fn union(a: &MaskPlan, b: &MaskPlan, seed: u64) -> MaskPlan {
        assert_eq!((a.n, a.c), (b.n, b.c), "mask union dims");
        let mut out = MaskPlan::new(a.n, a.c, Branch::Combined, seed);
        for (o, (&x, &y)) in out.mask.iter_mut().zip(a.mask.iter().zip(b.mask.iter())) {
            *o = x | y;
        }
        out.masked_channels = b.masked_channels.clone();
        out
    }
}

/// Alg. step: map the selection value onto one of the three branches.
pub fn select_branch(s: f64, p_patch: f64, p_channel: f64) -> Branch {
    if s < p_patch {
        Branch::PatchOnly
    } else if s < p_patch + p_channel {
        Branch::ChannelOnly
    } else {
        Branch::Combined
    }
}

fn fill_patch_mask(
    plan: &mut MaskPlan,
    n: usize,
    c: usize,
    r_p: f64,
    independent: bool,
    rng: &mut ChaCha8Rng,
) {
    let k = (n as f64 * r_p).floor() as usize;
    let mut first: Vec<usize> = Vec::new();
    for j in 0..c {
        let positions: Vec<usize> = if independent || j == 0 {
            let s = index::sample(rng, n, k).into_vec();
            if j == 0 {
                first = s.clone();
            }
            s
        } else {
            first.clone()
        };
        for i in positions {
            plan.mask[i * c + j] = 1;
        }
    }
}

/// Uniform per-channel patch masking: every channel hides exactly
/// `floor(n * r_p)` positions; positions are drawn independently per
/// channel unless duplication is requested.
pub fn random_patch_mask(
    n: usize,
    c: usize,
    r_p: f64,
    independent_spatial: bool,
    seed: u64,
) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&r_p) {
        return Err(Error::InvalidMaskRatio(r_p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = MaskPlan::new(n, c, Branch::PatchOnly, seed);
    fill_patch_mask(&mut plan, n, c, r_p, independent_spatial, &mut rng);
    Ok(plan)
}

/// Mask `k ~ U{0..c-1}` whole channels chosen uniformly; at least one
/// channel always stays fully visible.
pub fn dynamic_channel_mask(n: usize, c: usize, seed: u64) -> MaskPlan {
    assert!(c >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = MaskPlan::new(n, c, Branch::ChannelOnly, seed);
    fill_channel_mask(&mut plan, n, c, &mut rng);
    plan
}

fn fill_channel_mask(plan: &mut MaskPlan, n: usize, c: usize, rng: &mut ChaCha8Rng) {
    let k = rng.random_range(0..c);
    let mut channels = index::sample(rng, c, k).into_vec();
    channels.sort_unstable();
    for &j in &channels {
        for i in 0..n {
            plan.mask[i * c + j] = 1;
        }
    }
    plan.masked_channels = channels;
}

/// Dynamic channel-patch masking: draw both masks, then pick the
/// patch-only / channel-only / union branch by the selection value.
pub fn dcp_mask(n: usize, c: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskPlan> {
    if cfg.strategy != Strategy::Dcp {
        return Err(Error::Config(format!(
            "dcp_mask called with strategy {:?}",
            cfg.strategy
        )));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut patch = MaskPlan::new(n, c, Branch::PatchOnly, seed);
    fill_patch_mask(&mut patch, n, c, cfg.r_p, cfg.independent_spatial, &mut rng);

    let mut channel = MaskPlan::new(n, c, Branch::ChannelOnly, seed);
    fill_channel_mask(&mut channel, n, c, &mut rng);

    let s: f64 = rng.random_range(0.0..1.0);
    Ok(match select_branch(s, cfg.p_patch, cfg.p_channel) {
        Branch::PatchOnly => patch,
        Branch::ChannelOnly => channel,
        Branch::Combined => {
            let mut merged = MaskPlan::union(&patch, &channel, seed);
            merged.constituents = Some(Box::new((patch, channel)));
            merged
        }
    })
}

/// The non-DCP strategies of the masking comparison.
pub fn baseline_mask(n: usize, c: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskPlan> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.strategy {
        Strategy::Dcp => Err(Error::Config(
            "baseline_mask called with the DCP strategy".into(),
        )),
        Strategy::RandomPatchFixed => {
            let mut plan = MaskPlan::new(n, c, Branch::PatchOnly, seed);
            fill_patch_mask(&mut plan, n, c, cfg.r_p, cfg.independent_spatial, &mut rng);
            Ok(plan)
        }
        Strategy::RandomPatchDynamic => {
            if cfg.dynamic_ratios.is_empty() {
                return Err(Error::Config("dynamic_ratios must be non-empty".into()));
            }
            let r = cfg.dynamic_ratios[rng.random_range(0..cfg.dynamic_ratios.len())];
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidMaskRatio(r));
            }
            let mut plan = MaskPlan::new(n, c, Branch::PatchOnly, seed);
            fill_patch_mask(&mut plan, n, c, r, cfg.independent_spatial, &mut rng);
            Ok(plan)
        }
        Strategy::ChannelFixed => {
            let k = (c as f64 * cfg.r_c).floor() as usize;
            if k >= c {
                return Err(Error::ChannelRatioMasksAll(cfg.r_c));
            }
            let mut plan = MaskPlan::new(n, c, Branch::ChannelOnly, seed);
            let mut channels = index::sample(&mut rng, c, k).into_vec();
            channels.sort_unstable();
            for &j in &channels {
                for i in 0..n {
                    plan.mask[i * c + j] = 1;
                }
            }
            plan.masked_channels = channels;
            Ok(plan)
        }
        Strategy::HcsDynamic => {
            let mut plan = MaskPlan::new(n, c, Branch::ChannelOnly, seed);
            fill_channel_mask(&mut plan, n, c, &mut rng);
            Ok(plan)
        }
        Strategy::ChannelPlusPatchFixed => {
            let k = (c as f64 * cfg.r_c).floor() as usize;
            if k >= c {
                return Err(Error::ChannelRatioMasksAll(cfg.r_c));
            }
            let mut channel = MaskPlan::new(n, c, Branch::ChannelOnly, seed);
            let mut channels = index::sample(&mut rng, c, k).into_vec();
            channels.sort_unstable();
            for &j in &channels {
                for i in 0..n {
                    channel.mask[i * c + j] = 1;
                }
            }
            channel.masked_channels = channels;
            let mut patch = MaskPlan::new(n, c, Branch::PatchOnly, seed);
            fill_patch_mask(&mut patch, n, c, cfg.r_p, cfg.independent_spatial, &mut rng);
            let mut merged = MaskPlan::union(&patch, &channel, seed);
            merged.constituents = Some(Box::new((patch, channel)));
            Ok(merged)
        }
    }
}

/// Strategy dispatch used by the training loop.
pub fn generate_mask(n: usize, c: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskPlan> {
    match cfg.strategy {
        Strategy::Dcp => dcp_mask(n, c, cfg, seed),
        _ => baseline_mask(n, c, cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::Strategy as Strat;
    use super::*;
    use crate::stats::{chi_square_two_sample, chi_square_uniform};
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn patch_mask_column_sums_are_exact() {
        let plan = random_patch_mask(196, 3, 0.75, true, 9).unwrap();
        for j in 0..3 {
            assert_eq!(plan.column_sum(j), 147);
        }
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let plan = random_patch_mask(16, 4, 0.0, true, 1).unwrap();
        assert_eq!(plan.masked_count(), 0);
    }

    #[test]
    fn ratio_one_is_rejected() {
        assert!(random_patch_mask(16, 4, 1.0, true, 1).is_err());
    }

    #[test]
    fn duplicated_spatial_mask_copies_channel_zero() {
        let plan = random_patch_mask(16, 4, 0.5, false, 3).unwrap();
        for i in 0..16 {
            let head = plan.is_masked(i, 0);
            for j in 1..4 {
                assert_eq!(plan.is_masked(i, j), head);
            }
        }
    }

    #[test]
    fn independent_spatial_masks_differ_at_hypergeometric_rate() {
        // P(two k-of-n subsets coincide) = 1 / C(n, k) = 1/20 for n=6, k=3.
        let draws = 4000;
        let mut equal = 0;
        for s in 0..draws {
            let plan = random_patch_mask(6, 2, 0.5, true, s).unwrap();
            let same = (0..6).all(|i| plan.is_masked(i, 0) == plan.is_masked(i, 1));
            if same {
                equal += 1;
            }
        }
        let freq = equal as f64 / draws as f64;
        assert!((freq - 0.05).abs() < 0.015, "freq {freq}");
    }

    #[test]
    fn per_position_mask_frequency_matches_ratio() {
        let draws = 10_000;
        let mut hits = vec![0u32; 16 * 4];
        for s in 0..draws {
            let plan = random_patch_mask(16, 4, 0.75, true, s).unwrap();
            for (h, &m) in hits.iter_mut().zip(plan.raw()) {
                *h += m as u32;
            }
        }
        for &h in &hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.75).abs() < 0.02, "cell frequency {f}");
        }
    }

    #[test]
    fn single_channel_never_masks() {
        for s in 0..50 {
            let plan = dynamic_channel_mask(8, 1, s);
            assert_eq!(plan.masked_count(), 0);
        }
    }

    #[test]
    fn channel_mask_counts_are_uniform_and_never_full() {
        let draws = 10_000;
        let mut k_hist = [0u64; 8];
        for s in 0..draws {
            let plan = dynamic_channel_mask(4, 8, s);
            let k = plan.masked_channels.len();
            assert!(k < 8, "all channels masked");
            k_hist[k] += 1;
        }
        let (_, p) = chi_square_uniform(&k_hist);
        assert!(p > 0.01, "k not uniform, p = {p}");
    }

    #[test]
    fn channel_subsets_given_k_are_uniform() {
        // condition on k=2 over c=4: 6 subsets should be equally likely
        let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
        let mut total = 0u64;
        for s in 0..30_000u64 {
            let plan = dynamic_channel_mask(2, 4, s);
            if plan.masked_channels.len() == 2 {
                *counts.entry(plan.masked_channels.clone()).or_default() += 1;
                total += 1;
            }
        }
        assert_eq!(counts.len(), 6, "missing subsets: {counts:?}");
        let hist: Vec<u64> = counts.values().copied().collect();
        let (_, p) = chi_square_uniform(&hist);
        assert!(p > 0.01, "subsets not uniform (p={p}), total {total}");
    }

    #[test]
    fn branch_selection_rule() {
        assert_eq!(select_branch(0.3, 0.5, 0.5), Branch::PatchOnly);
        assert_eq!(select_branch(0.5, 0.5, 0.5), Branch::ChannelOnly);
        assert_eq!(select_branch(0.999, 0.5, 0.5), Branch::ChannelOnly);
        assert_eq!(select_branch(0.7, 0.0, 0.0), Branch::Combined);
        assert_eq!(select_branch(0.0, 0.0, 0.5), Branch::ChannelOnly);
    }

    #[test]
    fn combination_config_always_merges() {
        let cfg = MaskConfig::dcp_combination();
        for s in 0..50 {
            let plan = dcp_mask(16, 4, &cfg, s).unwrap();
            assert_eq!(plan.branch, Branch::Combined);
            let (p, c) = plan.constituents.as_deref().unwrap().clone();
            let union = MaskPlan::union(&p, &c, plan.seed_trace);
            assert_eq!(union.raw(), plan.raw());
        }
    }

    #[test]
    fn alternate_config_splits_evenly_and_never_merges() {
        let cfg = MaskConfig::dcp_alternate();
        let draws = 10_000;
        let mut patch = 0;
        let mut channel = 0;
        for s in 0..draws {
            match dcp_mask(16, 4, &cfg, s).unwrap().branch {
                Branch::PatchOnly => patch += 1,
                Branch::ChannelOnly => channel += 1,
                Branch::Combined => panic!("combined branch under alternate config"),
            }
        }
        let fp = patch as f64 / draws as f64;
        let fc = channel as f64 / draws as f64;
        assert!((fp - 0.5).abs() < 0.02, "patch branch freq {fp}");
        assert!((fc - 0.5).abs() < 0.02, "channel branch freq {fc}");
    }

    #[test]
    fn channel_fixed_masks_exact_count() {
        let cfg = MaskConfig {
            strategy: Strat::ChannelFixed,
            ..MaskConfig::baseline(Strat::ChannelFixed, 0.75)
        };
        let plan = baseline_mask(4, 8, &cfg, 11).unwrap();
        assert_eq!(plan.masked_channels.len(), 4);
        for j in 0..8 {
            let s = plan.column_sum(j);
            assert!(s == 0 || s == 4);
        }
    }

    #[test]
    fn channel_fixed_rejects_full_masking() {
        let mut cfg = MaskConfig::baseline(Strat::ChannelFixed, 0.5);
        cfg.r_c = 1.0;
        assert!(baseline_mask(4, 4, &cfg, 0).is_err());
    }

    #[test]
    fn hcs_matches_dynamic_channel_distribution() {
        let draws = 10_000u64;
        let cfg = MaskConfig::baseline(Strat::HcsDynamic, 0.0);
        let mut a = [0u64; 4];
        let mut b = [0u64; 4];
        for s in 0..draws {
            let h = baseline_mask(4, 4, &cfg, s).unwrap();
            let d = dynamic_channel_mask(4, 4, s + draws);
            a[h.masked_channels.len()] += 1;
            b[d.masked_channels.len()] += 1;
        }
        let (_, p) = chi_square_two_sample(&a, &b);
        assert!(p > 0.01, "two-sample p = {p}");
    }

    #[test]
    fn channel_plus_patch_is_union_of_parts() {
        let cfg = MaskConfig::baseline(Strat::ChannelPlusPatchFixed, 0.5);
        let plan = baseline_mask(16, 4, &cfg, 5).unwrap();
        let (p, c) = plan.constituents.as_deref().unwrap();
        for i in 0..16 {
            for j in 0..4 {
                assert_eq!(plan.is_masked(i, j), p.is_masked(i, j) || c.is_masked(i, j));
            }
        }
    }

    #[test]
    fn random_patch_dynamic_uses_the_ratio_set() {
        let cfg = MaskConfig::baseline(Strat::RandomPatchDynamic, 0.0);
        let mut seen = std::collections::HashSet::new();
        for s in 0..200 {
            let plan = baseline_mask(16, 2, &cfg, s).unwrap();
            seen.insert(plan.column_sum(0));
        }
        // floor(16 * r) for r in {0.25, 0.5, 0.75}
        assert_eq!(seen, [4usize, 8, 12].into_iter().collect());
    }

    #[test]
    fn dcp_with_baseline_strategy_errors() {
        let cfg = MaskConfig::baseline(Strat::RandomPatchFixed, 0.5);
        assert!(dcp_mask(4, 2, &cfg, 0).is_err());
        let cfg = MaskConfig::dcp_alternate();
        assert!(baseline_mask(4, 2, &cfg, 0).is_err());
    }

    proptest! {
        #[test]
        fn plans_are_deterministic_and_never_mask_everything(
            n in 1usize..40,
            c in 1usize..9,
            r_p in 0.0f64..0.99,
            seed in 0u64..5000,
            alternate in proptest::bool::ANY,
        ) {
            let mut cfg = if alternate { MaskConfig::dcp_alternate() } else { MaskConfig::dcp_combination() };
            cfg.r_p = r_p;
            let a = dcp_mask(n, c, &cfg, seed).unwrap();
            let b = dcp_mask(n, c, &cfg, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.visible_count() >= 1, "plan masked everything");
            if a.branch == Branch::PatchOnly {
                let k = (n as f64 * r_p).floor() as usize;
                for j in 0..c {
                    prop_assert_eq!(a.column_sum(j), k);
                }
            }
            if a.branch == Branch::ChannelOnly {
                prop_assert!(a.masked_channels.len() < c);
                for j in 0..c {
                    let s = a.column_sum(j);
                    prop_assert!(s == 0 || s == n);
                }
            }
        }
    }
}
