//! Disjoint context/target token sampling.
//!
//! Targets are drawn first and the context is the complement of their union,
//! so context and target sets never overlap.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RandomDisjoint,
    MultiBlock,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::RandomDisjoint => "random_disjoint",
            MaskStrategy::MultiBlock => "multi_block",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    /// Fraction of tokens that become prediction targets.
    pub target_ratio: f64,
    /// Number of target groups `M`.
    pub n_target_groups: usize,
    /// Range of relative block areas (fractions of the grid), multi-block only.
    pub block_scale: (f64, f64),
    /// Range of block aspect ratios (height / width), multi-block only.
    pub block_aspect: (f64, f64),
}

fn default_scale() -> (f64, f64) {
    (0.05, 0.15)
}

fn default_aspect() -> (f64, f64) {
    (0.75, 1.5)
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self::random(0.25)
    }
}

impl MaskConfig {
    /// Random disjoint masking with all targets in one group.
    pub fn random(target_ratio: f64) -> Self {
        Self {
            strategy: MaskStrategy::RandomDisjoint,
            target_ratio,
            n_target_groups: 1,
            block_scale: default_scale(),
            block_aspect: default_aspect(),
        }
    }

    /// Multi-block masking with four rectangular target blocks.
    pub fn multi_block(target_ratio: f64) -> Self {
        Self {
            strategy: MaskStrategy::MultiBlock,
            n_target_groups: 4,
            ..Self::random(target_ratio)
        }
    }

    pub fn target_count(&self, n_tokens: usize) -> usize {
        (self.target_ratio * n_tokens as f64).round() as usize
    }

    /// Field-level checks independent of the token count.
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let f = |name: &str| format!("{prefix}{name}");
        if !(self.target_ratio.is_finite() && (0.0..1.0).contains(&self.target_ratio)) {
            errs.push(FieldError::new(f("target_ratio"), "must lie in [0, 1)"));
        }
        if self.n_target_groups == 0 {
            errs.push(FieldError::new(f("n_target_groups"), "must be at least 1"));
        }
        let (lo, hi) = self.block_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            errs.push(FieldError::new(
                f("block_scale"),
                "must satisfy 0 < min <= max <= 1 (a block cannot exceed the grid)",
            ));
        }
        let (lo, hi) = self.block_aspect;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            errs.push(FieldError::new(f("block_aspect"), "must satisfy 0 < min <= max"));
        }
        errs
    }

    /// Checks the configuration against a concrete token count.
    pub fn validate_for(&self, n_tokens: usize) -> Result<()> {
        let mut errs = self.field_errors("");
        if errs.is_empty() {
            let t = self.target_count(n_tokens);
            if t < self.n_target_groups {
                errs.push(FieldError::new(
                    "target_ratio",
                    format!(
                        "{t} target tokens of {n_tokens} cannot fill {} groups",
                        self.n_target_groups
                    ),
                ));
            }
            if t >= n_tokens {
                errs.push(FieldError::new(
                    "target_ratio",
                    format!("{t} target tokens of {n_tokens} leave no context"),
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Context indices and `M` target groups for one sample, all sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub context: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub n_tokens: usize,
}

impl MaskPair {
    /// Builds a mask pair, checking disjointness and range invariants.
    pub fn new(n_tokens: usize, mut context: Vec<usize>, mut targets: Vec<Vec<usize>>) -> Result<Self> {
        context.sort_unstable();
        for g in targets.iter_mut() {
            g.sort_unstable();
        }
        let pair = Self {
            context,
            targets,
            n_tokens,
        };
        pair.check()?;
        Ok(pair)
    }

    /// Context is the complement of the union of the given target groups.
    pub fn from_targets(n_tokens: usize, targets: Vec<Vec<usize>>) -> Result<Self> {
        let mut taken = vec![false; n_tokens];
        for &i in targets.iter().flatten() {
            if i >= n_tokens {
                return Err(Error::Contract(format!("target index {i} >= {n_tokens}")));
            }
            taken[i] = true;
        }
        let context = (0..n_tokens).filter(|&i| !taken[i]).collect();
        Self::new(n_tokens, context, targets)
    }

    pub fn check(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::Contract("context set is empty".into()));
        }
        if self.targets.is_empty() || self.targets.iter().any(Vec::is_empty) {
            return Err(Error::Contract("every target group must be non-empty".into()));
        }
        let mut owner = vec![None; self.n_tokens];
        let sets = std::iter::once(&self.context).chain(self.targets.iter());
        for (set_id, set) in sets.enumerate() {
            for &i in set {
                if i >= self.n_tokens {
                    return Err(Error::Contract(format!("index {i} >= {}", self.n_tokens)));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::Contract(format!(
                        "token {i} appears in sets {prev} and {set_id}"
                    )));
                }
                owner[i] = Some(set_id);
            }
        }
        Ok(())
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

/// Splits `items` into `m` consecutive groups whose sizes differ by at most
/// one; earlier groups receive the extra elements.
pub fn even_partition(items: &[usize], m: usize) -> Vec<Vec<usize>> {
    let base = items.len() / m;
    let extra = items.len() % m;
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for g in 0..m {
        let len = base + usize::from(g < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

pub fn sample_random_disjoint<R: Rng + ?Sized>(
    n_tokens: usize,
    config: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPair> {
    config.validate_for(n_tokens)?;
    let t = config.target_count(n_tokens);
    let drawn = index::sample(rng, n_tokens, t).into_vec();
    let targets = even_partition(&drawn, config.n_target_groups);
    MaskPair::from_targets(n_tokens, targets)
}

/// Token indices of a `height × width` rectangle anchored at (`top`, `left`)
/// in a row-major grid.
pub fn block_indices(grid: (usize, usize), top: usize, left: usize, height: usize, width: usize) -> Vec<usize> {
    let cols = grid.1;
    let mut out = Vec::with_capacity(height * width);
    for r in top..top + height {
        for c in left..left + width {
            out.push(r * cols + c);
        }
    }
    out
}

fn fits(occupied: &[bool], grid: (usize, usize), top: usize, left: usize, h: usize, w: usize) -> bool {
    (top..top + h).all(|r| (left..left + w).all(|c| !occupied[r * grid.1 + c]))
}

fn free_anchors(occupied: &[bool], grid: (usize, usize), h: usize, w: usize) -> Vec<(usize, usize)> {
    let (rows, cols) = grid;
    if h > rows || w > cols {
        return Vec::new();
    }
    let mut out = Vec::new();
    for top in 0..=rows - h {
        for left in 0..=cols - w {
            if fits(occupied, grid, top, left, h, w) {
                out.push((top, left));
            }
        }
    }
    out
}

/// Samples `M` non-overlapping rectangular target blocks on the patch grid.
///
/// Relative block areas are drawn from `block_scale` and rescaled so the
/// blocks together cover `round(target_ratio * n_tokens)` tokens; each block
/// takes the rectangle closest to its area and a drawn aspect ratio among
/// those that still fit without overlapping earlier blocks.
pub fn sample_multi_block<R: Rng + ?Sized>(
    n_tokens: usize,
    grid: (usize, usize),
    config: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPair> {
    let (rows, cols) = grid;
    if rows * cols != n_tokens || n_tokens == 0 {
        return Err(Error::config(
            "grid",
            format!("grid {rows}x{cols} does not hold {n_tokens} tokens"),
        ));
    }
    config.validate_for(n_tokens)?;
    let m = config.n_target_groups;
    let total = config.target_count(n_tokens);

    let weights: Vec<f64> = (0..m)
        .map(|_| rng.random_range(config.block_scale.0..=config.block_scale.1))
        .collect();
    let weight_sum: f64 = weights.iter().sum();

    let mut occupied = vec![false; n_tokens];
    let mut used = 0usize;
    let mut targets = Vec::with_capacity(m);
    for (i, w) in weights.iter().enumerate() {
        let blocks_left = m - i - 1;
        let budget = n_tokens - 1 - used - blocks_left;
        let want = if blocks_left == 0 {
            total.saturating_sub(used)
        } else {
            (total as f64 * w / weight_sum).round() as usize
        }
        .clamp(1, budget.max(1));
        let aspect = rng.random_range(config.block_aspect.0..=config.block_aspect.1);

        let mut best: Option<(f64, usize, usize, Vec<(usize, usize)>)> = None;
        for h in 1..=rows {
            for wd in 1..=cols {
                if h * wd > budget {
                    continue;
                }
                let cost = (h * wd).abs_diff(want) as f64 * 10.0
                    + ((h as f64 / wd as f64) / aspect).ln().abs();
                if best.as_ref().is_some_and(|b| b.0 <= cost) {
                    continue;
                }
                let anchors = free_anchors(&occupied, grid, h, wd);
                if !anchors.is_empty() {
                    best = Some((cost, h, wd, anchors));
                }
            }
        }
        let (_, h, wd, anchors) = best.ok_or_else(|| {
            Error::config("block_scale", "no free rectangle left for a target block")
        })?;
        let (top, left) = anchors[rng.random_range(0..anchors.len())];
        let block = block_indices(grid, top, left, h, wd);
        for &t in &block {
            occupied[t] = true;
        }
        used += block.len();
        targets.push(block);
    }
    MaskPair::from_targets(n_tokens, targets)
}

/// Dispatches on the configured strategy.
pub fn sample_mask<R: Rng + ?Sized>(
    grid: (usize, usize),
    config: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPair> {
    let n = grid.0 * grid.1;
    match config.strategy {
        MaskStrategy::RandomDisjoint => sample_random_disjoint(n, config, rng),
        MaskStrategy::MultiBlock => sample_multi_block(n, grid, config, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quarter_ratio_single_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = sample_random_disjoint(16, &MaskConfig::random(0.25), &mut rng).unwrap();
        assert_eq!(pair.targets.len(), 1);
        assert_eq!(pair.targets[0].len(), 4);
        assert_eq!(pair.context.len(), 12);
        pair.check().unwrap();
    }

    #[test]
    fn four_groups_are_singletons() {
        let cfg = MaskConfig {
            n_target_groups: 4,
            ..MaskConfig::random(0.25)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = sample_random_disjoint(16, &cfg, &mut rng).unwrap();
        assert_eq!(pair.targets.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn uneven_partition_front_loads() {
        let parts = even_partition(&[0, 1, 2, 3, 4, 5, 6], 3);
        assert_eq!(parts, vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let too_many_groups = MaskConfig {
            n_target_groups: 5,
            ..MaskConfig::random(0.25)
        };
        assert!(matches!(
            sample_random_disjoint(16, &too_many_groups, &mut rng),
            Err(Error::Config(_))
        ));
        // 0.99 * 16 rounds to 16: nothing left for the context
        assert!(matches!(
            sample_random_disjoint(16, &MaskConfig::random(0.99), &mut rng),
            Err(Error::Config(_))
        ));
        assert!(sample_multi_block(15, (4, 4), &MaskConfig::multi_block(0.25), &mut rng).is_err());
        let huge = MaskConfig {
            block_scale: (0.5, 1.5),
            ..MaskConfig::multi_block(0.25)
        };
        assert!(matches!(
            sample_multi_block(16, (4, 4), &huge, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn top_left_block_indices() {
        assert_eq!(block_indices((4, 4), 0, 0, 2, 2), vec![0, 1, 4, 5]);
        let pair = MaskPair::from_targets(16, vec![block_indices((4, 4), 0, 0, 2, 2)]).unwrap();
        assert_eq!(pair.context, vec![2, 3, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn two_horizontal_blocks_stay_disjoint() {
        let a = block_indices((4, 4), 0, 0, 1, 2);
        let b = block_indices((4, 4), 2, 2, 1, 2);
        let pair = MaskPair::from_targets(16, vec![a, b]).unwrap();
        assert_eq!(pair.targets[0].len(), 2);
        assert_eq!(pair.targets[1].len(), 2);
        assert_eq!(pair.context.len(), 12);
        pair.check().unwrap();
    }

    #[test]
    fn overlapping_sets_fail_the_check() {
        assert!(MaskPair::new(4, vec![0, 1], vec![vec![1, 2]]).is_err());
        assert!(MaskPair::new(4, vec![0], vec![vec![1], vec![1, 2]]).is_err());
        assert!(MaskPair::new(4, vec![], vec![vec![1]]).is_err());
        assert!(MaskPair::new(4, vec![0], vec![vec![4]]).is_err());
    }

    #[test]
    fn same_seed_same_mask() {
        let cfg = MaskConfig::multi_block(0.25);
        let a = sample_mask((8, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask((8, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_target_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = MaskConfig::random(0.25);
        let mut hits = [0usize; 16];
        let draws = 10_000;
        for _ in 0..draws {
            let pair = sample_random_disjoint(16, &cfg, &mut rng).unwrap();
            for &i in pair.targets.iter().flatten() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn multi_block_mean_fraction_tracks_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MaskConfig::multi_block(0.25);
        let draws = 10_000;
        let mut total = 0usize;
        for _ in 0..draws {
            let pair = sample_multi_block(64, (8, 8), &cfg, &mut rng).unwrap();
            assert_eq!(pair.targets.len(), 4);
            total += pair.target_count();
        }
        let mean = total as f64 / (draws * 64) as f64;
        assert!((0.20..=0.30).contains(&mean), "mean fraction {mean}");
    }

    proptest! {
        #[test]
        fn sampled_pairs_are_disjoint(
            rows in 2usize..7, cols in 2usize..7, ratio in 0.1f64..0.9, m in 1usize..4,
            multi in any::<bool>(), seed in any::<u64>()
        ) {
            let n = rows * cols;
            let cfg = MaskConfig {
                strategy: if multi { MaskStrategy::MultiBlock } else { MaskStrategy::RandomDisjoint },
                n_target_groups: m,
                ..MaskConfig::random(ratio)
            };
            prop_assume!(cfg.validate_for(n).is_ok());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = sample_mask((rows, cols), &cfg, &mut rng).unwrap();
            pair.check().unwrap();
            prop_assert_eq!(pair.targets.len(), m);
            prop_assert!(pair.context.len() + pair.target_count() <= n);
            if !multi {
                prop_assert_eq!(pair.context.len() + pair.target_count(), n);
                prop_assert_eq!(pair.target_count(), cfg.target_count(n));
            } else {
                let t = cfg.target_count(n) as i64;
                prop_assert!(pair.target_count() as i64 >= m as i64);
                prop_assert!((pair.target_count() as i64 - t).abs() <= t.max(2));
            }
        }
    }
}
