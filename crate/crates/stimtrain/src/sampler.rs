//! The ordered subnetwork space and its sampling rules.
//!
//! Subnetworks keep a prefix of blocks in every stage (skipping only happens
//! from the back), so a stage of `n` blocks contributes `n` depth choices
//! instead of the `2^n` of the raw unraveled space. A [`SamplingRule`]
//! restricts stage `i` further to its `s_i` deepest choices — the induced set
//! `{n_i - s_i + 1, ..., n_i}` — guaranteeing minimum stage capacity while
//! biasing sampling toward deep stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DepthMask, NetworkSpec};

/// Per-stage choice counts defining the inter-stage sampling space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingRule {
    pub choices: Vec<usize>,
}

impl SamplingRule {
    pub fn new(choices: Vec<usize>) -> Self {
        SamplingRule { choices }
    }

    /// Every stage gets its full set of depth choices.
    pub fn full(spec: &NetworkSpec) -> Self {
        SamplingRule { choices: spec.stage_blocks.clone() }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.choices.len() != spec.stage_blocks.len() {
            return Err(Error::Rule(format!(
                "rule has {} stages, spec has {}",
                self.choices.len(),
                spec.stage_blocks.len()
            )));
        }
        for (i, (&s, &n)) in self.choices.iter().zip(&spec.stage_blocks).enumerate() {
            if s == 0 || s > n {
                return Err(Error::Rule(format!("choices[{i}] = {s} outside [1, {n}]")));
            }
        }
        Ok(())
    }

    /// Smallest kept depth per stage: `n_i - s_i + 1`.
    pub fn min_depths(&self, spec: &NetworkSpec) -> Result<Vec<usize>> {
        self.validate(spec)?;
        Ok(self
            .choices
            .iter()
            .zip(&spec.stage_blocks)
            .map(|(&s, &n)| n - s + 1)
            .collect())
    }
}

/// A validated rule bound to a spec, with its cardinality.
#[derive(Debug, Clone)]
pub struct SamplingSpace {
    pub rule: SamplingRule,
    pub cardinality: u64,
}

impl SamplingSpace {
    pub fn new(spec: &NetworkSpec, rule: SamplingRule) -> Result<Self> {
        let cardinality = space_cardinality(spec, &rule)?;
        Ok(SamplingSpace { rule, cardinality })
    }
}

/// Number of subnetworks under the rule: `Π s_i`.
///
/// For contrast, the raw unraveled space of the same network would hold
/// `Π 2^{n_i}` subnetworks — exponential in every stage depth — while the
/// ordered space is linear per stage.
pub fn space_cardinality(spec: &NetworkSpec, rule: &SamplingRule) -> Result<u64> {
    rule.validate(spec)?;
    let mut card = 1u64;
    for &s in &rule.choices {
        card = card
            .checked_mul(s as u64)
            .ok_or_else(|| Error::Rule("cardinality overflows u64".into()))?;
    }
    Ok(card)
}

/// Draw one mask: each stage's depth uniform over its induced set,
/// independently. The full-depth mask is always reachable and the first
/// block of a stage is never skipped.
pub fn sample_subnet(spec: &NetworkSpec, rule: &SamplingRule, rng: &mut impl Rng) -> Result<DepthMask> {
    rule.validate(spec)?;
    let kept: Vec<usize> = rule
        .choices
        .iter()
        .zip(&spec.stage_blocks)
        .map(|(&s, &n)| rng.random_range(n - s + 1..=n))
        .collect();
    DepthMask::new(kept, spec)
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 4096;

/// All masks of the space in lexicographic order (first stage slowest).
pub fn enumerate_space(spec: &NetworkSpec, rule: &SamplingRule) -> Result<Vec<DepthMask>> {
    enumerate_space_capped(spec, rule, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_space_capped(spec: &NetworkSpec, rule: &SamplingRule, cap: u64) -> Result<Vec<DepthMask>> {
    let cardinality = space_cardinality(spec, rule)?;
    if cardinality > cap {
        return Err(Error::EnumerationCap { cardinality, cap });
    }
    let lows: Vec<usize> = rule.min_depths(spec)?;
    let highs = &spec.stage_blocks;
    let mut masks = Vec::with_capacity(cardinality as usize);
    let mut current = lows.clone();
    loop {
        masks.push(DepthMask::new(current.clone(), spec)?);
        // odometer increment, last stage fastest
        let mut i = current.len();
        loop {
            if i == 0 {
                return Ok(masks);
            }
            i -= 1;
            if current[i] < highs[i] {
                current[i] += 1;
                for j in i + 1..current.len() {
                    current[j] = lows[j];
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockKind, StemSpec};
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn spec_with(blocks: Vec<usize>) -> NetworkSpec {
        let n = blocks.len();
        NetworkSpec {
            stage_blocks: blocks,
            stage_widths: vec![8; n],
            num_classes: 10,
            stem: StemSpec::default(),
            block_kind: BlockKind::Basic,
            input_channels: 3,
        }
    }

    // Exhaustive oracle: count prefix masks satisfying the induced-set bound.
    fn enumeration_oracle(blocks: &[usize], choices: &[usize]) -> Vec<Vec<usize>> {
        let mut all = vec![vec![]];
        for (&n, &s) in blocks.iter().zip(choices) {
            let mut next = Vec::new();
            for prefix in &all {
                for d in 1..=n {
                    if d >= n - s + 1 {
                        let mut v = prefix.clone();
                        v.push(d);
                        next.push(v);
                    }
                }
            }
            all = next;
        }
        all
    }

    #[test]
    fn cardinality_matches_exhaustive_enumeration() {
        let spec = spec_with(vec![3, 4, 6, 3]);
        let full = SamplingRule::new(vec![3, 4, 6, 3]);
        assert_eq!(space_cardinality(&spec, &full).unwrap(), 216);
        assert_eq!(enumeration_oracle(&[3, 4, 6, 3], &[3, 4, 6, 3]).len(), 216);

        let ones = SamplingRule::new(vec![1, 1, 1, 1]);
        assert_eq!(space_cardinality(&spec, &ones).unwrap(), 1);

        let inter = SamplingRule::new(vec![1, 2, 4, 1]);
        assert_eq!(space_cardinality(&spec, &inter).unwrap(), 8);
        assert_eq!(enumeration_oracle(&[3, 4, 6, 3], &[1, 2, 4, 1]).len(), 8);

        let bad = SamplingRule::new(vec![4, 4, 6, 3]);
        assert!(space_cardinality(&spec, &bad).is_err());
    }

    #[test]
    fn sampling_respects_induced_sets() {
        let spec = spec_with(vec![3, 4, 6, 3]);
        let rule = SamplingRule::new(vec![1, 2, 4, 1]);
        let mut rng = stream(0, Stream::Mask, 0, 0);
        for _ in 0..2000 {
            let mask = sample_subnet(&spec, &rule, &mut rng).unwrap();
            for (k, min) in mask.kept().iter().zip([3, 3, 3, 3]) {
                assert!(*k >= min, "mask {:?}", mask.kept());
            }
        }

        let ones = SamplingRule::new(vec![1, 1, 1, 1]);
        let mask = sample_subnet(&spec, &ones, &mut rng).unwrap();
        assert!(mask.is_full(&spec));
    }

    #[test]
    fn per_stage_marginals_are_uniform() {
        // chi-square over 10,000 draws at alpha = 0.01, df = 2 -> 9.210
        let spec = spec_with(vec![3]);
        let rule = SamplingRule::new(vec![3]);
        let mut rng = stream(1, Stream::Mask, 0, 0);
        let mut counts = [0u32; 3];
        let n = 10_000;
        for _ in 0..n {
            let mask = sample_subnet(&spec, &rule, &mut rng).unwrap();
            counts[mask.kept()[0] - 1] += 1;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 9.210, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn enumeration_order_and_contents() {
        let spec = spec_with(vec![2, 2]);
        let rule = SamplingRule::new(vec![2, 2]);
        let masks = enumerate_space(&spec, &rule).unwrap();
        let kept: Vec<Vec<usize>> = masks.iter().map(|m| m.kept().to_vec()).collect();
        assert_eq!(kept, vec![vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]]);
    }

    #[test]
    fn enumeration_cap_error_suggests_sampling() {
        let spec = spec_with(vec![9, 9, 9, 9, 9]);
        let rule = SamplingRule::full(&spec);
        let err = enumerate_space_capped(&spec, &rule, 4096).unwrap_err();
        assert!(err.to_string().contains("sample"), "{err}");
    }

    #[test]
    fn monotone_capacity() {
        // fewer choices per stage -> larger minimum depth
        let spec = spec_with(vec![3, 4, 6, 3]);
        let a = SamplingRule::new(vec![1, 2, 4, 1]);
        let b = SamplingRule::new(vec![2, 3, 5, 2]);
        let min_a = a.min_depths(&spec).unwrap();
        let min_b = b.min_depths(&spec).unwrap();
        assert!(min_a.iter().zip(&min_b).all(|(x, y)| x >= y));
    }

    proptest! {
        #[test]
        fn enumeration_is_duplicate_free_and_sized(
            blocks in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
        ) {
            let spec = spec_with(blocks.clone());
            let mut rng = stream(seed, Stream::Mask, 1, 0);
            let choices: Vec<usize> = blocks.iter().map(|&n| rng.random_range(1..=n)).collect();
            let rule = SamplingRule::new(choices);
            let masks = enumerate_space(&spec, &rule).unwrap();
            let card = space_cardinality(&spec, &rule).unwrap();
            prop_assert_eq!(masks.len() as u64, card);
            let uniq: HashSet<_> = masks.iter().map(|m| m.kept().to_vec()).collect();
            prop_assert_eq!(uniq.len(), masks.len());
            // prefix closure: kept counts are within bounds (non-prefix
            // selections are unrepresentable by construction)
            for m in &masks {
                for (k, n) in m.kept().iter().zip(&blocks) {
                    prop_assert!(*k >= 1 && k <= n);
                }
            }
        }
    }
}
