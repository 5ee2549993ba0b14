//! Residual classification networks with depth-masked forward passes.
//!
//! The main network and every subnetwork share one [`ParameterSet`]: a depth
//! mask selects how many blocks of each stage run, skipped blocks contribute
//! exactly their shortcut path, and a full-depth mask reproduces the plain
//! forward bit for bit. Backward fills gradient slots for all touched
//! parameters and returns the input gradient.

mod checkpoint;
mod flops;
mod network;
mod ops;
mod params;

pub use checkpoint::{read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use flops::mask_flops;
pub use network::{build_network, FeatTape, Network, Tape};
pub use ops::{BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReluCache};
pub use params::{Param, ParamKind, ParameterSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input convolution descriptor. Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl Default for StemSpec {
    fn default() -> Self {
        StemSpec { kernel: 3, stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    /// Ratio of block output channels to the stage width.
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Architecture description: stages, blocks per stage, widths, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub stage_blocks: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub stem: StemSpec,
    pub block_kind: BlockKind,
    pub input_channels: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.is_empty() {
            return Err(Error::Config("stage_blocks: must have at least one stage".into()));
        }
        if self.stage_blocks.len() != self.stage_widths.len() {
            return Err(Error::Config(format!(
                "stage_blocks/stage_widths: length mismatch ({} vs {})",
                self.stage_blocks.len(),
                self.stage_widths.len()
            )));
        }
        if let Some(i) = self.stage_blocks.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("stage_blocks[{i}]: must be >= 1")));
        }
        if let Some(i) = self.stage_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("stage_widths[{i}]: must be >= 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes: must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels: must be >= 1".into()));
        }
        if self.stem.kernel == 0 || self.stem.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "stem.kernel: must be odd and >= 1, got {}",
                self.stem.kernel
            )));
        }
        if self.stem.stride == 0 {
            return Err(Error::Config("stem.stride: must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    /// Output channels of stage `i` (after block expansion).
    pub fn stage_out_channels(&self, i: usize) -> usize {
        self.stage_widths[i] * self.block_kind.expansion()
    }

    /// CIFAR-style basic-block family: depth in {8, 14, 20, 32, 56, ...},
    /// three stages of (depth - 2) / 6 blocks at widths 16/32/64.
    pub fn resnet_cifar(depth: usize, num_classes: usize) -> Result<Self> {
        if depth < 8 || (depth - 2) % 6 != 0 {
            return Err(Error::Config(format!(
                "depth: CIFAR family needs depth = 6n + 2 with n >= 1, got {depth}"
            )));
        }
        let n = (depth - 2) / 6;
        Ok(NetworkSpec {
            stage_blocks: vec![n; 3],
            stage_widths: vec![16, 32, 64],
            num_classes,
            stem: StemSpec::default(),
            block_kind: BlockKind::Basic,
            input_channels: 3,
        })
    }

    /// Bottleneck [3,4,6,3] at a quarter of the usual widths; a desk-scale
    /// stand-in for the 50-layer family.
    pub fn bottleneck_quarter(num_classes: usize) -> Self {
        NetworkSpec {
            stage_blocks: vec![3, 4, 6, 3],
            stage_widths: vec![16, 32, 64, 128],
            num_classes,
            stem: StemSpec::default(),
            block_kind: BlockKind::Bottleneck,
            input_channels: 3,
        }
    }
}

/// Per-stage kept-block counts identifying one subnetwork.
///
/// The mask keeps exactly the first `kept[i]` blocks of stage `i`; no other
/// selection is representable, and `kept[i] >= 1` always (the first block of
/// a stage carries the stride/width change and is never skippable).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DepthMask {
    kept: Vec<usize>,
}

impl DepthMask {
    pub fn new(kept: Vec<usize>, spec: &NetworkSpec) -> Result<Self> {
        if kept.len() != spec.stage_blocks.len() {
            return Err(Error::Mask(format!(
                "mask has {} stages, spec has {}",
                kept.len(),
                spec.stage_blocks.len()
            )));
        }
        for (i, (&k, &n)) in kept.iter().zip(&spec.stage_blocks).enumerate() {
            if k == 0 || k > n {
                return Err(Error::Mask(format!(
                    "kept[{i}] = {k} outside [1, {n}]"
                )));
            }
        }
        Ok(DepthMask { kept })
    }

    /// The full-depth mask: identical to the unmasked main network.
    pub fn full(spec: &NetworkSpec) -> Self {
        DepthMask { kept: spec.stage_blocks.clone() }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn is_full(&self, spec: &NetworkSpec) -> bool {
        self.kept == spec.stage_blocks
    }

    /// Comma-separated kept counts, e.g. `3,4,6,3`.
    pub fn label(&self) -> String {
        self.kept.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Forward mode: train uses batch statistics in normalization layers, eval
/// uses running statistics. Neither writes running state by itself; see
/// [`Network::commit_running_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
