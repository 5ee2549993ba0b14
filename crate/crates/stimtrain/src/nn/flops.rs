//! Analytic per-sample FLOPs for a masked forward pass.
//!
//! Convolutions and the linear head count 2 FLOPs per multiply-accumulate;
//! normalization, activations, shortcut adds and pooling count their
//! elementwise cost. Skipped blocks cost nothing, so cost is monotone in the
//! mask.

use super::{BlockKind, DepthMask, NetworkSpec};
use crate::error::Result;

fn conv_flops(k: usize, cin: usize, cout: usize, oh: usize, ow: usize) -> u64 {
    2 * (k * k * cin * cout * oh * ow) as u64
}

fn out_hw(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let p = k / 2;
    ((h + 2 * p - k) / stride + 1, (w + 2 * p - k) / stride + 1)
}

/// FLOPs for one sample at the given input size under `mask`.
pub fn mask_flops(spec: &NetworkSpec, mask: &DepthMask, input_hw: (usize, usize)) -> Result<u64> {
    spec.validate()?;
    let mask = DepthMask::new(mask.kept().to_vec(), spec)?;
    let (mut h, mut w) = input_hw;
    let mut flops = 0u64;

    let stem_out = spec.stage_widths[0];
    let (oh, ow) = out_hw(h, w, spec.stem.kernel, spec.stem.stride);
    flops += conv_flops(spec.stem.kernel, spec.input_channels, stem_out, oh, ow);
    flops += 3 * (stem_out * oh * ow) as u64; // bn (scale+shift) + relu
    h = oh;
    w = ow;

    let mut in_ch = stem_out;
    for si in 0..spec.num_stages() {
        let width = spec.stage_widths[si];
        let out_ch = width * spec.block_kind.expansion();
        for bi in 0..mask.kept()[si] {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let (oh, ow) = out_hw(h, w, 3, stride);
            let needs_down = stride != 1 || in_ch != out_ch;
            match spec.block_kind {
                BlockKind::Basic => {
                    flops += conv_flops(3, in_ch, width, oh, ow);
                    flops += conv_flops(3, width, width, oh, ow);
                    flops += 2 * 3 * (width * oh * ow) as u64;
                }
                BlockKind::Bottleneck => {
                    flops += conv_flops(1, in_ch, width, h, w);
                    flops += conv_flops(3, width, width, oh, ow);
                    flops += conv_flops(1, width, out_ch, oh, ow);
                    flops += 3 * ((width * h * w) + (width + out_ch) * oh * ow) as u64;
                }
            }
            if needs_down {
                flops += conv_flops(1, in_ch, out_ch, oh, ow);
                flops += 2 * (out_ch * oh * ow) as u64;
            }
            flops += 2 * (out_ch * oh * ow) as u64; // shortcut add + out relu
            h = oh;
            w = ow;
            in_ch = out_ch;
        }
    }
    flops += (in_ch * h * w) as u64; // global average pool
    flops += 2 * (in_ch * spec.num_classes) as u64;
    Ok(flops)
}
