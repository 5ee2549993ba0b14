//! Integer resolution sampling and shorter-side bilinear resize.
//!
//! The resize pins one convention: half-pixel centers (source coordinate
//! `(dst + 0.5) * scale - 0.5`) with edge clamping, per-axis scale
//! `in / out`, and round-to-nearest on the longer side. Resizing to the
//! current shorter side is a bit-exact pass-through.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};

/// Inclusive integer range `[l_min, l_max]` for subnet input resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRange {
    pub l_min: usize,
    pub l_max: usize,
}

impl ResolutionRange {
    pub fn validate(&self) -> Result<()> {
        if self.l_min < 1 || self.l_min > self.l_max {
            return Err(Error::Config(format!(
                "input.l_min/l_max: need 1 <= l_min <= l_max, got [{}, {}]",
                self.l_min, self.l_max
            )));
        }
        Ok(())
    }

    /// Default desk-scale range for a given main resolution: the mirror of
    /// widening the low end to about `l_max / 3.5`.
    pub fn default_for(main_resolution: usize) -> Self {
        let l_min = ((main_resolution as f64 / 3.5).round() as usize).max(1);
        ResolutionRange { l_min, l_max: main_resolution }
    }
}

/// Uniform draw from the inclusive range.
pub fn sample_resolution(range: &ResolutionRange, rng: &mut impl Rng) -> Result<usize> {
    range.validate()?;
    Ok(rng.random_range(range.l_min..=range.l_max))
}

/// Resize the shorter side of every image in the batch to `l_s`, keeping the
/// aspect ratio (longer side rounded to nearest).
pub fn resize_shorter_side<F: Elem>(batch: &Array4<F>, l_s: usize) -> Result<Array4<F>> {
    if l_s < 1 {
        return Err(Error::Config("resize target must be >= 1".into()));
    }
    let (b, c, h, w) = batch.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let shorter = h.min(w);
    if l_s == shorter {
        return Ok(batch.clone());
    }
    let (oh, ow) = if h <= w {
        let ow = ((w as f64 * l_s as f64 / h as f64).round() as usize).max(1);
        (l_s, ow)
    } else {
        let oh = ((h as f64 * l_s as f64 / w as f64).round() as usize).max(1);
        (oh, l_s)
    };

    let scale_y = h as f64 / oh as f64;
    let scale_x = w as f64 / ow as f64;
    let mut out = Array4::<F>::zeros((b, c, oh, ow));
    // precompute per-axis source indices and fractions
    let ys: Vec<(usize, usize, f64)> = (0..oh).map(|oy| axis_coords(oy, scale_y, h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|ox| axis_coords(ox, scale_x, w)).collect();
    for bi in 0..b {
        for ci in 0..c {
            let src = batch.index_axis(ndarray::Axis(0), bi);
            let src = src.index_axis(ndarray::Axis(0), ci);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), bi);
            let mut dst = dst.index_axis_mut(ndarray::Axis(0), ci);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = src[[y0, x0]].as_f64();
                    let v01 = src[[y0, x1]].as_f64();
                    let v10 = src[[y1, x0]].as_f64();
                    let v11 = src[[y1, x1]].as_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    dst[[oy, ox]] = F::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

fn axis_coords(o: usize, scale: f64, n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * scale - 0.5;
    let floor = s.floor();
    let frac = s - floor;
    let i0 = floor.max(0.0).min((n - 1) as f64) as usize;
    let i1 = (floor + 1.0).max(0.0).min((n - 1) as f64) as usize;
    (i0, i1, frac)
}
