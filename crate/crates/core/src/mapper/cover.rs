use serde::{Deserialize, Serialize};

use super::MapperError;

/// Half-width used to widen a degenerate (single-value) lens range.
pub const DEGENERATE_HALF_WIDTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverInterval {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

impl CoverInterval {
    /// Closed-interval membership.
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// `n` equal-length intervals over `[lens_min, lens_max]` where adjacent
/// intervals overlap by exactly fraction `p` of the interval length.
///
/// With length `L = (max - min) / (n - (n - 1) p)` and step `(1 - p) L`, the
/// union is exactly the range.
pub fn build_cover(
    lens_min: f64,
    lens_max: f64,
    n: usize,
    p: f64,
) -> Result<Vec<CoverInterval>, MapperError> {
    if n < 1 {
        return Err(MapperError::InvalidParams("cover_n must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(MapperError::InvalidParams(
            "cover_overlap must lie in [0, 1)".into(),
        ));
    }
    if !(lens_min.is_finite() && lens_max.is_finite()) || lens_min > lens_max {
        return Err(MapperError::InvalidParams(format!(
            "invalid lens range [{lens_min}, {lens_max}]"
        )));
    }
    if lens_min == lens_max {
        return Ok(vec![CoverInterval {
            index: 0,
            lo: lens_min - DEGENERATE_HALF_WIDTH,
            hi: lens_max + DEGENERATE_HALF_WIDTH,
        }]);
    }
    let length = (lens_max - lens_min) / (n as f64 - (n as f64 - 1.0) * p);
    let step = (1.0 - p) * length;
    Ok((0..n)
        .map(|i| {
            let lo = lens_min + i as f64 * step;
            let hi = if i + 1 == n { lens_max } else { lo + length };
            CoverInterval { index: i, lo, hi }
        })
        .collect())
}

/// Indices of the intervals containing `x`.
pub fn intervals_containing(cover: &[CoverInterval], x: f64) -> impl Iterator<Item = usize> + '_ {
    cover.iter().filter(move |iv| iv.contains(x)).map(|iv| iv.index)
}
