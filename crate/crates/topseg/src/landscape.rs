//! Persistence landscapes: fixed-length vectorizations of diagrams.
//!
//! Each birth–death pair induces a tent function; the k-th landscape layer
//! is the pointwise k-th maximum over all tents, sampled on a uniform grid.
//! Landscapes of one homological degree form a `K × G` matrix; the H0 and H1
//! matrices of a window concatenate to a `2KG` feature vector.

use crate::error::{Error, Result};
use crate::homology::PersistenceDiagram;

/// Sampled landscape of one homological degree.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeVector {
    /// `layers × grid_len` row-major matrix: `values[k * grid_len + g]`.
    pub values: Vec<f64>,
    /// Number of layers K.
    pub layers: usize,
    /// Number of grid points G.
    pub grid_len: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    /// Homological degree the landscape was computed from: 0 or 1.
    pub homology_dim: u8,
}

impl LandscapeVector {
    /// Value of layer `k` (0-based) at grid index `g`.
    pub fn value(&self, k: usize, g: usize) -> f64 {
        self.values[k * self.grid_len + g]
    }

    /// Grid coordinate of index `g`.
    pub fn grid_point(&self, g: usize) -> f64 {
        let step = (self.grid_max - self.grid_min) / (self.grid_len - 1) as f64;
        self.grid_min + step * g as f64
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.grid_len == other.grid_len
            && self.grid_min == other.grid_min
            && self.grid_max == other.grid_max
    }
}

/// Tent function of a pair: `max(0, min(eps - b, d - eps))`.
pub fn tent(b: f64, d: f64, eps: f64) -> Result<f64> {
    if b > d {
        return Err(Error::InvalidPair { birth: b, death: d });
    }
    Ok((eps - b).min(d - eps).max(0.0))
}

/// Sample the first `layers` landscape layers of one homological degree of a
/// diagram on a uniform grid over `[grid_min, grid_max]` (inclusive
/// endpoints). Grid points covered by fewer than k tents get 0 in layer k.
///
/// Pairs reaching beyond the grid are still evaluated by the tent formula;
/// coordinates are never clamped.
pub fn diagram_to_landscape(
    diagram: &PersistenceDiagram,
    homology_dim: u8,
    layers: usize,
    grid_len: usize,
    grid_min: f64,
    grid_max: f64,
) -> Result<LandscapeVector> {
    if layers < 1 {
        return Err(Error::Config("landscape needs at least one layer".into()));
    }
    if grid_len < 2 {
        return Err(Error::Config("landscape grid needs at least two points".into()));
    }
    if !(grid_min < grid_max) {
        return Err(Error::Config(format!(
            "landscape grid range is empty: [{grid_min}, {grid_max}]"
        )));
    }
    let step = (grid_max - grid_min) / (grid_len - 1) as f64;

    // Per grid point, the current top `layers` tent values, sorted
    // descending; column-major scratch for cache-friendly insertion.
    let mut top = vec![0.0f64; grid_len * layers];
    for pair in diagram.pairs_in_dim(homology_dim) {
        // Tent support is the open interval (b, d); find the covered grid
        // index range and guard against boundary round-off with a > 0 check.
        let lo = (((pair.birth - grid_min) / step).floor() as i64 + 1).max(0) as usize;
        let hi_f = ((pair.death - grid_min) / step).ceil() as i64 - 1;
        if hi_f < lo as i64 {
            continue;
        }
        let hi = (hi_f as usize).min(grid_len - 1);
        for g in lo..=hi {
            let eps = grid_min + step * g as f64;
            let v = (eps - pair.birth).min(pair.death - eps);
            if v <= 0.0 {
                continue;
            }
            let col = &mut top[g * layers..(g + 1) * layers];
            if v > col[layers - 1] {
                let mut k = layers - 1;
                while k > 0 && col[k - 1] < v {
                    col[k] = col[k - 1];
                    k -= 1;
                }
                col[k] = v;
            }
        }
    }

    // Transpose the scratch into the row-major layer layout.
    let mut values = vec![0.0f64; layers * grid_len];
    for g in 0..grid_len {
        for k in 0..layers {
            values[k * grid_len + g] = top[g * layers + k];
        }
    }
    Ok(LandscapeVector {
        values,
        layers,
        grid_len,
        grid_min,
        grid_max,
        homology_dim,
    })
}

/// Element-wise arithmetic mean of landscapes with identical shape and grid.
pub fn mean_landscapes(items: &[LandscapeVector]) -> Result<LandscapeVector> {
    let first = items
        .first()
        .ok_or_else(|| Error::LandscapeMismatch("cannot average zero landscapes".into()))?;
    for lv in &items[1..] {
        if !first.same_shape(lv) || first.homology_dim != lv.homology_dim {
            return Err(Error::LandscapeMismatch(format!(
                "incompatible landscapes: ({}x{}, [{}, {}], dim {}) vs ({}x{}, [{}, {}], dim {})",
                first.layers,
                first.grid_len,
                first.grid_min,
                first.grid_max,
                first.homology_dim,
                lv.layers,
                lv.grid_len,
                lv.grid_min,
                lv.grid_max,
                lv.homology_dim,
            )));
        }
    }
    let mut values = vec![0.0f64; first.values.len()];
    for lv in items {
        for (acc, v) in values.iter_mut().zip(&lv.values) {
            *acc += v;
        }
    }
    let inv = 1.0 / items.len() as f64;
    for v in &mut values {
        *v *= inv;
    }
    Ok(LandscapeVector {
        values,
        ..first.clone()
    })
}

/// Concatenate the H0 and H1 landscapes of a window into one `2KG` vector
/// `[H0 row-major | H1 row-major]`.
pub fn flatten(h0: &LandscapeVector, h1: &LandscapeVector) -> Result<Vec<f64>> {
    if h0.layers != h1.layers || h0.grid_len != h1.grid_len {
        return Err(Error::LandscapeMismatch(format!(
            "flatten shape mismatch: {}x{} vs {}x{}",
            h0.layers, h0.grid_len, h1.layers, h1.grid_len
        )));
    }
    if h0.homology_dim != 0 || h1.homology_dim != 1 {
        return Err(Error::LandscapeMismatch(format!(
            "flatten expects (H0, H1), got dims ({}, {})",
            h0.homology_dim, h1.homology_dim
        )));
    }
    let mut out = Vec::with_capacity(2 * h0.values.len());
    out.extend_from_slice(&h0.values);
    out.extend_from_slice(&h1.values);
    Ok(out)
}

/// Inverse of [`flatten`] given the shared shape and grid of both halves.
pub fn unflatten(
    flat: &[f64],
    layers: usize,
    grid_len: usize,
    grid_min: f64,
    grid_max: f64,
) -> Result<(LandscapeVector, LandscapeVector)> {
    let half = layers * grid_len;
    if flat.len() != 2 * half {
        return Err(Error::LandscapeMismatch(format!(
            "expected {} values ({}x{} per degree), got {}",
            2 * half,
            layers,
            grid_len,
            flat.len()
        )));
    }
    let make = |values: &[f64], homology_dim: u8| LandscapeVector {
        values: values.to_vec(),
        layers,
        grid_len,
        grid_min,
        grid_max,
        homology_dim,
    };
    Ok((make(&flat[..half], 0), make(&flat[half..], 1)))
}
