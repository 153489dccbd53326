//! Field masking and stratified pixel sampling.
//!
//! A 30 m crop mask is reduced to 4-connected fields of at least 10 ha, and a
//! per-pixel statistic (temporal-mean NIR by convention) drives quantile
//! stratification so a fixed-size pixel sample preserves the distribution of
//! the full field.

use crate::rng;
use crate::tensor::Tensor;
use thiserror::Error;

/// One 30 m x 30 m pixel covers 0.09 ha.
pub const PIXEL_AREA_HA: f64 = 0.09;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("mask dimensions must be >= 1, got {width}x{height}")]
    EmptyMask { width: usize, height: usize },
    #[error("mask grid has {actual} cells, expected width*height = {expected}")]
    GridSizeMismatch { expected: usize, actual: usize },
    #[error("crop codes must be nonnegative, found {0}")]
    NegativeCode(i32),
    #[error("{n} pixels cannot fill {num_strata} strata")]
    TooFewPixels { n: usize, num_strata: usize },
    #[error("invalid plan: num_strata {num_strata} and target_k {target_k} (need num_strata >= 1 and target_k >= num_strata)")]
    BadPlan { num_strata: usize, target_k: usize },
    #[error("statistic contains a non-finite value at index {0}")]
    NonFiniteStatistic(usize),
}

/// 2-D integer crop-code raster at 30 m resolution.
#[derive(Debug, Clone)]
pub struct CdlMask {
    grid: Vec<i32>,
    pub width: usize,
    pub height: usize,
    pub nodata: i32,
}

impl CdlMask {
    pub fn new(
        grid: Vec<i32>,
        width: usize,
        height: usize,
        nodata: i32,
    ) -> Result<Self, SamplingError> {
        if width == 0 || height == 0 {
            return Err(SamplingError::EmptyMask { width, height });
        }
        if grid.len() != width * height {
            return Err(SamplingError::GridSizeMismatch {
                expected: width * height,
                actual: grid.len(),
            });
        }
        if let Some(&bad) = grid.iter().find(|&&c| c < 0 && c != nodata) {
            return Err(SamplingError::NegativeCode(bad));
        }
        Ok(CdlMask {
            grid,
            width,
            height,
            nodata,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> i32 {
        self.grid[row * self.width + col]
    }
}

/// One contiguous field: pixel coordinates in row-major scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub pixels: Vec<(usize, usize)>,
}

impl Field {
    pub fn area_ha(&self) -> f64 {
        self.pixels.len() as f64 * PIXEL_AREA_HA
    }
}

/// Smallest pixel count whose area reaches `min_area_ha` (10 ha -> 112 px).
pub fn min_pixels_for_area(min_area_ha: f64) -> usize {
    (min_area_ha / PIXEL_AREA_HA - 1e-9).ceil().max(0.0) as usize
}

/// 4-connected components of `crop_code` pixels with area >= `min_area_ha`.
/// A crop absent from the mask simply yields no fields.
pub fn extract_fields(mask: &CdlMask, crop_code: i32, min_area_ha: f64) -> Vec<Field> {
    let (w, h) = (mask.width, mask.height);
    let min_px = min_pixels_for_area(min_area_ha);
    let mut visited = vec![false; w * h];
    let mut fields = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if visited[start] || mask.grid[start] != crop_code {
            continue;
        }
        // flood fill one component
        let mut pixels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(px) = stack.pop() {
            let (r, c) = (px / w, px % w);
            pixels.push((r, c));
            let mut try_push = |nr: usize, nc: usize| {
                let np = nr * w + nc;
                if !visited[np] && mask.grid[np] == crop_code {
                    visited[np] = true;
                    stack.push(np);
                }
            };
            if r > 0 {
                try_push(r - 1, c);
            }
            if r + 1 < h {
                try_push(r + 1, c);
            }
            if c > 0 {
                try_push(r, c - 1);
            }
            if c + 1 < w {
                try_push(r, c + 1);
            }
        }
        if pixels.len() >= min_px {
            pixels.sort_unstable();
            fields.push(Field { pixels });
        }
    }
    fields
}

/// How pixels are binned and how many are kept.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StrataPlan {
    pub num_strata: usize,
    pub target_k: usize,
    pub seed: u64,
}

impl Default for StrataPlan {
    fn default() -> Self {
        StrataPlan {
            num_strata: 8,
            target_k: 256,
            seed: 0,
        }
    }
}

impl StrataPlan {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.num_strata < 1 || self.target_k < self.num_strata {
            return Err(SamplingError::BadPlan {
                num_strata: self.num_strata,
                target_k: self.target_k,
            });
        }
        Ok(())
    }
}

/// Identifies the (county, crop, year) context whose sampling stream is being
/// drawn; together with the plan seed it fixes every random choice.
#[derive(Debug, Clone)]
pub struct SampleKey<'a> {
    pub county: &'a str,
    pub crop: u32,
    pub year: i32,
}

#[derive(Debug, Clone)]
pub struct StrataAssignment {
    /// Stratum index per pixel, parallel to the statistic array.
    pub stratum_of: Vec<usize>,
    pub num_strata: usize,
}

impl StrataAssignment {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.num_strata];
        for &s in &self.stratum_of {
            c[s] += 1;
        }
        c
    }
}

/// Equal-width quantile binning of the statistic: the pixel at sorted rank r
/// (of n) lands in stratum floor(r * num_strata / n). Runs of equal values
/// stay together in the stratum where the run starts, so a constant statistic
/// degenerates to a single stratum.
pub fn stratify_pixels(
    values: &[f64],
    plan: &StrataPlan,
) -> Result<StrataAssignment, SamplingError> {
    plan.validate()?;
    let n = values.len();
    if n < plan.num_strata {
        return Err(SamplingError::TooFewPixels {
            n,
            num_strata: plan.num_strata,
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(SamplingError::NonFiniteStatistic(i));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut stratum_of = vec![0usize; n];
    let mut prev_val = f64::NAN;
    let mut prev_stratum = 0usize;
    for (rank, &idx) in order.iter().enumerate() {
        let v = values[idx];
        let s = if rank > 0 && v == prev_val {
            prev_stratum
        } else {
            rank * plan.num_strata / n
        };
        stratum_of[idx] = s;
        prev_val = v;
        prev_stratum = s;
    }
    Ok(StrataAssignment {
        stratum_of,
        num_strata: plan.num_strata,
    })
}

/// Largest-remainder apportionment of `k` draws over stratum populations.
/// Sums to exactly min(k, total); each quota is within 1 of the exact
/// proportional share and never exceeds the stratum population.
pub fn allocate_quotas(counts: &[usize], k: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    if k >= n {
        return counts.to_vec();
    }
    let mut quotas: Vec<usize> = Vec::with_capacity(counts.len());
    let mut rems: Vec<(usize, usize)> = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let num = c * k;
        quotas.push(num / n);
        rems.push((num % n, i));
    }
    let assigned: usize = quotas.iter().sum();
    rems.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(k - assigned) {
        quotas[i] += 1;
    }
    quotas
}

/// Draws min(target_k, N) pixel indices: proportional quotas per stratum,
/// uniform without replacement inside each stratum, all randomness from the
/// (seed, county, crop, year) stream. Result is ascending. When N fits the
/// budget, all pixels are returned in original order.
pub fn sample_stratified(
    assignment: &StrataAssignment,
    plan: &StrataPlan,
    key: &SampleKey,
) -> Vec<usize> {
    let n = assignment.stratum_of.len();
    if n <= plan.target_k {
        return (0..n).collect();
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); assignment.num_strata];
    for (idx, &s) in assignment.stratum_of.iter().enumerate() {
        members[s].push(idx);
    }
    let counts: Vec<usize> = members.iter().map(|m| m.len()).collect();
    let quotas = allocate_quotas(&counts, plan.target_k);
    let mut r = rng::stream(
        plan.seed,
        "stratified-sample",
        &[key.county, &key.crop.to_string(), &key.year.to_string()],
    );
    let mut picked = Vec::with_capacity(plan.target_k);
    for (stratum, quota) in quotas.iter().enumerate() {
        picked.extend(rng::sample_without_replacement(
            &mut r,
            &members[stratum],
            *quota,
        ));
    }
    picked.sort_unstable();
    picked
}

/// Per-pixel temporal mean of the Landsat NIR channel: the default
/// stratification statistic (a plant-vigor proxy). Input shape [12, 6, N].
pub fn nir_temporal_mean(landsat: &Tensor) -> Vec<f64> {
    const NIR: usize = 3;
    let t = landsat.shape[0];
    let c = landsat.shape[1];
    let n = landsat.shape[2];
    let mut out = vec![0.0; n];
    for month in 0..t {
        let base = (month * c + NIR) * n;
        for (p, o) in out.iter_mut().enumerate() {
            *o += landsat.data[base + p];
        }
    }
    for o in &mut out {
        *o /= t as f64;
    }
    out
}
