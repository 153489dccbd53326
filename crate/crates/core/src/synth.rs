//! Deterministic synthetic benchmark generator.
//!
//! Every sample is a pure function of the config seed, keyed per
//! (county, crop, year), so datasets are byte-identical across runs and
//! machines. Yields come from a documented closed form
//!
//! ```text
//! y = y_max(crop) · fertility(county, crop) · g(T̄gs) · h(W)
//!
//! g(T) = exp(-(T - 21)² / (2 · 5.5²))          growing-season temperature
//! h(W) = (W / 700) · exp(1 - W / 700)          available water, mm
//! W    = 10 · mean(soil AWS, cm) + Σ growing-season precip
//! ```
//!
//! with both responses peaking at 1, so `fertility = 1` under optimal
//! temperature and water yields exactly `y_max`. The generated tensors carry
//! all the oracle's drivers (temperature and precipitation in the climate
//! channels, AWS in the soil channels, fertility via NIR amplitude and the
//! water-supply/drainage soil channels), so a perfect fit is achievable from
//! the model's inputs in the noiseless limit.

use crate::data::{
    validate_sample, write_sample_dir, CountyCropSample, DatasetManifest, ManifestEntry,
};
use crate::rng;
use crate::sampling::{sample_stratified, stratify_pixels, nir_temporal_mean, SampleKey, StrataPlan};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Month lengths of the 365-day no-leap calendar.
pub const MONTH_LEN: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// Growing season: April through September, 0-based day-of-year 90..=272.
pub const SEASON_FIRST_DAY: usize = 90;
pub const SEASON_LAST_DAY: usize = 272;

pub const TEMP_OPT_C: f64 = 21.0;
pub const TEMP_WIDTH_C: f64 = 5.5;
pub const WATER_OPT_MM: f64 = 700.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Dataset(#[from] crate::data::manifest::DatasetError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_counties: usize,
    pub n_crops: usize,
    pub years: Vec<i32>,
    /// Inclusive range of 30 m pixels per sample (before any budget cap).
    pub pixels_n: (usize, usize),
    /// Inclusive range of 1000 m climate pixels per sample.
    pub pixels_m: (usize, usize),
    /// Label noise sd as a fraction of the crop's y_max (0 disables noise).
    pub noise_frac: f64,
    pub seed: u64,
    /// Pixel budget: pools larger than `target_k` are reduced with the
    /// stratified sampler on temporal-mean NIR.
    pub strata: StrataPlan,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_counties: 6,
            n_crops: 8,
            years: (2008..=2022).collect(),
            pixels_n: (6, 12),
            pixels_m: (1, 3),
            noise_frac: 0.05,
            seed: 0,
            strata: StrataPlan::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if self.n_counties < 1 || self.n_crops < 1 {
            return bad(format!(
                "need at least one county and crop, got {}x{}",
                self.n_counties, self.n_crops
            ));
        }
        if self.years.is_empty() {
            return bad("years list is empty".into());
        }
        if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
            return bad(format!("noise fraction {} must be >= 0", self.noise_frac));
        }
        for (name, (lo, hi)) in [("pixels_n", self.pixels_n), ("pixels_m", self.pixels_m)] {
            if lo < 1 || hi < lo {
                return bad(format!("{name} range ({lo}, {hi}) invalid"));
            }
        }
        Ok(())
    }
}

/// Everything needed to recompute a label: global latents plus per-sample
/// oracle value and realized noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentGround {
    pub county_names: Vec<String>,
    pub crop_names: Vec<String>,
    /// Per crop, t/ha, log-spaced over [2, 60].
    pub y_max: Vec<f64>,
    /// Per crop, peak growth month in 4..=9 (1-based).
    pub peak_month: Vec<usize>,
    /// Per (county, crop), in [0.35, 1].
    pub fertility: Vec<Vec<f64>>,
    /// Per (county, crop) available water storage, cm.
    pub aws_cm: Vec<Vec<f64>>,
    /// Parallel to the manifest entries.
    pub samples: Vec<SampleLatent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLatent {
    pub county: usize,
    pub crop: usize,
    pub year: i32,
    /// Closed-form yield before noise, t/ha.
    pub oracle_y: f64,
    /// label - oracle_y (realized noise after the nonnegativity clamp).
    pub noise_delta: f64,
}

/// Season-aggregated climate drivers read back from a climate tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClimateAggregates {
    /// Growing-season mean of (tmin+tmax)/2 over days and pixels, °C.
    pub t_mean_gs: f64,
    /// Growing-season total precipitation (cross-pixel daily means), mm.
    pub precip_sum_gs: f64,
}

pub fn temperature_response(t_c: f64) -> f64 {
    let d = t_c - TEMP_OPT_C;
    (-d * d / (2.0 * TEMP_WIDTH_C * TEMP_WIDTH_C)).exp()
}

pub fn water_response(w_mm: f64) -> f64 {
    let r = w_mm / WATER_OPT_MM;
    r * (1.0 - r).exp()
}

/// Total plant-available water: AWS (cm → mm) plus season precipitation.
pub fn water_mm(aws_cm_mean: f64, precip_sum_gs: f64) -> f64 {
    10.0 * aws_cm_mean + precip_sum_gs
}

/// Reads the oracle's climate drivers out of a [365, 8, M] climate tensor.
pub fn climate_aggregates(climate: &Tensor) -> ClimateAggregates {
    let m = climate.shape[2];
    let chan_day_mean = |chan: usize, day: usize| -> f64 {
        let base = (day * 8 + chan) * m;
        climate.data[base..base + m].iter().sum::<f64>() / m as f64
    };
    let mut t_sum = 0.0;
    let mut p_sum = 0.0;
    for day in SEASON_FIRST_DAY..=SEASON_LAST_DAY {
        let tmin = chan_day_mean(crate::data::CLIM_TMIN, day);
        let tmax = chan_day_mean(crate::data::CLIM_TMAX, day);
        t_sum += 0.5 * (tmin + tmax);
        p_sum += chan_day_mean(crate::data::CLIM_PRCP, day);
    }
    let days = (SEASON_LAST_DAY - SEASON_FIRST_DAY + 1) as f64;
    ClimateAggregates {
        t_mean_gs: t_sum / days,
        precip_sum_gs: p_sum,
    }
}

/// Mean of the soil AWS channel, cm. Input shape [1, 5, N].
pub fn soil_aws_mean(soil: &Tensor) -> f64 {
    let n = soil.shape[2];
    let base = crate::data::SOIL_AWS * n;
    soil.data[base..base + n].iter().sum::<f64>() / n as f64
}

/// The closed-form yield, t/ha.
pub fn oracle_yield(
    y_max: f64,
    fertility: f64,
    aws_cm_mean: f64,
    agg: &ClimateAggregates,
) -> f64 {
    y_max
        * fertility
        * temperature_response(agg.t_mean_gs)
        * water_response(water_mm(aws_cm_mean, agg.precip_sum_gs))
}

const CROP_NAMES: &[&str] = &[
    "almonds", "walnuts", "pistachios", "wine grapes", "table grapes", "raisins", "oranges",
    "lemons", "grapefruit", "tangerines", "processing tomatoes", "fresh tomatoes", "lettuce",
    "romaine", "strawberries", "broccoli", "carrots", "celery", "spinach", "cauliflower",
    "onions", "garlic", "sweet potatoes", "potatoes", "rice", "wheat", "corn grain",
    "corn silage", "cotton", "alfalfa", "barley", "oats", "safflower", "sunflower", "dry beans",
    "peaches", "nectarines", "plums", "prunes", "apricots", "cherries", "apples", "pears",
    "olives", "avocados", "figs", "kiwifruit", "pomegranates", "dates", "raspberries",
    "blueberries", "blackberries", "watermelons", "cantaloupes", "honeydew", "pumpkins",
    "squash", "cucumbers", "bell peppers", "chili peppers", "eggplant", "asparagus",
    "artichokes", "cabbage", "kale", "leeks", "radishes", "turnips", "beets", "peas", "mint",
    "hops",
];

const COUNTY_NAMES: &[&str] = &[
    "alameda", "butte", "colusa", "fresno", "glenn", "imperial", "kern", "kings", "madera",
    "merced", "monterey", "napa", "riverside", "sacramento", "san benito", "san joaquin",
    "san luis obispo", "santa barbara", "santa clara", "solano", "sonoma", "stanislaus",
    "sutter", "tehama", "tulare", "ventura", "yolo", "yuba",
];

pub fn crop_name(k: usize) -> String {
    if k < CROP_NAMES.len() {
        CROP_NAMES[k].to_string()
    } else {
        format!("crop {k:03}")
    }
}

pub fn county_name(i: usize) -> String {
    if i < COUNTY_NAMES.len() {
        COUNTY_NAMES[i].to_string()
    } else {
        format!("county {i:03}")
    }
}

/// Per-crop ceiling yields, log-spaced over [2, 60] t/ha so the generated
/// labels span two orders of magnitude across crops.
pub fn y_max_for(k: usize, n_crops: usize) -> f64 {
    if n_crops <= 1 {
        return 2.0;
    }
    let frac = k as f64 / (n_crops - 1) as f64;
    2.0 * 30.0f64.powf(frac)
}

fn global_latents(cfg: &SynthConfig) -> LatentGround {
    let county_names: Vec<String> = (0..cfg.n_counties).map(county_name).collect();
    let crop_names: Vec<String> = (0..cfg.n_crops).map(crop_name).collect();
    let y_max: Vec<f64> = (0..cfg.n_crops).map(|k| y_max_for(k, cfg.n_crops)).collect();
    let peak_month: Vec<usize> = crop_names
        .iter()
        .map(|name| {
            let mut r = rng::stream(cfg.seed, "phenology", &[name]);
            4 + rng::below(&mut r, 6) as usize // 4..=9
        })
        .collect();
    let mut fertility = Vec::with_capacity(cfg.n_counties);
    let mut aws_cm = Vec::with_capacity(cfg.n_counties);
    for county in &county_names {
        let mut frow = Vec::with_capacity(cfg.n_crops);
        let mut arow = Vec::with_capacity(cfg.n_crops);
        for crop in &crop_names {
            let mut rf = rng::stream(cfg.seed, "fertility", &[county, crop]);
            frow.push(rng::uniform(&mut rf, 0.35, 1.0));
            let mut ra = rng::stream(cfg.seed, "soil-aws", &[county, crop]);
            arow.push(rng::uniform(&mut ra, 5.0, 35.0));
        }
        fertility.push(frow);
        aws_cm.push(arow);
    }
    LatentGround {
        county_names,
        crop_names,
        y_max,
        peak_month,
        fertility,
        aws_cm,
        samples: Vec::new(),
    }
}

/// Daily weather curves for one (county, year); pixels add small offsets.
struct WeatherDriver {
    t_mid: f64,
    amp: f64,
    spread: f64,
    p_scale: f64,
}

impl WeatherDriver {
    fn draw(seed: u64, county: &str, year: i32) -> Self {
        let mut r = rng::stream(seed, "climate-driver", &[county, &year.to_string()]);
        WeatherDriver {
            t_mid: rng::uniform(&mut r, 14.0, 26.0),
            amp: rng::uniform(&mut r, 6.0, 10.0),
            spread: rng::uniform(&mut r, 8.0, 12.0),
            p_scale: rng::uniform(&mut r, 0.5, 6.0),
        }
    }

    fn tmax(&self, day: usize) -> f64 {
        let phase = (day as f64 - 196.0) / 365.0 * std::f64::consts::TAU;
        self.t_mid + self.spread * 0.5 + self.amp * phase.cos()
    }

    fn wet_weight(&self, day: usize) -> f64 {
        let phase = (day as f64 - 15.0) / 365.0 * std::f64::consts::TAU;
        1.0 + 0.8 * phase.cos()
    }
}

/// Gaussian bump over months centered on the crop's peak month (1-based).
fn season_bump(month0: usize, peak_month: usize) -> f64 {
    let d = (month0 + 1) as f64 - peak_month as f64;
    (-d * d / (2.0 * 1.5 * 1.5)).exp()
}

fn generate_climate(
    cfg: &SynthConfig,
    drv: &WeatherDriver,
    county: &str,
    crop: &str,
    year: i32,
    m: usize,
) -> Tensor {
    use crate::data::*;
    let mut r = rng::stream(
        cfg.seed,
        "climate-pixels",
        &[county, crop, &year.to_string()],
    );
    let pixel_toff: Vec<f64> = (0..m).map(|_| rng::normal(&mut r, 0.0, 0.3)).collect();
    let pixel_pscale: Vec<f64> = (0..m)
        .map(|_| (1.0 + rng::normal(&mut r, 0.0, 0.05)).max(0.0))
        .collect();
    let mut data = vec![0.0; 365 * 8 * m];
    let at = |day: usize, chan: usize, px: usize| (day * 8 + chan) * m + px;
    let set = move |data: &mut Vec<f64>, day: usize, chan: usize, px: usize, v: f64| {
        let idx = at(day, chan, px);
        data[idx] = v;
    };
    for day in 0..365 {
        let tmax_c = drv.tmax(day) + rng::normal(&mut r, 0.0, 0.4);
        let tmin_c = tmax_c - drv.spread + rng::normal(&mut r, 0.0, 0.3);
        let prcp = drv.p_scale * drv.wet_weight(day) * (-rng::uniform(&mut r, f64::EPSILON, 1.0).ln());
        let sol = (day as f64 - 172.0) / 365.0 * std::f64::consts::TAU;
        let dayl = 43_200.0 + 10_800.0 * sol.cos();
        let srad = 250.0 + 120.0 * sol.cos() + rng::normal(&mut r, 0.0, 8.0);
        let vp = (1.2 + 0.5 * sol.cos() + rng::normal(&mut r, 0.0, 0.05)).max(0.05);
        let snow = (-tmin_c).max(0.0) * 1.5;
        let pet = (1.5 + 3.5 * sol.cos() + rng::normal(&mut r, 0.0, 0.2)).max(0.0);
        for px in 0..m {
            let toff = pixel_toff[px];
            set(&mut data, day, CLIM_TMIN, px, tmin_c + toff);
            set(&mut data, day, CLIM_TMAX, px, tmax_c + toff);
            set(&mut data, day, CLIM_PRCP, px, prcp * pixel_pscale[px]);
            set(&mut data, day, CLIM_DAYL, px, dayl);
            set(&mut data, day, CLIM_SRAD, px, srad);
            set(&mut data, day, CLIM_VP, px, vp);
            set(&mut data, day, CLIM_SNOW, px, snow);
            set(&mut data, day, CLIM_PET, px, pet);
        }
    }
    Tensor::new(vec![365, 8, m], data).expect("climate layout")
}

fn generate_soil(
    cfg: &SynthConfig,
    county_idx: usize,
    county: &str,
    crop: &str,
    year: i32,
    fertility: f64,
    aws_cm: f64,
    n: usize,
) -> Tensor {
    use crate::data::*;
    let mut r = rng::stream(cfg.seed, "soil-pixels", &[county, crop, &year.to_string()]);
    let slope_base = rng::uniform(&mut r, 0.0, 15.0);
    let mut data = vec![0.0; 5 * n];
    for px in 0..n {
        let aws = (aws_cm + rng::normal(&mut r, 0.0, 1.0)).clamp(1.0, 60.0);
        let slope = (slope_base + rng::normal(&mut r, 0.0, 0.5)).max(0.0);
        let water_supply = (150.0 + 600.0 * fertility + rng::normal(&mut r, 0.0, 10.0)).max(0.0);
        let f_jit = fertility + rng::normal(&mut r, 0.0, 0.05);
        let drainage = (5.0 * f_jit).round().clamp(0.0, 5.0);
        let hydrologic = (county_idx % 4) as f64;
        data[SOIL_AWS * n + px] = aws;
        data[SOIL_SLOPE * n + px] = slope;
        data[SOIL_WATER_SUPPLY * n + px] = water_supply;
        data[SOIL_DRAINAGE * n + px] = drainage;
        data[SOIL_HYDROLOGIC * n + px] = hydrologic;
    }
    Tensor::new(vec![1, 5, n], data).expect("soil layout")
}

fn generate_landsat(
    cfg: &SynthConfig,
    county: &str,
    crop: &str,
    year: i32,
    fertility: f64,
    peak_month: usize,
    n: usize,
) -> Tensor {
    let mut r = rng::stream(
        cfg.seed,
        "landsat-pixels",
        &[county, crop, &year.to_string()],
    );
    let vigor: Vec<f64> = (0..n)
        .map(|_| (fertility + rng::normal(&mut r, 0.0, 0.05)).clamp(0.05, 1.2))
        .collect();
    let moisture = rng::uniform(&mut r, 0.2, 0.8);
    let mut data = vec![0.0; 12 * 6 * n];
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    for month in 0..12 {
        let bump = season_bump(month, peak_month);
        for px in 0..n {
            let v = vigor[px];
            let noise = |r: &mut ChaCha8Rng, sd: f64| rng::normal(r, 0.0, sd);
            let blue = clamp01(0.08 + 0.02 * bump + noise(&mut r, 0.005));
            let green = clamp01(0.12 + 0.03 * v * bump + noise(&mut r, 0.008));
            let red = clamp01(0.25 - 0.12 * v * bump + noise(&mut r, 0.01));
            let nir = clamp01(0.15 + 0.55 * v * bump + noise(&mut r, 0.01));
            let swir1 = clamp01(0.30 - 0.10 * moisture * bump + noise(&mut r, 0.01));
            let swir2 = clamp01(0.22 - 0.06 * moisture * bump + noise(&mut r, 0.01));
            for (chan, val) in [blue, green, red, nir, swir1, swir2].into_iter().enumerate() {
                data[(month * 6 + chan) * n + px] = val;
            }
        }
    }
    Tensor::new(vec![12, 6, n], data).expect("landsat layout")
}

fn generate_et(
    cfg: &SynthConfig,
    county: &str,
    crop: &str,
    year: i32,
    gh: f64,
    peak_month: usize,
    n: usize,
) -> Tensor {
    let mut r = rng::stream(cfg.seed, "et-pixels", &[county, crop, &year.to_string()]);
    let mut data = vec![0.0; 12 * n];
    for month in 0..12 {
        let level = (15.0 + 95.0 * gh) * (0.35 + 0.65 * season_bump(month, peak_month));
        for px in 0..n {
            data[month * n + px] = (level + rng::normal(&mut r, 0.0, 2.0)).max(0.0);
        }
    }
    Tensor::new(vec![12, 1, n], data).expect("et layout")
}

/// Applies the stratified pixel budget to the 30 m modalities when the pool
/// exceeds the plan's target. Keeps landsat/et/soil pixel axes aligned.
fn apply_pixel_budget(
    landsat: Tensor,
    et: Tensor,
    soil: Tensor,
    plan: &StrataPlan,
    key: &SampleKey,
) -> (Tensor, Tensor, Tensor) {
    let n = landsat.shape[2];
    if n <= plan.target_k || n < plan.num_strata {
        return (landsat, et, soil);
    }
    let stat = nir_temporal_mean(&landsat);
    let strata = stratify_pixels(&stat, plan).expect("pool large enough");
    let keep = sample_stratified(&strata, plan, key);
    (
        take_pixels(&landsat, &keep),
        take_pixels(&et, &keep),
        take_pixels(&soil, &keep),
    )
}

/// Selects pixel columns (last axis) by index.
pub fn take_pixels(t: &Tensor, keep: &[usize]) -> Tensor {
    let n = *t.shape.last().unwrap();
    let lanes = t.numel() / n;
    let mut shape = t.shape.clone();
    *shape.last_mut().unwrap() = keep.len();
    let mut data = Vec::with_capacity(lanes * keep.len());
    for lane in 0..lanes {
        let base = lane * n;
        for &k in keep {
            data.push(t.data[base + k]);
        }
    }
    Tensor::new(shape, data).expect("pixel subset layout")
}

/// Generates one (county, crop, year) sample plus its latent record.
pub fn generate_sample(
    cfg: &SynthConfig,
    latent: &LatentGround,
    county_idx: usize,
    crop_idx: usize,
    year: i32,
) -> (CountyCropSample, SampleLatent) {
    let county = latent.county_names[county_idx].clone();
    let crop = latent.crop_names[crop_idx].clone();
    let ystr = year.to_string();
    let fertility = latent.fertility[county_idx][crop_idx];
    let aws = latent.aws_cm[county_idx][crop_idx];
    let peak = latent.peak_month[crop_idx];
    let y_max = latent.y_max[crop_idx];

    let mut rp = rng::stream(cfg.seed, "pixel-counts", &[&county, &crop, &ystr]);
    let n = cfg.pixels_n.0 + rng::below(&mut rp, (cfg.pixels_n.1 - cfg.pixels_n.0 + 1) as u64) as usize;
    let m = cfg.pixels_m.0 + rng::below(&mut rp, (cfg.pixels_m.1 - cfg.pixels_m.0 + 1) as u64) as usize;

    let drv = WeatherDriver::draw(cfg.seed, &county, year);
    let climate = generate_climate(cfg, &drv, &county, &crop, year, m);
    let soil = generate_soil(cfg, county_idx, &county, &crop, year, fertility, aws, n);
    let landsat = generate_landsat(cfg, &county, &crop, year, fertility, peak, n);

    let agg = climate_aggregates(&climate);
    let aws_mean_pre = soil_aws_mean(&soil);
    let gh = temperature_response(agg.t_mean_gs)
        * water_response(water_mm(aws_mean_pre, agg.precip_sum_gs));
    let et = generate_et(cfg, &county, &crop, year, gh, peak, n);

    let key = SampleKey {
        county: &county,
        crop: crop_idx as u32,
        year,
    };
    let (landsat, et, soil) = apply_pixel_budget(landsat, et, soil, &cfg.strata, &key);
    let n = landsat.shape[2];

    // The oracle reads the *stored* tensors, so recomputation from disk is
    // exact even after the pixel budget trims the soil AWS mean.
    let aws_mean = soil_aws_mean(&soil);
    let oracle_y = oracle_yield(y_max, fertility, aws_mean, &agg);
    let mut rn = rng::stream(cfg.seed, "label-noise", &[&county, &crop, &ystr]);
    let eps = if cfg.noise_frac > 0.0 {
        rng::normal(&mut rn, 0.0, cfg.noise_frac * y_max)
    } else {
        0.0
    };
    let label = (oracle_y + eps).max(0.0);

    let sample = CountyCropSample {
        county_id: county,
        crop_code: crop_idx as u32,
        crop_name: crop,
        year,
        landsat,
        climate,
        et,
        soil,
        yield_label: label,
        n_pixels: n,
        m_pixels: m,
    };
    let rec = SampleLatent {
        county: county_idx,
        crop: crop_idx,
        year,
        oracle_y,
        noise_delta: label - oracle_y,
    };
    (sample, rec)
}

/// A fully generated dataset held in memory (tests and small runs).
#[derive(Debug)]
pub struct GeneratedDataset {
    pub samples: Vec<CountyCropSample>,
    pub latent: LatentGround,
}

/// Generates all (county, crop, year) samples in deterministic index order.
pub fn generate(cfg: &SynthConfig) -> Result<GeneratedDataset, SynthError> {
    cfg.validate()?;
    let mut latent = global_latents(cfg);
    let mut years = cfg.years.clone();
    years.sort_unstable();
    let mut samples = Vec::with_capacity(cfg.n_counties * cfg.n_crops * years.len());
    for county_idx in 0..cfg.n_counties {
        for crop_idx in 0..cfg.n_crops {
            for &year in &years {
                let (s, rec) = generate_sample(cfg, &latent, county_idx, crop_idx, year);
                debug_assert!(validate_sample(&s).is_empty());
                latent.samples.push(rec);
                samples.push(s);
            }
        }
    }
    Ok(GeneratedDataset { samples, latent })
}

/// Generates and writes a dataset directory: sample dirs, manifest.jsonl,
/// meta.json, and latent.json (the oracle's ground truth).
pub fn write_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let mut latent = global_latents(cfg);
    let mut years = cfg.years.clone();
    years.sort_unstable();
    let mut manifest = DatasetManifest::new(out_dir.to_path_buf(), cfg.seed);
    let mut idx = 0usize;
    for county_idx in 0..cfg.n_counties {
        for crop_idx in 0..cfg.n_crops {
            for &year in &years {
                let (s, rec) = generate_sample(cfg, &latent, county_idx, crop_idx, year);
                let rel = format!("samples/{idx:05}");
                write_sample_dir(&out_dir.join(&rel), &s)?;
                manifest.entries.push(ManifestEntry {
                    county: s.county_id.clone(),
                    crop: s.crop_code,
                    crop_name: s.crop_name.clone(),
                    year: s.year,
                    path: rel,
                    n_pixels: s.n_pixels,
                    m_pixels: s.m_pixels,
                    yield_t_ha: s.yield_label,
                });
                latent.samples.push(rec);
                idx += 1;
            }
        }
    }
    manifest.write()?;
    let latent_path = out_dir.join("latent.json");
    let text = serde_json::to_string_pretty(&latent).expect("latent serializes");
    std::fs::write(&latent_path, text).map_err(|source| {
        SynthError::Dataset(crate::data::manifest::DatasetError::Io {
            path: latent_path.display().to_string(),
            source,
        })
    })?;
    Ok(manifest)
}

pub fn read_latent(dataset_dir: &Path) -> Result<LatentGround, SynthError> {
    let path = dataset_dir.join("latent.json");
    let text = std::fs::read_to_string(&path).map_err(|source| {
        SynthError::Dataset(crate::data::manifest::DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    })?;
    serde_json::from_str(&text).map_err(|source| {
        SynthError::Dataset(crate::data::manifest::DatasetError::Json {
            path: path.display().to_string(),
            line: 1,
            source,
        })
    })
}
