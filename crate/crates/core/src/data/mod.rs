//! Domain data model: the five input modalities, county-crop samples,
//! categorical soil encodings, and on-disk storage (binary tensor container
//! plus a JSON-lines dataset manifest).

mod container;
pub mod manifest;

pub use container::{parse_container, read_container, write_container, ContainerError};
pub use manifest::{load_sample_dir, write_sample_dir, DatasetError, DatasetManifest, ManifestEntry, MetaInfo};

use crate::tensor::Tensor;
use thiserror::Error;

/// Which per-sample pixel count (if any) sizes a modality's last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelAxis {
    /// Sized by the 30 m pixel sample (Landsat / ET / soil).
    PerSampleN,
    /// Sized by the 1000 m pixel sample (climate).
    PerSampleM,
    /// No pixel axis (crop identity).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Landsat,
    Climate,
    Et,
    Soil,
    CropId,
}

/// Declares the fixed (time, channel) layout and units of one input modality.
#[derive(Debug, Clone)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub name: &'static str,
    pub time_steps: usize,
    pub channels: usize,
    pub pixel_axis: PixelAxis,
    pub units: &'static [&'static str],
}

pub const LANDSAT_UNITS: [&str; 6] = [
    "reflectance (blue)",
    "reflectance (green)",
    "reflectance (red)",
    "reflectance (nir)",
    "reflectance (swir1)",
    "reflectance (swir2)",
];

pub const CLIMATE_UNITS: [&str; 8] = [
    "degC (tmin)",
    "degC (tmax)",
    "mm (prcp)",
    "seconds (dayl)",
    "W/m2 (srad)",
    "kPa (vp)",
    "mm (snow)",
    "mm (pet)",
];

pub const SOIL_UNITS: [&str; 5] = [
    "cm (available water storage)",
    "percent (slope gradient)",
    "mm (water supply)",
    "code (drainage class)",
    "code (hydrologic group)",
];

/// Channel indices into the soil modality.
pub const SOIL_AWS: usize = 0;
pub const SOIL_SLOPE: usize = 1;
pub const SOIL_WATER_SUPPLY: usize = 2;
pub const SOIL_DRAINAGE: usize = 3;
pub const SOIL_HYDROLOGIC: usize = 4;

/// Climate channel indices.
pub const CLIM_TMIN: usize = 0;
pub const CLIM_TMAX: usize = 1;
pub const CLIM_PRCP: usize = 2;
pub const CLIM_DAYL: usize = 3;
pub const CLIM_SRAD: usize = 4;
pub const CLIM_VP: usize = 5;
pub const CLIM_SNOW: usize = 6;
pub const CLIM_PET: usize = 7;

/// The five modalities, in canonical order.
pub fn modality_specs() -> [ModalitySpec; 5] {
    [
        ModalitySpec {
            modality: Modality::Landsat,
            name: "landsat",
            time_steps: 12,
            channels: 6,
            pixel_axis: PixelAxis::PerSampleN,
            units: &LANDSAT_UNITS,
        },
        ModalitySpec {
            modality: Modality::Climate,
            name: "climate",
            time_steps: 365,
            channels: 8,
            pixel_axis: PixelAxis::PerSampleM,
            units: &CLIMATE_UNITS,
        },
        ModalitySpec {
            modality: Modality::Et,
            name: "et",
            time_steps: 12,
            channels: 1,
            pixel_axis: PixelAxis::PerSampleN,
            units: &["mm (evapotranspiration)"],
        },
        ModalitySpec {
            modality: Modality::Soil,
            name: "soil",
            time_steps: 1,
            channels: 5,
            pixel_axis: PixelAxis::PerSampleN,
            units: &SOIL_UNITS,
        },
        ModalitySpec {
            modality: Modality::CropId,
            name: "crop_id",
            time_steps: 1,
            channels: 1,
            pixel_axis: PixelAxis::None,
            units: &["code (crop identity)"],
        },
    ]
}

/// All modality tensors plus the yield label for one (county, crop, year).
#[derive(Debug, Clone)]
pub struct CountyCropSample {
    pub county_id: String,
    pub crop_code: u32,
    pub crop_name: String,
    pub year: i32,
    /// [12, 6, N]
    pub landsat: Tensor,
    /// [365, 8, M]
    pub climate: Tensor,
    /// [12, 1, N]
    pub et: Tensor,
    /// [1, 5, N]
    pub soil: Tensor,
    /// tons per hectare, nonnegative
    pub yield_label: f64,
    pub n_pixels: usize,
    pub m_pixels: usize,
}

/// One failed invariant of a [`CountyCropSample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub expected: String,
    pub actual: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: expected {}, got {}",
            self.field, self.expected, self.actual
        )
    }
}

/// Year-range rule to apply during validation. The 2008-2022 benchmark skips
/// 2012 (single-sensor year); synthetic datasets may use any years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum YearPolicy {
    #[default]
    AnyYear,
    BenchmarkYears,
}

fn check_shape(out: &mut Vec<Violation>, field: &str, t: &Tensor, want: &[usize]) {
    if t.shape != want {
        out.push(Violation {
            field: field.to_string(),
            expected: format!("shape {want:?}"),
            actual: format!("shape {:?}", t.shape),
        });
    }
    if !t.is_finite() {
        out.push(Violation {
            field: field.to_string(),
            expected: "all values finite".to_string(),
            actual: "non-finite value present".to_string(),
        });
    }
}

/// Checks every shape/range invariant; the empty list means the sample is
/// well-formed. Violations are data, not errors.
pub fn validate_sample(s: &CountyCropSample) -> Vec<Violation> {
    validate_sample_with(s, YearPolicy::AnyYear)
}

pub fn validate_sample_with(s: &CountyCropSample, years: YearPolicy) -> Vec<Violation> {
    let mut v = Vec::new();
    let n = s.n_pixels;
    let m = s.m_pixels;
    if n < 1 {
        v.push(Violation {
            field: "n_pixels".into(),
            expected: ">= 1".into(),
            actual: n.to_string(),
        });
    }
    if m < 1 {
        v.push(Violation {
            field: "m_pixels".into(),
            expected: ">= 1".into(),
            actual: m.to_string(),
        });
    }
    check_shape(&mut v, "landsat", &s.landsat, &[12, 6, n]);
    check_shape(&mut v, "climate", &s.climate, &[365, 8, m]);
    check_shape(&mut v, "et", &s.et, &[12, 1, n]);
    check_shape(&mut v, "soil", &s.soil, &[1, 5, n]);
    if !(s.yield_label >= 0.0 && s.yield_label.is_finite()) {
        v.push(Violation {
            field: "yield_label".into(),
            expected: "finite and >= 0 t/ha".into(),
            actual: s.yield_label.to_string(),
        });
    }
    if years == YearPolicy::BenchmarkYears && !((2008..=2022).contains(&s.year) && s.year != 2012)
    {
        v.push(Violation {
            field: "year".into(),
            expected: "2008..=2022 excluding 2012".into(),
            actual: s.year.to_string(),
        });
    }
    v
}

/// The six canonical SSURGO drainage classes, best-drained first, with their
/// numeric codes (equal unit steps from 5.0 down to 0.0).
pub const DRAINAGE_CLASSES: [(&str, f64); 6] = [
    ("Excessively drained", 5.0),
    ("Well drained", 4.0),
    ("Moderately well drained", 3.0),
    ("Somewhat poorly drained", 2.0),
    ("Poorly drained", 1.0),
    ("Very poorly drained", 0.0),
];

pub const HYDROLOGIC_GROUPS: [(&str, f64); 4] =
    [("A", 0.0), ("B", 1.0), ("C", 2.0), ("D", 3.0)];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("unknown drainage class {label:?}; valid classes: {valid}", valid = valid_drainage_list())]
    UnknownDrainage { label: String },
    #[error("unknown hydrologic soil group {label:?}; valid groups: A, B, C, D")]
    UnknownHydrologicGroup { label: String },
}

fn valid_drainage_list() -> String {
    DRAINAGE_CLASSES
        .iter()
        .map(|(n, _)| format!("{n:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Numeric code for a SSURGO drainage class (better drained ⇒ larger code).
pub fn encode_drainage(class_label: &str) -> Result<f64, EncodingError> {
    DRAINAGE_CLASSES
        .iter()
        .find(|(n, _)| *n == class_label)
        .map(|(_, v)| *v)
        .ok_or_else(|| EncodingError::UnknownDrainage { label: class_label.to_string() })
}

/// Numeric code for a hydrologic soil group letter.
pub fn encode_hydrologic_group(group: &str) -> Result<f64, EncodingError> {
    HYDROLOGIC_GROUPS
        .iter()
        .find(|(n, _)| *n == group)
        .map(|(_, v)| *v)
        .ok_or_else(|| EncodingError::UnknownHydrologicGroup { label: group.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sample(n: usize, m: usize) -> CountyCropSample {
        CountyCropSample {
            county_id: "alameda".into(),
            crop_code: 0,
            crop_name: "almonds".into(),
            year: 2010,
            landsat: Tensor::filled(vec![12, 6, n], 0.25),
            climate: Tensor::filled(vec![365, 8, m], 1.0),
            et: Tensor::filled(vec![12, 1, n], 40.0),
            soil: Tensor::filled(vec![1, 5, n], 2.0),
            yield_label: 3.5,
            n_pixels: n,
            m_pixels: m,
        }
    }

    #[test]
    fn drainage_codes_are_exact() {
        assert_eq!(encode_drainage("Excessively drained").unwrap(), 5.0);
        assert_eq!(encode_drainage("Well drained").unwrap(), 4.0);
        assert_eq!(encode_drainage("Moderately well drained").unwrap(), 3.0);
        assert_eq!(encode_drainage("Somewhat poorly drained").unwrap(), 2.0);
        assert_eq!(encode_drainage("Poorly drained").unwrap(), 1.0);
        assert_eq!(encode_drainage("Very poorly drained").unwrap(), 0.0);
    }

    #[test]
    fn drainage_monotone_in_quality_order() {
        let codes: Vec<f64> = DRAINAGE_CLASSES.iter().map(|(_, v)| *v).collect();
        for w in codes.windows(2) {
            assert!(w[0] > w[1], "better-drained class must get larger code");
        }
    }

    #[test]
    fn unknown_drainage_error_lists_valid_labels() {
        let err = encode_drainage("Swampy").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Swampy"));
        assert!(msg.contains("Excessively drained"));
        assert!(msg.contains("Very poorly drained"));
    }

    #[test]
    fn hydrologic_codes_are_exact() {
        assert_eq!(encode_hydrologic_group("A").unwrap(), 0.0);
        assert_eq!(encode_hydrologic_group("B").unwrap(), 1.0);
        assert_eq!(encode_hydrologic_group("C").unwrap(), 2.0);
        assert_eq!(encode_hydrologic_group("D").unwrap(), 3.0);
        assert!(encode_hydrologic_group("E").is_err());
    }

    #[test]
    fn specs_match_declared_layout() {
        let specs = modality_specs();
        let dims: Vec<(usize, usize)> = specs.iter().map(|s| (s.time_steps, s.channels)).collect();
        assert_eq!(dims, vec![(12, 6), (365, 8), (12, 1), (1, 5), (1, 1)]);
        for s in &specs {
            assert_eq!(s.units.len(), s.channels, "{} units", s.name);
        }
    }

    #[test]
    fn well_formed_sample_validates_clean() {
        assert!(validate_sample(&tiny_sample(4, 2)).is_empty());
    }

    #[test]
    fn wrong_climate_time_steps_is_one_violation() {
        let mut s = tiny_sample(4, 2);
        s.climate = Tensor::filled(vec![366, 8, 2], 1.0);
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "climate");
        assert!(v[0].actual.contains("366"));
    }

    #[test]
    fn negative_yield_is_one_violation() {
        let mut s = tiny_sample(4, 2);
        s.yield_label = -0.1;
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "yield_label");
    }

    #[test]
    fn single_axis_perturbations_are_rejected() {
        for field in 0..4 {
            let mut s = tiny_sample(4, 2);
            match field {
                0 => s.landsat = Tensor::filled(vec![12, 7, 4], 0.0),
                1 => s.climate = Tensor::filled(vec![365, 8, 3], 0.0),
                2 => s.et = Tensor::filled(vec![11, 1, 4], 0.0),
                _ => s.soil = Tensor::filled(vec![1, 5, 5], 0.0),
            }
            assert_eq!(validate_sample(&s).len(), 1, "field {field}");
        }
    }

    #[test]
    fn benchmark_year_policy_rejects_2012_and_range() {
        let mut s = tiny_sample(2, 1);
        s.year = 2012;
        assert!(validate_sample(&s).is_empty());
        assert_eq!(validate_sample_with(&s, YearPolicy::BenchmarkYears).len(), 1);
        s.year = 2007;
        assert_eq!(validate_sample_with(&s, YearPolicy::BenchmarkYears).len(), 1);
        s.year = 2022;
        assert!(validate_sample_with(&s, YearPolicy::BenchmarkYears).is_empty());
    }
}
