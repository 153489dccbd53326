//! Multi-modal yield model: per-modality set encoders to a shared embedding
//! width, fusion into a monthly token sequence, a causal pre-layernorm
//! transformer encoder, and a shared softplus regression head over months.

mod forward;

pub use forward::{
    align_climate_monthly, bind_frozen, bind_trainable, encode, extract_modality, fuse_tokens,
    month_average_matrix, predict_series, sample_forward, Bound, ForwardStages,
};

use crate::data::{modality_specs, CountyCropSample, Modality, Violation};
use crate::rng;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid sample: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidSample(Vec<Violation>),
    #[error("crop code {code} out of range for a {n_crops}-crop model")]
    CropOutOfRange { code: u32, n_crops: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("fuse_tokens: {which} has shape {actual:?}, expected {expected:?}")]
    FuseShape {
        which: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint i/o at {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint index at {path}: {source}")]
    CheckpointJson {
        path: String,
        source: serde_json::Error,
    },
    #[error("checkpoint missing parameter {name}")]
    MissingParam { name: String },
    #[error("checkpoint parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Container(#[from] crate::data::ContainerError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub months: usize,
    /// Hidden width of the per-pixel scalar MLP in each extractor.
    pub ext_hidden: usize,
    pub n_crops: usize,
    pub dropout: f64,
    pub causal: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Full-size configuration for a dataset with `n_crops` crop codes.
    pub fn new(n_crops: usize) -> Self {
        ModelConfig {
            d_model: 256,
            n_layers: 8,
            n_heads: 6,
            ffn_mult: 4,
            months: 12,
            ext_hidden: 64,
            n_crops,
            dropout: 0.0,
            causal: true,
            ln_eps: 1e-5,
        }
    }

    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny(n_crops: usize) -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 4,
            ext_hidden: 8,
            ..ModelConfig::new(n_crops)
        }
    }

    /// Width of one attention head. 256/6 does not divide evenly; heads get
    /// the floor and concatenate to `attn_dim()`, which the output
    /// projection maps back to `d_model`.
    pub fn head_dim(&self) -> usize {
        (self.d_model / self.n_heads).max(1)
    }

    pub fn attn_dim(&self) -> usize {
        self.head_dim() * self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("months", self.months),
            ("ext_hidden", self.ext_hidden),
            ("n_crops", self.n_crops),
        ] {
            if v < 1 {
                return bad(format!("{name} must be >= 1, got {v}"));
            }
        }
        if self.n_heads > self.d_model {
            return bad(format!(
                "n_heads {} exceeds d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps {} must be > 0", self.ln_eps));
        }
        Ok(())
    }
}

/// Named parameter tensors in a stable order. The order defines checkpoint
/// layout, optimizer state alignment, and tape leaf ids.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.idx(name)].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.entries[i].1
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel counts per modality in `Modality` order, excluding the crop id.
pub fn modality_channels(m: Modality) -> usize {
    modality_specs()
        .iter()
        .find(|s| s.modality == m)
        .map(|s| s.channels)
        .expect("known modality")
}

pub const EXTRACTED_MODALITIES: [(&str, Modality); 4] = [
    ("landsat", Modality::Landsat),
    ("climate", Modality::Climate),
    ("et", Modality::Et),
    ("soil", Modality::Soil),
];

/// Deterministic initialization: projections from U(±1/√fan_in), embeddings
/// from N(0, 0.02) (crop rows renormed to L2 ≤ 10), layernorm gains 1,
/// biases 0.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let uniform_w = |name: &str, rows: usize, cols: usize| {
        let bound = 1.0 / (rows as f64).sqrt();
        let mut r = rng::stream(seed, "init", &[name]);
        let data = (0..rows * cols)
            .map(|_| rng::uniform(&mut r, -bound, bound))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("init shape").with_grad()
    };
    let gauss = |name: &str, rows: usize, cols: usize, sd: f64| {
        let mut r = rng::stream(seed, "init", &[name]);
        let data = (0..rows * cols)
            .map(|_| rng::normal(&mut r, 0.0, sd))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("init shape").with_grad()
    };
    let zeros = |shape: Vec<usize>| Tensor::zeros(shape).with_grad();
    let ones = |shape: Vec<usize>| Tensor::filled(shape, 1.0).with_grad();

    let (d, h) = (cfg.d_model, cfg.ext_hidden);
    for (name, modality) in EXTRACTED_MODALITIES {
        let c = modality_channels(modality);
        p.push(&format!("ext_{name}_w1"), uniform_w(&format!("ext_{name}_w1"), 1, h));
        p.push(&format!("ext_{name}_b1"), zeros(vec![h]));
        p.push(&format!("ext_{name}_w2"), uniform_w(&format!("ext_{name}_w2"), h, h));
        p.push(&format!("ext_{name}_b2"), zeros(vec![h]));
        p.push(
            &format!("ext_{name}_proj_w"),
            uniform_w(&format!("ext_{name}_proj_w"), h, d),
        );
        p.push(&format!("ext_{name}_proj_b"), zeros(vec![d]));
        p.push(
            &format!("fuse_{name}_w"),
            uniform_w(&format!("fuse_{name}_w"), c * d, d),
        );
        p.push(&format!("fuse_{name}_b"), zeros(vec![d]));
    }

    let mut crop = gauss("crop_table", cfg.n_crops, d, 0.02);
    for row in 0..cfg.n_crops {
        let s = &mut crop.data[row * d..(row + 1) * d];
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 10.0 {
            let k = 10.0 / norm;
            s.iter_mut().for_each(|v| *v *= k);
        }
    }
    p.push("crop_table", crop);
    p.push("type_emb", gauss("type_emb", 5, d, 0.02));
    p.push("pos_emb", gauss("pos_emb", cfg.months, d, 0.02));
    p.push("fuse_ln_g", ones(vec![d]));
    p.push("fuse_ln_b", zeros(vec![d]));

    let (a, f) = (cfg.attn_dim(), cfg.ffn_dim());
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("enc{l}_{s}");
        p.push(&n("ln1_g"), ones(vec![d]));
        p.push(&n("ln1_b"), zeros(vec![d]));
        p.push(&n("qkv_w"), uniform_w(&n("qkv_w"), d, 3 * a));
        p.push(&n("qkv_b"), zeros(vec![3 * a]));
        p.push(&n("wo_w"), uniform_w(&n("wo_w"), a, d));
        p.push(&n("wo_b"), zeros(vec![d]));
        p.push(&n("ln2_g"), ones(vec![d]));
        p.push(&n("ln2_b"), zeros(vec![d]));
        p.push(&n("ffn1_w"), uniform_w(&n("ffn1_w"), d, f));
        p.push(&n("ffn1_b"), zeros(vec![f]));
        p.push(&n("ffn2_w"), uniform_w(&n("ffn2_w"), f, d));
        p.push(&n("ffn2_b"), zeros(vec![d]));
    }
    p.push("final_ln_g", ones(vec![d]));
    p.push("final_ln_b", zeros(vec![d]));
    p.push("head_w", uniform_w("head_w", d, 1));
    p.push("head_b", zeros(vec![1]));
    Ok(p)
}

/// Per-channel standardization statistics, frozen at train time and stored
/// in the checkpoint so inference sees identically scaled inputs.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    /// (modality name, mean [C], sd [C]) in `EXTRACTED_MODALITIES` order.
    pub per_modality: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl FeatureStats {
    pub fn identity() -> Self {
        let per_modality = EXTRACTED_MODALITIES
            .iter()
            .map(|(name, m)| {
                let c = modality_channels(*m);
                (name.to_string(), vec![0.0; c], vec![1.0; c])
            })
            .collect();
        FeatureStats { per_modality }
    }

    /// Population mean/sd per channel over every pixel, time step, and
    /// sample. Channels with vanishing variance standardize with sd 1.
    pub fn compute<'a>(samples: impl Iterator<Item = &'a CountyCropSample>) -> Self {
        let mut acc: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = EXTRACTED_MODALITIES
            .iter()
            .map(|(_, m)| {
                let c = modality_channels(*m);
                (vec![0.0; c], vec![0.0; c], vec![0.0; c])
            })
            .collect();
        for s in samples {
            for (slot, t) in [&s.landsat, &s.climate, &s.et, &s.soil].into_iter().enumerate() {
                let (sum, sq, n) = &mut acc[slot];
                let (c, p) = (t.shape[1], t.shape[2]);
                let steps = t.shape[0];
                for step in 0..steps {
                    for chan in 0..c {
                        let base = (step * c + chan) * p;
                        for v in &t.data[base..base + p] {
                            sum[chan] += v;
                            sq[chan] += v * v;
                            n[chan] += 1.0;
                        }
                    }
                }
            }
        }
        let per_modality = EXTRACTED_MODALITIES
            .iter()
            .zip(acc)
            .map(|((name, _), (sum, sq, n))| {
                let mean: Vec<f64> = sum
                    .iter()
                    .zip(&n)
                    .map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 })
                    .collect();
                let sd: Vec<f64> = sq
                    .iter()
                    .zip(&n)
                    .zip(&mean)
                    .map(|((q, n), m)| {
                        if *n > 0.0 {
                            let var = (q / n - m * m).max(0.0);
                            if var.sqrt() > 1e-12 {
                                var.sqrt()
                            } else {
                                1.0
                            }
                        } else {
                            1.0
                        }
                    })
                    .collect();
                (name.to_string(), mean, sd)
            })
            .collect();
        FeatureStats { per_modality }
    }

    fn slot(&self, name: &str) -> &(String, Vec<f64>, Vec<f64>) {
        self.per_modality
            .iter()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("unknown modality {name}"))
    }

    /// (x - mean) / sd per channel; returns a constant (no-grad) tensor.
    pub fn standardize(&self, name: &str, x: &Tensor) -> Tensor {
        let (_, mean, sd) = self.slot(name);
        let (c, p) = (x.shape[1], x.shape[2]);
        let mut data = x.data.clone();
        for step in 0..x.shape[0] {
            for chan in 0..c {
                let base = (step * c + chan) * p;
                for v in &mut data[base..base + p] {
                    *v = (*v - mean[chan]) / sd[chan];
                }
            }
        }
        Tensor::new(x.shape.clone(), data).expect("standardize keeps shape")
    }
}

/// One sample's standardized modality tensors, ready to enter a tape.
#[derive(Debug, Clone)]
pub struct StdSample {
    pub landsat: Tensor,
    pub climate: Tensor,
    pub et: Tensor,
    pub soil: Tensor,
    pub crop_code: u32,
}

pub fn standardize_sample(
    stats: &FeatureStats,
    s: &CountyCropSample,
) -> Result<StdSample, ModelError> {
    let violations = validate_for_model(s)?;
    debug_assert!(violations.is_empty());
    Ok(StdSample {
        landsat: stats.standardize("landsat", &s.landsat),
        climate: stats.standardize("climate", &s.climate),
        et: stats.standardize("et", &s.et),
        soil: stats.standardize("soil", &s.soil),
        crop_code: s.crop_code,
    })
}

fn validate_for_model(s: &CountyCropSample) -> Result<Vec<Violation>, ModelError> {
    let v = crate::data::validate_sample(s);
    if v.is_empty() {
        Ok(v)
    } else {
        Err(ModelError::InvalidSample(v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub target_transform: String,
    pub crop_names: Vec<String>,
    pub trained_epochs: usize,
    pub seed: u64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            target_transform: "identity".into(),
            crop_names: Vec::new(),
            trained_epochs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    schema_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<String>,
    stats: Vec<String>,
}

fn ck_io(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    }
}

/// Writes config, parameters, and feature statistics under `dir`:
/// `index.json` plus one binary tensor file per parameter. Deterministic
/// bytes for identical inputs.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    params: &ParamSet,
    stats: &FeatureStats,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let pdir = dir.join("params");
    std::fs::create_dir_all(&pdir).map_err(ck_io(&pdir))?;
    let sdir = dir.join("stats");
    std::fs::create_dir_all(&sdir).map_err(ck_io(&sdir))?;
    let mut names = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        crate::data::write_container(t, &pdir.join(format!("{name}.cyb")))?;
        names.push(name.to_string());
    }
    let mut stat_names = Vec::new();
    for (name, mean, sd) in &stats.per_modality {
        let c = mean.len();
        let m = Tensor::new(vec![c], mean.clone()).expect("stat shape");
        let s = Tensor::new(vec![c], sd.clone()).expect("stat shape");
        crate::data::write_container(&m, &sdir.join(format!("{name}_mean.cyb")))?;
        crate::data::write_container(&s, &sdir.join(format!("{name}_sd.cyb")))?;
        stat_names.push(name.clone());
    }
    let index = CheckpointIndex {
        schema_version: 1,
        config: cfg.clone(),
        meta: meta.clone(),
        params: names,
        stats: stat_names,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text).map_err(ck_io(&path))
}

pub fn load_checkpoint(
    dir: &Path,
) -> Result<(ModelConfig, ParamSet, FeatureStats, CheckpointMeta), ModelError> {
    let ipath = dir.join("index.json");
    let text = std::fs::read_to_string(&ipath).map_err(ck_io(&ipath))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|source| ModelError::CheckpointJson {
            path: ipath.display().to_string(),
            source,
        })?;
    index.config.validate()?;
    // Rebuild against a reference init so every expected parameter must be
    // present with the right shape.
    let reference = init_params(&index.config, 0)?;
    let mut params = ParamSet::new();
    for (name, ref_t) in reference.iter() {
        if !index.params.iter().any(|n| n == name) {
            return Err(ModelError::MissingParam { name: name.into() });
        }
        let mut t = crate::data::read_container(&dir.join("params").join(format!("{name}.cyb")))?;
        if t.shape != ref_t.shape {
            return Err(ModelError::ParamShape {
                name: name.into(),
                expected: ref_t.shape.clone(),
                actual: t.shape,
            });
        }
        t.requires_grad = true;
        params.push(name, t);
    }
    let mut per_modality = Vec::new();
    for name in &index.stats {
        let m = crate::data::read_container(&dir.join("stats").join(format!("{name}_mean.cyb")))?;
        let s = crate::data::read_container(&dir.join("stats").join(format!("{name}_sd.cyb")))?;
        per_modality.push((name.clone(), m.data, s.data));
    }
    let stats = FeatureStats { per_modality };
    Ok((index.config, params, stats, index.meta))
}
