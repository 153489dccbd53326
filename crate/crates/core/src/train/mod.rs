//! Training: AdamW with decoupled weight decay, MSE over the monthly
//! prediction series, per-sample gradient averaging, and a full-model
//! finite-difference gradient check used by the verification command.

pub mod metrics;
mod split;

pub use metrics::{r2, rmse_mae, write_report, EvalReport, MetricError, MetricRow, ScatterRow};
pub use split::{make_folds, run_cv, run_fixed, CvOutcome, FixedOutcome, FoldRun, SplitPlan};

use crate::data::CountyCropSample;
use crate::model::{
    bind_frozen, bind_trainable, init_params, sample_forward, standardize_sample, FeatureStats,
    ModelConfig, ModelError, ParamSet, StdSample,
};
use crate::rng;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(
        "only {non_test} non-test years available for {folds}-fold cross-validation; \
         use at most --folds {non_test}"
    )]
    TooFewYears { non_test: usize, folds: usize },
    #[error("no samples for {0}")]
    NoSamples(String),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    FinalMonthOnly,
    MeanOverMonths,
}

impl FromStr for LossWeighting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "final" | "final_month_only" => Ok(LossWeighting::FinalMonthOnly),
            "mean" | "mean_over_months" => Ok(LossWeighting::MeanOverMonths),
            other => Err(format!(
                "unknown loss weighting {other:?}; expected \"final\" or \"mean\""
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    Identity,
    Log10p1,
}

impl TargetTransform {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            TargetTransform::Identity => y,
            TargetTransform::Log10p1 => (1.0 + y).log10(),
        }
    }

    pub fn invert(self, z: f64) -> f64 {
        match self {
            TargetTransform::Identity => z,
            TargetTransform::Log10p1 => (10.0f64.powf(z) - 1.0).max(0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetTransform::Identity => "identity",
            TargetTransform::Log10p1 => "log10p1",
        }
    }
}

impl FromStr for TargetTransform {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "identity" => Ok(TargetTransform::Identity),
            "log10p1" => Ok(TargetTransform::Log10p1),
            other => Err(format!(
                "unknown target transform {other:?}; expected \"identity\" or \"log10p1\""
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weighting: LossWeighting,
    pub target_transform: TargetTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 6,
            batch_size: 8,
            seed: 0,
            loss_weighting: LossWeighting::MeanOverMonths,
            target_transform: TargetTransform::Log10p1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }
}

/// AdamW state: first/second moments per parameter tensor plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { m, v, t: 0 }
    }

    /// One decoupled-weight-decay update:
    /// p ← p − lr·m̂/(√v̂+eps) − lr·wd·p, with bias-corrected moments.
    /// `grad_of(i)` returns the gradient slice for the i-th parameter.
    pub fn step<'g, F>(&mut self, params: &mut ParamSet, grad_of: F, cfg: &TrainConfig)
    where
        F: Fn(usize) -> &'g [f64],
    {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..self.m.len() {
            let g = grad_of(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params.at_mut(i).data;
            debug_assert_eq!(g.len(), p.len());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps)) + cfg.lr * cfg.weight_decay * p[j];
            }
        }
    }
}

/// MSE of the monthly prediction series against one transformed target.
pub fn loss_node(
    tape: &mut Tape,
    series: NodeId,
    z: f64,
    weighting: LossWeighting,
) -> Result<NodeId, TensorError> {
    let months = tape.value(series).shape[0];
    match weighting {
        LossWeighting::FinalMonthOnly => {
            let last = tape.slice_last(series, months - 1, 1)?;
            let target = tape.constant(Tensor::new(vec![1], vec![z])?);
            let d = tape.sub(last, target)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum_all(sq))
        }
        LossWeighting::MeanOverMonths => {
            let target = tape.constant(Tensor::scalar(z));
            let d = tape.sub(series, target)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum_all(sq);
            Ok(tape.scale(s, 1.0 / months as f64))
        }
    }
}

/// One sample ready for the training/eval loop: standardized tensors plus
/// identity columns and both raw and transformed targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub std: StdSample,
    pub county: String,
    pub crop_name: String,
    pub year: i32,
    pub y_raw: f64,
    pub z: f64,
}

fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-6);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Owns the parameters, optimizer state, and frozen feature statistics for
/// one training run. Deterministic: identical inputs and seed give
/// bit-identical parameter trajectories.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamSet,
    pub stats: FeatureStats,
    opt: AdamW,
    train_set: Vec<Prepared>,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        train_samples: &[&CountyCropSample],
    ) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        model_cfg.validate()?;
        if train_samples.is_empty() {
            return Err(TrainError::NoSamples("training".into()));
        }
        let stats = FeatureStats::compute(train_samples.iter().copied());
        let mut params = init_params(&model_cfg, train_cfg.seed)?;
        let train_set = prepare_with(&stats, train_cfg.target_transform, train_samples)?;
        // Start the head at the mean transformed target so the first steps
        // fit structure rather than offset.
        let mean_z = train_set.iter().map(|p| p.z).sum::<f64>() / train_set.len() as f64;
        params.get_mut("head_b").data[0] = softplus_inv(mean_z);
        let opt = AdamW::new(&params);
        Ok(Trainer {
            model_cfg,
            train_cfg,
            params,
            stats,
            opt,
            train_set,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_set.len()
    }

    /// Standardizes and transforms a sample set with this trainer's frozen
    /// statistics (use for validation/test sets).
    pub fn prepare(&self, samples: &[&CountyCropSample]) -> Result<Vec<Prepared>, TrainError> {
        prepare_with(&self.stats, self.train_cfg.target_transform, samples)
    }

    /// One pass over the training set in a seeded shuffled order, updating
    /// parameters after each batch. Gradients within a batch are averaged
    /// sample-by-sample on a shared tape (no padding). Returns mean loss.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64, TrainError> {
        let n = self.train_set.len();
        let idx: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(self.train_cfg.seed, "epoch-shuffle", &[&epoch.to_string()]);
        let order = rng::sample_without_replacement(&mut r, &idx, n);
        let mut total = 0.0;
        for chunk in order.chunks(self.train_cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = bind_trainable(&mut tape, &self.params);
            let mut acc: Option<NodeId> = None;
            for &i in chunk {
                let p = &self.train_set[i];
                let st = sample_forward(&mut tape, &self.model_cfg, &bound, &p.std, true)?;
                let l = loss_node(&mut tape, st.series, p.z, self.train_cfg.loss_weighting)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            let mean = tape.scale(acc.expect("nonempty chunk"), 1.0 / chunk.len() as f64);
            total += tape.value(mean).data[0] * chunk.len() as f64;
            let grads = tape.backward(mean)?;
            let ids = bound.ids().to_vec();
            self.opt.step(
                &mut self.params,
                |i| grads.get(ids[i]).expect("every parameter has a gradient"),
                &self.train_cfg,
            );
        }
        Ok(total / n as f64)
    }

    /// Final-month predictions in t/ha (transform inverted) for a prepared
    /// sample set, in order.
    pub fn predictions(&self, set: &[Prepared]) -> Result<Vec<f64>, TrainError> {
        let months = self.model_cfg.months;
        let tf = self.train_cfg.target_transform;
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.chunks(64) {
            let mut tape = Tape::new();
            let bound = bind_frozen(&mut tape, &self.params);
            for p in chunk {
                let st = sample_forward(&mut tape, &self.model_cfg, &bound, &p.std, true)?;
                let z = tape.value(st.series).data[months - 1];
                out.push(tf.invert(z));
            }
        }
        Ok(out)
    }
}

fn prepare_with(
    stats: &FeatureStats,
    tf: TargetTransform,
    samples: &[&CountyCropSample],
) -> Result<Vec<Prepared>, TrainError> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                std: standardize_sample(stats, s)?,
                county: s.county_id.clone(),
                crop_name: s.crop_name.clone(),
                year: s.year,
                y_raw: s.yield_label,
                z: tf.apply(s.yield_label),
            })
        })
        .collect()
}

/// Result of checking reverse-mode model gradients against central finite
/// differences on sampled parameter coordinates.
#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub max_rel_err: f64,
    pub n_coords: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Full-model gradient check at a small configuration (8-dim model, 2
/// heads, 1 layer, 5 Landsat pixels, 3 climate pixels) on one synthetic
/// sample. `inject_fault` corrupts the GELU backward rule on the
/// reverse-mode tape only, as a negative control.
pub fn model_gradient_check(
    seed: u64,
    coords_per_param: usize,
    inject_fault: bool,
) -> Result<ModelGradReport, TrainError> {
    let scfg = crate::synth::SynthConfig {
        n_counties: 1,
        n_crops: 2,
        years: vec![2015],
        pixels_n: (5, 5),
        pixels_m: (3, 3),
        seed,
        ..crate::synth::SynthConfig::default()
    };
    let sample = crate::synth::generate(&scfg)?.samples.swap_remove(1);
    let mcfg = ModelConfig::tiny(2);
    let params = init_params(&mcfg, seed)?;
    let stats = FeatureStats::identity();
    let std = standardize_sample(&stats, &sample)?;
    let target = TargetTransform::Log10p1.apply(sample.yield_label);
    let weighting = LossWeighting::MeanOverMonths;

    let loss_value = |ps: &ParamSet| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let b = bind_frozen(&mut tape, ps);
        let st = sample_forward(&mut tape, &mcfg, &b, &std, true)?;
        let l = loss_node(&mut tape, st.series, target, weighting)?;
        Ok(tape.value(l).data[0])
    };

    let mut tape = Tape::new();
    if inject_fault {
        tape.inject_gelu_backward_fault();
    }
    let bound = bind_trainable(&mut tape, &params);
    let st = sample_forward(&mut tape, &mcfg, &bound, &std, true)?;
    let l = loss_node(&mut tape, st.series, target, weighting)?;
    let grads = tape.backward(l)?;

    let step = 1e-5;
    let tol = 1e-3;
    let mut max_rel = 0.0f64;
    let mut n_coords = 0;
    for pi in 0..params.len() {
        let (name, t) = params.at(pi);
        let numel = t.numel();
        let mut r = rng::stream(seed, "model-grad-coords", &[name]);
        let all: Vec<usize> = (0..numel).collect();
        let picked = rng::sample_without_replacement(&mut r, &all, coords_per_param.min(numel));
        let g = grads.get(bound.ids()[pi]).expect("param gradient");
        for j in picked {
            let mut plus = params.clone();
            plus.at_mut(pi).data[j] += step;
            let lp = loss_value(&plus)?;
            let mut minus = params.clone();
            minus.at_mut(pi).data[j] -= step;
            let lm = loss_value(&minus)?;
            let numeric = (lp - lm) / (2.0 * step);
            let e = crate::tensor::check::rel_err(g[j], numeric);
            max_rel = max_rel.max(e);
            n_coords += 1;
        }
    }
    Ok(ModelGradReport {
        max_rel_err: max_rel,
        n_coords,
        tol,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![1], vec![v]).unwrap().with_grad());
        p
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let cfg = TrainConfig::default();
        let mut p = one_param(1.0);
        let mut opt = AdamW::new(&p);
        let g = vec![1.0];
        opt.step(&mut p, |_| &g, &cfg);
        // m̂ = v̂ = 1 after bias correction, so the update is
        // lr/(1+eps) + lr·wd = 0.0000999999999 + 0.000001.
        let want = 1.0 - 1e-4 / (1.0 + 1e-8) - 1e-4 * 0.01;
        let got = p.get("w").data[0];
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        assert!((got - 0.9998990).abs() < 1e-7);
    }

    #[test]
    fn adamw_zero_lr_is_identity() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(1.2345);
        let mut opt = AdamW::new(&p);
        let g = vec![0.7];
        for _ in 0..5 {
            opt.step(&mut p, |_| &g, &cfg);
        }
        assert_eq!(p.get("w").data[0].to_bits(), 1.2345f64.to_bits());
    }

    #[test]
    fn adamw_no_decay_no_grad_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(-2.5);
        let mut opt = AdamW::new(&p);
        let g = vec![0.0];
        for _ in 0..3 {
            opt.step(&mut p, |_| &g, &cfg);
        }
        assert_eq!(p.get("w").data[0].to_bits(), (-2.5f64).to_bits());
    }

    #[test]
    fn adamw_trajectories_are_bit_identical() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut p = one_param(0.5);
            let mut opt = AdamW::new(&p);
            for k in 0..10 {
                let g = vec![(k as f64 * 0.37).sin()];
                opt.step(&mut p, |_| &g, &cfg);
            }
            p.get("w").data[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    fn series_node(tape: &mut Tape, values: &[f64]) -> NodeId {
        tape.constant(Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let all_y = series_node(&mut tape, &[2.0; 12]);
        let l = loss_node(&mut tape, all_y, 2.0, LossWeighting::MeanOverMonths).unwrap();
        assert_eq!(tape.value(l).data[0], 0.0);

        let mut v = [0.0; 12];
        v[11] = 3.0;
        let mut tape = Tape::new();
        let s = series_node(&mut tape, &v);
        let l = loss_node(&mut tape, s, 1.0, LossWeighting::FinalMonthOnly).unwrap();
        assert_eq!(tape.value(l).data[0], 4.0);

        let mut tape = Tape::new();
        let s = series_node(&mut tape, &[3.5; 12]);
        let l = loss_node(&mut tape, s, 2.5, LossWeighting::MeanOverMonths).unwrap();
        assert!((tape.value(l).data[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn target_transform_round_trips() {
        for tf in [TargetTransform::Identity, TargetTransform::Log10p1] {
            for y in [0.0, 0.3, 5.0, 57.0] {
                let z = tf.apply(y);
                assert!((tf.invert(z) - y).abs() < 1e-9);
            }
        }
        assert_eq!("mean".parse::<LossWeighting>().unwrap(), LossWeighting::MeanOverMonths);
        assert_eq!("final".parse::<LossWeighting>().unwrap(), LossWeighting::FinalMonthOnly);
        assert!("x".parse::<LossWeighting>().is_err());
        assert_eq!("log10p1".parse::<TargetTransform>().unwrap(), TargetTransform::Log10p1);
        assert!("x".parse::<TargetTransform>().is_err());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let rep = model_gradient_check(7, 2, false).unwrap();
        assert!(
            rep.pass,
            "max rel err {} over {} coords",
            rep.max_rel_err, rep.n_coords
        );
        assert!(rep.n_coords > 80, "should cover every parameter tensor");
    }

    #[test]
    fn injected_fault_fails_the_model_gradient_check() {
        let rep = model_gradient_check(7, 2, true).unwrap();
        assert!(
            !rep.pass,
            "corrupted GELU backward must be detected, max rel err {}",
            rep.max_rel_err
        );
    }

    #[test]
    fn trainer_is_deterministic_and_loss_decreases() {
        let scfg = crate::synth::SynthConfig {
            n_counties: 2,
            n_crops: 2,
            years: (2010..=2013).collect(),
            pixels_n: (4, 6),
            pixels_m: (1, 2),
            noise_frac: 0.0,
            seed: 3,
            ..crate::synth::SynthConfig::default()
        };
        let data = crate::synth::generate(&scfg).unwrap();
        let refs: Vec<&CountyCropSample> = data.samples.iter().collect();
        let mcfg = ModelConfig::tiny(2);
        let tcfg = TrainConfig {
            epochs: 8,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut tr = Trainer::new(mcfg.clone(), tcfg.clone(), &refs).unwrap();
            let losses: Vec<f64> = (0..tcfg.epochs).map(|e| tr.run_epoch(e).unwrap()).collect();
            (losses, tr)
        };
        let (losses_a, tr_a) = run();
        let (losses_b, tr_b) = run();
        assert_eq!(losses_a, losses_b, "training must be deterministic");
        for ((_, ta), (_, tb)) in tr_a.params.iter().zip(tr_b.params.iter()) {
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        // Smoothed loss is monotone non-increasing within a 5% transient.
        let w = 5.min(losses_a.len());
        let smooth: Vec<f64> = (0..=losses_a.len() - w)
            .map(|i| losses_a[i..i + w].iter().sum::<f64>() / w as f64)
            .collect();
        for pair in smooth.windows(2) {
            assert!(
                pair[1] <= pair[0] * 1.05,
                "smoothed loss increased: {smooth:?}"
            );
        }
        assert!(
            losses_a.last().unwrap() < losses_a.first().unwrap(),
            "loss should fall over training: {losses_a:?}"
        );
    }

    #[test]
    fn predictions_are_nonnegative_and_match_set_length() {
        let scfg = crate::synth::SynthConfig {
            n_counties: 1,
            n_crops: 2,
            years: vec![2010, 2011],
            pixels_n: (4, 4),
            pixels_m: (1, 1),
            seed: 9,
            ..crate::synth::SynthConfig::default()
        };
        let data = crate::synth::generate(&scfg).unwrap();
        let refs: Vec<&CountyCropSample> = data.samples.iter().collect();
        let mcfg = ModelConfig::tiny(2);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            target_transform: TargetTransform::Log10p1,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(mcfg, tcfg, &refs).unwrap();
        tr.run_epoch(0).unwrap();
        let prepared = tr.prepare(&refs).unwrap();
        let preds = tr.predictions(&prepared).unwrap();
        assert_eq!(preds.len(), refs.len());
        for p in preds {
            assert!(p.is_finite() && p >= 0.0);
        }
    }
}
