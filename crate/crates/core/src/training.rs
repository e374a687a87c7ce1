//! Optimization: Adam, per-fold training, Monte-Carlo cross-validation and
//! the finite-difference gradient check.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::BackwardFault;
use crate::data::{discretize_survival, make_synthetic_cohort, split_monte_carlo, Cohort, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::Denominator;
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::concordance_index;
use crate::model::{build_ablation, Ablation, Model, ModelConfig};
use crate::nn::{Graph, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Patients per optimizer step; gradients are averaged.
    pub accumulate: usize,
    pub n_splits: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-5,
            epochs: 20,
            accumulate: 1,
            n_splits: 5,
            train_fraction: 0.8,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        if self.accumulate == 0 {
            return Err(Error::config("accumulate", "must be >= 1"));
        }
        if self.n_splits == 0 {
            return Err(Error::config("n_splits", "must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", format!("must lie in (0,1), got {}", self.train_fraction)));
        }
        self.weights.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("weights.{field}"), reason),
            other => other,
        })?;
        self.ablation.validate()?;
        self.model.validate()
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, m)| Mat::zeros(m.rows(), m.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id).as_mut_slice();
            let g = grads[k].as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for e in 0..p.len() {
                let gi = g[e] + self.weight_decay * p[e];
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * gi;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                p[e] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-fold seed for one purpose (`tag`).
pub fn derive_seed(seed: u64, fold: usize, tag: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag.rotate_left(32)).wrapping_add(fold as u64))
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub c_index: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Time-bin cut points fitted on the training half.
    pub bin_edges: Vec<f64>,
    /// Mean breakdown per epoch.
    pub epochs: Vec<LossBreakdown>,
    /// l_total of every patient visit, in order.
    #[serde(skip)]
    pub step_totals: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub config: TrainConfig,
    pub folds: Vec<FoldResult>,
    pub mean_c_index: f64,
    /// Population standard deviation over folds.
    pub std_c_index: f64,
    #[serde(skip)]
    pub models: Vec<Model>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Validation risks and C-index of `model` on `cohort`.
pub fn evaluate(model: &Model, cohort: &Cohort) -> Result<(Vec<f64>, f64)> {
    let risks = cohort.patients.iter().map(|p| model.risk(p)).collect::<Result<Vec<_>>>()?;
    let c = concordance_index(&risks, &cohort.times(), &cohort.events())?;
    Ok((risks, c))
}

/// Trains one model on `train` and scores it on `val`.
pub fn train_fold(train: &Cohort, val: &Cohort, config: &TrainConfig, fold: usize) -> Result<(Model, FoldResult)> {
    config.validate()?;
    if !train.is_discretized() || !val.is_discretized() {
        return Err(Error::Data("train_fold needs discretized cohorts".into()));
    }
    if train.bin_edges != val.bin_edges {
        return Err(Error::Data("train and validation bin edges differ".into()));
    }
    if train.n_bins != config.model.n_bins {
        return Err(Error::config(
            "model.n_bins",
            format!("cohort has {} bins, model expects {}", train.n_bins, config.model.n_bins),
        ));
    }
    let train_ids: Vec<String> = train.patients.iter().map(|p| p.patient_id.clone()).collect();
    let val_ids: Vec<String> = val.patients.iter().map(|p| p.patient_id.clone()).collect();
    let seen: HashSet<&String> = train_ids.iter().collect();
    if let Some(leak) = val_ids.iter().find(|id| seen.contains(id)) {
        return Err(Error::Data(format!("patient {leak} is in both train and validation")));
    }

    let mut model = build_ablation(
        &config.model,
        config.ablation,
        train.d_in_p(),
        train.d_in_g(),
        derive_seed(config.seed, fold, TAG_INIT),
    )?;
    let mut adam = Adam::new(&model.store, config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, fold, TAG_SHUFFLE));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_totals = Vec::with_capacity(config.epochs * train.len());

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut breakdowns = Vec::with_capacity(order.len());
        let mut acc: Option<Vec<Mat>> = None;
        let mut in_acc = 0usize;
        for (k, &i) in order.iter().enumerate() {
            let grads = {
                let mut g = Graph::new(&model.store);
                let lg = model.loss_graph(&mut g, &train.patients[i], &config.weights, Denominator::Regularized)?;
                breakdowns.push(lg.breakdown);
                step_totals.push(lg.breakdown.l_total);
                g.param_grads(lg.total)
            };
            if let Some(bad) = grads.iter().position(|m| !m.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", model.store.name(model.store.ids().nth(bad).unwrap()))));
            }
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign(y)),
            }
            in_acc += 1;
            if in_acc == config.accumulate || k + 1 == order.len() {
                let mut a = acc.take().expect("accumulated gradients");
                if in_acc > 1 {
                    let s = 1.0 / in_acc as f64;
                    a.iter_mut().for_each(|m| *m = m.scaled(s));
                }
                adam.step(&mut model.store, &a);
                in_acc = 0;
            }
        }
        epochs.push(LossBreakdown::mean(&breakdowns));
    }

    let (_, c_index) = evaluate(&model, val).map_err(|e| e.at_stage("validation"))?;
    let result = FoldResult {
        fold,
        c_index,
        train_ids,
        val_ids,
        bin_edges: train.bin_edges.clone(),
        epochs,
        step_totals,
    };
    Ok((model, result))
}

/// Monte-Carlo cross-validation with `jobs` folds in flight. Results do
/// not depend on `jobs`.
pub fn run_cv(cohort: &Cohort, config: &TrainConfig, jobs: usize) -> Result<FitResult> {
    config.validate()?;
    let splits = split_monte_carlo(cohort, config.n_splits, config.train_fraction, config.model.n_bins, config.seed)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(Model, FoldResult)>>>> = Mutex::new((0..splits.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, splits.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= splits.len() {
                    break;
                }
                let r = train_fold(&splits[k].train, &splits[k].val, config, k);
                slots.lock().expect("fold results lock")[k] = Some(r);
            });
        }
    });
    let mut folds = Vec::with_capacity(splits.len());
    let mut models = Vec::with_capacity(splits.len());
    for (k, slot) in slots.into_inner().expect("fold results lock").into_iter().enumerate() {
        let (m, f) = slot.expect("every fold ran").map_err(|e| Error::Fold {
            fold: k,
            source: Box::new(e),
        })?;
        models.push(m);
        folds.push(f);
    }
    let cs: Vec<f64> = folds.iter().map(|f| f.c_index).collect();
    let (mean_c_index, std_c_index) = mean_std(&cs);
    Ok(FitResult {
        config: config.clone(),
        folds,
        mean_c_index,
        std_c_index,
        models,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub seed: u64,
    pub n_patches: usize,
    pub n_groups: usize,
    pub d_in_p: usize,
    pub d_in_g: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 8,
                n_heads: 2,
                n_landmarks: 2,
                gate_hidden: 4,
                ..Default::default()
            },
            ablation: Ablation::default(),
            weights: LossWeights::default(),
            seed: 0,
            n_patches: 5,
            n_groups: 3,
            d_in_p: 6,
            d_in_g: 4,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.d > 16 {
            return Err(Error::config("model.d", format!("gradient check needs d <= 16, got {}", self.model.d)));
        }
        if self.n_patches == 0 || self.n_patches > 6 {
            return Err(Error::config("n_patches", format!("must lie in 1..=6, got {}", self.n_patches)));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::config("step", "step and tolerance must be > 0"));
        }
        self.weights.validate()?;
        self.ablation.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub n_elems: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor in the relative error; arrays whose gradients are
/// both below it are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(REL_FLOOR)
}

/// Fixed tiny patient used by the gradient check.
pub fn gradcheck_patient(config: &GradCheckConfig) -> Result<crate::data::PatientRecord> {
    let spec = SyntheticSpec {
        n_patients: 8,
        n_p_range: (config.n_patches, config.n_patches),
        n_groups: config.n_groups,
        d_in_p: config.d_in_p,
        d_in_g: config.d_in_g,
        seed: config.seed,
        ..Default::default()
    };
    let cohort = discretize_survival(make_synthetic_cohort(&spec)?, config.model.n_bins)?;
    let idx = cohort.patients.iter().position(|p| p.event_observed).unwrap_or(0);
    Ok(cohort.patients[idx].clone())
}

/// Analytic gradient of l_total against central differences for every
/// parameter array of a freshly initialized model.
pub fn gradient_check(config: &GradCheckConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    config.validate()?;
    let patient = gradcheck_patient(config)?;
    let model = build_ablation(&config.model, config.ablation, config.d_in_p, config.d_in_g, config.seed)?;
    let loss_at = |store: &ParamStore| -> Result<f64> {
        let mut m = model.clone();
        m.store = store.clone();
        let mut g = Graph::new(&m.store);
        Ok(m.loss_graph(&mut g, &patient, &config.weights, Denominator::Regularized)?.breakdown.l_total)
    };
    let grads = {
        let mut g = Graph::new(&model.store);
        g.set_fault(fault);
        let lg = model.loss_graph(&mut g, &patient, &config.weights, Denominator::Regularized)?;
        g.param_grads(lg.total)
    };
    let h = config.step;
    let mut entries = Vec::with_capacity(model.store.len());
    let mut probe = model.store.clone();
    for id in model.store.ids() {
        let n = model.store.get(id).len();
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(id).as_slice()[e];
            probe.get_mut(id).as_mut_slice()[e] = orig + h;
            let up = loss_at(&probe)?;
            probe.get_mut(id).as_mut_slice()[e] = orig - h;
            let down = loss_at(&probe)?;
            probe.get_mut(id).as_mut_slice()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let analytic = grads[id.index()].as_slice();
        entries.push(GradEntry {
            name: model.store.name(id).to_string(),
            n_elems: n,
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
            numeric_norm: numeric.iter().map(|a| a * a).sum::<f64>().sqrt(),
            rel_err: relative_error(analytic, &numeric),
        });
    }
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("model has parameters");
    let (max_rel_err, worst) = (worst.rel_err, worst.name.clone());
    Ok(GradCheckReport {
        passed: max_rel_err < config.tolerance,
        entries,
        max_rel_err,
        worst,
        tolerance: config.tolerance,
    })
}
