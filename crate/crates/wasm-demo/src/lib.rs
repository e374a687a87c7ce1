//! Browser bindings. Every export returns a JSON string; failures come back
//! as `{"error": "..."}` so the page never has to catch.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use murrenet_core::data::{make_synthetic_cohort, split_monte_carlo, SyntheticSpec};
use murrenet_core::fusion::{orthogonal_decompose, Denominator};
use murrenet_core::metrics::{hazards_to_output, kaplan_meier, log_rank_test, stratify_by_median};
use murrenet_core::model::Ablation;
use murrenet_core::nn::{Graph, ParamStore};
use murrenet_core::training::{evaluate, train_fold, TrainConfig};
use murrenet_core::Mat;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Serialize)]
pub struct Curve {
    pub group: String,
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

#[derive(Serialize)]
pub struct Stratification {
    pub c_index: f64,
    pub chi2: f64,
    pub p_value: f64,
    pub curves: Vec<Curve>,
}

pub fn stratify_cohort(seed: u64, signal: f64, epochs: usize) -> Result<Stratification, String> {
    let s = |e: murrenet_core::Error| e.to_string();
    let spec = SyntheticSpec {
        n_patients: 200,
        n_p_range: (4, 12),
        shared_signal_strength: signal,
        specific_signal_strength_p: signal / 2.0,
        specific_signal_strength_g: signal / 2.0,
        seed,
        ..Default::default()
    };
    let cohort = make_synthetic_cohort(&spec).map_err(s)?;
    let config = TrainConfig {
        epochs,
        lr: 2e-3,
        ablation: Ablation::ladder('A').expect("baseline rung"),
        seed,
        ..Default::default()
    };
    let split = split_monte_carlo(&cohort, 1, 0.7, config.model.n_bins, seed).map_err(s)?.remove(0);
    let (model, _) = train_fold(&split.train, &split.val, &config, 0).map_err(s)?;
    let (risks, c_index) = evaluate(&model, &split.val).map_err(s)?;
    let (low, high) = stratify_by_median(&risks).map_err(s)?;
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
        idx.iter()
            .map(|&i| (split.val.patients[i].survival_time, split.val.patients[i].event_observed))
            .unzip()
    };
    let (tl, el) = pick(&low);
    let (th, eh) = pick(&high);
    let lr = log_rank_test(&tl, &el, &th, &eh).map_err(s)?;
    let mut curves = Vec::new();
    for (group, t, e) in [("low", &tl, &el), ("high", &th, &eh)] {
        let km = kaplan_meier(t, e).map_err(s)?;
        curves.push(Curve {
            group: group.into(),
            times: km.event_times,
            survival: km.survival_probs,
        });
    }
    Ok(Stratification {
        c_index,
        chi2: lr.chi2,
        p_value: lr.p_value,
        curves,
    })
}

/// Trains the baseline on 70% of a fresh synthetic cohort and splits the
/// rest at the median predicted risk.
#[wasm_bindgen]
pub fn stratify_demo(seed: u32, signal: f64, epochs: u32) -> String {
    respond(stratify_cohort(seed as u64, signal, epochs as usize))
}

#[derive(Serialize)]
pub struct Decomposition {
    pub projection: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub cosine: f64,
}

pub fn decompose(token: &[f64], common: &[f64]) -> Result<Decomposition, String> {
    if token.len() != common.len() || token.is_empty() {
        return Err(format!("token has {} entries, common vector {}", token.len(), common.len()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Mat::row_vector(token));
    let c = g.input(Mat::row_vector(common));
    let (orth, proj) = orthogonal_decompose(&mut g, x, c, Denominator::Strict).map_err(|e| e.to_string())?;
    let orthogonal = g.value(orth).as_slice().to_vec();
    let dot: f64 = orthogonal.iter().zip(common).map(|(a, b)| a * b).sum();
    let norms = (orthogonal.iter().map(|v| v * v).sum::<f64>() * common.iter().map(|v| v * v).sum::<f64>()).sqrt();
    Ok(Decomposition {
        projection: g.value(proj).as_slice().to_vec(),
        orthogonal,
        cosine: if norms > 0.0 { dot / norms } else { 0.0 },
    })
}

/// Splits a token into its part along the common vector and the residual.
#[wasm_bindgen]
pub fn orthogonal_demo(token: Vec<f64>, common: Vec<f64>) -> String {
    respond(decompose(&token, &common))
}

/// Survival curve and risk score for per-bin hazards.
#[wasm_bindgen]
pub fn hazard_curve(hazards: Vec<f64>) -> String {
    respond(hazards_to_output(&hazards).map(|h| {
        serde_json::json!({ "hazards": h.hazards, "survival": h.survival, "risk": h.risk })
    }).map_err(|e| e.to_string()))
}
