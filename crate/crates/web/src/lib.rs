//! Browser bindings for the interactive demo page in `www/`.
//!
//! Every export takes and returns JSON strings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vmas::classify::{build_histogram, classify_dataset, detect_significant, fit_mle, ClassifyConfig};
use vmas::domain::ActionKey;
use vmas::metrics::{crossover_tau, cta_curve, ModelScore};
use vmas::simgen::{generate, score_classifier, LineSpec};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct HistogramFit {
    pub bins: BTreeMap<i64, u64>,
    pub total: u64,
    pub mu: f64,
    pub sigma: f64,
    pub significant: Vec<i64>,
    /// Fitted density on a 0.25 s grid across the occupied range.
    pub curve: Vec<(f64, f64)>,
}

/// Fits the duration model to raw durations and flags significant bins.
pub fn histogram_fit(durations: &[f64]) -> Result<HistogramFit, String> {
    let hist = build_histogram(ActionKey::new("demo", "demo", "demo"), durations.iter().copied())
        .map_err(|e| e.to_string())?;
    let g = fit_mle(&hist).map_err(|e| e.to_string())?;
    let sig = detect_significant(&hist, &g);
    let lo = *hist.bins.keys().next().expect("non-empty") as f64 - 1.0;
    let hi = *hist.bins.keys().last().expect("non-empty") as f64 + 1.0;
    let steps = ((hi - lo) * 4.0).round() as usize;
    let curve = if g.degenerate {
        Vec::new()
    } else {
        (0..=steps).map(|i| lo + i as f64 * 0.25).map(|x| (x, g.density(x))).collect()
    };
    Ok(HistogramFit {
        bins: hist.bins.clone(),
        total: hist.total,
        mu: g.mu,
        sigma: g.sigma,
        significant: sig.significant_durations.into_iter().collect(),
        curve,
    })
}

#[derive(Debug, Serialize)]
pub struct CtaChart {
    pub curves: Vec<(String, Vec<(f64, f64)>)>,
    pub crossovers: Vec<(String, String, f64)>,
}

pub fn cta_chart(models: &[ModelScore], steps: usize) -> CtaChart {
    let curves = models.iter().map(|m| (m.name.clone(), cta_curve(m, steps))).collect();
    let mut crossovers = Vec::new();
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            if let Some(t) = crossover_tau(a, b) {
                crossovers.push((a.name.clone(), b.name.clone(), t));
            }
        }
    }
    CtaChart { curves, crossovers }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct SimulationRequest {
    pub seed: u64,
    pub sequences: usize,
    pub source_rate: f64,
    pub misc_rate: f64,
}

impl Default for SimulationRequest {
    fn default() -> Self {
        let line = LineSpec::default();
        Self { seed: 42, sequences: 300, source_rate: line.source_rate, misc_rate: line.misc_rate }
    }
}

#[derive(Debug, Serialize)]
pub struct SimulationResult {
    /// Durations of the first sequence, in seconds, boundary excluded.
    pub first_sequence: Vec<(String, f64)>,
    pub fractions: BTreeMap<String, f64>,
    pub accuracy: f64,
}

/// Generates a synthetic line, classifies it and scores the labels against the injected truth.
pub fn simulate(req: &SimulationRequest) -> Result<SimulationResult, String> {
    let line = LineSpec { seed: req.seed, source_rate: req.source_rate, misc_rate: req.misc_rate, ..LineSpec::default() };
    let g = generate(&line, req.sequences).map_err(|e| e.to_string())?;
    let specs = g.specs.iter().map(|s| (s.key.clone(), s.clone())).collect();
    let report = classify_dataset(&g.sequences, &g.reports, Some(&specs), &ClassifyConfig::default())
        .map_err(|e| e.to_string())?;
    let score = score_classifier(&g.truth, &report).map_err(|e| e.to_string())?;
    let first_sequence = g
        .sequences
        .first()
        .map(|s| {
            s.tuples
                .iter()
                .filter(|t| t.action_id() != line.boundary_action)
                .map(|t| (t.action_id().to_string(), t.duration))
                .collect()
        })
        .unwrap_or_default();
    let fractions = report
        .fractions
        .iter()
        .map(|(c, f)| (serde_json::to_value(c).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), *f))
        .collect();
    Ok(SimulationResult { first_sequence, fractions, accuracy: score.accuracy })
}

fn to_js<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

/// `durations`: JSON array of seconds.
#[wasm_bindgen(js_name = fitHistogram)]
pub fn fit_histogram_js(durations: &str) -> Result<String, JsError> {
    let d: Vec<f64> = serde_json::from_str(durations).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(&histogram_fit(&d).map_err(|e| JsError::new(&e))?)
}

/// `models`: JSON array of `{name, tarmse, f1}`.
#[wasm_bindgen(js_name = ctaChart)]
pub fn cta_chart_js(models: &str, steps: usize) -> Result<String, JsError> {
    let m: Vec<ModelScore> = serde_json::from_str(models).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(&cta_chart(&m, steps.max(1)))
}

/// `request`: JSON object with optional `seed`, `sequences`, `source_rate`, `misc_rate`.
#[wasm_bindgen(js_name = simulateLine)]
pub fn simulate_js(request: &str) -> Result<String, JsError> {
    let r: SimulationRequest = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(&simulate(&r).map_err(|e| JsError::new(&e))?)
}
