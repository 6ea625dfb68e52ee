//! Constrained evasion attack on a forecaster's cgm history.
//!
//! The attacker reads every feature of a window but writes only cgm. Each
//! iteration picks the cgm coordinate with the largest positive sensitivity
//! that can still move, raises it by `step`, and projects it into
//! `[cgm_low, cgm_high]`. A move is kept only if the prediction does not
//! fall; if no coordinate yields such a move the attack stops early. The
//! attack succeeds as soon as the predicted state becomes Hyper.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    classify_state, windowize, DiagnosticState, FeatureWindow, LabeledWindow, MealContext,
    PatientTrace, Thresholds, CGM_MAX,
};
use crate::error::{Error, Result};
use crate::predictor::Forecaster;

/// Attack budget and upper bound; the lower bound comes from the meal context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    /// mg/dL per move.
    pub step: f64,
    pub max_iters: usize,
    pub cgm_high: f64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            step: 5.0,
            max_iters: 200,
            cgm_high: CGM_MAX,
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("attack step {} must be positive", self.step)));
        }
        if !(self.cgm_high > 0.0 && self.cgm_high <= CGM_MAX) {
            return Err(Error::Config(format!("cgm_high {} must lie in (0, {CGM_MAX}]", self.cgm_high)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConstraints {
    pub context: MealContext,
    pub cgm_low: f64,
    pub cgm_high: f64,
    pub max_iters: usize,
    pub step: f64,
}

impl AttackConstraints {
    /// Manipulated values must themselves read as hyperglycemic: the lower
    /// bound is the context's Hyper threshold.
    pub fn for_context(context: MealContext, params: &AttackParams, thresholds: &Thresholds) -> Self {
        Self {
            context,
            cgm_low: thresholds.hyper(context),
            cgm_high: params.cgm_high,
            max_iters: params.max_iters,
            step: params.step,
        }
    }

    fn project(&self, v: f64) -> f64 {
        v.clamp(self.cgm_low, self.cgm_high)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Success,
    Failure,
    /// The benign prediction was already Hyper; nothing to attack.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub status: AttackStatus,
    pub context: MealContext,
    pub adversarial_window: FeatureWindow,
    pub benign_prediction: f64,
    pub adversarial_prediction: f64,
    pub benign_state: DiagnosticState,
    pub adversarial_state: DiagnosticState,
    pub iterations_used: usize,
}

impl AttackOutcome {
    pub fn success(&self) -> bool {
        self.status == AttackStatus::Success
    }

    pub fn attackable(&self) -> bool {
        self.status != AttackStatus::Skipped
    }
}

pub fn craft_adversarial(
    model: &dyn Forecaster,
    window: &FeatureWindow,
    constraints: &AttackConstraints,
    thresholds: &Thresholds,
) -> Result<AttackOutcome> {
    craft_adversarial_traced(model, window, constraints, thresholds).map(|(o, _)| o)
}

/// Like [`craft_adversarial`], also returning the prediction after every accepted move,
/// starting with the benign prediction.
pub fn craft_adversarial_traced(
    model: &dyn Forecaster,
    window: &FeatureWindow,
    constraints: &AttackConstraints,
    thresholds: &Thresholds,
) -> Result<(AttackOutcome, Vec<f64>)> {
    let ctx = constraints.context;
    let benign_prediction = model.predict(window)?;
    let benign_state = classify_state(benign_prediction, ctx, thresholds);
    let mut trajectory = vec![benign_prediction];
    let mut outcome = AttackOutcome {
        status: AttackStatus::Skipped,
        context: ctx,
        adversarial_window: window.clone(),
        benign_prediction,
        adversarial_prediction: benign_prediction,
        benign_state,
        adversarial_state: benign_state,
        iterations_used: 0,
    };
    if benign_state == DiagnosticState::Hyper {
        return Ok((outcome, trajectory));
    }

    let mut current = window.clone();
    let mut prediction = benign_prediction;
    let mut iterations = 0;
    let mut state = benign_state;
    while iterations < constraints.max_iters && state != DiagnosticState::Hyper {
        let grad = model.gradient_wrt_cgm(&current)?;
        let mut order: Vec<usize> = (0..grad.len()).filter(|&t| grad[t] > 0.0).collect();
        // descending sensitivity, earliest timestep first on ties
        order.sort_by(|&a, &b| grad[b].total_cmp(&grad[a]).then(a.cmp(&b)));

        let mut moved = false;
        for t in order {
            let old = current.cgm(t);
            let new = constraints.project(old + constraints.step);
            if new == old {
                continue;
            }
            current.set_cgm(t, new);
            let p = model.predict(&current)?;
            if p >= prediction {
                prediction = p;
                moved = true;
                break;
            }
            current.set_cgm(t, old);
        }
        if !moved {
            break;
        }
        iterations += 1;
        trajectory.push(prediction);
        state = classify_state(prediction, ctx, thresholds);
    }

    outcome.status = if state == DiagnosticState::Hyper {
        AttackStatus::Success
    } else {
        AttackStatus::Failure
    };
    outcome.adversarial_window = current;
    outcome.adversarial_prediction = prediction;
    outcome.adversarial_state = state;
    outcome.iterations_used = iterations;
    Ok((outcome, trajectory))
}

/// One persisted attack result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub patient_id: String,
    pub timestamp: i64,
    /// Benign cgm at the forecast target.
    pub target: f64,
    #[serde(flatten)]
    pub outcome: AttackOutcome,
}

/// Attacks every window, in timestamp order. Windows are independent and run in parallel.
pub fn attack_windows(
    model: &dyn Forecaster,
    windows: &[LabeledWindow],
    params: &AttackParams,
    thresholds: &Thresholds,
) -> Result<Vec<AttackRecord>> {
    params.validate()?;
    windows
        .par_iter()
        .map(|w| {
            let constraints = AttackConstraints::for_context(w.context, params, thresholds);
            craft_adversarial(model, &w.features, &constraints, thresholds).map(|outcome| AttackRecord {
                patient_id: w.patient_id.clone(),
                timestamp: w.timestamp,
                target: w.target,
                outcome,
            })
        })
        .collect()
}

pub fn attack_trace(
    model: &dyn Forecaster,
    trace: &PatientTrace,
    horizon: usize,
    params: &AttackParams,
    thresholds: &Thresholds,
) -> Result<Vec<AttackRecord>> {
    let windows = windowize(trace, model.history_len(), horizon)?;
    attack_windows(model, &windows, params, thresholds)
}

/// Successes over attackable windows for one (benign state, context) cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateCell {
    pub successes: usize,
    pub attackable: usize,
}

impl RateCell {
    /// `None` when the cell has no attackable windows.
    pub fn rate(&self) -> Option<f64> {
        (self.attackable > 0).then(|| self.successes as f64 / self.attackable as f64)
    }

    pub fn percent(&self) -> Option<f64> {
        self.rate().map(|r| 100.0 * r)
    }

    fn add(&mut self, success: bool) {
        self.attackable += 1;
        self.successes += usize::from(success);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSuccessRates {
    pub patient_id: String,
    /// Keyed by (benign state, context); benign state is Normal or Hypo.
    pub cells: BTreeMap<(DiagnosticState, MealContext), RateCell>,
    pub skipped: usize,
}

impl PatientSuccessRates {
    pub fn total(&self) -> RateCell {
        self.cells.values().fold(RateCell::default(), |acc, c| RateCell {
            successes: acc.successes + c.successes,
            attackable: acc.attackable + c.attackable,
        })
    }

    pub fn cell(&self, benign: DiagnosticState, context: MealContext) -> RateCell {
        self.cells.get(&(benign, context)).copied().unwrap_or_default()
    }
}

/// Aggregates attack records into per-patient success tables, sorted by patient id.
/// `context_filter` keeps only windows in that meal context.
pub fn success_rates(records: &[AttackRecord], context_filter: Option<MealContext>) -> Vec<PatientSuccessRates> {
    let mut by_patient: BTreeMap<&str, PatientSuccessRates> = BTreeMap::new();
    for r in records {
        let entry = by_patient.entry(&r.patient_id).or_insert_with(|| PatientSuccessRates {
            patient_id: r.patient_id.clone(),
            cells: [DiagnosticState::Normal, DiagnosticState::Hypo]
                .into_iter()
                .flat_map(|s| [(s, MealContext::Fasting), (s, MealContext::Postprandial)])
                .filter(|(_, c)| context_filter.is_none_or(|f| f == *c))
                .map(|k| (k, RateCell::default()))
                .collect(),
            skipped: 0,
        });
        if context_filter.is_some_and(|f| f != r.outcome.context) {
            continue;
        }
        if !r.outcome.attackable() {
            entry.skipped += 1;
            continue;
        }
        entry
            .cells
            .entry((r.outcome.benign_state, r.outcome.context))
            .or_default()
            .add(r.outcome.success());
    }
    by_patient.into_values().collect()
}

pub fn attack_success_rates(
    model: &dyn Forecaster,
    traces: &[PatientTrace],
    horizon: usize,
    params: &AttackParams,
    thresholds: &Thresholds,
    context_filter: Option<MealContext>,
) -> Result<Vec<PatientSuccessRates>> {
    let mut records = Vec::new();
    for t in traces {
        records.extend(attack_trace(model, t, horizon, params, thresholds)?);
    }
    Ok(success_rates(&records, context_filter))
}

/// Success-rate table as CSV: one row per patient and cell; empty cells leave the rate blank.
pub fn success_rates_csv(rates: &[PatientSuccessRates]) -> String {
    let mut out = String::from("patient_id,benign_state,context,successes,attackable,success_percent\n");
    for p in rates {
        for ((state, ctx), cell) in &p.cells {
            let pct = cell.percent().map(|v| format!("{v:.1}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:?},{:?},{},{},{}\n",
                p.patient_id, state, ctx, cell.successes, cell.attackable, pct
            ));
        }
        let total = p.total();
        let pct = total.percent().map(|v| format!("{v:.1}")).unwrap_or_default();
        out.push_str(&format!("{},All,All,{},{},{}\n", p.patient_id, total.successes, total.attackable, pct));
    }
    out
}

pub fn records_to_jsonl(records: &[AttackRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<AttackRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
