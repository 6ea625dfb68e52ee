//! Instantaneous attack risk and per-victim risk profiles.
//!
//! Risk at a window is `R = S * Z`, where `Z = (y - f)^2` is the squared gap
//! between the benign prediction `y` and the adversarial prediction `f`, and
//! `S` weights the benign-to-adversarial diagnostic state transition.

use serde::{Deserialize, Serialize};

use crate::attack::AttackRecord;
use crate::data::{classify_state, DiagnosticState, PatientTrace, Thresholds};
use crate::error::{Error, Result};

/// Severity coefficients per state transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityTable {
    pub hypo_to_hyper: f64,
    pub normal_to_hyper: f64,
    pub hypo_to_normal: f64,
    pub hyper_to_hypo: f64,
    pub hyper_to_normal: f64,
    pub normal_to_hypo: f64,
    /// Applied when the state does not change.
    pub same_state: f64,
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            hypo_to_hyper: 64.0,
            normal_to_hyper: 32.0,
            hypo_to_normal: 16.0,
            hyper_to_hypo: 8.0,
            hyper_to_normal: 4.0,
            normal_to_hypo: 2.0,
            same_state: 1.0,
        }
    }
}

impl SeverityTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("hypo_to_hyper", self.hypo_to_hyper),
            ("normal_to_hyper", self.normal_to_hyper),
            ("hypo_to_normal", self.hypo_to_normal),
            ("hyper_to_hypo", self.hyper_to_hypo),
            ("hyper_to_normal", self.hyper_to_normal),
            ("normal_to_hypo", self.normal_to_hypo),
            ("same_state", self.same_state),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("severity.{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn severity(&self, benign: DiagnosticState, adversarial: DiagnosticState) -> f64 {
        use DiagnosticState::*;
        match (benign, adversarial) {
            (Hypo, Hyper) => self.hypo_to_hyper,
            (Normal, Hyper) => self.normal_to_hyper,
            (Hypo, Normal) => self.hypo_to_normal,
            (Hyper, Hypo) => self.hyper_to_hypo,
            (Hyper, Normal) => self.hyper_to_normal,
            (Normal, Hypo) => self.normal_to_hypo,
            (Hypo, Hypo) | (Normal, Normal) | (Hyper, Hyper) => self.same_state,
        }
    }
}

pub fn severity(table: &SeverityTable, benign: DiagnosticState, adversarial: DiagnosticState) -> f64 {
    table.severity(benign, adversarial)
}

/// Squared gap between benign and adversarial predictions.
pub fn magnitude(benign_prediction: f64, adversarial_prediction: f64) -> f64 {
    let d = benign_prediction - adversarial_prediction;
    d * d
}

pub fn instantaneous_risk(
    table: &SeverityTable,
    benign_prediction: f64,
    adversarial_prediction: f64,
    benign_state: DiagnosticState,
    adversarial_state: DiagnosticState,
) -> f64 {
    table.severity(benign_state, adversarial_state) * magnitude(benign_prediction, adversarial_prediction)
}

/// Risk per evaluated window of one victim, in timestamp order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub patient_id: String,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl RiskProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,risk\n");
        for (t, v) in self.timestamps.iter().zip(&self.values) {
            out.push_str(&format!("{t},{v}\n"));
        }
        out
    }

    pub fn from_csv(patient_id: &str, text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |m: &str| Error::Parse {
                row,
                message: m.to_string(),
            };
            timestamps.push(rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad timestamp"))?);
            values.push(rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad risk"))?);
        }
        Ok(Self {
            patient_id: patient_id.to_string(),
            timestamps,
            values,
        })
    }
}

/// Builds a victim's profile from the attack records of its windows.
///
/// States are re-derived from the predictions under the meal context of the
/// trace at each record's timestamp. Skipped windows have no adversarial
/// prediction and score zero.
pub fn build_risk_profile(
    trace: &PatientTrace,
    records: &[AttackRecord],
    table: &SeverityTable,
    thresholds: &Thresholds,
) -> Result<RiskProfile> {
    let mut rows: Vec<(i64, f64)> = Vec::with_capacity(records.len());
    for r in records {
        if r.patient_id != trace.patient_id {
            return Err(Error::PatientMismatch {
                expected: trace.patient_id.clone(),
                found: r.patient_id.clone(),
            });
        }
        let ctx = trace.meal_context_at(r.timestamp)?;
        let y = r.outcome.benign_prediction;
        let f = if r.outcome.attackable() {
            r.outcome.adversarial_prediction
        } else {
            y
        };
        let risk = instantaneous_risk(
            table,
            y,
            f,
            classify_state(y, ctx, thresholds),
            classify_state(f, ctx, thresholds),
        );
        rows.push((r.timestamp, risk));
    }
    rows.sort_by_key(|(t, _)| *t);
    Ok(RiskProfile {
        patient_id: trace.patient_id.clone(),
        timestamps: rows.iter().map(|(t, _)| *t).collect(),
        values: rows.iter().map(|(_, v)| *v).collect(),
    })
}
