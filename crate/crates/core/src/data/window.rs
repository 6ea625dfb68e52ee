use serde::{Deserialize, Serialize};

use super::types::{MealContext, PatientTrace};
use crate::error::{Error, Result};

/// Feature channels of a window row, in storage order.
pub const FEATURES: [&str; 4] = ["cgm", "basal", "bolus", "carbs"];
pub const N_FEATURES: usize = FEATURES.len();
pub const CGM: usize = 0;

/// `history_len` consecutive samples, stored row-major as `[cgm, basal, bolus, carbs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    values: Vec<f64>,
}

impl FeatureWindow {
    pub fn from_rows(rows: &[[f64; N_FEATURES]]) -> Self {
        Self {
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() % N_FEATURES != 0 || values.is_empty() {
            return Err(Error::Shape {
                expected: N_FEATURES * (values.len() / N_FEATURES).max(1),
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    /// Window whose only non-zero channel is cgm.
    pub fn from_cgm(cgm: &[f64]) -> Self {
        let rows: Vec<_> = cgm.iter().map(|&g| [g, 0.0, 0.0, 0.0]).collect();
        Self::from_rows(&rows)
    }

    pub fn history_len(&self) -> usize {
        self.values.len() / N_FEATURES
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn cgm(&self, t: usize) -> f64 {
        self.values[t * N_FEATURES + CGM]
    }

    pub fn set_cgm(&mut self, t: usize, value: f64) {
        self.values[t * N_FEATURES + CGM] = value;
    }

    pub fn cgm_values(&self) -> Vec<f64> {
        (0..self.history_len()).map(|t| self.cgm(t)).collect()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * N_FEATURES..(t + 1) * N_FEATURES]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A forecasting example cut from a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub patient_id: String,
    /// Index of the first history sample in the source trace.
    pub start: usize,
    /// Timestamp of the last history sample (the prediction time).
    pub timestamp: i64,
    pub context: MealContext,
    pub features: FeatureWindow,
    /// Benign cgm `horizon` steps after the last history sample.
    pub target: f64,
}

/// Cuts `trace` into history/target pairs. Windows touching a gap wider than
/// twice the cadence, including the stretch up to the target, are dropped.
pub fn windowize(trace: &PatientTrace, history_len: usize, horizon: usize) -> Result<Vec<LabeledWindow>> {
    if history_len == 0 || horizon == 0 {
        return Err(Error::Config("history_len and horizon must be at least 1".into()));
    }
    let span = history_len + horizon;
    if trace.len() < span {
        return Err(Error::TraceTooShort {
            patient_id: trace.patient_id.clone(),
            len: trace.len(),
            needed: span,
        });
    }
    let limit = 2 * i64::from(trace.cadence);
    // broken[i]: the step from sample i to i+1 is a gap
    let broken: Vec<bool> = trace
        .samples
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp > limit)
        .collect();
    // prefix counts make the per-window gap test O(1)
    let mut prefix = vec![0usize; broken.len() + 1];
    for (i, &b) in broken.iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(b);
    }
    let contexts = trace.meal_contexts();

    let mut out = Vec::with_capacity(trace.len() - span + 1);
    for start in 0..=trace.len() - span {
        let last = start + history_len - 1;
        let target_idx = last + horizon;
        if prefix[target_idx] - prefix[start] > 0 {
            continue;
        }
        let rows: Vec<[f64; N_FEATURES]> = trace.samples[start..=last]
            .iter()
            .map(|s| [s.cgm, s.basal, s.bolus, s.carbs])
            .collect();
        out.push(LabeledWindow {
            patient_id: trace.patient_id.clone(),
            start,
            timestamp: trace.samples[last].timestamp,
            context: contexts[last],
            features: FeatureWindow::from_rows(&rows),
            target: trace.samples[target_idx].cgm,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::{GlucoseSample, Split, Subset};

    fn ramp(len: usize, shift_after: Option<(usize, i64)>) -> PatientTrace {
        let samples = (0..len)
            .map(|i| {
                let mut t = i as i64 * 300;
                if let Some((k, extra)) = shift_after {
                    if i >= k {
                        t += extra;
                    }
                }
                GlucoseSample::new(t, 100.0 + i as f64, 1.0, 0.0, 0.0)
            })
            .collect();
        PatientTrace::new("p", Subset::Synthetic, Split::Train, 300, samples).unwrap()
    }

    #[test]
    fn twenty_samples_give_three_windows() {
        let w = windowize(&ramp(20, None), 12, 6).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].features.history_len(), 12);
        // target sits horizon steps after the last history sample
        assert_eq!(w[0].target, 100.0 + 17.0);
        assert_eq!(w[2].target, 119.0);
        assert_eq!(w[1].timestamp, 12 * 300);
    }

    #[test]
    fn short_trace_is_an_error() {
        let err = windowize(&ramp(10, None), 12, 6).unwrap_err();
        assert!(matches!(err, Error::TraceTooShort { len: 10, needed: 18, .. }));
    }

    #[test]
    fn windows_straddling_a_gap_are_excluded() {
        // 30 min gap between samples 9 and 10; history 4, horizon 2.
        // Hand enumeration: start s covers steps s..s+4 (5 steps, indices s..=s+5).
        // Step 9->10 lies inside iff s <= 9 <= s + 4, i.e. s in 5..=9.
        // Valid starts: 0..=4 and 10..=14 -> 10 windows of the 15 possible.
        let trace = ramp(20, Some((10, 1800)));
        let w = windowize(&trace, 4, 2).unwrap();
        let starts: Vec<usize> = w.iter().map(|x| x.start).collect();
        assert_eq!(starts, vec![0, 1, 2, 3, 4, 10, 11, 12, 13, 14]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn count_matches_enumeration(
                steps in proptest::collection::vec(prop_oneof![4 => Just(300i64), 1 => 301i64..3000], 1..50),
                history in 1usize..8,
                horizon in 1usize..8,
            ) {
                let mut t = 0;
                let mut samples = vec![GlucoseSample::new(0, 100.0, 1.0, 0.0, 0.0)];
                for dt in &steps {
                    t += dt;
                    samples.push(GlucoseSample::new(t, 100.0, 1.0, 0.0, 0.0));
                }
                let trace = PatientTrace::new("p", Subset::A, Split::Train, 300, samples).unwrap();
                let len = trace.len();
                match windowize(&trace, history, horizon) {
                    Err(Error::TraceTooShort { .. }) => prop_assert!(len < history + horizon),
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                    Ok(w) => {
                        // brute force: every start whose steps all stay within 2x cadence
                        let expected = (0..=len - history - horizon)
                            .filter(|&s| (s..s + history + horizon - 1)
                                .all(|i| trace.samples[i + 1].timestamp - trace.samples[i].timestamp <= 600))
                            .count();
                        prop_assert_eq!(w.len(), expected);
                    }
                }
            }
        }
    }
}
