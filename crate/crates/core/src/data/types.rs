use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest glucose level present in the source dataset, in mg/dL.
pub const CGM_MAX: f64 = 499.0;

/// Carb intake within this many seconds before a timestamp makes it postprandial.
pub const POSTPRANDIAL_WINDOW_SECS: i64 = 2 * 60 * 60;

/// Nominal CGM cadence in seconds.
pub const DEFAULT_CADENCE: u32 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSample {
    /// Seconds since the trace epoch.
    pub timestamp: i64,
    /// mg/dL.
    pub cgm: f64,
    /// units/hr.
    pub basal: f64,
    /// units, 0 if none.
    pub bolus: f64,
    /// grams, 0 if none.
    pub carbs: f64,
    /// Optional dataset columns (heart rate, sleep, ...). Preserved, never read.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<f64>,
}

impl GlucoseSample {
    pub fn new(timestamp: i64, cgm: f64, basal: f64, bolus: f64, carbs: f64) -> Self {
        Self {
            timestamp,
            cgm,
            basal,
            bolus,
            carbs,
            extra: Vec::new(),
        }
    }

    pub(crate) fn validate(&self, row: usize) -> Result<()> {
        let bound = |field, value: f64, min, max| {
            if value.is_finite() && value >= min && value <= max {
                Ok(())
            } else {
                Err(Error::Bound {
                    row,
                    field,
                    value,
                    min,
                    max,
                })
            }
        };
        bound("cgm", self.cgm, 0.0, CGM_MAX)?;
        bound("basal", self.basal, 0.0, f64::MAX)?;
        bound("bolus", self.bolus, 0.0, f64::MAX)?;
        bound("carbs", self.carbs, 0.0, f64::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    A,
    B,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One victim's physiological time series at a fixed nominal cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrace {
    pub patient_id: String,
    pub subset: Subset,
    pub split: Split,
    /// Nominal sampling interval in seconds.
    pub cadence: u32,
    pub samples: Vec<GlucoseSample>,
    /// Names of the optional columns carried in `GlucoseSample::extra`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_columns: Vec<String>,
}

impl PatientTrace {
    /// Builds a trace, checking sample bounds and strict timestamp ordering.
    pub fn new(
        patient_id: impl Into<String>,
        subset: Subset,
        split: Split,
        cadence: u32,
        samples: Vec<GlucoseSample>,
    ) -> Result<Self> {
        let trace = Self {
            patient_id: patient_id.into(),
            subset,
            split,
            cadence,
            samples,
            extra_columns: Vec::new(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cadence == 0 {
            return Err(Error::Config(format!(
                "trace {}: cadence must be positive",
                self.patient_id
            )));
        }
        let mut prev: Option<i64> = None;
        for (row, s) in self.samples.iter().enumerate() {
            s.validate(row)?;
            if let Some(p) = prev {
                if s.timestamp <= p {
                    return Err(Error::NonMonotone {
                        row,
                        timestamp: s.timestamp,
                    });
                }
            }
            prev = Some(s.timestamp);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices `i` where the step from `i - 1` to `i` exceeds twice the cadence.
    pub fn gaps(&self) -> Vec<usize> {
        let limit = 2 * i64::from(self.cadence);
        self.samples
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].timestamp - w[0].timestamp > limit)
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Meal context at `t`, which must lie inside the trace span.
    pub fn meal_context_at(&self, t: i64) -> Result<MealContext> {
        let (start, end) = match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => (a.timestamp, b.timestamp),
            _ => return Err(Error::EmptyTrace(self.patient_id.clone())),
        };
        if t < start || t > end {
            return Err(Error::OutOfSpan { t, start, end });
        }
        // first sample strictly after t - window, last sample at or before t
        let lo = self
            .samples
            .partition_point(|s| s.timestamp <= t - POSTPRANDIAL_WINDOW_SECS);
        let hi = self.samples.partition_point(|s| s.timestamp <= t);
        let fed = self.samples[lo..hi].iter().any(|s| s.carbs > 0.0);
        Ok(if fed {
            MealContext::Postprandial
        } else {
            MealContext::Fasting
        })
    }

    /// Meal context for every sample, in order.
    pub fn meal_contexts(&self) -> Vec<MealContext> {
        let mut out = Vec::with_capacity(self.samples.len());
        let mut last_meal: Option<i64> = None;
        for s in &self.samples {
            if s.carbs > 0.0 {
                last_meal = Some(s.timestamp);
            }
            let fed = last_meal.is_some_and(|m| s.timestamp - m < POSTPRANDIAL_WINDOW_SECS);
            out.push(if fed {
                MealContext::Postprandial
            } else {
                MealContext::Fasting
            });
        }
        out
    }

    /// Diagnostic state of every benign sample.
    pub fn states(&self, thresholds: &Thresholds) -> Vec<DiagnosticState> {
        self.samples
            .iter()
            .zip(self.meal_contexts())
            .map(|(s, ctx)| classify_state(s.cgm, ctx, thresholds))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MealContext {
    Fasting,
    Postprandial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiagnosticState {
    Hypo,
    Normal,
    Hyper,
}

impl DiagnosticState {
    pub const ALL: [DiagnosticState; 3] = [Self::Hypo, Self::Normal, Self::Hyper];

    pub fn is_abnormal(self) -> bool {
        self != Self::Normal
    }
}

/// Glucose thresholds in mg/dL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub hypo: f64,
    pub hyper_fasting: f64,
    pub hyper_postprandial: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            hypo: 70.0,
            hyper_fasting: 125.0,
            hyper_postprandial: 180.0,
        }
    }
}

impl Thresholds {
    pub fn hyper(&self, context: MealContext) -> f64 {
        match context {
            MealContext::Fasting => self.hyper_fasting,
            MealContext::Postprandial => self.hyper_postprandial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.hypo
            && self.hypo < self.hyper_fasting
            && self.hypo < self.hyper_postprandial
            && self.hyper_fasting <= CGM_MAX
            && self.hyper_postprandial <= CGM_MAX;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "thresholds must satisfy 0 <= hypo < hyper <= {CGM_MAX}: {self:?}"
            )))
        }
    }
}

pub fn classify_state(glucose: f64, context: MealContext, thresholds: &Thresholds) -> DiagnosticState {
    if glucose > thresholds.hyper(context) {
        DiagnosticState::Hyper
    } else if glucose < thresholds.hypo {
        DiagnosticState::Hypo
    } else {
        DiagnosticState::Normal
    }
}

/// Normal-to-abnormal sample ratio of a benign trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalRatio {
    Finite(f64),
    /// The trace has no abnormal samples.
    Unbounded,
}

impl NormalRatio {
    pub fn as_f64(self) -> f64 {
        match self {
            NormalRatio::Finite(r) => r,
            NormalRatio::Unbounded => f64::INFINITY,
        }
    }
}

pub fn normal_to_abnormal_ratio(trace: &PatientTrace, thresholds: &Thresholds) -> Result<NormalRatio> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace(trace.patient_id.clone()));
    }
    let states = trace.states(thresholds);
    Ok(ratio_of_states(&states))
}

pub(crate) fn ratio_of_states(states: &[DiagnosticState]) -> NormalRatio {
    let normal = states.iter().filter(|s| !s.is_abnormal()).count();
    let abnormal = states.len() - normal;
    if abnormal == 0 {
        NormalRatio::Unbounded
    } else {
        NormalRatio::Finite(normal as f64 / abnormal as f64)
    }
}

pub(crate) fn normal_fraction(states: &[DiagnosticState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().filter(|s| !s.is_abnormal()).count() as f64 / states.len() as f64
}
