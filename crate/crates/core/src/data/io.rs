//! Trace ingestion and export.
//!
//! A trace file is a CSV with header `timestamp,cgm,basal,bolus,carbs[,extra...]`
//! and integer-second timestamps. A cohort manifest is a JSON document listing
//! one entry per trace file, with paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{GlucoseSample, PatientTrace, Split, Subset, DEFAULT_CADENCE};
use crate::error::{Error, Result};

const REQUIRED_COLUMNS: [&str; 5] = ["timestamp", "cgm", "basal", "bolus", "carbs"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    /// A single trace CSV; the patient id is the file stem.
    Csv,
    /// A cohort manifest JSON pointing at trace CSVs.
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub subset: Subset,
    pub split: Split,
    pub file: PathBuf,
    #[serde(default = "default_cadence")]
    pub cadence: u32,
}

fn default_cadence() -> u32 {
    DEFAULT_CADENCE
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub traces: Vec<ManifestEntry>,
}

pub fn load_traces(path: &Path, format: TraceFormat) -> Result<Vec<PatientTrace>> {
    match format {
        TraceFormat::Csv => {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("patient")
                .to_string();
            let entry = ManifestEntry {
                patient_id: id,
                subset: Subset::Synthetic,
                split: Split::Train,
                file: path.to_path_buf(),
                cadence: DEFAULT_CADENCE,
            };
            Ok(vec![read_trace_csv(path, &entry)?])
        }
        TraceFormat::Manifest => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let manifest: CohortManifest = serde_json::from_str(&text)?;
            let base = path.parent().unwrap_or(Path::new("."));
            manifest
                .traces
                .iter()
                .map(|entry| read_trace_csv(&base.join(&entry.file), entry))
                .collect()
        }
    }
}

fn read_trace_csv(path: &Path, entry: &ManifestEntry) -> Result<PatientTrace> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(file, entry)
}

/// Parses trace CSV text. Row numbers in errors count data rows from 0.
pub fn parse_trace_csv(reader: impl std::io::Read, entry: &ManifestEntry) -> Result<PatientTrace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < REQUIRED_COLUMNS.len() || names[..REQUIRED_COLUMNS.len()] != REQUIRED_COLUMNS {
        return Err(Error::Parse {
            row: 0,
            message: format!("header must start with {}", REQUIRED_COLUMNS.join(",")),
        });
    }
    let extra_columns: Vec<String> = names[REQUIRED_COLUMNS.len()..].iter().map(|s| s.to_string()).collect();

    let mut samples = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let num = |i: usize| -> Result<f64> {
            let field = record.get(i).unwrap_or("");
            if field.is_empty() && i >= REQUIRED_COLUMNS.len() {
                return Ok(f64::NAN);
            }
            field.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("column {} = {field:?} is not a number", names[i]),
            })
        };
        let ts_field = record.get(0).unwrap_or("");
        let timestamp = ts_field.parse::<i64>().map_err(|_| Error::Parse {
            row,
            message: format!("timestamp {ts_field:?} is not an integer"),
        })?;
        let sample = GlucoseSample {
            timestamp,
            cgm: num(1)?,
            basal: num(2)?,
            bolus: num(3)?,
            carbs: num(4)?,
            extra: (REQUIRED_COLUMNS.len()..names.len()).map(num).collect::<Result<_>>()?,
        };
        samples.push(sample);
    }
    let mut trace = PatientTrace::new(
        entry.patient_id.clone(),
        entry.subset,
        entry.split,
        entry.cadence,
        samples,
    )?;
    trace.extra_columns = extra_columns;
    Ok(trace)
}

pub fn write_trace_csv(path: &Path, trace: &PatientTrace) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            message: format!("{other:?}"),
        },
    })?;
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(trace.extra_columns.iter().cloned());
    wtr.write_record(&header)?;
    for s in &trace.samples {
        let mut rec = vec![
            s.timestamp.to_string(),
            fmt_f64(s.cgm),
            fmt_f64(s.basal),
            fmt_f64(s.bolus),
            fmt_f64(s.carbs),
        ];
        rec.extend(s.extra.iter().map(|v| if v.is_nan() { String::new() } else { fmt_f64(*v) }));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes every trace as `<dir>/<patient>_<split>.csv` plus `<dir>/manifest.json`.
pub fn write_cohort(dir: &Path, traces: &[PatientTrace]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CohortManifest::default();
    for trace in traces {
        let split = match trace.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let file = PathBuf::from(format!("{}_{split}.csv", trace.patient_id));
        write_trace_csv(&dir.join(&file), trace)?;
        manifest.traces.push(ManifestEntry {
            patient_id: trace.patient_id.clone(),
            subset: trace.subset,
            split: trace.split,
            file,
            cadence: trace.cadence,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Shortest decimal that round-trips to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
