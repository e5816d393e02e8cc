use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::uncertainty::{profile_uncertainty, UncertaintyPolicy};
use super::SensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub units: String,
    /// Words used when the window is serialized for embedding.
    pub label: String,
    pub min: f64,
    pub max: f64,
}

impl MetricSpec {
    pub fn new(name: &str, units: &str, label: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            units: units.into(),
            label: label.into(),
            min,
            max,
        }
    }
}

/// Known metrics and their physical bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCatalog {
    metrics: BTreeMap<String, MetricSpec>,
}

impl Default for MetricCatalog {
    fn default() -> Self {
        let mut c = Self {
            metrics: BTreeMap::new(),
        };
        for spec in [
            MetricSpec::new("step_count", "steps", "step count (steps walked)", 0.0, 200_000.0),
            MetricSpec::new("sleep_score", "score", "sleep score (sleep quality)", 0.0, 100.0),
            MetricSpec::new("spo2_percent", "%", "blood oxygen saturation (SpO2)", 0.0, 100.0),
            MetricSpec::new("heart_rate_bpm", "bpm", "heart rate (pulse)", 20.0, 300.0),
            MetricSpec::new("stress_score", "score", "stress score (stress level)", 0.0, 100.0),
            MetricSpec::new("respiratory_rate", "breaths/min", "respiratory rate (breathing rate)", 0.0, 80.0),
        ] {
            c.add(spec);
        }
        c
    }
}

impl MetricCatalog {
    pub fn add(&mut self, spec: MetricSpec) {
        self.metrics.insert(spec.name.clone(), spec);
    }

    pub fn get(&self, name: &str) -> Option<&MetricSpec> {
        self.metrics.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricSpec> {
        self.metrics.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub patient_id: String,
    pub metric: String,
    pub timestamp: DateTime<Utc>,
    pub value: f64,
    pub units: String,
    /// 1 = fully reliable.
    #[serde(default = "one")]
    pub uncertainty: f64,
}

fn one() -> f64 {
    1.0
}

impl SensorRecord {
    /// Unique within a patient.
    pub fn id(&self) -> String {
        format!("{}@{}", self.metric, self.timestamp.format("%Y-%m-%dT%H:%M:%SZ"))
    }
}

/// Input row before validation. Units default to the catalog's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub patient_id: String,
    pub metric: String,
    pub timestamp: String,
    pub value: String,
    #[serde(default)]
    pub units: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based row (data rows for CSV, lines for JSON-lines).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    /// Accepted rows that overwrote an existing (patient, metric, timestamp).
    pub replaced: usize,
    pub rejected: Vec<Rejection>,
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

/// Parses CSV with header `patient_id,metric,timestamp,value[,units]`.
pub fn parse_csv(text: &str) -> Result<Vec<(usize, Result<RawRecord, String>)>, SensorError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| SensorError::Format(e.to_string()))?.clone();
    for col in ["patient_id", "metric", "timestamp", "value"] {
        if !headers.iter().any(|h| h == col) {
            return Err(SensorError::Format(format!("CSV header lacks `{col}`")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<RawRecord>().enumerate() {
        out.push((i + 1, row.map_err(|e| e.to_string())));
    }
    Ok(out)
}

/// Parses JSON-lines; blank lines are skipped but still counted.
pub fn parse_jsonl(text: &str) -> Vec<(usize, Result<RawRecord, String>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parsed = serde_json::from_str::<serde_json::Value>(l)
                .map_err(|e| e.to_string())
                .and_then(|mut v| {
                    // numbers and strings are both accepted for `value`
                    if let Some(x) = v.get_mut("value") {
                        if x.is_number() {
                            *x = serde_json::Value::String(x.to_string());
                        }
                    }
                    serde_json::from_value::<RawRecord>(v).map_err(|e| e.to_string())
                });
            (i + 1, parsed)
        })
        .collect()
}

/// Per-patient, per-metric time series with read accounting.
#[derive(Debug, Default)]
pub struct SensorStore {
    catalog: MetricCatalog,
    policy: UncertaintyPolicy,
    series: BTreeMap<(String, String), Vec<SensorRecord>>,
    reads: Mutex<HashMap<String, u64>>,
}

impl Clone for SensorStore {
    fn clone(&self) -> Self {
        Self {
            catalog: self.catalog.clone(),
            policy: self.policy,
            series: self.series.clone(),
            reads: Mutex::new(self.reads.lock().expect("reads lock").clone()),
        }
    }
}

impl SensorStore {
    pub fn new(catalog: MetricCatalog, policy: UncertaintyPolicy) -> Self {
        Self {
            catalog,
            policy,
            ..Self::default()
        }
    }

    pub fn catalog(&self) -> &MetricCatalog {
        &self.catalog
    }

    pub fn policy(&self) -> UncertaintyPolicy {
        self.policy
    }

    fn validate(&self, raw: RawRecord) -> Result<SensorRecord, String> {
        let spec = self
            .catalog
            .get(raw.metric.trim())
            .ok_or_else(|| format!("unknown metric `{}`", raw.metric))?;
        let timestamp =
            parse_timestamp(&raw.timestamp).ok_or_else(|| format!("bad timestamp `{}`", raw.timestamp))?;
        let value: f64 = raw
            .value
            .trim()
            .parse()
            .map_err(|_| format!("bad value `{}`", raw.value))?;
        if !value.is_finite() {
            return Err(format!("non-finite value `{}`", raw.value));
        }
        if value < spec.min || value > spec.max {
            return Err(format!(
                "bounds violation: {} = {value} outside [{}, {}]",
                spec.name, spec.min, spec.max
            ));
        }
        if let Some(u) = raw.units.as_deref().map(str::trim).filter(|u| !u.is_empty()) {
            if u != spec.units {
                return Err(format!("units `{u}` do not match `{}` for {}", spec.units, spec.name));
            }
        }
        if raw.patient_id.trim().is_empty() {
            return Err("empty patient_id".into());
        }
        Ok(SensorRecord {
            patient_id: raw.patient_id.trim().to_string(),
            metric: spec.name.clone(),
            timestamp,
            value,
            units: spec.units.clone(),
            uncertainty: 1.0,
        })
    }

    /// Validates and inserts rows, then re-profiles every touched series.
    pub fn ingest(&mut self, rows: Vec<(usize, Result<RawRecord, String>)>) -> IngestReport {
        let mut report = IngestReport::default();
        let mut touched = Vec::new();
        for (row, raw) in rows {
            match raw.and_then(|r| self.validate(r)) {
                Ok(rec) => {
                    let key = (rec.patient_id.clone(), rec.metric.clone());
                    let series = self.series.entry(key.clone()).or_default();
                    match series.binary_search_by(|r| r.timestamp.cmp(&rec.timestamp)) {
                        Ok(pos) => {
                            series[pos] = rec;
                            report.replaced += 1;
                        }
                        Err(pos) => series.insert(pos, rec),
                    }
                    report.accepted += 1;
                    if !touched.contains(&key) {
                        touched.push(key);
                    }
                }
                Err(reason) => report.rejected.push(Rejection { row, reason }),
            }
        }
        for key in touched {
            if let Some(series) = self.series.get_mut(&key) {
                profile_uncertainty(series, &self.policy);
            }
        }
        report
    }

    /// Ingests records for one patient; rows naming another patient are rejected.
    pub fn ingest_records(&mut self, patient_id: &str, records: Vec<RawRecord>) -> IngestReport {
        let rows = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let r = if r.patient_id.trim() == patient_id {
                    Ok(r)
                } else {
                    Err(format!("record for `{}` in batch for `{patient_id}`", r.patient_id))
                };
                (i + 1, r)
            })
            .collect();
        self.ingest(rows)
    }

    pub fn ingest_file(&mut self, path: impl AsRef<Path>) -> Result<IngestReport, SensorError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SensorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rows = if path.extension().is_some_and(|x| x == "csv") {
            parse_csv(&text)?
        } else {
            parse_jsonl(&text)
        };
        Ok(self.ingest(rows))
    }

    pub fn series(&self, patient_id: &str, metric: &str) -> &[SensorRecord] {
        self.series
            .get(&(patient_id.to_string(), metric.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    pub fn patients(&self) -> Vec<String> {
        let mut p: Vec<String> = self.series.keys().map(|(p, _)| p.clone()).collect();
        p.dedup();
        p
    }

    pub fn metrics_of(&self, patient_id: &str) -> Vec<String> {
        self.series
            .keys()
            .filter(|(p, _)| p == patient_id)
            .map(|(_, m)| m.clone())
            .collect()
    }

    pub fn records_of<'a>(&'a self, patient_id: &'a str) -> impl Iterator<Item = &'a SensorRecord> + 'a {
        self.series
            .iter()
            .filter(move |((p, _), _)| p == patient_id)
            .flat_map(|(_, s)| s.iter())
    }

    /// Looks a record up by [`SensorRecord::id`].
    pub fn record(&self, patient_id: &str, record_id: &str) -> Option<&SensorRecord> {
        let (metric, ts) = record_id.split_once('@')?;
        let ts = parse_timestamp(ts)?;
        let series = self.series(patient_id, metric);
        series
            .binary_search_by(|r| r.timestamp.cmp(&ts))
            .ok()
            .map(|i| &series[i])
    }

    pub fn len(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn note_read(&self, patient_id: &str) {
        *self
            .reads
            .lock()
            .expect("reads lock")
            .entry(patient_id.to_string())
            .or_insert(0) += 1;
    }

    /// Completed sensor retrievals for a patient.
    pub fn read_count(&self, patient_id: &str) -> u64 {
        self.reads
            .lock()
            .expect("reads lock")
            .get(patient_id)
            .copied()
            .unwrap_or(0)
    }

    /// Writes every record (with uncertainty) as JSON-lines.
    pub fn export_jsonl(&self, path: impl AsRef<Path>) -> Result<(), SensorError> {
        let path = path.as_ref();
        let io = |source| SensorError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        for rec in self.series.values().flatten() {
            let line = serde_json::to_string(rec).map_err(|e| SensorError::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(p: &str, m: &str, ts: &str, v: &str) -> RawRecord {
        RawRecord {
            patient_id: p.into(),
            metric: m.into(),
            timestamp: ts.into(),
            value: v.into(),
            units: None,
        }
    }

    #[test]
    fn three_heart_rate_records_accepted() {
        let mut s = SensorStore::default();
        let r = s.ingest_records(
            "p1",
            (0..3)
                .map(|i| raw("p1", "heart_rate_bpm", &format!("2024-03-01T10:0{i}:00Z"), "70"))
                .collect(),
        );
        assert_eq!(r.accepted, 3);
        assert!(r.rejected.is_empty());
    }

    #[test]
    fn spo2_above_100_rejected() {
        let mut s = SensorStore::default();
        let r = s.ingest_records("p1", vec![raw("p1", "spo2_percent", "2024-03-01T10:00:00Z", "130")]);
        assert_eq!(r.accepted, 0);
        assert!(r.rejected[0].reason.contains("bounds"));
    }

    #[test]
    fn duplicates_replace_and_stay_sorted() {
        let mut s = SensorStore::default();
        s.ingest_records(
            "p1",
            vec![
                raw("p1", "heart_rate_bpm", "2024-03-01T10:05:00Z", "80"),
                raw("p1", "heart_rate_bpm", "2024-03-01T10:00:00Z", "70"),
                raw("p1", "heart_rate_bpm", "2024-03-01T10:05:00Z", "85"),
            ],
        );
        let series = s.series("p1", "heart_rate_bpm");
        assert_eq!(series.len(), 2);
        assert!(series.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(series[1].value, 85.0);
    }

    #[test]
    fn csv_rows_counted() {
        let text = "patient_id,metric,timestamp,value\np1,heart_rate_bpm,2024-03-01T10:00:00Z,70\np1,heart_rate_bpm,bad,70\np1,spo2_percent,2024-03-01 10:00:00,97\n";
        let mut s = SensorStore::default();
        let r = s.ingest(parse_csv(text).unwrap());
        assert_eq!(r.accepted, 2);
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].row, 2);
    }

    #[test]
    fn jsonl_accepts_numeric_values() {
        let rows = parse_jsonl(
            r#"{"patient_id":"p","metric":"step_count","timestamp":"2024-03-01T00:00:00Z","value":1200}"#,
        );
        let mut s = SensorStore::default();
        assert_eq!(s.ingest(rows).accepted, 1);
    }

    #[test]
    fn record_lookup_by_id() {
        let mut s = SensorStore::default();
        s.ingest_records("p1", vec![raw("p1", "heart_rate_bpm", "2024-03-01T10:00:00Z", "70")]);
        let id = s.series("p1", "heart_rate_bpm")[0].id();
        assert_eq!(s.record("p1", &id).unwrap().value, 70.0);
    }

    #[test]
    fn read_counter_is_per_patient() {
        let s = SensorStore::default();
        s.note_read("a");
        s.note_read("a");
        assert_eq!(s.read_count("a"), 2);
        assert_eq!(s.read_count("b"), 0);
    }
}
