use std::collections::BTreeMap;

use chrono::{DateTime, Duration, DurationRound, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::records::{SensorRecord, SensorStore};
use super::SensorError;
use crate::gateway::Embedder;
use crate::vector_store::{
    ChunkKind, QueryFilter, SensorWindowSource, SourceDocument, TimeWindow, VectorStore,
};

const SOURCE_PREFIX: &str = "sensor";

/// One metric-hour of one patient, serialized for embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorWindow {
    pub source_id: String,
    pub patient_id: String,
    pub metric: String,
    pub hour_start: DateTime<Utc>,
    pub text: String,
    pub record_ids: Vec<String>,
    pub min_uncertainty: f64,
    /// Set when some covered record scores below the reliability threshold.
    pub deviation: bool,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorContext {
    pub query: String,
    pub windows: Vec<SensorWindow>,
}

impl SensorContext {
    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn record_ids(&self) -> Vec<&str> {
        self.windows
            .iter()
            .flat_map(|w| w.record_ids.iter().map(String::as_str))
            .collect()
    }
}

pub fn patient_prefix(patient_id: &str) -> String {
    format!("{SOURCE_PREFIX}/{patient_id}/")
}

pub fn window_source_id(patient_id: &str, metric: &str, hour: DateTime<Utc>) -> String {
    format!("{SOURCE_PREFIX}/{patient_id}/{metric}/{}", hour.format("%Y-%m-%dT%H"))
}

/// Inverse of [`window_source_id`].
pub fn parse_window_source_id(id: &str) -> Option<(String, String, DateTime<Utc>)> {
    let rest = id.strip_prefix(SOURCE_PREFIX)?.strip_prefix('/')?;
    let mut parts = rest.rsplitn(3, '/');
    let hour = parts.next()?;
    let metric = parts.next()?;
    let patient = parts.next()?;
    let hour = NaiveDateTime::parse_from_str(&format!("{hour}:00"), "%Y-%m-%dT%H:%M").ok()?;
    Some((patient.to_string(), metric.to_string(), hour.and_utc()))
}

fn hour_of(t: DateTime<Utc>) -> DateTime<Utc> {
    t.duration_trunc(Duration::hours(1)).expect("hour truncation")
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.1}")
    }
}

impl SensorStore {
    fn describe_hour(&self, patient_id: &str, metric: &str, hour: DateTime<Utc>, recs: &[&SensorRecord]) -> SensorWindow {
        let spec = self.catalog().get(metric);
        let label = spec.map_or(metric, |s| s.label.as_str());
        let units = recs.first().map_or("", |r| r.units.as_str());
        let n = recs.len() as f64;
        let mean = recs.iter().map(|r| r.value).sum::<f64>() / n;
        let lo = recs.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
        let hi = recs.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
        let min_uncertainty = recs.iter().map(|r| r.uncertainty).fold(1.0, f64::min);
        let end = hour + Duration::hours(1);
        let text = format!(
            "Wearable {label} of patient {patient_id} on {} between {} and {}: mean {} {units}, range {} to {} {units}, {} readings, lowest reliability {:.3}.",
            hour.format("%Y-%m-%d"),
            hour.format("%H:%M"),
            end.format("%H:%M"),
            fmt_num(mean),
            fmt_num(lo),
            fmt_num(hi),
            recs.len(),
            min_uncertainty,
        );
        SensorWindow {
            source_id: window_source_id(patient_id, metric, hour),
            patient_id: patient_id.to_string(),
            metric: metric.to_string(),
            hour_start: hour,
            text,
            record_ids: recs.iter().map(|r| r.id()).collect(),
            min_uncertainty,
            deviation: false,
            similarity: 0.0,
        }
    }

    /// Every metric-hour touched by a record inside `window`, each covering
    /// the full hour.
    pub fn hourly_windows(&self, patient_id: &str, window: Option<&TimeWindow>) -> Vec<SensorWindow> {
        let mut out = Vec::new();
        for metric in self.metrics_of(patient_id) {
            let series = self.series(patient_id, &metric);
            let mut hours: BTreeMap<DateTime<Utc>, Vec<&SensorRecord>> = BTreeMap::new();
            for r in series {
                hours.entry(hour_of(r.timestamp)).or_default().push(r);
            }
            for (hour, recs) in hours {
                let touched = window.is_none_or(|w| recs.iter().any(|r| w.contains(r.timestamp)));
                if touched {
                    out.push(self.describe_hour(patient_id, &metric, hour, &recs));
                }
            }
        }
        out
    }

    /// Current state of one window; `None` when the hour has no records.
    pub fn window(&self, source_id: &str) -> Option<SensorWindow> {
        let (patient, metric, hour) = parse_window_source_id(source_id)?;
        let recs: Vec<&SensorRecord> = self
            .series(&patient, &metric)
            .iter()
            .filter(|r| hour_of(r.timestamp) == hour)
            .collect();
        (!recs.is_empty()).then(|| self.describe_hour(&patient, &metric, hour, &recs))
    }

    pub fn window_documents_all(&self, patient_id: &str) -> Vec<SourceDocument> {
        self.hourly_windows(patient_id, None)
            .into_iter()
            .map(|w| SourceDocument {
                source_id: w.source_id,
                kind: ChunkKind::Sensor,
                text: w.text,
            })
            .collect()
    }
}

impl SensorWindowSource for SensorStore {
    fn window_documents(&self, patient_id: &str, window: &TimeWindow) -> Result<Vec<SourceDocument>, String> {
        if self.metrics_of(patient_id).is_empty() {
            return Err(format!("no sensor records for patient {patient_id}"));
        }
        Ok(self
            .hourly_windows(patient_id, Some(window))
            .into_iter()
            .map(|w| SourceDocument {
                source_id: w.source_id,
                kind: ChunkKind::Sensor,
                text: w.text,
            })
            .collect())
    }
}

/// Top-k sensor windows of one patient for the doctor's query. Counts as one
/// sensor read.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_sensor_context(
    store: &VectorStore,
    sensors: &SensorStore,
    embedder: &dyn Embedder,
    query: &str,
    patient_id: &str,
    k: usize,
    threshold: f64,
    reliability_threshold: f64,
) -> Result<SensorContext, SensorError> {
    sensors.note_read(patient_id);
    let filter = QueryFilter::kind(ChunkKind::Sensor).with_prefix(patient_prefix(patient_id));
    let hits = store
        .query_filtered(embedder, query, k, threshold, &filter)
        .map_err(SensorError::Store)?;
    let mut windows = Vec::new();
    for hit in hits {
        let Some(stored) = store.get(hit.chunk_id) else {
            continue;
        };
        // stale chunks whose records were deleted are skipped
        if let Some(mut w) = sensors.window(&stored.chunk.source_id) {
            w.similarity = hit.similarity;
            w.deviation = w.min_uncertainty < reliability_threshold;
            windows.push(w);
        }
    }
    Ok(SensorContext {
        query: query.to_string(),
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::HashEmbedder;
    use crate::sensor::records::RawRecord;
    use crate::vector_store::{ChunkPolicy, SyncEvent};
    use chrono::TimeZone;

    fn store_with(metrics: &[&str]) -> SensorStore {
        let mut s = SensorStore::default();
        let mut rows = Vec::new();
        for m in metrics {
            for h in 0..3 {
                for i in 0..4 {
                    rows.push(RawRecord {
                        patient_id: "p1".into(),
                        metric: m.to_string(),
                        timestamp: format!("2024-03-01T1{h}:{:02}:00Z", i * 15),
                        value: format!("{}", 60 + i),
                        units: None,
                    });
                }
            }
        }
        s.ingest_records("p1", rows);
        s
    }

    fn synced(s: &SensorStore) -> VectorStore {
        let mut vs = VectorStore::new();
        let e = HashEmbedder::default();
        let w = TimeWindow {
            start: Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap(),
            end: Utc.with_ymd_and_hms(2024, 3, 2, 0, 0, 0).unwrap(),
        };
        vs.synchronize(
            &SyncEvent::SensorHourly {
                patient_id: "p1".into(),
                window: w,
            },
            ChunkPolicy::default(),
            &e,
            s,
        )
        .unwrap();
        vs
    }

    #[test]
    fn source_id_round_trip() {
        let t = Utc.with_ymd_and_hms(2024, 3, 1, 14, 0, 0).unwrap();
        let id = window_source_id("p/x", "heart_rate_bpm", t);
        assert_eq!(parse_window_source_id(&id), Some(("p/x".into(), "heart_rate_bpm".into(), t)));
    }

    #[test]
    fn window_text_summarizes_hour() {
        let s = store_with(&["heart_rate_bpm"]);
        let w = &s.hourly_windows("p1", None)[0];
        assert!(w.text.contains("between 10:00 and 11:00"));
        assert!(w.text.contains("mean 61.5 bpm"));
        assert!(w.text.contains("range 60 to 63 bpm"));
        assert_eq!(w.record_ids.len(), 4);
    }

    #[test]
    fn single_metric_store_returns_only_that_metric() {
        let s = store_with(&["heart_rate_bpm"]);
        let vs = synced(&s);
        let ctx = retrieve_sensor_context(&vs, &s, &HashEmbedder::default(), "what is your heart rate", "p1", 3, 0.0, 0.05)
            .unwrap();
        assert!(!ctx.is_empty());
        assert!(ctx.windows.iter().all(|w| w.metric == "heart_rate_bpm"));
        assert_eq!(s.read_count("p1"), 1);
    }

    #[test]
    fn empty_store_gives_empty_context() {
        let s = SensorStore::default();
        let ctx = retrieve_sensor_context(&VectorStore::new(), &s, &HashEmbedder::default(), "heart rate", "p1", 3, 0.0, 0.05)
            .unwrap();
        assert!(ctx.is_empty());
    }

    #[test]
    fn other_patients_windows_excluded() {
        let s = store_with(&["heart_rate_bpm"]);
        let vs = synced(&s);
        let ctx =
            retrieve_sensor_context(&vs, &s, &HashEmbedder::default(), "heart rate", "p2", 3, 0.0, 0.05).unwrap();
        assert!(ctx.is_empty());
    }
}
