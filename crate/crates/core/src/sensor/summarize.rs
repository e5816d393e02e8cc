use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::SensorStore;
use super::windows::SensorContext;
use super::SensorError;
use crate::gateway::mock::completion;
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, ChatRole, Completion, Gateway};

/// Marks where serialized windows begin in the summarizer prompt.
pub const CONTEXT_MARKER: &str = "Sensor context:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReading {
    pub metric: String,
    pub mean: f64,
    pub units: String,
    pub min_uncertainty: f64,
    pub record_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorKnowledge {
    pub summary: String,
    pub metrics: Vec<String>,
    pub min_uncertainty: f64,
    /// `min_uncertainty >= threshold`; never derived from the summary text.
    pub reliable: bool,
    pub readings: Vec<MetricReading>,
}

impl SensorKnowledge {
    pub fn citations(&self) -> Vec<&str> {
        self.readings
            .iter()
            .flat_map(|r| r.record_ids.iter().map(String::as_str))
            .collect()
    }
}

/// Summarizer prompt: instruction system message plus query and windows.
pub fn summarizer_messages(query: &str, ctx: &SensorContext) -> Vec<ChatMessage> {
    let mut body = format!("Doctor query: {query}\n{CONTEXT_MARKER}\n");
    for (i, w) in ctx.windows.iter().enumerate() {
        body.push_str(&format!("[{}] {}\n", i + 1, w.text));
    }
    vec![
        ChatMessage::system(
            "You turn wearable sensor readings into a short note for a physician. Answer only what the \
             query asks, quote the numbers you rely on, and do not speculate beyond the readings.",
        ),
        ChatMessage::user(body),
    ]
}

/// Aggregates cited records per metric. Reliability comes from the records.
pub fn knowledge_from_context(
    summary: String,
    ctx: &SensorContext,
    sensors: &SensorStore,
    reliability_threshold: f64,
) -> SensorKnowledge {
    let mut per_metric: BTreeMap<String, (Vec<f64>, String, f64, Vec<String>)> = BTreeMap::new();
    for w in &ctx.windows {
        for id in &w.record_ids {
            if let Some(r) = sensors.record(&w.patient_id, id) {
                let e = per_metric
                    .entry(r.metric.clone())
                    .or_insert_with(|| (Vec::new(), r.units.clone(), 1.0, Vec::new()));
                if !e.3.contains(id) {
                    e.0.push(r.value);
                    e.2 = e.2.min(r.uncertainty);
                    e.3.push(id.clone());
                }
            }
        }
    }
    let readings: Vec<MetricReading> = per_metric
        .into_iter()
        .map(|(metric, (values, units, min_u, ids))| MetricReading {
            metric,
            mean: values.iter().sum::<f64>() / values.len() as f64,
            units,
            min_uncertainty: min_u,
            record_ids: ids,
        })
        .collect();
    let min_uncertainty = readings.iter().map(|r| r.min_uncertainty).fold(1.0, f64::min);
    SensorKnowledge {
        summary,
        metrics: readings.iter().map(|r| r.metric.clone()).collect(),
        min_uncertainty,
        reliable: min_uncertainty >= reliability_threshold,
        readings,
    }
}

pub fn summarize_sensor(
    gateway: &Gateway,
    query: &str,
    ctx: &SensorContext,
    sensors: &SensorStore,
    reliability_threshold: f64,
) -> Result<SensorKnowledge, SensorError> {
    if ctx.is_empty() {
        return Err(SensorError::EmptyContext);
    }
    let reply = gateway
        .chat(ChatRole::Summarizer, summarizer_messages(query, ctx))
        .map_err(SensorError::Summarizer)?;
    Ok(knowledge_from_context(reply.text, ctx, sensors, reliability_threshold))
}

/// Offline summarizer: restates the serialized windows it was given.
#[derive(Debug, Clone, Copy, Default)]
pub struct DigestSummarizer;

impl ChatBackend for DigestSummarizer {
    fn complete(&self, request: &ChatRequest) -> crate::gateway::Result<Completion> {
        let prompt = request.last_user().unwrap_or_default();
        let lines: Vec<&str> = prompt
            .split_once(CONTEXT_MARKER)
            .map(|(_, rest)| rest.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
            .unwrap_or_default();
        let text = if lines.is_empty() {
            "No sensor readings were provided.".to_string()
        } else {
            let bodies: Vec<&str> = lines
                .iter()
                .map(|l| l.split_once("] ").map_or(*l, |(_, b)| b))
                .collect();
            format!("Sensor summary: {}", bodies.join(" "))
        };
        Ok(completion(request, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{HashEmbedder, ScriptedBackend};
    use crate::gateway::ProviderProfile;
    use crate::sensor::records::RawRecord;
    use crate::sensor::windows::SensorWindow;
    use std::sync::Arc;

    fn store(values: &[f64]) -> SensorStore {
        let mut s = SensorStore::default();
        let rows = values
            .iter()
            .enumerate()
            .map(|(i, v)| RawRecord {
                patient_id: "p".into(),
                metric: "heart_rate_bpm".into(),
                timestamp: format!("2024-03-01T10:{:02}:00Z", i),
                value: v.to_string(),
                units: None,
            })
            .collect();
        s.ingest_records("p", rows);
        s
    }

    fn ctx(s: &SensorStore) -> SensorContext {
        let windows: Vec<SensorWindow> = s.hourly_windows("p", None);
        SensorContext {
            query: "heart rate?".into(),
            windows,
        }
    }

    fn gateway(backend: Arc<dyn ChatBackend>) -> Gateway {
        Gateway::new(ProviderProfile::default(), backend, Arc::new(HashEmbedder::default())).unwrap()
    }

    #[test]
    fn reliable_when_all_records_typical() {
        let s = store(&[70.0; 10]);
        let k = knowledge_from_context(String::new(), &ctx(&s), &s, 0.05);
        assert!(k.reliable);
        assert_eq!(k.min_uncertainty, 1.0);
        assert_eq!(k.readings[0].mean, 70.0);
    }

    #[test]
    fn outlier_makes_knowledge_unreliable() {
        // nine at 70, one far outlier: z of the outlier is 3 exactly
        let b = 10.0;
        let s = store(&[70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0 + b]);
        let k = knowledge_from_context(String::new(), &ctx(&s), &s, 0.05);
        let mean = 71.0;
        let sd = (0.9f64 * 1.0 + 0.1 * 81.0).sqrt();
        let expected = (-0.5 * ((80.0 - mean) / sd).powi(2)).exp();
        assert!((k.min_uncertainty - expected).abs() < 1e-12);
        assert!(!k.reliable);
    }

    #[test]
    fn scripted_summary_is_verbatim() {
        let s = store(&[70.0; 10]);
        let gw = gateway(Arc::new(ScriptedBackend::replying_always("Heart rate steady near 70 bpm.")));
        let k = summarize_sensor(&gw, "heart rate?", &ctx(&s), &s, 0.05).unwrap();
        assert_eq!(k.summary, "Heart rate steady near 70 bpm.");
    }

    #[test]
    fn empty_context_is_a_precondition_error() {
        let s = SensorStore::default();
        let gw = gateway(Arc::new(DigestSummarizer));
        assert!(matches!(
            summarize_sensor(&gw, "q", &SensorContext::default(), &s, 0.05),
            Err(SensorError::EmptyContext)
        ));
    }

    #[test]
    fn digest_restates_windows() {
        let s = store(&[70.0; 10]);
        let gw = gateway(Arc::new(DigestSummarizer));
        let k = summarize_sensor(&gw, "heart rate?", &ctx(&s), &s, 0.05).unwrap();
        assert!(k.summary.starts_with("Sensor summary: Wearable heart rate"));
    }
}
