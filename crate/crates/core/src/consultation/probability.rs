//! Prior, guideline-based and fused disease probabilities.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ConsultationError;
use crate::gateway::{ChatMessage, ChatRole, Gateway};
use crate::guideline::{GuidelineTree, TreeCursor};
use crate::text::normalize_key;

pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Demographics {
    pub age_band: Option<String>,
    pub sex: Option<String>,
    pub region: Option<String>,
}

impl Demographics {
    pub fn is_empty(&self) -> bool {
        self.age_band.is_none() && self.sex.is_none() && self.region.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceRow {
    pub disease: String,
    pub age_band: String,
    pub sex: String,
    pub region: String,
    pub rate: f64,
}

/// Disease incidence per demographic band. `*` in a band column matches any
/// value, including an unknown one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidenceTable {
    rows: Vec<IncidenceRow>,
}

fn band_matches(row: &str, value: Option<&str>) -> Option<usize> {
    if row == WILDCARD {
        return Some(0);
    }
    match value {
        Some(v) if normalize_key(v) == normalize_key(row) => Some(1),
        _ => None,
    }
}

impl IncidenceTable {
    pub fn new(rows: Vec<IncidenceRow>) -> Result<Self, ConsultationError> {
        for r in &rows {
            if !r.rate.is_finite() || r.rate < 0.0 {
                return Err(ConsultationError::Knowledge(format!(
                    "incidence rate for {} must be a non-negative number",
                    r.disease
                )));
            }
        }
        Ok(Self { rows })
    }

    /// CSV with header `disease,age_band,sex,region,rate`.
    pub fn parse_csv(text: &str) -> Result<Self, ConsultationError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, r) in reader.deserialize::<IncidenceRow>().enumerate() {
            rows.push(r.map_err(|e| ConsultationError::Knowledge(format!("incidence row {}: {e}", i + 1)))?);
        }
        Self::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConsultationError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ConsultationError::Knowledge(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }

    pub fn rows(&self) -> &[IncidenceRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rate of the most specific matching row; earlier rows win ties.
    pub fn rate(&self, disease: &str, demo: &Demographics) -> Option<f64> {
        let d = normalize_key(disease);
        let mut best: Option<(usize, f64)> = None;
        for r in self.rows.iter().filter(|r| normalize_key(&r.disease) == d) {
            let score = band_matches(&r.age_band, demo.age_band.as_deref())
                .zip(band_matches(&r.sex, demo.sex.as_deref()))
                .zip(band_matches(&r.region, demo.region.as_deref()))
                .map(|((a, b), c)| a + b + c);
            if let Some(s) = score {
                if best.is_none_or(|(bs, _)| s > bs) {
                    best = Some((s, r.rate));
                }
            }
        }
        best.map(|(_, rate)| rate)
    }

    /// Incidence normalized over `diseases`. Uniform without demographics or
    /// without any known rate; an unknown rate takes the mean of known ones.
    pub fn demographics_probs(&self, diseases: &[&str], demo: &Demographics) -> Vec<f64> {
        let n = diseases.len();
        if n == 0 {
            return Vec::new();
        }
        let uniform = vec![1.0 / n as f64; n];
        if demo.is_empty() {
            return uniform;
        }
        let rates: Vec<Option<f64>> = diseases.iter().map(|d| self.rate(d, demo)).collect();
        let known: Vec<f64> = rates.iter().flatten().copied().collect();
        if known.is_empty() {
            return uniform;
        }
        let fill = known.iter().sum::<f64>() / known.len() as f64;
        let filled: Vec<f64> = rates.iter().map(|r| r.unwrap_or(fill)).collect();
        let total: f64 = filled.iter().sum();
        if total <= 0.0 {
            return uniform;
        }
        filled.iter().map(|r| r / total).collect()
    }
}

/// `w * similarity + (1 - w) * demographics`.
pub fn compute_prior(symptom_similarity: f64, demographics_prob: f64, w: f64) -> f64 {
    (w * symptom_similarity + (1.0 - w) * demographics_prob).clamp(0.0, 1.0)
}

/// Evidence ratio along the cursor; pinned to `prior` without a tree.
pub fn guideline_probability(
    cursor: Option<&TreeCursor>,
    tree: Option<&GuidelineTree>,
    prior: f64,
    epsilon: f64,
) -> f64 {
    let (Some(c), Some(t)) = (cursor, tree) else {
        return prior;
    };
    if let Some(d) = c.conclusion() {
        if t.confirms(d) {
            return 1.0;
        }
    }
    if c.contradicted || c.required_evidence == 0 {
        return epsilon;
    }
    (c.satisfied_evidence as f64 / c.required_evidence as f64).clamp(epsilon, 1.0)
}

/// Normalizes non-negative scores; all-zero input becomes uniform.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        let n = scores.len().max(1) as f64;
        return vec![1.0 / n; scores.len()];
    }
    scores.iter().map(|s| s / total).collect()
}

/// `prior^alpha * guideline^(1 - alpha)`, normalized. Factors are clamped to
/// the smallest positive float so no candidate reaches exactly zero.
pub fn fuse_deterministic(priors: &[f64], guidelines: &[f64], alpha: f64) -> Vec<f64> {
    let scores: Vec<f64> = priors
        .iter()
        .zip(guidelines)
        .map(|(p, g)| p.max(f64::MIN_POSITIVE).powf(alpha) * g.max(f64::MIN_POSITIVE).powf(1.0 - alpha))
        .collect();
    normalize(&scores)
}

/// Indices that survive pruning at `threshold`. The argmax always survives.
pub fn surviving(finals: &[f64], threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..finals.len()).filter(|&i| finals[i] >= threshold).collect();
    if keep.is_empty() && !finals.is_empty() {
        let best = (0..finals.len())
            .max_by(|&a, &b| finals[a].total_cmp(&finals[b]).then(b.cmp(&a)))
            .expect("non-empty");
        keep.push(best);
    }
    keep
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Deterministic,
    Llm,
}

pub fn fusion_messages(diseases: &[&str], priors: &[f64], guidelines: &[f64]) -> Vec<ChatMessage> {
    let mut table = String::from("disease | prior probability | guideline-based probability\n");
    for ((d, p), g) in diseases.iter().zip(priors).zip(guidelines) {
        table.push_str(&format!("{d} | {p:.4} | {g:.4}\n"));
    }
    vec![
        ChatMessage::system(
            "You combine two probability estimates per disease into one final estimate. Answer with one line \
             per disease in the form `disease: probability` and nothing else.",
        ),
        ChatMessage::user(table),
    ]
}

/// Per-disease estimates from `disease: p` lines, or `None` unless every
/// disease gets a finite non-negative value and the total is positive.
pub fn parse_fusion_reply(reply: &str, diseases: &[&str]) -> Option<Vec<f64>> {
    let mut out = vec![None; diseases.len()];
    for line in reply.lines() {
        let Some((name, value)) = line.rsplit_once(':') else {
            continue;
        };
        let name = normalize_key(name.trim().trim_start_matches(['-', '*']));
        let Ok(v) = value.trim().trim_end_matches('%').parse::<f64>() else {
            continue;
        };
        if let Some(i) = diseases.iter().position(|d| normalize_key(d) == name) {
            out[i] = Some(v);
        }
    }
    let values: Vec<f64> = out.into_iter().collect::<Option<_>>()?;
    (values.iter().all(|v| v.is_finite() && *v >= 0.0) && values.iter().sum::<f64>() > 0.0).then(|| normalize(&values))
}

/// Fusion through the doctor model; falls back to the deterministic rule
/// on provider or parse failure. Returns the probabilities and whether the
/// fallback was taken.
pub fn fuse_with_llm(
    gateway: &Gateway,
    diseases: &[&str],
    priors: &[f64],
    guidelines: &[f64],
    alpha: f64,
) -> (Vec<f64>, bool) {
    if diseases.len() <= 1 {
        return (fuse_deterministic(priors, guidelines, alpha), false);
    }
    let parsed = gateway
        .chat(ChatRole::Doctor, fusion_messages(diseases, priors, guidelines))
        .ok()
        .and_then(|c| parse_fusion_reply(&c.text, diseases));
    match parsed {
        Some(p) => (p, false),
        None => {
            tracing::warn!("llm fusion reply unusable; using the deterministic rule");
            (fuse_deterministic(priors, guidelines, alpha), true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{HashEmbedder, ScriptedBackend};
    use crate::gateway::ProviderProfile;
    use proptest::prelude::*;
    use std::sync::Arc;

    const CSV: &str = "disease,age_band,sex,region,rate\n\
                       gastritis,*,*,*,0.2\n\
                       gastritis,40-59,female,*,0.3\n\
                       hyperthyroidism,*,*,*,0.1\n";

    fn demo() -> Demographics {
        Demographics {
            age_band: Some("40-59".into()),
            sex: Some("female".into()),
            region: None,
        }
    }

    #[test]
    fn most_specific_row_wins() {
        let t = IncidenceTable::parse_csv(CSV).unwrap();
        assert_eq!(t.rate("Gastritis", &demo()), Some(0.3));
        assert_eq!(t.rate("gastritis", &Demographics::default()), Some(0.2));
        assert_eq!(t.rate("flu", &demo()), None);
    }

    #[test]
    fn demographics_fallbacks() {
        let t = IncidenceTable::parse_csv(CSV).unwrap();
        assert_eq!(t.demographics_probs(&["gastritis", "flu"], &Demographics::default()), vec![0.5, 0.5]);
        // unknown flu rate takes the mean of the known ones
        let p = t.demographics_probs(&["gastritis", "hyperthyroidism", "flu"], &demo());
        let fill = (0.3 + 0.1) / 2.0;
        let total = 0.3 + 0.1 + fill;
        assert!((p[0] - 0.3 / total).abs() < 1e-12);
        assert!((p[2] - fill / total).abs() < 1e-12);
    }

    #[test]
    fn prior_follows_incidence_at_equal_similarity() {
        let rows = vec![
            IncidenceRow {
                disease: "a".into(),
                age_band: "*".into(),
                sex: "*".into(),
                region: "*".into(),
                rate: 0.2,
            },
            IncidenceRow {
                disease: "b".into(),
                age_band: "*".into(),
                sex: "*".into(),
                region: "*".into(),
                rate: 0.1,
            },
        ];
        let t = IncidenceTable::new(rows).unwrap();
        let d = t.demographics_probs(&["a", "b"], &demo());
        let (pa, pb) = (compute_prior(0.7, d[0], 0.5), compute_prior(0.7, d[1], 0.5));
        assert!((pa - (0.35 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((pb - (0.35 + 0.5 / 3.0)).abs() < 1e-12);
        assert!(pa > pb);
    }

    #[test]
    fn prior_endpoint() {
        for w in [0.0, 0.3, 0.5, 1.0] {
            assert_eq!(compute_prior(1.0, 1.0, w), 1.0);
        }
    }

    #[test]
    fn two_candidate_fusion_matches_formula() {
        let f = fuse_deterministic(&[0.6, 0.4], &[0.9, 0.1], 0.3);
        let a = 0.6f64.powf(0.3) * 0.9f64.powf(0.7);
        let b = 0.4f64.powf(0.3) * 0.1f64.powf(0.7);
        assert!((f[0] - a / (a + b)).abs() < 1e-12);
        assert!((f[0] - 0.8402).abs() < 1e-4);
        assert!((f[0] + f[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_is_certain() {
        assert_eq!(fuse_deterministic(&[0.2], &[0.01], 0.3), vec![1.0]);
    }

    #[test]
    fn pruning_keeps_argmax() {
        assert_eq!(surviving(&[0.5, 0.03, 0.47], 0.05), vec![0, 2]);
        assert_eq!(surviving(&[0.01, 0.02], 0.05), vec![1]);
    }

    #[test]
    fn fusion_reply_parsing() {
        let d = ["gastritis", "hyperthyroidism"];
        let p = parse_fusion_reply("- Gastritis: 0.6\nhyperthyroidism: 0.2\n", &d).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!(parse_fusion_reply("gastritis: 0.6", &d).is_none());
        assert!(parse_fusion_reply("gastritis: x\nhyperthyroidism: 1", &d).is_none());
    }

    #[test]
    fn llm_fusion_falls_back() {
        let gw = Gateway::new(
            ProviderProfile::default(),
            Arc::new(ScriptedBackend::replying_always("no idea")),
            Arc::new(HashEmbedder::default()),
        )
        .unwrap();
        let (p, fell_back) = fuse_with_llm(&gw, &["a", "b"], &[0.6, 0.4], &[0.9, 0.1], 0.3);
        assert!(fell_back);
        assert_eq!(p, fuse_deterministic(&[0.6, 0.4], &[0.9, 0.1], 0.3));
    }

    proptest! {
        #[test]
        fn fused_probabilities_are_normalized(
            pairs in prop::collection::vec((0.0f64..=1.0, 0.01f64..=1.0), 1..8),
            alpha in 0.0f64..=1.0,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let f = fuse_deterministic(&p, &g, alpha);
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(f.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn argmax_invariant_under_prior_rescaling(
            pairs in prop::collection::vec((0.01f64..=1.0, 0.01f64..=1.0), 2..8),
            scale in 0.01f64..=100.0,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let scaled: Vec<f64> = p.iter().map(|x| x * scale).collect();
            let a = fuse_deterministic(&p, &g, 0.3);
            let b = fuse_deterministic(&scaled, &g, 0.3);
            let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
            prop_assert_eq!(argmax(&a), argmax(&b));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
