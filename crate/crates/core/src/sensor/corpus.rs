//! Synthetic labeled doctor queries for training the retrieval filter.
//!
//! Positives ask for something a wearable measures; negatives ask about
//! history, symptoms or context. Some of each class carry a long preamble
//! from the other vocabulary so the classifier cannot rely on length.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::filter::LabeledQuery;

const METRICS: &[&str] = &[
    "heart rate",
    "resting heart rate",
    "pulse",
    "oxygen saturation",
    "blood oxygen",
    "SpO2",
    "sleep score",
    "sleep quality",
    "step count",
    "daily steps",
    "stress level",
    "stress score",
    "breathing rate",
    "respiratory rate",
];

const DEVICES: &[&str] = &["smartwatch", "watch", "wearable", "fitness tracker", "wearable device"];

const TIMES: &[&str] = &[
    "today",
    "last night",
    "this week",
    "over the past few days",
    "right now",
    "since yesterday",
    "this morning",
];

const SYMPTOMS: &[&str] = &[
    "cough",
    "headache",
    "stomach pain",
    "nausea",
    "rash",
    "sore throat",
    "fever",
    "chest discomfort",
    "fatigue",
    "dizziness",
];

const CONDITIONS: &[&str] = &["diabetes", "asthma", "heart disease", "thyroid problems", "high blood pressure"];

const POSITIVE: &[&str] = &[
    "Can you tell me your {m} {t}?",
    "What does your {d} show for your {m} {t}?",
    "Could you check the {m} readings on your {d}?",
    "I would like to look at the {m} data from your {d}.",
    "Has your {d} recorded any change in your {m} {t}?",
    "Let me review the {m} your {d} measured {t}.",
    "Please share your {m} from your {d} {t}.",
    "Is your {m} higher than usual according to your {d}?",
];

const NEGATIVE: &[&str] = &[
    "How long have you had this {s}?",
    "Do you have any allergies to medications?",
    "Does the {s} get worse after eating?",
    "Have you noticed any {s} along with it?",
    "Is there a family history of {c}?",
    "Where exactly do you feel the {s}?",
    "Are you currently taking any medication for {c}?",
    "Have you traveled recently or been around anyone who was sick?",
    "On a scale from one to ten, how severe is the {s}?",
    "Did the {s} start suddenly or gradually?",
    "Have you ever been diagnosed with {c}?",
];

const PREAMBLES: &[&str] = &[
    "I understand the {s} has been bothering you for a while and that it affects your work",
    "Thank you for explaining how the {s} started and what you have tried so far",
    "Many things can cause {s}, and I want to be careful before drawing conclusions",
];

fn fill(template: &str, rng: &mut ChaCha8Rng) -> String {
    template
        .replace("{m}", METRICS.choose(rng).expect("non-empty"))
        .replace("{d}", DEVICES.choose(rng).expect("non-empty"))
        .replace("{t}", TIMES.choose(rng).expect("non-empty"))
        .replace("{s}", SYMPTOMS.choose(rng).expect("non-empty"))
        .replace("{c}", CONDITIONS.choose(rng).expect("non-empty"))
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `n` queries, alternating labels, fully determined by `seed`.
pub fn synthetic_queries(n: usize, seed: u64) -> Vec<LabeledQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let body = if positive {
                fill(POSITIVE.choose(&mut rng).expect("non-empty"), &mut rng)
            } else {
                fill(NEGATIVE.choose(&mut rng).expect("non-empty"), &mut rng)
            };
            let query = if rng.random_bool(0.25) {
                let pre = fill(PREAMBLES.choose(&mut rng).expect("non-empty"), &mut rng);
                format!("{pre}, so {}", lower_first(&body))
            } else {
                body
            };
            LabeledQuery::new(query, positive)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = synthetic_queries(20, 1);
        assert_eq!(a, synthetic_queries(20, 1));
        assert_ne!(a, synthetic_queries(20, 2));
        assert_eq!(a.iter().filter(|q| q.needs_sensor).count(), 10);
        assert!(a.iter().all(|q| !q.query.contains('{')));
    }
}
