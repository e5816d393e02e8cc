use chrono::Duration;
use serde::{Deserialize, Serialize};

use super::records::SensorRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyPolicy {
    /// Trailing baseline length ending at the newest record.
    pub baseline_days: i64,
    pub min_baseline_records: usize,
    /// Score used when no usable baseline exists.
    pub floor: f64,
}

impl Default for UncertaintyPolicy {
    fn default() -> Self {
        Self {
            baseline_days: 7,
            min_baseline_records: 8,
            floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub count: usize,
}

/// Gaussian fit over the trailing window of a time-sorted series.
pub fn fit_baseline(series: &[SensorRecord], policy: &UncertaintyPolicy) -> Option<Baseline> {
    let latest = series.last()?.timestamp;
    let start = latest - Duration::days(policy.baseline_days);
    let values: Vec<f64> = series
        .iter()
        .filter(|r| r.timestamp > start)
        .map(|r| r.value)
        .collect();
    if values.len() < policy.min_baseline_records {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Baseline {
        mean,
        std_dev: var.sqrt(),
        count: values.len(),
    })
}

/// pdf(value) / pdf(mean), in (0, 1].
pub fn gaussian_ratio(value: f64, baseline: &Baseline, floor: f64) -> f64 {
    if baseline.std_dev == 0.0 {
        return if value == baseline.mean { 1.0 } else { floor };
    }
    let z = (value - baseline.mean) / baseline.std_dev;
    (-0.5 * z * z).exp().max(f64::MIN_POSITIVE)
}

/// Scores every record of one (patient, metric) series in place.
pub fn profile_uncertainty(series: &mut [SensorRecord], policy: &UncertaintyPolicy) -> Option<Baseline> {
    let baseline = fit_baseline(series, policy);
    for r in series.iter_mut() {
        r.uncertainty = match &baseline {
            Some(b) => gaussian_ratio(r.value, b, policy.floor),
            None => policy.floor,
        };
    }
    baseline
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn series(values: &[f64]) -> Vec<SensorRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| SensorRecord {
                patient_id: "p".into(),
                metric: "heart_rate_bpm".into(),
                timestamp: Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap() + Duration::hours(i as i64),
                value: *v,
                units: "bpm".into(),
                uncertainty: 1.0,
            })
            .collect()
    }

    #[test]
    fn closed_form_ratios() {
        let b = Baseline {
            mean: 70.0,
            std_dev: 5.0,
            count: 10,
        };
        assert_eq!(gaussian_ratio(70.0, &b, 0.01), 1.0);
        assert!((gaussian_ratio(75.0, &b, 0.01) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((gaussian_ratio(85.0, &b, 0.01) - (-4.5f64).exp()).abs() < 1e-12);
        assert!(gaussian_ratio(85.0, &b, 0.01) < 0.05);
    }

    #[test]
    fn short_series_gets_floor() {
        let mut s = series(&[70.0; 5]);
        assert!(profile_uncertainty(&mut s, &UncertaintyPolicy::default()).is_none());
        assert!(s.iter().all(|r| r.uncertainty == 0.01));
    }

    #[test]
    fn zero_variance_baseline() {
        let mut s = series(&[70.0; 10]);
        profile_uncertainty(&mut s, &UncertaintyPolicy::default());
        assert!(s.iter().all(|r| r.uncertainty == 1.0));
        let b = Baseline {
            mean: 70.0,
            std_dev: 0.0,
            count: 10,
        };
        assert_eq!(gaussian_ratio(71.0, &b, 0.01), 0.01);
    }

    #[test]
    fn old_records_outside_baseline() {
        let mut s = series(&[200.0; 3]);
        for r in &mut s {
            r.timestamp -= Duration::days(30);
        }
        s.extend(series(&[60.0, 62.0, 64.0, 66.0, 68.0, 70.0, 72.0, 74.0]));
        let b = profile_uncertainty(&mut s, &UncertaintyPolicy::default()).unwrap();
        assert_eq!(b.count, 8);
        assert!((b.mean - 67.0).abs() < 1e-12);
        assert!(s[0].uncertainty < 1e-10);
    }

    proptest! {
        #[test]
        fn scores_bounded_and_monotone(values in prop::collection::vec(0.0f64..200.0, 8..40), probe_a in 0.0f64..100.0, probe_b in 0.0f64..100.0) {
            let mut s = series(&values);
            let policy = UncertaintyPolicy::default();
            if let Some(b) = profile_uncertainty(&mut s, &policy) {
                for r in &s {
                    prop_assert!(r.uncertainty > 0.0 && r.uncertainty <= 1.0);
                }
                prop_assert_eq!(gaussian_ratio(b.mean, &b, policy.floor), 1.0);
                let (near, far) = if probe_a <= probe_b { (probe_a, probe_b) } else { (probe_b, probe_a) };
                if b.std_dev > 0.0 {
                    prop_assert!(gaussian_ratio(b.mean + near, &b, policy.floor) >= gaussian_ratio(b.mean - far, &b, policy.floor));
                }
            }
        }
    }
}
