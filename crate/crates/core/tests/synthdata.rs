use vmix::synthdata::{make_dataset, DatasetConfig, Dimension};

/// Probability that a random positive outscores a random negative.
fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn calibration(size: usize) {
    let cfg = DatasetConfig {
        size,
        ..Default::default()
    };
    let samples = make_dataset(1000, 0, &cfg).unwrap();
    for d in Dimension::ALL {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for s in &samples {
            let v = s.scores.get(d);
            if s.assignment.is_positive(d.index()) {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        // binomial: sd of the positive count is sqrt(1000 * 0.25)
        let sd = (1000.0f64 * 0.25).sqrt();
        assert!(
            (pos.len() as f64 - 500.0).abs() <= 3.0 * sd,
            "{size}px {}: {} positives",
            d.name(),
            pos.len()
        );
        let a = auc(&pos, &neg);
        println!("{size}px {:<12} auc {a:.4}", d.name());
        assert!(a > 0.95, "{size}px {} separability {a}", d.name());
    }
}

#[test]
fn oracle_separates_each_dimension_at_32px() {
    calibration(32);
}

#[test]
fn oracle_separates_each_dimension_at_16px() {
    calibration(16);
}

#[test]
fn content_coverage_is_uniform() {
    let cfg = DatasetConfig {
        size: 16,
        ..Default::default()
    };
    let samples = make_dataset(240, 3, &cfg).unwrap();
    let mut counts = std::collections::HashMap::new();
    for s in &samples {
        *counts.entry(s.content).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 24);
    assert!(counts.values().all(|&c| c == 10));
}
