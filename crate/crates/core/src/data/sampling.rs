use super::{classify_stage, Window};

/// Per-window sampling probability proportional to the inverse of its aging
/// stage population, normalised to sum to 1. Every non-empty stage receives
/// the same total mass.
pub fn inverse_frequency_weights(windows: &[Window]) -> Vec<f64> {
    let mut counts = [0usize; 4];
    let stages: Vec<usize> = windows.iter().map(|w| classify_stage(w.soh_now).index()).collect();
    for &s in &stages {
        counts[s] += 1;
    }
    let raw: Vec<f64> = stages.iter().map(|&s| 1.0 / counts[s] as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn window(soh: f64) -> Window {
        Window {
            cell_id: Arc::from("c"),
            cell_index: 0,
            start: 1,
            width: 1,
            anchor_cycle: 2,
            action: 1.0,
            soh_now: soh,
            soh_future: vec![soh],
            resistance_last: 0.02,
            resistance_initial: 0.02,
            voltage_drop: 0.1,
        }
    }

    fn stage_mass(ws: &[Window], weights: &[f64]) -> [f64; 4] {
        let mut m = [0.0; 4];
        for (w, p) in ws.iter().zip(weights) {
            m[classify_stage(w.soh_now).index()] += p;
        }
        m
    }

    #[test]
    fn skewed_counts_equalise() {
        let mut ws = vec![window(0.97); 83];
        ws.extend(vec![window(0.92); 11]);
        ws.extend(vec![window(0.87); 6]);
        let p = inverse_frequency_weights(&ws);
        let m = stage_mass(&ws, &p);
        for s in &m[..3] {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(m[3], 0.0);
    }

    #[test]
    fn single_stage_is_uniform() {
        let ws = vec![window(0.99); 7];
        let p = inverse_frequency_weights(&ws);
        assert!(p.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn rarer_stage_weighs_more() {
        let ws = vec![window(0.99), window(0.98), window(0.91)];
        let p = inverse_frequency_weights(&ws);
        assert!((p[2] - 2.0 * p[0]).abs() < 1e-15);
        assert_eq!(p[0], p[1]);
    }

    proptest! {
        #[test]
        fn weights_positive_and_normalised(sohs in proptest::collection::vec(0.6f64..1.1, 1..200)) {
            let ws: Vec<Window> = sohs.iter().map(|&s| window(s)).collect();
            let p = inverse_frequency_weights(&ws);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
