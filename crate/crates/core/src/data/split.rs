use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CellRecord;
use crate::error::{Error, Result};

/// Number of minimum-SOH quantile buckets used for stratification.
const DEPTH_BUCKETS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Validation and test shares of 14/138 each (at least one cell each when
    /// there are three or more cells); the rest trains.
    pub fn proportional(n: usize) -> Self {
        let share = |n: usize| ((n as f64) * 14.0 / 138.0).round() as usize;
        let mut val = share(n);
        if n >= 3 {
            val = val.max(1);
        }
        let test = val;
        SplitSizes {
            train: n.saturating_sub(val + test),
            val,
            test,
        }
    }
}

/// Cell-level partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitAssignment {
    /// Indices into `cells` for each partition, in `cells` order.
    pub fn indices(&self, cells: &[CellRecord]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let pick = |ids: &[String]| -> Vec<usize> {
            cells
                .iter()
                .enumerate()
                .filter(|(_, c)| ids.contains(&c.cell_id))
                .map(|(i, _)| i)
                .collect()
        };
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// Split cells into train/val/test, stratified by the minimum SOH each cell
/// reaches.
///
/// Cells are sorted by minimum SOH and cut into four quantile buckets; each
/// bucket is shuffled with `seed`, and the concatenated bucket sequence is
/// dealt out so that every partition's running share tracks its target
/// fraction. Each bucket therefore contributes to each partition in proportion
/// to the partition sizes.
pub fn stratified_split(cells: &[CellRecord], sizes: SplitSizes, seed: u64) -> Result<SplitAssignment> {
    if sizes.total() != cells.len() {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} do not sum to {} cells",
            sizes.train,
            sizes.val,
            sizes.test,
            cells.len()
        )));
    }
    let mut depth: Vec<(f64, &str)> = cells.iter().map(|c| (c.min_soh(), c.cell_id.as_str())).collect();
    depth.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    let n = depth.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered: Vec<&str> = Vec::with_capacity(n);
    for b in 0..DEPTH_BUCKETS {
        let lo = b * n / DEPTH_BUCKETS;
        let hi = (b + 1) * n / DEPTH_BUCKETS;
        let mut bucket: Vec<&str> = depth[lo..hi].iter().map(|d| d.1).collect();
        bucket.shuffle(&mut rng);
        ordered.extend(bucket);
    }

    let targets = [sizes.train, sizes.val, sizes.test];
    let mut assigned = [0usize; 3];
    let mut parts: [Vec<String>; 3] = Default::default();
    for (i, id) in ordered.into_iter().enumerate() {
        let seen = (i + 1) as f64;
        let part = (0..3)
            .filter(|&p| assigned[p] < targets[p])
            .max_by(|&a, &b| {
                let deficit = |p: usize| targets[p] as f64 * seen / n as f64 - assigned[p] as f64;
                deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a))
            })
            .expect("sizes sum to cell count");
        assigned[part] += 1;
        parts[part].push(id.to_string());
    }
    let [train, val, test] = parts;
    Ok(SplitAssignment { train, val, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_support::cell_from_capacities;
    use std::collections::HashSet;

    fn fleet(n: usize) -> Vec<CellRecord> {
        (0..n)
            .map(|i| {
                let end = 0.75 + 0.2 * (i as f64 * 0.618).fract();
                cell_from_capacities(&format!("cell{i:03}"), (i % 3 + 1) as u8, &[1.1, 1.1 * end])
            })
            .collect()
    }

    #[test]
    fn full_fleet_split() {
        let cells = fleet(138);
        let sizes = SplitSizes { train: 110, val: 14, test: 14 };
        let s = stratified_split(&cells, sizes, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (110, 14, 14));
        let all: HashSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 138);
        let again = stratified_split(&cells, sizes, 3).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn every_partition_sees_deep_cells() {
        let cells = fleet(138);
        let s = stratified_split(&cells, SplitSizes { train: 110, val: 14, test: 14 }, 9).unwrap();
        let min_of = |ids: &[String]| {
            ids.iter()
                .map(|id| cells.iter().find(|c| &c.cell_id == id).unwrap().min_soh())
                .fold(f64::INFINITY, f64::min)
        };
        let q1 = {
            let mut m: Vec<f64> = cells.iter().map(|c| c.min_soh()).collect();
            m.sort_by(f64::total_cmp);
            m[138 / 4]
        };
        assert!(min_of(&s.val) < q1);
        assert!(min_of(&s.test) < q1);
    }

    #[test]
    fn three_cells_one_each() {
        let cells = vec![
            cell_from_capacities("a", 1, &[1.0, 0.80]),
            cell_from_capacities("b", 1, &[1.0, 0.90]),
            cell_from_capacities("c", 1, &[1.0, 0.95]),
        ];
        let s = stratified_split(&cells, SplitSizes { train: 1, val: 1, test: 1 }, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        let mut ids: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        ids.sort();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn size_mismatch_is_config_error() {
        let cells = fleet(10);
        let err = stratified_split(&cells, SplitSizes { train: 5, val: 2, test: 2 }, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn proportional_sizes() {
        assert_eq!(SplitSizes::proportional(138), SplitSizes { train: 110, val: 14, test: 14 });
        assert_eq!(SplitSizes::proportional(30).total(), 30);
        assert_eq!(SplitSizes::proportional(3), SplitSizes { train: 1, val: 1, test: 1 });
    }
}
