use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Worst error seen so far for one genotype key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub worst_error: f64,
    pub evaluations: u64,
    pub first_seen_generation: usize,
}

/// Fitness cache keyed by canonical genotype key.
///
/// Re-evaluations never improve a key's score: the ledger keeps the maximum
/// error observed. Because max is commutative and associative, the final
/// state does not depend on the order in which records arrive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitnessLedger {
    entries: BTreeMap<String, LedgerEntry>,
}

impl FitnessLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one evaluation. `first_seen_generation` keeps the smallest
    /// generation reported for the key.
    pub fn record(&mut self, key: &str, error: f64, generation: usize) -> &LedgerEntry {
        debug_assert!(error >= 0.0, "errors are non-negative");
        let entry = self
            .entries
            .entry(key.to_string())
            .and_modify(|e| {
                e.worst_error = e.worst_error.max(error);
                e.evaluations += 1;
                e.first_seen_generation = e.first_seen_generation.min(generation);
            })
            .or_insert(LedgerEntry {
                worst_error: error,
                evaluations: 1,
                first_seen_generation: generation,
            });
        entry
    }

    pub fn get(&self, key: &str) -> Option<&LedgerEntry> {
        self.entries.get(key)
    }

    pub fn evaluations(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |e| e.evaluations)
    }

    pub fn worst_error(&self, key: &str) -> Option<f64> {
        self.entries.get(key).map(|e| e.worst_error)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LedgerEntry)> {
        self.entries.iter()
    }

    /// Key with the lowest worst-error; ties go to the earliest generation,
    /// then to key order.
    pub fn best(&self) -> Option<(&String, &LedgerEntry)> {
        self.entries.iter().min_by(|(ka, a), (kb, b)| {
            a.worst_error
                .total_cmp(&b.worst_error)
                .then(a.first_seen_generation.cmp(&b.first_seen_generation))
                .then(ka.cmp(kb))
        })
    }
}

/// Free-function form of [`FitnessLedger::record`].
pub fn record(ledger: &mut FitnessLedger, key: &str, error: f64) -> LedgerEntry {
    ledger.record(key, error, 0).clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worst_of_semantics() {
        let mut ledger = FitnessLedger::new();
        let e = record(&mut ledger, "k", 5.0);
        assert_eq!((e.worst_error, e.evaluations), (5.0, 1));
        let e = record(&mut ledger, "k", 3.0);
        assert_eq!((e.worst_error, e.evaluations), (5.0, 2));
        let e = record(&mut ledger, "k", 9.0);
        assert_eq!((e.worst_error, e.evaluations), (9.0, 3));
    }

    #[test]
    fn best_breaks_ties_by_age_then_key() {
        let mut ledger = FitnessLedger::new();
        ledger.record("b", 1.0, 3);
        ledger.record("a", 1.0, 3);
        ledger.record("c", 1.0, 1);
        ledger.record("d", 2.0, 0);
        assert_eq!(ledger.best().unwrap().0, "c");
        ledger.record("c", 4.0, 5);
        assert_eq!(ledger.best().unwrap().0, "a");
        assert_eq!(ledger.get("c").unwrap().first_seen_generation, 1);
    }
}
