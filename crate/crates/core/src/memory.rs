//! Fixed-budget, class-balanced exemplar memory of frozen embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};

use crate::embedding::Record;
use crate::error::{Error, Result};
use crate::rng;

/// Per-class quotas for `budget` exemplars over `num_classes` classes in
/// order: `⌊E/n⌋` each, the first `E mod n` classes getting one more.
pub fn quotas(budget: usize, num_classes: usize) -> Vec<usize> {
    if num_classes == 0 {
        return Vec::new();
    }
    let q = budget / num_classes;
    let rem = budget % num_classes;
    (0..num_classes).map(|i| q + usize::from(i < rem)).collect()
}

#[derive(Debug, Clone)]
pub struct ExemplarBuffer {
    budget: usize,
    entries: Vec<Record>,
    /// Classes already admitted, including any whose quota has fallen to zero.
    known: BTreeSet<usize>,
    rng: rng::Rng,
}

impl ExemplarBuffer {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self {
            budget,
            entries: Vec::new(),
            known: BTreeSet::new(),
            rng: rng::stream(seed, "exemplars"),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Record] {
        &self.entries
    }

    /// Stored count per class.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class_index).or_insert(0) += 1;
        }
        counts
    }

    /// Shrinks stored classes to their new quota and samples the classes not
    /// yet stored from `new_data`.
    ///
    /// `seen` lists every class seen so far in class order; its position decides
    /// which classes receive the remainder of the budget. A class with fewer
    /// samples than its quota is stored whole.
    pub fn rebalance_and_add(&mut self, new_data: &[&Record], seen: &[usize]) -> Result<()> {
        let position: BTreeMap<usize, usize> =
            seen.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if position.len() != seen.len() {
            return Err(Error::contract("seen classes contain duplicates"));
        }
        if let Some(c) = self.known.iter().find(|c| !position.contains_key(c)) {
            return Err(Error::contract(format!(
                "class {c} was admitted earlier but is missing from the seen classes"
            )));
        }
        let mut stored: BTreeMap<usize, Vec<Record>> = BTreeMap::new();
        for e in self.entries.drain(..) {
            if !position.contains_key(&e.class_index) {
                return Err(Error::contract(format!(
                    "buffer holds class {} which is not among the seen classes",
                    e.class_index
                )));
            }
            stored.entry(e.class_index).or_default().push(e);
        }

        let quota = quotas(self.budget, seen.len());
        let mut entries = Vec::with_capacity(self.budget);
        for (&class, &q) in seen.iter().zip(&quota) {
            let pool: Vec<&Record> = if self.known.contains(&class) {
                stored.get(&class).map(|r| r.iter().collect()).unwrap_or_default()
            } else {
                {
                    let fresh: Vec<&Record> = new_data
                        .iter()
                        .copied()
                        .filter(|r| r.class_index == class)
                        .collect();
                    if fresh.is_empty() {
                        return Err(Error::contract(format!(
                            "class {class} is new but has no samples in the task data"
                        )));
                    }
                    fresh
                }
            };
            if pool.len() <= q {
                entries.extend(pool.into_iter().cloned());
            } else {
                let mut picked = index::sample(&mut self.rng, pool.len(), q).into_vec();
                picked.sort_unstable();
                entries.extend(picked.into_iter().map(|i| pool[i].clone()));
            }
        }
        self.entries = entries;
        self.known.extend(seen.iter().copied());
        Ok(())
    }

    /// Entries in a seeded random order for replay.
    pub fn shuffled(&self, seed: u64) -> Vec<&Record> {
        let mut out: Vec<&Record> = self.entries.iter().collect();
        out.shuffle(&mut rng::stream(seed, "exemplars/replay"));
        out
    }
}
