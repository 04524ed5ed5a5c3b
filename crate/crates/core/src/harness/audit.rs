use std::cell::RefCell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, LabeledSample, Splits};
use crate::error::Result;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    IdTest,
    OodTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Calibrate,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRead {
    pub phase: Phase,
    pub split: SplitName,
    pub samples: usize,
}

impl fmt::Display for SplitRead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} read {:?} ({} samples)", self.phase, self.split, self.samples)
    }
}

/// Split access that records which split was read in which phase.
pub struct SplitLoader {
    splits: Splits,
    id_test_len: usize,
    phase: RefCell<Phase>,
    log: RefCell<Vec<SplitRead>>,
}

impl SplitLoader {
    /// The split seed derives from the dataset seed, so training and
    /// evaluation always agree on the partition.
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let splits = split(dataset, SPLIT_RATIOS, dataset.spec.seed.wrapping_add(1))?;
        let id_test_len = splits.test.iter().filter(|s| !dataset.is_ood(s)).count();
        Ok(Self {
            splits,
            id_test_len,
            phase: RefCell::new(Phase::Train),
            log: RefCell::new(Vec::new()),
        })
    }

    pub fn enter(&self, phase: Phase) {
        *self.phase.borrow_mut() = phase;
    }

    fn record(&self, split: SplitName, samples: &[LabeledSample]) {
        self.log.borrow_mut().push(SplitRead {
            phase: *self.phase.borrow(),
            split,
            samples: samples.len(),
        });
    }

    pub fn train(&self) -> &[LabeledSample] {
        self.record(SplitName::Train, &self.splits.train);
        &self.splits.train
    }

    pub fn val(&self) -> &[LabeledSample] {
        self.record(SplitName::Val, &self.splits.val);
        &self.splits.val
    }

    pub fn id_test(&self) -> &[LabeledSample] {
        let s = &self.splits.test[..self.id_test_len];
        self.record(SplitName::IdTest, s);
        s
    }

    pub fn ood_test(&self) -> &[LabeledSample] {
        let s = &self.splits.test[self.id_test_len..];
        self.record(SplitName::OodTest, s);
        s
    }

    pub fn reads(&self) -> Vec<SplitRead> {
        self.log.borrow().clone()
    }
}
