//! Rule-based pair filtering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::edit::EditPairSample;

pub const MIN_COVERAGE: f64 = 0.01;
pub const MAX_COVERAGE: f64 = 0.90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NonEditRegionMismatch,
    EmptyMask,
    CoverageOutOfRange,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::NonEditRegionMismatch => "non-edit-region mismatch",
            RejectReason::EmptyMask => "empty mask",
            RejectReason::CoverageOutOfRange => "mask coverage out of range",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub accepted: usize,
    /// `(sample index, reason)` for every rejection, in input order.
    pub rejected: Vec<(usize, RejectReason)>,
}

impl FilterReport {
    pub fn counts(&self) -> BTreeMap<RejectReason, usize> {
        let mut m = BTreeMap::new();
        for &(_, r) in &self.rejected {
            *m.entry(r).or_insert(0) += 1;
        }
        m
    }
}

/// First rule the sample violates, if any. Rules are checked in a fixed order.
pub fn check_pair(s: &EditPairSample) -> Option<RejectReason> {
    let mask = s.edit_mask.data();
    let plane = mask.len();
    let channels = s.src_image.len() / plane.max(1);
    for c in 0..channels {
        for (i, &m) in mask.iter().enumerate() {
            let k = c * plane + i;
            if m == 0.0 && s.src_image.data()[k] != s.edit_image.data()[k] {
                return Some(RejectReason::NonEditRegionMismatch);
            }
        }
    }
    if s.task.kind().is_local() {
        let covered = mask.iter().filter(|&&m| m != 0.0).count();
        if covered == 0 {
            return Some(RejectReason::EmptyMask);
        }
        let frac = covered as f64 / plane as f64;
        if !(MIN_COVERAGE..=MAX_COVERAGE).contains(&frac) {
            return Some(RejectReason::CoverageOutOfRange);
        }
    }
    None
}

pub fn filter_pairs(samples: Vec<EditPairSample>) -> (Vec<EditPairSample>, FilterReport) {
    let mut report = FilterReport {
        total: samples.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(samples.len());
    for (i, s) in samples.into_iter().enumerate() {
        match check_pair(&s) {
            None => kept.push(s),
            Some(r) => report.rejected.push((i, r)),
        }
    }
    report.accepted = kept.len();
    (kept, report)
}
