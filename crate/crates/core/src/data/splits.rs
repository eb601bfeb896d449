//! Anti-bias splits that invert a location or length skew between train
//! and test.
//!
//! Records are divided into two side classes by a threshold in seconds on
//! their first moment. The train split takes every train-pool record of
//! side `A` plus a seeded sample of side `B` sized so that `A` makes up
//! `major_ratio` of the split. The test split does the same on the test
//! pool with the sides swapped. Pools come from each record's partition;
//! records without one are assigned by a stable hash of their ids.

use std::collections::HashSet;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{MomentAnnotation, Partition};
use crate::error::{Error, Result};

pub const DEFAULT_MAJOR_RATIO: f64 = 0.8;
pub const LEN_THRESHOLD_S: f64 = 10.0;
pub const MOM_THRESHOLD_S: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// `A`: moment length ≤ threshold; `B`: longer.
    Len,
    /// `A`: moment ends by the threshold; `B`: starts after it.
    Mom,
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "len" => Ok(SplitKind::Len),
            "mom" => Ok(SplitKind::Mom),
            other => Err(Error::InvalidArgument(format!("unknown split kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub threshold_s: f64,
    pub major_ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn len(seed: u64) -> Self {
        SplitSpec {
            kind: SplitKind::Len,
            threshold_s: LEN_THRESHOLD_S,
            major_ratio: DEFAULT_MAJOR_RATIO,
            seed,
        }
    }

    pub fn mom(seed: u64) -> Self {
        SplitSpec {
            kind: SplitKind::Mom,
            threshold_s: MOM_THRESHOLD_S,
            major_ratio: DEFAULT_MAJOR_RATIO,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.major_ratio > 0.0 && self.major_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "major ratio must lie in (0, 1), got {}",
                self.major_ratio
            )));
        }
        if !self.threshold_s.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }

    /// Side class of a record, or `None` when the rule leaves it unclassified.
    pub fn side(&self, a: &MomentAnnotation) -> Option<Side> {
        let (start, end) = a.primary_s();
        match self.kind {
            SplitKind::Len => Some(if end - start <= self.threshold_s { Side::A } else { Side::B }),
            SplitKind::Mom if end <= self.threshold_s => Some(Side::A),
            SplitKind::Mom if start > self.threshold_s => Some(Side::B),
            SplitKind::Mom => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Query ids of each split, majority members first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train_majority: Vec<String>,
    pub train_minority: Vec<String>,
    pub test_majority: Vec<String>,
    pub test_minority: Vec<String>,
}

impl Split {
    pub fn train(&self) -> Vec<String> {
        self.train_majority.iter().chain(&self.train_minority).cloned().collect()
    }

    pub fn test(&self) -> Vec<String> {
        self.test_majority.iter().chain(&self.test_minority).cloned().collect()
    }
}

/// Pool of a record; unpartitioned records fall to a stable 64-bit FNV-1a
/// hash of their ids so the assignment never depends on the split seed.
pub fn pool_of(a: &MomentAnnotation) -> Partition {
    if let Some(p) = a.partition {
        return p;
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in a.video_id.bytes().chain([0u8]).chain(a.query_id.bytes()) {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    if h >> 63 == 0 {
        Partition::Train
    } else {
        Partition::Test
    }
}

/// Minority size that makes `n_major` a `ratio` share, to the nearest item.
pub fn minority_size(n_major: usize, ratio: f64) -> usize {
    (n_major as f64 * (1.0 - ratio) / ratio).round() as usize
}

fn build_side(
    pool: &[&MomentAnnotation],
    spec: &SplitSpec,
    major: Side,
    stream: u64,
    what: &str,
) -> Result<(Vec<String>, Vec<String>)> {
    let majority: Vec<String> = pool
        .iter()
        .filter(|a| spec.side(a) == Some(major))
        .map(|a| a.query_id.clone())
        .collect();
    let mut candidates: Vec<&MomentAnnotation> = pool
        .iter()
        .copied()
        .filter(|a| spec.side(a).is_some_and(|s| s != major))
        .collect();
    if majority.is_empty() {
        return Err(Error::SplitUnsatisfiable(format!("{what} split has no majority records")));
    }
    let need = minority_size(majority.len(), spec.major_ratio);
    if need > candidates.len() {
        return Err(Error::SplitUnsatisfiable(format!(
            "{what} split needs {need} minority records beside {} majority ones, only {} available",
            majority.len(),
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| a.key().cmp(&b.key()));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    candidates.shuffle(&mut rng);
    let minority = candidates[..need].iter().map(|a| a.query_id.clone()).collect();
    Ok((majority, minority))
}

fn build(annotations: &[MomentAnnotation], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut ids = HashSet::new();
    for a in annotations {
        if !ids.insert(a.query_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate query id {}", a.query_id)));
        }
    }
    let (train_pool, test_pool): (Vec<&MomentAnnotation>, Vec<&MomentAnnotation>) =
        annotations.iter().partition(|a| pool_of(a) == Partition::Train);
    let (train_majority, train_minority) = build_side(&train_pool, spec, Side::A, 0, "train")?;
    let (test_majority, test_minority) = build_side(&test_pool, spec, Side::B, 1, "test")?;
    Ok(Split {
        train_majority,
        train_minority,
        test_majority,
        test_minority,
    })
}

/// Length-shift split: short moments dominate train, long ones dominate test.
pub fn build_len_split(annotations: &[MomentAnnotation], spec: &SplitSpec) -> Result<Split> {
    if spec.kind != SplitKind::Len {
        return Err(Error::InvalidArgument("length split needs a len spec".into()));
    }
    build(annotations, spec)
}

/// Position-shift split: early moments dominate train, late ones dominate
/// test. Moments straddling the threshold are left out.
pub fn build_mom_split(annotations: &[MomentAnnotation], spec: &SplitSpec) -> Result<Split> {
    if spec.kind != SplitKind::Mom {
        return Err(Error::InvalidArgument("moment split needs a mom spec".into()));
    }
    build(annotations, spec)
}

pub fn build_split(annotations: &[MomentAnnotation], spec: &SplitSpec) -> Result<Split> {
    match spec.kind {
        SplitKind::Len => build_len_split(annotations, spec),
        SplitKind::Mom => build_mom_split(annotations, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: usize, start: f64, end: f64, p: Partition) -> MomentAnnotation {
        MomentAnnotation::new(format!("v{id}"), format!("q{id}"), 30.0, vec![(start, end)])
            .unwrap()
            .with_partition(Some(p))
    }

    #[test]
    fn len_example() {
        let mut anns = Vec::new();
        let mut id = 0;
        let mut push = |n: usize, len: f64, p: Partition, anns: &mut Vec<MomentAnnotation>| {
            for _ in 0..n {
                anns.push(ann(id, 1.0, 1.0 + len, p));
                id += 1;
            }
        };
        push(80, 5.0, Partition::Train, &mut anns);
        push(50, 20.0, Partition::Train, &mut anns);
        push(80, 20.0, Partition::Test, &mut anns);
        push(40, 5.0, Partition::Test, &mut anns);
        let split = build_len_split(&anns, &SplitSpec::len(0)).unwrap();
        assert_eq!(split.train_majority.len(), 80);
        assert_eq!(split.train_minority.len(), 20);
        assert_eq!(split.test_majority.len(), 80);
        assert_eq!(split.test_minority.len(), 20);
    }

    #[test]
    fn mom_boundaries() {
        let spec = SplitSpec::mom(0);
        assert_eq!(spec.side(&ann(0, 10.0, 15.0, Partition::Train)), Some(Side::A));
        assert_eq!(spec.side(&ann(0, 14.0, 16.0, Partition::Train)), None);
        assert_eq!(spec.side(&ann(0, 15.0, 16.0, Partition::Train)), None);
        assert_eq!(spec.side(&ann(0, 15.5, 16.0, Partition::Train)), Some(Side::B));
    }

    #[test]
    fn len_boundary_is_inclusive() {
        let spec = SplitSpec::len(0);
        assert_eq!(spec.side(&ann(0, 0.0, 10.0, Partition::Train)), Some(Side::A));
        assert_eq!(spec.side(&ann(0, 0.0, 10.5, Partition::Train)), Some(Side::B));
    }

    #[test]
    fn unsatisfiable_ratio_is_reported() {
        let anns: Vec<_> = (0..10)
            .map(|i| ann(i, 1.0, 3.0, Partition::Train))
            .chain((10..20).map(|i| ann(i, 1.0, 29.0, Partition::Test)))
            .collect();
        assert!(matches!(
            build_len_split(&anns, &SplitSpec::len(0)),
            Err(Error::SplitUnsatisfiable(_))
        ));
    }

    #[test]
    fn seed_changes_only_minority() {
        let anns: Vec<_> = (0..200)
            .map(|i| {
                let p = if i % 2 == 0 { Partition::Train } else { Partition::Test };
                let len = 2.0 + (i * 7 % 25) as f64;
                ann(i, 0.5, 0.5 + len, p)
            })
            .collect();
        let a = build_len_split(&anns, &SplitSpec::len(1)).unwrap();
        let b = build_len_split(&anns, &SplitSpec::len(2)).unwrap();
        assert_eq!(a.train_majority, b.train_majority);
        assert_eq!(a.test_majority, b.test_majority);
        assert_ne!(a.train_minority, b.train_minority);
        assert_eq!(a, build_len_split(&anns, &SplitSpec::len(1)).unwrap());
    }

    #[test]
    fn unpartitioned_records_use_a_stable_pool() {
        let a = MomentAnnotation::new("v", "q", 30.0, vec![(1.0, 2.0)]).unwrap();
        assert_eq!(pool_of(&a), pool_of(&a.clone()));
        let n_train = (0..1000)
            .filter(|i| {
                let a = MomentAnnotation::new(format!("v{i}"), format!("q{i}"), 30.0, vec![(1.0, 2.0)]).unwrap();
                pool_of(&a) == Partition::Train
            })
            .count();
        assert!((400..600).contains(&n_train));
    }
}
