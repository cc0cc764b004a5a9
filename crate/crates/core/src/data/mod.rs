//! Dataset ingestion, preprocessing and the synthetic phantom generator.

mod acdc;
mod nifti_io;
mod preprocess;
mod synthetic;

pub use acdc::{load_acdc_dir, load_acdc_subject, AcdcInfo, AcdcOptions};
pub use nifti_io::{load_labels, load_volume, load_volume_4d, save_field, save_labels, save_volume, save_volume_4d, RawVolume};
pub use preprocess::{preprocess, preprocess_labels, PreprocessOptions, TARGET_SPACING};
pub use synthetic::{make_synthetic_pair, make_synthetic_set, SyntheticOptions, SyntheticSubject};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DdmError, Result};
use crate::volume::{check_same_shape, SegmentationMap, Volume};

/// One subject: the end-diastolic/end-systolic pair, optional labels and the
/// length of its ground-truth temporal sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub ed: Volume,
    pub es: Volume,
    pub ed_seg: Option<SegmentationMap>,
    pub es_seg: Option<SegmentationMap>,
    pub n_frames: usize,
    /// Real frames strictly between ED and ES; evaluation only.
    pub intermediate_frames: Option<Vec<Volume>>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        let shape = self.ed.shape();
        check_same_shape("subject ES vs ED", shape, self.es.shape())?;
        for seg in [&self.ed_seg, &self.es_seg].into_iter().flatten() {
            check_same_shape("subject segmentation", shape, seg.shape())?;
        }
        if let Some(frames) = &self.intermediate_frames {
            for f in frames {
                check_same_shape("subject intermediate frame", shape, f.shape())?;
            }
        }
        if self.n_frames < 2 {
            return Err(DdmError::InvalidArgument(format!(
                "subject {} needs n_frames >= 2, got {}",
                self.id, self.n_frames
            )));
        }
        Ok(())
    }
}

/// Deterministic shuffled split by subject id.
pub fn split_dataset(
    records: Vec<SubjectRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    if records.is_empty() {
        return Err(DdmError::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DdmError::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = records.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DdmError::InvalidArgument(format!(
            "fraction {train_fraction} of {n} subjects leaves one side empty"
        )));
    }
    let mut records = records;
    // order by id first so the split does not depend on input order
    records.sort_by(|a, b| a.id.cmp(&b.id));
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = records.split_off(n_train);
    Ok((records, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dummy(id: usize) -> SubjectRecord {
        SubjectRecord {
            id: format!("s{id:03}"),
            ed: Volume::zeros([2, 2, 2]),
            es: Volume::zeros([2, 2, 2]),
            ed_seg: None,
            es_seg: None,
            n_frames: 2,
            intermediate_frames: None,
        }
    }

    #[test]
    fn ninety_ten_partition() {
        let recs: Vec<_> = (0..100).map(dummy).collect();
        let (train, test) = split_dataset(recs, 0.9, 3).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
        let a: HashSet<_> = train.iter().map(|r| r.id.clone()).collect();
        let b: HashSet<_> = test.iter().map(|r| r.id.clone()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 100);
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let recs: Vec<_> = (0..20).map(dummy).collect();
        let mut rev = recs.clone();
        rev.reverse();
        let (a, _) = split_dataset(recs.clone(), 0.7, 11).unwrap();
        let (b, _) = split_dataset(rev, 0.7, 11).unwrap();
        assert_eq!(
            a.iter().map(|r| &r.id).collect::<Vec<_>>(),
            b.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn two_records_half_split() {
        let (a, b) = split_dataset(vec![dummy(0), dummy(1)], 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_ne!(a[0].id, b[0].id);
    }

    #[test]
    fn rejects_degenerate_splits() {
        assert!(split_dataset(vec![], 0.5, 0).is_err());
        assert!(split_dataset(vec![dummy(0), dummy(1)], 0.1, 0).is_err());
        assert!(split_dataset(vec![dummy(0), dummy(1)], 1.0, 0).is_err());
    }
}
