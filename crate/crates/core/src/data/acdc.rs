//! ACDC directory layout: `patientNNN/` folders holding `Info.cfg`,
//! `patientNNN_frameXX.nii.gz`, matching `_gt` label files and an optional
//! `patientNNN_4d.nii.gz` sequence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::nifti_io::{load_labels, load_volume, load_volume_4d, RawVolume};
use super::preprocess::{preprocess, preprocess_labels, PreprocessOptions};
use super::SubjectRecord;
use crate::error::{DdmError, Result};

/// The header fields of `Info.cfg` this pipeline needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcdcInfo {
    pub ed: usize,
    pub es: usize,
    pub n_frames_total: Option<usize>,
}

impl AcdcInfo {
    pub fn parse(text: &str) -> Result<Self> {
        let map: HashMap<String, String> = text
            .lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string()))
            .collect();
        let int = |key: &str| -> Result<Option<usize>> {
            map.get(key)
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| DdmError::InvalidArgument(format!("Info.cfg: {key} = {v:?} is not an integer")))
                })
                .transpose()
        };
        let ed = int("ed")?.ok_or_else(|| DdmError::InvalidArgument("Info.cfg: missing ED".into()))?;
        let es = int("es")?.ok_or_else(|| DdmError::InvalidArgument("Info.cfg: missing ES".into()))?;
        if ed == 0 || es <= ed {
            return Err(DdmError::InvalidArgument(format!(
                "Info.cfg: expected 1 <= ED < ES, got ED={ed} ES={es}"
            )));
        }
        Ok(Self {
            ed,
            es,
            n_frames_total: int("nbframe")?,
        })
    }

    /// Frames from ED to ES inclusive.
    pub fn sequence_len(&self) -> usize {
        self.es - self.ed + 1
    }
}

#[derive(Clone, Debug, Default)]
pub struct AcdcOptions {
    pub preprocess: PreprocessOptions,
    /// Load real in-between frames from the 4D file (evaluation only).
    pub load_intermediate: bool,
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn require_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    find_file(dir, stem).ok_or_else(|| DdmError::Read {
        path: dir.join(format!("{stem}.nii.gz")),
        reason: "file not found".into(),
    })
}

pub fn load_acdc_subject(dir: impl AsRef<Path>, opts: &AcdcOptions) -> Result<SubjectRecord> {
    let dir = dir.as_ref();
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "subject".into());
    let info_path = dir.join("Info.cfg");
    let text = std::fs::read_to_string(&info_path).map_err(|e| DdmError::Read {
        path: info_path.clone(),
        reason: e.to_string(),
    })?;
    let info = AcdcInfo::parse(&text)?;

    let frame = |n: usize| format!("{id}_frame{n:02}");
    let ed_raw = load_volume(require_file(dir, &frame(info.ed))?)?;
    let es_raw = load_volume(require_file(dir, &frame(info.es))?)?;
    let pp = &opts.preprocess;
    let ed = preprocess(&ed_raw, pp)?;
    let es = preprocess(&es_raw, pp)?;

    let seg = |n: usize| -> Result<Option<_>> {
        match find_file(dir, &format!("{}_gt", frame(n))) {
            Some(p) => {
                let (labels, spacing) = load_labels(p)?;
                Ok(Some(preprocess_labels(&labels, spacing, pp)))
            }
            None => Ok(None),
        }
    };
    let ed_seg = seg(info.ed)?;
    let es_seg = seg(info.es)?;

    let intermediate_frames = match (opts.load_intermediate, find_file(dir, &format!("{id}_4d"))) {
        (true, Some(p)) => {
            let (frames, spacing) = load_volume_4d(&p)?;
            if frames.len() < info.es {
                return Err(DdmError::Read {
                    path: p,
                    reason: format!("4D file has {} frames but ES is frame {}", frames.len(), info.es),
                });
            }
            // frame numbers are 1-based
            let mid = frames[info.ed..info.es - 1]
                .iter()
                .map(|f| preprocess(&RawVolume { data: f.clone(), spacing }, pp))
                .collect::<Result<Vec<_>>>()?;
            Some(mid)
        }
        _ => None,
    };

    let record = SubjectRecord {
        id,
        ed,
        es,
        ed_seg,
        es_seg,
        n_frames: info.sequence_len(),
        intermediate_frames,
    };
    record.validate()?;
    Ok(record)
}

/// Every subdirectory (searched up to two levels deep) holding an `Info.cfg`,
/// sorted by id. `root` itself counts if it holds one.
pub fn load_acdc_dir(root: impl AsRef<Path>, opts: &AcdcOptions) -> Result<Vec<SubjectRecord>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    collect_subject_dirs(root, 2, &mut dirs)?;
    if dirs.is_empty() {
        return Err(DdmError::Read {
            path: root.to_path_buf(),
            reason: "no subject directories with Info.cfg found".into(),
        });
    }
    dirs.sort();
    dirs.iter().map(|d| load_acdc_subject(d, opts)).collect()
}

fn collect_subject_dirs(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("Info.cfg").is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| DdmError::Read {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            collect_subject_dirs(&path, depth - 1, out)?;
        }
    }
    Ok(())
}
