//! Dataset resolution for the commands, and synthetic subjects written in the
//! ACDC directory layout so every command reads them like real data.

use std::path::Path;

use anyhow::Context;
use ddm_core::data::{
    load_acdc_dir, make_synthetic_set, save_field, save_labels, save_volume, save_volume_4d, split_dataset,
    AcdcOptions, SubjectRecord, SyntheticSubject, TARGET_SPACING,
};
use ddm_core::Volume;

use crate::config::RunConfig;

/// Which side of a configured split a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_all(cfg: &RunConfig) -> anyhow::Result<Vec<SubjectRecord>> {
    match &cfg.data.path {
        Some(dir) => {
            let opts = AcdcOptions {
                preprocess: cfg.data.preprocess.clone(),
                load_intermediate: cfg.data.load_intermediate,
            };
            load_acdc_dir(dir, &opts).with_context(|| format!("loading subjects from {}", dir.display()))
        }
        None => Ok(make_synthetic_set(cfg.synthetic.seed, cfg.synthetic.count, &cfg.synthetic.options)?
            .into_iter()
            .map(|s| s.record)
            .collect()),
    }
}

/// The configured subjects, restricted to one side of the split when a train
/// fraction is set.
pub fn load_split(cfg: &RunConfig, side: Split) -> anyhow::Result<Vec<SubjectRecord>> {
    let all = load_all(cfg)?;
    match cfg.data.train_fraction {
        None => Ok(all),
        Some(f) => {
            let (train, test) = split_dataset(all, f, cfg.train.seed)?;
            Ok(match side {
                Split::Train => train,
                Split::Test => test,
            })
        }
    }
}

/// Writes one subject as `<dir>/<id>/` with `Info.cfg`, ED/ES frames and
/// labels, the whole sequence as a 4D file, and the ground-truth field.
pub fn write_subject(root: &Path, s: &SyntheticSubject) -> anyhow::Result<()> {
    let r = &s.record;
    let dir = root.join(&r.id);
    std::fs::create_dir_all(&dir)?;
    let n = r.n_frames;
    std::fs::write(dir.join("Info.cfg"), format!("ED: 1\nES: {n}\nNbFrame: {n}\n"))?;
    let spacing = TARGET_SPACING;
    let with_spacing = |v: &Volume| Volume {
        data: v.data.clone(),
        spacing,
    };
    let name = |k: usize, suffix: &str| dir.join(format!("{}_frame{k:02}{suffix}.nii.gz", r.id));
    save_volume(name(1, ""), &with_spacing(&r.ed))?;
    save_volume(name(n, ""), &with_spacing(&r.es))?;
    if let (Some(a), Some(b)) = (&r.ed_seg, &r.es_seg) {
        save_labels(name(1, "_gt"), a, spacing)?;
        save_labels(name(n, "_gt"), b, spacing)?;
    }
    let mut seq = vec![with_spacing(&r.ed)];
    seq.extend(r.intermediate_frames.iter().flatten().map(with_spacing));
    seq.push(with_spacing(&r.es));
    save_volume_4d(dir.join(format!("{}_4d.nii.gz", r.id)), &seq)?;
    save_field(dir.join(format!("{}_field.nii.gz", r.id)), &s.field, spacing)?;
    Ok(())
}
