//! Per-subject evaluation against real frames and labels, and the aggregate
//! report (PSNR, NMSE, Dice, Time).

use std::time::Instant;

use ddm_core::data::SubjectRecord;
use ddm_core::field_ops::warp_nearest;
use ddm_core::generator::{baseline_scaled_sequence, generate_sequence, Frame};
use ddm_core::losses::{dice, nmse, psnr};
use ddm_core::networks::{ModelKind, ModelWeights};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub frames: usize,
    /// "intermediate" when real in-between frames were compared, else "endpoint".
    pub reference: String,
    pub psnr: f64,
    pub nmse: f64,
    /// Mean Dice of the source labels warped by the γ=1 field.
    pub dice: Option<f64>,
    pub dice_per_label: Vec<(u16, f64)>,
    /// Dice of the unwarped source labels, for comparison.
    pub dice_initial: Option<f64>,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Columns {
    #[serde(rename = "PSNR")]
    pub psnr: Summary,
    #[serde(rename = "NMSE")]
    pub nmse: Summary,
    #[serde(rename = "Dice")]
    pub dice: Option<Summary>,
    #[serde(rename = "Time")]
    pub time: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub subjects: usize,
    pub metrics: Columns,
}

fn sequence(w: &ModelWeights, r: &SubjectRecord, n: usize) -> ddm_core::Result<Vec<Frame>> {
    match w.kind {
        ModelKind::Ddm => generate_sequence(w, &r.ed, &r.es, n),
        ModelKind::Direct => baseline_scaled_sequence(w, &r.ed, &r.es, n),
    }
}

pub fn evaluate_subject(w: &ModelWeights, r: &SubjectRecord) -> ddm_core::Result<SubjectMetrics> {
    r.validate()?;
    let n = r.n_frames;
    let start = Instant::now();
    let frames = sequence(w, r, n)?;
    let time = start.elapsed().as_secs_f64();

    let mid = r.intermediate_frames.as_ref().filter(|m| !m.is_empty() && m.len() == n - 2);
    let (reference, pairs): (&str, Vec<_>) = match mid {
        Some(real) => ("intermediate", frames[1..n - 1].iter().map(|f| &f.volume).zip(real.iter()).collect()),
        None => ("endpoint", vec![(&frames[n - 1].volume, &r.es)]),
    };
    let k = pairs.len() as f64;
    let mut p = 0.0;
    let mut e = 0.0;
    for (gen, real) in &pairs {
        p += psnr(gen, real)?;
        e += nmse(gen, real)?;
    }

    let (mut dice_mean, mut per_label, mut initial) = (None, Vec::new(), None);
    match (&r.ed_seg, &r.es_seg) {
        (Some(ed), Some(es)) => {
            let labels = es.foreground_labels();
            let warped = warp_nearest(ed, &frames[n - 1].field)?;
            let d = dice(&warped, es, &labels)?;
            dice_mean = Some(d.mean);
            per_label = d.per_label;
            initial = Some(dice(ed, es, &labels)?.mean);
        }
        _ => log::warn!("subject {}: no ED/ES segmentation, Dice omitted", r.id),
    }

    Ok(SubjectMetrics {
        id: r.id.clone(),
        frames: n,
        reference: reference.into(),
        psnr: p / k,
        nmse: e / k,
        dice: dice_mean,
        dice_per_label: per_label,
        dice_initial: initial,
        time,
    })
}

pub fn summarize(rows: &[SubjectMetrics]) -> Option<Report> {
    let col = |f: fn(&SubjectMetrics) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
    let dice: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
    Some(Report {
        subjects: rows.len(),
        metrics: Columns {
            psnr: col(|r| r.psnr)?,
            nmse: col(|r| r.nmse)?,
            dice: Summary::of(&dice),
            time: col(|r| r.time)?,
        },
    })
}

/// Fixed-width text view of a report.
pub fn format_report(r: &Report) -> String {
    let cell = |s: Option<Summary>| match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "n/a".into(),
    };
    let m = &r.metrics;
    format!(
        "subjects {}\n{:<6} {}\n{:<6} {}\n{:<6} {}\n{:<6} {}",
        r.subjects,
        "PSNR",
        cell(Some(m.psnr)),
        "NMSE",
        cell(Some(m.nmse)),
        "Dice",
        cell(m.dice),
        "Time",
        cell(Some(m.time))
    )
}
