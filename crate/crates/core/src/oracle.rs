use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eem::{CandidatePrompt, EEMask, EemSidecar};
use crate::error::{Error, Result};
use crate::io;
use crate::queue::{Queue, Ticket, TicketStatus};
use crate::types::{LabelMask, Sample, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    MachinePseudolabel,
    Human,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineMode {
    /// Reveal ground truth inside the prompted regions.
    #[default]
    GroundTruth,
    /// Echo the model's own prediction everywhere.
    ModelArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    #[serde(with = "crate::types::label_mask_serde")]
    pub corrected: LabelMask,
    pub regions_covered: Vec<usize>,
    pub source: AnnotationSource,
    pub annotator_id: Option<String>,
    pub elapsed: f64,
}

/// Simulated oracle. `prediction` is the model's argmax mask for the sample.
pub fn machine_annotate(
    sample: &Sample,
    prompts: &[CandidatePrompt],
    prediction: &LabelMask,
    mode: MachineMode,
) -> Result<AnnotationRecord> {
    if prediction.shape() != sample.image.shape() {
        return Err(Error::shape(
            format!("{:?}", sample.image.shape()),
            format!("{:?}", prediction.shape()),
        ));
    }
    if prompts.is_empty() {
        return Err(Error::Precondition(format!("no prompts for {}", sample.id())));
    }
    let mut corrected = prediction.clone();
    let covered = match mode {
        MachineMode::ModelArgmax => Vec::new(),
        MachineMode::GroundTruth => {
            let gt = sample
                .gt
                .as_ref()
                .ok_or_else(|| Error::MissingGroundTruth(sample.id().to_string()))?;
            for p in prompts {
                for ij in p.iter_pixels() {
                    corrected.labels[ij] = gt.labels[ij];
                }
            }
            prompts.iter().map(|p| p.rank).collect()
        }
    };
    Ok(AnnotationRecord {
        sample_id: sample.id().to_string(),
        corrected,
        regions_covered: covered,
        source: AnnotationSource::MachinePseudolabel,
        annotator_id: None,
        elapsed: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub class_id: u8,
    pub rgb: [u8; 3],
}

/// Class colours and heat colormap anchors shared with the workbench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub classes: Vec<PaletteEntry>,
    pub ignore: u8,
    pub heat_anchors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn new(num_classes: u8) -> Self {
        Palette {
            classes: (0..num_classes)
                .map(|c| PaletteEntry {
                    class_id: c,
                    rgb: io::class_color(c),
                })
                .collect(),
            ignore: IGNORE,
            heat_anchors: io::HEAT_ANCHORS.to_vec(),
        }
    }
}

pub const EEM_OVERLAY_ALPHA: f64 = 0.5;

/// Writes the ticket assets under `cycle_<k>/assets/<sample_id>/` in
/// `run_dir` and enqueues a pending ticket.
pub fn enqueue_for_human(
    queue: &mut Queue,
    run_dir: &Path,
    cycle: usize,
    sample: &Sample,
    prompts: &[CandidatePrompt],
    eem: &EEMask,
    percentile: f64,
    prediction: &LabelMask,
) -> Result<Ticket> {
    let id = sample.id();
    let ticket_id = format!("c{cycle}-{id}");
    if queue.get(&ticket_id).is_some()
        || queue
            .tickets()
            .iter()
            .any(|t| t.sample_id == id && t.status != TicketStatus::Resolved)
    {
        return Err(Error::DuplicateTicket(id.to_string()));
    }
    let rel = format!("cycle_{cycle}/assets/{id}");
    let dir = run_dir.join(&rel);
    let mut assets = BTreeMap::new();
    let mut put = |name: &str, file: &str| {
        assets.insert(name.to_string(), format!("{rel}/{file}"));
        dir.join(file)
    };
    io::write_rgb_png(&sample.image, &put("raw", "raw.png"))?;
    io::write_segmentation_png(prediction, &put("initial_seg", "initial_seg.png"))?;
    io::write_overlay_png(&sample.image, &eem.map, EEM_OVERLAY_ALPHA, &put("eem_overlay", "eem_overlay.png"))?;
    let sidecar = EemSidecar::new(id, eem, percentile, prompts);
    io::write_atomic(&put("prompts", "prompts.json"), &serde_json::to_vec_pretty(&sidecar)?)?;
    let palette = Palette::new(prediction.num_classes);
    io::write_atomic(&put("palette", "palette.json"), &serde_json::to_vec_pretty(&palette)?)?;
    let initial_mask = format!("{rel}/initial_mask.png");
    io::write_label_png(prediction, &run_dir.join(&initial_mask))?;
    let ticket = Ticket {
        ticket_id,
        sample_id: id.to_string(),
        cycle,
        status: TicketStatus::Pending,
        lease_expiry: None,
        annotator_id: None,
        claimed_at: None,
        asset_refs: assets,
        initial_mask,
        top_score: prompts.first().map(|p| p.score).unwrap_or(0.0),
        num_prompts: prompts.len(),
        submission: None,
    };
    queue.enqueue(ticket.clone())?;
    Ok(ticket)
}
