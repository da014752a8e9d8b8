use serde::{Deserialize, Serialize};

use super::metrics::{aggregate, compute_metrics, EvalImage, ImageMetrics, Region};
use crate::deform::WarpContext;
use crate::error::Result;
use crate::morphable::{AnimationParams, MorphableTemplate};
use crate::nets::FieldNetworks;
use crate::render::{render_image, Camera, LatentChoice, NeuralScene, RenderOutput};
use crate::synth::Dataset;
use crate::train::{Checkpoint, TrainConfig};

/// Render the trained avatar under `params` with the march, search and
/// background settings of the training config.
pub fn render_params(
    nets: &FieldNetworks,
    template: &MorphableTemplate,
    params: &AnimationParams,
    camera: &Camera,
    latent: LatentChoice,
    cfg: &TrainConfig,
) -> Result<RenderOutput> {
    let ctx = WarpContext::new(template, &params.theta, &params.psi)?.with_search(cfg.search.clone());
    let scene = NeuralScene::new(&ctx, nets, latent)?;
    render_image(&scene, camera, &cfg.march, cfg.background)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: usize,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub region: Region,
    pub checkpoint_hash: String,
    pub aggregate: ImageMetrics,
    pub frames: Vec<FrameMetrics>,
}

pub const REGION_NOTE: &str = "color metrics are computed over the intersection of predicted and ground-truth \
masks, standing in for a face-interior region; frames are rendered with the mean latent code";

/// Render every frame of `dataset` (up to `limit`) with the mean latent
/// and score it against the ground truth.
pub fn evaluate(
    ck: &Checkpoint,
    template: &MorphableTemplate,
    dataset: &Dataset,
    region: Region,
    limit: Option<usize>,
) -> Result<EvalReport> {
    let n = limit.map_or(dataset.len(), |l| l.min(dataset.len()));
    let mut frames = Vec::with_capacity(n);
    for f in &dataset.frames[..n] {
        f.validate()?;
        let out = render_params(&ck.nets, template, &f.params, &f.camera, LatentChoice::Mean, &ck.config)?;
        let metrics = compute_metrics(&EvalImage::from_render(&out), &EvalImage::from_frame(f), region)?;
        frames.push(FrameMetrics {
            frame_id: f.frame_id,
            metrics,
        });
    }
    let all: Vec<ImageMetrics> = frames.iter().map(|f| f.metrics).collect();
    let note = match region {
        Region::Intersection => REGION_NOTE.to_string(),
        other => format!("color metrics over the {other:?} region; frames rendered with the mean latent code"),
    };
    Ok(EvalReport {
        note,
        region,
        checkpoint_hash: ck.content_hash()?,
        aggregate: aggregate(&all),
        frames,
    })
}
