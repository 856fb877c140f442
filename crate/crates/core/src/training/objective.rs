//! Per-branch training objectives with analytic gradients.
//!
//! Backbone features and the nearest-neighbour choice inside the residual
//! map are constants, so the residual map only shifts the fused quantities.
//! The discriminative objective differentiates into the image adapter, the
//! residual head and the first patch adapter; the one-class objective only
//! into the second patch adapter.

use serde::Serialize;

use super::config::TrainConfig;
use super::losses::{dice_with_grad, focal_binary_with_grad, focal_map_with_grad};
use super::params::{AdapterGrads, AdapterParams};
use super::resample::Upsampler;
use crate::dasl::{
    dasl_pixel_map, fuse_image_score, semantic_backward, semantic_forward, semantic_score, PatchTextAdapter,
    SemanticMaps,
};
use crate::error::{Error, Result};
use crate::features::{FeatureRecord, Mask, PromptBank, TextPrototypes};
use crate::oasl::{oasl_pixel_map, require_oasl};
use crate::par;
use crate::residual::{image_prototype, image_residual, patch_residual_map, ResidualMap};
use crate::tensor::{sigmoid, to_f64, Affine, Grid};

/// A query paired with its in-context prompt bank.
#[derive(Debug, Clone)]
pub struct TrainingSample<'a> {
    pub record: &'a FeatureRecord,
    pub bank: PromptBank,
}

/// Batch-mean value of each loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub image: f64,
    pub focal: f64,
    pub dice_semantic: f64,
    pub dice_fused: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.image + self.focal + self.dice_semantic + self.dice_fused
    }

    fn add(&mut self, o: &LossTerms) {
        self.image += o.image;
        self.focal += o.focal;
        self.dice_semantic += o.dice_semantic;
        self.dice_fused += o.dice_fused;
    }

    fn scale(&mut self, s: f64) {
        self.image *= s;
        self.focal *= s;
        self.dice_semantic *= s;
        self.dice_fused *= s;
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub terms: LossTerms,
    pub grads: AdapterGrads,
}

type FuseFn = fn(&ResidualMap, &SemanticMaps) -> Result<Grid>;

/// Focal and dice terms on one semantic branch, back-propagated into `grad`.
///
/// Returns `(focal, dice on the abnormal map, dice on the fused map)`.
#[allow(clippy::too_many_arguments)]
fn pixel_terms(
    record: &FeatureRecord,
    mask: &Mask,
    residual: &ResidualMap,
    protos: &TextPrototypes,
    adapter: &PatchTextAdapter,
    layers: &[u32],
    cfg: &TrainConfig,
    fuse: FuseFn,
    grad: &mut Affine,
) -> Result<(f64, f64, f64)> {
    let (maps, trace) = semantic_forward(record, protos, adapter, layers, cfg.tau)?;
    let up = Upsampler::new(maps.abnormal.shape(), record.image_dims)?;
    let p_abnormal = up.forward(&maps.abnormal)?;
    let p_normal = up.forward(&maps.normal)?;
    let focal = focal_map_with_grad(&p_normal, &p_abnormal, mask, cfg.focal_gamma, cfg.focal_balance)?;
    let (dice_sem, d_dice_sem) = dice_with_grad(&p_abnormal, mask, cfg.dice_eps)?;
    let fused = fuse(residual, &maps)?;
    let (dice_fused, d_dice_fused) = dice_with_grad(&up.forward(&fused)?, mask, cfg.dice_eps)?;

    let d_p_abnormal = focal
        .d_abnormal
        .blend(1.0, &d_dice_sem, 1.0)?
        .blend(1.0, &d_dice_fused, 0.5)?;
    semantic_backward(&trace, &up.adjoint(&d_p_abnormal), &up.adjoint(&focal.d_normal), grad);
    Ok((focal.loss, dice_sem, dice_fused))
}

fn sample_layers(record: &FeatureRecord, cfg: &TrainConfig) -> Result<Vec<u32>> {
    cfg.resolve_layers(&record.layers())
}

fn dasl_sample(
    sample: &TrainingSample<'_>,
    params: &AdapterParams,
    protos: &TextPrototypes,
    cfg: &TrainConfig,
) -> Result<(LossTerms, AdapterGrads)> {
    let rec = sample.record;
    let bank = &sample.bank;
    let layers = sample_layers(rec, cfg)?;
    let mut grads = AdapterGrads::zeros_like(params);
    let mut terms = LossTerms::default();
    let patch = patch_residual_map(rec, bank, &layers)?;

    if cfg.image_loss {
        let proto = image_prototype(bank, &params.psi)?;
        let residual = image_residual(rec, &proto, &params.psi)?;
        let s_i = sigmoid(params.head.logit(&residual)?);
        let (s_q, holistic_share) = if cfg.semantic_score {
            (semantic_score(&rec.class_embed, protos, cfg.tau)?, 0.5)
        } else {
            (s_i, 1.0)
        };
        let score = fuse_image_score(s_i, s_q, &patch.rescaled, cfg.alpha)?;
        let (loss, d_score) = focal_binary_with_grad(score, rec.label, cfg.focal_gamma, cfg.focal_balance);
        terms.image = loss;

        let d_logit = d_score * (1.0 - cfg.alpha) * holistic_share * s_i * (1.0 - s_i);
        for (g, r) in grads.head.weight.iter_mut().zip(&residual) {
            *g += d_logit * r;
        }
        grads.head.bias += d_logit;
        let d_residual: Vec<f64> = params.head.weight.iter().map(|w| d_logit * w).collect();
        grads.psi.accumulate_grad(&d_residual, &to_f64(&rec.class_embed), 1.0);
        let d_proto: Vec<f64> = d_residual.iter().map(|d| -d / bank.k() as f64).collect();
        for p in bank.prompts() {
            grads.psi.accumulate_grad(&d_proto, &to_f64(&p.class_embed), 1.0);
        }
    }

    if cfg.pixel_loss {
        if let Some(mask) = &rec.mask {
            let (focal, dice_sem, dice_fused) = pixel_terms(
                rec,
                mask,
                &patch.rescaled,
                protos,
                &params.phi1,
                &layers,
                cfg,
                dasl_pixel_map,
                &mut grads.phi1,
            )?;
            terms.focal = focal;
            terms.dice_semantic = dice_sem;
            terms.dice_fused = dice_fused;
        }
    }
    Ok((terms, grads))
}

fn oasl_sample(
    sample: &TrainingSample<'_>,
    params: &AdapterParams,
    protos: &TextPrototypes,
    cfg: &TrainConfig,
) -> Result<(LossTerms, AdapterGrads)> {
    let rec = sample.record;
    let layers = sample_layers(rec, cfg)?;
    let mut grads = AdapterGrads::zeros_like(params);
    let patch = patch_residual_map(rec, &sample.bank, &layers)?;
    let mask = rec.mask_or_empty();
    let (focal, dice_sem, dice_fused) = pixel_terms(
        rec,
        &mask,
        &patch.rescaled,
        protos,
        &params.phi2,
        &layers,
        cfg,
        oasl_pixel_map,
        &mut grads.phi2,
    )?;
    let terms = LossTerms {
        image: 0.0,
        focal,
        dice_semantic: dice_sem,
        dice_fused,
    };
    Ok((terms, grads))
}

fn reduce(parts: Vec<(LossTerms, AdapterGrads)>, params: &AdapterParams) -> LossOutput {
    let n = parts.len() as f64;
    let mut terms = LossTerms::default();
    let mut grads = AdapterGrads::zeros_like(params);
    for (t, g) in &parts {
        terms.add(t);
        grads.add_scaled(g, 1.0);
    }
    terms.scale(1.0 / n);
    let mut mean = AdapterGrads::zeros_like(params);
    mean.add_scaled(&grads, 1.0 / n);
    LossOutput {
        loss: terms.total(),
        terms,
        grads: mean,
    }
}

/// Discriminative objective: image focal loss on the fused score plus
/// focal/dice pixel terms for mask-bearing records, averaged over the batch.
pub fn loss_dasl(
    samples: &[TrainingSample<'_>],
    params: &AdapterParams,
    protos: &TextPrototypes,
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if cfg.pixel_loss && samples.iter().all(|s| s.record.mask.is_none()) {
        return Err(Error::Argument(
            "pixel loss requested but no record in the batch carries a mask".into(),
        ));
    }
    let parts = par::try_map(samples, |s| dasl_sample(s, params, protos, cfg))?;
    Ok(reduce(parts, params))
}

/// One-class objective over normal records; absent masks count as empty.
pub fn loss_oasl(
    samples: &[TrainingSample<'_>],
    params: &AdapterParams,
    protos: &TextPrototypes,
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    require_oasl(&params.phi2)?;
    if samples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if let Some(bad) = samples.iter().find(|s| !s.record.is_normal()) {
        return Err(Error::Contract(format!(
            "one-class objective received abnormal record `{}`",
            bad.record.id
        )));
    }
    let parts = par::try_map(samples, |s| oasl_sample(s, params, protos, cfg))?;
    Ok(reduce(parts, params))
}
