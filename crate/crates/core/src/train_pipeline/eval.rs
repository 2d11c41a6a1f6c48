use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_store::{EvalRecord, ImageMetrics};
use crate::kspace::{undersample, zero_filled, MaskConfig};
use crate::metrics::{evaluate_pair, DataRange};
use crate::phantom_data::{AnatomyData, Split};
use crate::recon_net::{CascadeModel, ParamScope};

use super::{derive_seed, TrainConfig};

/// What produces the reconstruction being scored.
#[derive(Clone, Copy, Debug)]
pub enum Reconstructor<'a> {
    /// The inverse FFT of the undersampled k-space.
    ZeroFilled,
    Model(&'a CascadeModel<f32>),
}

/// Mask and metric settings of an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub mask: MaskConfig,
    /// Image `i` uses the mask seeded by `derive_seed(mask_seed, [i])`.
    pub mask_seed: u64,
    pub data_range: DataRange,
}

impl EvalSpec {
    pub fn new(accel: f64, mask_seed: u64) -> Self {
        EvalSpec {
            mask: MaskConfig::new(accel),
            mask_seed,
            data_range: DataRange::PerImage,
        }
    }

    pub fn from_config(config: &TrainConfig, accel: f64) -> Self {
        EvalSpec {
            mask: config.mask_config(accel),
            mask_seed: config.eval_seed,
            data_range: config.data_range,
        }
    }
}

/// Scores `recon` on one split. Metrics use the real channel against the
/// magnitude ground truth. The returned record has `label` "Undersampled"
/// for zero-filled input and an empty label otherwise.
pub fn evaluate(recon: Reconstructor<'_>, data: &AnatomyData, split: Split, spec: &EvalSpec) -> Result<EvalRecord> {
    spec.mask.validate()?;
    let anatomy = match recon {
        Reconstructor::Model(m) if m.bank().is_some() => Some(m.anatomy_index(&data.name)?),
        _ => None,
    };
    let (h, w) = data.image_size();
    let mut images = Vec::new();
    for (idx, gt) in data.subset(split) {
        if (gt.height(), gt.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "image {idx} of `{}` is {}x{}, expected {h}x{w}",
                data.name,
                gt.height(),
                gt.width()
            )));
        }
        let mask = spec.mask.generate(h, w, derive_seed(spec.mask_seed, &[idx as u64]))?;
        let y = undersample(gt, &mask)?;
        let x_u = zero_filled(&y)?;
        let pred = match recon {
            Reconstructor::ZeroFilled => x_u,
            Reconstructor::Model(m) => m.forward(&x_u, &y, &mask, anatomy)?,
        };
        let r = evaluate_pair(pred.real(), gt.real(), h, w, spec.data_range)?;
        images.push(ImageMetrics {
            index: idx,
            psnr_db: r.psnr_db,
            ssim_pct: r.ssim_pct(),
            mae: r.mae,
        });
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "`{}` has no {} images",
            data.name,
            split.as_str()
        )));
    }
    let n = images.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let (label, params) = match recon {
        Reconstructor::ZeroFilled => ("Undersampled".to_string(), 0),
        Reconstructor::Model(m) => (String::new(), m.count_parameters(ParamScope::Total)),
    };
    Ok(EvalRecord {
        label,
        anatomy: data.name.clone(),
        split: split.as_str().to_string(),
        accel: spec.mask.accel,
        mask_seed: spec.mask_seed,
        params,
        distill_layer: None,
        psnr_db: mean(|m| m.psnr_db),
        ssim_pct: mean(|m| m.ssim_pct),
        mae: mean(|m| m.mae),
        images,
    })
}
