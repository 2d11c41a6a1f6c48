use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::AtNorm;
use crate::error::{Error, Result};
use crate::io_store::Stage;
use crate::kspace::{DcMode, MaskConfig};
use crate::metrics::DataRange;
use crate::recon_net::{Architecture, CascadeModel, TracePoint, TraceSpec};

/// How training masks are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// A fresh mask for every (image, epoch).
    #[default]
    PerEpoch,
    /// One mask per image for the whole run.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the attention-transfer term.
    pub omega: f64,
    pub accel: Vec<f64>,
    pub center_fraction: f64,
    /// Gaussian std of the line density, as a fraction of the width.
    pub std_fraction: f64,
    pub dc_mode: DcMode,
    pub distill_layer: usize,
    pub trace_point: TracePoint,
    pub at_norm: AtNorm,
    pub seed: u64,
    /// Seed of the fixed validation masks.
    pub eval_seed: u64,
    /// Anatomy names, in registry order. Empty means "as given by the data".
    pub anatomies: Vec<String>,
    /// Must stay true for S4.
    pub freeze_base: bool,
    pub data_range: DataRange,
    pub mask_policy: MaskPolicy,
    /// Start freshly built models with the last conv of each cascade at zero.
    pub zero_init_residual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::S1,
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-7,
            omega: 1e-4,
            accel: vec![4.0],
            center_fraction: 0.04,
            std_fraction: 1.0 / 6.0,
            dc_mode: DcMode::Hard,
            distill_layer: 3,
            trace_point: TracePoint::PreActivation,
            at_norm: AtNorm::Flattened,
            seed: 0,
            eval_seed: 1234,
            anatomies: Vec::new(),
            freeze_base: true,
            data_range: DataRange::PerImage,
            mask_policy: MaskPolicy::PerEpoch,
            zero_init_residual: true,
        }
    }
}

impl TrainConfig {
    /// Stage defaults. Distillation fine-tunes a trained model and starts
    /// with a fresh optimizer, so it uses a smaller step.
    pub fn for_stage(stage: Stage) -> Self {
        let learning_rate = match stage {
            Stage::S3 => 1e-4,
            _ => 1e-3,
        };
        TrainConfig {
            stage,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return bad(format!("omega must be >= 0, got {}", self.omega));
        }
        if self.accel.is_empty() {
            return bad("at least one acceleration is required".into());
        }
        for &a in &self.accel {
            self.mask_config(a).validate()?;
        }
        let arch = self.architecture();
        if self.distill_layer == 0 || self.distill_layer > arch.conv_layers {
            return bad(format!(
                "distill_layer must be in 1..={}, got {}",
                arch.conv_layers, self.distill_layer
            ));
        }
        self.dc_mode.validate()?;
        if self.stage == Stage::S4 && !self.freeze_base {
            return bad("S4 trains only the new affine set; freeze_base = false is not allowed".into());
        }
        if let DataRange::Fixed { value } = self.data_range {
            if !(value.is_finite() && value > 0.0) {
                return bad(format!("fixed data range must be > 0, got {value}"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dc: self.dc_mode,
            ..Architecture::d5c5()
        }
    }

    pub fn mask_config(&self, accel: f64) -> MaskConfig {
        MaskConfig {
            accel,
            center_fraction: self.center_fraction,
            std_fraction: self.std_fraction,
        }
    }

    /// A freshly initialized model for this config.
    pub fn init_model<S: AsRef<str>>(&self, anatomies: Option<&[S]>) -> Result<CascadeModel<f32>> {
        let mut m = match anatomies {
            Some(a) => CascadeModel::universal(self.architecture(), a, self.seed)?,
            None => CascadeModel::new(self.architecture(), self.seed)?,
        };
        if self.zero_init_residual {
            m.zero_final_convs();
        }
        Ok(m)
    }

    pub fn trace(&self) -> TraceSpec {
        TraceSpec {
            layer: self.distill_layer,
            point: self.trace_point,
        }
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        table
            .try_into()
            .map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    /// Reads a partial config; missing keys take the defaults of `stage`.
    pub fn from_file(path: &Path, stage: Stage) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let given: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut table = Self::for_stage(stage).to_table()?;
        table.extend(given);
        Self::from_table(table).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_table(c.to_table().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_in_stage_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 2\n").unwrap();
        let c = TrainConfig::from_file(&path, Stage::S3).unwrap();
        assert_eq!((c.epochs, c.learning_rate), (2, 1e-4));
        std::fs::write(&path, "learning_rate = 0.01\n").unwrap();
        assert_eq!(TrainConfig::from_file(&path, Stage::S3).unwrap().learning_rate, 0.01);
        assert_eq!(TrainConfig::from_file(&path, Stage::S1).unwrap().epochs, 10);
        std::fs::write(&path, "epoch = 2\n").unwrap();
        assert!(TrainConfig::from_file(&path, Stage::S1).is_err());
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let cases = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { omega: -1.0, ..Default::default() },
            TrainConfig { accel: vec![], ..Default::default() },
            TrainConfig { accel: vec![1.0], ..Default::default() },
            TrainConfig { distill_layer: 6, ..Default::default() },
            TrainConfig { dc_mode: DcMode::Soft { lambda: 0.0 }, ..Default::default() },
            TrainConfig { stage: Stage::S4, freeze_base: false, ..Default::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c: TrainConfig = toml::from_str("epochs = 3\nomega = 0.5\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.omega, 0.5);
        assert_eq!(c.batch_size, 4);
        assert!(toml::from_str::<TrainConfig>("epochz = 3").is_err());
    }
}
