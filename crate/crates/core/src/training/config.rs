use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BankScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradMode {
    #[default]
    Analytic,
    /// Verify analytic gradients against central differences on the first step.
    FiniteDiffCheck,
}

/// Hyperparameters for training and the shared fusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the max patch residual in the image score.
    pub alpha: f64,
    /// Weight of the one-class pixel map in the final map (inference only).
    pub beta: f64,
    pub tau: f64,
    pub focal_gamma: f64,
    pub focal_balance: f64,
    pub dice_eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Layers to use; empty means every layer in the feature set.
    pub layers: Vec<u32>,
    pub seed: u64,
    pub grad_mode: GradMode,
    /// Prompts per in-context bank during training.
    pub shots: usize,
    pub bank_scope: BankScope,
    /// Include the class-token/text similarity in the image score. Needs `d_cls == d_text`.
    pub semantic_score: bool,
    pub image_loss: bool,
    pub pixel_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.75,
            tau: 1.0,
            focal_gamma: 2.0,
            focal_balance: 0.25,
            dice_eps: 1.0,
            lr: 1e-3,
            epochs: 10,
            batch: 48,
            layers: Vec::new(),
            seed: 0,
            grad_mode: GradMode::Analytic,
            shots: 2,
            bank_scope: BankScope::PerClass,
            semantic_score: true,
            image_loss: true,
            pixel_loss: true,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("alpha", self.alpha)?;
        unit_interval("beta", self.beta)?;
        unit_interval("focal_balance", self.focal_balance)?;
        positive("tau", self.tau)?;
        positive("dice_eps", self.dice_eps)?;
        positive("lr", self.lr)?;
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal_gamma must be non-negative, got {}",
                self.focal_gamma
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be positive".into()));
        }
        if !self.image_loss && !self.pixel_loss {
            return Err(Error::Config(
                "at least one of image_loss / pixel_loss is required".into(),
            ));
        }
        Ok(())
    }

    /// Configured layers, or `available` when none were configured.
    pub fn resolve_layers(&self, available: &[u32]) -> Result<Vec<u32>> {
        if self.layers.is_empty() {
            return Ok(available.to_vec());
        }
        let mut layers = self.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if let Some(missing) = layers.iter().find(|l| !available.contains(l)) {
            return Err(Error::Config(format!(
                "layer {missing} is not in the feature set {available:?}"
            )));
        }
        Ok(layers)
    }
}
