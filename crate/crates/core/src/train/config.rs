use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{Fidelity, LossWeights, Mode};

/// Monte Carlo sample counts per shape and batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McCounts {
    /// Surface points per shape for the data term.
    pub surface: usize,
    /// Uniform domain points per shape (off-surface and regulariser terms).
    pub domain: usize,
    /// Uniform points per batch for the eikonal term.
    pub eikonal: usize,
    /// Labelled points per shape for the occupancy data term.
    pub occupancy: usize,
}

impl Default for McCounts {
    fn default() -> Self {
        Self {
            surface: 512,
            domain: 512,
            eikonal: 512,
            occupancy: 512,
        }
    }
}

/// Arithmetic precision. Only 64-bit floats are implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_z: usize,
    /// Number of stationary velocity nets (and Euler steps).
    #[serde(alias = "k")]
    pub stages: usize,
    pub d_vel: usize,
    /// Square tanh layers inside each velocity net.
    pub vel_hidden: usize,
    pub d_mu: usize,
    pub n_hidden: usize,
    pub eps: f64,
    pub weights: LossWeights,
    pub mc: McCounts,
    pub lr_latent: f64,
    pub lr_template: f64,
    pub lr_velocity: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub mode: Mode,
    pub fidelity: Fidelity,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            epochs: 300,
            batch_size: 10,
            d_z: 32,
            stages: 10,
            d_vel: 128,
            vel_hidden: 2,
            d_mu: 64,
            n_hidden: 5,
            eps: 0.05,
            weights: LossWeights::rectangles(),
            mc: McCounts::default(),
            lr_latent: 1e-3,
            lr_template: 5e-4,
            lr_velocity: 5e-4,
            lr_decay: 0.7,
            lr_decay_every: 250,
            seed: 0,
            mode: Mode::Riemannian,
            fidelity: Fidelity::Surface,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// Full-size settings for 3D rectangles.
    pub fn full_scale_rectangles() -> Self {
        Self {
            dim: 3,
            epochs: 4000,
            d_vel: 512,
            d_mu: 256,
            mc: McCounts {
                surface: 5000,
                domain: 5000,
                eikonal: 5000,
                occupancy: 5000,
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::invalid(format!(
                "dim must be 2 or 3, got {}",
                self.dim
            )));
        }
        let sizes = [
            ("batch_size", self.batch_size),
            ("d_z", self.d_z),
            ("stages", self.stages),
            ("d_vel", self.d_vel),
            ("d_mu", self.d_mu),
            ("lr_decay_every", self.lr_decay_every),
            ("mc.surface", self.mc.surface),
            ("mc.domain", self.mc.domain),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::invalid("eps must lie in (0, 1)"));
        }
        let rates = [
            self.lr_latent,
            self.lr_template,
            self.lr_velocity,
            self.lr_decay,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid(
                "learning rates and decay must be finite and non-negative",
            ));
        }
        if self.mode == Mode::Pointwise && self.stages < 4 {
            return Err(Error::invalid("pointwise mode needs at least 4 stages"));
        }
        if self.fidelity == Fidelity::Occupancy && self.mc.occupancy < 2 {
            return Err(Error::invalid(
                "occupancy fidelity needs at least 2 labelled points",
            ));
        }
        self.weights.validate()
    }

    /// Group learning rate after `completed_epochs` epochs.
    pub fn lr_at(&self, base: f64, completed_epochs: usize) -> f64 {
        base * self
            .lr_decay
            .powi((completed_epochs / self.lr_decay_every) as i32)
    }

    /// `[latent, template, velocity]` learning rates for the next epoch.
    pub fn learning_rates(&self, completed_epochs: usize) -> [f64; 3] {
        [
            self.lr_at(self.lr_latent, completed_epochs),
            self.lr_at(self.lr_template, completed_epochs),
            self.lr_at(self.lr_velocity, completed_epochs),
        ]
    }
}
