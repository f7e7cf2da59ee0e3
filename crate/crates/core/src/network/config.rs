use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel extents `(k1, k2, k3)` of an efficient block; each extent is 1 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Kernel(pub [usize; 3]);

impl Kernel {
    pub const fn new(k1: usize, k2: usize, k3: usize) -> Self {
        Self([k1, k2, k3])
    }

    pub fn validate(self) -> Result<Self> {
        if self.0.iter().all(|&k| k == 1 || k == 3) {
            Ok(self)
        } else {
            Err(Error::Config(format!("kernel {self} outside {{1,3}}³")))
        }
    }

    pub fn volume(self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Four-branch kernel set of the small variant.
pub const KERNELS_4: [Kernel; 4] = [
    Kernel::new(1, 1, 1),
    Kernel::new(1, 3, 3),
    Kernel::new(3, 1, 3),
    Kernel::new(3, 3, 1),
];

/// Seven-branch kernel set of the base and large variants.
pub const KERNELS_7: [Kernel; 7] = [
    Kernel::new(1, 1, 1),
    Kernel::new(1, 1, 3),
    Kernel::new(1, 3, 1),
    Kernel::new(3, 1, 1),
    Kernel::new(1, 3, 3),
    Kernel::new(3, 1, 3),
    Kernel::new(3, 3, 1),
];

pub const SQUEEZE_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficientBlockSpec {
    pub kernel: Kernel,
    pub channels: usize,
    pub squeeze_ratio: f64,
}

impl EfficientBlockSpec {
    pub fn new(kernel: Kernel, channels: usize) -> Self {
        Self {
            kernel,
            channels,
            squeeze_ratio: SQUEEZE_RATIO,
        }
    }

    pub fn squeeze_channels(&self) -> usize {
        ((self.channels as f64 * self.squeeze_ratio).floor() as usize).max(1)
    }

    /// Parameters of squeeze conv (+bias), norm affine, and expand conv (+bias).
    pub fn parameter_count(&self) -> usize {
        let (c, s) = (self.channels, self.squeeze_channels());
        (c * s + s) + 2 * s + (s * c * self.kernel.volume() + c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    S,
    B,
    L,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub depth: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<Kernel>,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_variant() -> Variant {
    Variant::Custom
}

fn default_in_channels() -> usize {
    1
}

impl ModelConfig {
    pub fn variant(v: Variant, num_classes: usize) -> Result<Self> {
        let base = [16, 32, 64, 128, 256];
        let (channels, kernels): (Vec<usize>, Vec<Kernel>) = match v {
            Variant::S => (base.to_vec(), KERNELS_4.to_vec()),
            Variant::B => (base.to_vec(), KERNELS_7.to_vec()),
            Variant::L => (base.iter().copied().chain([320]).collect(), KERNELS_7.to_vec()),
            Variant::Custom => {
                return Err(Error::Config(
                    "custom variant needs explicit depth/channels/kernels".into(),
                ))
            }
        };
        let cfg = Self {
            variant: v,
            depth: channels.len(),
            channels,
            kernels,
            num_classes,
            in_channels: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small desk-scale model: depth 3, channels 8/16/32, four branches.
    pub fn mini(num_classes: usize) -> Self {
        Self {
            variant: Variant::Custom,
            depth: 3,
            channels: vec![8, 16, 32],
            kernels: KERNELS_4.to_vec(),
            num_classes,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth {} < 2", self.depth)));
        }
        if self.channels.len() != self.depth {
            return Err(Error::Config(format!(
                "{} channel widths for depth {}",
                self.channels.len(),
                self.depth
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.kernels.is_empty() {
            return Err(Error::Config("empty kernel set".into()));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        Ok(())
    }

    pub fn branches_per_prm(&self) -> usize {
        self.kernels.len()
    }

    pub fn prm_count(&self) -> usize {
        2 * self.depth - 1
    }

    /// PRM labels in forward order: `enc_0..`, `bn`, `dec_{d−2}..dec_0`.
    pub fn prm_labels(&self) -> Vec<String> {
        let d = self.depth;
        (0..d - 1)
            .map(|i| format!("enc_{i}"))
            .chain(["bn".to_string()])
            .chain((0..d - 1).rev().map(|j| format!("dec_{j}")))
            .collect()
    }

    /// Required divisor of every spatial extent.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Default initial prune step for this configuration.
    pub fn default_initial_p(&self) -> usize {
        match self.variant {
            Variant::L => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchState {
    Active,
    Masked,
    Pruned,
}

impl BranchState {
    pub fn symbol(self) -> char {
        match self {
            BranchState::Active => 'A',
            BranchState::Masked => 'M',
            BranchState::Pruned => '.',
        }
    }
}

/// JSON architecture descriptor shared by checkpoints and retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<Kernel>,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// One row per PRM in forward order, one entry per kernel.
    pub branch_states: Vec<Vec<BranchState>>,
}

impl ArchitectureDescriptor {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: Variant::Custom,
            depth: self.depth,
            channels: self.channels.clone(),
            kernels: self.kernels.clone(),
            num_classes: self.num_classes,
            in_channels: self.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.branch_states.len() != 2 * self.depth - 1 {
            return Err(Error::Config(format!(
                "descriptor lists {} PRMs, depth {} needs {}",
                self.branch_states.len(),
                self.depth,
                2 * self.depth - 1
            )));
        }
        for (i, row) in self.branch_states.iter().enumerate() {
            if row.len() != self.kernels.len() {
                return Err(Error::Config(format!(
                    "PRM {i} lists {} branch states for {} kernels",
                    row.len(),
                    self.kernels.len()
                )));
            }
        }
        Ok(())
    }
}
