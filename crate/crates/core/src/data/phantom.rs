use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};

pub const BACKGROUND: u16 = 0;
pub const ORGAN: u16 = 1;
pub const TUMOR: u16 = 2;
pub const NUM_CLASSES: usize = 3;

/// Ellipsoidal organ with a spherical tumor, on a noisy background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Organ semi-axis range in voxels, sampled per axis.
    pub organ_semi_axes: [f64; 2],
    /// Tumor radius range in voxels.
    pub tumor_radius: [f64; 2],
    /// Mean intensity of background, organ and tumor.
    pub intensity_means: [f64; 3],
    pub noise_sigma: f64,
    pub tumor_inside: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            organ_semi_axes: [7.5, 12.0],
            tumor_radius: [2.0, 4.0],
            intensity_means: [0.2, 0.55, 0.85],
            noise_sigma: 0.1,
            tumor_inside: true,
        }
    }
}

impl PhantomSpec {
    pub fn with_dims(dims: [usize; 3]) -> Self {
        let min = *dims.iter().min().unwrap_or(&0) as f64;
        let base = Self::default();
        // keep the default proportions relative to a 32-voxel cube
        let k = min / 32.0;
        Self {
            dims,
            organ_semi_axes: base.organ_semi_axes.map(|v| v * k),
            tumor_radius: base.tumor_radius.map(|v| v * k),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.organ_semi_axes;
        let [rlo, rhi] = self.tumor_radius;
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom dims and spacing must be positive".into()));
        }
        if !(lo > 0.0 && lo <= hi) || !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "bad phantom ranges: semi-axes {:?}, tumor radius {:?}",
                self.organ_semi_axes, self.tumor_radius
            )));
        }
        let min_dim = *self.dims.iter().min().expect("three dims") as f64;
        if 2.0 * hi + 2.0 > min_dim {
            return Err(Error::Config(format!(
                "organ semi-axis up to {hi} voxels does not fit dims {:?}",
                self.dims
            )));
        }
        if self.tumor_inside && rhi >= lo {
            return Err(Error::Config(format!(
                "tumor radius up to {rhi} must stay below the smallest organ semi-axis {lo}"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Shapes drawn for one phantom, in voxel units (voxel centres at `i + 0.5`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub organ_centre: [f64; 3],
    pub organ_axes: [f64; 3],
    pub tumor_centre: [f64; 3],
    pub tumor_radius: f64,
}

impl PhantomGeometry {
    pub fn in_organ(&self, p: [f64; 3]) -> bool {
        let e: f64 = (0..3)
            .map(|k| {
                let q = (p[k] - self.organ_centre[k]) / self.organ_axes[k];
                q * q
            })
            .sum();
        e <= 1.0
    }
}

/// Deterministic phantom image and labels for `seed`.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    generate_phantom_with_geometry(seed, spec).map(|(v, l, _)| (v, l))
}

pub fn generate_phantom_with_geometry(seed: u64, spec: &PhantomSpec) -> Result<(Volume, LabelVolume, PhantomGeometry)> {
    spec.validate()?;
    let mut rng = Stream::new(seed, purpose::PHANTOM);
    let [d, h, w] = spec.dims;
    let extents = [d as f64, h as f64, w as f64];

    let axes: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(spec.organ_semi_axes[0], spec.organ_semi_axes[1]));
    // centre keeps a one-voxel margin around the ellipsoid
    let centre: [f64; 3] = std::array::from_fn(|k| {
        let lo = axes[k] + 1.0;
        let hi = extents[k] - 1.0 - axes[k] - 1.0;
        rng.uniform_in(lo, hi.max(lo))
    });

    let radius = rng.uniform_in(spec.tumor_radius[0], spec.tumor_radius[1]);
    let tumor_centre: [f64; 3] = if spec.tumor_inside {
        // rejection-sample an offset inside the shrunken ellipsoid
        loop {
            let u: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(-1.0, 1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break std::array::from_fn(|k| centre[k] + u[k] * (axes[k] - radius).max(0.0));
            }
        }
    } else {
        std::array::from_fn(|k| rng.uniform_in(radius, extents[k] - radius))
    };

    let n = d * h * w;
    let mut labels = vec![BACKGROUND; n];
    let mut image = vec![0f32; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let mut e = 0.0;
                let mut s = 0.0;
                for k in 0..3 {
                    let q = (p[k] - centre[k]) / axes[k];
                    e += q * q;
                    let t = p[k] - tumor_centre[k];
                    s += t * t;
                }
                let in_organ = e <= 1.0;
                let in_tumor = s <= radius * radius && (in_organ || !spec.tumor_inside);
                let label = if in_tumor {
                    TUMOR
                } else if in_organ {
                    ORGAN
                } else {
                    BACKGROUND
                };
                let i = (z * h + y) * w + x;
                labels[i] = label;
                let v = spec.intensity_means[label as usize] + spec.noise_sigma * rng.gaussian();
                image[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        Volume::new(spec.dims, spec.spacing, image)?,
        LabelVolume::new(spec.dims, spec.spacing, labels)?,
        PhantomGeometry {
            organ_centre: centre,
            organ_axes: axes,
            tumor_centre,
            tumor_radius: radius,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec::default();
        let (a, la) = generate_phantom(5, &spec).unwrap();
        let (b, lb) = generate_phantom(5, &spec).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(la, lb);
        let (c, _) = generate_phantom(6, &spec).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom(1, &spec), Err(Error::Config(_))));
        let spec = PhantomSpec {
            tumor_radius: [2.0, 8.0],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(1, &spec).is_err());
        assert!(generate_phantom(1, &PhantomSpec::with_dims([16, 16, 16])).is_ok());
    }
}
