//! Seeded synthetic phantoms: a single axis-aligned beam through a quiet volume.
//!
//! The beam is a cylinder along one grid axis (chosen at random, with random
//! entry side) whose radius is set so that its cross-section covers
//! `beam_fraction` of the perpendicular plane. Dose is a plateau inside the
//! core radius, a raised-cosine taper of width `falloff` out to the beam
//! radius, zero beyond, attenuated exponentially with depth. Noise is
//! Gaussian: `noise_fg` on the plateau (tapering with the profile) and
//! `noise_bg` elsewhere; negative doses are clamped to zero. All stored
//! values are rounded to `f32` so datasets survive a file round trip exactly.
//!
//! Draw order per phantom: axis (`below(3)`), entry side (`below(2)`), the two
//! centre coordinates (uniform), then one normal per voxel in flat index order.

mod dataset;

pub use dataset::{read_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::{derive_key, CounterRng};
use crate::volume::{subgroup_masks_from_dose, Dims, Sample, VoxelVolume};

pub const CHANNEL_NAMES: [&str; 3] = ["beam_indicator", "distance_to_axis", "depth_along_axis"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    /// Target fraction of the beam cross-section plane covered by the beam.
    pub beam_fraction: f64,
    /// Plateau dose at the entry face, in Gy.
    pub peak_dose: f64,
    /// Width of the penumbra taper, in voxels.
    pub falloff: f64,
    /// Exponential attenuation per voxel of depth.
    pub attenuation: f64,
    pub noise_fg: f64,
    pub noise_bg: f64,
    /// Number of feature channels, 1..=3, taken in the order of [`CHANNEL_NAMES`].
    pub channels: usize,
    /// Foreground threshold as a fraction of each sample's maximum dose.
    pub threshold_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims { w: 16, h: 16, d: 8 },
            beam_fraction: 0.08,
            peak_dose: 2.0,
            falloff: 1.0,
            attenuation: 0.04,
            noise_fg: 0.1,
            noise_bg: 0.002,
            channels: 3,
            threshold_fraction: 0.01,
        }
    }
}

impl PhantomConfig {
    /// Named configuration families. `ood` is held out from training.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "standard" => Ok(base),
            "wide" => Ok(Self {
                beam_fraction: 0.2,
                ..base
            }),
            "ood" => Ok(Self {
                beam_fraction: 0.05,
                falloff: 1.5,
                attenuation: 0.07,
                noise_fg: 0.12,
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown phantom family {other:?} (standard|wide|ood)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Dims::new(self.dims.w, self.dims.h, self.dims.d)?;
        if !(self.beam_fraction > 0.0 && self.beam_fraction < 0.5) {
            return Err(Error::InvalidParameter {
                name: "beam_fraction",
                value: self.beam_fraction,
                reason: "must lie in (0, 0.5)",
            });
        }
        for (name, value) in [
            ("noise_fg", self.noise_fg),
            ("noise_bg", self.noise_bg),
            ("falloff", self.falloff),
            ("attenuation", self.attenuation),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "must be finite and nonnegative",
                });
            }
        }
        if !(self.peak_dose > 0.0 && self.peak_dose.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "peak_dose",
                value: self.peak_dose,
                reason: "must be positive",
            });
        }
        if !(1..=CHANNEL_NAMES.len()).contains(&self.channels) {
            return Err(Error::Config(format!("channels must be 1..=3, got {}", self.channels)));
        }
        crate::error::check_open_unit("threshold_fraction", self.threshold_fraction)?;
        if self.fitting_axes().is_empty() {
            return Err(Error::Config(format!(
                "dims {} too small to fit a beam covering {} of any cross-section",
                self.dims, self.beam_fraction
            )));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        CHANNEL_NAMES[..self.channels].iter().map(|s| s.to_string()).collect()
    }

    /// Beam radius for a beam along `axis`.
    fn beam_radius(&self, axis: usize) -> f64 {
        let (a, b) = cross_extents(self.dims, axis);
        (self.beam_fraction * (a * b) as f64 / std::f64::consts::PI).sqrt()
    }

    /// Axes whose cross-section can hold the beam diameter (with a voxel to spare).
    fn fitting_axes(&self) -> Vec<usize> {
        (0..3)
            .filter(|&axis| {
                let (a, b) = cross_extents(self.dims, axis);
                let r = self.beam_radius(axis);
                r >= 0.5 && 2.0 * r + 1.0 <= a.min(b) as f64
            })
            .collect()
    }
}

fn cross_extents(dims: Dims, axis: usize) -> (usize, usize) {
    match axis {
        0 => (dims.h, dims.d),
        1 => (dims.w, dims.d),
        _ => (dims.w, dims.h),
    }
}

/// Beam geometry drawn for one phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamGeometry {
    pub axis: usize,
    pub enters_at_zero: bool,
    pub center: (f64, f64),
    pub radius: f64,
    pub core_radius: f64,
}

impl BeamGeometry {
    /// `(distance to axis, depth from entry face)` of a voxel.
    fn locate(&self, dims: Dims, x: usize, y: usize, z: usize) -> (f64, f64) {
        let (a, b, t, len) = match self.axis {
            0 => (y, z, x, dims.w),
            1 => (x, z, y, dims.h),
            _ => (x, y, z, dims.d),
        };
        let depth = if self.enters_at_zero { t } else { len - 1 - t };
        let da = a as f64 - self.center.0;
        let db = b as f64 - self.center.1;
        ((da * da + db * db).sqrt(), depth as f64)
    }

    /// Lateral profile in `[0, 1]`: 1 on the plateau, raised-cosine taper, 0 outside.
    fn lateral(&self, distance: f64) -> f64 {
        if distance <= self.core_radius {
            1.0
        } else if distance >= self.radius {
            0.0
        } else {
            let width = self.radius - self.core_radius;
            0.5 * (1.0 + (std::f64::consts::PI * (distance - self.core_radius) / width).cos())
        }
    }
}

fn draw_geometry(cfg: &PhantomConfig, rng: &mut CounterRng) -> BeamGeometry {
    let axes = cfg.fitting_axes();
    let axis = axes[rng.below(axes.len() as u64) as usize];
    let enters_at_zero = rng.below(2) == 0;
    let radius = cfg.beam_radius(axis);
    let (a, b) = cross_extents(cfg.dims, axis);
    // Keep the whole beam inside the grid.
    let mut centre = |extent: usize| rng.uniform_range(radius - 0.5, extent as f64 - 0.5 - radius);
    let center = (centre(a), centre(b));
    BeamGeometry {
        axis,
        enters_at_zero,
        center,
        radius,
        core_radius: (radius - cfg.falloff).max(0.0),
    }
}

#[inline]
fn as_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Noiseless dose and the per-voxel noise scale, before clamping.
fn profile(cfg: &PhantomConfig, beam: &BeamGeometry) -> (Vec<f64>, Vec<f64>, Vec<(f64, f64)>) {
    let dims = cfg.dims;
    let mut mean = Vec::with_capacity(dims.len());
    let mut sigma = Vec::with_capacity(dims.len());
    let mut geo = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        let (x, y, z) = dims.coords(i);
        let (distance, depth) = beam.locate(dims, x, y, z);
        let lateral = beam.lateral(distance);
        mean.push(cfg.peak_dose * (-cfg.attenuation * depth).exp() * lateral);
        sigma.push(if lateral > 0.0 {
            cfg.noise_fg * lateral
        } else {
            cfg.noise_bg
        });
        geo.push((distance, depth));
    }
    (mean, sigma, geo)
}

pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<Sample> {
    Ok(generate_phantom_with_geometry(cfg, seed)?.0)
}

pub fn generate_phantom_with_geometry(cfg: &PhantomConfig, seed: u64) -> Result<(Sample, BeamGeometry)> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = CounterRng::new(seed);
    let beam = draw_geometry(cfg, &mut rng);
    let (mean, sigma, geo) = profile(cfg, &beam);

    let dose: Vec<f64> = mean
        .iter()
        .zip(&sigma)
        .map(|(&m, &s)| as_f32((m + s * rng.normal()).max(0.0)))
        .collect();

    let max_extent = dims.w.max(dims.h).max(dims.d) as f64;
    let axis_len = [dims.w, dims.h, dims.d][beam.axis];
    let depth_scale = if axis_len > 1 { (axis_len - 1) as f64 } else { 1.0 };
    let channel = |c: usize| -> Result<VoxelVolume> {
        let values = geo
            .iter()
            .map(|&(distance, depth)| {
                as_f32(match c {
                    0 => f64::from(u8::from(distance <= beam.core_radius.max(0.5))),
                    1 => distance / max_extent,
                    _ => depth / depth_scale,
                })
            })
            .collect();
        VoxelVolume::new(dims, values)
    };
    let features = (0..cfg.channels).map(channel).collect::<Result<Vec<_>>>()?;
    let dose = VoxelVolume::new(dims, dose)?;
    let masks = subgroup_masks_from_dose(&dose, cfg.threshold_fraction)?;
    Ok((Sample::new(features, dose, masks)?, beam))
}

/// Seed of sample `index` within a dataset.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    derive_key(seed, index)
}

pub fn generate_dataset(cfg: &PhantomConfig, seed: u64, n: usize) -> Result<Vec<Sample>> {
    generate_dataset_with(cfg, seed, n, Execution::default())
}

pub fn generate_dataset_with(cfg: &PhantomConfig, seed: u64, n: usize, execution: Execution) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    execution
        .map_indexed(n, |i| generate_phantom(cfg, sample_seed(seed, i as u64)))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::SubgroupId;

    #[test]
    fn deterministic() {
        let cfg = PhantomConfig::default();
        assert_eq!(generate_phantom(&cfg, 5).unwrap(), generate_phantom(&cfg, 5).unwrap());
        assert_ne!(generate_phantom(&cfg, 5).unwrap(), generate_phantom(&cfg, 6).unwrap());
    }

    #[test]
    fn noiseless_profile() {
        let cfg = PhantomConfig {
            noise_fg: 0.0,
            noise_bg: 0.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let (s, beam) = generate_phantom_with_geometry(&cfg, seed).unwrap();
            let (mean, _, geo) = profile(&cfg, &beam);
            for i in 0..s.dose.len() {
                assert_eq!(s.dose.values()[i], as_f32(mean[i]));
                if geo[i].0 >= beam.radius {
                    assert_eq!(s.dose.values()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_near_target() {
        let cfg = PhantomConfig::default();
        for seed in 0..100 {
            let s = generate_phantom(&cfg, sample_seed(1234, seed)).unwrap();
            let fg = s.mask(SubgroupId::FOREGROUND).unwrap().count() as f64 / cfg.dims.len() as f64;
            assert!((0.04..=0.16).contains(&fg), "seed {seed}: fg fraction {fg}");
        }
    }

    #[test]
    fn masks_partition_and_dose_nonnegative() {
        let cfg = PhantomConfig::default();
        for s in generate_dataset(&cfg, 3, 10).unwrap() {
            let fg = s.mask(SubgroupId::FOREGROUND).unwrap().membership();
            let bg = s.mask(SubgroupId::BACKGROUND).unwrap().membership();
            assert!(fg.iter().zip(bg).all(|(a, b)| a ^ b));
            assert!(s.dose.values().iter().all(|&v| v >= 0.0));
            assert_eq!(s.features.len(), 3);
        }
    }

    #[test]
    fn dataset_items_are_index_keyed() {
        let cfg = PhantomConfig::default();
        let ds = generate_dataset(&cfg, 11, 5).unwrap();
        assert_eq!(ds[0], generate_phantom(&cfg, sample_seed(11, 0)).unwrap());
        assert_eq!(ds[3], generate_phantom(&cfg, sample_seed(11, 3)).unwrap());
        let seq = generate_dataset_with(&cfg, 11, 5, Execution::Sequential).unwrap();
        assert_eq!(ds, seq);
        assert_ne!(generate_dataset(&cfg, 12, 5).unwrap(), ds);
    }

    #[test]
    fn config_validation() {
        let tiny = PhantomConfig {
            dims: Dims { w: 2, h: 2, d: 2 },
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&tiny, 0), Err(Error::Config(_))));
        let bad = PhantomConfig {
            beam_fraction: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        for family in ["standard", "wide", "ood"] {
            PhantomConfig::preset(family).unwrap().validate().unwrap();
        }
        assert!(PhantomConfig::preset("nope").is_err());
    }
}
