//! Voxel grids, subgroup masks, and the sample/prediction containers built on them.
//!
//! All volumes are flattened row-major with `x` varying fastest:
//! `index = x + W * (y + H * z)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(w: usize, h: usize, d: usize) -> Result<Self> {
        if w == 0 || h == 0 || d == 0 {
            return Err(Error::Config(format!("dims must be positive, got {w}x{h}x{d}")));
        }
        Ok(Self { w, h, d })
    }

    pub fn len(&self) -> usize {
        self.w * self.h * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.w;
        let rest = index / self.w;
        (x, rest % self.h, rest / self.h)
    }

    fn ensure_same(&self, other: Dims) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                expected: *self,
                actual: other,
            })
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.d)
    }
}

impl std::str::FromStr for Dims {
    type Err = Error;

    /// Parses `WxHxD`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split('x').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(w), Ok(h), Ok(d)] => Dims::new(*w, *h, *d),
            _ => Err(Error::Config(format!("dims must look like 16x16x8, got {s:?}"))),
        }
    }
}

/// Dense scalar field over a `W x H x D` grid. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: Dims,
    values: Vec<f64>,
}

impl VoxelVolume {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "volume",
                index,
                value,
            });
        }
        Ok(Self { dims, values })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    /// 1-D volume (`n x 1 x 1`), handy for small examples.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(Dims::new(values.len(), 1, 1)?, values.to_vec())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Identifier of a voxel subgroup. The three built-in groups use ids 1..=3 and
/// serialize by name; other ids serialize as numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubgroupId(pub u32);

impl SubgroupId {
    pub const FOREGROUND: SubgroupId = SubgroupId(1);
    pub const BACKGROUND: SubgroupId = SubgroupId(2);
    pub const COMBINED: SubgroupId = SubgroupId(3);

    pub fn name(self) -> &'static str {
        match self {
            Self::FOREGROUND => "fg",
            Self::BACKGROUND => "bg",
            Self::COMBINED => "all",
            _ => "custom",
        }
    }

    fn is_builtin(self) -> bool {
        (1..=3).contains(&self.0)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "fg" | "foreground" => Ok(Self::FOREGROUND),
            "bg" | "background" => Ok(Self::BACKGROUND),
            "all" | "combined" | "total" => Ok(Self::COMBINED),
            other => other
                .parse()
                .map(SubgroupId)
                .map_err(|_| Error::Config(format!("unknown subgroup {other:?} (fg, bg, all or a numeric id)"))),
        }
    }
}

impl fmt::Display for SubgroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_builtin() {
            f.write_str(self.name())
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for SubgroupId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_builtin() {
            serializer.serialize_str(self.name())
        } else {
            serializer.serialize_u32(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for SubgroupId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Id(u32),
            Name(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Id(id) => Ok(SubgroupId(id)),
            Repr::Name(name) => SubgroupId::parse(&name).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgroupMask {
    dims: Dims,
    membership: Vec<bool>,
    id: SubgroupId,
}

impl SubgroupMask {
    pub fn new(dims: Dims, membership: Vec<bool>, id: SubgroupId) -> Result<Self> {
        if membership.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: membership.len(),
            });
        }
        Ok(Self { dims, membership, id })
    }

    pub fn full(dims: Dims, id: SubgroupId) -> Self {
        Self {
            dims,
            membership: vec![true; dims.len()],
            id,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn id(&self) -> SubgroupId {
        self.id
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn count(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.membership.iter().any(|&m| m)
    }
}

/// Splits a dose volume into foreground, background and combined masks, in that order.
///
/// Foreground is `dose > threshold_fraction * max(dose)`. An all-zero dose yields an
/// empty foreground, which downstream calibration skips.
pub fn subgroup_masks_from_dose(dose: &VoxelVolume, threshold_fraction: f64) -> Result<Vec<SubgroupMask>> {
    crate::error::check_open_unit("threshold_fraction", threshold_fraction)?;
    if let Some(&value) = dose.values().iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidParameter {
            name: "dose",
            value,
            reason: "dose must be nonnegative",
        });
    }
    let dims = dose.dims();
    let cutoff = threshold_fraction * dose.max();
    let fg: Vec<bool> = dose.values().iter().map(|&v| v > cutoff).collect();
    let bg: Vec<bool> = fg.iter().map(|&m| !m).collect();
    Ok(vec![
        SubgroupMask::new(dims, fg, SubgroupId::FOREGROUND)?,
        SubgroupMask::new(dims, bg, SubgroupId::BACKGROUND)?,
        SubgroupMask::full(dims, SubgroupId::COMBINED),
    ])
}

/// One segment: feature channels, ground-truth dose (Gy) and derived subgroup masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<VoxelVolume>,
    pub dose: VoxelVolume,
    pub masks: Vec<SubgroupMask>,
}

impl Sample {
    pub fn new(features: Vec<VoxelVolume>, dose: VoxelVolume, masks: Vec<SubgroupMask>) -> Result<Self> {
        let dims = dose.dims();
        for f in &features {
            dims.ensure_same(f.dims())?;
        }
        for m in &masks {
            dims.ensure_same(m.dims())?;
        }
        if let Some(&value) = dose.values().iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidParameter {
                name: "dose",
                value,
                reason: "dose must be nonnegative",
            });
        }
        Ok(Self { features, dose, masks })
    }

    pub fn dims(&self) -> Dims {
        self.dose.dims()
    }

    pub fn mask(&self, id: SubgroupId) -> Option<&SubgroupMask> {
        self.masks.iter().find(|m| m.id() == id)
    }
}

/// Uncalibrated per-voxel interval `[point - lower_offset, point + upper_offset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicPrediction {
    point: VoxelVolume,
    lower_offset: VoxelVolume,
    upper_offset: VoxelVolume,
}

impl HeuristicPrediction {
    pub fn new(point: VoxelVolume, lower_offset: VoxelVolume, upper_offset: VoxelVolume) -> Result<Self> {
        let dims = point.dims();
        dims.ensure_same(lower_offset.dims())?;
        dims.ensure_same(upper_offset.dims())?;
        for (name, vol) in [("lower_offset", &lower_offset), ("upper_offset", &upper_offset)] {
            if let Some(&value) = vol.values().iter().find(|v| **v < 0.0) {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "offsets must be nonnegative",
                });
            }
        }
        Ok(Self {
            point,
            lower_offset,
            upper_offset,
        })
    }

    pub fn dims(&self) -> Dims {
        self.point.dims()
    }

    pub fn point(&self) -> &VoxelVolume {
        &self.point
    }

    pub fn lower_offset(&self) -> &VoxelVolume {
        &self.lower_offset
    }

    pub fn upper_offset(&self) -> &VoxelVolume {
        &self.upper_offset
    }

    /// Multiplies both offset volumes by `factor` (diagnostic inflation).
    pub fn with_scaled_offsets(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.point.clone(),
            self.lower_offset.map(|v| v * factor)?,
            self.upper_offset.map(|v| v * factor)?,
        )
    }
}

/// Interval bounds after scaling the heuristic offsets by `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalField {
    pub lo: VoxelVolume,
    pub hi: VoxelVolume,
    pub lambda: f64,
}

pub(crate) fn ensure_dims(expected: Dims, actual: Dims) -> Result<()> {
    expected.ensure_same(actual)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subgroup_serde() {
        assert_eq!(serde_json::to_string(&SubgroupId::FOREGROUND).unwrap(), "\"fg\"");
        assert_eq!(serde_json::to_string(&SubgroupId(9)).unwrap(), "9");
        for id in [
            SubgroupId::FOREGROUND,
            SubgroupId::BACKGROUND,
            SubgroupId::COMBINED,
            SubgroupId(9),
        ] {
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(serde_json::from_str::<SubgroupId>(&json).unwrap(), id);
        }
    }

    #[test]
    fn dims_parse() {
        assert_eq!("16x16x8".parse::<Dims>().unwrap(), Dims { w: 16, h: 16, d: 8 });
        assert_eq!("16x16x8".parse::<Dims>().unwrap().to_string(), "16x16x8");
        assert!("16x16".parse::<Dims>().is_err());
        assert!("0x1x1".parse::<Dims>().is_err());
    }

    #[test]
    fn index_roundtrip() {
        let dims = Dims::new(4, 3, 2).unwrap();
        for i in 0..dims.len() {
            let (x, y, z) = dims.coords(i);
            assert_eq!(dims.index(x, y, z), i);
        }
        assert_eq!(dims.index(1, 0, 0), 1);
        assert_eq!(dims.index(0, 1, 0), 4);
        assert_eq!(dims.index(0, 0, 1), 12);
    }

    #[test]
    fn volume_rejects_bad_input() {
        let dims = Dims::new(2, 1, 1).unwrap();
        assert!(matches!(
            VoxelVolume::new(dims, vec![1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            VoxelVolume::new(dims, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Dims::new(0, 1, 1).is_err());
    }

    #[test]
    fn threshold_masks() {
        let dose = VoxelVolume::from_slice(&[0.0, 0.5, 10.0]).unwrap();
        let masks = subgroup_masks_from_dose(&dose, 0.1).unwrap();
        assert_eq!(masks[0].membership(), &[false, false, true]);
        assert_eq!(masks[1].membership(), &[true, true, false]);
        assert_eq!(masks[2].membership(), &[true, true, true]);
        assert_eq!(
            masks.iter().map(|m| m.id()).collect::<Vec<_>>(),
            vec![SubgroupId::FOREGROUND, SubgroupId::BACKGROUND, SubgroupId::COMBINED]
        );
    }

    #[test]
    fn uniform_dose_is_all_foreground() {
        let dose = VoxelVolume::from_slice(&[5.0, 5.0, 5.0]).unwrap();
        let masks = subgroup_masks_from_dose(&dose, 0.1).unwrap();
        assert_eq!(masks[0].count(), 3);
        assert!(masks[1].is_empty());
    }

    #[test]
    fn zero_dose_has_empty_foreground() {
        let dose = VoxelVolume::from_slice(&[0.0; 4]).unwrap();
        let masks = subgroup_masks_from_dose(&dose, 0.01).unwrap();
        assert!(masks[0].is_empty());
        assert_eq!(masks[1].count(), 4);
    }

    #[test]
    fn negative_dose_rejected() {
        let dose = VoxelVolume::from_slice(&[1.0, -0.1]).unwrap();
        assert!(subgroup_masks_from_dose(&dose, 0.01).is_err());
        assert!(subgroup_masks_from_dose(&VoxelVolume::from_slice(&[1.0]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn prediction_rejects_negative_offsets() {
        let p = VoxelVolume::from_slice(&[1.0]).unwrap();
        let neg = VoxelVolume::from_slice(&[-1.0]).unwrap();
        assert!(HeuristicPrediction::new(p.clone(), neg.clone(), p.clone()).is_err());
        assert!(HeuristicPrediction::new(p.clone(), p.clone(), neg).is_err());
        let wrong = VoxelVolume::from_slice(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            HeuristicPrediction::new(p.clone(), wrong, p),
            Err(Error::DimMismatch { .. })
        ));
    }
}
