//! Dataset container file.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "RSKDSET\0"
//! header_len u32 LE    length of the JSON header in bytes
//! header     JSON      {format_version, config, seed, n, dims, channel_names}
//! payload    f32 LE    per sample: each channel volume, then the dose volume
//! ```
//!
//! Volumes are flattened with `x` fastest. Masks are not stored; they are
//! re-derived from the dose with `config.threshold_fraction` on load.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::PhantomConfig;
use crate::error::{Error, Result};
use crate::volume::{subgroup_masks_from_dose, Dims, Sample, VoxelVolume};

pub const DATASET_MAGIC: &[u8; 8] = b"RSKDSET\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: PhantomConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: PhantomConfig,
    seed: u64,
    n: usize,
    dims: Dims,
    channel_names: Vec<String>,
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    let dims = dataset.config.dims;
    let header = Header {
        format_version: DATASET_VERSION,
        config: dataset.config.clone(),
        seed: dataset.seed,
        n: dataset.samples.len(),
        dims,
        channel_names: dataset.config.channel_names(),
    };
    let json = serde_json::to_vec(&header)?;
    writer.write_all(DATASET_MAGIC)?;
    writer.write_all(
        &u32::try_from(json.len())
            .map_err(|_| Error::Format("header too large".into()))?
            .to_le_bytes(),
    )?;
    writer.write_all(&json)?;

    let mut buf = Vec::with_capacity(dims.len() * 4);
    for sample in &dataset.samples {
        if sample.dims() != dims || sample.features.len() != dataset.config.channels {
            return Err(Error::Format("sample shape does not match dataset config".into()));
        }
        for vol in sample.features.iter().chain(std::iter::once(&sample.dose)) {
            buf.clear();
            for &v in vol.values() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            writer.write_all(&buf)?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut reader: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    reader.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            header.format_version
        )));
    }
    if header.dims != header.config.dims || header.channel_names.len() != header.config.channels {
        return Err(Error::Format("inconsistent dataset header".into()));
    }

    let dims = header.dims;
    let mut raw = vec![0u8; dims.len() * 4];
    let mut read_volume = |reader: &mut R| -> Result<VoxelVolume> {
        reader.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        VoxelVolume::new(dims, values)
    };
    let mut samples = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        let features = (0..header.config.channels)
            .map(|_| read_volume(&mut reader))
            .collect::<Result<Vec<_>>>()?;
        let dose = read_volume(&mut reader)?;
        let masks = subgroup_masks_from_dose(&dose, header.config.threshold_fraction)?;
        samples.push(Sample::new(features, dose, masks)?);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after dataset payload".into()));
    }
    Ok(Dataset {
        config: header.config,
        seed: header.seed,
        samples,
    })
}
