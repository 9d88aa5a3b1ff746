//! JSON model checkpoints. Parameters are stored as a flat array of doubles;
//! reading back reproduces every bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ModelParams, OffsetTransform, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "risksets-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub transform: OffsetTransform,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub loss_trace: Vec<f64>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, train_config: &TrainConfig, loss_trace: &[f64]) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            architecture: params.architecture.clone(),
            transform: params.transform,
            seed: train_config.seed,
            train_config: train_config.clone(),
            loss_trace: loss_trace.to_vec(),
            params: params.to_flat(),
        }
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::from_flat(self.architecture.clone(), self.transform, &self.params)
    }
}

pub fn write_checkpoint<W: Write>(checkpoint: &Checkpoint, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, checkpoint)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<Checkpoint> {
    let checkpoint: Checkpoint = serde_json::from_reader(reader)?;
    if checkpoint.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "not a model checkpoint: format {:?}",
            checkpoint.format
        )));
    }
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            checkpoint.version
        )));
    }
    Ok(checkpoint)
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(checkpoint, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let arch = Architecture::new(3, vec![7, 5]).unwrap();
        let mut params = ModelParams::init(arch, 3);
        // Awkward values: subnormals, long mantissas, negative zero.
        let mut rng = CounterRng::new(99);
        let mut flat = params.to_flat();
        for v in flat.iter_mut() {
            *v = f64::from_bits(rng.next_u64() & 0x3FFF_FFFF_FFFF_FFFF) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        }
        flat[0] = 5e-324;
        flat[1] = -0.0;
        params.set_flat(&flat);

        let ckpt = Checkpoint::new(&params, &TrainConfig::default(), &[1.0, 0.5]);
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ckpt.params));
        assert_eq!(back.model().unwrap().to_flat().len(), flat.len());
    }

    #[test]
    fn rejects_foreign_format() {
        let arch = Architecture::new(1, vec![2]).unwrap();
        let mut ckpt = Checkpoint::new(&ModelParams::zeros(arch), &TrainConfig::default(), &[]);
        ckpt.format = "other".into();
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
    }
}
