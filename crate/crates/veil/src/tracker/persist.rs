//! Classifier checkpoint container: label table, training mode, head
//! weights and the embedded backbone checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extractor::checkpoint::{Reader, Writer};
use crate::extractor::nn::Dense;
use crate::extractor::FeatureExtractor;

use super::{Classifier, TrainMode};

const MAGIC: &[u8; 8] = b"VEILCLS\0";
const VERSION: u32 = 1;

impl Classifier {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(std::io::BufWriter::new(file));
        self.write_to(&mut w).map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut Writer<W>) -> std::io::Result<()> {
        w.raw(MAGIC)?;
        w.u32(VERSION)?;
        w.u8(match self.mode {
            TrainMode::Transfer => 0,
            TrainMode::Scratch => 1,
        })?;
        w.u32(self.labels.len() as u32)?;
        for label in &self.labels {
            w.string(label)?;
        }
        w.u32(self.head.in_dim as u32)?;
        w.u32(self.head.out_dim as u32)?;
        w.weights(&self.head.w)?;
        w.weights(&self.head.b)?;
        let backbone = self.backbone.to_checkpoint_bytes();
        w.u64(backbone.len() as u64)?;
        w.raw(&backbone)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Classifier> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(std::io::BufReader::new(file));
        Self::read_from(&mut r).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => {
                Error::Config(format!("classifier {}: {e}", path.display()))
            }
            _ => Error::io(path, e),
        })
    }

    fn read_from<R: Read>(r: &mut Reader<R>) -> std::io::Result<Classifier> {
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let magic = r.raw(8)?;
        if magic != MAGIC {
            return Err(bad("not a classifier checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}, expected {VERSION}")));
        }
        let mode = match r.u8()? {
            0 => TrainMode::Transfer,
            1 => TrainMode::Scratch,
            other => return Err(bad(&format!("unknown training mode {other}"))),
        };
        let n_labels = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(r.string()?);
        }
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        if out_dim != n_labels {
            return Err(bad("head rows do not match the label table"));
        }
        let head = Dense {
            in_dim,
            out_dim,
            w: r.weights(in_dim * out_dim)?,
            b: r.weights(out_dim)?,
        };
        let backbone_len = r.u64()? as usize;
        let backbone_bytes = r.raw(backbone_len)?;
        let backbone = FeatureExtractor::from_checkpoint_bytes(&backbone_bytes)?;
        if backbone.embed_dim() != in_dim {
            return Err(bad("backbone embedding dim does not match the head"));
        }
        Ok(Classifier {
            backbone,
            head,
            labels,
            mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{transfer_train, TrainMode};
    use super::*;
    use crate::extractor::{train_extractor, ArchConfig};
    use crate::testutil::tiny_dataset;

    #[test]
    fn classifier_roundtrips_with_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(3, 8, 16, 70);
        let arch = ArchConfig {
            input_height: 16,
            input_width: 16,
            input_channels: 3,
            conv_channels: vec![8, 16],
            embed_dim: 16,
        };
        let phi = train_extractor(&data, &arch, 15, 71).unwrap();
        let model = transfer_train(&phi, &data, 10, 72).unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();

        assert_eq!(back.mode(), TrainMode::Transfer);
        assert_eq!(back.labels(), model.labels());
        assert_eq!(back.backbone_checksum(), model.backbone_checksum());
        for (_, img) in data.test_items() {
            assert_eq!(model.predict(img).unwrap(), back.predict(img).unwrap());
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"VEILFXT\0garbagegarbage").unwrap();
        assert!(matches!(Classifier::load(&path), Err(Error::Config(_))));
    }
}
