//! Versioned binary checkpoint files for feature extractors.
//!
//! Layout (little endian): magic, format version, backbone descriptor,
//! head labels, provenance record, then every weight tensor as f32 in a
//! fixed group order. Weights are quantized to f32 before saving ever
//! happens (see `quantize_f32`), so a save/load round trip reproduces
//! embeddings bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::nn::{ConvLayer, ConvNet, Dense};
use super::{ArchConfig, Backbone, FeatureExtractor, PgdConfig, Provenance};

const MAGIC: &[u8; 8] = b"VEILFXT\0";
const VERSION: u32 = 1;

pub(crate) struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    pub(crate) fn new(out: W) -> Self {
        Writer { out }
    }
    pub(crate) fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.out.write_all(&[v])
    }
    pub(crate) fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    pub(crate) fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    pub(crate) fn string(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.out.write_all(s.as_bytes())
    }
    pub(crate) fn raw(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.out.write_all(bytes)
    }
    pub(crate) fn weights(&mut self, vals: &[f64]) -> std::io::Result<()> {
        for v in vals {
            self.out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

pub(crate) struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inp: R) -> Self {
        Reader { inp }
    }
    pub(crate) fn u8(&mut self) -> std::io::Result<u8> {
        let mut b = [0u8; 1];
        self.inp.read_exact(&mut b)?;
        Ok(b[0])
    }
    pub(crate) fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.inp.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    pub(crate) fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.inp.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        self.inp.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    pub(crate) fn string(&mut self) -> std::io::Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inp.read_exact(&mut buf)?;
        String::from_utf8(buf)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
    pub(crate) fn raw(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inp.read_exact(&mut buf)?;
        Ok(buf)
    }
    pub(crate) fn weights(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.inp.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }
}

impl FeatureExtractor {
    /// Writes the extractor to a checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer {
            out: std::io::BufWriter::new(file),
        };
        self.write_to(&mut w).map_err(|e| Error::io(path, e))
    }

    /// Checkpoint encoding as in-memory bytes (embedded in classifier
    /// containers).
    pub(crate) fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let mut w = Writer::new(&mut buf);
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        buf
    }

    pub(crate) fn from_checkpoint_bytes(bytes: &[u8]) -> std::io::Result<FeatureExtractor> {
        let mut r = Reader::new(bytes);
        Self::read_from(&mut r)
    }

    fn write_to<W: Write>(&self, w: &mut Writer<W>) -> std::io::Result<()> {
        w.out.write_all(MAGIC)?;
        w.u32(VERSION)?;
        match &self.backbone {
            Backbone::Identity {
                height,
                width,
                channels,
            } => {
                w.u8(1)?;
                w.u32(*height as u32)?;
                w.u32(*width as u32)?;
                w.u32(*channels as u32)?;
            }
            Backbone::Conv(net) => {
                w.u8(0)?;
                w.u32(net.input_h as u32)?;
                w.u32(net.input_w as u32)?;
                w.u32(net.input_c as u32)?;
                w.u32(net.convs.len() as u32)?;
                for conv in &net.convs {
                    w.u32(conv.out_ch as u32)?;
                }
                w.u32(net.embed_dim() as u32)?;
            }
        }
        w.u8(u8::from(self.head.is_some()))?;
        if self.head.is_some() {
            w.u32(self.head_labels.len() as u32)?;
            for label in &self.head_labels {
                w.string(label)?;
            }
        }
        let p = &self.provenance;
        w.string(&p.dataset_id)?;
        w.u32(p.epochs as u32)?;
        w.u32(p.robust_epochs as u32)?;
        w.u64(p.seed)?;
        w.u8(u8::from(p.robust))?;
        w.u8(u8::from(p.pgd.is_some()))?;
        if let Some(cfg) = &p.pgd {
            w.u32(cfg.steps as u32)?;
            w.f64(cfg.step_size)?;
            w.f64(cfg.epsilon)?;
        }
        w.u8(u8::from(p.robust_seed.is_some()))?;
        if let Some(s) = p.robust_seed {
            w.u64(s)?;
        }

        let groups = self.weight_groups();
        w.u64(groups.iter().map(|g| g.len() as u64).sum())?;
        for group in groups {
            w.weights(group)?;
        }
        w.out.flush()
    }

    /// Loads a checkpoint, rejecting unknown formats or versions.
    pub fn load(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inp: std::io::BufReader::new(file),
        };
        Self::read_from(&mut r).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Config(format!(
                "checkpoint {}: {e}",
                path.display()
            )),
            _ => Error::io(path, e),
        })
    }

    fn read_from<R: Read>(r: &mut Reader<R>) -> std::io::Result<FeatureExtractor> {
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 8];
        r.inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not an extractor checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}, expected {VERSION}")));
        }

        let kind = r.u8()?;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let arch = if kind == 0 {
            let n = r.u32()? as usize;
            let mut channels = Vec::with_capacity(n);
            for _ in 0..n {
                channels.push(r.u32()? as usize);
            }
            let embed = r.u32()? as usize;
            Some(ArchConfig {
                input_height: h,
                input_width: w,
                input_channels: c,
                conv_channels: channels,
                embed_dim: embed,
            })
        } else {
            None
        };

        let has_head = r.u8()? != 0;
        let mut head_labels = Vec::new();
        if has_head {
            let n = r.u32()? as usize;
            for _ in 0..n {
                head_labels.push(r.string()?);
            }
        }

        let dataset_id = r.string()?;
        let epochs = r.u32()? as usize;
        let robust_epochs = r.u32()? as usize;
        let seed = r.u64()?;
        let robust = r.u8()? != 0;
        let pgd = if r.u8()? != 0 {
            Some(PgdConfig {
                steps: r.u32()? as usize,
                step_size: r.f64()?,
                epsilon: r.f64()?,
            })
        } else {
            None
        };
        let robust_seed = if r.u8()? != 0 { Some(r.u64()?) } else { None };
        let provenance = Provenance {
            dataset_id,
            epochs,
            robust_epochs,
            seed,
            robust,
            pgd,
            robust_seed,
        };

        let declared = r.u64()? as usize;
        let mut loaded = 0usize;

        let extractor = match arch {
            None => {
                if has_head {
                    return Err(bad("identity extractor cannot carry a head"));
                }
                FeatureExtractor::identity_from_parts(h, w, c, provenance)
            }
            Some(arch) => {
                let mut convs = Vec::with_capacity(arch.conv_channels.len());
                let mut in_ch = arch.input_channels;
                for &out_ch in &arch.conv_channels {
                    let wlen = out_ch * in_ch * 9;
                    let wv = r.weights(wlen)?;
                    let bv = r.weights(out_ch)?;
                    loaded += wlen + out_ch;
                    convs.push(ConvLayer {
                        in_ch,
                        out_ch,
                        w: wv,
                        b: bv,
                    });
                    in_ch = out_ch;
                }
                let dw = r.weights(in_ch * arch.embed_dim)?;
                let db = r.weights(arch.embed_dim)?;
                loaded += in_ch * arch.embed_dim + arch.embed_dim;
                let dense = Dense {
                    in_dim: in_ch,
                    out_dim: arch.embed_dim,
                    w: dw,
                    b: db,
                };
                let net = ConvNet {
                    input_h: arch.input_height,
                    input_w: arch.input_width,
                    input_c: arch.input_channels,
                    convs,
                    dense,
                };
                let head = if has_head {
                    let hw = r.weights(head_labels.len() * arch.embed_dim)?;
                    let hb = r.weights(head_labels.len())?;
                    loaded += head_labels.len() * arch.embed_dim + head_labels.len();
                    Some(Dense {
                        in_dim: arch.embed_dim,
                        out_dim: head_labels.len(),
                        w: hw,
                        b: hb,
                    })
                } else {
                    None
                };
                FeatureExtractor::from_parts(net, head, head_labels, provenance)
            }
        };

        if loaded != declared {
            return Err(bad(&format!(
                "weight count mismatch: file declares {declared}, architecture needs {loaded}"
            )));
        }
        Ok(extractor)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_dataset;
    use super::super::{train_extractor, ArchConfig, FeatureExtractor};
    use crate::error::Error;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            input_height: 16,
            input_width: 16,
            input_channels: 3,
            conv_channels: vec![8, 16],
            embed_dim: 16,
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(3, 6, 16, 20);
        let phi = train_extractor(&data, &small_arch(), 3, 21).unwrap();
        let path = dir.path().join("phi.ckpt");
        phi.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();

        assert_eq!(phi.weight_checksum(), back.weight_checksum());
        assert_eq!(phi.head_labels(), back.head_labels());
        assert_eq!(phi.provenance().epochs, back.provenance().epochs);
        let img = &data.get("c00").unwrap().train[0];
        assert_eq!(phi.embed(img).unwrap(), back.embed(img).unwrap());
    }

    #[test]
    fn identity_extractor_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let phi = FeatureExtractor::identity(16, 20, 1);
        let path = dir.path().join("id.ckpt");
        phi.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();
        assert_eq!(back.input_shape(), (16, 20, 1));
        assert_eq!(back.embed_dim(), 320);
    }

    #[test]
    fn rejects_foreign_and_versioned_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            FeatureExtractor::load(&path),
            Err(Error::Config(_))
        ));

        // Flip the version field of a valid checkpoint.
        let phi = FeatureExtractor::identity(16, 16, 1);
        let vpath = dir.path().join("v.ckpt");
        phi.save(&vpath).unwrap();
        let mut bytes = std::fs::read(&vpath).unwrap();
        bytes[8] = 9;
        std::fs::write(&vpath, &bytes).unwrap();
        assert!(matches!(
            FeatureExtractor::load(&vpath),
            Err(Error::Config(_))
        ));
    }
}
