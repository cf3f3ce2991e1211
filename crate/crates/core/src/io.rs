//! On-disk formats: bit-packed pathway mask files, tensor checkpoints and
//! small JSON/CSV helpers.
//!
//! Mask file layout (all integers little-endian):
//!
//! ```text
//! "NPWY"  u16 version  u32 layer_count  (u32 c, u32 h, u32 w) * layer_count
//! payload: each layer's c*h*w bits, row-major, LSB-first, padded to a byte
//! u32 CRC-32 of the payload
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "NPCK"  u16 version  u32 header_len  header (JSON)  f64 data  u32 CRC-32 of data
//! ```
//!
//! The JSON header lists every tensor's name and shape in data order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::instrumentation::{Architecture, LayerSpec, PathwayMask, TargetModel};
use crate::tensor::Tensor;
use crate::training::{LossRecord, TrainConfig};

pub const MASK_MAGIC: &[u8; 4] = b"NPWY";
pub const MASK_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes a finalized mask.
pub fn encode_mask(mask: &PathwayMask) -> Result<Vec<u8>> {
    mask.require_finalized()?;
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.num_layers() as u32).to_le_bytes());
    for s in mask.specs() {
        for d in s.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let start = out.len();
    for layer in mask.layers() {
        let mut byte = 0u8;
        for (i, &v) in layer.data().iter().enumerate() {
            if v != 0.0 {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                out.push(byte);
                byte = 0;
            }
        }
        if layer.len() % 8 != 0 {
            out.push(byte);
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("unexpected end of file reading {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a mask file, verifying magic, version and checksum.
pub fn decode_mask(bytes: &[u8]) -> std::result::Result<PathwayMask, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MASK_MAGIC {
        return Err("not a pathway mask file (bad magic)".into());
    }
    let version = r.u16("version")?;
    if version != MASK_VERSION {
        return Err(format!("unsupported mask file version {version}"));
    }
    let count = r.u32("layer count")? as usize;
    if count == 0 || count > 4096 {
        return Err(format!("implausible layer count {count}"));
    }
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let c = r.u32("layer dims")? as usize;
        let h = r.u32("layer dims")? as usize;
        let w = r.u32("layer dims")? as usize;
        specs.push(LayerSpec::new(c, h, w));
    }
    let start = r.pos;
    let mut layers = Vec::with_capacity(count);
    for s in &specs {
        let packed = r.take(s.len().div_ceil(8), "payload")?;
        let data = (0..s.len()).map(|i| ((packed[i / 8] >> (i % 8)) & 1) as f64).collect();
        layers.push(Tensor::from_vec(&s.dims(), data).map_err(|e| e.to_string())?);
    }
    let payload = &bytes[start..r.pos];
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after checksum", bytes.len() - r.pos));
    }
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"));
    }
    PathwayMask::from_layers(layers).map_err(|e| e.to_string())
}

pub fn write_mask(path: &Path, mask: &PathwayMask) -> Result<()> {
    fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<PathwayMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes).map_err(|msg| Error::format(path, msg))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors with a free-form JSON description.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let start = out.len();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u32("header length")? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len, "header")?).map_err(|e| format!("bad checkpoint header: {e}"))?;
        let start = r.pos;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = r.take(8 * n, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data).map_err(|e| e.to_string())?));
        }
        let data = &bytes[start..r.pos];
        let stored = r.u32("checksum")?;
        if crc32fast::hash(data) != stored {
            return Err("checksum mismatch in tensor data".into());
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after checksum".into());
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub arch: String,
    pub input: (usize, usize, usize),
    pub num_classes: usize,
}

pub fn save_model(path: &Path, model: &TargetModel) -> Result<()> {
    let meta = ModelMeta {
        kind: "model".into(),
        arch: model.arch().to_string(),
        input: model.input_shape(),
        num_classes: model.num_classes(),
    };
    Checkpoint { meta: serde_json::to_value(meta).unwrap(), tensors: model.state_tensors() }.write(path)
}

pub fn load_model(path: &Path) -> Result<TargetModel> {
    let ck = Checkpoint::read(path)?;
    let meta: ModelMeta = serde_json::from_value(ck.meta).map_err(|e| Error::format(path, e.to_string()))?;
    if meta.kind != "model" {
        return Err(Error::format(path, format!("expected a model checkpoint, found {:?}", meta.kind)));
    }
    let mut model = Architecture::from_name(&meta.arch)?.build(meta.input, meta.num_classes, 0)?;
    model.load_state(&ck.tensors)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub kind: String,
    pub config: GeneratorConfig,
    pub epoch: usize,
    pub train: Option<TrainConfig>,
    /// Checksum of the target model the generator was trained against.
    pub model_checksum: Option<u32>,
}

pub fn save_generator(path: &Path, generator: &Generator, meta: GeneratorMeta) -> Result<()> {
    Checkpoint { meta: serde_json::to_value(meta).unwrap(), tensors: generator.named_tensors() }.write(path)
}

pub fn load_generator(path: &Path) -> Result<(Generator, GeneratorMeta)> {
    let ck = Checkpoint::read(path)?;
    let meta: GeneratorMeta = serde_json::from_value(ck.meta).map_err(|e| Error::format(path, e.to_string()))?;
    if meta.kind != "generator" {
        return Err(Error::format(path, format!("expected a generator checkpoint, found {:?}", meta.kind)));
    }
    let g = Generator::from_named_tensors(meta.config.clone(), &ck.tensors)?;
    Ok((g, meta))
}

/// Loss curve as `epoch,step,kd,sparsity,total` rows.
pub fn loss_curve_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,kd,sparsity,total\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.kd, r.sparsity, r.total));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrumentation::Architecture;
    use proptest::prelude::*;

    #[test]
    fn mask_layout_is_lsb_first() {
        let specs = [LayerSpec::new(1, 1, 10)];
        let bits = [true, false, false, false, false, false, false, true, false, true];
        let m = PathwayMask::from_bits(&specs, &bits).unwrap();
        let bytes = encode_mask(&m).unwrap();
        assert_eq!(&bytes[..4], b"NPWY");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(&bytes[10..22], &[1, 0, 0, 0, 1, 0, 0, 0, 10, 0, 0, 0]);
        assert_eq!(&bytes[22..24], &[0b1000_0001, 0b0000_0010]);
        assert_eq!(bytes.len(), 28);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), crc32fast::hash(&bytes[22..24]));
        assert_eq!(decode_mask(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupted_masks_are_rejected() {
        let m = PathwayMask::ones(&[LayerSpec::new(2, 3, 3)]);
        let mut bytes = encode_mask(&m).unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0x01;
        assert!(decode_mask(&bytes).unwrap_err().contains("checksum"));
        assert!(decode_mask(&bytes[..10]).is_err());
        let relaxed = PathwayMask::from_layers(vec![Tensor::full(&[1, 1, 1], 0.5)]).unwrap();
        assert!(encode_mask(&relaxed).is_err());
    }

    proptest! {
        #[test]
        fn mask_round_trip(dims in prop::collection::vec((1usize..5, 1usize..7, 1usize..7), 1..4), seed in any::<u64>()) {
            let specs: Vec<LayerSpec> = dims.iter().map(|&(c, h, w)| LayerSpec::new(c, h, w)).collect();
            let total: usize = specs.iter().map(LayerSpec::len).sum();
            let bits: Vec<bool> = (0..total).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1).collect();
            let m = PathwayMask::from_bits(&specs, &bits).unwrap();
            let back = decode_mask(&encode_mask(&m).unwrap()).unwrap();
            prop_assert_eq!(back.bits(), bits);
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn model_and_generator_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Architecture::Vgg11Bn32.build((3, 32, 32), 10, 4).unwrap();
        let path = dir.path().join("model.ck");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.checksum(), model.checksum());

        let cfg = GeneratorConfig::for_layers(&[LayerSpec::new(2, 8, 8), LayerSpec::new(3, 4, 4)]).unwrap();
        let g = Generator::new(cfg.clone()).unwrap();
        let meta = GeneratorMeta { kind: "generator".into(), config: cfg, epoch: 3, train: None, model_checksum: Some(7) };
        let gpath = dir.path().join("gen.ck");
        save_generator(&gpath, &g, meta.clone()).unwrap();
        let (g2, meta2) = load_generator(&gpath).unwrap();
        assert_eq!(g2, g);
        assert_eq!(meta2, meta);
        assert!(matches!(load_model(&gpath), Err(Error::Format { .. })));

        let mut bytes = fs::read(&gpath).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xff;
        fs::write(&gpath, bytes).unwrap();
        assert!(matches!(load_generator(&gpath), Err(Error::Format { .. })));
    }

    #[test]
    fn loss_curve_columns() {
        let h = [LossRecord { epoch: 0, step: 0, kd: 0.5, sparsity: 10.0, total: 0.51, firing_sparsity: 0.2 }];
        assert_eq!(loss_curve_csv(&h), "epoch,step,kd,sparsity,total\n0,0,0.5,10,0.51\n");
    }
}
