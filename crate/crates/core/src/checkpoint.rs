//! Binary checkpoint of named `f32` tensors.
//!
//! Layout (little-endian): `"LSI1"`, `u32` version, `u32` entry count, then
//! per entry `u16` name length, UTF-8 name, `u8` dtype (0 = f32), `u8` rank,
//! `u32` dims, payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::digital::{DigitalEncoder, EncoderConfig, InputNorm};
use crate::error::{LsiError, Result};
use crate::generative::{DecoderConfig, Generator, InversionEncoder};
use crate::nn::ParamStore;
use crate::optical::OpticalEncoder;
use crate::scalar::Scalar;
use crate::train::LsiModel;

pub const MAGIC: &[u8; 4] = b"LSI1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    /// Adds or replaces `name`.
    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        let entry = (name.to_string(), t.shape().to_vec(), data);
        match self.entries.iter_mut().find(|(n, _, _)| n == name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn insert_raw(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(LsiError::Checkpoint(format!("{name}: shape {shape:?} for {} values", data.len())));
        }
        self.entries.retain(|(n, _, _)| n != name);
        self.entries.push((name.to_string(), shape, data));
        Ok(())
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, shape, data)| {
            Tensor::new(shape.clone(), data.iter().map(|&v| T::lit(v as f64)).collect()).expect("stored shape")
        })
    }

    pub fn require<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name).ok_or_else(|| LsiError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn raw(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn insert_store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.insert(name, t);
        }
    }

    pub fn load_store<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.load_from(|name| self.get(name))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| LsiError::Checkpoint(format!("name too long: {name}")))?;
            let rank = u8::try_from(shape.len()).map_err(|_| LsiError::Checkpoint(format!("{name}: rank too high")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| LsiError::Checkpoint(format!("{name}: dimension too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LsiError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LsiError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| LsiError::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(LsiError::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| LsiError::Checkpoint("payload overflow".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            entries.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(LsiError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LsiError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over every payload byte, in entry order.
    pub fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, _, data) in &self.entries {
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const MASK_LOGITS: &str = "phi.logits";
pub const NORM_MEAN: &str = "enc.norm.mean";
pub const NORM_STD: &str = "enc.norm.std";

impl Checkpoint {
    pub fn insert_lsi<T: Scalar>(&mut self, model: &LsiModel<T>) {
        self.insert(MASK_LOGITS, model.optical.logits());
        self.insert_store(model.encoder.params());
        if let Some(norm) = model.encoder.input_norm() {
            let d = norm.mean.len();
            let as_tensor = |v: &[f64]| Tensor::<f64>::new(vec![d], v.to_vec()).expect("norm shape");
            self.insert(NORM_MEAN, &as_tensor(&norm.mean));
            self.insert(NORM_STD, &as_tensor(&norm.std));
        }
    }

    /// Rebuilds an LSI model whose architecture is given by `cfg`.
    pub fn load_lsi<T: Scalar>(&self, cfg: &EncoderConfig, height: usize, width: usize) -> Result<LsiModel<T>> {
        let logits = self.require::<T>(MASK_LOGITS)?;
        if logits.shape() != [cfg.d, height * width] {
            return Err(LsiError::Checkpoint(format!(
                "mask logits {:?} do not match d = {} at {height}x{width}",
                logits.shape(),
                cfg.d
            )));
        }
        let optical = OpticalEncoder::from_logits(logits, height, width)?;
        let mut encoder = DigitalEncoder::new(cfg.clone(), 0)?;
        self.load_store(encoder.params_mut())?;
        let norm = match (self.raw(NORM_MEAN), self.raw(NORM_STD)) {
            (Some((_, m)), Some((_, s))) => Some(InputNorm {
                mean: m.iter().map(|&v| v as f64).collect(),
                std: s.iter().map(|&v| v as f64).collect(),
            }),
            (None, None) => None,
            _ => return Err(LsiError::Checkpoint("input normalization is incomplete".into())),
        };
        encoder.set_input_norm(norm)?;
        Ok(LsiModel { optical, encoder })
    }

    pub fn load_decoder<T: Scalar>(&self, cfg: &DecoderConfig) -> Result<(Generator<T>, InversionEncoder<T>)> {
        let mut gen = Generator::new(cfg.clone(), 0)?;
        let mut inv = InversionEncoder::new(cfg.clone(), 0)?;
        self.load_store(gen.params_mut())?;
        self.load_store(inv.params_mut())?;
        Ok((gen, inv))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LsiError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("a.w", &Tensor::new(vec![2, 3], vec![1.0f32, -2.5, 3.25, 1e-30, f32::MAX, -0.0]).unwrap());
        c.insert("b", &Tensor::<f64>::scalar(0.1));
        c.insert_raw("empty", vec![0, 4], vec![]).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.payload_hash(), c.payload_hash());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (shape, data) = back.raw("a.w").unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data[5].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LSI1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"a.w");
        assert_eq!(bytes[17], 0);
        assert_eq!(bytes[18], 2);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(LsiError::Checkpoint(_))));
        let good = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"LSI2").is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn lsi_model_round_trip() {
        let cfg = EncoderConfig::desk(4);
        let mut model = LsiModel::<f64>::new(&cfg, 8, 8, 3).unwrap();
        model
            .encoder
            .set_input_norm(Some(InputNorm { mean: vec![1.0, 2.0, 3.0, 4.0], std: vec![0.5, 1.0, 1.5, 2.0] }))
            .unwrap();
        let mut c = Checkpoint::new();
        c.insert_lsi(&model);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap().load_lsi::<f64>(&cfg, 8, 8).unwrap();
        assert_eq!(back.optical.binarized(), model.optical.binarized());
        assert_eq!(back.encoder.input_norm(), model.encoder.input_norm());
        for ((na, a), (nb, b)) in back.encoder.params().iter().zip(model.encoder.params().iter()) {
            assert_eq!(na, nb);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(c.load_lsi::<f64>(&EncoderConfig::desk(8), 8, 8).is_err());
    }

    #[test]
    fn file_round_trip_and_store_loading() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f64>::new();
        store.add("x.w", Tensor::new(vec![2], vec![0.5, 0.25]).unwrap());
        let mut c = Checkpoint::new();
        c.insert_store(&store);
        let path = dir.path().join("sub/model.lsi");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let mut other = ParamStore::<f64>::new();
        other.add("x.w", Tensor::zeros(vec![2]));
        back.load_store(&mut other).unwrap();
        assert_eq!(other.by_name("x.w").unwrap().data(), &[0.5, 0.25]);
        let mut missing = ParamStore::<f64>::new();
        missing.add("y", Tensor::zeros(vec![1]));
        assert!(back.load_store(&mut missing).is_err());
    }
}
