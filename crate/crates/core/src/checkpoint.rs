//! Versioned binary container for model weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTCK" | version: u32 | section count: u32
//! per section: name len: u32 | name | payload len: u64 | crc32(payload): u32 | payload
//! payload: tensor count: u32, then per tensor:
//!          name len: u32 | name | ndim: u32 | dims: u32 * ndim | f32 values
//! ```

use std::fs;
use std::path::Path;

use crate::diffcore::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::fvreval::FvrModel;
use crate::model::{ModelConfig, MtModel, SECTIONS};
use crate::mtaug::MotionBasis;

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;

pub type Tensors = Vec<(String, Array)>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Tensors)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn encode_payload(tensors: &Tensors) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_name(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_payload(buf: &[u8]) -> Result<Tensors> {
    let mut r = Reader { buf, pos: 0 };
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = r.name()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Array::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes in section".into()));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensors> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inserts or replaces a section.
    pub fn set(&mut self, name: &str, tensors: Tensors) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensors,
            None => self.sections.push((name.to_string(), tensors)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.sections.len() as u32);
        for (name, tensors) in &self.sections {
            let payload = encode_payload(tensors);
            put_name(&mut out, name);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            put_u32(&mut out, crc32fast::hash(&payload));
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..n {
            let name = r.name()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("section too large".into()))?;
            let crc = r.u32()?;
            let payload = r.take(len)?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checkpoint(format!("checksum mismatch in section {name}")));
            }
            ck.sections.push((name, decode_payload(payload)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after last section".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Model configuration plus every model section.
    pub fn from_model(model: &MtModel) -> Self {
        let mut ck = Checkpoint::new();
        ck.set_meta(&model.config);
        for s in SECTIONS {
            ck.set(s, model.store.section(&format!("{s}.")));
        }
        ck
    }

    /// Records the model configuration (also fixes the image size).
    pub fn set_meta(&mut self, c: &ModelConfig) {
        let meta = [c.height, c.width, c.keypoints, c.downscale, c.widths[0], c.widths[1], c.widths[2], c.widths[3]]
            .iter()
            .map(|&v| v as f32)
            .collect();
        self.set("meta", vec![("meta.model".into(), Array::new(vec![8], meta).expect("shape"))]);
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let meta = self
            .get("meta")
            .and_then(|t| t.first())
            .ok_or_else(|| Error::Checkpoint("missing meta section".into()))?;
        let v: Vec<usize> = meta.1.data().iter().map(|&x| x as usize).collect();
        if v.len() != 8 {
            return Err(Error::Checkpoint("malformed meta section".into()));
        }
        Ok(ModelConfig {
            height: v[0],
            width: v[1],
            keypoints: v[2],
            downscale: v[3],
            widths: [v[4], v[5], v[6], v[7]],
            seed: 0,
        })
    }

    pub fn to_model(&self) -> Result<MtModel> {
        let mut model = MtModel::new(self.model_config()?)?;
        for s in SECTIONS {
            let t = self
                .get(s)
                .ok_or_else(|| Error::Checkpoint(format!("missing section {s}")))?;
            restore(&mut model.store, s, t)?;
        }
        Ok(model)
    }

    pub fn set_basis(&mut self, basis: &MotionBasis) {
        self.set("basis", basis.to_tensors());
    }

    pub fn basis(&self) -> Result<Option<MotionBasis>> {
        self.get("basis")
            .map(|t| MotionBasis::from_tensors(&t.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>()))
            .transpose()
    }

    pub fn set_embedder(&mut self, model: &FvrModel) {
        self.set("embedder", model.store.section("embedder."));
    }

    /// Embedder for `h x w` inputs, if the section is present.
    pub fn embedder(&self, h: usize, w: usize) -> Result<Option<FvrModel>> {
        let Some(t) = self.get("embedder") else {
            return Ok(None);
        };
        let mut m = FvrModel::new(h, w, 0);
        restore(&mut m.store, "embedder", t)?;
        Ok(Some(m))
    }
}

/// Copies a stored section into the matching parameters of `store`; names and
/// shapes must agree exactly.
pub fn restore(store: &mut ParamStore, section: &str, tensors: &Tensors) -> Result<()> {
    let prefix = format!("{section}.");
    let expected: Vec<String> = store.section(&prefix).into_iter().map(|(n, _)| n).collect();
    let found: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
    if expected.iter().collect::<Vec<_>>() != found {
        return Err(Error::Checkpoint(format!("section {section}: tensor names do not match the model")));
    }
    let arrays: Vec<Array> = tensors.iter().map(|(_, a)| a.clone()).collect();
    store.load_section(&prefix, &arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> MtModel {
        MtModel::new(ModelConfig {
            height: 32,
            width: 48,
            keypoints: 3,
            widths: [4, 4, 8, 8],
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small_model(1);
        let mut ck = Checkpoint::from_model(&m);
        let basis = crate::mtaug::fit_basis(&[vec![1.0, 2.0, 0.0, 1.0, 3.0, 1.0], vec![0.0; 6], vec![2.0; 6]], 4).unwrap();
        ck.set_basis(&basis);
        let fvr = FvrModel::new(32, 48, 2);
        ck.set_embedder(&fvr);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let m2 = back.to_model().unwrap();
        for (a, b) in m.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(m2.config.keypoints, 3);
        assert_eq!(back.basis().unwrap().unwrap().len(), basis.len());
        let e = back.embedder(32, 48).unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array::from_fn(&[1, 32, 48], |_| rng.gen_range(0.0..1.0));
        assert_eq!(e.embed(&x).unwrap(), fvr.embed(&x).unwrap());
    }

    #[test]
    fn optional_sections_may_be_missing() {
        let ck = Checkpoint::from_model(&small_model(2));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.basis().unwrap().is_none());
        assert!(back.embedder(32, 48).unwrap().is_none());
        assert!(back.to_model().is_ok());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_model(&small_model(3)).to_bytes();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 3] ^= 0x40;
        let e = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(e.to_string().contains("checksum"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(Checkpoint::from_bytes(&ver).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(b"MTC").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn missing_model_section_is_an_error() {
        let ck = Checkpoint::from_model(&small_model(4));
        let mut partial = Checkpoint::new();
        for name in ck.section_names() {
            if name != "generator" {
                partial.set(name, ck.get(name).unwrap().clone());
            }
        }
        assert!(partial.to_model().is_err());
    }
}
