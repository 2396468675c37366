//! Binary container for parameters and cached datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MD4S"                      magic
//! u32                         format version
//! u32 + bytes                 header text (UTF-8 TOML)
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name
//!   u32                       rank
//!   u32 * rank                dims
//!   f32 * prod(dims)          values
//! u64                         training step
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::model::{Params, Tensor};

pub const MAGIC: &[u8; 4] = b"MD4S";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_params(cfg: &ExperimentConfig, params: &Params<f32>, step: u64) -> Self {
        let tensors = params.names().into_iter().zip(params.tensors().into_iter().cloned()).collect();
        Self { header: cfg.to_toml(), tensors, step }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.header)
    }

    pub fn params(&self) -> Result<Params<f32>> {
        Params::from_named(self.config()?.model, self.tensors.clone())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 8 + n.len() + 4 * (t.shape.len() + t.data.len())).sum();
        let mut out = Vec::with_capacity(24 + self.header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint { offset: 0, msg: "bad magic".into() });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint { offset: at, msg: format!("unsupported version {version}") });
        }
        let header = r.string("header")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("tensor size overflows"))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor { shape, data }));
        }
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { header, tensors, step })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Checkpoint { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(&format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint { offset: at, msg: format!("{what} is not UTF-8") })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fresh() -> (ExperimentConfig, Checkpoint) {
        let cfg = ExperimentConfig::default();
        let params = Params::<f32>::init(cfg.model, 3).unwrap();
        let ck = Checkpoint::from_params(&cfg, &params, 17);
        (cfg, ck)
    }

    #[test]
    fn round_trip_fresh_init() {
        let (cfg, ck) = fresh();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), Params::<f32>::init(cfg.model, 3).unwrap());
        assert_eq!(back.config().unwrap(), cfg);
        assert_eq!(back.step, 17);
    }

    #[test]
    fn file_round_trip() {
        let (_, ck) = fresh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.bin");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn bad_magic() {
        let (_, ck) = fresh();
        let mut b = ck.to_bytes();
        b[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&b).unwrap_err().to_string(), "bad magic at offset 0");
    }

    #[test]
    fn unsupported_version() {
        let (_, ck) = fresh();
        let mut b = ck.to_bytes();
        b[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let msg = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert_eq!(msg, "unsupported version 2 at offset 4");
    }

    #[test]
    fn truncation_names_offset() {
        let (_, ck) = fresh();
        let b = ck.to_bytes();
        let cut = b.len() - 3;
        match Checkpoint::from_bytes(&b[..cut]) {
            Err(Error::Checkpoint { offset, msg }) => {
                assert_eq!(offset, b.len() - 8);
                assert!(msg.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(Checkpoint::from_bytes(&b[..2]), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn layout_prefix() {
        let (_, ck) = fresh();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"MD4S");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let hlen = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        assert_eq!(&b[12..12 + hlen], ck.header.as_bytes());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip_bit_exactly(
            vals in proptest::collection::vec(proptest::num::f32::ANY, 0..40),
            step in any::<u64>(),
            name in "[a-z._0-9]{1,12}",
        ) {
            let n = vals.len();
            let ck = Checkpoint {
                header: "k = 1".into(),
                tensors: vec![(name, Tensor { shape: vec![n], data: vals.clone() })],
                step,
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.tensors[0].1.data), bits(&vals));
            prop_assert_eq!(back.step, step);
        }
    }
}
