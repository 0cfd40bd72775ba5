//! Deterministic binary persistence for model weights and datasets.
//!
//! Both formats are little-endian, length-prefixed, and self-describing:
//! a four-byte magic, one version byte, an architecture/dataset header,
//! then the payload. Values are always stored as 64-bit floats.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::models::net::{SfsNet, SslNet};
use crate::models::Network;
use crate::scalar::{Point3, Scalar};
use crate::training::{SfsDataset, SslDataset};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"WSWT";
pub const DATASET_MAGIC: [u8; 4] = *b"WSDS";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {FORMAT_VERSION})")]
    Version { found: u8 },
    #[error("truncated or corrupt file: {0}")]
    Corrupt(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ssl,
    Sfs,
    Baseline,
}

impl ModelKind {
    fn to_byte(self) -> u8 {
        match self {
            ModelKind::Ssl => 0,
            ModelKind::Sfs => 1,
            ModelKind::Baseline => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self, FormatError> {
        match b {
            0 => Ok(ModelKind::Ssl),
            1 => Ok(ModelKind::Sfs),
            2 => Ok(ModelKind::Baseline),
            x => Err(FormatError::Corrupt(format!("unknown model kind {x}"))),
        }
    }
}

/// Enough to rebuild the layer stack before loading values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub kind: ModelKind,
    pub mic_count: usize,
    pub source_count: usize,
    /// Conv widths (SSL/Baseline) or U-net encoder widths (SFS).
    pub widths1: Vec<usize>,
    /// MLP widths (SSL/Baseline); empty for SFS.
    pub widths2: Vec<usize>,
}

/// Ordered named tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: ArchDescriptor,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ModelWeights {
    pub fn from_ssl<T: Scalar>(net: &SslNet<T>, kind: ModelKind) -> Self {
        assert!(matches!(kind, ModelKind::Ssl | ModelKind::Baseline));
        ModelWeights {
            arch: ArchDescriptor {
                kind,
                mic_count: net.mic_count,
                source_count: if kind == ModelKind::Baseline { 2 } else { 1 },
                widths1: net.conv_widths.clone(),
                widths2: net.mlp_widths.clone(),
            },
            params: collect_params(net),
        }
    }

    pub fn from_sfs<T: Scalar>(net: &SfsNet<T>) -> Self {
        ModelWeights {
            arch: ArchDescriptor {
                kind: ModelKind::Sfs,
                mic_count: net.mic_count,
                source_count: net.source_count,
                widths1: net.widths.clone(),
                widths2: vec![],
            },
            params: collect_params(net),
        }
    }

    /// Rebuild the network this descriptor came from and load the values.
    pub fn to_ssl<T: Scalar>(&self) -> Result<SslNet<T>, FormatError> {
        let out_dim = match self.arch.kind {
            ModelKind::Ssl => 3,
            ModelKind::Baseline => 6,
            ModelKind::Sfs => {
                return Err(FormatError::ArchMismatch(
                    "weights describe an SFS network".into(),
                ))
            }
        };
        let mut rng = crate::seed::stream_rng(0, "rebuild", 0);
        let mut net = SslNet::build(
            self.arch.mic_count,
            out_dim,
            &self.arch.widths1,
            &self.arch.widths2,
            &mut rng,
        );
        apply_params(&mut net, &self.params)?;
        Ok(net)
    }

    pub fn to_sfs<T: Scalar>(&self) -> Result<SfsNet<T>, FormatError> {
        if self.arch.kind != ModelKind::Sfs {
            return Err(FormatError::ArchMismatch(
                "weights do not describe an SFS network".into(),
            ));
        }
        let mut rng = crate::seed::stream_rng(0, "rebuild", 0);
        let mut net = SfsNet::build(
            self.arch.mic_count,
            self.arch.source_count,
            &self.arch.widths1,
            &mut rng,
        );
        apply_params(&mut net, &self.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&WEIGHTS_MAGIC);
        buf.push(FORMAT_VERSION);
        buf.push(self.arch.kind.to_byte());
        put_u32(&mut buf, self.arch.mic_count);
        put_u32(&mut buf, self.arch.source_count);
        put_usize_list(&mut buf, &self.arch.widths1);
        put_usize_list(&mut buf, &self.arch.widths2);
        put_u32(&mut buf, self.params.len());
        for (name, shape, values) in &self.params {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(shape.len() as u8);
            for &d in shape {
                put_u32(&mut buf, d);
            }
            for &v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut r = Reader::open(path, WEIGHTS_MAGIC)?;
        let kind = ModelKind::from_byte(r.u8()?)?;
        let mic_count = r.u32()? as usize;
        let source_count = r.u32()? as usize;
        let widths1 = r.usize_list()?;
        let widths2 = r.usize_list()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.name()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(r.f64()?);
            }
            params.push((name, shape, values));
        }
        r.done()?;
        Ok(ModelWeights {
            arch: ArchDescriptor {
                kind,
                mic_count,
                source_count,
                widths1,
                widths2,
            },
            params,
        })
    }
}

fn collect_params<T: Scalar, N: Network<T>>(net: &N) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    net.params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.data().iter().map(|v| v.to_real()).collect(),
            )
        })
        .collect()
}

fn apply_params<T: Scalar, N: Network<T>>(
    net: &mut N,
    params: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<(), FormatError> {
    let mut targets = net.params_mut();
    if targets.len() != params.len() {
        return Err(FormatError::ArchMismatch(format!(
            "expected {} parameters, file has {}",
            targets.len(),
            params.len()
        )));
    }
    for (t, (name, shape, values)) in targets.iter_mut().zip(params) {
        if &t.name != name {
            return Err(FormatError::ArchMismatch(format!(
                "parameter name mismatch: expected `{}`, file has `{name}`",
                t.name
            )));
        }
        if t.value.shape() != shape.as_slice() {
            return Err(FormatError::ArchMismatch(format!(
                "shape mismatch for `{name}`: expected {:?}, file has {shape:?}",
                t.value.shape()
            )));
        }
        for (dst, &v) in t.value.data_mut().iter_mut().zip(values) {
            *dst = T::real(v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Ssl,
    Sfs,
}

pub fn save_ssl_dataset(ds: &SslDataset, path: &Path) -> Result<(), FormatError> {
    let mut buf = dataset_header(0, ds.frequency_hz, ds.seed, ds.positions.len(), ds.train_count);
    for p in &ds.positions {
        for a in 0..3 {
            buf.extend_from_slice(&p.0[a].to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn save_sfs_dataset(ds: &SfsDataset, path: &Path) -> Result<(), FormatError> {
    let mut buf = dataset_header(1, ds.frequency_hz, ds.seed, ds.pairs.len(), ds.train_count);
    for (a, b) in &ds.pairs {
        for q in 0..3 {
            buf.extend_from_slice(&a.0[q].to_le_bytes());
        }
        for q in 0..3 {
            buf.extend_from_slice(&b.0[q].to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Either dataset kind, as read back from a file.
#[derive(Debug, Clone)]
pub enum Dataset {
    Ssl(SslDataset),
    Sfs(SfsDataset),
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let mut r = Reader::open(path, DATASET_MAGIC)?;
    let kind = r.u8()?;
    let frequency_hz = r.f64()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let train_count = r.u32()? as usize;
    if train_count > count {
        return Err(FormatError::Corrupt(format!(
            "train count {train_count} exceeds item count {count}"
        )));
    }
    let ds = match kind {
        0 => {
            let mut positions = Vec::with_capacity(count);
            for _ in 0..count {
                positions.push(Point3([r.f64()?, r.f64()?, r.f64()?]));
            }
            Dataset::Ssl(SslDataset {
                positions,
                train_count,
                frequency_hz,
                seed,
            })
        }
        1 => {
            let mut pairs = Vec::with_capacity(count);
            for _ in 0..count {
                let a = Point3([r.f64()?, r.f64()?, r.f64()?]);
                let b = Point3([r.f64()?, r.f64()?, r.f64()?]);
                pairs.push((a, b));
            }
            Dataset::Sfs(SfsDataset {
                pairs,
                train_count,
                frequency_hz,
                seed,
            })
        }
        x => return Err(FormatError::Corrupt(format!("unknown dataset kind {x}"))),
    };
    r.done()?;
    Ok(ds)
}

fn dataset_header(kind: u8, freq: f64, seed: u64, count: usize, train_count: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(kind);
    buf.extend_from_slice(&freq.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    put_u32(&mut buf, count);
    put_u32(&mut buf, train_count);
    buf
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_usize_list(buf: &mut Vec<u8>, v: &[usize]) {
    put_u32(buf, v.len());
    for &x in v {
        put_u32(buf, x);
    }
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path, magic: [u8; 4]) -> Result<Self, FormatError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        let mut r = Reader { data, pos: 0 };
        let found: [u8; 4] = r.bytes(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version { found: version });
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8], FormatError> {
        if self.pos + n > self.data.len() {
            return Err(FormatError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, FormatError> {
        let len = u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.bytes(len)?.to_vec())
            .map_err(|_| FormatError::Corrupt("non-utf8 parameter name".into()))
    }

    fn usize_list(&mut self) -> Result<Vec<usize>, FormatError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn done(&mut self) -> Result<(), FormatError> {
        if self.pos != self.data.len() {
            return Err(FormatError::Corrupt(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;

    #[test]
    fn weights_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut rng = stream_rng(11, "io", 0);
        // small net to keep the file tiny
        let net = SslNet::<f64>::build(16, 3, &[4, 8], &[16, 8], &mut rng);
        let w = ModelWeights::from_ssl(&net, ModelKind::Ssl);
        w.save(&path).unwrap();
        let back = ModelWeights::load(&path).unwrap();
        assert_eq!(w, back);

        let net2 = back.to_ssl::<f64>().unwrap();
        for (a, b) in net.params().iter().zip(net2.params()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.name, b.name);
        }
    }

    #[test]
    fn corrupt_and_versioned_files_error_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut rng = stream_rng(12, "io", 0);
        let net = SslNet::<f64>::build(16, 3, &[4], &[8], &mut rng);
        let w = ModelWeights::from_ssl(&net, ModelKind::Ssl);
        w.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelWeights::load(&path),
            Err(FormatError::BadMagic { .. })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'W';
        bytes[4] = FORMAT_VERSION + 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelWeights::load(&path),
            Err(FormatError::Version { .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        let mut truncated = bytes.clone();
        truncated[4] = FORMAT_VERSION;
        truncated.truncate(bytes.len() - 9);
        std::fs::write(&path, &truncated).unwrap();
        assert!(matches!(
            ModelWeights::load(&path),
            Err(FormatError::Corrupt(_))
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = SslDataset::generate(20, 500.0, 99);
        save_ssl_dataset(&ds, &path).unwrap();
        match load_dataset(&path).unwrap() {
            Dataset::Ssl(back) => {
                assert_eq!(ds.positions, back.positions);
                assert_eq!(ds.train_count, back.train_count);
                assert_eq!(ds.frequency_hz, back.frequency_hz);
                assert_eq!(ds.seed, back.seed);
            }
            _ => panic!("wrong kind"),
        }

        let sfs = SfsDataset::generate_from(&ds, 15, 7);
        let path2 = dir.path().join("ds2.bin");
        save_sfs_dataset(&sfs, &path2).unwrap();
        match load_dataset(&path2).unwrap() {
            Dataset::Sfs(back) => assert_eq!(sfs.pairs, back.pairs),
            _ => panic!("wrong kind"),
        }
    }
}
