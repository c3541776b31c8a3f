//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `FMCK`, format version `u32`, fingerprint
//! (`u16` length + UTF-8), stage tag `u8`, step `u64`, optimizer step `u64`,
//! tensor count `u32`, then a table of `(group u8, name, dtype u8, rank u8, dims u64...)`
//! followed by the raw tensor data in table order and the trailer `FMEND`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FMCK";
const TRAILER: &[u8; 5] = b"FMEND";

/// Which training stage wrote a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1a,
    Stage1b,
    Stage2,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Stage1a => 0,
            Stage::Stage1b => 1,
            Stage::Stage2 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stage::Stage1a),
            1 => Ok(Stage::Stage1b),
            2 => Ok(Stage::Stage2),
            _ => Err(Error::CorruptCheckpoint(format!("unknown stage tag {c}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1a => "1A",
            Stage::Stage1b => "1B",
            Stage::Stage2 => "2",
        })
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub params: TensorMap,
    pub ema: TensorMap,
    pub adam_m: TensorMap,
    pub adam_v: TensorMap,
    /// Number of optimizer updates applied so far (Adam bias correction).
    pub adam_step: u64,
    pub step: u64,
    pub fingerprint: String,
    pub stage: Stage,
    pub version: u32,
}

impl CheckpointState {
    /// Fails with [`Error::FingerprintMismatch`] unless `expected` matches.
    pub fn verify_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch { found: self.fingerprint.clone(), expected: expected.to_string() });
        }
        Ok(())
    }

    /// Fails with [`Error::StageMismatch`] unless the tag is in `allowed`.
    pub fn require_stage(&self, allowed: &[Stage], reason: &str) -> Result<()> {
        if !allowed.contains(&self.stage) {
            return Err(Error::StageMismatch { found: self.stage.to_string(), reason: reason.to_string() });
        }
        Ok(())
    }

    /// Checks that the EMA tree matches the parameter tree name-for-name and shape-for-shape.
    pub fn check_congruent(&self) -> Result<()> {
        if self.params.len() != self.ema.len() {
            return Err(Error::CorruptCheckpoint("EMA and parameter trees differ in size".into()));
        }
        for (k, p) in &self.params {
            match self.ema.get(k) {
                Some(e) if e.dims() == p.dims() => {}
                _ => return Err(Error::CorruptCheckpoint(format!("EMA entry for `{k}` missing or misshapen"))),
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        write_str(&mut w, &self.fingerprint)?;
        w.write_all(&[self.stage.code()])?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.adam_step.to_le_bytes())?;
        let groups = self.groups();
        let count: usize = groups.iter().map(|(_, m)| m.len()).sum();
        w.write_all(&(count as u32).to_le_bytes())?;
        for (g, map) in &groups {
            for (name, t) in *map {
                w.write_all(&[*g])?;
                write_str(&mut w, name)?;
                w.write_all(&[dtype_code(t.dtype())?, t.rank() as u8])?;
                for d in t.dims() {
                    w.write_all(&(*d as u64).to_le_bytes())?;
                }
            }
        }
        for (_, map) in &groups {
            for t in map.values() {
                write_data(&mut w, t)?;
            }
        }
        w.write_all(TRAILER)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, device: &Device) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let fingerprint = read_str(&mut r)?;
        let [stage] = read_array::<_, 1>(&mut r)?;
        let stage = Stage::from_code(stage)?;
        let step = u64::from_le_bytes(read_array(&mut r)?);
        let adam_step = u64::from_le_bytes(read_array(&mut r)?);
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let [g] = read_array::<_, 1>(&mut r)?;
            let name = read_str(&mut r)?;
            let [dt, rank] = read_array::<_, 2>(&mut r)?;
            let dims = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((g, name, dtype_from_code(dt)?, dims));
        }
        let mut state = CheckpointState {
            params: TensorMap::new(),
            ema: TensorMap::new(),
            adam_m: TensorMap::new(),
            adam_v: TensorMap::new(),
            adam_step,
            step,
            fingerprint,
            stage,
            version,
        };
        for (g, name, dtype, dims) in table {
            let t = read_data(&mut r, dtype, &dims, device)?;
            let map = match g {
                0 => &mut state.params,
                1 => &mut state.ema,
                2 => &mut state.adam_m,
                3 => &mut state.adam_v,
                _ => return Err(Error::CorruptCheckpoint(format!("unknown tensor group {g}"))),
            };
            map.insert(name, t);
        }
        let mut trailer = [0u8; 5];
        read_exact(&mut r, &mut trailer)?;
        if &trailer != TRAILER {
            return Err(Error::CorruptCheckpoint("missing trailer".into()));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::CorruptCheckpoint("trailing bytes after checkpoint".into()));
        }
        Ok(state)
    }

    fn groups(&self) -> [(u8, &TensorMap); 4] {
        [(0, &self.params), (1, &self.ema), (2, &self.adam_m), (3, &self.adam_v)]
    }
}

/// Writes `state` to `path` (via a temporary file and rename).
pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(f);
        state.write_to(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<CheckpointState> {
    let f = std::fs::File::open(path)?;
    CheckpointState::read_from(std::io::BufReader::new(f), device)
}

fn dtype_code(d: DType) -> Result<u8> {
    match d {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::invalid(format!("checkpoint cannot store dtype {other:?}"))),
    }
}

fn dtype_from_code(c: u8) -> Result<DType> {
    match c {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        _ => Err(Error::CorruptCheckpoint(format!("unknown dtype code {c}"))),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptCheckpoint("file is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::invalid("name too long for checkpoint"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
}

fn write_data<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            for v in flat.to_vec1::<f32>()? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        other => return Err(Error::invalid(format!("checkpoint cannot store dtype {other:?}"))),
    }
    Ok(())
}

fn read_data<R: Read>(r: &mut R, dtype: DType, dims: &[usize], device: &Device) -> Result<Tensor> {
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.filter(|&n| n <= 1 << 32).ok_or_else(|| Error::CorruptCheckpoint("implausible tensor shape".into()))?;
    let t = match dtype {
        DType::F32 => {
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf)?;
            let v: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, dims, device)?
        }
        _ => {
            let mut buf = vec![0u8; n * 8];
            read_exact(r, &mut buf)?;
            let v: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, dims, device)?
        }
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, seeded, to_f64_vec};

    fn random_state() -> CheckpointState {
        let dev = Device::Cpu;
        let mut rng = seeded(11);
        let mut map = |dt: DType| -> TensorMap {
            let mut m = TensorMap::new();
            m.insert("a.weight".into(), randn(&mut rng, &[3, 4], dt, &dev).unwrap());
            m.insert("b".into(), randn(&mut rng, &[5], dt, &dev).unwrap());
            m
        };
        CheckpointState {
            params: map(DType::F32),
            ema: map(DType::F32),
            adam_m: map(DType::F64),
            adam_v: map(DType::F64),
            adam_step: 17,
            step: 42,
            fingerprint: "abc123".into(),
            stage: Stage::Stage1b,
            version: CHECKPOINT_VERSION,
        }
    }

    fn bytes(s: &CheckpointState) -> Vec<u8> {
        let mut v = Vec::new();
        s.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = random_state();
        let buf = bytes(&s);
        let back = CheckpointState::read_from(&buf[..], &Device::Cpu).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.adam_step, 17);
        assert_eq!(back.stage, Stage::Stage1b);
        for (a, b) in [(&s.params, &back.params), (&s.ema, &back.ema), (&s.adam_m, &back.adam_m), (&s.adam_v, &back.adam_v)] {
            assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
            for (k, t) in a {
                assert_eq!(t.dtype(), b[k].dtype());
                let (x, y) = (to_f64_vec(t).unwrap(), to_f64_vec(&b[k]).unwrap());
                assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn truncation_and_version_errors_are_distinct() {
        let buf = bytes(&random_state());
        for cut in [0, 3, 10, buf.len() / 2, buf.len() - 1] {
            let r = CheckpointState::read_from(&buf[..cut], &Device::Cpu);
            assert!(matches!(r, Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            CheckpointState::read_from(&bad[..], &Device::Cpu),
            Err(Error::CheckpointVersion { found: 99, expected: 1 })
        ));
        let s = random_state();
        assert!(matches!(s.verify_fingerprint("zzz"), Err(Error::FingerprintMismatch { .. })));
        assert!(s.verify_fingerprint("abc123").is_ok());
        assert!(matches!(s.require_stage(&[Stage::Stage1a], "x"), Err(Error::StageMismatch { .. })));
    }
}
