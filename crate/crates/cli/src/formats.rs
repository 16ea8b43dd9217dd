//! Binary containers. Everything is little-endian.
//!
//! Tensor file (version 1): `"TEDS"`, `u32` version, `u32` rank, `u64` extents,
//! then `f64` payload in row-major order.
//!
//! Checkpoint (version 2): `"TEDS"`, `u32` version, `u64` config length and
//! UTF-8 TOML config, `u64` seed, `u64` optimizer step, `u32` parameter
//! count, then per parameter a `u32` name length, the name, `u32` rank,
//! `u64` extents and three payloads: value, first and second Adam moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use tenn_core::mimo::ChannelSample;
use tenn_core::{ParamStore64, Tensor64};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"TEDS";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 2;

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_shape(w: &mut impl Write, shape: &[usize]) -> Result<()> {
    put_u32(w, shape.len() as u32)?;
    shape.iter().try_for_each(|&e| put_u64(w, e as u64))
}

fn get_shape(r: &mut impl Read) -> Result<Vec<usize>> {
    let rank = get_u32(r)? as usize;
    ensure!(rank <= 16, "implausible tensor rank {rank}");
    let shape = (0..rank).map(|_| get_u64(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    ensure!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
    Ok(shape)
}

fn put_payload(w: &mut impl Write, data: &[f64]) -> Result<()> {
    data.iter().try_for_each(|x| Ok(w.write_all(&x.to_le_bytes())?))
}

fn get_payload(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).context("payload shorter than header")?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn check_magic(r: &mut impl Read, version: u32) -> Result<()> {
    let mut m = [0; 4];
    r.read_exact(&mut m)?;
    ensure!(&m == MAGIC, "not a TEDS file");
    let v = get_u32(r)?;
    ensure!(v == version, "expected format version {version}, found {v}");
    Ok(())
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut extra = [0; 1];
    ensure!(r.read(&mut extra)? == 0, "trailing bytes after payload");
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor64) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, TENSOR_VERSION)?;
    put_shape(w, t.shape())?;
    put_payload(w, t.data())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor64> {
    check_magic(r, TENSOR_VERSION)?;
    let shape = get_shape(r)?;
    let data = get_payload(r, shape.iter().product())?;
    expect_eof(r)?;
    Ok(Tensor64::new(shape, data)?)
}

pub fn save_tensor(path: &Path, t: &Tensor64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_tensor(&mut w, t)?;
    Ok(w.flush()?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor64> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read_tensor(&mut r).with_context(|| format!("reading {}", path.display()))
}

/// Channels as `[count, K, N_R, N_T, 2]`.
pub fn channels_to_tensor(samples: &[ChannelSample<f64>]) -> Result<Tensor64> {
    let parts: Vec<Tensor64> = samples.iter().map(|s| s.to_tensor()).collect();
    Ok(Tensor64::stack(&parts, 0)?)
}

/// Inverse of [`channels_to_tensor`]; noise power is set per use, so it starts at 1.
pub fn tensor_to_channels(t: &Tensor64, p_t: f64) -> Result<Vec<ChannelSample<f64>>> {
    let s = t.shape();
    ensure!(s.len() == 5 && s[4] == 2, "channel file must be [count, K, N_R, N_T, 2], got {s:?}");
    (0..s[0])
        .map(|i| {
            let one = t.slice_axis(0, i, 1)?.reshape(&s[1..])?;
            Ok(ChannelSample::from_tensor(&one, 1.0, p_t)?)
        })
        .collect()
}

pub fn save_channels(path: &Path, samples: &[ChannelSample<f64>]) -> Result<()> {
    save_tensor(path, &channels_to_tensor(samples)?)
}

pub fn load_channels(path: &Path, p_t: f64) -> Result<Vec<ChannelSample<f64>>> {
    tensor_to_channels(&load_tensor(path)?, p_t)
}

/// Scheduling labels: per sample the selection indicator and the SNR it was generated at.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub eta: Vec<Vec<bool>>,
    pub snr_db: Vec<f64>,
}

impl Labels {
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// `[count, K̃ + 1]`: indicator columns then the SNR in dB.
    pub fn to_tensor(&self) -> Result<Tensor64> {
        ensure!(!self.eta.is_empty() && self.eta.len() == self.snr_db.len(), "label/SNR count mismatch");
        let k = self.eta[0].len();
        let mut data = Vec::with_capacity(self.eta.len() * (k + 1));
        for (row, snr) in self.eta.iter().zip(&self.snr_db) {
            ensure!(row.len() == k, "ragged label rows");
            data.extend(row.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            data.push(*snr);
        }
        Ok(Tensor64::new(vec![self.eta.len(), k + 1], data)?)
    }

    pub fn from_tensor(t: &Tensor64) -> Result<Self> {
        let s = t.shape();
        ensure!(s.len() == 2 && s[1] >= 2, "label file must be [count, K̃ + 1], got {s:?}");
        let mut eta = Vec::with_capacity(s[0]);
        let mut snr_db = Vec::with_capacity(s[0]);
        for row in t.data().chunks(s[1]) {
            let (bits, snr) = row.split_at(s[1] - 1);
            ensure!(bits.iter().all(|&b| b == 0.0 || b == 1.0), "label entries must be 0 or 1");
            eta.push(bits.iter().map(|&b| b == 1.0).collect());
            snr_db.push(snr[0]);
        }
        Ok(Self { eta, snr_db })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensor(path, &self.to_tensor()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor(&load_tensor(path)?)
    }
}

/// Trained parameters with the configuration and optimizer state that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub store: ParamStore64,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        let text = self.config.to_toml();
        put_u64(w, text.len() as u64)?;
        w.write_all(text.as_bytes())?;
        put_u64(w, self.seed)?;
        put_u64(w, self.store.step())?;
        put_u32(w, self.store.len() as u32)?;
        for id in self.store.ids() {
            let name = self.store.name(id);
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            let value = self.store.value(id);
            put_shape(w, value.shape())?;
            put_payload(w, value.data())?;
            let (m, v) = self.store.moments(id);
            put_payload(w, m.data())?;
            put_payload(w, v.data())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        check_magic(r, CHECKPOINT_VERSION)?;
        let len = get_u64(r)? as usize;
        ensure!(len < 1 << 24, "implausible config length {len}");
        let mut text = vec![0; len];
        r.read_exact(&mut text)?;
        let config = RunConfig::from_toml(std::str::from_utf8(&text)?, None, None)?;
        let seed = get_u64(r)?;
        let step = get_u64(r)?;
        let count = get_u32(r)? as usize;
        let mut store = ParamStore64::new();
        for _ in 0..count {
            let n = get_u32(r)? as usize;
            ensure!(n < 1 << 16, "implausible parameter name length {n}");
            let mut name = vec![0; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)?;
            let shape = get_shape(r)?;
            let len: usize = shape.iter().product();
            let value = Tensor64::new(shape.clone(), get_payload(r, len)?)?;
            let m = Tensor64::new(shape.clone(), get_payload(r, len)?)?;
            let v = Tensor64::new(shape, get_payload(r, len)?)?;
            if store.find(&name).is_some() {
                bail!("duplicate parameter {name:?}");
            }
            let id = store.add(name, value);
            store.set_moments(id, m, v)?;
        }
        store.set_step(step);
        expect_eof(r)?;
        Ok(Self { config, seed, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        self.write(&mut w)?;
        Ok(w.flush()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
        Self::read(&mut r).with_context(|| format!("reading checkpoint {}", path.display()))
    }

    /// Copies values and moments into `target` by name; every target parameter must be present.
    pub fn restore_into(&self, target: &mut ParamStore64) -> Result<()> {
        ensure!(
            target.len() == self.store.len(),
            "checkpoint has {} parameters, model expects {}",
            self.store.len(),
            target.len()
        );
        let ids: Vec<_> = target.ids().collect();
        for id in ids {
            let name = target.name(id).to_owned();
            let src = self.store.find(&name).with_context(|| format!("checkpoint lacks parameter {name:?}"))?;
            let value = self.store.value(src);
            ensure!(value.shape() == target.value(id).shape(), "shape mismatch for {name:?}");
            *target.value_mut(id) = value.clone();
            let (m, v) = self.store.moments(src);
            target.set_moments(id, m.clone(), v.clone())?;
        }
        target.set_step(self.store.step());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Scale, Task};
    use tenn_core::mimo::{gen_channels, SystemConfig};

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = Tensor64::from_fn(&[2, 3, 1], |i| (i[0] as f64 - 0.3) / (i[1] as f64 + 7.0));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_tensor(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back, t);
    }

    #[test]
    fn header_layout() {
        let t = Tensor64::zeros(&[3, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TEDS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 28 + 6 * 8);
    }

    #[test]
    fn truncated_and_padded_files_fail() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor64::ones(&[4])).unwrap();
        assert!(read_tensor(&mut &buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
        assert!(read_tensor(&mut &b"XXXX\x01\0\0\0"[..]).is_err());
    }

    #[test]
    fn channels_round_trip() {
        let cfg = SystemConfig::new(3, 2, 4);
        let samples = gen_channels::<f64>(&cfg, 5, 3);
        let t = channels_to_tensor(&samples).unwrap();
        assert_eq!(t.shape(), &[5, 3, 2, 4, 2]);
        let back = tensor_to_channels(&t, 1.0).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.to_tensor(), b.to_tensor());
        }
    }

    #[test]
    fn labels_round_trip() {
        let labels = Labels { eta: vec![vec![true, false, true], vec![false, true, true]], snr_db: vec![0.0, 10.0] };
        assert_eq!(Labels::from_tensor(&labels.to_tensor().unwrap()).unwrap(), labels);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore64::new();
        let id = store.add("a.w", Tensor64::from_fn(&[2, 2], |i| i[0] as f64 + 0.5 * i[1] as f64));
        store.add("b", Tensor64::from_vec(vec![1.0, -2.0]));
        store.set_moments(id, Tensor64::full(&[2, 2], 0.25), Tensor64::full(&[2, 2], 4.0)).unwrap();
        store.set_step(17);
        let ck = Checkpoint { config: RunConfig::preset(Task::Precode, Scale::Desk), seed: 5, store };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back.store.step(), 17);
        assert_eq!(back.config, ck.config);
    }
}
