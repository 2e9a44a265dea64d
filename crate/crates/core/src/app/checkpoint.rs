//! Binary checkpoints.
//!
//! Layout: `CCBM`, u32 version, u32-length-prefixed UTF-8 header text
//! (model configuration plus training state as `key = value` lines), a u32
//! record count, then per tensor: u32 name length, name bytes, u8 dtype, u8
//! rank, rank × u64 dims and little-endian values. All integers are
//! little-endian. Parameters, Adam moments and batch-norm running statistics
//! are stored; gradients are not.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ctensor::BnRunning;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::{DType, Real, Shape, Tensor};

use super::config::parse_kv;

pub const MAGIC: &[u8; 4] = b"CCBM";
pub const VERSION: u32 = 1;

/// Optimiser-loop state stored next to the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub epoch: u64,
    pub lr: f64,
    pub best_valid: f64,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            epoch: 0,
            lr: 1e-3,
            best_valid: f64::INFINITY,
        }
    }
}

/// Header fields of a checkpoint, readable without knowing its precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub config: ModelConfig,
    pub precision: DType,
    pub step: u64,
    pub state: TrainState,
}

fn plane_suffixes(n: usize) -> &'static [&'static str] {
    if n == 2 {
        &[".re", ".im"]
    } else {
        &[""]
    }
}

fn running_fields<T>(r: &BnRunning<T>) -> [(&'static str, &Vec<T>); 5] {
    [
        ("mean_r", &r.mean_r),
        ("mean_i", &r.mean_i),
        ("v_rr", &r.v_rr),
        ("v_ii", &r.v_ii),
        ("v_ri", &r.v_ri),
    ]
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, shape: Shape, data: &[T]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(4);
    for d in shape.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

/// Serialises a model and its training state.
pub fn encode<T: Real>(model: &Model<T>, state: TrainState) -> Vec<u8> {
    let mut header = model.config.to_text();
    let _ = writeln!(header, "precision = {}", T::DTYPE.name());
    let _ = writeln!(header, "step = {}", model.params.step);
    let _ = writeln!(header, "epoch = {}", state.epoch);
    let _ = writeln!(header, "lr = {:?}", state.lr);
    let _ = writeln!(header, "best_valid = {:?}", state.best_valid);

    let mut body = Vec::new();
    let mut count = 0u32;
    for (name, p) in model.params.iter() {
        let sfx = plane_suffixes(p.planes.len());
        for (plane, s) in p.planes.iter().zip(sfx) {
            put_record(&mut body, &format!("{name}{s}"), plane.value.shape(), plane.value.data());
        }
        for (plane, s) in p.planes.iter().zip(sfx) {
            put_record(&mut body, &format!("{name}.adam_m{s}"), plane.m.shape(), plane.m.data());
            put_record(&mut body, &format!("{name}.adam_v{s}"), plane.v.shape(), plane.v.data());
        }
        count += 3 * p.planes.len() as u32;
    }
    for (bn, r) in model.bn_names().iter().zip(&model.running) {
        for (field, v) in running_fields(r) {
            put_record(&mut body, &format!("{bn}.running.{field}"), Shape::new(1, v.len(), 1, 1), v);
            count += 1;
        }
    }

    let mut out = Vec::with_capacity(body.len() + header.len() + 16);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, count);
    out.extend(body);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_header(text: &str) -> Result<Header> {
    let mut config = ModelConfig::unet_toy();
    let mut precision = None;
    let (mut step, mut state) = (0u64, TrainState::default());
    let bad = |k: &str, v: &str| Error::Checkpoint(format!("bad header value {k} = {v:?}"));
    for (k, v) in parse_kv(text)? {
        match k.as_str() {
            "precision" => {
                precision = Some(match v.as_str() {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(bad(&k, &v)),
                })
            }
            "step" => step = v.parse().map_err(|_| bad(&k, &v))?,
            "epoch" => state.epoch = v.parse().map_err(|_| bad(&k, &v))?,
            "lr" => state.lr = v.parse().map_err(|_| bad(&k, &v))?,
            "best_valid" => state.best_valid = v.parse().map_err(|_| bad(&k, &v))?,
            _ => {
                if !config.set(&k, &v)? {
                    return Err(Error::Checkpoint(format!("unknown header key {k:?}")));
                }
            }
        }
    }
    config.validate()?;
    let precision = precision.ok_or_else(|| Error::Checkpoint("header lacks precision".into()))?;
    Ok(Header {
        config,
        precision,
        step,
        state,
    })
}

fn read_header<'a>(bytes: &'a [u8]) -> Result<(Header, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    Ok((parse_header(text)?, r))
}

/// Reads only the header.
pub fn peek(bytes: &[u8]) -> Result<Header> {
    Ok(read_header(bytes)?.0)
}

fn read_record<T: Real>(r: &mut Reader) -> Result<(String, Tensor<T>)> {
    let n = r.u32()? as usize;
    let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
    let tag = r.take(1)?[0];
    let dtype = DType::from_u8(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {tag}")))?;
    let rank = r.take(1)?[0];
    if rank != 4 {
        return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let shape = Shape(dims);
    let data: Vec<T> = match dtype {
        DType::F32 => r.take(4 * shape.numel())?.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => r.take(8 * shape.numel())?.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    Ok((name, Tensor::from_vec(shape, data)?))
}

/// Rebuilds a model from bytes; values of another precision are converted.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Model<T>, TrainState)> {
    let (header, mut r) = read_header(bytes)?;
    let mut model = Model::<T>::build(header.config, 0)?;
    model.params.step = header.step;
    let count = r.u32()? as usize;
    let mut records = indexmap::IndexMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_record::<T>(&mut r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut take = |name: String, shape: Shape| -> Result<Tensor<T>> {
        let t = records
            .swap_remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {}, expected {shape}", t.shape())));
        }
        Ok(t)
    };
    for (name, p) in model.params.iter_mut() {
        let sfx = plane_suffixes(p.planes.len());
        for (plane, s) in p.planes.iter_mut().zip(sfx) {
            let shape = plane.value.shape();
            plane.value = take(format!("{name}{s}"), shape)?;
            plane.m = take(format!("{name}.adam_m{s}"), shape)?;
            plane.v = take(format!("{name}.adam_v{s}"), shape)?;
        }
    }
    let names = model.bn_names().to_vec();
    for (bn, run) in names.iter().zip(model.running.iter_mut()) {
        let shape = Shape::new(1, run.channels(), 1, 1);
        for (field, slot) in [
            ("mean_r", &mut run.mean_r),
            ("mean_i", &mut run.mean_i),
            ("v_rr", &mut run.v_rr),
            ("v_ii", &mut run.v_ii),
            ("v_ri", &mut run.v_ri),
        ] {
            *slot = take(format!("{bn}.running.{field}"), shape)?.into_vec();
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    Ok((model, header.state))
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, state: TrainState) -> Result<()> {
    fs::write(path, encode(model, state))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, TrainState)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AttentionSites;

    fn trained_like<T: Real>(seed: u64) -> Model<T> {
        let mut cfg = ModelConfig::crn_toy();
        cfg.attention = AttentionSites::SkipAndDecoder;
        let mut m = Model::<T>::build(cfg, seed).unwrap();
        m.params.step = 17;
        for (_, p) in m.params.iter_mut() {
            for pl in &mut p.planes {
                pl.m = pl.value.scale(T::lit(0.5));
                pl.v = pl.value.map(|x| x * x);
            }
        }
        m.running[0].mean_r[0] = T::lit(0.25);
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = trained_like::<f32>(5);
        let st = TrainState {
            epoch: 3,
            lr: 5e-4,
            best_valid: -1.2345678901234567,
        };
        let a = encode(&m, st);
        let (m2, st2) = decode::<f32>(&a).unwrap();
        assert_eq!(st2, st);
        assert_eq!(m2.params, m.params);
        assert_eq!(m2.running, m.running);
        assert_eq!(encode(&m2, st2), a);
        let h = peek(&a).unwrap();
        assert_eq!(h.precision, DType::F32);
        assert_eq!(h.step, 17);
    }

    #[test]
    fn infinite_best_and_precision_conversion() {
        let m = trained_like::<f64>(1);
        let a = encode(&m, TrainState::default());
        let (m32, st) = decode::<f32>(&a).unwrap();
        assert!(st.best_valid.is_infinite());
        let (_, p64) = m.params.iter().next().unwrap();
        let (_, p32) = m32.params.iter().next().unwrap();
        assert_eq!(p32.planes[0].value.data()[0], p64.planes[0].value.data()[0] as f32);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let a = encode(&trained_like::<f32>(2), TrainState::default());
        assert!(decode::<f32>(&a[..a.len() - 1]).is_err());
        let mut b = a.clone();
        b[0] = b'X';
        assert!(decode::<f32>(&b).is_err());
        let mut c = a.clone();
        c.push(0);
        assert!(decode::<f32>(&c).is_err());
    }
}
