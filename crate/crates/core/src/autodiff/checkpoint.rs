//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TTSCKPT\0"
//! version  u32      1
//! count    u32      number of records
//! record*  name_len u32, name utf-8, dtype u8, kind u8, rank u32, dims u64×rank, payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u64, 3 = raw bytes. Parameters, Adam
//! moments and EMA shadows are stored under the prefixes `param/`, `adam.m/`,
//! `adam.v/` and `ema/`; scalars live under `meta/`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::optim::{AdamConfig, AdamState, EmaState};
use crate::autodiff::params::{ParamKind, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"TTSCKPT\0";
pub const VERSION: u32 = 1;

const DT_U64: u8 = 2;
const DT_BYTES: u8 = 3;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    /// Serialized configuration the model was built from.
    pub config: String,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
    pub ema: Option<EmaState<T>>,
}

enum Payload {
    Floats(DType, Vec<f64>, Vec<u8>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

struct Record {
    name: String,
    kind: u8,
    dims: Vec<usize>,
    payload: Payload,
}

fn kind_from_code(code: u8) -> Result<ParamKind> {
    Ok(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::Norm,
        3 => ParamKind::Embedding,
        4 => ParamKind::Buffer,
        _ => return Err(Error::Format(format!("unknown parameter kind {code}"))),
    })
}

fn put_header(out: &mut Vec<u8>, name: &str, dtype: u8, kind: u8, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(kind);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, kind: ParamKind, t: &Tensor<T>) {
    put_header(out, name, T::DTYPE.code(), kind.code(), t.shape());
    for &x in t.data() {
        x.write_le(out);
    }
}

fn put_u64s(out: &mut Vec<u8>, name: &str, vals: &[u64]) {
    put_header(out, name, DT_U64, 0, &[vals.len()]);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_f64s(out: &mut Vec<u8>, name: &str, vals: &[f64]) {
    put_header(out, name, DType::F64.code(), 0, &[vals.len()]);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut count = 0u32;

        put_u64s(&mut body, "meta/step", &[self.step]);
        count += 1;
        put_header(&mut body, "meta/config", DT_BYTES, 0, &[self.config.len()]);
        body.extend_from_slice(self.config.as_bytes());
        count += 1;
        for (_, p) in self.params.iter() {
            put_tensor(&mut body, &format!("param/{}", p.name), p.kind, &p.value);
            count += 1;
        }
        if let Some(adam) = &self.adam {
            let c = adam.config;
            put_f64s(
                &mut body,
                "meta/adam_config",
                &[c.beta1, c.beta2, c.eps, c.l2_weight],
            );
            put_u64s(&mut body, "meta/adam_step", &[adam.step]);
            count += 2;
            for ((_, p), (m, v)) in self.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                put_tensor(&mut body, &format!("adam.m/{}", p.name), p.kind, m);
                put_tensor(&mut body, &format!("adam.v/{}", p.name), p.kind, v);
                count += 2;
            }
        }
        if let Some(ema) = &self.ema {
            put_f64s(&mut body, "meta/ema_decay", &[ema.decay]);
            count += 1;
            for (_, p) in ema.shadow.iter() {
                put_tensor(&mut body, &format!("ema/{}", p.name), p.kind, &p.value);
                count += 1;
            }
        }

        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(cur.record()?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Self::assemble(records)
    }

    fn assemble(records: Vec<Record>) -> Result<Self> {
        let mut step = None;
        let mut config = String::new();
        let mut params = ParamStore::new();
        let mut adam_cfg = None;
        let mut adam_step = 0;
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut ema_decay = None;
        let mut shadow = ParamStore::new();

        for r in records {
            let Record {
                name,
                kind,
                dims,
                payload,
            } = r;
            match (name.as_str(), payload) {
                ("meta/step", Payload::U64(x)) if x.len() == 1 => step = Some(x[0]),
                ("meta/adam_step", Payload::U64(x)) if x.len() == 1 => adam_step = x[0],
                ("meta/config", Payload::Bytes(b)) => {
                    config = String::from_utf8(b)
                        .map_err(|_| Error::Format("config is not utf-8".into()))?
                }
                ("meta/adam_config", Payload::Floats(_, x, _)) if x.len() == 4 => {
                    adam_cfg = Some(AdamConfig {
                        beta1: x[0],
                        beta2: x[1],
                        eps: x[2],
                        l2_weight: x[3],
                    })
                }
                ("meta/ema_decay", Payload::Floats(_, x, _)) if x.len() == 1 => {
                    ema_decay = Some(x[0])
                }
                (n, Payload::Floats(dt, x, raw)) => {
                    let t = to_tensor::<T>(dt, dims, x, &raw)?;
                    let kind = kind_from_code(kind)?;
                    if let Some(p) = n.strip_prefix("param/") {
                        params.add(p, kind, t);
                    } else if n.starts_with("adam.m/") {
                        m.push(t);
                    } else if n.starts_with("adam.v/") {
                        v.push(t);
                    } else if let Some(p) = n.strip_prefix("ema/") {
                        shadow.add(p, kind, t);
                    } else {
                        return Err(Error::Format(format!("unexpected record `{n}`")));
                    }
                }
                (n, _) => return Err(Error::Format(format!("malformed record `{n}`"))),
            }
        }
        let step = step.ok_or_else(|| Error::Format("missing meta/step".into()))?;
        let adam = match adam_cfg {
            Some(config) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Format("adam moments do not match parameters".into()));
                }
                Some(AdamState {
                    config,
                    m,
                    v,
                    step: adam_step,
                })
            }
            None => None,
        };
        let ema = match ema_decay {
            Some(decay) => {
                shadow.check_layout(&params)?;
                Some(EmaState { decay, shadow })
            }
            None => None,
        };
        Ok(Self {
            step,
            config,
            params,
            adam,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn to_tensor<T: Scalar>(
    dt: DType,
    dims: Vec<usize>,
    vals: Vec<f64>,
    raw: &[u8],
) -> Result<Tensor<T>> {
    if dt == T::DTYPE {
        let data = raw.chunks_exact(dt.size()).map(T::read_le).collect();
        Tensor::new(dims, data)
    } else {
        Tensor::new(dims, vals.into_iter().map(T::lit).collect())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn record(&mut self) -> Result<Record> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("record name is not utf-8".into()))?
            .to_string();
        let dtype = self.take(1)?[0];
        let kind = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = match dtype {
            DT_U64 => Payload::U64((0..n).map(|_| self.u64()).collect::<Result<_>>()?),
            DT_BYTES => Payload::Bytes(self.take(n)?.to_vec()),
            code => {
                let dt = DType::from_code(code)
                    .ok_or_else(|| Error::Format(format!("unknown dtype {code}")))?;
                let raw = self.take(
                    n.checked_mul(dt.size())
                        .ok_or_else(|| Error::Format("size overflow".into()))?,
                )?;
                let vals = match dt {
                    DType::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::read_le(c) as f64)
                        .collect(),
                    DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
                };
                Payload::Floats(dt, vals, raw.to_vec())
            }
        };
        Ok(Record {
            name,
            kind,
            dims,
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        params.add(
            "a.weight",
            ParamKind::Weight,
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.25),
        );
        params.add(
            "a.bias",
            ParamKind::Bias,
            Tensor::from_fn(&[3], |i| f32::from_bits(0x3f80_0001 + i as u32)),
        );
        params.add("bn.running_var", ParamKind::Buffer, Tensor::full(&[3], 1.0));
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.m[0].data_mut()[1] = 0.5;
        adam.step = 7;
        let ema = EmaState::new(&params, 0.9999);
        Checkpoint {
            step: 42,
            config: "[dsp]\nsample_rate_hz = 24000\n".into(),
            params,
            adam: Some(adam),
            ema: Some(ema),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn loads_across_precisions() {
        let ck = sample();
        let wide = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        let id = crate::autodiff::params::ParamId(0);
        assert_eq!(
            wide.params.value(id).data()[1],
            ck.params.value(id).data()[1] as f64
        );
    }
}
