//! Binary checkpoint encoding of a network plus training metadata.

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::Cursor;
use crate::error::{Error, Result};
use crate::nn::layer::{Activation, LayerSpec};
use crate::nn::network::{Loss, Network};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSNN";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";
const MAX_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TrainMeta {
    pub epochs: u32,
    pub best_valid: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub meta: TrainMeta,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(network: Network<T>, meta: TrainMeta) -> Self {
        Self { network, meta }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        let tag = net.tag().as_bytes();
        put_u32(&mut b, tag.len() as u32);
        b.extend_from_slice(tag);
        put_u32(&mut b, net.input_shape().len() as u32);
        for &d in net.input_shape() {
            put_u32(&mut b, d as u32);
        }
        match net.loss_kind() {
            Loss::Nll => {
                b.push(0);
                put_u32(&mut b, 1);
            }
            Loss::Mse => {
                b.push(1);
                put_u32(&mut b, 0);
            }
            Loss::SummedNll(n) => {
                b.push(2);
                put_u32(&mut b, n as u32);
            }
        }
        put_specs(&mut b, &net.layer_specs());
        let params = net.params();
        put_u32(&mut b, params.len() as u32);
        for p in params {
            b.extend_from_slice(&(p.len() as u64).to_le_bytes());
            for v in p {
                b.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        put_u32(&mut b, self.meta.epochs);
        b.extend_from_slice(&self.meta.best_valid.to_le_bytes());
        b.extend_from_slice(&self.meta.seed.to_le_bytes());
        b
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(data, WHAT);
        cur.expect_magic(CHECKPOINT_MAGIC)?;
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::corrupt(WHAT, format!("unsupported version {version}")));
        }
        let tag_len = cur.u32()? as usize;
        let tag = std::str::from_utf8(cur.take(tag_len)?)
            .map_err(|_| Error::corrupt(WHAT, "architecture tag is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::corrupt(WHAT, format!("input rank {rank}")));
        }
        let mut input_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input_shape.push(cur.u32()? as usize);
        }
        let loss_code = cur.u8()?;
        let heads = cur.u32()? as usize;
        let loss = match loss_code {
            0 => Loss::Nll,
            1 => Loss::Mse,
            2 => Loss::SummedNll(heads),
            c => return Err(Error::corrupt(WHAT, format!("unknown loss code {c}"))),
        };
        let specs = get_specs(&mut cur, 0)?;
        let mut net = Network::<T>::zeroed(tag, &input_shape, &specs, loss)
            .map_err(|e| Error::corrupt(WHAT, format!("architecture does not build: {e}")))?;
        let count = cur.u32()? as usize;
        let expected: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        if count != expected.len() {
            return Err(Error::corrupt(
                WHAT,
                format!("{count} parameter arrays, architecture has {}", expected.len()),
            ));
        }
        let mut values = Vec::with_capacity(count);
        for &want in &expected {
            let len = cur.u64()? as usize;
            if len != want {
                return Err(Error::corrupt(
                    WHAT,
                    format!("parameter array of {len} values, expected {want}"),
                ));
            }
            let raw = cur.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::corrupt(WHAT, "array length overflow"))?,
            )?;
            values.push(
                raw.chunks_exact(8)
                    .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect::<Vec<T>>(),
            );
        }
        net.set_params(&values)?;
        let meta = TrainMeta {
            epochs: cur.u32()?,
            best_valid: cur.f64()?,
            seed: cur.u64()?,
        };
        cur.finish()?;
        Ok(Self { network: net, meta })
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_specs(b: &mut Vec<u8>, specs: &[LayerSpec]) {
    put_u32(b, specs.len() as u32);
    for s in specs {
        match s {
            LayerSpec::Conv2dValid { kernels, kh, kw } => {
                b.push(1);
                put_u32(b, *kernels as u32);
                put_u32(b, *kh as u32);
                put_u32(b, *kw as u32);
            }
            LayerSpec::MaxPool2x2 => b.push(2),
            LayerSpec::Dense { units } => {
                b.push(3);
                put_u32(b, *units as u32);
            }
            LayerSpec::Activation(a) => {
                b.push(4);
                b.push(a.code());
            }
            LayerSpec::Softmax { groups } => {
                b.push(5);
                put_u32(b, *groups as u32);
            }
            LayerSpec::Flatten => b.push(6),
            LayerSpec::ConcatTowers(towers) => {
                b.push(7);
                put_u32(b, towers.len() as u32);
                for t in towers {
                    put_specs(b, t);
                }
            }
        }
    }
}

fn get_specs(cur: &mut Cursor<'_>, depth: usize) -> Result<Vec<LayerSpec>> {
    if depth > MAX_DEPTH {
        return Err(Error::corrupt(WHAT, "layer nesting too deep"));
    }
    let n = cur.u32()? as usize;
    let mut specs = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let spec = match cur.u8()? {
            1 => LayerSpec::Conv2dValid {
                kernels: cur.u32()? as usize,
                kh: cur.u32()? as usize,
                kw: cur.u32()? as usize,
            },
            2 => LayerSpec::MaxPool2x2,
            3 => LayerSpec::Dense {
                units: cur.u32()? as usize,
            },
            4 => {
                let code = cur.u8()?;
                LayerSpec::Activation(
                    Activation::from_code(code).ok_or_else(|| Error::corrupt(WHAT, format!("unknown activation {code}")))?,
                )
            }
            5 => LayerSpec::Softmax {
                groups: cur.u32()? as usize,
            },
            6 => LayerSpec::Flatten,
            7 => {
                let towers = cur.u32()? as usize;
                let mut ts = Vec::with_capacity(towers.min(16));
                for _ in 0..towers {
                    ts.push(get_specs(cur, depth + 1)?);
                }
                LayerSpec::ConcatTowers(ts)
            }
            k => return Err(Error::corrupt(WHAT, format!("unknown layer kind {k}"))),
        };
        specs.push(spec);
    }
    Ok(specs)
}
