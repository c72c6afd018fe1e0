//! Binary checkpoint: `"CNET"`, version `u32`, payload, CRC32 of payload.
//!
//! Payload (little-endian): input shape `3 x u32`, rng seed `u64`, layer count `u32`,
//! then one spec record per layer (`kind u8`, `5 x u32`, `keep_prob f64`), then per
//! layer the weight count `u32`, bias count `u32` and the `f32` values.

use std::fs;
use std::path::Path;

use super::{cast, ConvNetModel, LayerParams, LayerSpec, NetError, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNET";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_spec(out: &mut Vec<u8>, l: &LayerSpec) {
    let (kind, p, keep): (u8, [usize; 5], f64) = match *l {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        } => (
            0,
            [in_channels, out_channels, kernel_size, stride, padding],
            0.0,
        ),
        LayerSpec::MaxPool { window, stride } => (1, [window, stride, 0, 0, 0], 0.0),
        LayerSpec::FullyConnected { in_dim, out_dim } => (2, [in_dim, out_dim, 0, 0, 0], 0.0),
        LayerSpec::ReLU => (3, [0; 5], 0.0),
        LayerSpec::Dropout { keep_prob } => (4, [0; 5], keep_prob),
        LayerSpec::Softmax => (5, [0; 5], 0.0),
    };
    out.push(kind);
    for v in p {
        put_u32(out, v as u32);
    }
    out.extend_from_slice(&keep.to_le_bytes());
}

/// Serialize to bytes; parameters are stored as `f32`.
pub fn write_model<T: Real>(model: &ConvNetModel<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    for d in model.input_shape {
        put_u32(&mut payload, d as u32);
    }
    payload.extend_from_slice(&model.rng_seed.to_le_bytes());
    put_u32(&mut payload, model.layers.len() as u32);
    for l in &model.layers {
        encode_spec(&mut payload, l);
    }
    for p in &model.params {
        put_u32(&mut payload, p.weights.len() as u32);
        put_u32(&mut payload, p.bias.len() as u32);
        for v in p.weights.iter().chain(&p.bias) {
            let f = v.to_f32().expect("finite parameter");
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::Malformed("unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, NetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ConvNetModel<f32>, NetError> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NetError::VersionMismatch("not a CNET checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NetError::VersionMismatch(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if bytes.len() < 12 {
        return Err(NetError::ChecksumMismatch);
    }
    let (payload, crc) = bytes[8..].split_at(bytes.len() - 12);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(NetError::ChecksumMismatch);
    }

    let mut c = Cursor { buf: payload, pos: 0 };
    let input_shape = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let rng_seed = c.u64()?;
    let n_layers = c.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = c.u8()?;
        let mut p = [0usize; 5];
        for v in &mut p {
            *v = c.u32()? as usize;
        }
        let keep_prob = c.f64()?;
        layers.push(match kind {
            0 => LayerSpec::Conv {
                in_channels: p[0],
                out_channels: p[1],
                kernel_size: p[2],
                stride: p[3],
                padding: p[4],
            },
            1 => LayerSpec::MaxPool {
                window: p[0],
                stride: p[1],
            },
            2 => LayerSpec::FullyConnected {
                in_dim: p[0],
                out_dim: p[1],
            },
            3 => LayerSpec::ReLU,
            4 => LayerSpec::Dropout { keep_prob },
            5 => LayerSpec::Softmax,
            k => return Err(NetError::Malformed(format!("unknown layer kind {k}"))),
        });
    }
    let mut params = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let nw = c.u32()? as usize;
        let nb = c.u32()? as usize;
        let weights = (0..nw).map(|_| c.f32()).collect::<Result<Vec<_>, _>>()?;
        let bias = (0..nb).map(|_| c.f32()).collect::<Result<Vec<_>, _>>()?;
        params.push(LayerParams { weights, bias });
    }
    if c.pos != payload.len() {
        return Err(NetError::Malformed("trailing bytes".into()));
    }
    ConvNetModel::from_parts(layers, input_shape, params, rng_seed)
}

pub fn save_model<T: Real>(model: &ConvNetModel<T>, path: &Path) -> Result<(), NetError> {
    fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ConvNetModel<f32>, NetError> {
    read_model(&fs::read(path)?)
}

impl ConvNetModel<f32> {
    /// Reload in another precision (the stored values are `f32`).
    pub fn to_precision<U: Real>(&self) -> ConvNetModel<U> {
        let conv = |v: &Vec<f32>| v.iter().map(|&x| cast::<U>(x as f64)).collect();
        let params = self
            .params
            .iter()
            .map(|p| LayerParams {
                weights: conv(&p.weights),
                bias: conv(&p.bias),
            })
            .collect();
        ConvNetModel::from_parts(self.layers.clone(), self.input_shape, params, self.rng_seed)
            .expect("same architecture")
    }
}
