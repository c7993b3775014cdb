//! Binary checkpoint persistence.
//!
//! Layout (all integers little-endian): 8-byte magic, u32 format version,
//! model shape block, training metadata, then every parameter tensor in the
//! canonical family order as (name, shape, f32 payload, CRC-32), and finally
//! an optional optimizer block (learning rate, step count, first/second
//! moments in the same tensor framing). Serialization is deterministic, so
//! saving a loaded checkpoint reproduces the file byte for byte; every
//! tensor's checksum is verified on load before anything is returned.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nested::{NestedConfig, NestedWeights};
use crate::trainer::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGNTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMeta {
    pub step: u64,
    pub total_steps: u64,
}

/// Optimizer state carried alongside the weights so runs can resume exactly.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub steps: u64,
    pub m: NestedWeights<f32>,
    pub v: NestedWeights<f32>,
}

impl OptimizerState {
    /// Capture an optimizer's full state.
    #[must_use]
    pub fn capture(opt: &Adam<f32>) -> Self {
        let (m, v) = opt.moments();
        OptimizerState {
            learning_rate: opt.learning_rate(),
            steps: opt.steps() as u64,
            m: m.clone(),
            v: v.clone(),
        }
    }

    /// Rebuild the optimizer this state was captured from.
    pub fn into_adam(self) -> Result<Adam<f32>> {
        Adam::restore(self.learning_rate, self.steps as usize, self.m, self.v)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NestedConfig,
    pub weights: NestedWeights<f32>,
    pub meta: TrainMeta,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Reject checkpoints whose model shape differs from `expected`.
    pub fn expect_config(&self, expected: &NestedConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Config(format!(
                "checkpoint was trained with a different model shape \
                 ({} layers, hidden {}, vocab {}) than configured \
                 ({} layers, hidden {}, vocab {})",
                self.config.num_layers,
                self.config.hidden,
                self.config.vocab_size,
                expected.num_layers,
                expected.hidden,
                expected.vocab_size,
            )));
        }
        Ok(())
    }
}

// =============================================================================
// CRC-32 (IEEE reflected polynomial)
// =============================================================================

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    table
}

pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// =============================================================================
// Encoding
// =============================================================================

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensors(&mut self, weights: &NestedWeights<f32>) -> Result<()> {
        let views = weights.param_views();
        self.u32(u32::try_from(views.len()).expect("tensor count fits u32"));
        for view in views {
            let name = view.name.as_bytes();
            self.u16(u16::try_from(name.len()).expect("tensor name fits u16"));
            self.buf.extend_from_slice(name);
            self.u32(u32::try_from(view.shape.len()).expect("rank fits u32"));
            for &d in &view.shape {
                self.u64(d as u64);
            }
            let mut payload = Vec::with_capacity(view.data.len() * 4);
            for &x in view.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            let crc = crc32(&payload);
            self.buf.extend_from_slice(&payload);
            self.u32(crc);
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.config.validate()?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for v in [
        ckpt.config.num_layers,
        ckpt.config.hidden,
        ckpt.config.mlp_dim,
        ckpt.config.num_heads,
        ckpt.config.head_dim,
        ckpt.config.vocab_size,
        ckpt.config.num_classes,
        ckpt.config.max_positions,
    ] {
        w.u32(u32::try_from(v).expect("model dimension fits u32"));
    }
    w.u32(u32::try_from(ckpt.config.factors.len()).expect("factor count fits u32"));
    for &f in &ckpt.config.factors {
        w.u32(u32::try_from(f).expect("factor fits u32"));
    }
    w.u64(ckpt.meta.step);
    w.u64(ckpt.meta.total_steps);
    w.tensors(&ckpt.weights)?;
    match &ckpt.optimizer {
        None => w.buf.push(0),
        Some(state) => {
            w.buf.push(1);
            w.f64(state.learning_rate);
            w.u64(state.steps);
            w.tensors(&state.m)?;
            w.tensors(&state.v)?;
        }
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

// =============================================================================
// Decoding
// =============================================================================

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}, file holds {}",
                self.off,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Read one tensor block into `target`, enforcing the canonical tensor
    /// names, shapes, and per-tensor checksums.
    fn tensors(&mut self, target: &mut NestedWeights<f32>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = target
            .param_views()
            .iter()
            .map(|v| (v.name.clone(), v.shape.clone()))
            .collect();
        let count = self.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, this model shape needs {}",
                expected.len()
            )));
        }
        for (ti, (want_name, want_shape)) in expected.iter().enumerate() {
            let name_len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| Error::Checkpoint(format!("tensor {ti}: name is not UTF-8")))?;
            if name != want_name {
                return Err(Error::Checkpoint(format!(
                    "tensor {ti} is named {name:?}, expected {want_name:?}"
                )));
            }
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            if &shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?} does not match expected {want_shape:?}"
                )));
            }
            let len: usize = shape.iter().product();
            let payload = self.take(len * 4)?;
            let stored = self.u32()?;
            let computed = crc32(payload);
            if stored != computed {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})"
                )));
            }
            let dst = &mut target.param_views_mut()[ti];
            for (i, x) in dst.data.iter_mut().enumerate() {
                *x = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
            }
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, off: 0 };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint file (magic {magic:02x?})"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let dims: Vec<usize> = (0..8).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let factor_count = r.u32()? as usize;
    let mut factors = Vec::with_capacity(factor_count);
    for _ in 0..factor_count {
        factors.push(r.u32()? as usize);
    }
    let config = NestedConfig::new(
        dims[0], dims[1], dims[2], dims[3], dims[4], dims[5], dims[6], dims[7], factors,
    )?;
    let meta = TrainMeta { step: r.u64()?, total_steps: r.u64()? };
    let mut weights = NestedWeights::<f32>::zeros(&config);
    r.tensors(&mut weights)?;
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let learning_rate = r.f64()?;
            let steps = r.u64()?;
            let mut m = NestedWeights::<f32>::zeros(&config);
            r.tensors(&mut m)?;
            let mut v = NestedWeights::<f32>::zeros(&config);
            r.tensors(&mut v)?;
            Some(OptimizerState { learning_rate, steps, m, v })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "optimizer flag must be 0 or 1, found {other}"
            )))
        }
    };
    if r.off != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            buf.len() - r.off
        )));
    }
    Ok(Checkpoint { config, weights, meta, optimizer })
}

// =============================================================================
// Tests
// =============================================================================
