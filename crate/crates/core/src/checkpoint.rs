//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, a little-endian `u32` header length, a JSON header,
//! the parameter and optimizer arrays in a fixed order, and a trailing
//! SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SliceGen};
use crate::nn::{AdamW, Net};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SLGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    fingerprint: String,
    config: ModelConfig,
    step: u64,
    /// Parameter counts of encoder1, encoder2, decoder, discriminator.
    counts: [usize; 4],
    /// Adam step counters in the same order.
    optimizer_steps: [u64; 4],
}

fn nets<T>(m: &SliceGen<T>) -> [(&Net<T>, &AdamW<T>); 4] {
    [
        (&m.encoder1, &m.optimizers.encoder1),
        (&m.encoder2, &m.optimizers.encoder2),
        (&m.decoder, &m.optimizers.decoder),
        (&m.discriminator, &m.optimizers.discriminator),
    ]
}

pub fn to_bytes<T: Scalar>(model: &SliceGen<T>) -> Result<Vec<u8>> {
    let parts = nets(model);
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        fingerprint: model.fingerprint(),
        config: model.config.clone(),
        step: model.step,
        counts: parts.map(|(n, _)| n.param_count()),
        optimizer_steps: parts.map(|(_, o)| o.step),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 3 * model.param_count() * T::BYTES + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (net, opt) in parts {
        for v in net.flat_params().into_iter().chain(opt.m.iter().copied()).chain(opt.v.iter().copied()) {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Decode a checkpoint; `expected` pins the architecture when given.
pub fn from_bytes<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>, origin: &str) -> Result<SliceGen<T>> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let json = body.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    if header.dtype != T::DTYPE {
        return Err(bad(&format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
    }
    if header.config.fingerprint() != header.fingerprint {
        return Err(bad("header fingerprint does not match its config"));
    }
    if let Some(cfg) = expected {
        if cfg.fingerprint() != header.fingerprint {
            return Err(Error::Fingerprint {
                expected: cfg.fingerprint(),
                found: header.fingerprint,
            });
        }
    }
    let mut model = SliceGen::<T>::new(header.config.clone(), 0)?;
    if nets(&model).map(|(n, _)| n.param_count()) != header.counts {
        return Err(bad("parameter counts do not match the config"));
    }
    let mut data = &body[12 + hlen..];
    let mut take = |n: usize| -> Result<Vec<T>> {
        let len = n * T::BYTES;
        if data.len() < len {
            return Err(bad("truncated payload"));
        }
        let (head, rest) = data.split_at(len);
        data = rest;
        Ok(head.chunks(T::BYTES).map(T::read_le).collect())
    };
    let slots = [
        (&mut model.encoder1, &mut model.optimizers.encoder1),
        (&mut model.encoder2, &mut model.optimizers.encoder2),
        (&mut model.decoder, &mut model.optimizers.decoder),
        (&mut model.discriminator, &mut model.optimizers.discriminator),
    ];
    for (i, (net, opt)) in slots.into_iter().enumerate() {
        let n = header.counts[i];
        net.set_flat_params(&take(n)?)?;
        opt.m = take(n)?;
        opt.v = take(n)?;
        opt.step = header.optimizer_steps[i];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    model.step = header.step;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &SliceGen<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<SliceGen<T>> {
    from_bytes(&fs::read(path)?, expected, &path.display().to_string())
}
