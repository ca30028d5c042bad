//! Checkpoint container for a [`SegNet`]: shared weights, the BN bank and
//! the provenance of adapted domains.
//!
//! Layout (little-endian): magic `LLBNCKPT`, u32 version, u64 header length,
//! JSON header, u32 header checksum, then one block per tensor. A block is a
//! u64 element count, the raw values and a u32 checksum over both.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{BnLayer, BnParams, BnState, DomainBnBank, DomainId};
use crate::scalar::Scalar;
use crate::segnet::{SegNet, SegNetConfig, SharedParam};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LLBNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upsampling convention recorded alongside the weights.
pub const UPSAMPLE_CONVENTION: &str = "bilinear-x2-half-pixel";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: SegNetConfig,
    seed: u64,
    upsample: String,
    shared: Vec<SharedEntry>,
    domains: Vec<DomainEntry>,
    provenance: BTreeMap<DomainId, DomainId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SharedEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DomainEntry {
    id: DomainId,
    eps: Vec<f64>,
    momentum: Vec<f64>,
    batches_seen: Vec<u64>,
    trainable: Vec<bool>,
}

/// Parameter counts and byte sizes of the two halves of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub shared_values: usize,
    pub shared_bytes: usize,
    pub bn_values_per_domain: usize,
    pub bn_bytes_per_domain: usize,
    pub domains: usize,
}

impl Footprint {
    pub fn of<T: Scalar>(net: &SegNet<T>) -> Self {
        let shared_values = net.shared_value_count();
        let bn_values_per_domain = net.bank.values_per_domain();
        Self {
            shared_values,
            shared_bytes: shared_values * T::BYTES,
            bn_values_per_domain,
            bn_bytes_per_domain: bn_values_per_domain * T::BYTES,
            domains: net.domains().len(),
        }
    }

    /// One domain's BN payload relative to the shared weights.
    pub fn bn_fraction(&self) -> f64 {
        self.bn_bytes_per_domain as f64 / self.shared_bytes as f64
    }
}

fn push_block<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    let start = out.len();
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        v.write_le(out);
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn encode_checkpoint<T: Scalar>(net: &SegNet<T>, seed: u64) -> Result<Vec<u8>> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: net.config.clone(),
        seed,
        upsample: UPSAMPLE_CONVENTION.to_string(),
        shared: net.shared.iter().map(|p| SharedEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
        domains: net
            .domains()
            .into_iter()
            .map(|d| {
                let set = net.bank.get(d).expect("listed domain");
                DomainEntry {
                    id: d,
                    eps: set.iter().map(|l| l.params.eps.as_f64()).collect(),
                    momentum: set.iter().map(|l| l.state.momentum.as_f64()).collect(),
                    batches_seen: set.iter().map(|l| l.state.batches_seen).collect(),
                    trainable: set.iter().map(|l| l.params.trainable).collect(),
                }
            })
            .collect(),
        provenance: net.provenance.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    for p in &net.shared {
        push_block(&mut out, p.value.data());
    }
    for d in net.domains() {
        for layer in net.bank.get(d)? {
            push_block(&mut out, &layer.params.gamma);
            push_block(&mut out, &layer.params.beta);
            push_block(&mut out, &layer.state.running_mean);
            push_block(&mut out, &layer.state.running_var);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.pos, context: context.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn block<T: Scalar>(&mut self, expected: usize, context: &str) -> Result<Vec<T>> {
        let start = self.pos;
        let count = self.u64(context)? as usize;
        if count != expected {
            return Err(Error::Validation(format!("{context} holds {count} values, expected {expected}")));
        }
        let raw = self.take(count * T::BYTES, context)?;
        let crc = crc32fast::hash(&self.buf[start..self.pos]);
        if self.u32(context)? != crc {
            return Err(Error::Checksum { section: context.to_string() });
        }
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

/// Returns the network and the seed stored with it.
pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<(SegNet<T>, u64)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    let len = r.u64("header length")? as usize;
    if len > buf.len() {
        return Err(Error::Truncated { offset: r.pos, context: format!("header of {len} bytes") });
    }
    let json = r.take(len, "header")?;
    if r.u32("header checksum")? != crc32fast::hash(json) {
        return Err(Error::Checksum { section: "header".into() });
    }
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Header(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Header(format!("checkpoint stores {} values, loader expects {}", header.dtype, T::DTYPE)));
    }
    if header.upsample != UPSAMPLE_CONVENTION {
        return Err(Error::Header(format!("unsupported upsampling convention {}", header.upsample)));
    }
    header.config.validate()?;
    let skeleton = SegNet::<T>::build(header.config.clone(), &[], 0)?;
    if skeleton.shared.len() != header.shared.len() {
        return Err(Error::Header(format!("{} shared tensors listed, architecture has {}", header.shared.len(), skeleton.shared.len())));
    }
    let mut shared = Vec::with_capacity(header.shared.len());
    for (entry, expect) in header.shared.iter().zip(&skeleton.shared) {
        if entry.name != expect.name || entry.shape != expect.value.shape() {
            return Err(Error::Header(format!("shared tensor {} {:?} does not match architecture", entry.name, entry.shape)));
        }
        let data = r.block::<T>(expect.value.numel(), &format!("block {}", entry.name))?;
        shared.push(SharedParam { name: entry.name.clone(), value: Tensor::new(entry.shape.clone(), data)? });
    }
    let channels = header.config.bn_channels();
    let mut bank = DomainBnBank::new(channels.clone());
    for entry in &header.domains {
        let n = channels.len();
        if entry.eps.len() != n || entry.momentum.len() != n || entry.batches_seen.len() != n || entry.trainable.len() != n {
            return Err(Error::Header(format!("domain {} does not describe {n} BN layers", entry.id)));
        }
        let mut set = Vec::with_capacity(n);
        for (i, &c) in channels.iter().enumerate() {
            let ctx = |what: &str| format!("block bn[{}].{i}.{what}", entry.id);
            let gamma = r.block::<T>(c, &ctx("gamma"))?;
            let beta = r.block::<T>(c, &ctx("beta"))?;
            let running_mean = r.block::<T>(c, &ctx("running_mean"))?;
            let running_var = r.block::<T>(c, &ctx("running_var"))?;
            set.push(BnLayer {
                params: BnParams { gamma, beta, eps: T::lit(entry.eps[i]), trainable: entry.trainable[i] },
                state: BnState { running_mean, running_var, momentum: T::lit(entry.momentum[i]), batches_seen: entry.batches_seen[i] },
            });
        }
        bank.insert(entry.id, set)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Validation(format!("{} trailing bytes after offset {}", buf.len() - r.pos, r.pos)));
    }
    for (new, src) in &header.provenance {
        if !bank.contains(*new) || !bank.contains(*src) {
            return Err(Error::Header(format!("provenance {src} -> {new} names an unknown domain")));
        }
    }
    let net = SegNet { config: header.config, shared, bank, provenance: header.provenance };
    Ok((net, header.seed))
}

pub fn save_checkpoint<T: Scalar>(net: &SegNet<T>, seed: u64, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, seed)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SegNet<T>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
