//! Binary dataset files.
//!
//! Layout (little-endian): magic `LBNDSET\0`, u32 version, u32 height,
//! u32 width, u32 class count, u32 domain id, u64 record count, u32 header
//! checksum; then per record: u8 split, u32 volume, u16 slice, `H*W` f32
//! intensities, `H*W` u8 labels, u32 checksum of the record bytes.

use std::fs;
use std::path::Path;

use crate::data::{DomainDataset, LabelledSlice, Split};
use crate::error::{Error, Result};
use crate::norm::DomainId;

pub const DATASET_MAGIC: [u8; 8] = *b"LBNDSET\0";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &DomainDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let [h, w] = ds.image_size;
    let records: usize = ds.train.len() + ds.val.len() + ds.test.len();
    let mut out = Vec::with_capacity(40 + records * (11 + h * w * 5));
    out.extend_from_slice(&DATASET_MAGIC);
    let header_start = out.len();
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [h as u32, w as u32, ds.num_classes as u32, ds.domain.0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(records as u64).to_le_bytes());
    let crc = crc32fast::hash(&out[header_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in ds.split(split) {
            let start = out.len();
            out.push(split.code());
            out.extend_from_slice(&s.volume.to_le_bytes());
            out.extend_from_slice(&s.slice.to_le_bytes());
            for v in &s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.labels);
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
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
}

pub fn decode_dataset(buf: &[u8]) -> Result<DomainDataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic { expected: String::from_utf8_lossy(&DATASET_MAGIC).into_owned(), found: String::from_utf8_lossy(magic).into_owned() });
    }
    let header_start = r.pos;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, supported: DATASET_VERSION });
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let k = r.u32("class count")? as usize;
    let domain = DomainId(r.u32("domain id")?);
    let count = u64::from_le_bytes(r.take(8, "record count")?.try_into().unwrap());
    let header_crc = crc32fast::hash(&buf[header_start..r.pos]);
    if r.u32("header checksum")? != header_crc {
        return Err(Error::Checksum { section: "dataset header".into() });
    }
    if h == 0 || w == 0 || k == 0 || k > 256 {
        return Err(Error::Validation(format!("header declares {h}x{w} images with {k} classes")));
    }
    let plane = h * w;
    let record_len = 1 + 4 + 2 + plane * 5 + 4;
    if (buf.len() - r.pos) as u64 / (record_len as u64) < count {
        // report the offset of the first incomplete record
        let whole = (buf.len() - r.pos) / record_len;
        return Err(Error::Truncated {
            offset: r.pos + whole * record_len,
            context: format!("record {whole} of {count}"),
        });
    }
    let mut ds = DomainDataset::new(domain, [h, w], k);
    for i in 0..count as usize {
        let start = r.pos;
        let ctx = format!("record {i}");
        let code = r.take(1, &ctx)?[0];
        let split = Split::from_code(code)
            .ok_or_else(|| Error::Validation(format!("record {i} at offset {start} has unknown split code {code}")))?;
        let volume = r.u32(&ctx)?;
        let slice = u16::from_le_bytes(r.take(2, &ctx)?.try_into().unwrap());
        let image: Vec<f32> = r.take(plane * 4, &ctx)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let labels = r.take(plane, &ctx)?.to_vec();
        let crc = crc32fast::hash(&buf[start..r.pos]);
        if r.u32(&ctx)? != crc {
            return Err(Error::Checksum { section: format!("record {i} at offset {start}") });
        }
        ds.split_mut(split).push(LabelledSlice { domain, volume, slice, size: [h, w], image, labels });
    }
    if r.pos != buf.len() {
        return Err(Error::Validation(format!("{} trailing bytes after offset {}", buf.len() - r.pos, r.pos)));
    }
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(path: &Path, ds: &DomainDataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<DomainDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DomainDataset {
        let mut ds = DomainDataset::new(DomainId(3), [2, 3], 3);
        let mk = |volume, slice, v: f32| LabelledSlice {
            domain: DomainId(3),
            volume,
            slice,
            size: [2, 3],
            image: vec![v, 0.0, 1.5, f32::MIN_POSITIVE, 2.0, 0.125],
            labels: vec![0, 1, 2, 2, 1, 0],
        };
        ds.train = vec![mk(0, 0, 0.1), mk(0, 1, 0.2)];
        ds.val = vec![mk(1, 0, 0.3)];
        ds.test = vec![mk(2, 0, 0.4)];
        ds
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = sample();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode_dataset(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_dataset(cut) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 40 + 3 * (7 + 30 + 4)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Truncated { offset: 8, .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[8] = 9;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn labels_beyond_declared_classes_fail_validation() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        // declare 2 classes instead of 3 and fix up the header checksum
        bytes[20..24].copy_from_slice(&2u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[8..36]);
        bytes[36..40].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_dataset(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn corrupted_record_fails_checksum() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[50] ^= 1;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Checksum { .. })));
    }
}
