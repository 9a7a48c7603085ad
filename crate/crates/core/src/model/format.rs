//! FLPK container: a little-endian, checksummed list of named tensors.
//!
//! ```text
//! magic "FLPK" | version u16 | partition u8 | element u8 | count u32
//! per tensor: name_len u16 | name (UTF-8) | rank u8 | extents u32 x rank | payload
//! FNV-1a-32 of every preceding byte
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Element, ElementType, Tensor};

use super::{ParamSet, PartitionTag};

pub const MAGIC: &[u8; 4] = b"FLPK";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 12;

pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn serialize<T: Element>(set: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(serialized_len(set));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(set.tag().code());
    out.push(T::TYPE.code());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.entries() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    let sum = fnv1a32(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Exact byte length [`serialize`] would produce.
pub fn serialized_len<T: Element>(set: &ParamSet<T>) -> usize {
    HEADER_LEN
        + set
            .entries()
            .iter()
            .map(|(n, t)| 2 + n.len() + 1 + 4 * t.dims().len() + t.len() * T::TYPE.size())
            .sum::<usize>()
        + 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub version: u16,
    pub tag: PartitionTag,
    pub element_type: ElementType,
    pub count: u32,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos,
                msg: format!("truncated while reading {what}: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn corrupt(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Corrupt { offset: at, msg: msg.into() }
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<FileHeader> {
    if r.take(4, "magic")? != MAGIC {
        return Err(r.corrupt(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.corrupt(4, format!("unsupported version {version}")));
    }
    let tag_code = r.u8("partition tag")?;
    let tag = PartitionTag::from_code(tag_code)
        .ok_or_else(|| r.corrupt(6, format!("unknown partition tag {tag_code}")))?;
    let el_code = r.u8("element type")?;
    let element_type = ElementType::from_code(el_code)
        .ok_or_else(|| r.corrupt(7, format!("unknown element type {el_code}")))?;
    let count = r.u32("tensor count")?;
    Ok(FileHeader { version, tag, element_type, count })
}

/// Reads just the fixed header.
pub fn peek_header(bytes: &[u8]) -> Result<FileHeader> {
    read_header(&mut Reader { bytes, pos: 0 })
}

pub fn deserialize<T: Element>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    if header.element_type != T::TYPE {
        return Err(r.corrupt(
            7,
            format!("file holds {:?} elements, expected {:?}", header.element_type, T::TYPE),
        ));
    }
    let mut entries = Vec::new();
    for _ in 0..header.count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.corrupt(at + 2, "tensor name is not UTF-8"))?
            .to_owned();
        let rank_at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank == 0 {
            return Err(r.corrupt(rank_at, format!("tensor `{name}` has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d_at = r.pos;
            let d = r.u32("extent")? as usize;
            if d == 0 {
                return Err(r.corrupt(d_at, format!("tensor `{name}` has a zero extent")));
            }
            dims.push(d);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.corrupt(rank_at, "extent product overflows"))?;
        let width = T::TYPE.size();
        let payload_len = numel
            .checked_mul(width)
            .ok_or_else(|| r.corrupt(rank_at, "payload length overflows"))?;
        let payload = r.take(payload_len, &format!("payload of `{name}`"))?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(dims, data).map_err(|e| r.corrupt(rank_at, e.to_string()))?;
        entries.push((name, t));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let actual = fnv1a32(&bytes[..body_end]);
    if stored != actual {
        return Err(r.corrupt(
            body_end,
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    ParamSet::new(header.tag, entries).map_err(|e| Error::Corrupt { offset: HEADER_LEN, msg: e.to_string() })
}
