//! Binary array container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ALNDET1\n"
//! u32 array count
//! per array: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 payload
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use super::NetError;

pub const MAGIC: &[u8; 8] = b"ALNDET1\n";

pub fn encode_arrays<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, NetError> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        let name_len = u16::try_from(name.len())
            .map_err(|_| NetError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| NetError::Checkpoint(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| NetError::Checkpoint(format!("dim too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>, NetError> {
    encode_arrays(params.iter().map(|(n, p)| (n, &p.tensor)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(NetError::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NetError> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(NetError::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NetError::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        arrays.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(arrays)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet, NetError> {
    let mut ps = ParamSet::new();
    for (name, t) in decode_arrays(bytes)? {
        ps.insert(name, t);
    }
    Ok(ps)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<(), NetError> {
    std::fs::write(path, encode_params(params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet, NetError> {
    decode_params(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.25, 3.0, 0.0, -7.125]).unwrap());
        ps.insert("b", Tensor::from_vec(&[1], vec![0.1f32 as f64]).unwrap());
        ps
    }

    #[test]
    fn byte_layout() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let bytes = encode_params(&ps).unwrap();
        let mut expect = b"ALNDET1\n".to_vec();
        expect.extend([1, 0, 0, 0]);
        expect.extend([1, 0, b'x', 1, 2, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        expect.extend(2.0f32.to_le_bytes());
        let crc = crc32fast::hash(&expect);
        expect.extend(crc.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn roundtrip_and_crc() {
        let ps = sample();
        let bytes = encode_params(&ps).unwrap();
        assert_eq!(decode_params(&bytes).unwrap(), ps);

        let mut corrupt = bytes.clone();
        corrupt[20] ^= 0x40;
        assert!(matches!(decode_params(&corrupt), Err(NetError::Checkpoint(_))));
        assert!(decode_params(&bytes[..bytes.len() - 6]).is_err());
    }
}
