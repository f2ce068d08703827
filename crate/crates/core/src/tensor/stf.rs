//! STF tensor files: `"STF1"`, u32 LE rank, rank x u32 LE dims, then
//! `product(dims)` f64 LE values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const STF_MAGIC: &[u8; 4] = b"STF1";

pub fn write_stf<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&write_stf_bytes(t))?;
    Ok(())
}

pub fn write_stf_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(STF_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_stf<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let (t, used) = read_stf_bytes(&buf, 0)?;
    if used != buf.len() {
        return Err(Error::format(used as u64, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Little-endian cursor with byte-offset error reporting.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], base: u64) -> Self {
        Cursor { buf, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!("unexpected end of data: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(
                at,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        let (t, used) = read_stf_bytes(&self.buf[self.pos..], self.offset())?;
        self.pos += used;
        Ok(t)
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses one tensor from the front of `buf`; returns it with the number of
/// bytes consumed. `base` is added to offsets in error messages.
pub fn read_stf_bytes(buf: &[u8], base: u64) -> Result<(Tensor, usize)> {
    let mut c = Cursor::new(buf, base);
    c.expect_magic(STF_MAGIC)?;
    let rank_at = c.offset();
    let rank = c.u32()? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::format(rank_at, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let at = c.offset();
        let d = c.u32()? as usize;
        if d == 0 {
            return Err(Error::format(at, "zero-sized dimension"));
        }
        count = count.checked_mul(d).ok_or_else(|| Error::format(at, "element count overflows"))?;
        shape.push(d);
    }
    let payload_at = c.offset();
    let bytes = c.take(count.checked_mul(8).ok_or_else(|| Error::format(payload_at, "payload too large"))?)?;
    let data: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(payload_at + 8 * i as u64, "non-finite tensor value"));
    }
    Ok((Tensor::from_parts(shape, data), c.position()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let b = write_stf_bytes(&t);
        let mut expect = b"STF1".to_vec();
        expect.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(read_stf(&mut &b[..]).unwrap(), t);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = write_stf_bytes(&t);
        match read_stf_bytes(&b[..b.len() - 3], 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(read_stf_bytes(b"STF2", 0), Err(Error::Format { offset: 0, .. })));
    }
}
