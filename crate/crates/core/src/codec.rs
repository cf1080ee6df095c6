//! Little-endian binary primitives shared by the checkpoint and wire formats.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension exceeds u32"));
    }

    /// Tensor section: `u32 rank`, `rank x u32 dims`, then float32 values.
    pub fn tensor(&mut self, shape: &[usize], values: impl IntoIterator<Item = f32>) {
        self.len_u32(shape.len());
        for &d in shape {
            self.len_u32(d);
        }
        for v in values {
            self.f32(v);
        }
    }

    /// Packed bitset, least significant bit first.
    pub fn bitset(&mut self, bits: &[bool]) {
        self.u64(bits.len() as u64);
        for chunk in bits.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
            self.buf.push(byte);
        }
    }
}

#[derive(Debug)]
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::decode(
                    self.pos,
                    format!(
                        "truncated input: need {n} bytes, {} left",
                        self.buf.len() - self.pos
                    ),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn expect_tag(&mut self, tag: &[u8]) -> Result<()> {
        let at = self.pos;
        let got = self.take(tag.len())?;
        if got != tag {
            return Err(Error::decode(
                at,
                format!(
                    "expected tag {:?}, found {:?}",
                    String::from_utf8_lossy(tag),
                    got
                ),
            ));
        }
        Ok(())
    }

    pub fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::decode(at, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::decode(at, "tensor size overflows"))?;
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::decode(at, "tensor size overflows"))?,
        )?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((shape, values))
    }

    pub fn bitset(&mut self) -> Result<Vec<bool>> {
        let at = self.pos;
        let len = usize::try_from(self.u64()?).map_err(|_| Error::decode(at, "bitset too long"))?;
        let bytes = self.take(len.div_ceil(8))?;
        Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::decode(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitset_round_trip() {
        let bits: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        let mut w = ByteWriter::new();
        w.bitset(&bits);
        let buf = w.into_inner();
        assert_eq!(buf.len(), 8 + 3);
        let mut r = ByteReader::new(&buf);
        assert_eq!(r.bitset().unwrap(), bits);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_reports_offset() {
        let mut r = ByteReader::new(&[1, 2, 3]);
        r.u8().unwrap();
        match r.u32() {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
