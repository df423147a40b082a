//! Little-endian primitives and the named-tensor table shared by the binary
//! artifact formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

/// Header check shared by every artifact: magic then version.
pub(crate) fn expect_header(r: &mut impl Read, what: &'static str, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| format_err(what, "truncated header"))?;
    if &m != magic {
        return Err(format_err(what, format!("bad magic {m:?}, expected {magic:?}")));
    }
    let v = read_u32(r).map_err(|_| format_err(what, "truncated header"))?;
    if v != version {
        return Err(format_err(what, format!("unsupported version {v}, expected {version}")));
    }
    Ok(())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}

/// Reader that turns short reads into format errors for `what`.
pub(crate) struct Reader<'a> {
    pub what: &'static str,
    pub buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Self { what, buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(format_err(self.what, "unexpected end of file"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| format_err(self.what, "name is not UTF-8"))
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        expect_header(&mut self.buf, self.what, magic, version)
    }

    pub fn tensor_table(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(format_err(self.what, format!("{name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
            let numel = numel
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len()))
                .ok_or_else(|| format_err(self.what, format!("{name}: tensor data truncated")))?;
            let bytes = self.take(numel * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(format_err(self.what, format!("{} trailing bytes", self.buf.len())))
        }
    }
}

pub(crate) fn write_tensor_table<'t>(
    w: &mut impl Write,
    entries: impl ExactSizeIterator<Item = (&'t str, &'t Tensor<f32>)>,
) -> io::Result<()> {
    write_u32(w, entries.len() as u32)?;
    for (name, t) in entries {
        write_str(w, name)?;
        write_u32(w, t.rank() as u32)?;
        for &e in t.shape() {
            write_u32(w, e as u32)?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_and_truncation() {
        let a = Tensor::new(&[2, 3], vec![1.0f32, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        let b = Tensor::scalar(7.0f32);
        let mut buf = Vec::new();
        write_tensor_table(&mut buf, [("a", &a), ("b", &b)].into_iter()).unwrap();
        let mut r = Reader::new("test", &buf);
        let t = r.tensor_table().unwrap();
        r.finish().unwrap();
        assert_eq!(t[0].0, "a");
        assert!(t[0].1.bit_eq(&a));
        assert!(t[1].1.bit_eq(&b));
        for cut in 0..buf.len() {
            assert!(Reader::new("test", &buf[..cut]).tensor_table().is_err());
        }
    }
}
