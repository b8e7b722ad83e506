//! Little-endian binary reading shared by the episode and checkpoint
//! formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
    pub path: &'a str,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn rgb(&mut self) -> Result<[u8; 3]> {
        Ok(self.take(3)?.try_into().unwrap())
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            msg: msg.into(),
        }
    }
}

/// Splits off and verifies the trailing CRC32, returning the payload.
pub(crate) fn verify_crc<'a>(bytes: &'a [u8], path: &str) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            path: path.to_string(),
            msg: "file too short".into(),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_string(),
            stored,
            computed,
        });
    }
    Ok(payload)
}
