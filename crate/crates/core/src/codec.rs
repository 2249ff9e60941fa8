//! Little-endian helpers shared by the `.fmb`, `.mdl` and `.bnk` formats.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn len_u32(&mut self, n: usize, path: &Path, what: &str) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: format!("{what} {n} exceeds u32"),
        })?;
        self.u32(v);
        Ok(())
    }
    pub fn finish(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], path: &Path) -> Self {
        Self {
            data,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn format_err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.clone(),
                msg: format!(
                    "truncated while reading {what} at byte {} ({} bytes left, {n} needed)",
                    self.pos,
                    self.data.len() - self.pos
                ),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Reads and checks an 8-byte magic; a short file is reported as a format error.
    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.data.len() < 8 || &self.data[..8] != expected {
            return Err(self.format_err(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(expected)
            )));
        }
        self.pos = 8;
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != supported {
            return Err(self.format_err(format!("unsupported version {v} (expected {supported})")));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    pub fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.format_err("payload size overflow"))?;
        let b = self.take(bytes, what)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.format_err(format!("{what} is not UTF-8")))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Corrupt {
                path: self.path,
                msg: format!("{} trailing bytes", self.data.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
