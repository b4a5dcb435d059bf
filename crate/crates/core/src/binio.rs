//! Little-endian byte encoding shared by the checkpoint sections.

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{FvnError, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

/// `magic`, `u32` version, `u32` section count, then per section a 4-byte
/// tag, `u64` payload length, the payload and its SHA-256 digest.
pub(crate) fn write_container(magic: &[u8; 8], sections: &[([u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(&Sha256::digest(payload));
    }
    out
}

pub(crate) type Sections<'a> = Vec<([u8; 4], &'a [u8])>;

pub(crate) fn read_container<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<Sections<'a>> {
    let integrity = |m: String| FvnError::Integrity(m);
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(integrity(format!("not a {what} file (bad magic or truncated header)")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(integrity(format!("unsupported {what} version {version} (expected {FORMAT_VERSION})")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let mut pos = 16;
    let mut sections = Vec::new();
    for _ in 0..count {
        if bytes.len() - pos < 12 {
            return Err(integrity("truncated section header".into()));
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().expect("4 bytes");
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        let name = String::from_utf8_lossy(&tag).into_owned();
        let rest = (bytes.len() - pos) as u64;
        if len > rest || rest - len < 32 {
            return Err(integrity(format!("section {name} truncated")));
        }
        let len = len as usize;
        let payload = &bytes[pos..pos + len];
        if Sha256::digest(payload).as_slice() != &bytes[pos + len..pos + len + 32] {
            return Err(integrity(format!("checksum mismatch in section {name}")));
        }
        sections.push((tag, payload));
        pos += len + 32;
    }
    if pos != bytes.len() {
        return Err(integrity("trailing bytes after the last section".into()));
    }
    Ok(sections)
}

pub(crate) fn find_section<'a>(sections: &Sections<'a>, tag: &[u8; 4]) -> Option<&'a [u8]> {
    sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p)
}

pub(crate) fn need_section<'a>(sections: &Sections<'a>, tag: &[u8; 4]) -> Result<&'a [u8]> {
    find_section(sections, tag)
        .ok_or_else(|| FvnError::Integrity(format!("missing section {}", String::from_utf8_lossy(tag))))
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
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

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|d| self.u64(*d as u64));
        t.data().iter().for_each(|x| self.f64(*x));
    }

    pub fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        ts.iter().for_each(|t| self.tensor(t));
    }

    pub fn strs<S: AsRef<str>>(&mut self, items: &[S]) {
        self.u32(items.len() as u32);
        items.iter().for_each(|t| self.str(t.as_ref()));
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], what: &'static str) -> Self {
        ByteReader { data, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(FvnError::Integrity(format!("{} section truncated", self.what)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        // Every element occupies at least one byte.
        if n > self.data.len() - self.pos {
            return Err(FvnError::Integrity(format!("{} section has an impossible length", self.what)));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FvnError::Integrity(format!("{} section holds invalid UTF-8", self.what)))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        if n.saturating_mul(8) > self.data.len() - self.pos {
            return Err(FvnError::Integrity(format!("{} section truncated", self.what)));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| FvnError::Integrity(e.to_string()))
    }

    pub fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }

    pub fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.u32()?;
        (0..n).map(|_| self.str()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(FvnError::Integrity(format!("{} section has trailing bytes", self.what)));
        }
        Ok(())
    }
}
