//! Named-array container: the on-disk format for prompts, backbones and
//! checkpoints. Little-endian, self-describing, bit-exact round trips.
//!
//! Layout:
//! ```text
//! magic    8  b"PXPROMT1"
//! count    4  u32 number of entries
//! entry*:
//!   name_len 4  u32
//!   name        utf-8 bytes
//!   dtype    1  0 = f64, 1 = u8
//!   ndim     1  u8
//!   dims        ndim x u64
//!   payload     product(dims) x dtype size, little-endian
//! ```

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PXPROMT1";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.to_string(), Entry::F64 { shape, data }));
    }

    pub fn push_bytes(&mut self, name: &str, data: Vec<u8>) {
        self.entries.push((name.to_string(), Entry::Bytes(data)));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Entry::F64 { shape, data }) => Ok((shape, data)),
            Some(Entry::Bytes(_)) => Err(Error::Format(format!("entry {name} is not a float array"))),
            None => Err(Error::Format(format!("container is missing entry {name}"))),
        }
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            Some(Entry::F64 { .. }) => Err(Error::Format(format!("entry {name} is not a byte blob"))),
            None => Err(Error::Format(format!("container is missing entry {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F64 { shape, data } => {
                    out.push(0);
                    out.push(shape.len() as u8);
                    for d in shape {
                        out.extend_from_slice(&(*d as u64).to_le_bytes());
                    }
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(data) => {
                    out.push(1);
                    out.push(1);
                    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
                    out.extend_from_slice(data);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic; not a container file".into()));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?;
            let dtype = cur.take(1)?[0];
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let entry = match dtype {
                0 => {
                    let raw = cur.take(numel * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F64 { shape, data }
                }
                1 => Entry::Bytes(cur.take(numel)?.to_vec()),
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            entries.push((name, entry));
        }
        Ok(Container { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "container truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_roundtrip() {
        let mut c = Container::new();
        c.push_f64("a", vec![2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]);
        c.push_bytes("meta", b"{\"x\":1}".to_vec());
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_bytes("meta").unwrap(), b"{\"x\":1}");
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(Container::from_bytes(b"NOTMAGIC\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn truncation_rejected() {
        let mut c = Container::new();
        c.push_f64("a", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            names in proptest::collection::vec("[a-z/_.]{1,12}", 1..5),
            payloads in proptest::collection::vec(
                proptest::collection::vec(proptest::num::f64::ANY, 0..20), 1..5
            )
        ) {
            let mut c = Container::new();
            for (i, (name, data)) in names.iter().zip(&payloads).enumerate() {
                c.push_f64(&format!("{name}{i}"), vec![data.len()], data.clone());
            }
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            // compare through raw bits: NaN payloads must survive too
            for ((n1, e1), (n2, e2)) in c.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                match (e1, e2) {
                    (Entry::F64 { shape: s1, data: d1 }, Entry::F64 { shape: s2, data: d2 }) => {
                        prop_assert_eq!(s1, s2);
                        prop_assert_eq!(d1.len(), d2.len());
                        for (a, b) in d1.iter().zip(d2.iter()) {
                            prop_assert_eq!(a.to_bits(), b.to_bits());
                        }
                    }
                    _ => prop_assert!(false, "entry kind changed"),
                }
            }
        }
    }
}
