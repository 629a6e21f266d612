//! Deterministic tar archives holding JSON documents, parameter stores and
//! raw blobs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

/// Archive format version written into every checkpoint.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// In-memory archive. Entries are written in name order with zeroed
/// metadata so identical content produces identical bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn new() -> Self {
        let mut a = Self::default();
        a.put_json("format.json", &serde_json::json!({ "format_version": FORMAT_VERSION }))
            .expect("static json");
        a
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.entries.insert(name.to_string(), bytes);
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put_bytes(name, serde_json::to_vec_pretty(value)?);
        Ok(())
    }

    /// `<prefix>.json` index and `<prefix>.bin` little-endian f32 values.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
        let mut index = Vec::new();
        let mut flat = Vec::new();
        for (name, t) in store.iter() {
            index.push(IndexEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: flat.len() });
            flat.extend_from_slice(t.data());
        }
        let mut bytes = vec![0u8; flat.len() * 4];
        LittleEndian::write_f32_into(&flat, &mut bytes);
        self.put_json(&format!("{prefix}.json"), &index)?;
        self.put_bytes(&format!("{prefix}.bin"), bytes);
        Ok(())
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no entry {name}")))
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.get_bytes(name)?).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Load named arrays into a store with the expected layout.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let index: Vec<IndexEntry> = self.get_json(&format!("{prefix}.json"))?;
        let bytes = self.get_bytes(&format!("{prefix}.bin"))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{prefix}.bin has a partial value")));
        }
        let mut flat = vec![0f32; bytes.len() / 4];
        LittleEndian::read_f32_into(bytes, &mut flat);
        let mut named = BTreeMap::new();
        for e in index {
            let n: usize = e.shape.iter().product();
            let data = flat
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("{prefix}: {} runs past the data", e.name)))?;
            named.insert(e.name, Tensor::new(e.shape, data.to_vec()));
        }
        store.load_from(&named)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut builder = tar::Builder::new(Vec::new());
        builder.mode(tar::HeaderMode::Deterministic);
        for (name, data) in &self.entries {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_uid(0);
            h.set_gid(0);
            h.set_cksum();
            builder.append_data(&mut h, name, data.as_slice())?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut ar = tar::Archive::new(bytes);
        for e in ar.entries()? {
            let mut e = e?;
            let name = e.path()?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            e.read_to_end(&mut data)?;
            entries.insert(name, data);
        }
        let a = Self { entries };
        let fmt: serde_json::Value = a.get_json("format.json")?;
        let v = fmt.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if v != FORMAT_VERSION as u64 {
            return Err(Error::Checkpoint(format!("format version {v}, this build reads {FORMAT_VERSION}")));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_roundtrip_is_bit_exact_and_bytes_are_stable() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]));
        s.add("a.b", Tensor::new(vec![1], vec![7.0]));
        let mut a = Archive::new();
        a.put_store("p", &s).unwrap();
        a.put_json("cfg.json", &serde_json::json!({"x": 1})).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.to_bytes().unwrap());
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        let mut s2 = s.clone();
        s2.get_mut(s2.id("a.w").unwrap()).data_mut()[0] = 0.0;
        b.load_store("p", &mut s2).unwrap();
        assert_eq!(s2.hash_hex(), s.hash_hex());
        assert!(b.get_bytes("missing").is_err());
    }

    #[test]
    fn rejects_foreign_format_version() {
        let mut a = Archive::new();
        a.put_json("format.json", &serde_json::json!({"format_version": 99})).unwrap();
        assert!(Archive::from_bytes(&a.to_bytes().unwrap()).is_err());
    }
}
