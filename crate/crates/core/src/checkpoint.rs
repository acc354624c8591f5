//! Checkpoint primitives: a deterministic named-tensor archive (binary,
//! little-endian f64) plus JSON helpers for the structured parts. Values
//! are widened to f64 on save, so f32 parameters round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Real, Result};

const MAGIC: &[u8; 6] = b"TARC1\n";

/// Named flat tensors, sorted by name — identical content always produces
/// identical bytes.
#[derive(Default, Debug, Clone, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Vec<f64>>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Real>(&mut self, name: &str, values: &[T]) {
        self.entries
            .insert(name.to_string(), values.iter().map(|&v| v.to_f64()).collect());
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy the named tensor into `slot`, checking the length.
    pub fn restore_into<T: Real>(&self, name: &str, slot: &mut [T]) -> Result<()> {
        let values = self.entries.get(name).ok_or_else(|| Error::BadCheckpoint(format!(
            "archive has no tensor named {name:?}"
        )))?;
        if values.len() != slot.len() {
            return Err(Error::BadCheckpoint(format!(
                "tensor {name:?} holds {} values, expected {}",
                values.len(),
                slot.len()
            )));
        }
        for (s, &v) in slot.iter_mut().zip(values) {
            *s = T::from_f64(v);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, values) in &self.entries {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::BadCheckpoint(format!("{}: {what}", path.display()));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a tensor archive"));
        }
        let mut pos = MAGIC.len();
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            let end = *pos + 8;
            if end > bytes.len() {
                return Err(bad("truncated"));
            }
            let v = u64::from_le_bytes(bytes[*pos..end].try_into().unwrap());
            *pos = end;
            Ok(v)
        };
        let count = read_u64(&mut pos)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            if pos + 4 > bytes.len() {
                return Err(bad("truncated"));
            }
            let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + name_len > bytes.len() {
                return Err(bad("truncated"));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            pos += name_len;
            let len = read_u64(&mut pos)? as usize;
            if pos + len * 8 > bytes.len() {
                return Err(bad("truncated"));
            }
            let mut values = Vec::with_capacity(len);
            for i in 0..len {
                let start = pos + i * 8;
                values.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
            }
            pos += len * 8;
            entries.insert(name, values);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(TensorArchive { entries })
    }
}

pub fn save_json<S: serde::Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::BadCheckpoint(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::BadCheckpoint(format!("parse {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        let mut a = TensorArchive::new();
        a.insert::<f32>("net/w", &[1.5, -2.25, 1e-30, 3.4e38]);
        a.insert::<f64>("net/b", &[0.1, f64::MIN_POSITIVE]);
        a.insert::<f64>("empty", &[]);
        a.save(&path).unwrap();
        let b = TensorArchive::load(&path).unwrap();
        assert_eq!(a, b);

        let mut back = [0f32; 4];
        b.restore_into("net/w", &mut back).unwrap();
        assert_eq!(back, [1.5, -2.25, 1e-30, 3.4e38]);
    }

    #[test]
    fn identical_content_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        // Insertion order must not matter.
        let mut a = TensorArchive::new();
        a.insert::<f64>("x", &[1.0]);
        a.insert::<f64>("y", &[2.0]);
        let mut b = TensorArchive::new();
        b.insert::<f64>("y", &[2.0]);
        b.insert::<f64>("x", &[1.0]);
        a.save(&p1).unwrap();
        b.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn restore_checks_names_and_lengths() {
        let mut a = TensorArchive::new();
        a.insert::<f64>("w", &[1.0, 2.0]);
        let mut wrong_len = [0f64; 3];
        assert!(a.restore_into("w", &mut wrong_len).is_err());
        let mut missing = [0f64; 2];
        assert!(a.restore_into("v", &mut missing).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"definitely not an archive").unwrap();
        assert!(TensorArchive::load(&path).is_err());

        // Truncated real archive.
        let mut a = TensorArchive::new();
        a.insert::<f64>("w", &[1.0, 2.0, 3.0]);
        let good = dir.path().join("good.bin");
        a.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(TensorArchive::load(&cut).is_err());
    }

    #[test]
    fn json_helpers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.json");
        let groups = crate::prototypes::PrototypeGroups {
            partition: vec![0, 1, 0],
            n_groups: 2,
            known_map: vec![Some(1), None],
        };
        save_json(&groups, &path).unwrap();
        let back: crate::prototypes::PrototypeGroups = load_json(&path).unwrap();
        assert_eq!(groups, back);
    }
}
