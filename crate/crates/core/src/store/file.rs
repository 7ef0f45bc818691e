use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{
    canonical_value, FaultInjector, Namespace, Store, StoreError, StoreKey, StoreOp, StoreRecord,
};

/// On-disk envelope: `{"version": n, "value": {...}}`.
#[derive(Serialize, Deserialize)]
struct Envelope<'a> {
    version: u64,
    #[serde(borrow)]
    value: &'a RawValue,
}

/// One JSON file per record under `<root>/<namespace>/<id>.json`.
///
/// Writes go to a temporary sibling and are renamed into place, so readers
/// see either the old or the new record. A process-wide lock serializes the
/// read-version-then-write sequence.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    write_lock: Mutex<()>,
    faults: FaultInjector,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for ns in Namespace::ALL {
            fs::create_dir_all(root.join(ns.as_str()))?;
        }
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
            faults: FaultInjector::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &StoreKey) -> PathBuf {
        self.root
            .join(key.namespace().as_str())
            .join(format!("{}.json", key.id()))
    }

    fn read(&self, key: &StoreKey) -> Result<Option<StoreRecord>, StoreError> {
        read_record(&self.path(key), key.clone())
    }

    fn write(&self, key: &StoreKey, version: u64, value: &[u8]) -> Result<(), StoreError> {
        let raw = std::str::from_utf8(value)
            .ok()
            .and_then(|s| RawValue::from_string(s.to_string()).ok())
            .ok_or_else(|| StoreError::NotJson(key.clone()))?;
        let bytes = serde_json::to_vec(&Envelope {
            version,
            value: &raw,
        })
        .map_err(|_| StoreError::NotJson(key.clone()))?;

        let dir = self.root.join(key.namespace().as_str());
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            key.id(),
            uuid::Uuid::new_v4().simple()
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        drop(f);
        fs::rename(&tmp, self.path(key)).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        Ok(())
    }
}

fn read_record(path: &Path, key: StoreKey) -> Result<Option<StoreRecord>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let env: Envelope<'_> =
        serde_json::from_slice(&bytes).map_err(|_| StoreError::Corrupt(key.to_string()))?;
    Ok(Some(StoreRecord {
        value: env.value.get().as_bytes().to_vec(),
        version: env.version,
        key,
    }))
}

impl Store for FileStore {
    fn put(&self, key: &StoreKey, value: &[u8]) -> Result<u64, StoreError> {
        self.faults.check_key(StoreOp::Put, key)?;
        let value = canonical_value(key, value)?;
        let _guard = self.write_lock.lock();
        let version = self.read(key)?.map_or(1, |r| r.version + 1);
        self.write(key, version, &value)?;
        Ok(version)
    }

    fn put_if_absent(&self, key: &StoreKey, value: &[u8]) -> Result<u64, StoreError> {
        self.faults.check_key(StoreOp::Put, key)?;
        let value = canonical_value(key, value)?;
        let _guard = self.write_lock.lock();
        if self.path(key).exists() {
            return Err(StoreError::AlreadyExists(key.clone()));
        }
        self.write(key, 1, &value)?;
        Ok(1)
    }

    fn get(&self, key: &StoreKey) -> Result<Option<StoreRecord>, StoreError> {
        self.faults.check_key(StoreOp::Get, key)?;
        self.read(key)
    }

    fn delete(&self, key: &StoreKey) -> Result<bool, StoreError> {
        self.faults.check_key(StoreOp::Delete, key)?;
        let _guard = self.write_lock.lock();
        match fs::remove_file(self.path(key)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    fn list_prefix(
        &self,
        namespace: Namespace,
        id_prefix: &str,
    ) -> Result<Vec<StoreRecord>, StoreError> {
        self.faults.check(StoreOp::List, namespace, id_prefix)?;
        let dir = self.root.join(namespace.as_str());
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(id) = name.strip_suffix(".json") {
                if id.starts_with(id_prefix) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let key = StoreKey::new(namespace, id)?;
            // A concurrent delete between listing and reading just drops the record.
            if let Some(rec) = read_record(&self.path(&key), key)? {
                out.push(rec);
            }
        }
        Ok(out)
    }

    fn faults(&self) -> &FaultInjector {
        &self.faults
    }
}
