use std::collections::BTreeMap;

use parking_lot::RwLock;

use super::{
    canonical_value, FaultInjector, Namespace, Store, StoreError, StoreKey, StoreOp, StoreRecord,
};

#[derive(Debug, Default)]
pub struct MemoryStore {
    data: RwLock<BTreeMap<StoreKey, (u64, Vec<u8>)>>,
    faults: FaultInjector,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Store for MemoryStore {
    fn put(&self, key: &StoreKey, value: &[u8]) -> Result<u64, StoreError> {
        self.faults.check_key(StoreOp::Put, key)?;
        let value = canonical_value(key, value)?;
        let mut data = self.data.write();
        let version = data.get(key).map_or(1, |(v, _)| v + 1);
        data.insert(key.clone(), (version, value));
        Ok(version)
    }

    fn put_if_absent(&self, key: &StoreKey, value: &[u8]) -> Result<u64, StoreError> {
        self.faults.check_key(StoreOp::Put, key)?;
        let value = canonical_value(key, value)?;
        let mut data = self.data.write();
        if data.contains_key(key) {
            return Err(StoreError::AlreadyExists(key.clone()));
        }
        data.insert(key.clone(), (1, value));
        Ok(1)
    }

    fn get(&self, key: &StoreKey) -> Result<Option<StoreRecord>, StoreError> {
        self.faults.check_key(StoreOp::Get, key)?;
        Ok(self
            .data
            .read()
            .get(key)
            .map(|(version, value)| StoreRecord {
                key: key.clone(),
                value: value.clone(),
                version: *version,
            }))
    }

    fn delete(&self, key: &StoreKey) -> Result<bool, StoreError> {
        self.faults.check_key(StoreOp::Delete, key)?;
        Ok(self.data.write().remove(key).is_some())
    }

    fn list_prefix(
        &self,
        namespace: Namespace,
        id_prefix: &str,
    ) -> Result<Vec<StoreRecord>, StoreError> {
        self.faults.check(StoreOp::List, namespace, id_prefix)?;
        let data = self.data.read();
        // Keys sort by (namespace, id), so matches form one contiguous run.
        let start = StoreKey {
            namespace,
            id: id_prefix.to_string(),
        };
        let out = data
            .range(start..)
            .take_while(|(k, _)| k.namespace() == namespace && k.id().starts_with(id_prefix))
            .map(|(k, (version, value))| StoreRecord {
                key: k.clone(),
                value: value.clone(),
                version: *version,
            })
            .collect();
        Ok(out)
    }

    fn faults(&self) -> &FaultInjector {
        &self.faults
    }
}
