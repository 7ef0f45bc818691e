//! Black-box checks run identically against both store backends.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::sync::Arc;

use edge_iam::store::{
    FaultRule, FileStore, MemoryStore, Namespace, SharedStore, Store, StoreError, StoreExt,
    StoreKey, StoreOp,
};
use proptest::prelude::*;

fn backends() -> Vec<(&'static str, SharedStore, Option<tempfile::TempDir>)> {
    let dir = tempfile::tempdir().unwrap();
    let file = FileStore::open(dir.path()).unwrap();
    vec![
        ("memory", Arc::new(MemoryStore::new()), None),
        ("file", Arc::new(file), Some(dir)),
    ]
}

fn key(ns: Namespace, id: &str) -> StoreKey {
    StoreKey::new(ns, id).unwrap()
}

#[test]
fn versions_count_writes_and_restart_after_delete() {
    for (name, store, _dir) in backends() {
        let k = key(Namespace::Configs, "dev:app");
        assert_eq!(store.put(&k, br#"{"a":1}"#).unwrap(), 1, "{name}");
        assert_eq!(store.put(&k, br#"{"a":2}"#).unwrap(), 2, "{name}");
        let rec = store.get(&k).unwrap().unwrap();
        assert_eq!(
            (rec.version, rec.value.as_slice()),
            (2, &br#"{"a":2}"#[..]),
            "{name}"
        );
        assert!(store.delete(&k).unwrap());
        assert!(!store.delete(&k).unwrap(), "{name}: delete is idempotent");
        assert_eq!(store.get(&k).unwrap(), None);
        assert_eq!(store.put(&k, b"{}").unwrap(), 1, "{name}");
    }
}

#[test]
fn values_must_be_one_json_document() {
    for (name, store, _dir) in backends() {
        let k = key(Namespace::Users, "x");
        for bad in [&b"not json"[..], b"{} {}", b"", b"\xff"] {
            assert!(
                matches!(store.put(&k, bad), Err(StoreError::NotJson(_))),
                "{name}"
            );
        }
        // Surrounding whitespace is dropped so both backends return equal bytes.
        store.put(&k, b"  {\"k\": [1, 2]}\n").unwrap();
        assert_eq!(store.get(&k).unwrap().unwrap().value, b"{\"k\": [1, 2]}");
    }
}

#[test]
fn put_if_absent_is_exclusive() {
    for (name, store, _dir) in backends() {
        let k = key(Namespace::Orgs, "acme");
        assert_eq!(store.put_if_absent(&k, b"1").unwrap(), 1);
        assert!(
            matches!(
                store.put_if_absent(&k, b"2"),
                Err(StoreError::AlreadyExists(_))
            ),
            "{name}"
        );
        assert_eq!(store.get(&k).unwrap().unwrap().value, b"1");
    }
}

#[test]
fn concurrent_creates_have_one_winner() {
    for (name, store, _dir) in backends() {
        let k = key(Namespace::Users, "race");
        let wins: usize = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let store = store.clone();
                    let k = k.clone();
                    s.spawn(move || store.put_if_absent(&k, format!("{i}").as_bytes()).is_ok())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap() as usize)
                .sum()
        });
        assert_eq!(wins, 1, "{name}");
    }
}

#[test]
fn prefix_listing_is_ordered_and_scoped() {
    for (name, store, _dir) in backends() {
        for id in ["u:bob:b", "u:bob:a", "u:bobby:a", "o:bob:a"] {
            store.put(&key(Namespace::Grants, id), b"{}").unwrap();
        }
        store.put(&key(Namespace::Users, "u:bob:z"), b"{}").unwrap();
        let ids: Vec<String> = store
            .list_prefix(Namespace::Grants, "u:bob:")
            .unwrap()
            .into_iter()
            .map(|r| r.key.id().to_string())
            .collect();
        assert_eq!(ids, ["u:bob:a", "u:bob:b"], "{name}");
        assert_eq!(store.dump().unwrap().len(), 5);
    }
}

#[test]
fn injected_faults_fire_once_and_leave_data_alone() {
    for (name, store, _dir) in backends() {
        let k = key(Namespace::Grants, "g");
        store.put(&k, b"1").unwrap();
        store
            .faults()
            .arm(FaultRule::on_put(Namespace::Grants).skip(1));
        store.put(&key(Namespace::Users, "u"), b"0").unwrap();
        store.put(&k, b"2").unwrap();
        assert!(
            matches!(store.put(&k, b"3"), Err(StoreError::Injected { .. })),
            "{name}"
        );
        assert_eq!(store.get(&k).unwrap().unwrap().value, b"2");
        store.put(&k, b"4").unwrap();
        assert_eq!(store.faults().fired(), 1);

        store.faults().arm(FaultRule {
            op: Some(StoreOp::Delete),
            ..FaultRule::default()
        });
        assert!(store.delete(&k).is_err());
        assert!(
            store.get(&k).unwrap().is_some(),
            "{name}: failed delete kept the record"
        );
    }
}

#[test]
fn file_store_ignores_a_write_interrupted_before_rename() {
    let dir = tempfile::tempdir().unwrap();
    let store = FileStore::open(dir.path()).unwrap();
    let k = key(Namespace::Configs, "dev:app");
    store.put(&k, br#"{"v":1}"#).unwrap();
    // What a crash between writing the temporary file and renaming it leaves.
    std::fs::write(
        dir.path().join("configs").join(".dev:app.tmp-deadbeef"),
        br#"{"version":2,"val"#,
    )
    .unwrap();

    let reopened = FileStore::open(dir.path()).unwrap();
    let rec = reopened.get(&k).unwrap().unwrap();
    assert_eq!((rec.version, rec.value.as_slice()), (1, &br#"{"v":1}"#[..]));
    assert_eq!(
        reopened.list_prefix(Namespace::Configs, "").unwrap().len(),
        1
    );
    assert_eq!(reopened.put(&k, br#"{"v":2}"#).unwrap(), 2);
}

#[test]
fn file_store_reports_corrupt_records() {
    let dir = tempfile::tempdir().unwrap();
    let store = FileStore::open(dir.path()).unwrap();
    std::fs::write(dir.path().join("users").join("broken.json"), b"{oops").unwrap();
    assert!(matches!(
        store.get(&key(Namespace::Users, "broken")),
        Err(StoreError::Corrupt(_))
    ));
}

#[test]
fn file_store_persists_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = FileStore::open(dir.path()).unwrap();
        s.put_json(
            &key(Namespace::Keys, "k1"),
            &serde_json::json!({"id": "k1"}),
        )
        .unwrap();
    }
    let s = FileStore::open(dir.path()).unwrap();
    let v: serde_json::Value = s.get_json(&key(Namespace::Keys, "k1")).unwrap().unwrap();
    assert_eq!(v["id"], "k1");
}

#[derive(Debug, Clone)]
enum Op {
    Put(u8, u8),
    Create(u8, u8),
    Delete(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..4, any::<u8>()).prop_map(|(k, v)| Op::Put(k, v)),
        (0u8..4, any::<u8>()).prop_map(|(k, v)| Op::Create(k, v)),
        (0u8..4).prop_map(Op::Delete),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Both backends behave like a map of (version, value), where a version
    /// is the number of writes since the key was last absent.
    #[test]
    fn backends_match_a_versioned_map(ops in proptest::collection::vec(op(), 1..40)) {
        for (_, store, _dir) in backends() {
            let mut model: BTreeMap<u8, (u64, u8)> = BTreeMap::new();
            for op in &ops {
                match *op {
                    Op::Put(k, v) => {
                        let next = model.get(&k).map_or(1, |e| e.0 + 1);
                        let got = store.put(&key(Namespace::Configs, &format!("k{k}")), v.to_string().as_bytes()).unwrap();
                        prop_assert_eq!(got, next);
                        model.insert(k, (next, v));
                    }
                    Op::Create(k, v) => {
                        let res = store.put_if_absent(&key(Namespace::Configs, &format!("k{k}")), v.to_string().as_bytes());
                        match model.entry(k) {
                            Entry::Occupied(_) => prop_assert!(res.is_err()),
                            Entry::Vacant(slot) => {
                                prop_assert_eq!(res.unwrap(), 1);
                                slot.insert((1, v));
                            }
                        }
                    }
                    Op::Delete(k) => {
                        let existed = store.delete(&key(Namespace::Configs, &format!("k{k}"))).unwrap();
                        prop_assert_eq!(existed, model.remove(&k).is_some());
                    }
                }
            }
            let listed: Vec<(String, u64, Vec<u8>)> = store
                .list_prefix(Namespace::Configs, "")
                .unwrap()
                .into_iter()
                .map(|r| (r.key.id().to_string(), r.version, r.value))
                .collect();
            let expected: Vec<(String, u64, Vec<u8>)> = model
                .iter()
                .map(|(k, (ver, v))| (format!("k{k}"), *ver, v.to_string().into_bytes()))
                .collect();
            prop_assert_eq!(listed, expected);
        }
    }
}
