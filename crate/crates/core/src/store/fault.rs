use parking_lot::Mutex;

use super::{Namespace, StoreError, StoreKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreOp {
    Put,
    Get,
    Delete,
    List,
}

/// One-shot fault: the first operation matching the filters after `skip`
/// matching operations have passed fails with [`StoreError::Injected`].
#[derive(Debug, Clone, Default)]
pub struct FaultRule {
    pub op: Option<StoreOp>,
    pub namespace: Option<Namespace>,
    pub skip: u64,
}

impl FaultRule {
    pub fn on_put(namespace: Namespace) -> Self {
        Self {
            op: Some(StoreOp::Put),
            namespace: Some(namespace),
            skip: 0,
        }
    }

    pub fn skip(mut self, n: u64) -> Self {
        self.skip = n;
        self
    }

    fn matches(&self, op: StoreOp, ns: Namespace) -> bool {
        self.op.is_none_or(|o| o == op) && self.namespace.is_none_or(|n| n == ns)
    }
}

#[derive(Debug, Default)]
struct State {
    rules: Vec<FaultRule>,
    ops: u64,
    fired: u64,
}

/// Deterministic failure hook consulted by every backend before it touches
/// data. Unarmed, it only counts operations.
#[derive(Debug, Default)]
pub struct FaultInjector {
    state: Mutex<State>,
}

impl FaultInjector {
    /// The operation following the next `n` operations fails, once.
    pub fn fail_after(&self, n: u64) {
        self.arm(FaultRule::default().skip(n));
    }

    pub fn arm(&self, rule: FaultRule) {
        self.state.lock().rules.push(rule);
    }

    pub fn clear(&self) {
        self.state.lock().rules.clear();
    }

    pub fn operations(&self) -> u64 {
        self.state.lock().ops
    }

    pub fn fired(&self) -> u64 {
        self.state.lock().fired
    }

    pub(crate) fn check(&self, op: StoreOp, ns: Namespace, key: &str) -> Result<(), StoreError> {
        let mut st = self.state.lock();
        st.ops += 1;
        let mut hit = None;
        for (i, rule) in st.rules.iter_mut().enumerate() {
            if rule.matches(op, ns) {
                if rule.skip == 0 {
                    hit = Some(i);
                    break;
                }
                rule.skip -= 1;
            }
        }
        match hit {
            Some(i) => {
                st.rules.remove(i);
                st.fired += 1;
                Err(StoreError::Injected {
                    op,
                    key: format!("{ns}/{key}"),
                })
            }
            None => Ok(()),
        }
    }

    pub(crate) fn check_key(&self, op: StoreOp, key: &StoreKey) -> Result<(), StoreError> {
        self.check(op, key.namespace(), key.id())
    }
}
