use std::sync::atomic::{AtomicI64, Ordering};

use crate::ids::Millis;

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> Millis;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> Millis {
        let d = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default();
        d.as_millis() as Millis
    }
}

/// Manually driven clock for tests and scripted runs.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicI64,
}

impl VirtualClock {
    pub fn new(start: Millis) -> Self {
        Self { now: AtomicI64::new(start) }
    }

    /// Moves time forward by `ms` and returns the new time.
    pub fn advance(&self, ms: Millis) -> Millis {
        self.now.fetch_add(ms.max(0), Ordering::SeqCst) + ms.max(0)
    }

    /// Sets the time, never moving it backwards. Returns the new time.
    pub fn set(&self, at: Millis) -> Millis {
        self.now.fetch_max(at, Ordering::SeqCst).max(at)
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> Millis {
        self.now.load(Ordering::SeqCst)
    }
}
