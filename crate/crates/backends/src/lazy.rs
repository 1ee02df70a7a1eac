use std::sync::{Arc, Mutex};

use crate::error::Result;

/// A value built on first successful use. Failures are not cached, so a
/// later call can succeed once the weights appear on disk.
#[derive(Debug, Default)]
pub struct LazyModel<T> {
    slot: Mutex<Option<Arc<T>>>,
}

impl<T> LazyModel<T> {
    pub fn new() -> Self {
        LazyModel { slot: Mutex::new(None) }
    }

    pub fn get_or_try_init(&self, init: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let mut slot = self.slot.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(v) = slot.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(init()?);
        *slot = Some(v.clone());
        Ok(v)
    }
}
