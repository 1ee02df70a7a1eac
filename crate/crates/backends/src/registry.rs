use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::sd::StableDiffusion;
use crate::toy::ToyBackend;
use crate::vit::VisionTransformer;

/// Root of model checkpoints.
pub const WEIGHTS_DIR_ENV: &str = "DIFFSIM_WEIGHTS_DIR";

pub const BACKEND_IDS: [&str; 6] = ["sd15", "sdxl", "clip-vit", "dinov2", "toy-self", "toy-cross"];

/// Backends by id. Construction is cheap: checkpoint-backed backends load
/// their weights on first use.
#[derive(Clone)]
pub struct Registry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    weights_dir: Option<PathBuf>,
}

impl Registry {
    pub fn new(weights_dir: Option<PathBuf>) -> Self {
        let mut r = Registry { backends: BTreeMap::new(), weights_dir: weights_dir.clone() };
        r.insert(StableDiffusion::sd15(weights_dir.clone()));
        r.insert(StableDiffusion::sdxl(weights_dir.clone()));
        r.insert(VisionTransformer::clip(weights_dir.clone()));
        r.insert(VisionTransformer::dinov2(weights_dir));
        r.insert(ToyBackend::self_attention());
        r.insert(ToyBackend::cross_attention());
        r
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
    }

    /// Process-wide registry, built from the environment on first access.
    pub fn global() -> &'static Registry {
        static GLOBAL: OnceLock<Registry> = OnceLock::new();
        GLOBAL.get_or_init(Registry::from_env)
    }

    /// Adds or replaces a backend under its own id.
    pub fn insert(&mut self, backend: impl Backend + 'static) {
        self.backends.insert(backend.id().to_string(), Arc::new(backend));
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn Backend>> {
        self.backends.get(id).ok_or_else(|| Error::UnknownBackend(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn weights_dir(&self) -> Option<&PathBuf> {
        self.weights_dir.as_ref()
    }
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .field("weights_dir", &self.weights_dir)
            .finish()
    }
}
