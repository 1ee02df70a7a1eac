use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffsim_store::safetensors::SafeTensors;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix1, Ix2, Ix3, Ix4};

use crate::error::{Error, Result};

/// A view into one or more safetensors checkpoints under a name prefix.
#[derive(Clone, Debug)]
pub struct Weights {
    files: Arc<Vec<SafeTensors>>,
    prefix: String,
}

impl Weights {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_all(&[path.as_ref()])
    }

    /// Several shards searched in order.
    pub fn open_all(paths: &[&Path]) -> Result<Self> {
        let files = paths
            .iter()
            .map(|p| {
                SafeTensors::open(p).map_err(|e| Error::Weights { path: p.to_path_buf(), reason: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Weights { files: Arc::new(files), prefix: String::new() })
    }

    /// Sub-view: `w.pp("encoder").pp(3)` reads `encoder.3.*`.
    pub fn pp(&self, name: impl Display) -> Weights {
        Weights { files: self.files.clone(), prefix: self.key(&name.to_string()) }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else if name.is_empty() {
            self.prefix.clone()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn path(&self) -> PathBuf {
        self.files.first().map(|f| f.path().to_path_buf()).unwrap_or_default()
    }

    pub fn has(&self, name: &str) -> bool {
        let key = self.key(name);
        self.files.iter().any(|f| f.contains(&key))
    }

    /// True if any tensor lives under this prefix.
    pub fn has_prefix(&self) -> bool {
        let p = format!("{}.", self.prefix);
        self.files.iter().any(|f| f.names().any(|n| n.starts_with(&p)))
    }

    /// Number of consecutive children `prefix.0`, `prefix.1`, ...
    pub fn count_children(&self) -> usize {
        (0..).take_while(|i| self.pp(i).has_prefix()).count()
    }

    pub fn shape(&self, name: &str) -> Option<Vec<usize>> {
        let key = self.key(name);
        self.files.iter().find_map(|f| f.info(&key).map(|i| i.shape.clone()))
    }

    pub fn get(&self, name: &str) -> Result<ArrayD<f32>> {
        let key = self.key(name);
        let file = self.files.iter().find(|f| f.contains(&key)).ok_or_else(|| Error::Weights {
            path: self.path(),
            reason: format!("missing tensor `{key}`"),
        })?;
        file.tensor(&key).map_err(|e| Error::Weights { path: file.path().to_path_buf(), reason: e.to_string() })
    }

    pub fn malformed(&self, reason: &str) -> Error {
        Error::Weights { path: self.path(), reason: format!("{}: {reason}", self.prefix) }
    }

    fn dims<D: ndarray::Dimension>(&self, name: &str, a: ArrayD<f32>) -> Result<ndarray::Array<f32, D>> {
        let shape = a.shape().to_vec();
        a.into_dimensionality::<D>()
            .map_err(|_| self.malformed(&format!("`{name}` has unexpected shape {shape:?}")))
    }

    pub fn get1(&self, name: &str) -> Result<Array1<f32>> {
        let a = self.get(name)?;
        self.dims::<Ix1>(name, a)
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f32>> {
        let a = self.get(name)?;
        // 1×1 convolutions stored as [out, in, 1, 1] also load as matrices
        if a.ndim() == 4 && a.shape()[2] == 1 && a.shape()[3] == 1 {
            let (o, i) = (a.shape()[0], a.shape()[1]);
            return a
                .into_shape_with_order((o, i))
                .map_err(|_| self.malformed(&format!("`{name}` is not contiguous")));
        }
        self.dims::<Ix2>(name, a)
    }

    pub fn get3(&self, name: &str) -> Result<Array3<f32>> {
        let a = self.get(name)?;
        self.dims::<Ix3>(name, a)
    }

    pub fn get4(&self, name: &str) -> Result<Array4<f32>> {
        let a = self.get(name)?;
        self.dims::<Ix4>(name, a)
    }
}
