//! Single-file container of named arrays plus a JSON header.
//!
//! Files are safetensors; the header and a `kind`/`version` pair travel in the
//! safetensors metadata block.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { shape, data: ArrayData::F64(data) }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self { shape, data: ArrayData::U8(data) }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self::f64(vec![m.nrows(), m.ncols()], m.iter().copied().collect())
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => return Err(Error::format(format!("expected a matrix, got shape {other:?}"))),
        };
        Array2::from_shape_vec((r, c), self.as_f64()?.to_vec())
            .map_err(|e| Error::format(format!("bad matrix payload: {e}")))
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::format("expected an f64 array")),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(Error::format("expected a u8 array")),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.data {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self.data {
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::U8(_) => Dtype::U8,
        }
    }

    fn from_view(view: &TensorView<'_>) -> Result<Self> {
        let raw = view.data();
        let data = match view.dtype() {
            Dtype::F64 => ArrayData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
            Dtype::F32 => ArrayData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            Dtype::U8 => ArrayData::U8(raw.to_vec()),
            other => return Err(Error::format(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self { shape: view.shape().to_vec(), data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub version: u32,
    pub header: Value,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Archive {
    pub fn new(kind: &str, version: u32, header: Value) -> Self {
        Self {
            kind: kind.to_string(),
            version,
            header,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::format(format!("archive has no array '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payloads: Vec<(String, Vec<u8>, &NamedArray)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.bytes(), a))
            .collect();
        let mut views = Vec::with_capacity(payloads.len());
        for (name, bytes, a) in &payloads {
            let v = TensorView::new(a.dtype(), a.shape.clone(), bytes)
                .map_err(|e| Error::format(format!("array '{name}': {e}")))?;
            views.push((name.clone(), v));
        }
        let mut meta = HashMap::new();
        meta.insert("kind".to_string(), self.kind.clone());
        meta.insert("version".to_string(), self.version.to_string());
        meta.insert("header".to_string(), serde_json::to_string(&self.header)?);
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::format(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::format(format!("corrupt archive: {e}")))?;
        let tensors =
            SafeTensors::deserialize(bytes).map_err(|e| Error::format(format!("corrupt archive: {e}")))?;
        let meta = metadata
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::format("archive has no metadata block"))?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::format(format!("archive metadata lacks '{k}'")))
        };
        let version = field("version")?
            .parse()
            .map_err(|_| Error::format("archive version is not an integer"))?;
        let header = serde_json::from_str(field("header")?)
            .map_err(|e| Error::format(format!("archive header is not JSON: {e}")))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in tensors.tensors() {
            arrays.insert(name, NamedArray::from_view(&view)?);
        }
        Ok(Self {
            kind: field("kind")?.clone(),
            version,
            header,
            arrays,
        })
    }

    /// Reads and checks `kind` and `version`.
    pub fn read(path: &Path, kind: &str, version: u32) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let a = Self::from_bytes(&bytes)?;
        if a.kind != kind {
            return Err(Error::format(format!(
                "{} holds a '{}' archive, expected '{kind}'",
                path.display(),
                a.kind
            )));
        }
        if a.version != version {
            return Err(Error::format(format!(
                "{} has schema version {}, this build reads version {version}",
                path.display(),
                a.version
            )));
        }
        Ok(a)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new("test", 1, json!({"hello": [1, 2]}));
        a.insert("m", NamedArray::f64(vec![2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 4.0]));
        a.insert("b", NamedArray::u8(vec![3], vec![0, 128, 255]));
        a.insert("empty", NamedArray::f64(vec![0, 3], vec![]));
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_bytes_are_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 4, 8, 20, bytes.len() - 1] {
            assert!(matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        sample().write(&p).unwrap();
        assert!(Archive::read(&p, "test", 1).is_ok());
        assert!(matches!(Archive::read(&p, "test", 2), Err(Error::Format(_))));
        assert!(matches!(Archive::read(&p, "other", 1), Err(Error::Format(_))));
    }
}
