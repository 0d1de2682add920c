//! Base-64 encoding of little-endian numeric arrays, shared by the dataset,
//! checkpoint-free interchange and latent dump formats.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32le,
    F64le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedArray {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: DType::F32le,
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: DType::F64le,
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    fn bytes(&self, width: usize) -> Result<Vec<u8>, String> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| e.to_string())?;
        let expected: usize = self.shape.iter().product::<usize>() * width;
        if bytes.len() != expected {
            return Err(format!(
                "array holds {} bytes, shape {:?} needs {expected}",
                bytes.len(),
                self.shape
            ));
        }
        Ok(bytes)
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, String> {
        if self.dtype != DType::F32le {
            return Err(format!("expected f32le, found {:?}", self.dtype));
        }
        Ok(self
            .bytes(4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_f64(&self) -> Result<Vec<f64>, String> {
        if self.dtype != DType::F64le {
            return Err(format!("expected f64le, found {:?}", self.dtype));
        }
        Ok(self
            .bytes(8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}
