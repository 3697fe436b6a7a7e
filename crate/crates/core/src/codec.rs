//! Compact JSON encodings for real-valued payloads.
//!
//! Vectors travel as base64 strings of little-endian `f32` values, so a
//! record decodes to exactly the bits that were written. Matrices are lists
//! of such rows; checkpoint tensors carry an explicit `[rows, cols]` shape.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Schema(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Schema(format!(
            "payload of {} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// A feature vector stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVec(pub Vec<f32>);

impl FeatureVec {
    pub fn from_f64(values: &[f64]) -> Self {
        FeatureVec(values.iter().map(|&v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Serialize for FeatureVec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f32(&self.0))
    }
}

impl<'de> Deserialize<'de> for FeatureVec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        decode_f32(&text).map(FeatureVec).map_err(D::Error::custom)
    }
}

/// Row-major matrix of feature vectors.
pub type FeatureMatrix = Vec<FeatureVec>;

pub fn matrix_to_array(rows: &[FeatureVec], cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.0.iter().enumerate().take(cols) {
            out[[i, j]] = f64::from(v);
        }
    }
    out
}

/// Checkpoint tensor: explicit shape plus base64 `f32` payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorPayload {
    pub shape: [usize; 2],
    pub data: String,
}

impl TensorPayload {
    pub fn from_array(a: &Array2<f64>) -> Self {
        let values: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        TensorPayload {
            shape: [a.nrows(), a.ncols()],
            data: encode_f32(&values),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let values = decode_f32(&self.data)?;
        let [r, c] = self.shape;
        if values.len() != r * c {
            return Err(Error::dim("tensor payload", r * c, values.len()));
        }
        Array2::from_shape_vec((r, c), values.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_ragged_payload() {
        let text = STANDARD.encode([1u8, 2, 3]);
        assert!(matches!(decode_f32(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn known_encoding() {
        // 1.0f32 little-endian is 00 00 80 3f
        assert_eq!(encode_f32(&[1.0]), "AACAPw==");
    }

    proptest! {
        #[test]
        fn feature_vec_roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64)) {
            let v = FeatureVec(values);
            let json = serde_json::to_string(&v).unwrap();
            let back: FeatureVec = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(
                v.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                back.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
