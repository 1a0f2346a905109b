//! Model checkpoint container.
//!
//! ```text
//! DECO-MODEL 1\n
//! {"architecture": {...}, "scalar": "f64", "groups": [..]}\n
//! <little-endian IEEE-754 parameters, groups in layer order>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Storable;

use super::{Architecture, ClassifierModel};

const MAGIC: &str = "DECO-MODEL 1";

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    scalar: String,
    groups: Vec<usize>,
}

pub fn write_model<T: Storable>(model: &ClassifierModel<T>) -> Vec<u8> {
    let header =
        Header { architecture: model.architecture().clone(), scalar: T::NAME.to_string(), groups: model.group_sizes() };
    let mut out = Vec::with_capacity(64 + model.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for v in model.params().iter().flatten() {
        v.write_le(&mut out);
    }
    out
}

pub fn read_model<T: Storable>(bytes: &[u8]) -> Result<ClassifierModel<T>> {
    let magic_end = MAGIC.len();
    if bytes.len() <= magic_end || &bytes[..magic_end] != MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
        return Err(Error::format(0, "missing model checkpoint magic"));
    }
    let start = magic_end + 1;
    let nl =
        bytes[start..].iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(start, "unterminated header"))?;
    let header: Header = serde_json::from_slice(&bytes[start..start + nl])
        .map_err(|e| Error::format(start, format!("bad header: {e}")))?;
    if header.scalar != T::NAME {
        return Err(Error::format(start, format!("checkpoint holds {} but {} requested", header.scalar, T::NAME)));
    }
    let expected = header.architecture.group_sizes()?;
    if expected != header.groups {
        return Err(Error::format(start, "group sizes disagree with architecture"));
    }
    let mut offset = start + nl + 1;
    let total: usize = expected.iter().sum();
    let need = offset + total * T::BYTES;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need),
            format!("payload length {} but {} expected", bytes.len() - offset, total * T::BYTES),
        ));
    }
    let mut params = Vec::with_capacity(expected.len());
    for n in expected {
        let group = (0..n)
            .map(|_| {
                let v = T::read_le(&bytes[offset..offset + T::BYTES]);
                offset += T::BYTES;
                v
            })
            .collect();
        params.push(group);
    }
    ClassifierModel::from_params(header.architecture, params)
}

pub fn save_model<T: Storable>(model: &ClassifierModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model<T: Storable>(path: impl AsRef<Path>) -> Result<ClassifierModel<T>> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture::mlp(3, &[4], 2, Activation::Relu);
        let m = ClassifierModel::<f32>::reinitialize(&arch, 3).unwrap();
        let bytes = write_model(&m);
        let back: ClassifierModel<f32> = read_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_model(&back), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let arch = Architecture::mlp(3, &[4], 2, Activation::Relu);
        let m = ClassifierModel::<f64>::reinitialize(&arch, 3).unwrap();
        let bytes = write_model(&m);
        let err = read_model::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(read_model::<f32>(&bytes).is_err());
    }
}
