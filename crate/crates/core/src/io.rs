//! `DREG` volume container and JSON run reports.
//!
//! Byte layout, all little-endian, no padding:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"DREG"`                         |
//! | 4      | 4    | version, `u32` = 1                      |
//! | 8      | 1    | kind: 0 scalar, 1 vector, 2 label       |
//! | 9      | 12   | dims `nx, ny, nz` as `u32`              |
//! | 21     | 24   | spacing `sx, sy, sz` as `f64`           |
//! | 45     | ...  | payload: `f32` per voxel (scalar), 3 interleaved `f32` per voxel (vector), `u16` per voxel (label) |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{RegError, Result};
use crate::metrics::{JacobianStats, LabelVolume};
use crate::registration::{RegistrationConfig, RegistrationResult};
use crate::scalar::Real;
use crate::volume::{DeformationField, Dims, ScalarVolume, Spacing, VectorField};

pub const MAGIC: [u8; 4] = *b"DREG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 45;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum VolumeKind {
    Scalar = 0,
    Vector = 1,
    Label = 2,
}

impl VolumeKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(VolumeKind::Scalar),
            1 => Ok(VolumeKind::Vector),
            2 => Ok(VolumeKind::Label),
            other => Err(RegError::BadKind(other)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            VolumeKind::Scalar => "scalar",
            VolumeKind::Vector => "vector",
            VolumeKind::Label => "label",
        }
    }

    fn bytes_per_voxel(self) -> usize {
        match self {
            VolumeKind::Scalar => 4,
            VolumeKind::Vector => 12,
            VolumeKind::Label => 2,
        }
    }
}

/// Any decoded `DREG` file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Scalar(ScalarVolume<f32>),
    Vector(VectorField<f32>),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            AnyVolume::Scalar(_) => VolumeKind::Scalar,
            AnyVolume::Vector(_) => VolumeKind::Vector,
            AnyVolume::Label(_) => VolumeKind::Label,
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume<f32>> {
        match self {
            AnyVolume::Scalar(v) => Ok(v),
            other => Err(wrong("scalar", other.kind())),
        }
    }

    pub fn into_vector(self) -> Result<VectorField<f32>> {
        match self {
            AnyVolume::Vector(v) => Ok(v),
            other => Err(wrong("vector", other.kind())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Label(v) => Ok(v),
            other => Err(wrong("label", other.kind())),
        }
    }
}

fn wrong(expected: &'static str, found: VolumeKind) -> RegError {
    RegError::WrongKind {
        expected,
        found: found.name(),
    }
}

fn header(kind: VolumeKind, dims: Dims, spacing: Spacing) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dims.len() * kind.bytes_per_voxel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    for n in dims.as_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_scalar<T: Real>(vol: &ScalarVolume<T>) -> Vec<u8> {
    let mut out = header(VolumeKind::Scalar, vol.dims(), vol.spacing());
    for v in vol.data() {
        out.extend_from_slice(&(v.wide() as f32).to_le_bytes());
    }
    out
}

pub fn encode_vector<T: Real>(field: &VectorField<T>) -> Vec<u8> {
    let mut out = header(VolumeKind::Vector, field.dims(), field.spacing());
    for v in field.data().iter().flatten() {
        out.extend_from_slice(&(v.wide() as f32).to_le_bytes());
    }
    out
}

pub fn encode_labels(lbl: &LabelVolume) -> Vec<u8> {
    let mut out = header(VolumeKind::Label, lbl.dims(), lbl.spacing());
    for v in lbl.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<AnyVolume> {
    if bytes.len() < 4 {
        return Err(RegError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(RegError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(RegError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(RegError::BadVersion(version));
    }
    let kind = VolumeKind::from_byte(bytes[8])?;
    let dims = Dims::new(
        u32_at(bytes, 9) as usize,
        u32_at(bytes, 13) as usize,
        u32_at(bytes, 17) as usize,
    );
    let spacing = [f64_at(bytes, 21), f64_at(bytes, 29), f64_at(bytes, 37)];
    let payload = &bytes[HEADER_LEN..];
    let expected = dims
        .nx
        .checked_mul(dims.ny)
        .and_then(|n| n.checked_mul(dims.nz))
        .and_then(|n| n.checked_mul(kind.bytes_per_voxel()))
        .ok_or_else(|| RegError::invalid("dims", format!("{dims} overflows")))?;
    if payload.len() < expected {
        return Err(RegError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(RegError::TrailingBytes(payload.len() - expected));
    }
    let floats = || {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
    };
    Ok(match kind {
        VolumeKind::Scalar => AnyVolume::Scalar(ScalarVolume::new(dims, spacing, floats().collect())?),
        VolumeKind::Vector => {
            let flat: Vec<f32> = floats().collect();
            let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            AnyVolume::Vector(VectorField::new(dims, spacing, data)?)
        }
        VolumeKind::Label => {
            let labels = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            AnyVolume::Label(LabelVolume::new(dims, spacing, labels)?)
        }
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    decode(&fs::read(path)?)
}

pub fn write_scalar<T: Real>(path: impl AsRef<Path>, vol: &ScalarVolume<T>) -> Result<()> {
    Ok(fs::write(path, encode_scalar(vol))?)
}

pub fn write_vector<T: Real>(path: impl AsRef<Path>, field: &VectorField<T>) -> Result<()> {
    Ok(fs::write(path, encode_vector(field))?)
}

/// Deformations are stored as their displacement, vector kind.
pub fn write_deformation<T: Real>(path: impl AsRef<Path>, phi: &DeformationField<T>) -> Result<()> {
    write_vector(path, phi.displacement())
}

pub fn read_deformation(path: impl AsRef<Path>) -> Result<DeformationField<f32>> {
    Ok(DeformationField::from_displacement(read_volume(path)?.into_vector()?))
}

pub fn write_labels(path: impl AsRef<Path>, lbl: &LabelVolume) -> Result<()> {
    Ok(fs::write(path, encode_labels(lbl))?)
}

/// Label-wise scores and deformation statistics of one registration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dice: BTreeMap<u16, f64>,
    pub hausdorff_mm: BTreeMap<u16, f64>,
    pub jacobian: Option<JacobianStats>,
}

/// Top-level keys of a report, in output order.
pub const REPORT_KEYS: [&str; 6] = [
    "dice",
    "hausdorff_mm",
    "jacobian_pct_nonpositive",
    "runtime_seconds",
    "velocity_count",
    "config",
];

/// Round to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_numbers(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            serde_json::Number::from_f64(sig6(n.as_f64().unwrap()))
                .map(Value::Number)
                .unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_numbers).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_numbers(v))).collect()),
        other => other,
    }
}

fn label_map(m: &BTreeMap<u16, f64>) -> Value {
    Value::Object(
        m.iter()
            .map(|(k, v)| (k.to_string(), Value::from(*v)))
            .collect(),
    )
}

pub fn build_report<T: Real>(
    result: &RegistrationResult<T>,
    eval: &Evaluation,
    config: &RegistrationConfig,
) -> Result<Value> {
    let mut obj = serde_json::Map::new();
    obj.insert("dice".into(), label_map(&eval.dice));
    obj.insert("hausdorff_mm".into(), label_map(&eval.hausdorff_mm));
    obj.insert(
        "jacobian_pct_nonpositive".into(),
        eval.jacobian
            .map(|j| Value::from(j.pct_nonpositive))
            .unwrap_or(Value::Null),
    );
    obj.insert("runtime_seconds".into(), Value::from(result.elapsed_seconds));
    obj.insert("velocity_count".into(), Value::from(result.velocity_count));
    obj.insert("config".into(), serde_json::to_value(config)?);
    Ok(round_numbers(Value::Object(obj)))
}

pub fn write_report<T: Real>(
    result: &RegistrationResult<T>,
    eval: &Evaluation,
    config: &RegistrationConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let report = build_report(result, eval, config)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_scalar(&ScalarVolume::<f32>::zeros(Dims::cube(2), [1.0; 3]));
        let good = bytes.clone();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(RegError::BadMagic(m)) if &m == b"XXXX"));

        let short = &good[..good.len() - 4];
        assert!(matches!(decode(short), Err(RegError::Truncated { expected: 32, found: 28 })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(RegError::TrailingBytes(1))));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(RegError::BadVersion(2))));

        let mut k = good;
        k[8] = 9;
        assert!(matches!(decode(&k), Err(RegError::BadKind(9))));
    }

    #[test]
    fn header_layout() {
        let vol = ScalarVolume::<f32>::new(Dims::new(1, 2, 1), [1.5, 2.0, 0.5], vec![1.0, -2.0]).unwrap();
        let b = encode_scalar(&vol);
        assert_eq!(b.len(), HEADER_LEN + 8);
        assert_eq!(&b[0..4], b"DREG");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(&b[9..21], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[21..29], &1.5f64.to_le_bytes());
        assert_eq!(&b[45..49], &1.0f32.to_le_bytes());
        assert_eq!(&b[49..53], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn nan_payload_rejected() {
        let mut b = encode_scalar(&ScalarVolume::<f32>::zeros(Dims::cube(1), [1.0; 3]));
        b[45..49].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&b), Err(RegError::NonFinite(_))));
    }

    #[test]
    fn kind_conversion_errors() {
        let b = encode_labels(&LabelVolume::from_fn(Dims::cube(2), [1.0; 3], |i, _, _| i as u16));
        let any = decode(&b).unwrap();
        assert_eq!(any.kind(), VolumeKind::Label);
        assert!(matches!(any.into_scalar(), Err(RegError::WrongKind { .. })));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.23456789), 1.23457);
        assert_eq!(sig6(0.000123456789), 0.000123457);
        assert_eq!(sig6(123456789.0), 123457000.0);
        assert_eq!(sig6(0.0), 0.0);
    }
}
