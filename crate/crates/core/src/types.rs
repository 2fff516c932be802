//! Domain values shared across the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// Subject class used as the conditioning identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "SZ")]
    Sz,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Hc, ClassLabel::Sz];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Hc => 0,
            ClassLabel::Sz => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ClassLabel::Hc),
            1 => Ok(ClassLabel::Sz),
            _ => contract_err(format!("class index {i} is not 0 (HC) or 1 (SZ)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Hc => "HC",
            ClassLabel::Sz => "SZ",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            ClassLabel::Hc => ClassLabel::Sz,
            ClassLabel::Sz => ClassLabel::Hc,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HC" => Ok(ClassLabel::Hc),
            "SZ" => Ok(ClassLabel::Sz),
            _ => Err(Error::Lookup(format!("unknown class {s:?}, expected HC or SZ"))),
        }
    }
}

/// 3D intensity volume in raster order (z-major, then y, then x), values
/// in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralVolume {
    dims: [usize; 3],
    voxels: Vec<f64>,
}

impl StructuralVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != voxels.len() {
            return contract_err(format!("volume dims {dims:?} do not match {} voxels", voxels.len()));
        }
        if let Some(v) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return contract_err(format!("voxel value {v} outside [0, 1]"));
        }
        Ok(Self { dims, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        let [_, h, w] = self.dims;
        self.voxels[(z * h + y) * w + x]
    }
}

/// Symmetric connectivity matrix with unit diagonal and entries in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FncMatrix {
    n: usize,
    values: Vec<f64>,
}

impl FncMatrix {
    /// Validates every invariant; symmetry must hold bit-exactly.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return contract_err(format!("FNC of order {n} needs {} values, got {}", n * n, values.len()));
        }
        for i in 0..n {
            if values[i * n + i] != 1.0 {
                return contract_err(format!("diagonal entry ({i},{i}) is {}", values[i * n + i]));
            }
            for j in i + 1..n {
                let (a, b) = (values[i * n + j], values[j * n + i]);
                if a != b {
                    return contract_err(format!("asymmetric entries ({i},{j})={a} vs ({j},{i})={b}"));
                }
                if !(-1.0..=1.0).contains(&a) {
                    return contract_err(format!("entry ({i},{j})={a} outside [-1, 1]"));
                }
            }
        }
        Ok(Self { n, values })
    }

    /// Builds a valid matrix from an arbitrary square buffer: (A + Aᵀ)/2,
    /// clamped to [-1, 1], unit diagonal.
    pub fn symmetrized(n: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != n * n {
            return contract_err(format!("FNC of order {n} needs {} values, got {}", n * n, raw.len()));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = (0.5 * (raw[i * n + j] + raw[j * n + i])).clamp(-1.0, 1.0);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self::new(n, values)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Symmetric n×n difference of two connectivity matrices (zero diagonal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl DiffMatrix {
    /// Entrywise `a − b`.
    pub fn between(a: &[f64], b: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n || b.len() != n * n {
            return contract_err(format!("difference of order {n} needs two buffers of {} values", n * n));
        }
        Ok(Self {
            n,
            values: a.iter().zip(b).map(|(x, y)| x - y).collect(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnc_invariants_enforced() {
        assert!(FncMatrix::new(2, vec![1.0, 0.5, 0.5, 1.0]).is_ok());
        assert!(FncMatrix::new(2, vec![1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(FncMatrix::new(2, vec![0.9, 0.5, 0.5, 1.0]).is_err());
        assert!(FncMatrix::new(2, vec![1.0, 1.5, 1.5, 1.0]).is_err());
        let s = FncMatrix::symmetrized(2, &[7.0, 0.2, 0.4, -3.0]).unwrap();
        assert_eq!(s.values(), &[1.0, 0.30000000000000004, 0.30000000000000004, 1.0]);
    }

    #[test]
    fn class_parsing() {
        assert_eq!("hc".parse::<ClassLabel>().unwrap(), ClassLabel::Hc);
        assert_eq!("SZ".parse::<ClassLabel>().unwrap(), ClassLabel::Sz);
        assert!("XX".parse::<ClassLabel>().is_err());
        assert_eq!(ClassLabel::from_index(1).unwrap(), ClassLabel::Sz);
    }

    #[test]
    fn volume_range_checked() {
        assert!(StructuralVolume::new([1, 1, 2], vec![0.0, 1.0]).is_ok());
        assert!(StructuralVolume::new([1, 1, 2], vec![0.0, 1.1]).is_err());
        assert!(StructuralVolume::new([1, 2, 2], vec![0.0, 1.0]).is_err());
    }
}
