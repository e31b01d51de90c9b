use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::covariance::{BucketMap, CovarianceSpec, NoiseSpace, Tail};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::sampling::Head;
use crate::training::{Temperature, TemperatureParam};

use super::tensorfile::{Tensor, TensorFile};

// Layout tensors: `variant` = [space, tail, buckets], `tau` = [mode, τ or t,
// τ_min, τ_max]. Space codes: 0 deterministic, 1 logit, 2 pre-logit,
// 3 hashed. Tail codes: 0 rank-one, 1 diagonal. Mode: 0 fixed, 1 learned.

fn vector(t: &Tensor) -> DVector<f64> {
    DVector::from_vec(t.data.clone())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn head_to_file(head: &Head) -> TensorFile {
    let mut f = TensorFile::default();
    let (space, tail, buckets) = match &head.covariance {
        None => (0.0, 0.0, 0.0),
        Some(c) => {
            let tail = match c.tail {
                Tail::RankOne => 0.0,
                Tail::Diagonal => 1.0,
            };
            match &c.space {
                NoiseSpace::Logit => (1.0, tail, 0.0),
                NoiseSpace::PreLogit => (2.0, tail, 0.0),
                NoiseSpace::Hashed(map) => (3.0, tail, map.num_buckets() as f64),
            }
        }
    };
    f.push(Tensor::row_vector("variant", &[space, tail, buckets]));
    let tau = match head.temperature {
        TemperatureParam::Fixed(tau) => [0.0, tau, 0.0, 0.0],
        TemperatureParam::Learned(t) => [1.0, t.t, t.tau_min, t.tau_max],
    };
    f.push(Tensor::row_vector("tau", &tau));
    f.push(Tensor::from_matrix("W", &head.weights));
    f.push(Tensor::row_vector("b", head.bias.as_slice()));
    if let Some(c) = &head.covariance {
        f.push(Tensor::from_matrix("J", &c.factors));
        f.push(Tensor::from_matrix("K_het", &c.scale_kernel));
        f.push(Tensor::row_vector("b_het", c.scale_bias.as_slice()));
        f.push(Tensor::from_matrix("K_diag", &c.tail_kernel));
        f.push(Tensor::row_vector("b_diag", c.tail_bias.as_slice()));
        if let NoiseSpace::Hashed(map) = &c.space {
            let ids: Vec<f64> = map.assignments().iter().map(|&b| b as f64).collect();
            f.push(Tensor::row_vector("buckets", &ids));
        }
    }
    f
}

fn code(v: f64, what: &str, max: u32) -> Result<u32> {
    if v.fract() == 0.0 && v >= 0.0 && v <= max as f64 {
        Ok(v as u32)
    } else {
        Err(bad(format!("invalid {what} code {v}")))
    }
}

pub fn head_from_file(f: &TensorFile) -> Result<Head> {
    let variant = &f.require("variant")?.data;
    let tau = &f.require("tau")?.data;
    if variant.len() != 3 || tau.len() != 4 {
        return Err(bad("malformed `variant` or `tau` tensor"));
    }
    let temperature = match code(tau[0], "temperature mode", 1)? {
        0 => TemperatureParam::Fixed(tau[1]),
        _ => TemperatureParam::Learned(Temperature::new(tau[1], tau[2], tau[3])?),
    };
    let weights = f.require("W")?.to_matrix();
    let bias = vector(f.require("b")?);
    let space = code(variant[0], "noise space", 3)?;
    let covariance = if space == 0 {
        None
    } else {
        let tail = match code(variant[1], "tail", 1)? {
            0 => Tail::RankOne,
            _ => Tail::Diagonal,
        };
        let space = match space {
            1 => NoiseSpace::Logit,
            2 => NoiseSpace::PreLogit,
            _ => {
                let ids = f
                    .require("buckets")?
                    .data
                    .iter()
                    .map(|&v| code(v, "bucket", u32::MAX).map(|b| b as usize))
                    .collect::<Result<Vec<_>>>()?;
                let h = code(variant[2], "bucket count", u32::MAX)? as usize;
                NoiseSpace::Hashed(BucketMap::from_assignments(ids, h)?)
            }
        };
        Some(CovarianceSpec {
            space,
            tail,
            factors: f.require("J")?.to_matrix(),
            scale_kernel: f.require("K_het")?.to_matrix(),
            scale_bias: vector(f.require("b_het")?),
            tail_kernel: f.require("K_diag")?.to_matrix(),
            tail_bias: vector(f.require("b_diag")?),
        })
    };
    let head = Head {
        weights,
        bias,
        covariance,
        temperature,
    };
    head.validate().map_err(|e| bad(format!("inconsistent model file: {e}")))?;
    Ok(head)
}

pub fn write_head(head: &Head, path: &Path) -> Result<()> {
    head_to_file(head).write(path)
}

pub fn read_head(path: &Path) -> Result<Head> {
    head_from_file(&TensorFile::read(path)?)
}

pub fn dataset_to_file(data: &Dataset) -> TensorFile {
    let mut f = TensorFile::default();
    f.push(Tensor::from_matrix("X", &data.features));
    f.push(Tensor::from_matrix("Y", &data.labels));
    f
}

pub fn dataset_from_file(f: &TensorFile) -> Result<Dataset> {
    let x: DMatrix<f64> = f.require("X")?.to_matrix();
    let y = f.require("Y")?.to_matrix();
    Dataset::new(x, y).map_err(|e| bad(e.to_string()))
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    dataset_to_file(data).write(path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_file(&TensorFile::read(path)?)
}
