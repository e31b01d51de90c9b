//! Input-dependent covariance factors for the three noise spaces.
//!
//! Every variant shares one parametrization over a `Q`-dimensional noise
//! space: a shared factor matrix `J` (R×Q) modulated per input by
//! `v(x) = K_hetᵀφ + b_het`, plus a tail `d(x)` built from
//! `K_diagᵀφ + b_diag`. The per-input covariance is
//!
//! ```text
//! RankOne:  Σ(x) = V(x)ᵀV(x) + d(x)d(x)ᵀ    V(x) = J ∘ (1 v(x)ᵀ)
//! Diagonal: Σ(x) = V(x)ᵀV(x) + diag(d(x))   d(x) = softplus(K_diagᵀφ + b_diag)
//! ```
//!
//! The noise space is the logits (`Q = K`), the pre-logits (`Q = D`), or a
//! hashed bucket space (`Q = H`). Noise reaches the logits through a
//! [`Projection`]: the identity, `W`, or the one-hot bucket matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::math::softplus;
use crate::rng::mix64;

/// Classifier family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Det,
    Het,
    HetXl,
    HetH,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Det => "DET",
            HeadKind::Het => "HET",
            HeadKind::HetXl => "HET-XL",
            HeadKind::HetH => "HET-H",
        }
    }
}

/// Head dimensions. The bucket count is only meaningful for HET-H.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub pre_logit_dim: usize,
    pub num_classes: usize,
    pub num_factors: usize,
    pub num_buckets: Option<usize>,
}

impl Dims {
    pub fn new(pre_logit_dim: usize, num_classes: usize, num_factors: usize) -> Result<Self> {
        let dims = Self {
            pre_logit_dim,
            num_classes,
            num_factors,
            num_buckets: None,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn with_buckets(mut self, num_buckets: usize) -> Result<Self> {
        self.num_buckets = Some(num_buckets);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_logit_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "pre-logit dimension and class count must be positive".into(),
            ));
        }
        if self.num_factors == 0 {
            return Err(Error::InvalidArgument("at least one factor is required".into()));
        }
        if let Some(h) = self.num_buckets {
            if h == 0 || h > self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "bucket count {h} must lie in 1..={}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Noise-space dimension for the given family.
    pub fn noise_dim(&self, kind: HeadKind) -> Result<usize> {
        match kind {
            HeadKind::Det => Ok(0),
            HeadKind::Het => Ok(self.num_classes),
            HeadKind::HetXl => Ok(self.pre_logit_dim),
            HeadKind::HetH => self
                .num_buckets
                .ok_or_else(|| Error::InvalidArgument("HET-H requires a bucket count".into())),
        }
    }
}

/// Total map from classes to hash buckets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketMap {
    buckets: Vec<usize>,
    num_buckets: usize,
}

impl BucketMap {
    pub fn from_assignments(buckets: Vec<usize>, num_buckets: usize) -> Result<Self> {
        if num_buckets == 0 {
            return Err(Error::InvalidArgument("bucket count must be positive".into()));
        }
        if let Some(&bad) = buckets.iter().find(|&&b| b >= num_buckets) {
            return Err(Error::InvalidArgument(format!(
                "bucket index {bad} out of range for {num_buckets} buckets"
            )));
        }
        Ok(Self { buckets, num_buckets })
    }

    pub fn identity(num_classes: usize) -> Self {
        Self {
            buckets: (0..num_classes).collect(),
            num_buckets: num_classes,
        }
    }

    pub fn bucket(&self, class: usize) -> usize {
        self.buckets[class]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.buckets
    }

    pub fn num_classes(&self) -> usize {
        self.buckets.len()
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_buckets];
        for &b in &self.buckets {
            counts[b] += 1;
        }
        counts
    }

    /// One-hot matrix `H ∈ {0,1}^{H×K}` with `H[h(k), k] = 1`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.num_buckets, self.buckets.len());
        for (k, &b) in self.buckets.iter().enumerate() {
            m[(b, k)] = 1.0;
        }
        m
    }
}

/// Deterministic class-to-bucket hash, reproducible from `(K, H, seed)`.
pub fn hash_bucket_map(num_classes: usize, num_buckets: usize, seed: u64) -> Result<BucketMap> {
    if num_buckets == 0 {
        return Err(Error::InvalidArgument("bucket count must be positive".into()));
    }
    if num_buckets > num_classes {
        return Err(Error::InvalidArgument(format!(
            "bucket count {num_buckets} exceeds class count {num_classes}"
        )));
    }
    let salt = mix64(seed ^ 0xD1B5_4A32_D192_ED03);
    let buckets = (0..num_classes as u64)
        .map(|k| (mix64(k ^ salt) % num_buckets as u64) as usize)
        .collect();
    Ok(BucketMap { buckets, num_buckets })
}

/// Where the Gaussian noise is injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpace {
    Logit,
    PreLogit,
    Hashed(BucketMap),
}

impl NoiseSpace {
    pub fn kind(&self) -> HeadKind {
        match self {
            NoiseSpace::Logit => HeadKind::Het,
            NoiseSpace::PreLogit => HeadKind::HetXl,
            NoiseSpace::Hashed(_) => HeadKind::HetH,
        }
    }
}

/// Covariance completion added to the low-rank part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    RankOne,
    Diagonal,
}

/// Trainable parameters of Σ(x).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub space: NoiseSpace,
    pub tail: Tail,
    /// `J`, R×Q.
    pub factors: DMatrix<f64>,
    /// `K_het`, D×Q.
    pub scale_kernel: DMatrix<f64>,
    /// `b_het`, Q.
    pub scale_bias: DVector<f64>,
    /// `K_diag`, D×Q.
    pub tail_kernel: DMatrix<f64>,
    /// `b_diag`, Q.
    pub tail_bias: DVector<f64>,
}

impl CovarianceSpec {
    /// All-zero parameters of the right shapes.
    pub fn zeros(space: NoiseSpace, tail: Tail, pre_logit_dim: usize, noise_dim: usize, num_factors: usize) -> Self {
        Self {
            space,
            tail,
            factors: DMatrix::zeros(num_factors, noise_dim),
            scale_kernel: DMatrix::zeros(pre_logit_dim, noise_dim),
            scale_bias: DVector::zeros(noise_dim),
            tail_kernel: DMatrix::zeros(pre_logit_dim, noise_dim),
            tail_bias: DVector::zeros(noise_dim),
        }
    }

    pub fn num_factors(&self) -> usize {
        self.factors.nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.factors.ncols()
    }

    pub fn pre_logit_dim(&self) -> usize {
        self.scale_kernel.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.num_factors();
        let q = self.noise_dim();
        let d = self.pre_logit_dim();
        if r == 0 {
            return Err(Error::InvalidArgument("at least one factor is required".into()));
        }
        if q == 0 || d == 0 {
            return Err(Error::InvalidArgument("empty covariance dimensions".into()));
        }
        dim_check(self.scale_kernel.ncols() == q, || {
            format!("K_het has {} columns, expected {q}", self.scale_kernel.ncols())
        })?;
        dim_check(self.tail_kernel.shape() == (d, q), || {
            format!("K_diag is {:?}, expected ({d}, {q})", self.tail_kernel.shape())
        })?;
        dim_check(self.scale_bias.len() == q && self.tail_bias.len() == q, || {
            format!("bias vectors must have length {q}")
        })?;
        if let NoiseSpace::Hashed(map) = &self.space {
            dim_check(map.num_buckets() == q, || {
                format!("bucket map has {} buckets, noise dim is {q}", map.num_buckets())
            })?;
        }
        Ok(())
    }
}

/// Per-input factorization of Σ(x).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    pub tail: Tail,
    /// `V(x) = J ∘ (1 v(x)ᵀ)`, R×Q.
    pub factors: DMatrix<f64>,
    /// `d(x)`, Q. Strictly positive for the diagonal tail.
    pub tail_vector: DVector<f64>,
    /// `v(x)`, Q.
    pub scale: DVector<f64>,
}

impl FactorMatrix {
    /// `C(x) = [V(x); d(x)ᵀ]`, the (R+1)×Q matrix with `CᵀC = Σ` for the rank-one
    /// tail. For the diagonal tail the last row holds `√d`, which only matches
    /// the diagonal of Σ, not Σ itself.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (r, q) = self.factors.shape();
        let mut c = DMatrix::zeros(r + 1, q);
        c.rows_mut(0, r).copy_from(&self.factors);
        for j in 0..q {
            c[(r, j)] = match self.tail {
                Tail::RankOne => self.tail_vector[j],
                Tail::Diagonal => self.tail_vector[j].sqrt(),
            };
        }
        c
    }
}

/// `kernelᵀ·phi + bias`.
pub fn affine_transform(kernel: &DMatrix<f64>, bias: &DVector<f64>, phi: &DVector<f64>) -> Result<DVector<f64>> {
    dim_check(kernel.nrows() == phi.len(), || {
        format!("kernel has {} rows, input has length {}", kernel.nrows(), phi.len())
    })?;
    dim_check(kernel.ncols() == bias.len(), || {
        format!("kernel has {} columns, bias has length {}", kernel.ncols(), bias.len())
    })?;
    Ok(kernel.tr_mul(phi) + bias)
}

pub fn factor_matrix(spec: &CovarianceSpec, phi: &DVector<f64>) -> Result<FactorMatrix> {
    spec.validate()?;
    let scale = affine_transform(&spec.scale_kernel, &spec.scale_bias, phi)?;
    let mut tail_vector = affine_transform(&spec.tail_kernel, &spec.tail_bias, phi)?;
    if spec.tail == Tail::Diagonal {
        tail_vector.apply(|x| *x = softplus(*x));
    }
    let mut factors = spec.factors.clone();
    for (j, mut col) in factors.column_iter_mut().enumerate() {
        col *= scale[j];
    }
    Ok(FactorMatrix {
        tail: spec.tail,
        factors,
        tail_vector,
        scale,
    })
}

/// Dense Q×Q covariance. Only for small Q.
pub fn covariance_dense(spec: &CovarianceSpec, phi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let fm = factor_matrix(spec, phi)?;
    let mut sigma = fm.factors.tr_mul(&fm.factors);
    let d = &fm.tail_vector;
    match fm.tail {
        Tail::RankOne => sigma += d * d.transpose(),
        Tail::Diagonal => {
            for j in 0..d.len() {
                sigma[(j, j)] += d[j];
            }
        }
    }
    Ok(sigma)
}

/// Linear map from the noise space to the logits.
#[derive(Debug, Clone, Copy)]
pub enum Projection<'a> {
    /// Noise already lives in logit space.
    Identity,
    /// Dense Q×K matrix: `W` for pre-logit noise, or any explicit projection.
    Dense(&'a DMatrix<f64>),
    /// One-hot bucket matrix applied through indexing.
    Buckets(&'a BucketMap),
}

impl<'a> Projection<'a> {
    pub fn for_space(space: &'a NoiseSpace, weights: &'a DMatrix<f64>) -> Self {
        match space {
            NoiseSpace::Logit => Projection::Identity,
            NoiseSpace::PreLogit => Projection::Dense(weights),
            NoiseSpace::Hashed(map) => Projection::Buckets(map),
        }
    }

    pub fn output_dim(&self, noise_dim: usize) -> usize {
        match self {
            Projection::Identity => noise_dim,
            Projection::Dense(m) => m.ncols(),
            Projection::Buckets(map) => map.num_classes(),
        }
    }

    /// `rows·P` for a rows×Q matrix.
    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Projection::Identity => rows.clone(),
            Projection::Dense(m) => rows * *m,
            Projection::Buckets(map) => {
                let k = map.num_classes();
                DMatrix::from_fn(rows.nrows(), k, |i, j| rows[(i, map.bucket(j))])
            }
        }
    }

    /// Adjoint of [`apply_rows`](Self::apply_rows): `grad·Pᵀ` for a rows×K matrix.
    pub fn adjoint_rows(&self, grad: &DMatrix<f64>, noise_dim: usize) -> DMatrix<f64> {
        match self {
            Projection::Identity => grad.clone(),
            Projection::Dense(m) => grad * m.transpose(),
            Projection::Buckets(map) => {
                let mut out = DMatrix::zeros(grad.nrows(), noise_dim);
                for j in 0..map.num_classes() {
                    let b = map.bucket(j);
                    for i in 0..grad.nrows() {
                        out[(i, b)] += grad[(i, j)];
                    }
                }
                out
            }
        }
    }

    /// `Pᵀ·v` for a Q-vector.
    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Projection::Identity => v.clone(),
            Projection::Dense(m) => m.tr_mul(v),
            Projection::Buckets(map) => DVector::from_fn(map.num_classes(), |j, _| v[map.bucket(j)]),
        }
    }

    /// Entries `Σ_q d_q P_qj²`: the logit variances of a diagonal covariance.
    pub fn weighted_square_columns(&self, d: &DVector<f64>) -> DVector<f64> {
        match self {
            Projection::Identity => d.clone(),
            Projection::Dense(m) => {
                DVector::from_fn(m.ncols(), |j, _| (0..m.nrows()).map(|q| d[q] * m[(q, j)] * m[(q, j)]).sum())
            }
            Projection::Buckets(map) => DVector::from_fn(map.num_classes(), |j, _| d[map.bucket(j)]),
        }
    }
}

/// Diagonal of the logit-space covariance, `s_j² = ‖C(x) P_j‖²`.
pub fn logit_variances(spec: &CovarianceSpec, phi: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DVector<f64>> {
    let fm = factor_matrix(spec, phi)?;
    if spec.space == NoiseSpace::PreLogit {
        dim_check(weights.nrows() == spec.noise_dim(), || {
            format!("W has {} rows, noise dim is {}", weights.nrows(), spec.noise_dim())
        })?;
    }
    let proj = Projection::for_space(&spec.space, weights);
    Ok(variances_from_factors(&fm, proj))
}

pub(crate) fn variances_from_factors(fm: &FactorMatrix, proj: Projection<'_>) -> DVector<f64> {
    let u = proj.apply_rows(&fm.factors);
    let mut s2 = DVector::from_fn(u.ncols(), |j, _| u.column(j).norm_squared());
    match fm.tail {
        Tail::RankOne => {
            let t = proj.apply_vec(&fm.tail_vector);
            s2 += t.component_mul(&t);
        }
        Tail::Diagonal => s2 += proj.weighted_square_columns(&fm.tail_vector),
    }
    s2
}

/// Dense logit covariance `PᵀΣP`. Only for small instances.
pub fn logit_covariance_dense(spec: &CovarianceSpec, phi: &DVector<f64>, weights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sigma = covariance_dense(spec, phi)?;
    Ok(match &spec.space {
        NoiseSpace::Logit => sigma,
        NoiseSpace::PreLogit => weights.transpose() * sigma * weights,
        NoiseSpace::Hashed(map) => {
            let h = map.to_matrix();
            h.transpose() * sigma * h
        }
    })
}

/// Extra parameters over a deterministic head with the same `W`.
///
/// HET: `2DK + KR`, HET-XL: `2D² + DR`, HET-H: `2DH + HR`; `include_bias` adds
/// the two Q-dimensional bias vectors.
pub fn extra_param_count(kind: HeadKind, dims: &Dims, include_bias: bool) -> Result<u64> {
    dims.validate()?;
    if kind == HeadKind::Det {
        return Ok(0);
    }
    let d = dims.pre_logit_dim as u64;
    let r = dims.num_factors as u64;
    let q = dims.noise_dim(kind)? as u64;
    let bias = if include_bias { 2 * q } else { 0 };
    Ok(2 * d * q + q * r + bias)
}

/// JSON document for a [`CovarianceSpec`]; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpecDoc {
    pub variant: String,
    pub tail: Tail,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<Vec<usize>>,
    #[serde(rename = "J")]
    pub factors: Vec<f64>,
    #[serde(rename = "K_het")]
    pub scale_kernel: Vec<f64>,
    #[serde(rename = "b_het")]
    pub scale_bias: Vec<f64>,
    #[serde(rename = "K_diag")]
    pub tail_kernel: Vec<f64>,
    #[serde(rename = "b_diag")]
    pub tail_bias: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], name: &str) -> Result<DMatrix<f64>> {
    dim_check(data.len() == rows * cols, || {
        format!("{name} has {} entries, expected {rows}×{cols}", data.len())
    })?;
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl From<&CovarianceSpec> for CovarianceSpecDoc {
    fn from(spec: &CovarianceSpec) -> Self {
        let (variant, buckets) = match &spec.space {
            NoiseSpace::Logit => ("logit", None),
            NoiseSpace::PreLogit => ("pre_logit", None),
            NoiseSpace::Hashed(map) => ("hashed", Some(map.assignments().to_vec())),
        };
        Self {
            variant: variant.into(),
            tail: spec.tail,
            r: spec.num_factors(),
            q: spec.noise_dim(),
            d: spec.pre_logit_dim(),
            buckets,
            factors: row_major(&spec.factors),
            scale_kernel: row_major(&spec.scale_kernel),
            scale_bias: spec.scale_bias.as_slice().to_vec(),
            tail_kernel: row_major(&spec.tail_kernel),
            tail_bias: spec.tail_bias.as_slice().to_vec(),
        }
    }
}

impl TryFrom<CovarianceSpecDoc> for CovarianceSpec {
    type Error = Error;

    fn try_from(doc: CovarianceSpecDoc) -> Result<Self> {
        let space = match doc.variant.as_str() {
            "logit" => NoiseSpace::Logit,
            "pre_logit" => NoiseSpace::PreLogit,
            "hashed" => {
                let buckets = doc
                    .buckets
                    .clone()
                    .ok_or_else(|| Error::Format("hashed variant requires `buckets`".into()))?;
                NoiseSpace::Hashed(BucketMap::from_assignments(buckets, doc.q)?)
            }
            other => return Err(Error::Format(format!("unknown variant `{other}`"))),
        };
        let spec = CovarianceSpec {
            space,
            tail: doc.tail,
            factors: from_row_major(doc.r, doc.q, &doc.factors, "J")?,
            scale_kernel: from_row_major(doc.d, doc.q, &doc.scale_kernel, "K_het")?,
            scale_bias: DVector::from_vec(doc.scale_bias),
            tail_kernel: from_row_major(doc.d, doc.q, &doc.tail_kernel, "K_diag")?,
            tail_bias: DVector::from_vec(doc.tail_bias),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl CovarianceSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CovarianceSpecDoc::from(self)).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CovarianceSpecDoc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        doc.try_into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn rank_one_spec(q: usize, r: usize, d: usize) -> CovarianceSpec {
        CovarianceSpec::zeros(NoiseSpace::Logit, Tail::RankOne, d, q, r)
    }

    #[test]
    fn affine_identity_kernel() {
        let out = affine_transform(&DMatrix::identity(2, 2), &dvector![0.0, 0.0], &dvector![3.0, -1.0]).unwrap();
        assert_eq!(out, dvector![3.0, -1.0]);
    }

    #[test]
    fn affine_zero_kernel_returns_bias() {
        let out = affine_transform(&DMatrix::zeros(2, 2), &dvector![1.0, 2.0], &dvector![7.0, -9.0]).unwrap();
        assert_eq!(out, dvector![1.0, 2.0]);
    }

    #[test]
    fn affine_hand_product() {
        // kernelᵀ·(1,1) with kernel = [[1,2],[0,1]] gives (1, 3).
        let out = affine_transform(&dmatrix![1.0, 2.0; 0.0, 1.0], &dvector![0.0, 0.0], &dvector![1.0, 1.0]).unwrap();
        assert_eq!(out, dvector![1.0, 3.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let err = affine_transform(&DMatrix::zeros(3, 2), &dvector![0.0, 0.0], &dvector![1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn factor_matrix_zero_factors() {
        let mut spec = rank_one_spec(2, 3, 2);
        spec.tail_bias = dvector![1.0, 1.0];
        let c = factor_matrix(&spec, &dvector![0.3, -2.0]).unwrap().stacked();
        assert_eq!(c.nrows(), 4);
        assert!(c.rows(0, 3).iter().all(|&x| x == 0.0));
        assert_eq!(c.row(3).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn factor_matrix_constant_scale_copies_j() {
        let mut spec = rank_one_spec(3, 2, 2);
        spec.factors = dmatrix![1.0, -2.0, 0.5; 3.0, 0.25, -1.0];
        spec.scale_bias = DVector::from_element(3, 1.0);
        let fm = factor_matrix(&spec, &dvector![5.0, -5.0]).unwrap();
        assert_eq!(fm.factors, spec.factors);
    }

    #[test]
    fn factor_matrix_hand_case() {
        // J=[[1,2]], v=(3,4), d=(5,6) → C=[[3,8],[5,6]].
        let mut spec = rank_one_spec(2, 1, 1);
        spec.factors = dmatrix![1.0, 2.0];
        spec.scale_bias = dvector![3.0, 4.0];
        spec.tail_bias = dvector![5.0, 6.0];
        let c = factor_matrix(&spec, &dvector![0.0]).unwrap().stacked();
        assert_eq!(c, dmatrix![3.0, 8.0; 5.0, 6.0]);
    }

    #[test]
    fn diagonal_tail_is_positive() {
        let mut spec = CovarianceSpec::zeros(NoiseSpace::Logit, Tail::Diagonal, 1, 3, 1);
        spec.tail_bias = dvector![-50.0, 0.0, 3.0];
        let fm = factor_matrix(&spec, &dvector![0.0]).unwrap();
        assert!(fm.tail_vector.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn dense_pure_rank_one_and_pure_diagonal() {
        let mut spec = rank_one_spec(2, 1, 1);
        spec.tail_bias = dvector![1.0, 2.0];
        assert_eq!(covariance_dense(&spec, &dvector![0.0]).unwrap(), dmatrix![1.0, 2.0; 2.0, 4.0]);

        // softplus⁻¹ so that d = (1, 2) exactly up to rounding.
        let mut diag = CovarianceSpec::zeros(NoiseSpace::Logit, Tail::Diagonal, 1, 2, 1);
        diag.tail_bias = dvector![f64::exp_m1(1.0).ln(), f64::exp_m1(2.0).ln()];
        let sigma = covariance_dense(&diag, &dvector![0.0]).unwrap();
        assert!((sigma[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sigma[(1, 1)] - 2.0).abs() < 1e-12);
        assert_eq!(sigma[(0, 1)], 0.0);
    }

    #[test]
    fn zero_spec_has_zero_variances() {
        let spec = CovarianceSpec::zeros(NoiseSpace::PreLogit, Tail::RankOne, 3, 3, 2);
        let s2 = logit_variances(&spec, &dvector![1.0, 2.0, 3.0], &DMatrix::from_element(3, 5, 0.7)).unwrap();
        assert!(s2.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_zero_factors() {
        let spec = CovarianceSpec::zeros(NoiseSpace::Logit, Tail::RankOne, 2, 2, 0);
        assert!(matches!(spec.validate(), Err(Error::InvalidArgument(_))));
        assert!(Dims::new(2, 2, 0).is_err());
    }

    #[test]
    fn bucket_map_pigeonhole_and_determinism() {
        let map = hash_bucket_map(4, 2, 11).unwrap();
        assert!(map.occupancy().iter().any(|&c| c >= 2));
        assert_eq!(map, hash_bucket_map(4, 2, 11).unwrap());
        assert!(hash_bucket_map(4, 0, 11).is_err());
        assert!(hash_bucket_map(4, 5, 11).is_err());
    }

    #[test]
    fn param_counts_unit_dims() {
        let dims = Dims::new(1, 1, 1).unwrap();
        assert_eq!(extra_param_count(HeadKind::Het, &dims, false).unwrap(), 3);
        assert_eq!(extra_param_count(HeadKind::HetXl, &dims, false).unwrap(), 3);
        assert_eq!(extra_param_count(HeadKind::Het, &dims, true).unwrap(), 5);
        assert_eq!(extra_param_count(HeadKind::Det, &dims, true).unwrap(), 0);
    }

    #[test]
    fn param_counts_large_dims() {
        let imagenet = Dims::new(2048, 21843, 50).unwrap();
        assert_eq!(extra_param_count(HeadKind::Het, &imagenet, false).unwrap(), 90_561_078);
        assert_eq!(extra_param_count(HeadKind::HetXl, &imagenet, false).unwrap(), 8_491_008);
        let jft = Dims::new(1024, 29593, 50).unwrap();
        // 2·1024·29593 + 29593·50
        assert_eq!(extra_param_count(HeadKind::Het, &jft, false).unwrap(), 62_086_114);
        assert_eq!(extra_param_count(HeadKind::HetXl, &jft, false).unwrap(), 2_148_352);
        let hashed = imagenet.with_buckets(2048).unwrap();
        assert_eq!(
            extra_param_count(HeadKind::HetH, &hashed, false).unwrap(),
            extra_param_count(HeadKind::HetXl, &imagenet, false).unwrap()
        );
    }

    #[test]
    fn json_round_trip() {
        let mut spec = CovarianceSpec::zeros(
            NoiseSpace::Hashed(hash_bucket_map(5, 3, 1).unwrap()),
            Tail::Diagonal,
            2,
            3,
            2,
        );
        spec.factors = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0];
        spec.scale_kernel[(1, 2)] = -0.5;
        let back = CovarianceSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        let doc: serde_json::Value = serde_json::from_str(&spec.to_json()).unwrap();
        assert_eq!(doc["J"][1], 2.0);
    }
}
