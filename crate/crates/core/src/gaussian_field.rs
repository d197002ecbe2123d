//! Exactly solvable synthetic patch fields.
//!
//! A [`GaussianModel`] is a multivariate normal over `N` patches of
//! dimension `d`, parameterized by its precision matrix. Patch `p` owns
//! coordinates `p*d .. (p+1)*d`. Off-diagonal precision blocks encode the
//! conditional dependency structure, so planted structures (chain, star,
//! block) give a ground truth for everything downstream.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CollapseError, Result};
use crate::seed;

/// ln(2πe)
pub const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Independent,
    Chain,
    Star,
    Block,
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StructureKind::Independent => "independent",
            StructureKind::Chain => "chain",
            StructureKind::Star => "star",
            StructureKind::Block => "block",
        };
        f.write_str(s)
    }
}

/// Planted dependency structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub kind: StructureKind,
    pub coupling: f64,
    /// Partition of patch indices, required for [`StructureKind::Block`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Vec<usize>>>,
    /// Hub patch for [`StructureKind::Star`].
    #[serde(default)]
    pub center: usize,
}

impl StructureSpec {
    pub fn independent() -> Self {
        Self::new(StructureKind::Independent, 0.0)
    }

    pub fn chain(coupling: f64) -> Self {
        Self::new(StructureKind::Chain, coupling)
    }

    pub fn star(center: usize, coupling: f64) -> Self {
        StructureSpec {
            center,
            ..Self::new(StructureKind::Star, coupling)
        }
    }

    pub fn block(blocks: Vec<Vec<usize>>, coupling: f64) -> Self {
        StructureSpec {
            blocks: Some(blocks),
            ..Self::new(StructureKind::Block, coupling)
        }
    }

    fn new(kind: StructureKind, coupling: f64) -> Self {
        StructureSpec {
            kind,
            coupling,
            blocks: None,
            center: 0,
        }
    }

    /// Undirected edges `(i, j)` with `i < j` for `n` patches.
    pub fn edges(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        if !(self.coupling >= 0.0) || !self.coupling.is_finite() {
            return Err(CollapseError::InvalidArgument(format!(
                "coupling must be a finite value >= 0, got {}",
                self.coupling
            )));
        }
        let edges = match self.kind {
            StructureKind::Independent => Vec::new(),
            StructureKind::Chain => (1..n).map(|i| (i - 1, i)).collect(),
            StructureKind::Star => {
                if n < 2 {
                    return Err(CollapseError::InvalidArgument(
                        "star structure requires at least 2 patches".into(),
                    ));
                }
                if self.center >= n {
                    return Err(CollapseError::InvalidArgument(format!(
                        "star center {} out of range for {} patches",
                        self.center, n
                    )));
                }
                (0..n)
                    .filter(|&i| i != self.center)
                    .map(|i| (i.min(self.center), i.max(self.center)))
                    .collect()
            }
            StructureKind::Block => {
                let blocks = self.blocks.as_ref().ok_or_else(|| {
                    CollapseError::InvalidArgument("block structure requires `blocks`".into())
                })?;
                let mut seen = vec![false; n];
                for &p in blocks.iter().flatten() {
                    if p >= n {
                        return Err(CollapseError::InvalidArgument(format!(
                            "block index {p} out of range for {n} patches"
                        )));
                    }
                    if seen[p] {
                        return Err(CollapseError::InvalidArgument(format!(
                            "patch {p} appears in more than one block"
                        )));
                    }
                    seen[p] = true;
                }
                if let Some(missing) = seen.iter().position(|s| !s) {
                    return Err(CollapseError::InvalidArgument(format!(
                        "blocks do not cover patch {missing}"
                    )));
                }
                let mut edges = Vec::new();
                for block in blocks {
                    for (a, &i) in block.iter().enumerate() {
                        for &j in &block[a + 1..] {
                            edges.push((i.min(j), i.max(j)));
                        }
                    }
                }
                edges.sort_unstable();
                edges
            }
        };
        Ok(edges)
    }
}

/// Multivariate normal over `n_patches * patch_dim` coordinates.
///
/// Immutable after construction. The covariance and its Cholesky factor
/// are computed once and reused by every query.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct GaussianModel {
    n_patches: usize,
    patch_dim: usize,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    spec: Option<StructureSpec>,
    covariance: DMatrix<f64>,
    covariance_factor: DMatrix<f64>,
    model_id: String,
}

/// On-disk layout of a [`GaussianModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n_patches: usize,
    pub patch_dim: usize,
    pub mean: Vec<f64>,
    pub precision: Vec<Vec<f64>>,
    #[serde(default)]
    pub spec: Option<StructureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

impl TryFrom<ModelFile> for GaussianModel {
    type Error = CollapseError;

    fn try_from(file: ModelFile) -> Result<Self> {
        let dim = file.n_patches * file.patch_dim;
        if file.precision.len() != dim {
            return Err(CollapseError::DimensionMismatch {
                expected: dim,
                got: file.precision.len(),
            });
        }
        for row in &file.precision {
            if row.len() != dim {
                return Err(CollapseError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
        }
        let precision = DMatrix::from_fn(dim, dim, |i, j| file.precision[i][j]);
        let model = GaussianModel::new(
            file.n_patches,
            file.patch_dim,
            DVector::from_vec(file.mean),
            precision,
            file.spec,
        )?;
        if let Some(id) = file.model_id {
            if id != model.model_id {
                return Err(CollapseError::Malformed(format!(
                    "model_id {id} does not match contents ({})",
                    model.model_id
                )));
            }
        }
        Ok(model)
    }
}

impl From<GaussianModel> for ModelFile {
    fn from(model: GaussianModel) -> Self {
        ModelFile {
            n_patches: model.n_patches,
            patch_dim: model.patch_dim,
            mean: model.mean.iter().copied().collect(),
            precision: model
                .precision
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            spec: model.spec,
            model_id: Some(model.model_id),
        }
    }
}

fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn content_id(n: usize, d: usize, mean: &DVector<f64>, precision: &DMatrix<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((n as u64).to_le_bytes());
    hasher.update((d as u64).to_le_bytes());
    for v in mean.iter().chain(precision.iter()) {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl GaussianModel {
    pub fn new(
        n_patches: usize,
        patch_dim: usize,
        mean: DVector<f64>,
        precision: DMatrix<f64>,
        spec: Option<StructureSpec>,
    ) -> Result<Self> {
        if n_patches == 0 || patch_dim == 0 {
            return Err(CollapseError::InvalidArgument(
                "n_patches and patch_dim must be at least 1".into(),
            ));
        }
        let dim = n_patches * patch_dim;
        if mean.len() != dim {
            return Err(CollapseError::DimensionMismatch {
                expected: dim,
                got: mean.len(),
            });
        }
        if precision.nrows() != dim || precision.ncols() != dim {
            return Err(CollapseError::DimensionMismatch {
                expected: dim,
                got: precision.nrows().max(precision.ncols()),
            });
        }
        if mean.iter().chain(precision.iter()).any(|v| !v.is_finite()) {
            return Err(CollapseError::InvalidArgument(
                "model contains non-finite values".into(),
            ));
        }
        for i in 0..dim {
            for j in 0..i {
                if (precision[(i, j)] - precision[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(CollapseError::InvalidArgument(format!(
                        "precision is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol =
            Cholesky::new(precision.clone()).ok_or_else(|| CollapseError::NotPositiveDefinite {
                smallest_eigenvalue: smallest_eigenvalue(&precision),
            })?;
        let covariance = chol.inverse();
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let covariance_factor = Cholesky::new(covariance.clone())
            .ok_or_else(|| CollapseError::Singular("covariance factorization failed".into()))?
            .unpack();
        let model_id = content_id(n_patches, patch_dim, &mean, &precision);
        Ok(GaussianModel {
            n_patches,
            patch_dim,
            mean,
            precision,
            spec,
            covariance,
            covariance_factor,
            model_id,
        })
    }

    /// Builds a zero-mean model with identity diagonal blocks and
    /// `-coupling * I` off-diagonal blocks on every edge of `spec`.
    pub fn build(spec: &StructureSpec, n_patches: usize, patch_dim: usize) -> Result<Self> {
        if n_patches == 0 || patch_dim == 0 {
            return Err(CollapseError::InvalidArgument(
                "n_patches and patch_dim must be at least 1".into(),
            ));
        }
        let edges = spec.edges(n_patches)?;
        let dim = n_patches * patch_dim;
        let mut precision = DMatrix::identity(dim, dim);
        for (i, j) in edges {
            for k in 0..patch_dim {
                precision[(i * patch_dim + k, j * patch_dim + k)] = -spec.coupling;
                precision[(j * patch_dim + k, i * patch_dim + k)] = -spec.coupling;
            }
        }
        Self::new(
            n_patches,
            patch_dim,
            DVector::zeros(dim),
            precision,
            Some(spec.clone()),
        )
    }

    /// Random sparse SPD model. Each patch pair is coupled with
    /// probability `density`; the coupling blocks have random entries in
    /// `[-1, 1]` and the diagonal is made strictly dominant.
    pub fn random(n_patches: usize, patch_dim: usize, density: f64, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let dim = n_patches * patch_dim;
        let mut precision = DMatrix::zeros(dim, dim);
        for i in 0..n_patches {
            for j in i..n_patches {
                let coupled = i == j || rng.random::<f64>() < density;
                if !coupled {
                    continue;
                }
                for a in 0..patch_dim {
                    for b in 0..patch_dim {
                        let (r, c) = (i * patch_dim + a, j * patch_dim + b);
                        if r >= c && i == j {
                            continue;
                        }
                        let v: f64 = rng.random_range(-1.0..1.0);
                        precision[(r, c)] = v;
                        precision[(c, r)] = v;
                    }
                }
            }
        }
        for r in 0..dim {
            let off: f64 = (0..dim)
                .filter(|&c| c != r)
                .map(|c| precision[(r, c)].abs())
                .sum();
            precision[(r, r)] = off + rng.random_range(0.2..1.2);
        }
        let mean = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        Self::new(n_patches, patch_dim, mean, precision, None)
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Result<Self> {
        Self::new(
            self.n_patches,
            self.patch_dim,
            mean,
            self.precision.clone(),
            self.spec.clone(),
        )
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn dim(&self) -> usize {
        self.n_patches * self.patch_dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn spec(&self) -> Option<&StructureSpec> {
        self.spec.as_ref()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Whether the precision block between patches `i` and `j` is nonzero.
    pub fn coupled(&self, i: usize, j: usize) -> bool {
        let d = self.patch_dim;
        (0..d).any(|a| (0..d).any(|b| self.precision[(i * d + a, j * d + b)] != 0.0))
    }

    fn check_patch(&self, p: usize) -> Result<()> {
        if p >= self.n_patches {
            return Err(CollapseError::InvalidArgument(format!(
                "patch index {p} out of range for {} patches",
                self.n_patches
            )));
        }
        Ok(())
    }

    fn coords(&self, patches: &[usize]) -> Vec<usize> {
        let d = self.patch_dim;
        patches.iter().flat_map(|&p| (p * d)..(p * d + d)).collect()
    }

    fn check_query(&self, target: usize, observed: &[usize]) -> Result<()> {
        self.check_patch(target)?;
        let mut seen = BTreeSet::new();
        for &p in observed {
            self.check_patch(p)?;
            if p == target {
                return Err(CollapseError::InvalidArgument(format!(
                    "target patch {target} is in the observed set"
                )));
            }
            if !seen.insert(p) {
                return Err(CollapseError::InvalidArgument(format!(
                    "patch {p} repeated in the observed set"
                )));
            }
        }
        Ok(())
    }

    /// Draws one field from `N(mean, precision⁻¹)`.
    pub fn sample(&self, seed: u64) -> PatchField {
        let mut rng = seed::rng(seed);
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.mean + &self.covariance_factor * z;
        PatchField {
            embeddings: DMatrix::from_row_slice(self.n_patches, self.patch_dim, x.as_slice()),
            model_id: self.model_id.clone(),
            seed,
        }
    }

    /// `count` fields, field `i` drawn with `derive_seed(seed, "field/i")`.
    pub fn sample_batch(&self, count: usize, seed: u64) -> Vec<PatchField> {
        (0..count)
            .map(|i| self.sample(seed::derive_seed(seed, &format!("field/{i}"))))
            .collect()
    }

    /// Conditional covariance of `target` given `observed`, by Schur
    /// complement of the marginal covariance.
    pub fn conditional_covariance(
        &self,
        target: usize,
        observed: &[usize],
    ) -> Result<DMatrix<f64>> {
        self.check_query(target, observed)?;
        let t = self.coords(&[target]);
        let sigma_tt = self.covariance.select_rows(&t).select_columns(&t);
        if observed.is_empty() {
            return Ok(sigma_tt);
        }
        let s = self.coords(observed);
        let sigma_ss = self.covariance.select_rows(&s).select_columns(&s);
        let sigma_st = self.covariance.select_rows(&s).select_columns(&t);
        let chol = Cholesky::new(sigma_ss)
            .ok_or_else(|| CollapseError::Singular("observed covariance block".into()))?;
        let solved = chol.solve(&sigma_st);
        Ok(sigma_tt - sigma_st.transpose() * solved)
    }

    /// Differential entropy (nats) of `target` given the observed patches.
    pub fn conditional_entropy(&self, target: usize, observed: &[usize]) -> Result<f64> {
        let cov = self.conditional_covariance(target, observed)?;
        gaussian_entropy(&cov)
    }

    /// `E[e_target | e_observed = field values]`.
    pub fn conditional_mean(
        &self,
        field: &PatchField,
        target: usize,
        observed: &[usize],
    ) -> Result<DVector<f64>> {
        let predictor = ConditionalPredictor::new(self, target, observed)?;
        predictor.predict(field)
    }

    /// Joint entropy of all patches.
    pub fn joint_entropy(&self) -> f64 {
        let chol = Cholesky::new(self.precision.clone()).expect("validated at construction");
        let log_det_precision: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        0.5 * (self.dim() as f64 * LN_2PI_E - log_det_precision)
    }

    /// Per-patch conditional entropies given the observed set, with
    /// observed patches contributing 0.
    ///
    /// Uses the precision route: the unobserved coordinates given the
    /// observed ones have precision `Λ_UU`, so each unobserved patch's
    /// conditional covariance is a diagonal block of `Λ_UU⁻¹`.
    pub fn entropy_profile(&self, observed: &[bool]) -> Result<Vec<f64>> {
        if observed.len() != self.n_patches {
            return Err(CollapseError::DimensionMismatch {
                expected: self.n_patches,
                got: observed.len(),
            });
        }
        let unobserved: Vec<usize> = (0..self.n_patches).filter(|&p| !observed[p]).collect();
        let mut out = vec![0.0; self.n_patches];
        if unobserved.is_empty() {
            return Ok(out);
        }
        let u = self.coords(&unobserved);
        let lambda_uu = self.precision.select_rows(&u).select_columns(&u);
        let cov_uu = Cholesky::new(lambda_uu)
            .ok_or_else(|| CollapseError::Singular("unobserved precision block".into()))?
            .inverse();
        let d = self.patch_dim;
        for (k, &p) in unobserved.iter().enumerate() {
            let block = cov_uu.view((k * d, k * d), (d, d)).clone_owned();
            out[p] = gaussian_entropy(&block)?;
        }
        Ok(out)
    }
}

/// `½·ln((2πe)^d det Σ)` for a covariance block.
pub fn gaussian_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    let d = cov.nrows();
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| CollapseError::Singular("conditional covariance".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(0.5 * (d as f64 * LN_2PI_E + log_det))
}

/// Precomputed linear map from observed patch values to the conditional
/// mean of one target patch. Reusable across many fields.
#[derive(Clone, Debug)]
pub struct ConditionalPredictor {
    target_mean: DVector<f64>,
    observed_coords: Vec<usize>,
    observed_mean: DVector<f64>,
    /// `Σ_tS Σ_SS⁻¹`, shape `d × |S|d`.
    coef: DMatrix<f64>,
    target: usize,
    patch_dim: usize,
}

impl ConditionalPredictor {
    pub fn new(model: &GaussianModel, target: usize, observed: &[usize]) -> Result<Self> {
        model.check_query(target, observed)?;
        let t = model.coords(&[target]);
        let s = model.coords(observed);
        let target_mean = model.mean.select_rows(&t);
        let observed_mean = model.mean.select_rows(&s);
        let coef = if s.is_empty() {
            DMatrix::zeros(t.len(), 0)
        } else {
            let sigma_ss = model.covariance.select_rows(&s).select_columns(&s);
            let sigma_st = model.covariance.select_rows(&s).select_columns(&t);
            let chol = Cholesky::new(sigma_ss)
                .ok_or_else(|| CollapseError::Singular("observed covariance block".into()))?;
            chol.solve(&sigma_st).transpose()
        };
        Ok(ConditionalPredictor {
            target_mean,
            observed_coords: s,
            observed_mean,
            coef,
            target,
            patch_dim: model.patch_dim,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn predict(&self, field: &PatchField) -> Result<DVector<f64>> {
        let d = self.patch_dim;
        if field.embeddings.ncols() != d {
            return Err(CollapseError::DimensionMismatch {
                expected: d,
                got: field.embeddings.ncols(),
            });
        }
        if self.observed_coords.is_empty() {
            return Ok(self.target_mean.clone());
        }
        let values = DVector::from_iterator(
            self.observed_coords.len(),
            self.observed_coords
                .iter()
                .map(|&c| field.embeddings[(c / d, c % d)]),
        );
        Ok(&self.target_mean + &self.coef * (values - &self.observed_mean))
    }
}

/// One draw of `N` patch embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldFile", into = "FieldFile")]
pub struct PatchField {
    /// `N × d`, row `p` is patch `p`.
    pub embeddings: DMatrix<f64>,
    pub model_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldFile {
    pub model_id: String,
    pub seed: u64,
    pub embeddings: Vec<Vec<f64>>,
}

impl TryFrom<FieldFile> for PatchField {
    type Error = CollapseError;

    fn try_from(file: FieldFile) -> Result<Self> {
        let n = file.embeddings.len();
        let d = file.embeddings.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(CollapseError::Malformed("empty field".into()));
        }
        if let Some(row) = file.embeddings.iter().find(|r| r.len() != d) {
            return Err(CollapseError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        Ok(PatchField {
            embeddings: DMatrix::from_fn(n, d, |i, j| file.embeddings[i][j]),
            model_id: file.model_id,
            seed: file.seed,
        })
    }
}

impl From<PatchField> for FieldFile {
    fn from(field: PatchField) -> Self {
        FieldFile {
            model_id: field.model_id,
            seed: field.seed,
            embeddings: field
                .embeddings
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl PatchField {
    pub fn n_patches(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn patch(&self, p: usize) -> DVector<f64> {
        self.embeddings.row(p).transpose()
    }

    /// Checks shape and provenance against `model`.
    pub fn validate(&self, model: &GaussianModel) -> Result<()> {
        if self.n_patches() != model.n_patches() {
            return Err(CollapseError::DimensionMismatch {
                expected: model.n_patches(),
                got: self.n_patches(),
            });
        }
        if self.patch_dim() != model.patch_dim() {
            return Err(CollapseError::DimensionMismatch {
                expected: model.patch_dim(),
                got: self.patch_dim(),
            });
        }
        if self.model_id != model.model_id() {
            return Err(CollapseError::Malformed(format!(
                "field belongs to model {}, not {}",
                self.model_id,
                model.model_id()
            )));
        }
        Ok(())
    }
}

/// Row-major `B × (N·d)` design matrix from a batch of fields.
pub(crate) fn stack_fields(fields: &[PatchField]) -> Result<DMatrix<f64>> {
    let first = fields
        .first()
        .ok_or_else(|| CollapseError::InvalidArgument("empty field batch".into()))?;
    let (n, d) = (first.n_patches(), first.patch_dim());
    let mut out = DMatrix::zeros(fields.len(), n * d);
    for (b, f) in fields.iter().enumerate() {
        if f.n_patches() != n || f.patch_dim() != d {
            return Err(CollapseError::DimensionMismatch {
                expected: n * d,
                got: f.n_patches() * f.patch_dim(),
            });
        }
        for p in 0..n {
            for k in 0..d {
                out[(b, p * d + k)] = f.embeddings[(p, k)];
            }
        }
    }
    Ok(out)
}
