//! Softmax kernel and explicit feature maps.
//!
//! The kernel of interest is K(x, y) = exp(xᵀy). Its Mercer feature space is
//! infinite-dimensional, so explicit-feature computations use finite
//! surrogates selected by [`FeatureMapKind`]:
//!
//! - `identity`: φ(z) = z. Debug/unit-test map; the implied kernel is plain
//!   xᵀy, which keeps hand-checkable numbers.
//! - `exact_kernel`: no explicit features at all; Gram entries are served by
//!   [`softmax_kernel`] exactly. Mandatory for identity checks where any
//!   approximation error would contaminate the comparison.
//! - `positive_random`: r random frequencies ω_i ~ N(0, I_d) define
//!   φ̂(z)_i = exp(ω_iᵀz − ‖z‖²/2) / √r, an unbiased estimator:
//!   E_ω[φ̂(x)ᵀφ̂(y)] = exp(xᵀy). All features are strictly positive, so the
//!   second-moment matrix Σ_φ is well defined and invertible in practice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::rng;
use crate::scalar::Scalar;

/// Default explicit feature dimension when a config does not pin one.
pub const DEFAULT_FEATURE_DIM: usize = 1024;

/// Which feature-space surrogate a [`FeatureMap`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    Identity,
    ExactKernel,
    PositiveRandom,
}

impl FeatureMapKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMapKind::Identity => "identity",
            FeatureMapKind::ExactKernel => "exact_kernel",
            FeatureMapKind::PositiveRandom => "positive_random",
        }
    }
}

/// Serializable description of a feature map.
///
/// `feature_dim` is ignored for `identity` (features are the input itself)
/// and `exact_kernel` (no explicit features exist); `seed` only matters for
/// `positive_random`, where it fixes the frequency draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub kind: FeatureMapKind,
    #[serde(rename = "d")]
    pub input_dim: usize,
    #[serde(rename = "r", default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

impl FeatureMapSpec {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            kind: FeatureMapKind::Identity,
            input_dim,
            feature_dim: input_dim,
            seed: 0,
        }
    }

    pub fn exact_kernel(input_dim: usize) -> Self {
        Self {
            kind: FeatureMapKind::ExactKernel,
            input_dim,
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 0,
        }
    }

    pub fn positive_random(input_dim: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            kind: FeatureMapKind::PositiveRandom,
            input_dim,
            feature_dim,
            seed,
        }
    }
}

/// A built feature map. Immutable after construction, so applications are
/// pure and safe to share across threads.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    spec: FeatureMapSpec,
    /// `feature_dim x input_dim` matrix whose rows are the frequencies ω_i.
    /// Present only for `positive_random`.
    projection: Option<DenseMatrix<T>>,
}

/// Softmax kernel K(x, y) = exp(xᵀy).
pub fn softmax_kernel<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("softmax_kernel argument".into()));
    }
    Ok(dot(x, y).exp())
}

impl<T: Scalar> FeatureMap<T> {
    /// Builds the map described by `spec`. For `positive_random` this draws
    /// the `r x d` frequency matrix from `spec.seed`, row by row.
    pub fn build(spec: FeatureMapSpec) -> Result<Self> {
        if spec.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be at least 1".into()));
        }
        let projection = match spec.kind {
            FeatureMapKind::Identity | FeatureMapKind::ExactKernel => None,
            FeatureMapKind::PositiveRandom => {
                if spec.feature_dim == 0 {
                    return Err(Error::InvalidSpec(
                        "feature_dim must be at least 1 for positive_random".into(),
                    ));
                }
                let mut stream = rng::stream(spec.seed);
                Some(rng::normal_matrix(spec.feature_dim, spec.input_dim, &mut stream))
            }
        };
        Ok(Self { spec, projection })
    }

    pub fn spec(&self) -> &FeatureMapSpec {
        &self.spec
    }

    pub fn kind(&self) -> FeatureMapKind {
        self.spec.kind
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Dimension of the explicit feature vectors, if the map has any.
    pub fn feature_dim(&self) -> Option<usize> {
        match self.spec.kind {
            FeatureMapKind::Identity => Some(self.spec.input_dim),
            FeatureMapKind::ExactKernel => None,
            FeatureMapKind::PositiveRandom => Some(self.spec.feature_dim),
        }
    }

    /// The frequency matrix ω (rows ω_i), for `positive_random` maps.
    pub fn projection(&self) -> Option<&DenseMatrix<T>> {
        self.projection.as_ref()
    }

    /// Applies the map to a single token.
    pub fn apply_vec(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "token of length {} fed to a map with input_dim {}",
                z.len(),
                self.spec.input_dim
            )));
        }
        match self.spec.kind {
            FeatureMapKind::Identity => Ok(z.to_vec()),
            FeatureMapKind::ExactKernel => Err(Error::UnsupportedMapKind(
                "exact_kernel has no explicit feature vectors; use kernel_gram".into(),
            )),
            FeatureMapKind::PositiveRandom => {
                let omega = self.projection.as_ref().expect("positive_random projection");
                let half_sq = T::of(0.5) * dot(z, z);
                let scale = T::one() / T::of_usize(self.spec.feature_dim).sqrt();
                Ok((0..omega.rows())
                    .map(|i| (dot(omega.row(i), z) - half_sq).exp() * scale)
                    .collect())
            }
        }
    }

    /// Applies the map column by column: output column j is φ(x_j).
    pub fn apply(&self, tokens: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if tokens.rows() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "tokens with {} rows fed to a map with input_dim {}",
                tokens.rows(),
                self.spec.input_dim
            )));
        }
        let out_dim = self.feature_dim().ok_or_else(|| {
            Error::UnsupportedMapKind(
                "exact_kernel has no explicit feature vectors; use kernel_gram".into(),
            )
        })?;
        let mut out = DenseMatrix::zeros(out_dim, tokens.cols());
        for j in 0..tokens.cols() {
            let phi = self.apply_vec(&tokens.column(j))?;
            for (i, v) in phi.iter().enumerate() {
                out.set(i, j, *v);
            }
        }
        Ok(out)
    }

    /// Gram matrix with entries (i, j) = φ(x_i)ᵀφ(y_j), where x_i and y_j are
    /// the columns of `x` and `y`. In `exact_kernel` mode the entries are
    /// exp(x_iᵀy_j) computed directly, with no feature-space detour.
    pub fn kernel_gram(&self, x: &DenseMatrix<T>, y: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if x.rows() != self.spec.input_dim || y.rows() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "gram over tokens with {} and {} rows, input_dim {}",
                x.rows(),
                y.rows(),
                self.spec.input_dim
            )));
        }
        match self.spec.kind {
            FeatureMapKind::ExactKernel => {
                let mut gram = DenseMatrix::zeros(x.cols(), y.cols());
                for i in 0..x.cols() {
                    let xi = x.column(i);
                    for j in 0..y.cols() {
                        gram.set(i, j, softmax_kernel(&xi, &y.column(j))?);
                    }
                }
                Ok(gram)
            }
            FeatureMapKind::Identity => x.transpose().matmul(y),
            FeatureMapKind::PositiveRandom => {
                let phi_x = self.apply(x)?;
                let phi_y = self.apply(y)?;
                phi_x.transpose().matmul(&phi_y)
            }
        }
    }
}

/// Free-function form of [`FeatureMap::build`].
pub fn build_feature_map<T: Scalar>(spec: FeatureMapSpec) -> Result<FeatureMap<T>> {
    FeatureMap::build(spec)
}

/// Free-function form of [`FeatureMap::apply`].
pub fn apply_feature_map<T: Scalar>(
    map: &FeatureMap<T>,
    tokens: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    map.apply(tokens)
}

/// Free-function form of [`FeatureMap::kernel_gram`].
pub fn kernel_gram<T: Scalar>(
    map: &FeatureMap<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    map.kernel_gram(x, y)
}
