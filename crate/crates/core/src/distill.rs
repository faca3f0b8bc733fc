//! Teacher/student distillation in feature space and the initialization
//! identity.
//!
//! The teacher is the frozen value projection, f_T(x) = Wⱽx. The student
//! predicts from explicit features of the projected keys, f_S(x) = W φ(Wᴷx),
//! and is trained on the squared output discrepancy
//!
//!   L_KD(W) = (1/N) Σᵢ ‖W φ(Wᴷxᵢ) − Wⱽxᵢ‖².
//!
//! One gradient step from W_init = 0 with step size η* gives
//!
//!   W* = (2η*/N) Σᵢ (Wⱽxᵢ) φ(Wᴷxᵢ)ᵀ,
//!
//! and choosing 2η*/N = 1/D′ — the attention partition value — makes W*
//! coincide with the implicit initialization W₀ = (1/D′) Wⱽ X_D φ(Wᴷ X_D)ᵀ
//! that the demonstration block contributes to the attention dual.
//! [`check_w0_identity`] verifies that coincidence numerically by computing
//! the two sides through different summation routes.

use crate::attention::{partition_function, AttentionWeights, TokenMatrix};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::matrix::{frobenius_norm, DenseMatrix};
use crate::scalar::Scalar;

/// Frozen teacher: the value projection applied to raw tokens.
#[derive(Debug, Clone)]
pub struct TeacherModel<T> {
    wv: DenseMatrix<T>,
}

impl<T: Scalar> TeacherModel<T> {
    pub fn new(wv: DenseMatrix<T>) -> Result<Self> {
        if !wv.is_finite() {
            return Err(Error::NonFiniteInput("teacher weights".into()));
        }
        Ok(Self { wv })
    }

    pub fn wv(&self) -> &DenseMatrix<T> {
        &self.wv
    }

    pub fn output_dim(&self) -> usize {
        self.wv.rows()
    }

    /// f_T(x) = Wⱽ x.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.wv.matvec(x)
    }

    /// Teacher outputs for every column of `tokens`.
    pub fn forward_batch(&self, tokens: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.wv.matmul(tokens)
    }
}

/// Student with trainable mixing matrix `W` over explicit features of the
/// projected keys.
#[derive(Debug, Clone)]
pub struct StudentModel<T> {
    w: DenseMatrix<T>,
    wk: DenseMatrix<T>,
    map: FeatureMap<T>,
}

impl<T: Scalar> StudentModel<T> {
    /// Builds a student. The map must have explicit features (identity or
    /// positive_random): without a concrete φ there is no `W` to train.
    pub fn new(w: DenseMatrix<T>, wk: DenseMatrix<T>, map: FeatureMap<T>) -> Result<Self> {
        let r = map.feature_dim().ok_or_else(|| {
            Error::UnsupportedMapKind(
                "student models need explicit features; exact_kernel has none".into(),
            )
        })?;
        if map.input_dim() != wk.rows() {
            return Err(Error::DimensionMismatch(format!(
                "map input_dim {} vs key dim {}",
                map.input_dim(),
                wk.rows()
            )));
        }
        if w.cols() != r {
            return Err(Error::DimensionMismatch(format!(
                "mixing matrix has {} columns, map produces {r} features",
                w.cols()
            )));
        }
        if !w.is_finite() || !wk.is_finite() {
            return Err(Error::NonFiniteInput("student weights".into()));
        }
        Ok(Self { w, wk, map })
    }

    /// Same student with the mixing matrix replaced.
    pub fn with_weights(&self, w: DenseMatrix<T>) -> Result<Self> {
        Self::new(w, self.wk.clone(), self.map.clone())
    }

    pub fn weights(&self) -> &DenseMatrix<T> {
        &self.w
    }

    pub fn wk(&self) -> &DenseMatrix<T> {
        &self.wk
    }

    pub fn map(&self) -> &FeatureMap<T> {
        &self.map
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    /// f_S(x) = W φ(Wᴷ x).
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let key = self.wk.matvec(x)?;
        let phi = self.map.apply_vec(&key)?;
        self.w.matvec(&phi)
    }

    /// Feature vectors φ(Wᴷ xᵢ) for every column of `tokens`, as columns.
    pub fn features(&self, tokens: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.map.apply(&self.wk.matmul(tokens)?)
    }
}

/// Result of a one-step distillation and its initialization match.
#[derive(Debug, Clone)]
pub struct DistillResult<T> {
    /// One-step weights W* = (2η*/N) Σᵢ (Wⱽxᵢ)φ(Wᴷxᵢ)ᵀ accumulated sample
    /// by sample.
    pub w_star: DenseMatrix<T>,
    /// Step size actually used.
    pub eta_star: T,
    /// The same weights assembled through the block-matrix route (for
    /// [`distill_one_step`]) or the partition-normalized initialization
    /// W₀ = (1/D′)WⱽX_Dφ(WᴷX_D)ᵀ (for [`check_w0_identity`]).
    pub matched_w0: DenseMatrix<T>,
    /// ‖W* − matched_w0‖_F.
    pub identity_gap: T,
}

/// Step-size policy for [`check_w0_identity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaStarPolicy<T> {
    /// η* = N / (2 D′): the choice that makes one-step distillation land
    /// exactly on the implicit initialization.
    MatchPartition,
    /// Fixed step size, for sweeps that probe the mismatch away from the
    /// matching point.
    Fixed(T),
}

/// f_T(x) = Wⱽx as a free function.
pub fn teacher_forward<T: Scalar>(teacher: &TeacherModel<T>, x: &[T]) -> Result<Vec<T>> {
    teacher.forward(x)
}

/// f_S(x) = Wφ(Wᴷx) as a free function.
pub fn student_forward<T: Scalar>(student: &StudentModel<T>, x: &[T]) -> Result<Vec<T>> {
    student.forward(x)
}

fn check_samples<T: Scalar>(samples: &DenseMatrix<T>) -> Result<usize> {
    let n = samples.cols();
    if n == 0 {
        return Err(Error::EmptyContext("no distillation samples".into()));
    }
    Ok(n)
}

/// Mean squared teacher/student output discrepancy over the sample columns.
pub fn kd_loss<T: Scalar>(
    student: &StudentModel<T>,
    teacher: &TeacherModel<T>,
    samples: &DenseMatrix<T>,
) -> Result<T> {
    let n = check_samples(samples)?;
    let phi = student.features(samples)?;
    let student_out = student.weights().matmul(&phi)?;
    let teacher_out = teacher.forward_batch(samples)?;
    let diff = student_out.sub(&teacher_out)?;
    let total: T = diff.entries().iter().map(|e| *e * *e).sum();
    Ok(total / T::of_usize(n))
}

/// Gradient of [`kd_loss`] with respect to the student's mixing matrix:
/// (2/N) Σᵢ [Wφᵢ − Wⱽxᵢ] φᵢᵀ.
pub fn kd_gradient<T: Scalar>(
    student: &StudentModel<T>,
    teacher: &TeacherModel<T>,
    samples: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let n = check_samples(samples)?;
    let phi = student.features(samples)?;
    let residual = student
        .weights()
        .matmul(&phi)?
        .sub(&teacher.forward_batch(samples)?)?;
    let coef = T::of(2.0) / T::of_usize(n);
    residual.matmul(&phi.transpose()).map(|g| g.scaled(coef))
}

/// One gradient step on the KD loss from W_init = 0:
/// W* = (2η*/N) Σᵢ (Wⱽxᵢ) φ(Wᴷxᵢ)ᵀ.
///
/// `w_star` is accumulated per sample; `matched_w0` carries the same value
/// assembled as a single block product (2η*/N)·WⱽX φ(WᴷX)ᵀ, so `identity_gap`
/// reflects pure floating-point reordering (typically ~1e-15 scale).
pub fn distill_one_step<T: Scalar>(
    teacher: &TeacherModel<T>,
    wk: &DenseMatrix<T>,
    map: &FeatureMap<T>,
    samples: &DenseMatrix<T>,
    eta_star: T,
) -> Result<DistillResult<T>> {
    if !eta_star.is_finite() || eta_star <= T::zero() {
        return Err(Error::NonPositiveLearningRate(eta_star.as_f64()));
    }
    let n = check_samples(samples)?;
    let r = map.feature_dim().ok_or_else(|| {
        Error::UnsupportedMapKind(
            "one-step distillation needs explicit features; exact_kernel has none".into(),
        )
    })?;
    let coef = T::of(2.0) * eta_star / T::of_usize(n);

    // Per-sample accumulation of rank-one terms.
    let mut w_star = DenseMatrix::zeros(teacher.output_dim(), r);
    for i in 0..n {
        let x = samples.column(i);
        let target = teacher.forward(&x)?;
        let phi = map.apply_vec(&wk.matvec(&x)?)?;
        w_star.add_outer(coef, &target, &phi)?;
    }

    // Block route: same value, different summation order.
    let phi_all = map.apply(&wk.matmul(samples)?)?;
    let matched_w0 = teacher
        .forward_batch(samples)?
        .matmul(&phi_all.transpose())?
        .scaled(coef);
    let identity_gap = frobenius_norm(&w_star.sub(&matched_w0)?);
    Ok(DistillResult {
        w_star,
        eta_star,
        matched_w0,
        identity_gap,
    })
}

/// Verifies the initialization identity: one-step distillation on the
/// demonstration block with η* = N/(2D′) must reproduce the implicit initial
/// weights W₀ = (1/D′) Wⱽ X_D φ(Wᴷ X_D)ᵀ of the attention dual.
///
/// The teacher is the attention value projection; the student's keys are the
/// attention keys with the score scale folded in, so D′ here is exactly the
/// partition value of the forward pass over the full context.
pub fn check_w0_identity<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
    map: &FeatureMap<T>,
    policy: EtaStarPolicy<T>,
) -> Result<DistillResult<T>> {
    let n = tokens.n_demonstrations();
    if n == 0 {
        return Err(Error::EmptyContext(
            "initialization identity needs at least one demonstration".into(),
        ));
    }
    let d_prime = partition_function(w, tokens)?;
    let eta_star = match policy {
        EtaStarPolicy::MatchPartition => T::of_usize(n) / (T::of(2.0) * d_prime),
        EtaStarPolicy::Fixed(eta) => eta,
    };
    let teacher = TeacherModel::new(w.wv().clone())?;
    let scaled_keys_projection = w.scaled_keys(&DenseMatrix::identity(w.embedding_dim()))?;
    let one_step = distill_one_step(
        &teacher,
        &scaled_keys_projection,
        map,
        tokens.demonstrations(),
        eta_star,
    )?;

    // Direct W₀ assembly: (1/D′) Wⱽ X_D φ(scaled keys)ᵀ.
    let phi_d = map.apply(&scaled_keys_projection.matmul(tokens.demonstrations())?)?;
    let w0 = teacher
        .forward_batch(tokens.demonstrations())?
        .matmul(&phi_d.transpose())?
        .scaled(T::one() / d_prime);
    let identity_gap = frobenius_norm(&one_step.w_star.sub(&w0)?);
    Ok(DistillResult {
        w_star: one_step.w_star,
        eta_star,
        matched_w0: w0,
        identity_gap,
    })
}
