//! Monte-Carlo capacity estimates and the finite-sample deviation bound for
//! distilled students.
//!
//! The linear dual class { x -> W phi(W_K x) : ||W||_F <= B } has empirical
//! Rademacher complexity R_lin = (B/N) E_sigma ||Σᵢ sigma_i phi(W_K x_i)||,
//! estimated here by averaging over independent sign vectors and bounded by
//! B·C/sqrt(N) with C = max_i ||phi(W_K x_i)||.  The squared-loss class
//! l(W, x) = ||f_T(x) - W phi(W_K x)||^2 composes a 2(D_T + BC)-Lipschitz
//! scalar map with the linear class, so its complexity obeys
//! R_loss <= 2(D_T + BC) R_lin.
//!
//! [`estimate_rademacher_loss_class`] lower-estimates R_loss by projected
//! gradient ascent over the Frobenius ball; because ascent can only
//! under-shoot the true supremum, a contraction-check failure falsifies the
//! implementation rather than the inequality.
//!
//! [`generalization_bound_rhs`] assembles the deviation bound L(W) <=
//! L_hat(W) + 4BC(D_T + BC)/sqrt(n) + 3(D_T + BC)² sqrt(ln(2/delta) / (2n)),
//! and [`estimate_sup_gap`] resamples training sets to place the realized
//! uniform deviation sup over ||W|| <= B of (L(W) - L_hat(W)) against the
//! bounded-difference tail term.

use crate::distill::{StudentModel, TeacherModel};
use crate::error::{Error, Result};
use crate::matrix::{frobenius_norm, vector_norm, DenseMatrix};
use crate::rng::{derive_seed, normal_matrix, rademacher_signs, stream};
use crate::scalar::Scalar;

/// Minimum number of Rademacher sign draws for a reportable estimate.
pub const MIN_SIGN_DRAWS: usize = 100;

/// Minimum number of resampled training sets for a tail-fraction estimate.
pub const MIN_RESAMPLES: usize = 30;

/// Default number of projected-gradient-ascent steps.
pub const DEFAULT_ASCENT_STEPS: usize = 50;

/// Default held-out set size as a multiple of the training-set size.
pub const DEFAULT_HELDOUT_FACTOR: usize = 50;

/// Default confidence parameter.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Ascent step size as a fraction of the Frobenius radius B.
const ASCENT_STEP_FRACTION: f64 = 0.1;

/// How a norm cap was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstantSource {
    /// Stated up front as part of the experiment configuration.
    Declared,
    /// Maximum actually observed over the referenced sample set.
    Measured,
    /// Pointwise maximum of a declared cap and a measured maximum.
    MaxOfBoth,
}

/// A single norm cap together with its provenance.
#[derive(Clone, Copy, Debug)]
pub struct BoundConstant<T> {
    pub value: T,
    pub source: ConstantSource,
}

impl<T: Scalar> BoundConstant<T> {
    pub fn declared(value: T) -> Self {
        Self {
            value,
            source: ConstantSource::Declared,
        }
    }

    pub fn measured(value: T) -> Self {
        Self {
            value,
            source: ConstantSource::Measured,
        }
    }

    /// Combines a declared cap with a measured maximum; the larger wins, so
    /// the resulting constant is valid for both readings.
    pub fn max_of(declared: T, measured: T) -> Self {
        Self {
            value: declared.max(measured),
            source: ConstantSource::MaxOfBoth,
        }
    }
}

/// Norm caps entering the deviation bound: B bounds ||W||_F, C bounds the
/// feature norm ||phi(W_K x)||, and D_T bounds the teacher output norm.
#[derive(Clone, Copy, Debug)]
pub struct NormBudget<T> {
    weight_cap: BoundConstant<T>,
    feature_cap: BoundConstant<T>,
    teacher_cap: BoundConstant<T>,
}

impl<T: Scalar> NormBudget<T> {
    pub fn new(
        weight_cap: BoundConstant<T>,
        feature_cap: BoundConstant<T>,
        teacher_cap: BoundConstant<T>,
    ) -> Result<Self> {
        for (name, cap) in [
            ("weight cap B", &weight_cap),
            ("feature cap C", &feature_cap),
            ("teacher cap D_T", &teacher_cap),
        ] {
            let v = cap.value;
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self {
            weight_cap,
            feature_cap,
            teacher_cap,
        })
    }

    /// Budget with all three caps declared.
    pub fn declared(b: T, c: T, d_t: T) -> Result<Self> {
        Self::new(
            BoundConstant::declared(b),
            BoundConstant::declared(c),
            BoundConstant::declared(d_t),
        )
    }

    pub fn weight_cap(&self) -> BoundConstant<T> {
        self.weight_cap
    }

    pub fn feature_cap(&self) -> BoundConstant<T> {
        self.feature_cap
    }

    pub fn teacher_cap(&self) -> BoundConstant<T> {
        self.teacher_cap
    }

    pub fn b(&self) -> T {
        self.weight_cap.value
    }

    pub fn c(&self) -> T {
        self.feature_cap.value
    }

    pub fn d_t(&self) -> T {
        self.teacher_cap.value
    }

    /// Contraction radius D_T + B*C (the loss is 2*radius-Lipschitz in the
    /// student output on the admissible set).
    pub fn contraction_radius(&self) -> T {
        self.d_t() + self.b() * self.c()
    }

    /// Complexity term 4BC(D_T + BC)/sqrt(n).
    pub fn complexity_term(&self, n: usize) -> Result<T> {
        check_sample_count(n)?;
        let coef = T::of(4.0) * self.b() * self.c() * self.contraction_radius();
        Ok(coef / T::of_usize(n).sqrt())
    }

    /// McDiarmid tail term 3(D_T + BC)^2 sqrt(ln(2/delta)/(2n)).
    pub fn tail_term(&self, n: usize, delta: f64) -> Result<T> {
        check_sample_count(n)?;
        check_delta(delta)?;
        let radius = self.contraction_radius();
        let inside = T::of((2.0 / delta).ln()) / (T::of(2.0) * T::of_usize(n));
        Ok(T::of(3.0) * radius * radius * inside.sqrt())
    }
}

/// Assembled deviation bound.  `rhs` is by construction the exact sum of the
/// three component fields; `lhs`/`violated` are populated once a population
/// risk has been observed.
#[derive(Clone, Debug)]
pub struct BoundReport<T> {
    pub empirical_risk: T,
    pub complexity_term: T,
    pub tail_term: T,
    pub rhs: T,
    pub lhs: Option<T>,
    pub violated: Option<bool>,
    pub n: usize,
    pub delta: f64,
}

impl<T: Scalar> BoundReport<T> {
    /// Records the observed population risk and flags a violation iff it
    /// strictly exceeds the bound.
    pub fn observe_lhs(mut self, lhs: T) -> Result<Self> {
        if !lhs.is_finite() {
            return Err(Error::NonFiniteInput(format!(
                "population risk must be finite, got {lhs}"
            )));
        }
        self.violated = Some(lhs > self.rhs);
        self.lhs = Some(lhs);
        Ok(self)
    }
}

/// Monte-Carlo Rademacher estimate for the linear dual class.
///
/// `lemma_bound` is B * C_meas / sqrt(N) with C_meas the largest feature
/// column norm; the estimate must stay below it up to Monte-Carlo error.
#[derive(Clone, Copy, Debug)]
pub struct RademacherEstimate<T> {
    pub estimate: T,
    pub std_err: T,
    pub lemma_bound: T,
    pub n_draws: usize,
}

/// Lower estimate of the loss-class complexity obtained by projected
/// gradient ascent inside each sign draw.
#[derive(Clone, Copy, Debug)]
pub struct LossClassEstimate<T> {
    pub lower_estimate: T,
    pub std_err: T,
    pub n_draws: usize,
    pub ascent_steps: usize,
}

/// Outcome of comparing the composed-class lower estimate against
/// 2(D_T + BC) times the linear-class estimate.
#[derive(Clone, Copy, Debug)]
pub struct ContractionCheck<T> {
    pub composed: T,
    pub bound: T,
    pub combined_std_err: T,
    pub violated: bool,
}

/// Source of token columns for resampling experiments.
///
/// Implementations must be deterministic: the same `(n, seed)` pair must
/// always produce the same matrix, and different seeds should produce
/// independent draws.
pub trait TokenSampler<T: Scalar> {
    fn sample(&self, n: usize, seed: u64) -> Result<DenseMatrix<T>>;
}

/// Configuration for [`estimate_sup_gap`].
#[derive(Clone, Copy, Debug)]
pub struct SupGapConfig<T> {
    /// Frobenius radius B of the admissible student set.
    pub weight_cap: T,
    /// Training-set size per resample.
    pub n_train: usize,
    /// Held-out set size as a multiple of `n_train`.
    pub heldout_factor: usize,
    /// Projected-gradient-ascent steps per resample.
    pub ascent_steps: usize,
    /// Confidence parameter for the tail threshold.
    pub delta: f64,
}

impl<T: Scalar> SupGapConfig<T> {
    pub fn new(weight_cap: T, n_train: usize) -> Self {
        Self {
            weight_cap,
            n_train,
            heldout_factor: DEFAULT_HELDOUT_FACTOR,
            ascent_steps: DEFAULT_ASCENT_STEPS,
            delta: DEFAULT_DELTA,
        }
    }
}

/// Resampling summary for the uniform deviation sup_{||W||<=B} (L - L_hat).
#[derive(Clone, Debug)]
pub struct SupGapSummary<T> {
    /// Per-resample lower estimates of the deviation, in resample order.
    pub gaps: Vec<T>,
    pub mean: T,
    /// (probability, empirical quantile) pairs at p = 5/25/50/75/95%.
    pub quantiles: [(f64, T); 5],
    /// Tail threshold mean + t.
    pub tail_threshold: T,
    /// Tail offset t = 3(D_T + BC)^2 sqrt(ln(2/delta)/(2 n_train)).
    pub t_value: T,
    /// Fraction of resamples with gap > mean + t; expected <= delta.
    pub exceed_fraction: f64,
    pub measured_feature_cap: T,
    pub measured_teacher_cap: T,
    /// Contraction radius D_T + B*C built from the measured caps.
    pub radius: T,
    pub delta: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

fn check_sample_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyContext(
            "sample count n must be at least 1".into(),
        ));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
        return Err(Error::InvalidDelta(delta));
    }
    Ok(())
}

fn check_weight_cap<T: Scalar>(b: T) -> Result<()> {
    if !b.is_finite() || b < T::zero() {
        return Err(Error::InvalidSpec(format!(
            "weight cap B must be finite and nonnegative, got {b}"
        )));
    }
    Ok(())
}

fn check_draws(n_draws: usize) -> Result<()> {
    if n_draws < MIN_SIGN_DRAWS {
        return Err(Error::TooFewDraws {
            got: n_draws,
            minimum: MIN_SIGN_DRAWS,
        });
    }
    Ok(())
}

fn check_ascent_steps(ascent_steps: usize) -> Result<()> {
    if ascent_steps == 0 {
        return Err(Error::InvalidSpec(
            "ascent_steps must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Mean and standard error of a set of Monte-Carlo draw values.
fn mean_and_std_err<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::of_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values
        .iter()
        .map(|v| (*v - mean) * (*v - mean))
        .sum::<T>()
        / (n - T::one());
    (mean, (var / n).sqrt())
}

/// Mean squared loss of the student against the teacher over `samples`;
/// identical to the distillation objective.
pub fn empirical_risk<T: Scalar>(
    student: &StudentModel<T>,
    teacher: &TeacherModel<T>,
    samples: &DenseMatrix<T>,
) -> Result<T> {
    crate::distill::kd_loss(student, teacher, samples)
}

/// Monte-Carlo estimate of the linear-class Rademacher complexity
/// (B/N) E_sigma ||sum_i sigma_i phi_i|| over the columns of `features`.
///
/// Sign draw `j` is generated from `stream(derive_seed(seed, j))`, so draws
/// are independent and the estimate is reproducible and order-independent.
pub fn estimate_rademacher_linear<T: Scalar>(
    features: &DenseMatrix<T>,
    weight_cap: T,
    n_draws: usize,
    seed: u64,
) -> Result<RademacherEstimate<T>> {
    check_weight_cap(weight_cap)?;
    check_draws(n_draws)?;
    if !features.is_finite() {
        return Err(Error::NonFiniteInput(
            "feature matrix contains a non-finite entry".into(),
        ));
    }
    let n = features.cols();
    check_sample_count(n)?;
    let r = features.rows();
    let coef = weight_cap / T::of_usize(n);

    let mut draw_values = Vec::with_capacity(n_draws);
    let mut sum = vec![T::zero(); r];
    for j in 0..n_draws {
        let mut rng = stream(derive_seed(seed, j as u64));
        let signs = rademacher_signs::<T>(n, &mut rng);
        sum.iter_mut().for_each(|s| *s = T::zero());
        for (k, s) in sum.iter_mut().enumerate() {
            let row = features.row(k);
            let mut acc = T::zero();
            for i in 0..n {
                acc += signs[i] * row[i];
            }
            *s = acc;
        }
        draw_values.push(coef * vector_norm(&sum));
    }
    let (estimate, std_err) = mean_and_std_err(&draw_values);

    let mut c_meas = T::zero();
    for i in 0..n {
        let mut sq = T::zero();
        for k in 0..r {
            let e = features.get(k, i);
            sq += e * e;
        }
        c_meas = c_meas.max(sq.sqrt());
    }
    let lemma_bound = weight_cap * c_meas / T::of_usize(n).sqrt();

    Ok(RademacherEstimate {
        estimate,
        std_err,
        lemma_bound,
        n_draws,
    })
}

/// Evaluates the signed loss average g(W) = (1/N) sum_i sigma_i ||W phi_i - t_i||^2
/// and, when requested, its gradient (2/N) (R diag(sigma)) Phi^T.
fn signed_loss_value<T: Scalar>(
    w: &DenseMatrix<T>,
    phi: &DenseMatrix<T>,
    teacher_out: &DenseMatrix<T>,
    signs: &[T],
) -> Result<(T, DenseMatrix<T>)> {
    let n = phi.cols();
    let residual = w.matmul(phi)?.sub(teacher_out)?;
    let mut value = T::zero();
    for (i, sigma) in signs.iter().enumerate() {
        let mut sq = T::zero();
        for a in 0..residual.rows() {
            let e = residual.get(a, i);
            sq += e * e;
        }
        value += *sigma * sq;
    }
    value = value / T::of_usize(n);
    Ok((value, residual))
}

/// g(0) = (1/N) sum_i sigma_i ||t_i||^2, the signed loss at the zero student.
fn signed_loss_at_zero<T: Scalar>(teacher_out: &DenseMatrix<T>, signs: &[T]) -> T {
    let n = teacher_out.cols();
    let mut value = T::zero();
    for (i, sigma) in signs.iter().enumerate() {
        let mut sq = T::zero();
        for a in 0..teacher_out.rows() {
            let e = teacher_out.get(a, i);
            sq += e * e;
        }
        value += *sigma * sq;
    }
    value / T::of_usize(n)
}

/// Projects `w` back onto the Frobenius ball of radius `b` in place.
fn project_frobenius_ball<T: Scalar>(w: &mut DenseMatrix<T>, b: T) {
    let norm = frobenius_norm(w);
    if norm > b {
        *w = w.scaled(b / norm);
    }
}

/// Lower-estimates the loss-class Rademacher complexity
/// E_sigma sup_{||W||_F <= B} (1/N) sum_i sigma_i ||f_T(x_i) - W phi(W_K x_i)||^2
/// by projected gradient ascent inside each sign draw.
///
/// The supremum candidate set always includes W = 0, so the per-draw value is
/// a true lower bound of the inner sup; ascent starts from a small random
/// point (drawn after the signs from the same per-draw stream) because the
/// gradient at W = 0 vanishes whenever the teacher does.  Step size is
/// 0.1 * B with projection back onto the Frobenius ball after each step.
pub fn estimate_rademacher_loss_class<T: Scalar>(
    student_template: &StudentModel<T>,
    teacher: &TeacherModel<T>,
    samples: &DenseMatrix<T>,
    weight_cap: T,
    n_draws: usize,
    ascent_steps: usize,
    seed: u64,
) -> Result<LossClassEstimate<T>> {
    check_weight_cap(weight_cap)?;
    check_draws(n_draws)?;
    check_ascent_steps(ascent_steps)?;
    if student_template.output_dim() != teacher.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "student output dim {} != teacher output dim {}",
            student_template.output_dim(),
            teacher.output_dim()
        )));
    }
    let n = samples.cols();
    check_sample_count(n)?;

    let phi = student_template.features(samples)?;
    let teacher_out = teacher.forward_batch(samples)?;
    let m = teacher_out.rows();
    let r = phi.rows();
    let step = T::of(ASCENT_STEP_FRACTION) * weight_cap;

    let mut draw_values = Vec::with_capacity(n_draws);
    for j in 0..n_draws {
        let mut rng = stream(derive_seed(seed, j as u64));
        let signs = rademacher_signs::<T>(n, &mut rng);
        let mut best = signed_loss_at_zero(&teacher_out, &signs);
        if weight_cap > T::zero() {
            let start = normal_matrix::<T>(m, r, &mut rng);
            let start_norm = frobenius_norm(&start);
            let mut w = if start_norm > T::zero() {
                start.scaled(step / start_norm)
            } else {
                start
            };
            for _ in 0..ascent_steps {
                let (value, residual) = signed_loss_value(&w, &phi, &teacher_out, &signs)?;
                best = best.max(value);
                let signed_residual =
                    DenseMatrix::from_fn(m, n, |a, i| residual.get(a, i) * signs[i]);
                let gradient = signed_residual
                    .matmul(&phi.transpose())?
                    .scaled(T::of(2.0) / T::of_usize(n));
                w = w.add(&gradient.scaled(step))?;
                project_frobenius_ball(&mut w, weight_cap);
            }
            let (value, _) = signed_loss_value(&w, &phi, &teacher_out, &signs)?;
            best = best.max(value);
        }
        draw_values.push(best);
    }
    let (lower_estimate, std_err) = mean_and_std_err(&draw_values);

    Ok(LossClassEstimate {
        lower_estimate,
        std_err,
        n_draws,
        ascent_steps,
    })
}

/// Checks the contraction inequality: the composed-class lower estimate must
/// not exceed 2 * radius * linear estimate beyond three combined standard
/// errors, where radius = D_T + B*C.
pub fn contraction_check<T: Scalar>(
    loss: &LossClassEstimate<T>,
    linear: &RademacherEstimate<T>,
    radius: T,
) -> ContractionCheck<T> {
    let factor = T::of(2.0) * radius;
    let bound = factor * linear.estimate;
    let combined_std_err =
        (loss.std_err * loss.std_err + factor * factor * linear.std_err * linear.std_err).sqrt();
    let violated = loss.lower_estimate > bound + T::of(3.0) * combined_std_err;
    ContractionCheck {
        composed: loss.lower_estimate,
        bound,
        combined_std_err,
        violated,
    }
}

/// Assembles the full deviation bound
/// rhs = empirical + 4BC(D_T+BC)/sqrt(n) + 3(D_T+BC)^2 sqrt(ln(2/delta)/(2n)).
pub fn generalization_bound_rhs<T: Scalar>(
    empirical: T,
    budget: &NormBudget<T>,
    n: usize,
    delta: f64,
) -> Result<BoundReport<T>> {
    if !empirical.is_finite() {
        return Err(Error::NonFiniteInput(format!(
            "empirical risk must be finite, got {empirical}"
        )));
    }
    let complexity_term = budget.complexity_term(n)?;
    let tail_term = budget.tail_term(n, delta)?;
    Ok(BoundReport {
        empirical_risk: empirical,
        complexity_term,
        tail_term,
        rhs: empirical + complexity_term + tail_term,
        lhs: None,
        violated: None,
        n,
        delta,
    })
}

/// Mean squared loss of W over a feature/teacher-output pair (columns).
fn risk_of<T: Scalar>(
    w: &DenseMatrix<T>,
    phi: &DenseMatrix<T>,
    teacher_out: &DenseMatrix<T>,
) -> Result<T> {
    let diff = w.matmul(phi)?.sub(teacher_out)?;
    let total: T = diff.entries().iter().map(|e| *e * *e).sum();
    Ok(total / T::of_usize(phi.cols()))
}

/// Gradient of risk_of with respect to W: (2/n) (W Phi - T) Phi^T.
fn risk_gradient<T: Scalar>(
    w: &DenseMatrix<T>,
    phi: &DenseMatrix<T>,
    teacher_out: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let residual = w.matmul(phi)?.sub(teacher_out)?;
    residual
        .matmul(&phi.transpose())
        .map(|g| g.scaled(T::of(2.0) / T::of_usize(phi.cols())))
}

fn max_column_norm<T: Scalar>(m: &DenseMatrix<T>) -> T {
    let mut best = T::zero();
    for i in 0..m.cols() {
        let mut sq = T::zero();
        for a in 0..m.rows() {
            let e = m.get(a, i);
            sq += e * e;
        }
        best = best.max(sq.sqrt());
    }
    best
}

/// Nearest-rank empirical quantile of an ascending slice.
fn quantile<T: Scalar>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Resamples training sets and lower-estimates the uniform deviation
/// Phi(X_D) = sup_{||W||_F <= B} ( L(W) - L_hat(W) ) per resample, with the
/// population risk L approximated on one large held-out set.
///
/// Seeding: the held-out set is drawn from `derive_seed(seed, 0)`; resample
/// `k` (0-based) draws its training set from `derive_seed(seed, 2k + 1)` and
/// its ascent starts from `stream(derive_seed(seed, 2k + 2))`, so resamples
/// are independent and may be evaluated in any order.
///
/// The summary reports empirical quantiles of the gap and the fraction of
/// resamples exceeding mean + t, with t the McDiarmid tail offset at
/// `cfg.delta` built from measured feature/teacher caps; the exceedance
/// fraction is expected to stay below delta.
pub fn estimate_sup_gap<T: Scalar>(
    sampler: &dyn TokenSampler<T>,
    teacher: &TeacherModel<T>,
    student_template: &StudentModel<T>,
    cfg: &SupGapConfig<T>,
    n_resamples: usize,
    seed: u64,
) -> Result<SupGapSummary<T>> {
    check_weight_cap(cfg.weight_cap)?;
    check_delta(cfg.delta)?;
    check_ascent_steps(cfg.ascent_steps)?;
    check_sample_count(cfg.n_train)?;
    if cfg.heldout_factor == 0 {
        return Err(Error::InvalidSpec(
            "heldout_factor must be at least 1".into(),
        ));
    }
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::TooFewResamples {
            got: n_resamples,
            minimum: MIN_RESAMPLES,
        });
    }
    if student_template.output_dim() != teacher.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "student output dim {} != teacher output dim {}",
            student_template.output_dim(),
            teacher.output_dim()
        )));
    }

    let n_heldout = cfg.n_train * cfg.heldout_factor;
    let heldout = sampler.sample(n_heldout, derive_seed(seed, 0))?;
    let phi_ho = student_template.features(&heldout)?;
    let out_ho = teacher.forward_batch(&heldout)?;
    let m = out_ho.rows();
    let r = phi_ho.rows();
    let step = T::of(ASCENT_STEP_FRACTION) * cfg.weight_cap;

    let mut c_meas = max_column_norm(&phi_ho);
    let mut d_meas = max_column_norm(&out_ho);

    let mut gaps = Vec::with_capacity(n_resamples);
    for k in 0..n_resamples {
        let train = sampler.sample(cfg.n_train, derive_seed(seed, 2 * k as u64 + 1))?;
        let phi_tr = student_template.features(&train)?;
        let out_tr = teacher.forward_batch(&train)?;
        c_meas = c_meas.max(max_column_norm(&phi_tr));
        d_meas = d_meas.max(max_column_norm(&out_tr));

        // Gap at W = 0: difference of mean teacher energies.
        let energy = |out: &DenseMatrix<T>| {
            out.entries().iter().map(|e| *e * *e).sum::<T>() / T::of_usize(out.cols())
        };
        let mut best = energy(&out_ho) - energy(&out_tr);

        if cfg.weight_cap > T::zero() {
            let mut rng = stream(derive_seed(seed, 2 * k as u64 + 2));
            let start = normal_matrix::<T>(m, r, &mut rng);
            let start_norm = frobenius_norm(&start);
            let mut w = if start_norm > T::zero() {
                start.scaled(step / start_norm)
            } else {
                start
            };
            for _ in 0..cfg.ascent_steps {
                let value = risk_of(&w, &phi_ho, &out_ho)? - risk_of(&w, &phi_tr, &out_tr)?;
                best = best.max(value);
                let gradient = risk_gradient(&w, &phi_ho, &out_ho)?
                    .sub(&risk_gradient(&w, &phi_tr, &out_tr)?)?;
                w = w.add(&gradient.scaled(step))?;
                project_frobenius_ball(&mut w, cfg.weight_cap);
            }
            let value = risk_of(&w, &phi_ho, &out_ho)? - risk_of(&w, &phi_tr, &out_tr)?;
            best = best.max(value);
        }
        gaps.push(best);
    }

    let (mean, _) = mean_and_std_err(&gaps);
    let mut sorted = gaps.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("gaps are finite"));
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.95].map(|p| (p, quantile(&sorted, p)));

    let radius = d_meas + cfg.weight_cap * c_meas;
    let inside = T::of((2.0 / cfg.delta).ln()) / (T::of(2.0) * T::of_usize(cfg.n_train));
    let t_value = T::of(3.0) * radius * radius * inside.sqrt();
    let tail_threshold = mean + t_value;
    let exceed = gaps.iter().filter(|g| **g > tail_threshold).count();

    Ok(SupGapSummary {
        gaps,
        mean,
        quantiles,
        tail_threshold,
        t_value,
        exceed_fraction: exceed as f64 / n_resamples as f64,
        measured_feature_cap: c_meas,
        measured_teacher_cap: d_meas,
        radius,
        delta: cfg.delta,
        n_train: cfg.n_train,
        n_heldout,
    })
}
