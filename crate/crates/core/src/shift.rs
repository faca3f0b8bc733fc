//! Distribution-shift analysis: second moments, reference weights via normal
//! equations, mean-embedding MMD, and the offset / risk-gap bound checks.
//!
//! Every token x is embedded as A(x) = vec(x phi(W_K x)^T), so the mean
//! embedding of a sample is vec(M_hat) with M_hat = (1/n) Σᵢ x_i phi_i^T and
//! the MMD between two samples (under the linear kernel on A) is the
//! Frobenius distance of their cross-moment matrices,
//! MMD(a, b) = ||M_hat_a - M_hat_b||_F.
//!
//! The offset check compares the averaged one-step weight
//! E[W_0] = eta·W_V·M_hat_Q against the ridge-regularized reference solution
//! W* = (W_V M_hat_D)(Sigma_phi + lambda I)^{-1} and evaluates two upper
//! bounds on ||Delta W||_F = ||E[W_0] - W*||_F: the whitened form
//! eta·M_V·M_x·M_phi·MMD, and the plain form
//! M_V·M_x·M_phi·(||eta I - Sigma^{-1}||_2 + ||Sigma^{-1}||_2·MMD).
//! The whitened form presumes Sigma_phi = I (pre-whitened features); on raw
//! data it is reported but should not be asserted.
//!
//! The risk-gap check forms one-step weights
//! W(Q) = 2 eta·E_Q[f_T(x) phi(W_K x)^T] from two prompt distributions and
//! bounds the target-risk difference by polynomials in
//! delta = MMD_bad - MMD_good: the main form
//! 8 eta M_T² M_phi² delta + 4 eta² M_T² M_phi⁴ delta² (valid only while
//! 2 eta M_phi² < 1) and the exact form
//! 4 eta² M_T² M_phi⁴ delta² + 4 eta M_T² M_phi² (1 + 2 eta M_phi²) delta.
//!
//! Norm caps enter every bound as max(declared cap, measured supremum), so
//! the inequalities stay sound on the concrete finite samples.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::matrix::{
    frobenius_norm, solve_ridge, symmetric_eigenvalues, DenseMatrix, RidgeConfig,
};
use crate::scalar::Scalar;

/// Relative residual allowed when checking the normal equations.
const NORMAL_EQUATION_RESIDUAL: f64 = 1e-8;

/// Which distribution a sample was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleLabel {
    /// Target domain the distilled student is evaluated on.
    Target,
    /// Prompt domain the demonstrations are drawn from.
    Prompt,
}

/// Declared norm caps accompanying a sample: M_x bounds token norms, M_phi
/// feature norms, M_V the value-matrix operator norm, and M_T the teacher
/// output norm.
#[derive(Clone, Copy, Debug)]
pub struct DeclaredCaps<T> {
    pub m_x: T,
    pub m_phi: T,
    pub m_v: T,
    pub m_t: T,
}

impl<T: Scalar> DeclaredCaps<T> {
    pub fn new(m_x: T, m_phi: T, m_v: T, m_t: T) -> Result<Self> {
        for (name, v) in [("M_x", m_x), ("M_phi", m_phi), ("M_V", m_v), ("M_T", m_t)] {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidSpec(format!(
                    "declared cap {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self { m_x, m_phi, m_v, m_t })
    }

    /// All four caps set to the same value.
    pub fn uniform(value: T) -> Result<Self> {
        Self::new(value, value, value, value)
    }
}

/// A labeled token sample together with its declared caps.  Construction
/// verifies that every token respects the declared M_x.
#[derive(Clone, Debug)]
pub struct DistributionSample<T> {
    label: SampleLabel,
    tokens: DenseMatrix<T>,
    caps: DeclaredCaps<T>,
}

impl<T: Scalar> DistributionSample<T> {
    pub fn new(label: SampleLabel, tokens: DenseMatrix<T>, caps: DeclaredCaps<T>) -> Result<Self> {
        if tokens.cols() == 0 {
            return Err(Error::EmptyContext("sample has no tokens".into()));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFiniteInput("sample tokens".into()));
        }
        let max_norm = max_column_norm(&tokens);
        if max_norm > caps.m_x {
            return Err(Error::InvalidSpec(format!(
                "token norm {max_norm} exceeds declared cap M_x = {}",
                caps.m_x
            )));
        }
        Ok(Self { label, tokens, caps })
    }

    pub fn label(&self) -> SampleLabel {
        self.label
    }

    pub fn tokens(&self) -> &DenseMatrix<T> {
        &self.tokens
    }

    pub fn caps(&self) -> DeclaredCaps<T> {
        self.caps
    }

    pub fn len(&self) -> usize {
        self.tokens.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.cols() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.rows()
    }
}

/// Ridged empirical second moment of the features,
/// Sigma = (1/n) sum_i phi_i phi_i^T + lambda I.
#[derive(Clone, Debug)]
pub struct SecondMoment<T> {
    /// Symmetric positive-definite matrix including the ridge.
    pub sigma_phi: DenseMatrix<T>,
    /// The ridge lambda = epsilon_rel * trace(Sigma_raw) / r actually added.
    pub ridge_used: T,
    /// Power-iteration estimate of the smallest eigenvalue after ridging.
    pub min_eig_estimate: T,
}

/// Empirical cross moment M_hat = (1/n) sum_i x_i phi(W_K x_i)^T together
/// with the label of the sample it came from.
#[derive(Clone, Debug)]
pub struct CrossMoment<T> {
    pub matrix: DenseMatrix<T>,
    pub source: SampleLabel,
}

/// Constants entering the offset bounds, after merging declared caps with
/// measured suprema.
#[derive(Clone, Copy, Debug)]
pub struct OffsetConstants<T> {
    pub eta: T,
    pub m_v: T,
    pub m_x: T,
    pub m_phi: T,
    /// ||Sigma^{-1}||_2 of the ridged second moment.
    pub sigma_inv_spectral: T,
    /// ||eta I - Sigma^{-1}||_2.
    pub eta_gap_spectral: T,
    pub ridge_used: T,
    pub min_eig_estimate: T,
}

/// Outcome of the averaged-one-step vs reference-weight comparison.
///
/// The violation flags compare `delta_w_norm` strictly against each raw
/// bound; the `margin_std_err_*` fields carry first-order sampling-error
/// proxies so callers can apply a statistical allowance (bound + 3 sigma)
/// when interpreting population-level claims.
#[derive(Clone, Debug)]
pub struct OffsetReport<T> {
    pub delta_w_norm: T,
    pub bound_whitened: T,
    pub bound_plain: T,
    pub mmd: T,
    pub mmd_std_err: T,
    pub constants: OffsetConstants<T>,
    pub violated_whitened: bool,
    pub violated_plain: bool,
    pub margin_std_err_whitened: T,
    pub margin_std_err_plain: T,
}

/// Constants entering the risk-gap bounds.
#[derive(Clone, Copy, Debug)]
pub struct RiskGapConstants<T> {
    pub eta: T,
    pub m_t: T,
    pub m_phi: T,
    /// 2 eta M_phi^2, the step-size product the small-step form requires < 1.
    pub step_size_product: T,
}

/// Outcome of the prompt-shift risk-gap comparison.
#[derive(Clone, Debug)]
pub struct RiskGapReport<T> {
    /// Target-domain risk difference risk(W_bad) - risk(W_good).
    pub lhs: T,
    pub lhs_std_err: T,
    pub mmd_good: T,
    pub mmd_bad: T,
    /// delta = mmd_bad - mmd_good >= 0 (inputs swapped if needed).
    pub delta_mmd: T,
    pub delta_mmd_std_err: T,
    /// True when the good/bad arguments arrived in the wrong MMD order.
    pub swapped: bool,
    /// Small-step bound; absent when 2 eta M_phi^2 >= 1 and not required.
    pub rhs_main: Option<T>,
    pub rhs_exact: T,
    pub violated_main: Option<bool>,
    pub violated_exact: bool,
    pub margin_std_err_main: Option<T>,
    pub margin_std_err_exact: T,
    pub constants: RiskGapConstants<T>,
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

fn check_explicit_map<T: Scalar>(map: &FeatureMap<T>) -> Result<usize> {
    map.feature_dim().ok_or_else(|| {
        Error::UnsupportedMapKind(format!(
            "{} map has no explicit feature vectors",
            map.kind().name()
        ))
    })
}

fn check_eta<T: Scalar>(eta: T) -> Result<()> {
    if !eta.is_finite() || eta < T::zero() {
        return Err(Error::NonPositiveLearningRate(eta.as_f64()));
    }
    Ok(())
}

/// Features of a sample: phi(W_K x_i) columnwise.
fn sample_features<T: Scalar>(
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
    sample: &DistributionSample<T>,
) -> Result<DenseMatrix<T>> {
    map.apply(&wk.matmul(sample.tokens())?)
}

/// Ridged empirical second moment of the feature vectors of `sample`.
pub fn second_moment<T: Scalar>(
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
    sample: &DistributionSample<T>,
    ridge: &RidgeConfig,
) -> Result<SecondMoment<T>> {
    let r = check_explicit_map(map)?;
    let phi = sample_features(map, wk, sample)?;
    let n = T::of_usize(sample.len());
    let mut sigma = phi.matmul(&phi.transpose())?.scaled(T::one() / n);
    let lambda = T::of(ridge.epsilon_rel) * sigma.trace() / T::of_usize(r);
    for i in 0..r {
        sigma.set(i, i, sigma.get(i, i) + lambda);
    }
    let min_eig_estimate = symmetric_eigenvalues(&sigma)?[0];
    Ok(SecondMoment {
        sigma_phi: sigma,
        ridge_used: lambda,
        min_eig_estimate,
    })
}

/// Mean embedding (1/n) sum_i x_i phi(W_K x_i)^T of raw token columns, the
/// quantity whose pairwise Frobenius distances define the MMD used here.
pub fn mean_embedding<T: Scalar>(
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
    tokens: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    check_explicit_map(map)?;
    if tokens.cols() == 0 {
        return Err(Error::EmptyContext("token set has no columns".into()));
    }
    let phi = map.apply(&wk.matmul(tokens)?)?;
    Ok(tokens
        .matmul(&phi.transpose())?
        .scaled(T::one() / T::of_usize(tokens.cols())))
}

/// Exact-form risk-gap bound value at embedding distance `delta`:
/// 4 eta^2 M_T^2 M_phi^4 delta^2 + 4 eta M_T^2 M_phi^2 (1 + 2 eta M_phi^2) delta.
pub fn exact_gap_bound<T: Scalar>(eta: T, m_t: T, m_phi: T, delta: T) -> T {
    let base = T::of(4.0) * eta * m_t * m_t * m_phi * m_phi;
    let step = T::of(2.0) * eta * m_phi * m_phi;
    eta * base * m_phi * m_phi * delta * delta + base * (T::one() + step) * delta
}

/// Empirical cross moment (1/n) sum_i x_i phi(W_K x_i)^T of a sample.
pub fn cross_moment<T: Scalar>(
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
    sample: &DistributionSample<T>,
) -> Result<CrossMoment<T>> {
    check_explicit_map(map)?;
    let phi = sample_features(map, wk, sample)?;
    let n = T::of_usize(sample.len());
    let matrix = sample
        .tokens()
        .matmul(&phi.transpose())?
        .scaled(T::one() / n);
    Ok(CrossMoment {
        matrix,
        source: sample.label(),
    })
}

/// Reference weight solving the ridge-regularized normal equations
/// W* (Sigma_phi + lambda I) = W_V M_hat_D.  The residual of the normal
/// equations is verified to 1e-8 relative before returning.
pub fn optimal_weight<T: Scalar>(
    target: &DistributionSample<T>,
    wv: &DenseMatrix<T>,
    wk: &DenseMatrix<T>,
    map: &FeatureMap<T>,
    ridge: &RidgeConfig,
) -> Result<DenseMatrix<T>> {
    let moment = second_moment(map, wk, target, ridge)?;
    let rhs = wv.matmul(&cross_moment(map, wk, target)?.matrix)?;
    // The moment already carries its ridge; solve the plain system.
    let exact = RidgeConfig::new(0.0)?;
    let w_star_t = solve_ridge(&moment.sigma_phi, &rhs.transpose(), &exact)?;
    let w_star = w_star_t.transpose();

    let residual = w_star.matmul(&moment.sigma_phi)?.sub(&rhs)?;
    let scale = frobenius_norm(&rhs).max(T::one());
    let rel = frobenius_norm(&residual) / scale;
    if rel > T::of(NORMAL_EQUATION_RESIDUAL) {
        return Err(Error::FactorizationFailure(format!(
            "normal-equation residual {rel} exceeds {NORMAL_EQUATION_RESIDUAL}"
        )));
    }
    Ok(w_star)
}

/// Mean-embedding MMD between two samples under A(x) = vec(x phi(W_K x)^T):
/// the Frobenius distance of their cross-moment matrices.
pub fn mmd_embedding<T: Scalar>(
    sample_a: &DistributionSample<T>,
    sample_b: &DistributionSample<T>,
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
) -> Result<T> {
    mmd_with_std_err(sample_a, sample_b, map, wk).map(|(mmd, _)| mmd)
}

/// MMD together with a conservative standard-error proxy: the embedding
/// variance trace of each sample divided by its size, summed and rooted.
pub fn mmd_with_std_err<T: Scalar>(
    sample_a: &DistributionSample<T>,
    sample_b: &DistributionSample<T>,
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
) -> Result<(T, T)> {
    let (mean_a, var_a) = embedding_mean_and_trace_var(map, wk, sample_a)?;
    let (mean_b, var_b) = embedding_mean_and_trace_var(map, wk, sample_b)?;
    let mmd = frobenius_norm(&mean_a.sub(&mean_b)?);
    let std_err = (var_a / T::of_usize(sample_a.len()) + var_b / T::of_usize(sample_b.len()))
        .max(T::zero())
        .sqrt();
    Ok((mmd, std_err))
}

/// Mean embedding (as a d x r matrix) and the trace of the per-token
/// embedding covariance, (1/n) sum ||A_i||^2 - ||mean||^2.
fn embedding_mean_and_trace_var<T: Scalar>(
    map: &FeatureMap<T>,
    wk: &DenseMatrix<T>,
    sample: &DistributionSample<T>,
) -> Result<(DenseMatrix<T>, T)> {
    check_explicit_map(map)?;
    let phi = sample_features(map, wk, sample)?;
    let tokens = sample.tokens();
    let n = sample.len();
    let mean = tokens.matmul(&phi.transpose())?.scaled(T::one() / T::of_usize(n));
    // ||A_i||_F^2 = ||x_i||^2 ||phi_i||^2 for the rank-one embedding.
    let mut second = T::zero();
    for i in 0..n {
        let mut x_sq = T::zero();
        for a in 0..tokens.rows() {
            let e = tokens.get(a, i);
            x_sq += e * e;
        }
        let mut phi_sq = T::zero();
        for a in 0..phi.rows() {
            let e = phi.get(a, i);
            phi_sq += e * e;
        }
        second += x_sq * phi_sq;
    }
    second = second / T::of_usize(n);
    let mean_sq = frobenius_norm(&mean);
    let trace_var = (second - mean_sq * mean_sq).max(T::zero());
    Ok((mean, trace_var))
}

/// Merged constant: max(declared cap, measured supremum).
fn merged<T: Scalar>(declared: T, measured: T) -> T {
    declared.max(measured)
}

/// Largest singular value of a small matrix, read off the eigenvalues of the
/// Gram matrix on its shorter side.
fn operator_norm<T: Scalar>(m: &DenseMatrix<T>) -> Result<T> {
    let gram = if m.cols() <= m.rows() {
        m.transpose().matmul(m)?
    } else {
        m.matmul(&m.transpose())?
    };
    let eigs = symmetric_eigenvalues(&gram)?;
    let top = eigs.last().copied().unwrap_or_else(T::zero);
    Ok(top.max(T::zero()).sqrt())
}

/// Compares the averaged one-step weight E[W_0] = eta W_V M_hat_Q against
/// the reference weight W* on the target distribution and evaluates the
/// whitened and plain deviation bounds.
///
/// The plain form holds algebraically whenever the merged M_x * M_phi >= 1;
/// the whitened form additionally presumes Sigma_phi = I and is reported for
/// diagnostic purposes on raw data.
pub fn offset_bound_check<T: Scalar>(
    target: &DistributionSample<T>,
    prompt: &DistributionSample<T>,
    wv: &DenseMatrix<T>,
    wk: &DenseMatrix<T>,
    map: &FeatureMap<T>,
    eta: T,
    ridge: &RidgeConfig,
) -> Result<OffsetReport<T>> {
    check_eta(eta)?;
    check_explicit_map(map)?;

    let moment = second_moment(map, wk, target, ridge)?;
    let m_q = cross_moment(map, wk, prompt)?;
    let w_star = optimal_weight(target, wv, wk, map, ridge)?;
    let averaged_w0 = wv.matmul(&m_q.matrix)?.scaled(eta);
    let delta_w_norm = frobenius_norm(&averaged_w0.sub(&w_star)?);

    let (mmd, mmd_std_err) = mmd_with_std_err(target, prompt, map, wk)?;

    // Spectral quantities of the ridged second moment's inverse, read off
    // its eigenvalues: ||Sigma^{-1}||_2 = 1/lambda_min and
    // ||eta I - Sigma^{-1}||_2 = max_i |eta - 1/lambda_i|.
    let eigs = symmetric_eigenvalues(&moment.sigma_phi)?;
    let lambda_min = eigs[0];
    if lambda_min <= T::zero() {
        return Err(Error::FactorizationFailure(format!(
            "second moment is not positive definite (lambda_min = {lambda_min}); raise epsilon_rel"
        )));
    }
    let sigma_inv_spectral = lambda_min.recip();
    let eta_gap_spectral = eigs
        .iter()
        .map(|l| (eta - l.recip()).abs())
        .fold(T::zero(), T::max);

    // Merge declared caps with measured suprema over both samples.
    let phi_target = sample_features(map, wk, target)?;
    let phi_prompt = sample_features(map, wk, prompt)?;
    let m_x = merged(
        target.caps().m_x.max(prompt.caps().m_x),
        max_column_norm(target.tokens()).max(max_column_norm(prompt.tokens())),
    );
    let m_phi = merged(
        target.caps().m_phi.max(prompt.caps().m_phi),
        max_column_norm(&phi_target).max(max_column_norm(&phi_prompt)),
    );
    let m_v = merged(
        target.caps().m_v.max(prompt.caps().m_v),
        operator_norm(wv)?,
    );

    let scale = m_v * m_x * m_phi;
    let bound_whitened = eta * scale * mmd;
    let bound_plain = scale * (eta_gap_spectral + sigma_inv_spectral * mmd);

    // First-order sampling-error proxies: the bound sides move with the MMD
    // estimate, the left side with the two cross-moment estimates.
    let prompt_se = embedding_mean_and_trace_var(map, wk, prompt)?.1 / T::of_usize(prompt.len());
    let target_se = embedding_mean_and_trace_var(map, wk, target)?.1 / T::of_usize(target.len());
    let lhs_std_err = m_v * (eta * prompt_se.sqrt() + sigma_inv_spectral * target_se.sqrt());
    let margin_std_err_whitened = lhs_std_err + eta * scale * mmd_std_err;
    let margin_std_err_plain = lhs_std_err + scale * sigma_inv_spectral * mmd_std_err;

    Ok(OffsetReport {
        delta_w_norm,
        bound_whitened,
        bound_plain,
        mmd,
        mmd_std_err,
        constants: OffsetConstants {
            eta,
            m_v,
            m_x,
            m_phi,
            sigma_inv_spectral,
            eta_gap_spectral,
            ridge_used: moment.ridge_used,
            min_eig_estimate: moment.min_eig_estimate,
        },
        violated_whitened: delta_w_norm > bound_whitened,
        violated_plain: delta_w_norm > bound_plain,
        margin_std_err_whitened,
        margin_std_err_plain,
    })
}

/// One-step prompt-conditioned weight W(Q) = 2 eta W_V M_hat_Q.
fn one_step_weight<T: Scalar>(
    wv: &DenseMatrix<T>,
    m_hat: &DenseMatrix<T>,
    eta: T,
) -> Result<DenseMatrix<T>> {
    Ok(wv.matmul(m_hat)?.scaled(T::of(2.0) * eta))
}

/// Per-sample squared losses ||W_V x_i - W phi_i||^2 on the target sample.
fn per_sample_losses<T: Scalar>(
    w: &DenseMatrix<T>,
    wv: &DenseMatrix<T>,
    tokens: &DenseMatrix<T>,
    phi: &DenseMatrix<T>,
) -> Result<Vec<T>> {
    let teacher = wv.matmul(tokens)?;
    let student = w.matmul(phi)?;
    let diff = teacher.sub(&student)?;
    let mut out = Vec::with_capacity(diff.cols());
    for i in 0..diff.cols() {
        let mut sq = T::zero();
        for a in 0..diff.rows() {
            let e = diff.get(a, i);
            sq += e * e;
        }
        out.push(sq);
    }
    Ok(out)
}

/// Compares target-domain risks of students distilled from a low-MMD and a
/// high-MMD prompt sample and checks the risk-gap bounds.
///
/// When `require_main` is set the small-step bound must be evaluable, i.e.
/// 2 eta M_phi^2 < 1; otherwise a too-large step size simply leaves
/// `rhs_main` empty and only the exact bound is evaluated.
#[allow(clippy::too_many_arguments)]
pub fn risk_gap_check<T: Scalar>(
    target: &DistributionSample<T>,
    prompt_good: &DistributionSample<T>,
    prompt_bad: &DistributionSample<T>,
    wv: &DenseMatrix<T>,
    wk: &DenseMatrix<T>,
    map: &FeatureMap<T>,
    eta: T,
    require_main: bool,
) -> Result<RiskGapReport<T>> {
    check_eta(eta)?;
    check_explicit_map(map)?;

    let (mmd_g_raw, se_g_raw) = mmd_with_std_err(target, prompt_good, map, wk)?;
    let (mmd_b_raw, se_b_raw) = mmd_with_std_err(target, prompt_bad, map, wk)?;
    let swapped = mmd_g_raw > mmd_b_raw;
    let (good, bad, mmd_good, mmd_bad, se_good, se_bad) = if swapped {
        (prompt_bad, prompt_good, mmd_b_raw, mmd_g_raw, se_b_raw, se_g_raw)
    } else {
        (prompt_good, prompt_bad, mmd_g_raw, mmd_b_raw, se_g_raw, se_b_raw)
    };
    let delta_mmd = mmd_bad - mmd_good;
    let delta_mmd_std_err = se_good + se_bad;

    let w_good = one_step_weight(wv, &cross_moment(map, wk, good)?.matrix, eta)?;
    let w_bad = one_step_weight(wv, &cross_moment(map, wk, bad)?.matrix, eta)?;

    let phi_target = sample_features(map, wk, target)?;
    let losses_good = per_sample_losses(&w_good, wv, target.tokens(), &phi_target)?;
    let losses_bad = per_sample_losses(&w_bad, wv, target.tokens(), &phi_target)?;
    let n = T::of_usize(target.len());
    let diffs: Vec<T> = losses_bad
        .iter()
        .zip(&losses_good)
        .map(|(b, g)| *b - *g)
        .collect();
    let lhs = diffs.iter().copied().sum::<T>() / n;
    let lhs_std_err = if target.len() > 1 {
        let var = diffs.iter().map(|d| (*d - lhs) * (*d - lhs)).sum::<T>()
            / (n - T::one());
        (var / n).sqrt()
    } else {
        T::zero()
    };

    // Merge caps: M_phi over all three samples, M_T over the teacher outputs
    // on all three (the one-step weights average teacher terms over prompts).
    let phi_good = sample_features(map, wk, good)?;
    let phi_bad = sample_features(map, wk, bad)?;
    let m_phi = merged(
        target
            .caps()
            .m_phi
            .max(good.caps().m_phi)
            .max(bad.caps().m_phi),
        max_column_norm(&phi_target)
            .max(max_column_norm(&phi_good))
            .max(max_column_norm(&phi_bad)),
    );
    let teacher_sup = [target, good, bad]
        .iter()
        .map(|s| wv.matmul(s.tokens()).map(|out| max_column_norm(&out)))
        .collect::<Result<Vec<T>>>()?
        .into_iter()
        .fold(T::zero(), T::max);
    let m_t = merged(
        target.caps().m_t.max(good.caps().m_t).max(bad.caps().m_t),
        teacher_sup,
    );

    let step_size_product = T::of(2.0) * eta * m_phi * m_phi;
    if require_main && step_size_product >= T::one() {
        return Err(Error::StepSizeTooLarge(step_size_product.as_f64()));
    }

    let base = T::of(4.0) * eta * m_t * m_t * m_phi * m_phi;
    let quadratic = eta * base * m_phi * m_phi * delta_mmd * delta_mmd;
    let rhs_exact = exact_gap_bound(eta, m_t, m_phi, delta_mmd);
    let exact_slope = base * (T::one() + step_size_product)
        + T::of(2.0) * eta * base * m_phi * m_phi * delta_mmd;
    let margin_std_err_exact = lhs_std_err + exact_slope * delta_mmd_std_err;

    let (rhs_main, violated_main, margin_std_err_main) = if step_size_product < T::one() {
        let rhs = T::of(2.0) * base * delta_mmd + quadratic;
        let slope =
            T::of(2.0) * base + T::of(2.0) * eta * base * m_phi * m_phi * delta_mmd;
        (
            Some(rhs),
            Some(lhs > rhs),
            Some(lhs_std_err + slope * delta_mmd_std_err),
        )
    } else {
        (None, None, None)
    };

    Ok(RiskGapReport {
        lhs,
        lhs_std_err,
        mmd_good,
        mmd_bad,
        delta_mmd,
        delta_mmd_std_err,
        swapped,
        rhs_main,
        rhs_exact,
        violated_main,
        violated_exact: lhs > rhs_exact,
        margin_std_err_main,
        margin_std_err_exact,
        constants: RiskGapConstants {
            eta,
            m_t,
            m_phi,
            step_size_product,
        },
    })
}
