//! Synthetic task generation: attention weights with pinned Frobenius norms,
//! token draws from N(0, I/d) rescaled into the declared norm cap, and the
//! mean-shift / covariance-scale / mixture prompt families.
//!
//! Everything here is a pure function of (config, seed): the same inputs
//! reproduce the same matrices bitwise, which is what makes report bundles
//! re-runnable. Sub-draws always consume seeds derived from the caller's
//! seed with fixed stream indices rather than sharing one generator, so
//! adding a draw never perturbs its siblings.

use icl_kd_core::attention::{AttentionWeights, TokenMatrix};
use icl_kd_core::bounds::TokenSampler;
use icl_kd_core::matrix::DenseMatrix;
use icl_kd_core::rng::{derive_seed, normal_matrix, normal_vec, stream, SeedRng};
use icl_kd_core::shift::{DeclaredCaps, DistributionSample, SampleLabel};
use rand::Rng;

use crate::config::{ExperimentConfig, NormCaps, ShiftFamily};
use crate::error::Result;

/// Gaussian matrix rescaled to Frobenius norm exactly `fro` (zero stays
/// zero, which cannot happen for positive-size Gaussian draws).
pub fn rescaled_gaussian(rows: usize, cols: usize, fro: f64, rng: &mut SeedRng) -> DenseMatrix<f64> {
    let raw = normal_matrix::<f64>(rows, cols, rng);
    let norm = icl_kd_core::matrix::frobenius_norm(&raw);
    if norm == 0.0 {
        return raw;
    }
    raw.scaled(fro / norm)
}

/// Attention projections with ‖Wq‖_F = ‖Wk‖_F = `weight_cap` and
/// ‖Wv‖_F = `m_v` (which also caps its spectral norm).
pub fn attention_projections(
    d: usize,
    k: usize,
    m: usize,
    caps: &NormCaps,
    seed: u64,
) -> Result<AttentionWeights<f64>> {
    let wq = rescaled_gaussian(k, d, caps.weight_cap, &mut stream(derive_seed(seed, 0)));
    let wk = rescaled_gaussian(k, d, caps.weight_cap, &mut stream(derive_seed(seed, 1)));
    let wv = rescaled_gaussian(m, d, caps.m_v, &mut stream(derive_seed(seed, 2)));
    Ok(AttentionWeights::new(wq, wk, wv, true)?)
}

fn clip_column_norms(tokens: &mut DenseMatrix<f64>, m_x: f64) {
    for i in 0..tokens.cols() {
        let original: Vec<f64> = (0..tokens.rows()).map(|a| tokens.get(a, i)).collect();
        let norm = original.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= m_x {
            continue;
        }
        // One rounding step can leave the rescaled norm an ulp above the
        // cap, and sample constructors treat the cap as a hard invariant,
        // so shrink the scale until the recomputed norm satisfies it.
        let mut scale = m_x / norm;
        loop {
            for (a, v) in original.iter().enumerate() {
                tokens.set(a, i, v * scale);
            }
            let clipped = (0..tokens.rows())
                .map(|a| tokens.get(a, i).powi(2))
                .sum::<f64>()
                .sqrt();
            if clipped <= m_x {
                break;
            }
            scale *= 1.0 - 2.0 * f64::EPSILON;
        }
    }
}

/// Target tokens: columns from N(0, I/d), rescaled onto the cap sphere
/// whenever they land outside it, so every norm is ≤ `m_x` exactly.
pub fn target_tokens(d: usize, n: usize, m_x: f64, rng: &mut SeedRng) -> DenseMatrix<f64> {
    let mut tokens = normal_matrix::<f64>(d, n, rng).scaled(1.0 / (d as f64).sqrt());
    clip_column_norms(&mut tokens, m_x);
    tokens
}

/// Prompt tokens from the configured family: a two-component mixture of
/// N(0, s·I/d) and N(μ·e1, s·I/d) with weight `mixture_weight` on the
/// shifted component, clipped to the same cap as the target.
pub fn shifted_tokens(
    d: usize,
    n: usize,
    shift: &ShiftFamily,
    m_x: f64,
    rng: &mut SeedRng,
) -> DenseMatrix<f64> {
    let entry_std = (shift.covariance_scale / d as f64).sqrt();
    let mut tokens = DenseMatrix::zeros(d, n);
    for i in 0..n {
        // Component choice first, then the Gaussian column, in a fixed
        // order so the draw sequence is reproducible.
        let shifted = rng.random::<f64>() < shift.mixture_weight;
        let column = normal_vec::<f64>(d, rng);
        for (a, entry) in column.iter().enumerate() {
            let mean = if shifted && a == 0 { shift.mean_shift } else { 0.0 };
            tokens.set(a, i, mean + entry_std * entry);
        }
    }
    clip_column_norms(&mut tokens, m_x);
    tokens
}

/// Declared caps carried by every distribution sample a config generates.
pub fn declared_caps(caps: &NormCaps) -> Result<DeclaredCaps<f64>> {
    Ok(DeclaredCaps::new(caps.m_x, caps.m_phi, caps.m_v, caps.m_t)?)
}

/// Target-labelled sample of `n` tokens at derived seed `seed`.
pub fn target_sample(
    d: usize,
    n: usize,
    caps: &NormCaps,
    seed: u64,
) -> Result<DistributionSample<f64>> {
    let tokens = target_tokens(d, n, caps.m_x, &mut stream(seed));
    Ok(DistributionSample::new(
        SampleLabel::Target,
        tokens,
        declared_caps(caps)?,
    )?)
}

/// Prompt-labelled sample drawn from `shift`.
pub fn prompt_sample(
    d: usize,
    n: usize,
    shift: &ShiftFamily,
    caps: &NormCaps,
    seed: u64,
) -> Result<DistributionSample<f64>> {
    let tokens = shifted_tokens(d, n, shift, caps.m_x, &mut stream(seed));
    Ok(DistributionSample::new(
        SampleLabel::Prompt,
        tokens,
        declared_caps(caps)?,
    )?)
}

/// Reusable target-distribution token source for resampling estimators.
#[derive(Clone, Copy, Debug)]
pub struct GaussianTokenSampler {
    pub d: usize,
    pub m_x: f64,
}

impl TokenSampler<f64> for GaussianTokenSampler {
    fn sample(&self, n: usize, seed: u64) -> icl_kd_core::Result<DenseMatrix<f64>> {
        Ok(target_tokens(self.d, n, self.m_x, &mut stream(seed)))
    }
}

/// One fully drawn instance: projections, an attention context (N
/// demonstrations, M queries, one next query), and a target token sample.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub weights: AttentionWeights<f64>,
    pub tokens: TokenMatrix<f64>,
    pub target: DenseMatrix<f64>,
}

/// Draws a task at the configured dimensions, deterministically in
/// (`cfg`, `seed`).
pub fn generate_synthetic_task(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticTask> {
    let dims = cfg.dims;
    let weights =
        attention_projections(dims.d, dims.k, dims.m, &cfg.caps, derive_seed(seed, 0))?;
    let demos = target_tokens(
        dims.d,
        dims.n_demo,
        cfg.caps.m_x,
        &mut stream(derive_seed(seed, 1)),
    );
    let queries = target_tokens(
        dims.d,
        dims.m_query,
        cfg.caps.m_x,
        &mut stream(derive_seed(seed, 2)),
    );
    let next = target_tokens(dims.d, 1, cfg.caps.m_x, &mut stream(derive_seed(seed, 3)));
    let tokens = TokenMatrix::new(demos, queries, next.column(0))?;
    let target = target_tokens(
        dims.d,
        cfg.samples.n_target,
        cfg.caps.m_x,
        &mut stream(derive_seed(seed, 4)),
    );
    Ok(SyntheticTask {
        weights,
        tokens,
        target,
    })
}
