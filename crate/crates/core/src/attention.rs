//! Attention forward passes and their gradient-descent dual forms.
//!
//! Two equivalences are implemented side by side so they can be checked
//! against each other numerically:
//!
//! 1. Linear duality: a one-step gradient-descent update of a linear model on
//!    samples (xᵢ, yᵢ) predicts W₀ x_test + LA(E, X, x_test), where
//!    LA(V, K, q) = V(Kᵀq) is linear attention over the per-sample error
//!    signals eᵢ = −η ∇_ŷ ℒ(yᵢ, W₀xᵢ).
//! 2. Softmax duality: the softmax-attention output over the full context
//!    [X_D, X_Q] equals a kernel-form prediction in which one token block
//!    plays the role of implicit initial weights and the other supplies a
//!    one-step gradient correction, both normalized by the shared partition
//!    value D′ = Σᵢ exp(scoreᵢ).
//!
//! The forward pass ([`softmax_attention`]) uses the numerically stable
//! max-subtracted softmax; the dual forms ([`dual_gd_prediction`],
//! [`split_demo_query`]) deliberately use raw exponentials normalized by D′,
//! so agreement between the two is a meaningful numerical check rather than
//! the same code path twice.

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureMapKind};
use crate::matrix::{column_softmax, dot, vector_max_abs_diff, DenseMatrix};
use crate::scalar::Scalar;

/// Context tokens for one attention instance: N demonstration columns, M
/// query columns, and the next query x′ the prediction is made for.
#[derive(Debug, Clone)]
pub struct TokenMatrix<T> {
    demonstrations: DenseMatrix<T>,
    queries: DenseMatrix<T>,
    next_query: Vec<T>,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(
        demonstrations: DenseMatrix<T>,
        queries: DenseMatrix<T>,
        next_query: Vec<T>,
    ) -> Result<Self> {
        let d = next_query.len();
        if d == 0 {
            return Err(Error::DimensionMismatch(
                "next query must have at least one component".into(),
            ));
        }
        if demonstrations.rows() != d || queries.rows() != d {
            return Err(Error::DimensionMismatch(format!(
                "token blocks with {} and {} rows, next query of length {d}",
                demonstrations.rows(),
                queries.rows()
            )));
        }
        if next_query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("next query".into()));
        }
        Ok(Self {
            demonstrations,
            queries,
            next_query,
        })
    }

    /// Context with demonstrations only (M = 0).
    pub fn demonstrations_only(demonstrations: DenseMatrix<T>, next_query: Vec<T>) -> Result<Self> {
        let d = next_query.len();
        Self::new(demonstrations, DenseMatrix::zeros(d, 0), next_query)
    }

    pub fn embedding_dim(&self) -> usize {
        self.next_query.len()
    }

    pub fn n_demonstrations(&self) -> usize {
        self.demonstrations.cols()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.cols()
    }

    pub fn demonstrations(&self) -> &DenseMatrix<T> {
        &self.demonstrations
    }

    pub fn queries(&self) -> &DenseMatrix<T> {
        &self.queries
    }

    pub fn next_query(&self) -> &[T] {
        &self.next_query
    }

    /// Full context [X_D | X_Q], demonstrations first.
    pub fn full_context(&self) -> DenseMatrix<T> {
        self.demonstrations
            .hstack(&self.queries)
            .expect("blocks share the embedding dimension by construction")
    }
}

/// Projection weights of a single attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T> {
    wq: DenseMatrix<T>,
    wk: DenseMatrix<T>,
    wv: DenseMatrix<T>,
    /// Divide scores by √d (d = embedding dim) as in the usual attention
    /// convention; switch off to reproduce the unscaled simplification.
    pub scale_by_sqrt_d: bool,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(
        wq: DenseMatrix<T>,
        wk: DenseMatrix<T>,
        wv: DenseMatrix<T>,
        scale_by_sqrt_d: bool,
    ) -> Result<Self> {
        if wq.rows() != wk.rows() {
            return Err(Error::DimensionMismatch(format!(
                "query and key projections map into different dims ({} vs {})",
                wq.rows(),
                wk.rows()
            )));
        }
        if wq.cols() != wk.cols() || wq.cols() != wv.cols() || wq.cols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "projection input dims disagree: Wq {}x{}, Wk {}x{}, Wv {}x{}",
                wq.rows(),
                wq.cols(),
                wk.rows(),
                wk.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        if !wq.is_finite() || !wk.is_finite() || !wv.is_finite() {
            return Err(Error::NonFiniteInput("attention weights".into()));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            scale_by_sqrt_d,
        })
    }

    pub fn wq(&self) -> &DenseMatrix<T> {
        &self.wq
    }

    pub fn wk(&self) -> &DenseMatrix<T> {
        &self.wk
    }

    pub fn wv(&self) -> &DenseMatrix<T> {
        &self.wv
    }

    pub fn embedding_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn key_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.wv.rows()
    }

    /// Score scale: 1/√d when enabled, 1 otherwise.
    fn score_scale(&self) -> T {
        if self.scale_by_sqrt_d {
            T::one() / T::of_usize(self.embedding_dim()).sqrt()
        } else {
            T::one()
        }
    }

    /// Keys for a token block with the score scale folded in:
    /// (Wᴷ block) / √d when scaling is enabled. Kernel values of these keys
    /// against the unscaled projected query reproduce exp(score) exactly.
    pub fn scaled_keys(&self, block: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        Ok(self.wk.matmul(block)?.scaled(self.score_scale()))
    }

    /// Projected next query Wᑫ x′ (unscaled; the scale lives on the keys).
    pub fn projected_query(&self, next_query: &[T]) -> Result<Vec<T>> {
        self.wq.matvec(next_query)
    }
}

/// Diagnostic output of [`split_demo_query`].
#[derive(Debug, Clone)]
pub struct DualityReport<T> {
    /// Stable softmax-attention forward pass over the full context.
    pub attention_output: Vec<T>,
    /// w0_term + gradient_term, computed in raw kernel form.
    pub dual_prediction: Vec<T>,
    /// Demonstration-block addend: the implicit initial weights applied to
    /// the projected next query.
    pub w0_term: Vec<T>,
    /// Query-block addend: the implicit one-step gradient correction.
    pub gradient_term: Vec<T>,
    /// Shared partition value D′ over all context tokens.
    pub partition_value: T,
    /// Componentwise gap between dual_prediction and attention_output.
    pub max_abs_diff: T,
}

/// Supported training losses for the one-step linear update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// ℒ(y, ŷ) = ½‖y − ŷ‖².
    Squared,
}

/// Linear attention LA(V, K, q) = V(Kᵀq) = Σᵢ vᵢ (kᵢᵀ q).
pub fn linear_attention<T: Scalar>(
    values: &DenseMatrix<T>,
    keys: &DenseMatrix<T>,
    query: &[T],
) -> Result<Vec<T>> {
    if values.cols() != keys.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} value columns vs {} key columns",
            values.cols(),
            keys.cols()
        )));
    }
    let attn = keys.transpose().matvec(query)?;
    values.matvec(&attn)
}

/// One gradient-descent step of a linear model W on samples (xᵢ, yᵢ),
/// evaluated at `x_test`.
///
/// With the squared loss the per-sample error signal is eᵢ = η(yᵢ − W₀xᵢ);
/// the updated weights are Ŵ = W₀ + Σᵢ eᵢ ⊗ xᵢ and the return value is
/// Ŵ x_test. `eta = 0` is accepted as the degenerate no-op step for tests.
pub fn one_step_linear_gd<T: Scalar>(
    w0: &DenseMatrix<T>,
    inputs: &DenseMatrix<T>,
    targets: &DenseMatrix<T>,
    loss: LossKind,
    eta: T,
    x_test: &[T],
) -> Result<Vec<T>> {
    if eta < T::zero() || !eta.is_finite() {
        return Err(Error::NonPositiveLearningRate(eta.as_f64()));
    }
    if inputs.cols() != targets.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs vs {} targets",
            inputs.cols(),
            targets.cols()
        )));
    }
    if w0.cols() != inputs.rows() || w0.rows() != targets.rows() {
        return Err(Error::DimensionMismatch(format!(
            "W0 is {}x{}, samples map {} -> {}",
            w0.rows(),
            w0.cols(),
            inputs.rows(),
            targets.rows()
        )));
    }
    let LossKind::Squared = loss;

    // Accumulate the rank-one updates sample by sample; the linear-attention
    // dual is computed by a different summation order, so comparing the two
    // exercises the identity rather than one implementation twice.
    let mut w_hat = w0.clone();
    for i in 0..inputs.cols() {
        let x = inputs.column(i);
        let prediction = w0.matvec(&x)?;
        let error: Vec<T> = targets
            .column(i)
            .iter()
            .zip(&prediction)
            .map(|(y, p)| eta * (*y - *p))
            .collect();
        w_hat.add_outer(T::one(), &error, &x)?;
    }
    w_hat.matvec(x_test)
}

/// Raw (unnormalized) attention scores of every context token against the
/// projected next query, demonstrations first.
fn context_scores<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if w.embedding_dim() != tokens.embedding_dim() {
        return Err(Error::DimensionMismatch(format!(
            "weights expect embedding dim {}, tokens have {}",
            w.embedding_dim(),
            tokens.embedding_dim()
        )));
    }
    let q = w.projected_query(tokens.next_query())?;
    let block_scores = |block: &DenseMatrix<T>| -> Result<Vec<T>> {
        let keys = w.scaled_keys(block)?;
        Ok((0..keys.cols())
            .map(|i| dot(&keys.column(i), &q))
            .collect())
    };
    Ok((
        block_scores(tokens.demonstrations())?,
        block_scores(tokens.queries())?,
    ))
}

/// Softmax-attention forward pass:
/// Wⱽ[X_D, X_Q] · softmax((Wᴷ[X_D, X_Q])ᵀ(Wᑫx′) · scale).
pub fn softmax_attention<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
) -> Result<Vec<T>> {
    let (demo_scores, query_scores) = context_scores(w, tokens)?;
    let total = demo_scores.len() + query_scores.len();
    if total == 0 {
        return Err(Error::EmptyContext(
            "softmax attention over zero tokens".into(),
        ));
    }
    let mut scores = DenseMatrix::zeros(total, 1);
    for (i, s) in demo_scores.iter().chain(&query_scores).enumerate() {
        scores.set(i, 0, *s);
    }
    let weights = column_softmax(&scores);
    let values = w.wv.matmul(&tokens.full_context())?;
    values.matvec(&weights.column(0))
}

/// Partition value D′ = Σᵢ exp(scoreᵢ) over all N + M context tokens.
pub fn partition_function<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
) -> Result<T> {
    let (demo_scores, query_scores) = context_scores(w, tokens)?;
    if demo_scores.is_empty() && query_scores.is_empty() {
        return Err(Error::EmptyContext(
            "partition function over zero tokens".into(),
        ));
    }
    Ok(demo_scores
        .iter()
        .chain(&query_scores)
        .map(|s| s.exp())
        .sum())
}

/// Learning rate implied by the partition value: η = c / D′.
pub fn implied_learning_rate<T: Scalar>(d_prime: T, c: T) -> Result<T> {
    if !d_prime.is_finite() || d_prime <= T::zero() {
        return Err(Error::NonPositiveInput {
            name: "d_prime",
            value: d_prime.as_f64(),
        });
    }
    if !c.is_finite() || c <= T::zero() {
        return Err(Error::NonPositiveInput {
            name: "c",
            value: c.as_f64(),
        });
    }
    Ok(c / d_prime)
}

/// Per-block kernel values κᵢ = φ(Wᴷxᵢ·scale)ᵀφ(Wᑫx′) for the dual forms.
///
/// The score scale is folded into the keys, so in exact-kernel mode
/// κᵢ = exp(scoreᵢ) and Σκᵢ reproduces [`partition_function`] exactly.
fn block_kernel_values<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
    map: &FeatureMap<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if map.input_dim() != w.key_dim() {
        return Err(Error::DimensionMismatch(format!(
            "map input_dim {} vs key dim {}",
            map.input_dim(),
            w.key_dim()
        )));
    }
    let q = DenseMatrix::from_columns(&[w.projected_query(tokens.next_query())?])?;
    let kernel_column = |block: &DenseMatrix<T>| -> Result<Vec<T>> {
        if block.cols() == 0 {
            return Ok(Vec::new());
        }
        let keys = w.scaled_keys(block)?;
        Ok(map.kernel_gram(&keys, &q)?.column(0))
    };
    Ok((
        kernel_column(tokens.demonstrations())?,
        kernel_column(tokens.queries())?,
    ))
}

/// Gradient-descent dual of the softmax-attention forward pass, in kernel
/// form: (1/D′) Σᵢ (Wⱽxᵢ) κᵢ over all context tokens, where the query block
/// plays the role of the implicit initial weights applied to φ(Wᑫx′) and the
/// demonstration block supplies the one-step gradient term, both sharing the
/// same normalization D′.
///
/// Only `exact_kernel` (and, for structural tests, `identity`) maps are
/// accepted: a sampled feature map would turn an exact identity into an
/// approximate one, and approximation belongs to the shift-analysis layer.
pub fn dual_gd_prediction<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
    map: &FeatureMap<T>,
) -> Result<Vec<T>> {
    if map.kind() == FeatureMapKind::PositiveRandom {
        return Err(Error::UnsupportedMapKind(
            "dual_gd_prediction requires the exact kernel (or identity for tests); \
             sampled feature maps would break the exact identity"
                .into(),
        ));
    }
    let (demo_kernels, query_kernels) = block_kernel_values(w, tokens, map)?;
    if demo_kernels.is_empty() && query_kernels.is_empty() {
        return Err(Error::EmptyContext("dual prediction over zero tokens".into()));
    }
    let partition: T = demo_kernels.iter().chain(&query_kernels).copied().sum();
    let values_demo = w.wv.matmul(tokens.demonstrations())?;
    let values_query = w.wv.matmul(tokens.queries())?;
    let mut out = vec![T::zero(); w.output_dim()];
    let mut accumulate = |values: &DenseMatrix<T>, kernels: &[T]| {
        for (i, k) in kernels.iter().enumerate() {
            for (o, out_o) in out.iter_mut().enumerate() {
                *out_o += values.get(o, i) * *k;
            }
        }
    };
    accumulate(&values_demo, &demo_kernels);
    accumulate(&values_query, &query_kernels);
    for v in out.iter_mut() {
        *v = *v / partition;
    }
    Ok(out)
}

/// Splits the attention output into its demonstration-block addend (the
/// implicit initialization, `w0_term`) and query-block addend (the implicit
/// gradient step, `gradient_term`), both in exact kernel form over the shared
/// partition value, and reports the gap to the stable forward pass.
pub fn split_demo_query<T: Scalar>(
    w: &AttentionWeights<T>,
    tokens: &TokenMatrix<T>,
) -> Result<DualityReport<T>> {
    if tokens.n_demonstrations() + tokens.n_queries() == 0 {
        return Err(Error::EmptyContext("split over zero tokens".into()));
    }
    let map = FeatureMap::build(crate::features::FeatureMapSpec::exact_kernel(w.key_dim()))?;
    let (demo_kernels, query_kernels) = block_kernel_values(w, tokens, &map)?;
    let partition: T = demo_kernels.iter().chain(&query_kernels).copied().sum();

    let block_term = |block: &DenseMatrix<T>, kernels: &[T]| -> Result<Vec<T>> {
        let values = w.wv.matmul(block)?;
        let mut term = vec![T::zero(); w.output_dim()];
        for (i, k) in kernels.iter().enumerate() {
            for (o, t) in term.iter_mut().enumerate() {
                *t += values.get(o, i) * *k / partition;
            }
        }
        Ok(term)
    };
    let w0_term = block_term(tokens.demonstrations(), &demo_kernels)?;
    let gradient_term = block_term(tokens.queries(), &query_kernels)?;
    let dual_prediction: Vec<T> = w0_term
        .iter()
        .zip(&gradient_term)
        .map(|(a, b)| *a + *b)
        .collect();
    let attention_output = softmax_attention(w, tokens)?;
    let max_abs_diff = vector_max_abs_diff(&dual_prediction, &attention_output);
    Ok(DualityReport {
        attention_output,
        dual_prediction,
        w0_term,
        gradient_term,
        partition_value: partition,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMapSpec;
    use crate::matrix::vector_norm;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, entries: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::from_vec(rows, cols, entries.to_vec()).unwrap()
    }

    /// Random attention instance with modest weight scale so scores stay in a
    /// comfortably exponentiable range.
    fn random_instance(
        d: usize,
        k: usize,
        m_out: usize,
        n: usize,
        m: usize,
        seed: u64,
    ) -> (AttentionWeights<f64>, TokenMatrix<f64>) {
        let mut stream = rng::stream(seed);
        let scale = 0.5;
        let wq = rng::normal_matrix::<f64>(k, d, &mut stream).scaled(scale);
        let wk = rng::normal_matrix::<f64>(k, d, &mut stream).scaled(scale);
        let wv = rng::normal_matrix::<f64>(m_out, d, &mut stream).scaled(scale);
        let demos = rng::normal_matrix::<f64>(d, n, &mut stream).scaled(scale);
        let queries = rng::normal_matrix::<f64>(d, m, &mut stream).scaled(scale);
        let next = rng::normal_vec::<f64>(d, &mut stream)
            .iter()
            .map(|v| v * scale)
            .collect();
        (
            AttentionWeights::new(wq, wk, wv, true).unwrap(),
            TokenMatrix::new(demos, queries, next).unwrap(),
        )
    }

    #[test]
    fn linear_attention_with_identity_projections_returns_query() {
        let eye = DenseMatrix::<f64>::identity(2);
        let out = linear_attention(&eye, &eye, &[2.0, 3.0]).unwrap();
        assert_eq!(out, vec![2.0, 3.0]);
    }

    #[test]
    fn linear_attention_single_pair_is_an_outer_product() {
        let v = mat(2, 1, &[1.0, 0.0]);
        let k = mat(2, 1, &[0.0, 1.0]);
        let out = linear_attention(&v, &k, &[0.0, 5.0]).unwrap();
        assert_eq!(out, vec![5.0, 0.0]);
    }

    #[test]
    fn linear_attention_matches_explicit_sum_oracle() {
        let mut stream = rng::stream(2);
        let values = rng::normal_matrix::<f64>(4, 6, &mut stream);
        let keys = rng::normal_matrix::<f64>(4, 6, &mut stream);
        let q = rng::normal_vec::<f64>(4, &mut stream);
        let fast = linear_attention(&values, &keys, &q).unwrap();
        // Oracle: Σᵢ vᵢ (kᵢᵀ q) accumulated pair by pair.
        let mut oracle = vec![0.0; 4];
        for i in 0..6 {
            let weight = dot(&keys.column(i), &q);
            for (o, v) in oracle.iter_mut().zip(values.column(i)) {
                *o += v * weight;
            }
        }
        assert!(vector_max_abs_diff(&fast, &oracle) <= 1e-13);
    }

    #[test]
    fn zero_learning_rate_returns_the_initial_prediction() {
        let w0 = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let x = mat(2, 1, &[1.0, 1.0]);
        let y = mat(2, 1, &[0.0, 0.0]);
        let out =
            one_step_linear_gd(&w0, &x, &y, LossKind::Squared, 0.0, &[1.0, -1.0]).unwrap();
        assert_eq!(out, w0.matvec(&[1.0, -1.0]).unwrap());
    }

    #[test]
    fn single_sample_step_from_zero_weights_has_closed_form() {
        // W0 = 0, x = e1, y = [2,0], eta = 1: error signal is y itself and the
        // update is y ⊗ x, so the prediction at x_test = e1 is y.
        let w0 = DenseMatrix::<f64>::zeros(2, 2);
        let x = mat(2, 1, &[1.0, 0.0]);
        let y = mat(2, 1, &[2.0, 0.0]);
        let out =
            one_step_linear_gd(&w0, &x, &y, LossKind::Squared, 1.0, &[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![2.0, 0.0]);
    }

    #[test]
    fn negative_learning_rate_is_rejected() {
        let w0 = DenseMatrix::<f64>::zeros(1, 1);
        let x = mat(1, 1, &[1.0]);
        let err =
            one_step_linear_gd(&w0, &x, &x, LossKind::Squared, -0.5, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::NonPositiveLearningRate(_)));
    }

    #[test]
    fn gd_step_equals_linear_attention_on_error_signals() {
        let mut stream = rng::stream(13);
        let w0 = rng::normal_matrix::<f64>(3, 4, &mut stream);
        let inputs = rng::normal_matrix::<f64>(4, 5, &mut stream);
        let targets = rng::normal_matrix::<f64>(3, 5, &mut stream);
        let x_test = rng::normal_vec::<f64>(4, &mut stream);
        let eta = 0.3;
        let gd = one_step_linear_gd(&w0, &inputs, &targets, LossKind::Squared, eta, &x_test)
            .unwrap();
        // Dual side: error signals as values, inputs as keys.
        let mut errors = DenseMatrix::<f64>::zeros(3, 5);
        for i in 0..5 {
            let pred = w0.matvec(&inputs.column(i)).unwrap();
            for (o, (t, p)) in targets.column(i).iter().zip(&pred).enumerate() {
                errors.set(o, i, eta * (t - p));
            }
        }
        let base = w0.matvec(&x_test).unwrap();
        let attn = linear_attention(&errors, &inputs, &x_test).unwrap();
        let dual: Vec<f64> = base.iter().zip(&attn).map(|(a, b)| a + b).collect();
        assert!(vector_max_abs_diff(&gd, &dual) <= 1e-12);
    }

    #[test]
    fn attention_over_a_single_token_returns_its_value() {
        let eye = DenseMatrix::<f64>::identity(2);
        let w = AttentionWeights::new(eye.clone(), eye.clone(), eye, true).unwrap();
        let tokens =
            TokenMatrix::demonstrations_only(mat(2, 1, &[0.7, -0.3]), vec![1.0, 1.0]).unwrap();
        let out = softmax_attention(&w, &tokens).unwrap();
        assert!(vector_max_abs_diff(&out, &[0.7, -0.3]) <= 1e-15);
    }

    #[test]
    fn attention_over_identical_tokens_returns_their_common_value() {
        let mut stream = rng::stream(4);
        let wq = rng::normal_matrix::<f64>(3, 2, &mut stream);
        let wk = rng::normal_matrix::<f64>(3, 2, &mut stream);
        let wv = rng::normal_matrix::<f64>(2, 2, &mut stream);
        let w = AttentionWeights::new(wq, wk, wv.clone(), true).unwrap();
        let x = [0.4, -1.1];
        let tokens = TokenMatrix::new(
            mat(2, 1, &x),
            mat(2, 1, &x),
            vec![0.2, 0.9],
        )
        .unwrap();
        let out = softmax_attention(&w, &tokens).unwrap();
        let expected = wv.matvec(&x).unwrap();
        assert!(vector_max_abs_diff(&out, &expected) <= 1e-14);
    }

    #[test]
    fn attention_matches_unstabilized_direct_composition() {
        // Oracle: raw exp-then-normalize (no max subtraction) composed by
        // hand. Scores here are small, so the naive form is safe.
        let (w, tokens) = random_instance(4, 3, 2, 3, 2, 21);
        let out = softmax_attention(&w, &tokens).unwrap();

        let q = w.wq().matvec(tokens.next_query()).unwrap();
        let context = tokens.full_context();
        let keys = w.wk().matmul(&context).unwrap();
        let scale = 1.0 / (4.0_f64).sqrt();
        let raw: Vec<f64> = (0..keys.cols())
            .map(|i| (dot(&keys.column(i), &q) * scale).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let values = w.wv().matmul(&context).unwrap();
        let mut oracle = vec![0.0; 2];
        for (i, r) in raw.iter().enumerate() {
            for (o, v) in oracle.iter_mut().zip(values.column(i)) {
                *o += v * r / total;
            }
        }
        assert!(vector_max_abs_diff(&out, &oracle) <= 1e-13);
    }

    #[test]
    fn dual_prediction_reduces_to_attention_without_queries() {
        let (w, tokens) = random_instance(4, 3, 2, 5, 0, 31);
        let map = FeatureMap::build(FeatureMapSpec::exact_kernel(3)).unwrap();
        let dual = dual_gd_prediction(&w, &tokens, &map).unwrap();
        let attention = softmax_attention(&w, &tokens).unwrap();
        let rel = vector_max_abs_diff(&dual, &attention) / vector_norm(&attention);
        assert!(rel <= 1e-12);
    }

    #[test]
    fn dual_prediction_reduces_to_attention_without_demonstrations() {
        let (w, tokens) = random_instance(4, 3, 2, 0, 4, 32);
        let map = FeatureMap::build(FeatureMapSpec::exact_kernel(3)).unwrap();
        let dual = dual_gd_prediction(&w, &tokens, &map).unwrap();
        let attention = softmax_attention(&w, &tokens).unwrap();
        let rel = vector_max_abs_diff(&dual, &attention) / vector_norm(&attention);
        assert!(rel <= 1e-12);
    }

    #[test]
    fn dual_prediction_matches_attention_on_a_mixed_context() {
        let (w, tokens) = random_instance(4, 3, 2, 3, 2, 21);
        let map = FeatureMap::build(FeatureMapSpec::exact_kernel(3)).unwrap();
        let dual = dual_gd_prediction(&w, &tokens, &map).unwrap();
        let attention = softmax_attention(&w, &tokens).unwrap();
        let rel = vector_max_abs_diff(&dual, &attention) / vector_norm(&attention);
        assert!(rel <= 1e-12, "relative duality gap {rel}");
    }

    #[test]
    fn dual_prediction_rejects_sampled_feature_maps() {
        let (w, tokens) = random_instance(4, 3, 2, 3, 2, 21);
        let map = FeatureMap::build(FeatureMapSpec::positive_random(3, 16, 0)).unwrap();
        assert!(matches!(
            dual_gd_prediction(&w, &tokens, &map),
            Err(Error::UnsupportedMapKind(_))
        ));
    }

    #[test]
    fn split_without_queries_has_zero_gradient_term() {
        let (w, tokens) = random_instance(4, 3, 2, 5, 0, 33);
        let report = split_demo_query(&w, &tokens).unwrap();
        assert!(report.gradient_term.iter().all(|v| *v == 0.0));
        assert!(report.max_abs_diff <= 1e-12);
    }

    #[test]
    fn split_without_demonstrations_has_zero_w0_term() {
        let (w, tokens) = random_instance(4, 3, 2, 0, 4, 34);
        let report = split_demo_query(&w, &tokens).unwrap();
        assert!(report.w0_term.iter().all(|v| *v == 0.0));
        assert!(report.max_abs_diff <= 1e-12);
    }

    #[test]
    fn split_terms_sum_to_the_attention_output() {
        let (w, tokens) = random_instance(4, 3, 2, 3, 2, 21);
        let report = split_demo_query(&w, &tokens).unwrap();
        let sum: Vec<f64> = report
            .w0_term
            .iter()
            .zip(&report.gradient_term)
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(sum, report.dual_prediction);
        assert!(report.max_abs_diff <= 1e-12, "gap {}", report.max_abs_diff);
        let d_prime = partition_function(&w, &tokens).unwrap();
        assert_abs_diff_eq!(report.partition_value, d_prime, epsilon = 1e-12 * d_prime);
    }

    #[test]
    fn split_of_an_empty_context_is_rejected() {
        let eye = DenseMatrix::<f64>::identity(2);
        let w = AttentionWeights::new(eye.clone(), eye.clone(), eye, true).unwrap();
        let tokens = TokenMatrix::new(
            DenseMatrix::zeros(2, 0),
            DenseMatrix::zeros(2, 0),
            vec![1.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            split_demo_query(&w, &tokens),
            Err(Error::EmptyContext(_))
        ));
        assert!(matches!(
            partition_function(&w, &tokens),
            Err(Error::EmptyContext(_))
        ));
    }

    #[test]
    fn partition_of_zero_scores_counts_the_tokens() {
        let d = 3;
        let w = AttentionWeights::new(
            DenseMatrix::<f64>::identity(d),
            DenseMatrix::zeros(d, d),
            DenseMatrix::identity(d),
            true,
        )
        .unwrap();
        let mut stream = rng::stream(6);
        let tokens = TokenMatrix::new(
            rng::normal_matrix(d, 4, &mut stream),
            rng::normal_matrix(d, 3, &mut stream),
            rng::normal_vec(d, &mut stream),
        )
        .unwrap();
        assert_abs_diff_eq!(partition_function(&w, &tokens).unwrap(), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn partition_of_a_single_log_two_score_is_two() {
        let w = AttentionWeights::new(
            mat(1, 1, &[1.0]),
            mat(1, 1, &[2.0_f64.ln()]),
            mat(1, 1, &[1.0]),
            true, // sqrt(1) leaves the score untouched
        )
        .unwrap();
        let tokens = TokenMatrix::demonstrations_only(mat(1, 1, &[1.0]), vec![1.0]).unwrap();
        assert_abs_diff_eq!(partition_function(&w, &tokens).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn partition_matches_elementwise_exp_sum_oracle() {
        let (w, tokens) = random_instance(4, 3, 2, 3, 2, 21);
        let d_prime = partition_function(&w, &tokens).unwrap();
        let q = w.wq().matvec(tokens.next_query()).unwrap();
        let keys = w.wk().matmul(&tokens.full_context()).unwrap();
        let scale = 1.0 / (4.0_f64).sqrt();
        let oracle: f64 = (0..keys.cols())
            .map(|i| (dot(&keys.column(i), &q) * scale).exp())
            .sum();
        assert_abs_diff_eq!(d_prime, oracle, epsilon = 1e-12 * oracle);
    }

    #[test]
    fn implied_learning_rate_examples() {
        assert_eq!(implied_learning_rate(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(implied_learning_rate(4.0, 2.0).unwrap(), 0.5);
        assert!(matches!(
            implied_learning_rate(0.0, 1.0),
            Err(Error::NonPositiveInput { .. })
        ));
        assert!(matches!(
            implied_learning_rate(1.0, -2.0),
            Err(Error::NonPositiveInput { .. })
        ));
    }

    #[test]
    fn sharper_attention_implies_a_larger_learning_rate() {
        // Same tokens (the standard basis of R^4, so score_i is just the
        // i-th entry of Wk's first row), two key projections: a flat one
        // where every score is 0 and a sharp one with a single dominant
        // score and strictly negative remainder drawn from seed 17.
        let d = 4;
        let tokens = TokenMatrix::demonstrations_only(
            DenseMatrix::<f64>::identity(d),
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let wq = DenseMatrix::<f64>::identity(d);
        let wv = DenseMatrix::<f64>::identity(d);
        let flat = AttentionWeights::new(
            wq.clone(),
            DenseMatrix::zeros(d, d),
            wv.clone(),
            false,
        )
        .unwrap();
        let mut stream = rng::stream(17);
        let noise = rng::normal_vec::<f64>(d - 1, &mut stream);
        let mut wk_sharp = DenseMatrix::<f64>::zeros(d, d);
        for (i, n) in noise.iter().enumerate() {
            wk_sharp.set(0, i + 1, -n.abs() - 0.5);
        }
        let sharp = AttentionWeights::new(wq, wk_sharp, wv, false).unwrap();

        let d_flat = partition_function(&flat, &tokens).unwrap();
        let d_sharp = partition_function(&sharp, &tokens).unwrap();
        assert!(d_sharp < d_flat);
        let eta_flat = implied_learning_rate(d_flat, 1.0).unwrap();
        let eta_sharp = implied_learning_rate(d_sharp, 1.0).unwrap();
        assert!(eta_sharp > eta_flat);
    }

    #[test]
    fn linear_duality_holds_across_a_seeded_sweep() {
        for seed in 0..50u64 {
            let mut stream = rng::stream(1000 + seed);
            let w0 = rng::normal_matrix::<f64>(3, 4, &mut stream);
            let inputs = rng::normal_matrix::<f64>(4, 6, &mut stream);
            let targets = rng::normal_matrix::<f64>(3, 6, &mut stream);
            let x_test = rng::normal_vec::<f64>(4, &mut stream);
            let gd = one_step_linear_gd(
                &w0,
                &inputs,
                &targets,
                LossKind::Squared,
                0.25,
                &x_test,
            )
            .unwrap();
            let mut errors = DenseMatrix::<f64>::zeros(3, 6);
            for i in 0..6 {
                let pred = w0.matvec(&inputs.column(i)).unwrap();
                for (o, (t, p)) in targets.column(i).iter().zip(&pred).enumerate() {
                    errors.set(o, i, 0.25 * (t - p));
                }
            }
            let base = w0.matvec(&x_test).unwrap();
            let attn = linear_attention(&errors, &inputs, &x_test).unwrap();
            let dual: Vec<f64> = base.iter().zip(&attn).map(|(a, b)| a + b).collect();
            assert!(vector_max_abs_diff(&gd, &dual) <= 1e-12, "seed {seed}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_is_invariant_to_demonstration_order(
            seed in 0_u64..10_000,
            swap_a in 0_usize..5,
            swap_b in 0_usize..5,
        ) {
            let (w, tokens) = random_instance(3, 3, 2, 5, 2, seed);
            let base = softmax_attention(&w, &tokens).unwrap();
            let mut permuted = tokens.demonstrations().clone();
            for r in 0..3 {
                let tmp = permuted.get(r, swap_a);
                permuted.set(r, swap_a, permuted.get(r, swap_b));
                permuted.set(r, swap_b, tmp);
            }
            let shuffled = TokenMatrix::new(
                permuted,
                tokens.queries().clone(),
                tokens.next_query().to_vec(),
            ).unwrap();
            let out = softmax_attention(&w, &shuffled).unwrap();
            prop_assert!(vector_max_abs_diff(&base, &out) <= 1e-12);
        }

        #[test]
        fn adding_a_token_strictly_increases_the_partition_value(
            seed in 0_u64..10_000,
        ) {
            let (w, tokens) = random_instance(3, 3, 2, 4, 2, seed);
            let d_prime = partition_function(&w, &tokens).unwrap();
            let mut stream = rng::stream(seed ^ 0xABCD);
            let extra = rng::normal_matrix::<f64>(3, 1, &mut stream);
            let grown = TokenMatrix::new(
                tokens.demonstrations().hstack(&extra).unwrap(),
                tokens.queries().clone(),
                tokens.next_query().to_vec(),
            ).unwrap();
            prop_assert!(partition_function(&w, &grown).unwrap() > d_prime);
        }

        #[test]
        fn split_identity_holds_on_random_instances(seed in 0_u64..10_000) {
            let (w, tokens) = random_instance(4, 3, 2, 3, 2, seed);
            let report = split_demo_query(&w, &tokens).unwrap();
            let scale = vector_norm(&report.attention_output).max(1e-300);
            prop_assert!(report.max_abs_diff / scale <= 1e-11);
        }
    }
}
