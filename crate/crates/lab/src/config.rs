//! Experiment configuration: suite selection, dimensions, sample sizes,
//! shift families, norm caps, and the learning-rate policy, all JSON-backed.
//!
//! Every field is validated with a named error before any trial runs, and a
//! config deserializes from a minimal JSON object (`{"suite": "offset",
//! "seed": 7}`) with documented defaults filling the rest. The master seed
//! lives in the config itself; the CLI resolves its `--seed` flag and the
//! `ICL_KD_LAB_SEED` environment variable into this field before dispatch,
//! so the echoed config in a report always shows the seed actually used.

use icl_kd_core::features::{FeatureMapKind, FeatureMapSpec};
use icl_kd_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Stream index reserved for the default feature-map seed derivation.
const FEATURE_SEED_INDEX: u64 = 0xF417;

/// Verification suite selector; each value maps to one CLI subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Duality,
    KdInit,
    Genbound,
    Offset,
    Riskgap,
    Rank,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::KdInit => "kd-init",
            Suite::Genbound => "genbound",
            Suite::Offset => "offset",
            Suite::Riskgap => "riskgap",
            Suite::Rank => "rank",
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Problem dimensions. `d` is the token embedding dimension, `k` the
/// key/query projection dimension, `m` the value output dimension, `N` the
/// demonstration-block cap, `M` the query-block cap, and `r` the explicit
/// feature dimension of sampled maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    #[serde(default = "default_small_dim")]
    pub d: usize,
    #[serde(default = "default_small_dim")]
    pub k: usize,
    #[serde(default = "default_small_dim")]
    pub m: usize,
    #[serde(rename = "N", default = "default_demo_cap")]
    pub n_demo: usize,
    #[serde(rename = "M", default = "default_small_dim")]
    pub m_query: usize,
    #[serde(rename = "r", default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_small_dim() -> usize {
    4
}

fn default_demo_cap() -> usize {
    8
}

fn default_feature_dim() -> usize {
    32
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d: default_small_dim(),
            k: default_small_dim(),
            m: default_small_dim(),
            n_demo: default_demo_cap(),
            m_query: default_small_dim(),
            feature_dim: default_feature_dim(),
        }
    }
}

/// Sample sizes for the distribution-level suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSizes {
    /// Tokens drawn from the target distribution per record.
    #[serde(default = "default_distribution_n")]
    pub n_target: usize,
    /// Tokens drawn per prompt/candidate distribution.
    #[serde(default = "default_distribution_n")]
    pub n_prompt: usize,
    /// Training-set size for the generalization-bound records.
    #[serde(default = "default_train_n")]
    pub n_train: usize,
    /// Held-out size as a multiple of `n_train`.
    #[serde(default = "default_heldout_factor")]
    pub heldout_factor: usize,
    /// Monte-Carlo sign draws for Rademacher estimates.
    #[serde(default = "default_sign_draws")]
    pub sign_draws: usize,
    /// Training resamples for the sup-gap record.
    #[serde(default = "default_resamples")]
    pub resamples: usize,
}

fn default_distribution_n() -> usize {
    4096
}

fn default_train_n() -> usize {
    100
}

fn default_heldout_factor() -> usize {
    50
}

fn default_sign_draws() -> usize {
    10_000
}

fn default_resamples() -> usize {
    30
}

impl Default for SampleSizes {
    fn default() -> Self {
        Self {
            n_target: default_distribution_n(),
            n_prompt: default_distribution_n(),
            n_train: default_train_n(),
            heldout_factor: default_heldout_factor(),
            sign_draws: default_sign_draws(),
            resamples: default_resamples(),
        }
    }
}

/// One prompt distribution relative to the target N(0, I/d): a two-component
/// Gaussian mixture whose shifted component has mean `mean_shift`·e1 and
/// whose covariance is scaled by `covariance_scale`. `mixture_weight` is the
/// probability of the shifted component, so `{mean_shift: mu,
/// covariance_scale: 1, mixture_weight: 1}` is a pure mean shift and
/// `mean_shift: 0, covariance_scale: 1` reproduces the target exactly for
/// any mixture weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftFamily {
    #[serde(default)]
    pub mean_shift: f64,
    #[serde(default = "default_unit")]
    pub covariance_scale: f64,
    #[serde(default = "default_unit")]
    pub mixture_weight: f64,
}

fn default_unit() -> f64 {
    1.0
}

impl Default for ShiftFamily {
    fn default() -> Self {
        Self {
            mean_shift: 0.0,
            covariance_scale: 1.0,
            mixture_weight: 1.0,
        }
    }
}

impl ShiftFamily {
    pub fn mean_shift(mu: f64) -> Self {
        Self {
            mean_shift: mu,
            ..Self::default()
        }
    }
}

/// Declared norm caps: token (`m_x`), feature (`m_phi`), value projection
/// spectral (`m_v`), teacher output (`m_t`), and the student Frobenius ball
/// radius (`weight_cap`, the B of the generalization bound).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormCaps {
    #[serde(default = "default_unit")]
    pub m_x: f64,
    #[serde(default = "default_unit")]
    pub m_phi: f64,
    #[serde(default = "default_unit")]
    pub m_v: f64,
    #[serde(default = "default_unit")]
    pub m_t: f64,
    #[serde(default = "default_unit")]
    pub weight_cap: f64,
}

impl Default for NormCaps {
    fn default() -> Self {
        Self {
            m_x: 1.0,
            m_phi: 1.0,
            m_v: 1.0,
            m_t: 1.0,
            weight_cap: 1.0,
        }
    }
}

/// Learning-rate policy. `partition-implied` uses eta* = N/(2 D') per
/// instance (the step that makes one-step distillation land on the implicit
/// initialization); `fixed` pins a numeric step shared by all records, which
/// the distribution-shift suites require.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EtaPolicy {
    #[default]
    PartitionImplied,
    Fixed { value: f64 },
}

/// Full experiment description; the canonical JSON artifact that reports
/// echo back verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional in the file; when present it must agree with the CLI
    /// subcommand that launched the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<Suite>,
    #[serde(default)]
    pub seed: u64,
    /// Trials for flat suites; repeats per grid point for gridded ones.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub samples: SampleSizes,
    /// Shift grid: one prompt family per entry (offset sweeps it; rank turns
    /// each entry into one candidate set).
    #[serde(default = "default_shift_grid")]
    pub shift_grid: Vec<ShiftFamily>,
    /// Mildly shifted prompt family for the risk-gap suite and greedy pools.
    #[serde(default = "default_shift_good")]
    pub shift_good: ShiftFamily,
    /// Severely shifted prompt family for the risk-gap suite.
    #[serde(default = "default_shift_bad")]
    pub shift_bad: ShiftFamily,
    #[serde(default)]
    pub caps: NormCaps,
    #[serde(default)]
    pub eta: EtaPolicy,
    /// Confidence parameter of the tail terms.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Relative ridge added to second moments before inversion.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Explicit feature map; defaults to positive random features on the
    /// key dimension with a seed derived from the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<FeatureMapSpec>,
}

fn default_trials() -> usize {
    20
}

fn default_delta() -> f64 {
    0.05
}

fn default_ridge() -> f64 {
    1e-9
}

fn default_shift_grid() -> Vec<ShiftFamily> {
    vec![ShiftFamily::default()]
}

fn default_shift_good() -> ShiftFamily {
    ShiftFamily::mean_shift(0.1)
}

fn default_shift_bad() -> ShiftFamily {
    ShiftFamily::mean_shift(1.0)
}

impl ExperimentConfig {
    /// Minimal config for `suite` with every other field at its default.
    pub fn for_suite(suite: Suite, seed: u64) -> Self {
        let mut cfg: Self =
            serde_json::from_str("{}").expect("empty config object always deserializes");
        cfg.suite = Some(suite);
        cfg.seed = seed;
        cfg
    }

    /// Desk-scale parameters used by the shipped example configs: each suite
    /// at the trial counts and dimensions its acceptance check runs at.
    pub fn canonical(suite: Suite, seed: u64) -> Self {
        let mut cfg = Self::for_suite(suite, seed);
        match suite {
            Suite::Duality => {
                cfg.trials = 200;
                cfg.dims = Dims {
                    d: 8,
                    k: 8,
                    m: 8,
                    n_demo: 16,
                    m_query: 8,
                    feature_dim: 32,
                };
            }
            Suite::KdInit => {
                cfg.trials = 100;
                cfg.dims = Dims {
                    d: 8,
                    k: 8,
                    m: 8,
                    n_demo: 8,
                    m_query: 8,
                    feature_dim: 128,
                };
            }
            Suite::Genbound => {
                cfg.trials = 500;
            }
            Suite::Offset => {
                cfg.trials = 5;
                cfg.shift_grid = [0.0, 0.25, 0.5, 1.0]
                    .into_iter()
                    .map(ShiftFamily::mean_shift)
                    .collect();
                cfg.eta = EtaPolicy::Fixed { value: 0.05 };
            }
            Suite::Riskgap => {
                cfg.trials = 20;
                cfg.eta = EtaPolicy::Fixed { value: 0.05 };
            }
            Suite::Rank => {
                cfg.trials = 20;
                cfg.shift_grid = [0.0, 0.4, 1.5]
                    .into_iter()
                    .map(ShiftFamily::mean_shift)
                    .collect();
                cfg.eta = EtaPolicy::Fixed { value: 0.05 };
            }
        }
        cfg
    }

    /// Resolves the file's optional suite against the CLI subcommand,
    /// storing the result; a mismatch is a config error.
    pub fn resolve_suite(&mut self, cli_suite: Suite) -> Result<Suite> {
        if let Some(file_suite) = self.suite {
            if file_suite != cli_suite {
                return Err(LabError::InvalidConfig(format!(
                    "suite is \"{file_suite}\" in the config file but the \
                     {cli_suite:?} subcommand expects \"{cli_suite}\""
                )));
            }
        }
        self.suite = Some(cli_suite);
        Ok(cli_suite)
    }

    /// Feature map the distribution suites build; positive random features
    /// on the key dimension unless explicitly overridden.
    pub fn feature_spec(&self) -> FeatureMapSpec {
        self.feature_map.unwrap_or_else(|| {
            FeatureMapSpec::positive_random(
                self.dims.k,
                self.dims.feature_dim,
                derive_seed(self.seed, FEATURE_SEED_INDEX),
            )
        })
    }

    /// The fixed step size, for suites whose bounds need one number.
    pub fn fixed_eta(&self) -> Result<f64> {
        match self.eta {
            EtaPolicy::Fixed { value } => Ok(value),
            EtaPolicy::PartitionImplied => Err(LabError::InvalidConfig(
                "eta.policy must be \"fixed\" for this suite (the shift bounds \
                 are stated for one shared step size)"
                    .into(),
            )),
        }
    }

    /// Checks every field against its documented range, naming the first
    /// offender; called before any computation.
    pub fn validate(&self, suite: Suite) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidConfig(msg));
        for (name, v) in [
            ("dims.d", self.dims.d),
            ("dims.k", self.dims.k),
            ("dims.m", self.dims.m),
            ("dims.N", self.dims.n_demo),
            ("dims.r", self.dims.feature_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1, got 0"));
            }
        }
        if self.trials == 0 {
            return bad("trials must be >= 1, got 0".into());
        }
        for (name, v) in [
            ("samples.n_target", self.samples.n_target),
            ("samples.n_prompt", self.samples.n_prompt),
            ("samples.n_train", self.samples.n_train),
            ("samples.heldout_factor", self.samples.heldout_factor),
            ("samples.sign_draws", self.samples.sign_draws),
            ("samples.resamples", self.samples.resamples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1, got 0"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!(
                "delta must lie strictly between 0 and 1, got {}",
                self.delta
            ));
        }
        if !self.ridge.is_finite() || self.ridge < 0.0 {
            return bad(format!(
                "ridge must be finite and nonnegative, got {}",
                self.ridge
            ));
        }
        for (name, v) in [
            ("caps.m_x", self.caps.m_x),
            ("caps.m_phi", self.caps.m_phi),
            ("caps.m_v", self.caps.m_v),
            ("caps.m_t", self.caps.m_t),
            ("caps.weight_cap", self.caps.weight_cap),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if self.shift_grid.is_empty() {
            return bad("shift_grid must contain at least one family".into());
        }
        let mut shifts: Vec<(String, &ShiftFamily)> = self
            .shift_grid
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("shift_grid[{i}]"), s))
            .collect();
        shifts.push(("shift_good".into(), &self.shift_good));
        shifts.push(("shift_bad".into(), &self.shift_bad));
        for (name, s) in shifts {
            if !s.mean_shift.is_finite() {
                return bad(format!("{name}.mean_shift must be finite"));
            }
            if !s.covariance_scale.is_finite() || s.covariance_scale <= 0.0 {
                return bad(format!(
                    "{name}.covariance_scale must be finite and positive, got {}",
                    s.covariance_scale
                ));
            }
            if !(0.0..=1.0).contains(&s.mixture_weight) {
                return bad(format!(
                    "{name}.mixture_weight must lie in [0, 1], got {}",
                    s.mixture_weight
                ));
            }
        }
        if let EtaPolicy::Fixed { value } = self.eta {
            if !value.is_finite() || value < 0.0 {
                return bad(format!(
                    "eta.value must be finite and nonnegative, got {value}"
                ));
            }
        }
        if let Some(spec) = &self.feature_map {
            if spec.input_dim != self.dims.k {
                return bad(format!(
                    "feature_map.d ({}) must equal dims.k ({}): maps apply to \
                     key-projected tokens",
                    spec.input_dim, self.dims.k
                ));
            }
            if spec.feature_dim == 0 {
                return bad("feature_map.r must be >= 1, got 0".into());
            }
        }
        let needs_explicit_features =
            matches!(suite, Suite::Genbound | Suite::Offset | Suite::Riskgap | Suite::Rank);
        if needs_explicit_features && self.feature_spec().kind == FeatureMapKind::ExactKernel {
            return bad(format!(
                "feature_map.kind \"exact_kernel\" has no explicit feature \
                 vectors; suite {suite} needs identity or positive_random"
            ));
        }
        let needs_fixed_eta = matches!(suite, Suite::Offset | Suite::Riskgap | Suite::Rank);
        if needs_fixed_eta {
            self.fixed_eta()?;
        }
        Ok(())
    }
}
