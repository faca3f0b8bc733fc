//! File-mode prompt ranking: a target token matrix and a directory of
//! candidate matrices, all in the `rows,cols`-headed CSV format, ranked by
//! mean-embedding distance and emitted as JSON.
//!
//! Candidate files are discovered as `*.csv` within the directory (no
//! recursion), ordered by file name, and identified by file stem. Tokens
//! arrive with no key projection of their own, so the embedding applies the
//! identity projection and the feature map acts on the raw token dimension;
//! an explicit `feature_map` in the config must therefore match that
//! dimension.

use std::path::Path;

use icl_kd_core::features::{FeatureMap, FeatureMapSpec};
use icl_kd_core::matrix::DenseMatrix;
use icl_kd_core::ranker::{rank_prompt_sets, CandidateSet};
use icl_kd_core::rng::derive_seed;
use icl_kd_core::shift::{DeclaredCaps, DistributionSample, SampleLabel};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::report::json_string_17;

/// One ranked candidate in the emitted JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_bound_vs_previous: Option<f64>,
}

/// Emitted ranking: ids, scores, adjacent gap bounds, and the constants and
/// feature map (seed included) the scores were computed under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingOutput {
    pub map_spec: FeatureMapSpec,
    pub eta: f64,
    pub m_t: f64,
    pub m_phi: f64,
    pub step_size_product: f64,
    pub entries: Vec<RankedEntry>,
}

impl RankingOutput {
    pub fn to_json_string(&self) -> Result<String> {
        json_string_17(self)
    }
}

fn load_matrix(path: &Path) -> Result<DenseMatrix<f64>> {
    DenseMatrix::read_csv(path).map_err(LabError::from)
}

fn max_column_norm(m: &DenseMatrix<f64>) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..m.cols() {
        let norm = (0..m.rows())
            .map(|a| m.get(a, i).powi(2))
            .sum::<f64>()
            .sqrt();
        best = best.max(norm);
    }
    best
}

/// Candidate files in name order as (stem, matrix) pairs.
fn load_candidates(dir: &Path) -> Result<Vec<(String, DenseMatrix<f64>)>> {
    let entries = std::fs::read_dir(dir).map_err(|source| LabError::IoFailure {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<std::path::PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| LabError::IoFailure {
            path: dir.display().to_string(),
            source,
        })?;
        let path = entry.path();
        if path.is_file() && path.extension().map(|e| e == "csv").unwrap_or(false) {
            paths.push(path);
        }
    }
    paths.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if paths.is_empty() {
        return Err(LabError::InvalidConfig(format!(
            "no .csv candidate files found in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, load_matrix(&p)?))
        })
        .collect()
}

/// Ranks the candidate files against the target file under the config's
/// feature map, learning rate, and caps.
pub fn rank_prompt_files(
    cfg: &ExperimentConfig,
    target_path: &Path,
    candidates_dir: &Path,
) -> Result<RankingOutput> {
    let target_tokens = load_matrix(target_path)?;
    let d = target_tokens.rows();
    if target_tokens.cols() == 0 {
        return Err(LabError::InvalidConfig(format!(
            "target matrix {} has no token columns",
            target_path.display()
        )));
    }

    let spec = match cfg.feature_map {
        Some(spec) => {
            if spec.input_dim != d {
                return Err(LabError::InvalidConfig(format!(
                    "feature_map.d ({}) must equal the target token dimension ({d}) \
                     in file mode",
                    spec.input_dim
                )));
            }
            spec
        }
        None => FeatureMapSpec::positive_random(d, cfg.dims.feature_dim, derive_seed(cfg.seed, 0xF417)),
    };
    let map = FeatureMap::build(spec)?;
    let eta = cfg.fixed_eta()?;

    let loaded = load_candidates(candidates_dir)?;
    let mut m_x = max_column_norm(&target_tokens).max(cfg.caps.m_x);
    for (_, tokens) in &loaded {
        if tokens.rows() != d {
            return Err(LabError::InvalidConfig(format!(
                "candidate token dimension {} does not match target dimension {d}",
                tokens.rows()
            )));
        }
        m_x = m_x.max(max_column_norm(tokens));
    }
    let caps = DeclaredCaps::new(m_x, cfg.caps.m_phi, cfg.caps.m_v, cfg.caps.m_t)?;
    let target = DistributionSample::new(SampleLabel::Target, target_tokens, caps)?;
    let candidates: Vec<CandidateSet<f64>> = loaded
        .into_iter()
        .map(|(stem, tokens)| CandidateSet::new(stem, tokens).map_err(LabError::from))
        .collect::<Result<_>>()?;

    let wk = DenseMatrix::identity(d);
    let report = rank_prompt_sets(&candidates, &target, &map, &wk, eta)?;
    Ok(RankingOutput {
        map_spec: report.map_spec,
        eta,
        m_t: report.constants.m_t,
        m_phi: report.constants.m_phi,
        step_size_product: report.constants.step_size_product,
        entries: report
            .entries
            .iter()
            .map(|e| RankedEntry {
                id: e.id.clone(),
                score: e.score,
                gap_bound_vs_previous: e.gap_bound_vs_previous,
            })
            .collect(),
    })
}
