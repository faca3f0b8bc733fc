//! Report bundles: per-trial records, aggregate violation counts, and the
//! JSON/CSV emitters.
//!
//! JSON is the canonical format — the full nested bundle with the config
//! echoed verbatim — and CSV is a flattened convenience export with one row
//! per record and a stable column order. Both write every floating-point
//! number at 17 significant digits (`{:.16e}`), enough to reproduce the f64
//! bit pattern on reload, so re-running a config yields a byte-identical
//! file apart from the wall-clock field (JSON only; CSV omits it).
//!
//! Flag naming carries the assertion semantics: a flag whose name ends in
//! `_violation` is an asserted bound check and contributes to the bundle's
//! violation count (and so to the process exit code); any other flag is
//! informational.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter, Serializer};

use crate::config::{ExperimentConfig, Suite};
use crate::error::{LabError, Result};

/// Suffix that marks a flag as an asserted bound check.
pub const VIOLATION_SUFFIX: &str = "_violation";

/// Output format of [`ReportBundle::emit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// One record of a suite run. `kind` distinguishes record families inside a
/// suite (e.g. the genbound suite emits `rademacher`, `bound`, `contraction`
/// and `sup_gap` records); `metrics` and `flags` keep deterministic insertion
/// order so emitted files are stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub metrics: IndexMap<String, f64>,
    #[serde(default)]
    pub flags: IndexMap<String, bool>,
}

impl TrialRecord {
    pub fn new(trial: u64, seed: u64, kind: impl Into<String>) -> Self {
        Self {
            trial,
            seed,
            kind: kind.into(),
            error: None,
            metrics: IndexMap::new(),
            flags: IndexMap::new(),
        }
    }

    /// Error record for a trial that failed; its metrics stay empty and it
    /// asserts nothing.
    pub fn failed(trial: u64, seed: u64, kind: impl Into<String>, error: String) -> Self {
        let mut rec = Self::new(trial, seed, kind);
        rec.error = Some(error);
        rec
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn flag(&mut self, name: &str, value: bool) -> &mut Self {
        self.flags.insert(name.to_string(), value);
        self
    }
}

/// Aggregate over all records: how many asserted checks ran, how many
/// failed, raised-flag counts by name, and the number of errored trials.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub asserted_checks: u64,
    pub violations: u64,
    pub trial_errors: u64,
    #[serde(default)]
    pub raised_flags: BTreeMap<String, u64>,
}

/// Everything one suite run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub suite: Suite,
    pub library_version: String,
    /// The seed every per-record seed was derived from (echoes config.seed
    /// after CLI/environment overrides).
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub summary: ViolationSummary,
    /// Seconds spent producing the records; the one field exempt from the
    /// byte-identical re-run guarantee.
    pub wall_clock_seconds: f64,
    pub records: Vec<TrialRecord>,
}

impl ReportBundle {
    /// Assembles a bundle, deriving the summary from the records.
    pub fn assemble(
        config: ExperimentConfig,
        records: Vec<TrialRecord>,
        wall_clock_seconds: f64,
    ) -> Self {
        let suite = config.suite.expect("suite resolved before running");
        let mut summary = ViolationSummary::default();
        for rec in &records {
            if rec.error.is_some() {
                summary.trial_errors += 1;
            }
            for (name, raised) in &rec.flags {
                if name.ends_with(VIOLATION_SUFFIX) {
                    summary.asserted_checks += 1;
                    if *raised {
                        summary.violations += 1;
                    }
                }
                if *raised {
                    *summary.raised_flags.entry(name.clone()).or_insert(0) += 1;
                }
            }
        }
        Self {
            suite,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.seed,
            config,
            summary,
            wall_clock_seconds,
            records,
        }
    }

    pub fn violations(&self) -> u64 {
        self.summary.violations
    }

    /// Canonical JSON text (pretty, 17 significant digits on every float).
    pub fn to_json_string(&self) -> Result<String> {
        json_string_17(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::ParseFailure {
            path: "<bundle>".into(),
            detail: e.to_string(),
        })
    }

    /// Flattened per-record CSV: a header naming `trial,seed,kind,error`,
    /// then the union of metric and flag columns in first-seen order, one
    /// row per record (missing cells stay empty).
    pub fn to_csv_string(&self) -> String {
        let mut metric_cols: Vec<String> = Vec::new();
        let mut flag_cols: Vec<String> = Vec::new();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for rec in &self.records {
            for name in rec.metrics.keys() {
                if seen.insert(name) {
                    metric_cols.push(name.clone());
                }
            }
            for name in rec.flags.keys() {
                if seen.insert(name) {
                    flag_cols.push(name.clone());
                }
            }
        }
        let mut out = String::from("trial,seed,kind,error");
        for col in metric_cols.iter().chain(&flag_cols) {
            out.push(',');
            out.push_str(&csv_escape(col));
        }
        out.push('\n');
        for rec in &self.records {
            out.push_str(&format!(
                "{},{},{},{}",
                rec.trial,
                rec.seed,
                csv_escape(&rec.kind),
                csv_escape(rec.error.as_deref().unwrap_or(""))
            ));
            for col in &metric_cols {
                out.push(',');
                if let Some(v) = rec.metrics.get(col) {
                    out.push_str(&format_sig17(*v));
                }
            }
            for col in &flag_cols {
                out.push(',');
                if let Some(v) = rec.flags.get(col) {
                    out.push_str(if *v { "true" } else { "false" });
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn emit(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json_string()?,
            ReportFormat::Csv => self.to_csv_string(),
        };
        std::fs::write(path, text).map_err(|source| LabError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LabError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| LabError::ParseFailure {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// 17 significant digits: one leading digit plus 16 after the point, in
/// scientific notation — exact f64 round-trip, fixed width per magnitude.
pub fn format_sig17(value: f64) -> String {
    format!("{value:.16e}")
}

/// Pretty JSON text with every float pinned to 17 significant digits and a
/// trailing newline, for any serializable value.
pub fn json_string_17<V: Serialize>(value: &V) -> Result<String> {
    let mut buf = Vec::new();
    let formatter = SeventeenDigits::new(PrettyFormatter::new());
    let mut ser = Serializer::with_formatter(&mut buf, formatter);
    value.serialize(&mut ser).map_err(|e| LabError::ParseFailure {
        path: "<json>".into(),
        detail: e.to_string(),
    })?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Pretty JSON formatter that pins every f64 to [`format_sig17`]; all the
/// structural callbacks delegate to the wrapped [`PrettyFormatter`].
struct SeventeenDigits<'a> {
    inner: PrettyFormatter<'a>,
}

impl<'a> SeventeenDigits<'a> {
    fn new(inner: PrettyFormatter<'a>) -> Self {
        Self { inner }
    }
}

impl Formatter for SeventeenDigits<'_> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{}", format_sig17(value))
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object_value(writer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bundle() -> ReportBundle {
        let cfg = ExperimentConfig::for_suite(Suite::Offset, 11);
        let mut a = TrialRecord::new(0, 100, "offset");
        a.metric("mmd", 0.012345678901234567)
            .metric("bound_plain", 2.0)
            .flag("plain_violation", false)
            .flag("whitened_exceeded", true);
        let mut b = TrialRecord::new(1, 101, "offset");
        b.metric("mmd", f64::from_bits(0x3FB999999999999A))
            .flag("plain_violation", true);
        let c = TrialRecord::failed(2, 102, "offset", "dimension mismatch: 3 vs 4".into());
        ReportBundle::assemble(cfg, vec![a, b, c], 0.25)
    }

    #[test]
    fn summary_counts_only_violation_suffixed_flags() {
        let bundle = sample_bundle();
        assert_eq!(bundle.summary.asserted_checks, 2);
        assert_eq!(bundle.summary.violations, 1);
        assert_eq!(bundle.summary.trial_errors, 1);
        assert_eq!(bundle.summary.raised_flags["whitened_exceeded"], 1);
        assert_eq!(bundle.summary.raised_flags["plain_violation"], 1);
        assert_eq!(bundle.violations(), 1);
    }

    #[test]
    fn json_round_trip_reproduces_the_bundle_exactly() {
        let bundle = sample_bundle();
        let text = bundle.to_json_string().unwrap();
        let back = ReportBundle::from_json_str(&text).unwrap();
        assert_eq!(bundle, back);
        // Floats survive bit-exactly through the 17-digit format.
        assert_eq!(
            back.records[1].metrics["mmd"].to_bits(),
            0x3FB999999999999A
        );
    }

    #[test]
    fn json_floats_carry_seventeen_significant_digits() {
        let bundle = sample_bundle();
        let text = bundle.to_json_string().unwrap();
        assert!(text.contains("1.2345678901234567e-2"), "{text}");
        assert!(text.contains("2.0000000000000000e0"), "{text}");
        // Integers stay integers: seeds must not be rewritten as floats.
        assert!(text.contains("\"master_seed\": 11"), "{text}");
        assert!(text.contains("\"seed\": 100"), "{text}");
    }

    #[test]
    fn csv_has_header_plus_one_row_per_record() {
        let bundle = sample_bundle();
        let csv = bundle.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), bundle.records.len() + 1);
        assert_eq!(
            lines[0],
            "trial,seed,kind,error,mmd,bound_plain,plain_violation,whitened_exceeded"
        );
        assert!(lines[1].starts_with("0,100,offset,,1.2345678901234567e-2"));
        // The errored record has empty metric cells but keeps its message.
        assert!(lines[3].contains("dimension mismatch"));
        let cells = lines[3].split(',').count();
        // The error message itself contains no comma here.
        assert_eq!(cells, lines[0].split(',').count());
    }

    #[test]
    fn csv_escapes_fields_with_commas() {
        let cfg = ExperimentConfig::for_suite(Suite::Duality, 0);
        let rec = TrialRecord::failed(0, 5, "duality", "bad, worse".into());
        let bundle = ReportBundle::assemble(cfg, vec![rec], 0.0);
        let csv = bundle.to_csv_string();
        assert!(csv.contains("\"bad, worse\""), "{csv}");
    }

    #[test]
    fn empty_bundle_emits_valid_files_with_config_echo() {
        let cfg = ExperimentConfig::for_suite(Suite::Duality, 3);
        let bundle = ReportBundle::assemble(cfg.clone(), Vec::new(), 0.0);
        let text = bundle.to_json_string().unwrap();
        let back = ReportBundle::from_json_str(&text).unwrap();
        assert_eq!(back.config, cfg);
        assert!(back.records.is_empty());
        assert_eq!(bundle.to_csv_string(), "trial,seed,kind,error\n");
    }

    #[test]
    fn emit_and_load_round_trip_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.json");
        let bundle = sample_bundle();
        bundle.emit(&path, ReportFormat::Json).unwrap();
        let back = ReportBundle::load_json(&path).unwrap();
        assert_eq!(bundle, back);

        let csv_path = dir.path().join("bundle.csv");
        bundle.emit(&csv_path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text, bundle.to_csv_string());
    }
}
