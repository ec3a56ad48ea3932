//! ROI time-series data model, file ingestion, and the synthetic cohort
//! generator.
//!
//! A subject is a matrix `P ∈ R^{N×T_max}`: one row per region of
//! interest (ROI), one column per acquisition timepoint. Files use a
//! plain text format (header `N T_max`, then one whitespace-separated
//! row per ROI); cohorts are described by a JSON manifest mapping
//! subject ids to files and labels.
//!
//! The synthetic generator exists so that every downstream claim can be
//! verified against known ground truth: it hides a Markov chain over
//! connectivity templates inside each scan, making class membership
//! visible only in the *dynamics* (how often the connectivity state
//! switches) while the whole-scan static correlation structure is the
//! same for every class by construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed header (expected \"N T_max\"): {detail}")]
    MalformedHeader { path: PathBuf, detail: String },
    #[error("{path}: row {row} has {found} values, expected {expected}")]
    RowLength { path: PathBuf, row: usize, expected: usize, found: usize },
    #[error("{path}: non-numeric token {token:?} on line {line}")]
    NonNumeric { path: PathBuf, line: usize, token: String },
    #[error("{path}: non-finite value on line {line}")]
    NonFinite { path: PathBuf, line: usize },
    #[error("{path}: N and T_max must both be at least 2 (got {n} × {t})")]
    TooSmall { path: PathBuf, n: usize, t: usize },
    #[error("slice length {len} exceeds scan length {t_max}")]
    SliceTooLong { len: usize, t_max: usize },
    #[error("missing-timestep ratio must lie in [0, 1), got {0}")]
    BadRatio(f64),
    #[error("invalid synthesis config: {0}")]
    BadSynthConfig(String),
    #[error("connectivity template for state {0} is not positive definite")]
    DegenerateTemplate(usize),
    #[error("manifest {path}: {detail}")]
    BadManifest { path: PathBuf, detail: String },
    #[error("manifest {path}: duplicate subject id {subject_id:?}")]
    DuplicateSubject { path: PathBuf, subject_id: String },
    #[error("manifest {path}: referenced file {file} does not exist")]
    MissingFile { path: PathBuf, file: PathBuf },
}

/// A downstream label: either a class index or a real-valued target.
///
/// Serialized without a tag, so JSON integers load as classes and JSON
/// floats as scalars.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Class(usize),
    Scalar(f64),
}

impl LabelValue {
    pub fn as_class(&self) -> Option<usize> {
        match self {
            LabelValue::Class(c) => Some(*c),
            LabelValue::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            LabelValue::Scalar(v) => Some(*v),
            LabelValue::Class(_) => None,
        }
    }
}

/// One subject's ROI×time BOLD matrix with optional labels.
#[derive(Clone, Debug)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    /// `N×T_max`: row = ROI, column = timepoint.
    pub data: Array2<f64>,
    pub labels: BTreeMap<String, LabelValue>,
}

impl RoiTimeSeries {
    pub fn n_rois(&self) -> usize {
        self.data.nrows()
    }

    pub fn t_max(&self) -> usize {
        self.data.ncols()
    }
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

/// Parse the text format: line 1 is `N T_max`, lines 2..N+1 hold T_max
/// space-separated floats each. `origin` is used for error messages and
/// the subject id.
pub fn parse_roi_text(text: &str, origin: &Path) -> Result<RoiTimeSeries, SignalError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut parts = header.split_whitespace();
    let parse_dim = |tok: Option<&str>| -> Result<usize, SignalError> {
        let tok = tok.ok_or_else(|| SignalError::MalformedHeader {
            path: origin.to_path_buf(),
            detail: format!("got {header:?}"),
        })?;
        tok.parse::<usize>().map_err(|_| SignalError::MalformedHeader {
            path: origin.to_path_buf(),
            detail: format!("non-integer dimension {tok:?}"),
        })
    };
    let n = parse_dim(parts.next())?;
    let t_max = parse_dim(parts.next())?;
    if parts.next().is_some() {
        return Err(SignalError::MalformedHeader {
            path: origin.to_path_buf(),
            detail: format!("trailing tokens in {header:?}"),
        });
    }
    if n < 2 || t_max < 2 {
        return Err(SignalError::TooSmall { path: origin.to_path_buf(), n, t: t_max });
    }

    let mut data = Array2::zeros((n, t_max));
    for row in 0..n {
        let line = lines.next().ok_or(SignalError::RowLength {
            path: origin.to_path_buf(),
            row,
            expected: t_max,
            found: 0,
        })?;
        let mut count = 0;
        for (col, tok) in line.split_whitespace().enumerate() {
            if col >= t_max {
                count += 1;
                continue;
            }
            let v: f64 = tok.parse().map_err(|_| SignalError::NonNumeric {
                path: origin.to_path_buf(),
                line: row + 2,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(SignalError::NonFinite { path: origin.to_path_buf(), line: row + 2 });
            }
            data[(row, col)] = v;
            count += 1;
        }
        if count != t_max {
            return Err(SignalError::RowLength {
                path: origin.to_path_buf(),
                row,
                expected: t_max,
                found: count,
            });
        }
    }
    // Trailing non-empty lines mean the header undercounted.
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(SignalError::MalformedHeader {
            path: origin.to_path_buf(),
            detail: "more data rows than declared N".to_string(),
        });
    }

    let subject_id = origin
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".to_string());
    Ok(RoiTimeSeries { subject_id, data, labels: BTreeMap::new() })
}

/// Load a subject from the documented text format.
pub fn load_roi_timeseries(path: &Path) -> Result<RoiTimeSeries, SignalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SignalError::Io { path: path.to_path_buf(), source })?;
    parse_roi_text(&text, path)
}

/// Canonical serialization: floats printed with Rust's shortest
/// round-trip formatting, single spaces, trailing newline.
pub fn format_roi_timeseries(series: &RoiTimeSeries) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", series.n_rois(), series.t_max());
    for row in series.data.axis_iter(Axis(0)) {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Write a subject in canonical form.
pub fn write_roi_timeseries(series: &RoiTimeSeries, path: &Path) -> Result<(), SignalError> {
    std::fs::write(path, format_roi_timeseries(series))
        .map_err(|source| SignalError::Io { path: path.to_path_buf(), source })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    #[serde(default)]
    pub labels: BTreeMap<String, LabelValue>,
}

/// Cohort description: where each subject's file lives and its labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parse and validate: unique subject ids, all files resolvable
    /// (relative paths resolve against the manifest's directory).
    pub fn load(path: &Path) -> Result<DatasetManifest, SignalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SignalError::Io { path: path.to_path_buf(), source })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| SignalError::BadManifest {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(SignalError::BadManifest {
                path: path.to_path_buf(),
                detail: format!(
                    "schema_version {} unsupported (expected {})",
                    manifest.schema_version, MANIFEST_SCHEMA_VERSION
                ),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &manifest.entries {
            if !seen.insert(entry.subject_id.clone()) {
                return Err(SignalError::DuplicateSubject {
                    path: path.to_path_buf(),
                    subject_id: entry.subject_id.clone(),
                });
            }
            let file = manifest_relative(path, &entry.path);
            if !file.exists() {
                return Err(SignalError::MissingFile { path: path.to_path_buf(), file });
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), SignalError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(path, text)
            .map_err(|source| SignalError::Io { path: path.to_path_buf(), source })
    }

    /// Load every referenced subject, attaching the manifest's labels.
    pub fn load_subjects(&self, manifest_path: &Path) -> Result<Vec<RoiTimeSeries>, SignalError> {
        let mut out = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let file = manifest_relative(manifest_path, &entry.path);
            let mut series = load_roi_timeseries(&file)?;
            series.subject_id = entry.subject_id.clone();
            series.labels = entry.labels.clone();
            out.push(series);
        }
        Ok(out)
    }
}

fn manifest_relative(manifest_path: &Path, entry_path: &Path) -> PathBuf {
    if entry_path.is_absolute() {
        entry_path.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(entry_path)
    }
}

// ---------------------------------------------------------------------------
// Synthetic cohort
// ---------------------------------------------------------------------------

/// Label key for the synthetic class index.
pub const LABEL_GROUP: &str = "group";
/// Label key for the realized state-switch fraction (regression target).
pub const LABEL_SWITCH_FRACTION: &str = "switch_fraction";

/// Within-block correlation of the state templates.
const TEMPLATE_RHO: f64 = 0.65;

/// Parameters of the synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub t_max: usize,
    /// Number of hidden connectivity states.
    pub n_states: usize,
    /// Per-class probability of leaving the current state at each step.
    /// One entry per class; classes are assigned round-robin.
    pub switch_rates: Vec<f64>,
    /// AR(1) smoothing coefficient in [0, 1).
    pub ar_coeff: f64,
    /// Standard deviation of additive measurement noise (> 0).
    pub noise_sd: f64,
    /// Amplitude of the signed per-state mean pattern (in marginal-sd
    /// units, ≥ 0). When positive, states differ in their block mean as
    /// well as their block covariance, so window summary statistics —
    /// not just window correlations — track the hidden state. Every
    /// class still visits all states with the same uniform stationary
    /// distribution, so whole-scan statistics stay class-uninformative.
    pub state_mean: f64,
    /// When true, a switch steps deterministically around the state
    /// ring — ascending for even classes, descending for odd — instead
    /// of jumping uniformly to another state. Window correlations are
    /// order-invariant, so with `n_states ≥ 3` the traversal direction
    /// is a class signal that only temporal structure can reveal. Both
    /// directions share the uniform stationary distribution.
    pub cycle_states: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 120,
            n_rois: 16,
            t_max: 200,
            n_states: 4,
            switch_rates: vec![0.05, 0.4],
            ar_coeff: 0.3,
            noise_sd: 0.2,
            state_mean: 0.0,
            cycle_states: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let fail = |msg: String| Err(SignalError::BadSynthConfig(msg));
        if self.n_subjects == 0 {
            return fail("n_subjects must be positive".into());
        }
        if self.n_rois < 2 || self.t_max < 2 {
            return fail(format!(
                "n_rois and t_max must be at least 2 (got {} × {})",
                self.n_rois, self.t_max
            ));
        }
        if self.n_states < 2 {
            return fail("n_states must be at least 2".into());
        }
        if self.switch_rates.is_empty() {
            return fail("switch_rates must name at least one class".into());
        }
        for (c, r) in self.switch_rates.iter().enumerate() {
            if !(0.0..=1.0).contains(r) {
                return fail(format!("switch_rates[{c}] = {r} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return fail(format!("ar_coeff = {} outside [0, 1)", self.ar_coeff));
        }
        if !(self.noise_sd > 0.0) {
            return fail(format!("noise_sd = {} must be positive", self.noise_sd));
        }
        if !self.state_mean.is_finite() || self.state_mean < 0.0 {
            return fail(format!("state_mean = {} must be finite and ≥ 0", self.state_mean));
        }
        Ok(())
    }
}

/// A generated subject together with its hidden state trace, for oracle
/// checks in tests.
#[derive(Clone, Debug)]
pub struct SynthSubject {
    pub series: RoiTimeSeries,
    /// Hidden connectivity state at each timepoint.
    pub state_trace: Vec<usize>,
}

/// Generate the synthetic cohort, keeping the hidden state traces.
///
/// Each subject's class fixes the switch rate of a Markov chain over
/// `n_states` connectivity templates (uniform over the *other* states on
/// a switch — or a fixed per-class traversal direction when
/// `cycle_states` is set; either way the stationary distribution is
/// uniform for every class). BOLD is AR(1)-smoothed correlated Gaussian
/// noise around the current state's block mean pattern, with the current
/// state's covariance, plus isotropic measurement noise. Class only
/// affects how the hidden state *moves*, never the distribution of which
/// states occur, so whole-scan statistics are class-uninformative while
/// window dynamics are discriminative. Labels: `group` (class index) and
/// `switch_fraction` (realized fraction of steps that switched state).
pub fn synth_dataset_traced(cfg: &SynthConfig) -> Result<Vec<SynthSubject>, SignalError> {
    cfg.validate()?;
    let n_classes = cfg.switch_rates.len();

    // Stream 0 builds the shared state templates; subject i uses stream i+1,
    // so a subject's scan depends only on (seed, i).
    let mut template_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    template_rng.set_stream(0);
    let templates = state_templates(cfg.n_rois, cfg.n_states, cfg.state_mean, &mut template_rng)?;

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let class = i % n_classes;
        let switch_rate = cfg.switch_rates[class];
        let step_rule = if cfg.cycle_states {
            StepRule::Cycle { descending: class % 2 == 1 }
        } else {
            StepRule::Uniform
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);

        let trace = sample_state_trace(cfg.t_max, cfg.n_states, switch_rate, step_rule, &mut rng);
        let data = sample_bold(cfg, &templates, &trace, &mut rng);

        let switches = trace.windows(2).filter(|w| w[0] != w[1]).count();
        let fraction = switches as f64 / (cfg.t_max - 1) as f64;
        let mut labels = BTreeMap::new();
        labels.insert(LABEL_GROUP.to_string(), LabelValue::Class(class));
        labels.insert(LABEL_SWITCH_FRACTION.to_string(), LabelValue::Scalar(fraction));

        subjects.push(SynthSubject {
            series: RoiTimeSeries {
                subject_id: format!("synth-{i:04}"),
                data,
                labels,
            },
            state_trace: trace,
        });
    }
    Ok(subjects)
}

/// Generate the synthetic cohort (labels only, traces discarded).
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<RoiTimeSeries>, SignalError> {
    Ok(synth_dataset_traced(cfg)?.into_iter().map(|s| s.series).collect())
}

/// One hidden connectivity state: a Cholesky factor of its covariance
/// template plus its signed block mean pattern.
struct StateTemplate {
    chol: Array2<f64>,
    mean: Array1<f64>,
}

/// Per-state templates. Each state splits the ROIs into two blocks
/// under a state-specific permutation; within-block correlation is
/// `TEMPLATE_RHO`, across blocks zero; the mean is `+mean_scale` on one
/// block and `−mean_scale` on the other.
fn state_templates(
    n: usize,
    n_states: usize,
    mean_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StateTemplate>, SignalError> {
    let mut out = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the shared stream.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let half = n / 2;
        let mut block = vec![0usize; n];
        for (pos, &roi) in perm.iter().enumerate() {
            block[roi] = usize::from(pos >= half);
        }
        let mut cov = Array2::eye(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && block[i] == block[j] {
                    cov[(i, j)] = TEMPLATE_RHO;
                }
            }
        }
        let chol = cholesky(&cov).ok_or(SignalError::DegenerateTemplate(s))?;
        let mean = Array1::from_iter(
            block.iter().map(|&b| if b == 1 { mean_scale } else { -mean_scale }),
        );
        out.push(StateTemplate { chol, mean });
    }
    Ok(out)
}

/// What a switch event does to the hidden state.
#[derive(Clone, Copy, Debug)]
enum StepRule {
    /// Jump uniformly to one of the other states.
    Uniform,
    /// Step one position around the state ring in a fixed direction.
    Cycle { descending: bool },
}

fn sample_state_trace(
    t_max: usize,
    n_states: usize,
    switch_rate: f64,
    step_rule: StepRule,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut trace = Vec::with_capacity(t_max);
    let mut state = rng.random_range(0..n_states);
    trace.push(state);
    for _ in 1..t_max {
        if rng.random::<f64>() < switch_rate {
            // Both rules keep the stationary distribution uniform
            // regardless of the rate: the uniform jump by symmetry, the
            // ring step because its transition matrix is a permutation.
            let step = match step_rule {
                StepRule::Uniform => rng.random_range(1..n_states),
                StepRule::Cycle { descending: false } => 1,
                StepRule::Cycle { descending: true } => n_states - 1,
            };
            state = (state + step) % n_states;
        }
        trace.push(state);
    }
    trace
}

fn sample_bold(
    cfg: &SynthConfig,
    templates: &[StateTemplate],
    trace: &[usize],
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let n = cfg.n_rois;
    let a = cfg.ar_coeff;
    let innov_scale = (1.0 - a * a).sqrt();
    let mut data = Array2::zeros((n, cfg.t_max));
    let mut x = Array1::<f64>::zeros(n);
    for (tau, &state) in trace.iter().enumerate() {
        let tpl = &templates[state];
        let eps: Array1<f64> =
            Array1::from_iter((0..n).map(|_| StandardNormal.sample(rng)));
        let corr = tpl.chol.dot(&eps);
        // AR(1) around the state mean: the process relaxes toward the
        // current state's block pattern with the same within-state
        // covariance as before.
        x = if tau == 0 {
            &tpl.mean + &corr
        } else {
            &tpl.mean + &(a * &(&x - &tpl.mean)) + &(innov_scale * &corr)
        };
        for i in 0..n {
            let noise: f64 = StandardNormal.sample(rng);
            data[(i, tau)] = x[i] + cfg.noise_sd * noise;
        }
    }
    data
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not
/// positive definite.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

// ---------------------------------------------------------------------------
// Slicing and missing-timestep masking
// ---------------------------------------------------------------------------

/// Contiguous random slice of length `len` along time, start uniform on
/// `[0, T_max − len]`.
pub fn random_time_slice(
    series: &RoiTimeSeries,
    len: usize,
    rng: &mut impl Rng,
) -> Result<RoiTimeSeries, SignalError> {
    let t_max = series.t_max();
    if len > t_max {
        return Err(SignalError::SliceTooLong { len, t_max });
    }
    let start = rng.random_range(0..=t_max - len);
    let data = series.data.slice(ndarray::s![.., start..start + len]).to_owned();
    Ok(RoiTimeSeries {
        subject_id: series.subject_id.clone(),
        data,
        labels: series.labels.clone(),
    })
}

/// Zero out `⌊ratio·T_max⌋` distinct timepoint columns chosen uniformly
/// without replacement. Shapes are unchanged; the missing samples are
/// masked, not deleted.
pub fn mask_timesteps(
    series: &RoiTimeSeries,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<RoiTimeSeries, SignalError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SignalError::BadRatio(ratio));
    }
    let t_max = series.t_max();
    let k = (ratio * t_max as f64).floor() as usize;
    let mut out = series.clone();
    if k == 0 {
        return Ok(out);
    }
    let cols = rand::seq::index::sample(rng, t_max, k);
    for col in cols.iter() {
        out.data.column_mut(col).fill(0.0);
    }
    debug_assert_eq!(
        (0..t_max)
            .filter(|&c| out.data.column(c) == series.data.column(c))
            .count()
            .max(t_max - k),
        t_max - k
    );
    Ok(out)
}
