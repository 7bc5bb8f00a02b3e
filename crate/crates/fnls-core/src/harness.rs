//! Experiment configuration, dispatch, parameter sweeps and result records.
//!
//! A config is a TOML document:
//!
//! ```toml
//! experiment = "invariance"   # sample | evolve | invariance | picard-scaling
//!                             # | counting-audit | tensor-audit | rao-audit
//! seed = 0
//! threads = 8                 # does not affect any emitted number
//! output_dir = "out"
//!
//! [params]                    # experiment-specific, see `params_doc`
//! n = 32
//!
//! [grid]                      # optional: a sweep over the product of the lists
//! alpha = [1.5, 2.0]
//! ```
//!
//! Every number in a record is a function of `(experiment, seed, params, grid)`
//! and the crate version; the thread count only changes wall time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::counting::{self, standard_sweep, AuditReport, LemmaId, DEFAULT_BAD_CONSTANT};
use crate::dynamics::{self, Flow, FlowConfig, Scheme};
use crate::error::{invalid, Error, Result};
use crate::gibbs::{GibbsEnsemble, GibbsParams, Sign};
use crate::io::{self, Row};
use crate::picard::{scaling_study, McSettings};
use crate::rao::{self, DyadicKernels};
use crate::rng::{keyed_seed, stream_rng};
use crate::spectral::{Dispersion, QuarticEvaluator, SpectralField};
use crate::stats::{effective_sample_size, weighted_mean, Estimate};
use crate::tensor::{self, TensorLemma};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Largest band accepted by the invariance experiment.
pub const INVARIANCE_MAX_N: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Sample,
    Evolve,
    Invariance,
    PicardScaling,
    CountingAudit,
    TensorAudit,
    RaoAudit,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Sample,
        Experiment::Evolve,
        Experiment::Invariance,
        Experiment::PicardScaling,
        Experiment::CountingAudit,
        Experiment::TensorAudit,
        Experiment::RaoAudit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Sample => "sample",
            Experiment::Evolve => "evolve",
            Experiment::Invariance => "invariance",
            Experiment::PicardScaling => "picard-scaling",
            Experiment::CountingAudit => "counting-audit",
            Experiment::TensorAudit => "tensor-audit",
            Experiment::RaoAudit => "rao-audit",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown experiment {s:?}")))
    }
}

pub type Params = BTreeMap<String, Value>;

fn default_threads() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub params: Params,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grid: BTreeMap<String, Vec<Value>>,
}

/// Parses a scalar or array written in TOML syntax; bare words become strings.
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key present"))
            .unwrap_or_else(|_| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            seed: 0,
            threads: 1,
            output_dir: default_output(),
            params: Params::new(),
            grid: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(s).map_err(|e| Error::Configuration(format!("config: {e}")))?;
        let v = serde_json::to_value(table)?;
        serde_json::from_value(v).map_err(|e| Error::Configuration(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value`; `key` is `experiment`, `seed`, `threads`,
    /// `output_dir`, `grid.<name>`, `params.<name>` or a bare parameter name.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Configuration(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = parse_value(raw);
        match key {
            "experiment" => self.experiment = raw.parse()?,
            "seed" => {
                self.seed = raw
                    .parse()
                    .map_err(|_| Error::Configuration(format!("seed must be a 64-bit integer, got {raw}")))?
            }
            "threads" => {
                self.threads = raw
                    .parse()
                    .map_err(|_| Error::Configuration(format!("threads must be an integer, got {raw}")))?
            }
            "output_dir" => self.output_dir = PathBuf::from(raw),
            _ => {
                if let Some(name) = key.strip_prefix("grid.") {
                    let Value::Array(list) = value else {
                        return Err(Error::Configuration(format!("grid.{name} must be a list")));
                    };
                    self.grid.insert(name.to_string(), list);
                } else {
                    let name = key.strip_prefix("params.").unwrap_or(key);
                    if name.is_empty() {
                        return Err(Error::Configuration("empty parameter name".into()));
                    }
                    self.params.insert(name.to_string(), value);
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the version, experiment, seed, params and grid (each grid
    /// list in canonical order); threads and output_dir are excluded.
    pub fn digest(&self) -> String {
        let grid: BTreeMap<&String, Vec<Value>> =
            self.grid.iter().map(|(k, v)| (k, sorted_values(v))).collect();
        let canon = json!({
            "version": VERSION,
            "experiment": self.experiment.name(),
            "seed": self.seed,
            "params": self.params,
            "grid": grid,
        });
        hex::encode(Sha256::digest(canon.to_string().as_bytes()))
    }

    /// Checks every parameter (and every grid cell) against module preconditions.
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Configuration("threads must be positive".into()));
        }
        if self.grid.values().any(Vec::is_empty) {
            return Err(Error::Configuration("grid lists must be nonempty".into()));
        }
        for (_, params) in self.cells() {
            ExperimentParams::parse(self.experiment, &params)?;
        }
        Ok(())
    }

    /// `(cell key, params)` for every grid cell, sorted by key; one unnamed cell
    /// without a grid.
    pub fn cells(&self) -> Vec<(String, Params)> {
        let mut cells = vec![(Vec::<String>::new(), self.params.clone())];
        for (name, values) in &self.grid {
            let mut next = Vec::new();
            for (key, params) in &cells {
                for v in sorted_values(values) {
                    let mut k = key.clone();
                    k.push(format!("{name}={v}"));
                    let mut p = params.clone();
                    p.insert(name.clone(), v);
                    next.push((k, p));
                }
            }
            cells = next;
        }
        let mut out: Vec<(String, Params)> = cells.into_iter().map(|(k, p)| (k.join(";"), p)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out.dedup_by(|a, b| a.0 == b.0);
        out
    }
}

fn sorted_values(v: &[Value]) -> Vec<Value> {
    let mut v = v.to_vec();
    v.sort_by_cached_key(|x| x.to_string());
    v
}

/// Reads typed parameters and rejects unknown keys.
struct Reader<'a> {
    map: &'a Params,
    seen: BTreeSet<&'static str>,
}

impl<'a> Reader<'a> {
    fn new(map: &'a Params) -> Self {
        Reader {
            map,
            seen: BTreeSet::new(),
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.insert(key);
        self.map.get(key)
    }

    fn bad<T>(key: &str, what: &str, v: &Value) -> Result<T> {
        invalid(format!("parameter {key} must be {what}, got {v}"))
    }

    fn f64(&mut self, key: &'static str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.as_f64().map_or_else(|| Self::bad(key, "a number", v), Ok),
        }
    }

    fn opt_f64(&mut self, key: &'static str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map_or_else(|| Self::bad(key, "a number", v), |x| Ok(Some(x))),
        }
    }

    fn u64(&mut self, key: &'static str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map_or_else(|| Self::bad(key, "a nonnegative integer", v), Ok),
        }
    }

    fn bool(&mut self, key: &'static str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.as_bool().map_or_else(|| Self::bad(key, "true or false", v), Ok),
        }
    }

    fn parsed<T: FromStr<Err = Error>>(&mut self, key: &'static str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::String(s)) => s.parse(),
            Some(v) => Self::bad(key, "a string", v),
        }
    }

    fn list<T>(&mut self, key: &'static str, default: &[T], f: impl Fn(&Value) -> Option<T>) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| f(x).map_or_else(|| Self::bad(key, "a list of numbers", x), Ok))
                .collect(),
            Some(v) => f(v).map(|x| vec![x]).map_or_else(|| Self::bad(key, "a list", v), Ok),
        }
    }

    fn f64_list(&mut self, key: &'static str, default: &[f64]) -> Result<Vec<f64>> {
        self.list(key, default, Value::as_f64)
    }

    fn u32_list(&mut self, key: &'static str, default: &[u32]) -> Result<Vec<u32>> {
        self.list(key, default, |v| v.as_u64().and_then(|x| u32::try_from(x).ok()))
    }

    fn i64_list(&mut self, key: &'static str, default: &[i64]) -> Result<Vec<i64>> {
        self.list(key, default, Value::as_i64)
    }

    fn names(&mut self, key: &'static str) -> Result<Option<Vec<String>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) if s == "all" => Ok(None),
            Some(Value::String(s)) => Ok(Some(vec![s.clone()])),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| {
                    x.as_str()
                        .map(str::to_string)
                        .map_or_else(|| Self::bad(key, "a list of names", x), Ok)
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Self::bad(key, "a name or list of names", v),
        }
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.seen.contains(k.as_str()))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Configuration(format!("unknown parameters {unknown:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleParams {
    pub gibbs: GibbsParams,
    pub count: usize,
    pub write_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolveParams {
    pub flow: FlowConfig,
    pub snapshots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceParams {
    pub gibbs: GibbsParams,
    pub samples: usize,
    pub dt: f64,
    pub t_final: f64,
    pub scheme: Scheme,
    /// Also evolve the same ensemble with `dt/2`.
    pub dt_refine: bool,
    /// `false` gives every sample unit weight (plain Gaussian free measure).
    pub reweight: bool,
    /// `false` integrates only the linear flow.
    pub nonlinear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardParams {
    pub alphas: Vec<f64>,
    pub ns: Vec<u32>,
    pub delta: f64,
    pub t: f64,
    pub mc_samples: usize,
    pub mc_max_n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditParams {
    pub alpha: f64,
    pub scales: Vec<u32>,
    pub ms: Vec<i64>,
    pub lemmas: Option<Vec<String>>,
    pub gamma: bool,
    pub bad_constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RaoParams {
    pub alpha: f64,
    pub n: f64,
    pub l: f64,
    pub dt: f64,
    pub t_final: f64,
    pub kappa: f64,
    pub write_kernel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ExperimentParams {
    Sample(SampleParams),
    Evolve(EvolveParams),
    Invariance(InvarianceParams),
    PicardScaling(PicardParams),
    CountingAudit(AuditParams),
    TensorAudit(AuditParams),
    RaoAudit(RaoParams),
}

/// Parameter names and defaults, one line each.
pub fn params_doc(e: Experiment) -> &'static str {
    match e {
        Experiment::Sample => {
            "alpha=1.5 n=32 sign=\"defocusing\" cutoff=<none> count=1000 write_ensemble=true"
        }
        Experiment::Evolve => {
            "alpha=1.5 n=8 dt=1e-3 t_final=1.0 sign=\"defocusing\" scheme=\"rk4\" diag_stride=1 snapshots=false"
        }
        Experiment::Invariance => {
            "alpha=1.5 n=32 sign=\"defocusing\" cutoff=<none> samples=1000 dt=1e-3 t_final=1.0 scheme=\"rk4\" dt_refine=false reweight=true nonlinear=true"
        }
        Experiment::PicardScaling => {
            "alphas=[1,1.5,2] ns=[64,128,256,512,1024,2048] delta=0.4 t=0.1 mc_samples=0 mc_max_n=64"
        }
        Experiment::CountingAudit | Experiment::TensorAudit => {
            "alpha=1.5 scales=[8,16,32,64] ms=[0,1,-1,5] lemmas=\"all\" gamma=true bad_constant=0.125"
        }
        Experiment::RaoAudit => {
            "alpha=1.5 n=16 l=4 dt=1e-3 t_final=0.1 kappa=1.0 write_kernel=false"
        }
    }
}

fn gibbs_params(r: &mut Reader, n_default: f64) -> Result<GibbsParams> {
    let p = GibbsParams {
        alpha: r.f64("alpha", 1.5)?,
        n: r.f64("n", n_default)?,
        sign: r.parsed("sign", Sign::Defocusing)?,
        cutoff: r.opt_f64("cutoff")?,
    };
    p.validate()?;
    Ok(p)
}

fn audit_params(r: &mut Reader) -> Result<AuditParams> {
    let p = AuditParams {
        alpha: r.f64("alpha", 1.5)?,
        scales: r.u32_list("scales", &[8, 16, 32, 64])?,
        ms: r.i64_list("ms", &[0, 1, -1, 5])?,
        lemmas: r.names("lemmas")?,
        gamma: r.bool("gamma", true)?,
        bad_constant: r.f64("bad_constant", DEFAULT_BAD_CONSTANT)?,
    };
    Dispersion::new(p.alpha)?;
    let mut s = p.scales.clone();
    s.sort_unstable();
    s.dedup();
    if s.len() < 3 {
        return invalid("audits need at least three distinct scales");
    }
    if s.iter().any(|&n| n < 4) {
        return invalid("audit scales must be at least 4");
    }
    if p.ms.is_empty() {
        return invalid("ms must be nonempty");
    }
    if !(p.bad_constant > 0.0 && p.bad_constant < 1.0) {
        return invalid("bad_constant must lie in (0,1)");
    }
    Ok(p)
}

impl ExperimentParams {
    pub fn parse(e: Experiment, params: &Params) -> Result<Self> {
        let mut r = Reader::new(params);
        let out = match e {
            Experiment::Sample => {
                let gibbs = gibbs_params(&mut r, 32.0)?;
                let count = r.u64("count", 1000)? as usize;
                if count == 0 {
                    return invalid("count must be positive");
                }
                ExperimentParams::Sample(SampleParams {
                    gibbs,
                    count,
                    write_ensemble: r.bool("write_ensemble", true)?,
                })
            }
            Experiment::Evolve => {
                let flow = FlowConfig::new(
                    r.f64("alpha", 1.5)?,
                    r.f64("n", 8.0)?,
                    r.f64("dt", 1e-3)?,
                    r.f64("t_final", 1.0)?,
                    r.parsed("sign", Sign::Defocusing)?,
                )
                .with_scheme(r.parsed("scheme", Scheme::Rk4)?)
                .with_diag_stride(r.u64("diag_stride", 1)? as usize);
                flow.validate()?;
                if flow.t_final < 0.0 {
                    return invalid("t_final must be nonnegative");
                }
                ExperimentParams::Evolve(EvolveParams {
                    flow,
                    snapshots: r.bool("snapshots", false)?,
                })
            }
            Experiment::Invariance => {
                let gibbs = gibbs_params(&mut r, 32.0)?;
                if gibbs.n > INVARIANCE_MAX_N {
                    return invalid(format!("invariance runs are limited to N ≤ {INVARIANCE_MAX_N}"));
                }
                let p = InvarianceParams {
                    gibbs,
                    samples: r.u64("samples", 1000)? as usize,
                    dt: r.f64("dt", 1e-3)?,
                    t_final: r.f64("t_final", 1.0)?,
                    scheme: r.parsed("scheme", Scheme::Rk4)?,
                    dt_refine: r.bool("dt_refine", false)?,
                    reweight: r.bool("reweight", true)?,
                    nonlinear: r.bool("nonlinear", true)?,
                };
                if p.samples < 2 {
                    return invalid("samples must be at least 2");
                }
                if p.t_final < 0.0 {
                    return invalid("t_final must be nonnegative");
                }
                invariance_flow(&p, p.dt)?.validate()?;
                ExperimentParams::Invariance(p)
            }
            Experiment::PicardScaling => {
                let p = PicardParams {
                    alphas: r.f64_list("alphas", &[1.0, 1.5, 2.0])?,
                    ns: r.u32_list("ns", &[64, 128, 256, 512, 1024, 2048])?,
                    delta: r.f64("delta", 0.4)?,
                    t: r.f64("t", 0.1)?,
                    mc_samples: r.u64("mc_samples", 0)? as usize,
                    mc_max_n: r.u64("mc_max_n", 64)? as u32,
                };
                if p.alphas.is_empty() {
                    return invalid("alphas must be nonempty");
                }
                if p.ns.len() < 3 || p.ns.windows(2).any(|w| w[0] >= w[1]) {
                    return invalid("ns must list at least three strictly increasing scales");
                }
                for &a in &p.alphas {
                    for &n in &p.ns {
                        crate::picard::PicardQuery::new(n, p.delta, a, p.t)?;
                    }
                }
                ExperimentParams::PicardScaling(p)
            }
            Experiment::CountingAudit => {
                let p = audit_params(&mut r)?;
                counting_lemmas(&p)?;
                ExperimentParams::CountingAudit(p)
            }
            Experiment::TensorAudit => {
                let p = audit_params(&mut r)?;
                tensor_lemmas(&p)?;
                ExperimentParams::TensorAudit(p)
            }
            Experiment::RaoAudit => {
                let p = RaoParams {
                    alpha: r.f64("alpha", 1.5)?,
                    n: r.f64("n", 16.0)?,
                    l: r.f64("l", 4.0)?,
                    dt: r.f64("dt", 1e-3)?,
                    t_final: r.f64("t_final", 0.1)?,
                    kappa: r.f64("kappa", 1.0)?,
                    write_kernel: r.bool("write_kernel", false)?,
                };
                Dispersion::new(p.alpha)?;
                if !(p.l >= 1.0 && p.l.log2().fract() == 0.0) {
                    return invalid("l must be a power of two, at least 1");
                }
                if !(p.l < p.n) {
                    return invalid("l must be below n");
                }
                if !(p.dt > 0.0) || !(p.t_final >= 0.0) || !p.t_final.is_finite() {
                    return invalid("dt must be positive and t_final nonnegative");
                }
                if !(p.kappa >= 0.0) {
                    return invalid("kappa must be nonnegative");
                }
                ExperimentParams::RaoAudit(p)
            }
        };
        r.finish()?;
        Ok(out)
    }
}

fn counting_lemmas(p: &AuditParams) -> Result<Vec<LemmaId>> {
    match &p.lemmas {
        None => Ok(LemmaId::ALL.to_vec()),
        Some(names) => names.iter().map(|s| s.parse()).collect(),
    }
}

fn tensor_lemmas(p: &AuditParams) -> Result<Vec<TensorLemma>> {
    match &p.lemmas {
        None => Ok(TensorLemma::ALL.to_vec()),
        Some(names) => names.iter().map(|s| s.parse()).collect(),
    }
}

/// Output of one experiment or sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub version: String,
    pub config_digest: String,
    pub timestamp: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub params: Params,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grid: BTreeMap<String, Vec<Value>>,
    /// Conditions worth attention (blow-ups, growth flags, failed cells).
    pub flags: Vec<String>,
    pub rows: Vec<Row>,
    /// Binary side outputs, `(file name, bytes)`.
    #[serde(skip)]
    pub artifacts: Vec<(String, Vec<u8>)>,
}

impl ExperimentRecord {
    /// The record without its timestamp, as a JSON string.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("object").remove("timestamp");
        v.to_string()
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        io::write_csv(&mut buf, &self.config_digest, &self.rows)?;
        Ok(buf)
    }

    /// Writes `<experiment>.csv`, `<experiment>.jsonl` and the artifacts into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let stem = self.experiment.name();
        let mut written = Vec::new();
        let csv = dir.join(format!("{stem}.csv"));
        io::write_atomic(&csv, &self.csv_bytes()?)?;
        written.push(csv);
        let jsonl = dir.join(format!("{stem}.jsonl"));
        let mut line = serde_json::to_string(self)?;
        line.push('\n');
        io::write_atomic(&jsonl, line.as_bytes())?;
        written.push(jsonl);
        for (name, bytes) in &self.artifacts {
            let p = dir.join(name);
            io::write_atomic(&p, bytes)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Reads JSON-lines records from several files; all must share one version.
pub fn merge_records(paths: &[PathBuf]) -> Result<Vec<ExperimentRecord>> {
    let mut out: Vec<ExperimentRecord> = Vec::new();
    for p in paths {
        for line in std::fs::read_to_string(p)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ExperimentRecord = serde_json::from_str(line)?;
            if let Some(first) = out.first() {
                if first.version != r.version {
                    return Err(Error::Format(format!(
                        "cannot merge records of versions {} and {}",
                        first.version, r.version
                    )));
                }
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// JSON number, or a string for non-finite values.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or_else(|| Value::String(x.to_string()), Value::Number)
}

fn row(pairs: Vec<(&str, Value)>) -> Row {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

/// Result of one cell: rows, flags and artifacts.
type CellOutput = (Vec<Row>, Vec<String>, Vec<(String, Vec<u8>)>);

/// Runs `cfg` in a pool of `cfg.threads` workers.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
    pool.install(|| {
        if cfg.grid.is_empty() {
            let (rows, flags, artifacts) = run_cell(cfg.experiment, &cfg.params, cfg.seed)?;
            Ok(record(cfg, rows, flags, artifacts))
        } else {
            run_sweep(cfg)
        }
    })
}

fn record(cfg: &ExperimentConfig, rows: Vec<Row>, flags: Vec<String>, artifacts: Vec<(String, Vec<u8>)>) -> ExperimentRecord {
    ExperimentRecord {
        version: VERSION.to_string(),
        config_digest: cfg.digest(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        experiment: cfg.experiment,
        seed: cfg.seed,
        params: cfg.params.clone(),
        grid: cfg.grid.iter().map(|(k, v)| (k.clone(), sorted_values(v))).collect(),
        flags,
        rows,
        artifacts,
    }
}

/// Maps the grid over the current pool. Cell `c` runs with seed
/// `keyed_seed(seed, c)`; a failing cell yields an `error` row and the sweep goes on.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    if cfg.grid.is_empty() {
        return Err(Error::Configuration("sweep needs a nonempty grid".into()));
    }
    let cells = cfg.cells();
    let results: Vec<(String, Result<CellOutput>)> = cells
        .par_iter()
        .map(|(key, params)| {
            (key.clone(), run_cell(cfg.experiment, params, keyed_seed(cfg.seed, key)))
        })
        .collect();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    let mut artifacts = Vec::new();
    for (key, res) in results {
        match res {
            Ok((cell_rows, cell_flags, cell_artifacts)) => {
                for mut r in cell_rows {
                    r.insert("cell".into(), Value::String(key.clone()));
                    rows.push(r);
                }
                flags.extend(cell_flags.into_iter().map(|f| format!("{key}: {f}")));
                let tag = key.replace(['=', ';', '"', '/', ' '], "_");
                artifacts.extend(cell_artifacts.into_iter().map(|(n, b)| (format!("{tag}.{n}"), b)));
            }
            Err(e) => {
                flags.push(format!("{key}: failed"));
                rows.push(row(vec![
                    ("cell", Value::String(key.clone())),
                    ("error", Value::String(e.to_string())),
                    ("numerical", Value::Bool(e.is_numerical())),
                ]));
            }
        }
    }
    Ok(record(cfg, rows, flags, artifacts))
}

fn run_cell(e: Experiment, params: &Params, seed: u64) -> Result<CellOutput> {
    match ExperimentParams::parse(e, params)? {
        ExperimentParams::Sample(p) => run_sample(&p, seed),
        ExperimentParams::Evolve(p) => run_evolve(&p, seed),
        ExperimentParams::Invariance(p) => {
            let rep = invariance_study(&p, seed)?;
            Ok(invariance_rows(&rep))
        }
        ExperimentParams::PicardScaling(p) => run_picard(&p, seed),
        ExperimentParams::CountingAudit(p) => {
            let sweep = standard_sweep(p.alpha, &p.scales, &p.ms, p.gamma, p.bad_constant);
            let reps = counting::audit_many(&counting_lemmas(&p)?, p.alpha, &sweep)?;
            Ok(audit_rows(&reps))
        }
        ExperimentParams::TensorAudit(p) => {
            let sweep = standard_sweep(p.alpha, &p.scales, &p.ms, p.gamma, p.bad_constant);
            let reps = tensor::tensor_audit_many(&tensor_lemmas(&p)?, p.alpha, &sweep)?;
            Ok(audit_rows(&reps))
        }
        ExperimentParams::RaoAudit(p) => run_rao(&p, seed),
    }
}

fn run_sample(p: &SampleParams, seed: u64) -> Result<CellOutput> {
    let e = GibbsEnsemble::draw(p.gibbs, p.count, seed)?;
    let mut q = QuarticEvaluator::new(p.gibbs.kmax());
    let mut rows: Vec<Row> = e
        .samples
        .iter()
        .zip(&e.log_weights)
        .enumerate()
        .map(|(i, (u, lw))| {
            row(vec![
                ("kind", json!("sample")),
                ("index", json!(i)),
                ("log_weight", num(*lw)),
                ("mass", num(dynamics::mass(u))),
                ("quartic", num(q.eval(u))),
            ])
        })
        .collect();
    let mut flags = Vec::new();
    match e.normalized_weights() {
        Ok(w) => rows.push(row(vec![
            ("kind", json!("summary")),
            ("effective_sample_size", num(effective_sample_size(&w))),
        ])),
        Err(err) => flags.push(err.to_string()),
    }
    let mut artifacts = Vec::new();
    if p.write_ensemble {
        let mut buf = Vec::new();
        io::write_ensemble(&mut buf, &e)?;
        artifacts.push(("ensemble.bin".to_string(), buf));
    }
    Ok((rows, flags, artifacts))
}

fn run_evolve(p: &EvolveParams, seed: u64) -> Result<CellOutput> {
    let cfg = &p.flow;
    let u0 = crate::gibbs::sample_gff(cfg.alpha, cfg.n, &mut stream_rng(seed, 0))?;
    let d = Dispersion::new(cfg.alpha)?;
    let steps = cfg.steps();
    let h = if steps == 0 { 0.0 } else { cfg.t_final / steps as f64 };
    let stride = cfg.diag_stride as u64;
    let mut u = u0.resized(cfg.kmax());
    let observe = |t: f64, u: &SpectralField| {
        row(vec![
            ("time", num(t)),
            ("mass", num(dynamics::mass(u))),
            ("hamiltonian", num(dynamics::hamiltonian(u, cfg.sign, &d))),
        ])
    };
    let mut rows = vec![observe(0.0, &u)];
    let mut snaps = vec![(0.0, u.clone())];
    let mut done = 0u64;
    let mut chunk_flow: Option<(u64, Flow)> = None;
    while done < steps {
        let len = stride.min(steps - done);
        if chunk_flow.as_ref().map(|c| c.0) != Some(len) {
            let c = FlowConfig {
                dt: h,
                t_final: h * len as f64,
                diag_stride: 1,
                ..*cfg
            };
            chunk_flow = Some((len, Flow::new(c)?));
        }
        let flow = &mut chunk_flow.as_mut().expect("set").1;
        flow.advance(u.coeffs_mut(), false)?;
        done += len;
        let t = h * done as f64;
        rows.push(observe(t, &u));
        if p.snapshots {
            snaps.push((t, u.clone()));
        }
    }
    let (m0, h0) = (dynamics::mass(&u0), dynamics::hamiltonian(&u0, cfg.sign, &d));
    let max_drift = |key: &str, v0: f64| {
        rows.iter()
            .filter_map(|r| r.get(key).and_then(Value::as_f64))
            .map(|v| (v - v0).abs())
            .fold(0.0, f64::max)
    };
    let summary = row(vec![
        ("kind", json!("summary")),
        ("max_mass_drift", num(max_drift("mass", m0))),
        ("max_hamiltonian_drift", num(max_drift("hamiltonian", h0))),
    ]);
    for r in rows.iter_mut() {
        r.insert("kind".into(), json!("series"));
    }
    rows.push(summary);
    let mut artifacts = Vec::new();
    if p.snapshots {
        let mut buf = Vec::new();
        io::write_fields(&mut buf, &snaps)?;
        artifacts.push(("trajectory.bin".to_string(), buf));
    }
    Ok((rows, Vec::new(), artifacts))
}

fn invariance_flow(p: &InvarianceParams, dt: f64) -> Result<FlowConfig> {
    let mut cfg = FlowConfig::new(p.gibbs.alpha, p.gibbs.n, dt, p.t_final, p.gibbs.sign)
        .with_scheme(p.scheme);
    cfg.nonlinear = p.nonlinear;
    cfg.diag_stride = usize::MAX;
    cfg.validate()?;
    Ok(cfg)
}

/// Modes whose statistics are tracked by the invariance experiment.
pub const TRACKED_MODES: [i64; 4] = [0, 1, 2, 4];

/// Observable names in reporting order.
pub fn observable_names() -> Vec<String> {
    let mut v: Vec<String> = ["mass", "quartic", "hamiltonian"].iter().map(|s| s.to_string()).collect();
    for k in TRACKED_MODES {
        v.push(format!("re_u{k}"));
        v.push(format!("abs2_u{k}"));
    }
    v
}

fn observables(u: &SpectralField, sign: Sign, d: &Dispersion, q: &mut QuarticEvaluator) -> Vec<f64> {
    let q4 = q.eval(u);
    let mut v = vec![
        dynamics::mass(u),
        q4,
        dynamics::kinetic_energy(u, d) + sign.factor() * 0.5 * q4,
    ];
    for k in TRACKED_MODES {
        let z = u.get(k);
        v.push(z.re);
        v.push(z.norm_sqr());
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableStat {
    pub name: String,
    pub initial: Estimate,
    pub evolved: Estimate,
    /// `|mean(t) − mean(0)| / (se(0)² + se(t)²)^{1/2}`; zero when the means are equal.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRun {
    pub dt: f64,
    pub blowups: usize,
    pub stats: Vec<ObservableStat>,
}

impl InvarianceRun {
    pub fn max_z(&self) -> f64 {
        self.stats.iter().map(|s| s.z).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub params: InvarianceParams,
    pub effective_sample_size: f64,
    /// The run at `dt`, then the run at `dt/2` when requested.
    pub runs: Vec<InvarianceRun>,
}

fn z_score(a: &Estimate, b: &Estimate) -> f64 {
    let diff = (b.mean - a.mean).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
    }
}

/// Weighted observable means at `t = 0` and `t_final` over one Gibbs ensemble.
pub fn invariance_study(p: &InvarianceParams, seed: u64) -> Result<InvarianceReport> {
    let ens = GibbsEnsemble::draw(p.gibbs, p.samples, seed)?;
    let log_w: Vec<f64> = if p.reweight {
        ens.log_weights.clone()
    } else {
        vec![0.0; ens.len()]
    };
    let d = Dispersion::new(p.gibbs.alpha)?;
    let kmax = p.gibbs.kmax();
    let sign = p.gibbs.sign;
    let initial: Vec<Vec<f64>> = ens
        .samples
        .par_iter()
        .map_init(|| QuarticEvaluator::new(kmax), |q, u| observables(u, sign, &d, q))
        .collect();
    let mut dts = vec![p.dt];
    if p.dt_refine {
        dts.push(0.5 * p.dt);
    }
    let mut runs = Vec::new();
    let mut ess = 0.0;
    for dt in dts {
        let cfg = invariance_flow(p, dt)?;
        let evolved: Vec<Result<Option<Vec<f64>>>> = ens
            .samples
            .par_iter()
            .zip(&log_w)
            .map_init(
                || (Flow::new(cfg), QuarticEvaluator::new(kmax)),
                |(flow, q), (u, lw)| {
                    if *lw == f64::NEG_INFINITY {
                        return Ok(Some(vec![0.0; 3 + 2 * TRACKED_MODES.len()]));
                    }
                    let flow = flow.as_mut().map_err(|e| Error::Configuration(e.to_string()))?;
                    let mut v = u.clone();
                    match flow.advance(v.coeffs_mut(), false) {
                        Ok(_) => Ok(Some(observables(&v, sign, &d, q))),
                        Err(Error::BlowUp { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                },
            )
            .collect();
        let evolved: Vec<Option<Vec<f64>>> = evolved.into_iter().collect::<Result<_>>()?;
        let blowups = evolved.iter().filter(|e| e.is_none()).count();
        let lw: Vec<f64> = log_w
            .iter()
            .zip(&evolved)
            .map(|(w, e)| if e.is_some() { *w } else { f64::NEG_INFINITY })
            .collect();
        let w = crate::stats::normalized_weights(&lw)?;
        ess = effective_sample_size(&w);
        let names = observable_names();
        let stats = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let v0: Vec<f64> = initial.iter().map(|o| o[j]).collect();
                let vt: Vec<f64> = evolved
                    .iter()
                    .zip(&initial)
                    .map(|(e, o)| e.as_ref().map_or(o[j], |e| e[j]))
                    .collect();
                let a = weighted_mean(&w, &v0);
                let b = weighted_mean(&w, &vt);
                ObservableStat {
                    name: name.clone(),
                    z: z_score(&a, &b),
                    initial: a,
                    evolved: b,
                }
            })
            .collect();
        runs.push(InvarianceRun { dt, blowups, stats });
    }
    Ok(InvarianceReport {
        params: p.clone(),
        effective_sample_size: ess,
        runs,
    })
}

fn invariance_rows(rep: &InvarianceReport) -> CellOutput {
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for run in &rep.runs {
        if run.blowups > 0 {
            flags.push(format!("{} samples blew up at dt={}", run.blowups, run.dt));
        }
        for s in &run.stats {
            rows.push(row(vec![
                ("dt", num(run.dt)),
                ("observable", json!(s.name)),
                ("mean0", num(s.initial.mean)),
                ("stderr0", num(s.initial.stderr)),
                ("mean_t", num(s.evolved.mean)),
                ("stderr_t", num(s.evolved.stderr)),
                ("z", num(s.z)),
                ("blowups", json!(run.blowups)),
                ("effective_sample_size", num(rep.effective_sample_size)),
            ]));
        }
    }
    (rows, flags, Vec::new())
}

/// Invariance record for `cfg` (which must name the invariance experiment).
pub fn run_invariance(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    if cfg.experiment != Experiment::Invariance {
        return Err(Error::Configuration("config is not an invariance experiment".into()));
    }
    run(cfg)
}

fn run_picard(p: &PicardParams, seed: u64) -> Result<CellOutput> {
    let mc = (p.mc_samples > 0).then_some(McSettings {
        samples: p.mc_samples,
        seed,
        max_n: p.mc_max_n,
    });
    let study = scaling_study(&p.alphas, &p.ns, p.delta, p.t, mc)?;
    let rows = study
        .records
        .iter()
        .map(|r| {
            row(vec![
                ("alpha", num(r.alpha)),
                ("N", json!(r.n)),
                ("wick_norm", num(r.wick_norm)),
                ("mc_norm", opt(r.mc_norm)),
                ("mc_stderr", opt(r.mc_stderr)),
                ("slope_so_far", opt(r.slope_so_far)),
                ("log_cubed_ratio", num(r.log_cubed_ratio)),
            ])
        })
        .collect();
    Ok((rows, Vec::new(), Vec::new()))
}

fn audit_rows(reports: &[AuditReport]) -> CellOutput {
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for rep in reports {
        if rep.flagged {
            flags.push(format!("{}: constant grows by {:.3} across a decade", rep.lemma, rep.max_growth));
        }
        for r in &rep.rows {
            rows.push(row(vec![
                ("kind", json!("row")),
                ("lemma_id", json!(r.lemma_id)),
                ("alpha", num(r.alpha)),
                ("N", json!(r.n)),
                ("N1", json!(r.n1)),
                ("N2", json!(r.n2)),
                ("N3", json!(r.n3)),
                ("m", json!(r.m)),
                ("gamma", opt(r.gamma)),
                ("count", num(r.count)),
                ("bound", num(r.bound)),
                ("ratio", num(r.ratio)),
            ]));
        }
        for s in &rep.per_scale {
            rows.push(row(vec![
                ("kind", json!("constant")),
                ("lemma_id", json!(rep.lemma)),
                ("alpha", num(rep.alpha)),
                ("N", json!(s.n)),
                ("ratio", num(s.constant)),
            ]));
        }
        rows.push(row(vec![
            ("kind", json!("summary")),
            ("lemma_id", json!(rep.lemma)),
            ("alpha", num(rep.alpha)),
            ("max_constant", num(rep.max_constant)),
            ("max_growth", num(rep.max_growth)),
            ("flagged", json!(rep.flagged)),
        ]));
    }
    (rows, flags, Vec::new())
}

/// Diagnostics of the random averaging operator for one low-frequency datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaoReport {
    pub defect: f64,
    pub defect_half_dt: f64,
    pub refinement_ratio: f64,
    pub telescoping_defect: f64,
    pub max_gram_offdiag: f64,
    pub max_cancel_residual: f64,
    pub psi_mass_error: f64,
    pub decay: rao::DecayProfile,
    #[serde(skip)]
    pub kernel: Option<rao::KernelMatrix>,
}

/// Low-frequency data is a GFF draw on `⟨k⟩ ≤ L` from `stream_rng(seed, 0)`;
/// the shell datum `F_N` is `Δ_N` of a GFF draw from `stream_rng(seed, 1)`.
pub fn rao_study(p: &RaoParams, seed: u64) -> Result<RaoReport> {
    let data = crate::gibbs::sample_gff(p.alpha, p.l, &mut stream_rng(seed, 0))?;
    let levels = DyadicKernels::compute(p.n, p.l, p.alpha, p.dt, p.t_final, &data)?;
    let top = levels.top();
    let traj_half = rao::low_freq_trajectory(p.l, p.alpha, 0.5 * p.dt, p.t_final, &data)?;
    let fine = rao::evolve_kernel(p.n, p.l, &traj_half, 0.5 * p.dt, p.t_final)?;
    let defect = rao::unitarity_defect(top);
    let defect_half_dt = rao::unitarity_defect(&fine);
    let checks = rao::cancellation_check(top, p.alpha)?;
    let max_gram_offdiag = checks.iter().map(|c| c.gram.norm()).fold(0.0, f64::max);
    let max_cancel_residual = checks.iter().map(|c| (c.lhs - c.rhs).norm()).fold(0.0, f64::max);
    let f_full = crate::gibbs::sample_gff(p.alpha, p.n, &mut stream_rng(seed, 1))?;
    let f_n = f_full.delta(p.n);
    let half = &levels.kernels[levels.kernels.len() - 2];
    let (psi, _zeta) = rao::psi_zeta(p.n, p.l, &f_n, top, half)?;
    let m_f = dynamics::mass(&f_n);
    let psi_mass_error = if m_f > 0.0 {
        (dynamics::mass(&psi) - m_f).abs() / m_f
    } else {
        0.0
    };
    let h = top.sub(half)?;
    Ok(RaoReport {
        defect,
        defect_half_dt,
        refinement_ratio: defect / defect_half_dt,
        telescoping_defect: levels.telescoping_defect()?,
        max_gram_offdiag,
        max_cancel_residual,
        psi_mass_error,
        decay: rao::kernel_decay_profile(&h, p.l, p.kappa),
        kernel: Some(top.clone()),
    })
}

fn run_rao(p: &RaoParams, seed: u64) -> Result<CellOutput> {
    let rep = rao_study(p, seed)?;
    let mut rows: Vec<Row> = [
        ("unitarity_defect", rep.defect),
        ("unitarity_defect_half_dt", rep.defect_half_dt),
        ("refinement_ratio", rep.refinement_ratio),
        ("telescoping_defect", rep.telescoping_defect),
        ("max_gram_offdiag", rep.max_gram_offdiag),
        ("max_cancel_residual", rep.max_cancel_residual),
        ("psi_mass_relative_error", rep.psi_mass_error),
        ("decay_weighted_mass", rep.decay.weighted_mass),
        ("decay_mass", rep.decay.mass),
    ]
    .into_iter()
    .map(|(k, v)| row(vec![("quantity", json!(k)), ("value", num(v))]))
    .collect();
    for (c, f) in &rep.decay.fractions {
        rows.push(row(vec![
            ("quantity", json!(format!("decay_fraction_{c}L"))),
            ("value", num(*f)),
        ]));
    }
    let mut artifacts = Vec::new();
    if p.write_kernel {
        let mut buf = Vec::new();
        io::write_kernel(&mut buf, rep.kernel.as_ref().expect("kernel kept"))?;
        artifacts.push(("kernel.bin".to_string(), buf));
    }
    Ok((rows, Vec::new(), artifacts))
}
