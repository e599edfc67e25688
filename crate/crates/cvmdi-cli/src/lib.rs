//! Scenario runner: parses a key-value configuration (plus command-line
//! overrides), drives the simulation -> estimation -> rate pipeline over
//! a sweep of block sizes, and emits a plot-ready CSV table.

use std::fmt::Write as _;
use std::path::PathBuf;

use cvmdi_core::keyrate::{
    optimize_rate, AnalysisMode, AnalysisSpec, CoherentSpec, RateReport, ReconciliationSide,
    SecurityBudget,
};
use cvmdi_core::protocol::ScenarioParams;
use rayon::prelude::*;

/// Configuration problems: unparseable files, unknown keys, violated
/// invariants. Mapped to exit code 2 by the binary.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Which finite-size analyses a run requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnalysisChoice {
    Collective,
    Coherent,
    #[default]
    Both,
}

impl AnalysisChoice {
    fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "collective" => Ok(Self::Collective),
            "coherent" => Ok(Self::Coherent),
            "both" => Ok(Self::Both),
            other => Err(ConfigError(format!(
                "analysis must be collective, coherent or both, got '{other}'"
            ))),
        }
    }
}

/// A named attack preset: link attenuations in dB plus excess noises.
/// Asymmetric presets keep the relay next to Alice (tau_A = 0.99,
/// xi_A = 0); symmetric presets wiretap both lines identically.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub tau_a: f64,
    pub tau_b: f64,
    pub xi_a: f64,
    pub xi_b: f64,
}

fn db_to_tau(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// The built-in presets. Attenuations are converted with
/// `tau = 10^(-dB/10)`.
pub fn presets() -> Vec<Preset> {
    let asym = |name, db| Preset {
        name,
        tau_a: 0.99,
        tau_b: db_to_tau(db),
        xi_a: 0.0,
        xi_b: 0.01,
    };
    let sym = |name, db| Preset {
        name,
        tau_a: db_to_tau(db),
        tau_b: db_to_tau(db),
        xi_a: 0.01,
        xi_b: 0.01,
    };
    vec![
        asym("asym-1db", 1.0),
        asym("asym-2db", 2.0),
        asym("asym-4db", 4.0),
        sym("sym-0.1db", 0.1),
        sym("sym-0.3db", 0.3),
        sym("sym-0.5db", 0.5),
        sym("sym-0.55db", 0.55),
    ]
}

pub fn preset_by_name(name: &str) -> Result<Preset, ConfigError> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let names: Vec<&str> = presets().iter().map(|p| p.name).collect();
            ConfigError(format!(
                "unknown scenario preset '{name}'; available: {}",
                names.join(", ")
            ))
        })
}

/// Everything one run needs: the scenario template, the analyses to
/// perform, the block-size sweep and the security targets.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub vmod_a: f64,
    pub vmod_b: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub xi_a: f64,
    pub xi_b: f64,
    pub d: u32,
    pub beta: f64,
    pub analysis: AnalysisChoice,
    pub sweep: Vec<u64>,
    /// Per-epsilon for the collective budget (all four equal).
    pub eps: f64,
    /// Error-correction success probability.
    pub p: f64,
    /// Coherent-attack target for the blown-up security parameter.
    pub target_eps_double_prime: f64,
    /// de Finetti energy parameter; `None` means `K = n`.
    pub big_k: Option<u64>,
    pub optimize_vmod: bool,
    pub mode: AnalysisMode,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vmod_a: 40.0,
            vmod_b: 40.0,
            tau_a: 0.99,
            tau_b: db_to_tau(1.0),
            xi_a: 0.0,
            xi_b: 0.01,
            d: 5,
            beta: 0.95,
            analysis: AnalysisChoice::Both,
            sweep: log_spaced(1e6, 1e10, 13),
            eps: 1e-21,
            p: 0.99,
            target_eps_double_prime: 1e-20,
            big_k: None,
            optimize_vmod: true,
            mode: AnalysisMode::Analytic,
            seed: 1,
            out: None,
        }
    }
}

/// `count` log-spaced integers from `lo` to `hi` inclusive, deduplicated
/// after rounding.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<u64> {
    if count == 1 {
        return vec![lo.round() as u64];
    }
    let (llo, lhi) = (lo.log10(), hi.log10());
    let mut out: Vec<u64> = (0..count)
        .map(|i| {
            let f = i as f64 / (count - 1) as f64;
            10f64.powf(llo + f * (lhi - llo)).round() as u64
        })
        .collect();
    out.dedup();
    out
}

/// Parses a sweep specification: either a comma-separated list of block
/// sizes (`1e6,3e6,1e7`) or a log-spaced range `lo:hi:count`.
pub fn parse_sweep(spec: &str) -> Result<Vec<u64>, ConfigError> {
    let parse_num = |s: &str| -> Result<f64, ConfigError> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| ConfigError(format!("cannot parse block size '{s}'")))
    };
    let values: Vec<u64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(ConfigError(format!(
                "log-spaced sweep must be lo:hi:count, got '{spec}'"
            )));
        }
        let lo = parse_num(parts[0])?;
        let hi = parse_num(parts[1])?;
        let count: usize = parts[2]
            .trim()
            .parse()
            .map_err(|_| ConfigError(format!("cannot parse sweep count '{}'", parts[2])))?;
        if !(lo >= 1.0) || !(hi >= lo) || count == 0 {
            return Err(ConfigError(format!(
                "log-spaced sweep needs 1 <= lo <= hi and count >= 1, got '{spec}'"
            )));
        }
        log_spaced(lo, hi, count)
    } else {
        spec.split(',')
            .map(|s| parse_num(s).map(|v| v.round() as u64))
            .collect::<Result<_, _>>()?
    };
    validate_sweep(&values)?;
    Ok(values)
}

fn validate_sweep(values: &[u64]) -> Result<(), ConfigError> {
    if values.is_empty() {
        return Err(ConfigError("sweep must be nonempty".into()));
    }
    if values.iter().any(|&v| v == 0) {
        return Err(ConfigError("block sizes must be >= 1".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError("sweep must be strictly ascending".into()));
    }
    Ok(())
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let fnum = |v: &str| -> Result<f64, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError(format!("cannot parse number '{v}' for key '{key}'")))
        };
        match key {
            "scenario" => {
                let p = preset_by_name(value)?;
                self.tau_a = p.tau_a;
                self.tau_b = p.tau_b;
                self.xi_a = p.xi_a;
                self.xi_b = p.xi_b;
            }
            "vmod" => {
                let v = fnum(value)?;
                self.vmod_a = v;
                self.vmod_b = v;
            }
            "vmod_a" => self.vmod_a = fnum(value)?,
            "vmod_b" => self.vmod_b = fnum(value)?,
            "tau_a" => self.tau_a = fnum(value)?,
            "tau_b" => self.tau_b = fnum(value)?,
            "db_a" => self.tau_a = db_to_tau(fnum(value)?),
            "db_b" => self.tau_b = db_to_tau(fnum(value)?),
            "xi_a" => self.xi_a = fnum(value)?,
            "xi_b" => self.xi_b = fnum(value)?,
            "d" => {
                self.d = value
                    .parse()
                    .map_err(|_| ConfigError(format!("cannot parse ADC depth '{value}'")))?
            }
            "beta" => self.beta = fnum(value)?,
            "analysis" => self.analysis = AnalysisChoice::parse(value)?,
            "sweep" => self.sweep = parse_sweep(value)?,
            "eps" => self.eps = fnum(value)?,
            "p" => self.p = fnum(value)?,
            "target_eps_double_prime" => self.target_eps_double_prime = fnum(value)?,
            "big_k" => {
                self.big_k = Some(value.parse().map_err(|_| {
                    ConfigError(format!("cannot parse de Finetti parameter '{value}'"))
                })?)
            }
            "optimize_vmod" => {
                self.optimize_vmod = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    other => {
                        return Err(ConfigError(format!(
                            "optimize_vmod must be true or false, got '{other}'"
                        )))
                    }
                }
            }
            "mode" => {
                self.mode = match value {
                    "analytic" => AnalysisMode::Analytic,
                    "simulate" => AnalysisMode::Simulate,
                    other => {
                        return Err(ConfigError(format!(
                            "mode must be analytic or simulate, got '{other}'"
                        )))
                    }
                }
            }
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| ConfigError(format!("cannot parse seed '{value}'")))?
            }
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(ConfigError(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a key-value configuration file body: one `key = value` per
    /// line, `#` comments, blank lines ignored.
    pub fn apply_file(&mut self, body: &str) -> Result<(), ConfigError> {
        for (idx, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    idx + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Checks the cross-field invariants and materializes the scenario
    /// template (block size placeholder 1; the sweep supplies n).
    pub fn validate(&self) -> Result<ScenarioParams, ConfigError> {
        validate_sweep(&self.sweep)?;
        let template = ScenarioParams::from_excess_noise(
            self.vmod_a,
            self.vmod_b,
            self.tau_a,
            self.tau_b,
            self.xi_a,
            self.xi_b,
            1,
            self.d,
            self.beta,
        )
        .map_err(|e| ConfigError(format!("invalid scenario: {e}")))?;
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(ConfigError(format!(
                "eps must lie in (0, 1), got {}",
                self.eps
            )));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(ConfigError(format!(
                "p must lie in (0, 1], got {}",
                self.p
            )));
        }
        if !(self.target_eps_double_prime > 0.0 && self.target_eps_double_prime < 1.0) {
            return Err(ConfigError(format!(
                "target_eps_double_prime must lie in (0, 1), got {}",
                self.target_eps_double_prime
            )));
        }
        Ok(template)
    }

    fn spec(&self) -> AnalysisSpec {
        let collective = matches!(self.analysis, AnalysisChoice::Collective | AnalysisChoice::Both)
            .then(|| SecurityBudget::uniform(self.eps, self.p).expect("validated"));
        let coherent = matches!(self.analysis, AnalysisChoice::Coherent | AnalysisChoice::Both)
            .then_some(CoherentSpec {
                target_eps_double_prime: self.target_eps_double_prime,
                p: self.p,
                big_k: self.big_k,
            });
        AnalysisSpec {
            side: ReconciliationSide::default(),
            collective,
            coherent,
            optimize_vmod: self.optimize_vmod,
            mode: self.mode,
            seed: self.seed,
        }
    }
}

/// One sweep point: the finite-size report plus the seed that produced
/// it (recorded even in analytic mode, where it is inert).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub report: RateReport,
    pub seed: u64,
}

/// The completed sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTable {
    pub rows: Vec<RunRow>,
}

impl RunTable {
    pub fn any_feasible(&self) -> bool {
        self.rows.iter().any(|r| r.report.feasible)
    }
}

/// Pipeline problems after configuration was accepted.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct RunError(pub String);

fn row_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 keeps per-row streams decorrelated and deterministic.
    let mut z = seed ^ (index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the sweep: grid points go to the worker pool, rows come back in
/// sweep order regardless of completion order.
pub fn run(config: &RunConfig) -> Result<RunTable, RunError> {
    let template = config
        .validate()
        .map_err(|e| RunError(format!("configuration invalid at run time: {e}")))?;
    let base_spec = config.spec();
    let rows: Vec<RunRow> = config
        .sweep
        .par_iter()
        .enumerate()
        .map(|(idx, &n)| {
            let seed = row_seed(config.seed, idx as u64);
            let spec = AnalysisSpec {
                seed,
                ..base_spec.clone()
            };
            optimize_rate(&template, n, &spec)
                .map(|report| RunRow { report, seed })
                .map_err(|e| RunError(format!("block size {n}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(RunTable { rows })
}

/// The CSV header: the fixed column list plus the trailing status flag
/// that carries ABORT reasons.
pub const CSV_HEADER: &str = "n,r_collective,r_coherent,r0,i_ab,i_be,vmod_opt,k_opt,t,x_max,\
                              y_max,z_min,eps_prime,eps_double_prime,seed,status";

fn push_float(out: &mut String, v: f64) {
    // 9 significant digits.
    let _ = write!(out, ",{v:.8e}");
}

/// Renders the table as CSV: UTF-8, LF line endings, floats with nine
/// significant digits.
pub fn emit_csv(table: &RunTable) -> String {
    let mut out = String::with_capacity(128 * (table.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in &table.rows {
        let r = &row.report;
        let _ = write!(out, "{}", r.n);
        for v in [
            r.r_collective,
            r.r_coherent,
            r.r_asymptotic,
            r.i_ab,
            r.i_be,
            r.vmod_opt,
        ] {
            push_float(&mut out, v);
        }
        let _ = write!(out, ",{}", r.k_opt);
        for v in [
            r.t,
            r.x_max,
            r.y_max,
            r.z_min,
            r.eps_prime,
            r.eps_double_prime,
        ] {
            push_float(&mut out, v);
        }
        let _ = write!(out, ",{}", row.seed);
        let _ = write!(out, ",{}", r.status());
        out.push('\n');
    }
    out
}

/// Parses `emit_csv` output back into the numeric grid (status column
/// included verbatim); used by the round-trip tests.
pub fn parse_csv(body: &str) -> Result<Vec<(u64, Vec<f64>, u64, String)>, RunError> {
    let mut lines = body.lines();
    let header = lines.next().ok_or_else(|| RunError("empty CSV".into()))?;
    if header != CSV_HEADER {
        return Err(RunError(format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 16 {
            return Err(RunError(format!(
                "expected 16 fields, got {} in '{line}'",
                fields.len()
            )));
        }
        let n: u64 = fields[0]
            .parse()
            .map_err(|_| RunError(format!("bad n '{}'", fields[0])))?;
        let seed: u64 = fields[14]
            .parse()
            .map_err(|_| RunError(format!("bad seed '{}'", fields[14])))?;
        let mut floats = Vec::with_capacity(13);
        for f in fields[1..7].iter().chain(fields[8..14].iter()) {
            floats.push(
                f.parse::<f64>()
                    .map_err(|_| RunError(format!("bad float '{f}'")))?,
            );
        }
        let k: u64 = fields[7]
            .parse()
            .map_err(|_| RunError(format!("bad k_opt '{}'", fields[7])))?;
        floats.insert(6, k as f64);
        rows.push((n, floats, seed, fields[15].to_string()));
    }
    Ok(rows)
}
