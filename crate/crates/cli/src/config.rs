//! Run configuration: a TOML file with `[model]`, `[grid]`, `[solver]` and
//! `[output]` tables, plus `--override key=value` edits.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use qfibound::channel::{ModelConfig, ModelKind, NoiseKind};
use serde::{Deserialize, Deserializer, Serialize};
use toml::{Spanned, Table, Value};

/// Configuration problem reported with a location (file and line, or the override that caused it).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn positive<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(de)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(serde::de::Error::custom(format!("must be a finite number > 0, got {v}")));
    }
    Ok(v)
}

fn positive_opt<'de, D: Deserializer<'de>>(de: D) -> Result<Option<f64>, D::Error> {
    positive(de).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "T_max", deserialize_with = "positive")]
    pub t_max: f64,
    /// Defaults to 2π/(50ω).
    #[serde(default, deserialize_with = "positive_opt", skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Defaults to two signal periods.
    #[serde(rename = "transient_T0", default, skip_serializing_if = "Option::is_none")]
    pub transient_t0: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { t_max: 60.0, dt: None, transient_t0: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_gap", deserialize_with = "positive")]
    pub sdp_gap: f64,
    #[serde(default = "default_span_tol", deserialize_with = "positive")]
    pub span_tol: f64,
    #[serde(default = "default_q_switch", deserialize_with = "positive")]
    pub q_switch: f64,
}

fn default_gap() -> f64 {
    1e-8
}

fn default_span_tol() -> f64 {
    qfibound::span::DEFAULT_SPAN_TOL
}

fn default_q_switch() -> f64 {
    1e-12
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { sdp_gap: default_gap(), span_tol: default_span_tol(), q_switch: default_q_switch() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// File name (relative to the output directory) or absolute path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    #[serde(default)]
    pub plot: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    7
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Spanned<ModelConfig>,
    #[serde(default)]
    grid: Option<Spanned<GridSection>>,
    #[serde(default)]
    solver: Option<SolverSection>,
    #[serde(default)]
    output: Option<OutputSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Catalog defaults: B = 1, ω = 1, ε = 0.1.
    pub fn catalog(model: ModelKind, noise: NoiseKind) -> Self {
        Self {
            model: ModelConfig::catalog(model, 1.0, 1.0, &[(noise, 0.1)]),
            grid: GridSection::default(),
            solver: SolverSection::default(),
            output: OutputSection { seed: default_seed(), ..OutputSection::default() },
        }
    }

    pub fn omega(&self) -> f64 {
        self.model.omega
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt.unwrap_or_else(|| if self.omega() != 0.0 { 2.0 * PI / self.omega().abs() / 50.0 } else { self.grid.t_max / 500.0 })
    }

    pub fn transient_cutoff(&self) -> f64 {
        self.grid.transient_t0.unwrap_or_else(|| if self.omega() != 0.0 { 4.0 * PI / self.omega().abs() } else { 0.0 })
    }

    /// Sample times 0, dt, 2dt, … with T_max appended when it is not a multiple of dt.
    pub fn sample_times(&self) -> Vec<f64> {
        let (t_max, dt) = (self.grid.t_max, self.dt());
        let n = (t_max / dt * (1.0 + 1e-12)).floor() as usize;
        let mut out: Vec<f64> = (0..=n).map(|k| k as f64 * dt).filter(|&t| t < t_max * (1.0 - 1e-12)).collect();
        out.push(t_max);
        out
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses a configuration document; `origin` names it in error locations.
pub fn parse(src: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| ConfigError {
        location: match e.span() {
            Some(span) => format!("{origin}:{}", line_of(src, span.start)),
            None => origin.to_string(),
        },
        message: e.message().trim().to_string(),
    })?;
    let at = |span: std::ops::Range<usize>| format!("{origin}:{}", line_of(src, span.start));
    let model_span = raw.model.span();
    let model = raw.model.into_inner();
    model.validate().map_err(|e| ConfigError { location: at(model_span.clone()), message: e.to_string() })?;
    let grid = match raw.grid {
        Some(g) => {
            let span = g.span();
            let grid = g.into_inner();
            if let Some(dt) = grid.dt {
                if dt >= grid.t_max {
                    return Err(ConfigError {
                        location: at(span),
                        message: format!("grid.dt = {dt} must be smaller than T_max = {}", grid.t_max),
                    });
                }
            }
            if grid.transient_t0.is_some_and(|t0| !(t0 >= 0.0) || !t0.is_finite()) {
                return Err(ConfigError { location: at(span), message: "grid.transient_T0 must be finite and >= 0".into() });
            }
            grid
        }
        None => GridSection::default(),
    };
    let cfg = RunConfig {
        model,
        grid,
        solver: raw.solver.unwrap_or_default(),
        output: raw.output.unwrap_or(OutputSection { seed: default_seed(), ..OutputSection::default() }),
    };
    if cfg.grid.dt.is_none() && cfg.dt() >= cfg.grid.t_max {
        return Err(ConfigError {
            location: origin.to_string(),
            message: format!("default step {} is not smaller than T_max = {}; set grid.dt", cfg.dt(), cfg.grid.t_max),
        });
    }
    Ok(cfg)
}

fn override_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match toml::from_str::<Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

fn set_path(table: &mut Table, path: &[&str], value: Value) -> Result<(), String> {
    let (head, rest) = path.split_first().ok_or("empty key")?;
    if rest.is_empty() {
        table.insert(head.to_string(), value);
        return Ok(());
    }
    let next = table.entry(head.to_string()).or_insert_with(|| Value::Table(Table::new()));
    set_value_path(next, rest, value)
}

fn set_value_path(node: &mut Value, path: &[&str], value: Value) -> Result<(), String> {
    match node {
        Value::Table(t) => set_path(t, path, value),
        Value::Array(items) => {
            let (head, rest) = path.split_first().ok_or("empty key")?;
            let k: usize = head.parse().map_err(|_| format!("'{head}' is not an array index"))?;
            let len = items.len();
            let slot = items.get_mut(k).ok_or_else(|| format!("index {k} out of range (length {len})"))?;
            if rest.is_empty() {
                *slot = value;
                Ok(())
            } else {
                set_value_path(slot, rest, value)
            }
        }
        _ => Err(format!("'{}' does not name a table or array", path[0])),
    }
}

/// Applies `key=value` edits (dot paths, numeric segments index arrays) to a configuration document.
pub fn apply_overrides(src: &str, origin: &str, overrides: &[String]) -> Result<String, ConfigError> {
    if overrides.is_empty() {
        return Ok(src.to_string());
    }
    let mut table: Table = toml::from_str(src).map_err(|e| ConfigError {
        location: match e.span() {
            Some(span) => format!("{origin}:{}", line_of(src, span.start)),
            None => origin.to_string(),
        },
        message: e.message().trim().to_string(),
    })?;
    for item in overrides {
        let location = format!("--override {item}");
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| ConfigError { location: location.clone(), message: "expected key=value".into() })?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError { location, message: format!("malformed key '{key}'") });
        }
        set_path(&mut table, &path, override_value(value.trim())).map_err(|message| ConfigError { location, message })?;
    }
    toml::to_string(&table).map_err(|e| ConfigError { location: origin.to_string(), message: e.to_string() })
}

/// Reads, overrides and validates a configuration file.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let origin = path.display().to_string();
    let src = std::fs::read_to_string(path).map_err(|e| ConfigError { location: origin.clone(), message: format!("cannot read: {e}") })?;
    let base = parse(&src, &origin)?;
    if overrides.is_empty() {
        return Ok(base);
    }
    let merged = apply_overrides(&src, &origin, overrides)?;
    parse(&merged, &format!("{origin} (with overrides)"))
}

/// Configuration for runs without a file: `base` edited by `overrides`.
pub fn from_defaults(base: &RunConfig, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let src = toml::to_string(base).map_err(|e| ConfigError { location: "defaults".into(), message: e.to_string() })?;
    let merged = apply_overrides(&src, "defaults", overrides)?;
    parse(&merged, if overrides.is_empty() { "defaults" } else { "defaults (with overrides)" })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
model = "AC"
B = 1.0
omega = 1.0
noise = [{ kind = "dephasing_x", epsilon = 0.1 }]

[grid]
T_max = 6.0
dt = 0.5
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = parse(GOOD, "run.toml").unwrap();
        assert_eq!(cfg.grid.t_max, 6.0);
        assert_eq!(cfg.solver, SolverSection::default());
        assert_eq!(cfg.output.seed, 7);
        assert!((cfg.transient_cutoff() - 4.0 * PI).abs() < 1e-12);
        let times = cfg.sample_times();
        assert_eq!(times.len(), 13);
        assert_eq!(*times.last().unwrap(), 6.0);
    }

    #[test]
    fn sample_times_end_at_t_max() {
        let mut cfg = parse(GOOD, "x").unwrap();
        cfg.grid.dt = Some(0.7);
        let times = cfg.sample_times();
        assert_eq!(*times.last().unwrap(), 6.0);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn negative_epsilon_reports_its_line() {
        let src = GOOD.replace("epsilon = 0.1", "epsilon = -0.1");
        let err = parse(&src, "run.toml").unwrap_err();
        assert_eq!(err.location, "run.toml:6", "{err}");
        assert!(err.message.contains(">= 0"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let src = format!("{GOOD}\n[solver]\nsdp_gapp = 1e-8\n");
        let err = parse(&src, "run.toml").unwrap_err();
        assert_eq!(err.location, "run.toml:13", "{err}");
        assert!(err.message.contains("sdp_gapp"), "{err}");
    }

    #[test]
    fn cross_field_errors_point_at_the_table() {
        let src = GOOD.replace("dt = 0.5", "dt = 7.0");
        let err = parse(&src, "run.toml").unwrap_err();
        assert!(err.message.contains("smaller than T_max"), "{err}");
        assert!(err.location.starts_with("run.toml:"));
        let src = GOOD.replace("T_max = 6.0", "T_max = -1.0");
        assert_eq!(parse(&src, "run.toml").unwrap_err().location, "run.toml:9");
        let src = format!("{GOOD}\n[solver]\nspan_tol = 0.0\n");
        assert_eq!(parse(&src, "run.toml").unwrap_err().location, "run.toml:13");
    }

    #[test]
    fn overrides_edit_nested_keys() {
        let merged = apply_overrides(GOOD, "run.toml", &["model.noise.0.epsilon=0.3".into(), "grid.T_max=9".into(), "output.csv_path=out.csv".into()]).unwrap();
        let cfg = parse(&merged, "m").unwrap();
        assert_eq!(cfg.model.noise[0].epsilon, 0.3);
        assert_eq!(cfg.grid.t_max, 9.0);
        assert_eq!(cfg.output.csv_path.as_deref(), Some("out.csv"));
        let err = apply_overrides(GOOD, "run.toml", &["model.noise.4.epsilon=1".into()]).unwrap_err();
        assert!(err.message.contains("out of range"));
        assert!(apply_overrides(GOOD, "run.toml", &["grid.T_max".into()]).is_err());
        assert!(parse(&apply_overrides(GOOD, "r", &["model.noise.0.epsilon=-2".into()]).unwrap(), "r").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let base = RunConfig::catalog(ModelKind::Rf, NoiseKind::SpontaneousEmission);
        let cfg = from_defaults(&base, &[]).unwrap();
        assert_eq!(cfg, base);
        let cfg = from_defaults(&base, &["model.B=2.5".into()]).unwrap();
        assert_eq!(cfg.model.b, 2.5);
    }
}
