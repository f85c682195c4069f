//! JSON run configuration shared by the library pipeline and the command line.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::expr::Dims;

/// Threshold `α`; `"inf"` disables stopping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alpha(pub f64);

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Alpha;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Alpha, E> {
                Ok(Alpha(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Alpha, E> {
                Ok(Alpha(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Alpha, E> {
                Ok(Alpha(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Alpha, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "inf" | "+inf" | "infinity" | "+infinity" => Ok(Alpha(f64::INFINITY)),
                    other => other.parse::<f64>().map(Alpha).map_err(|_| E::custom(format!("bad alpha `{v}`"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// A control value: one number for every component, or a full `k`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ControlValue {
    pub fn expand(&self, k: usize, path: &str) -> Result<Vec<f64>> {
        match self {
            ControlValue::Scalar(v) => Ok(vec![*v; k]),
            ControlValue::Vector(v) if v.len() == k => Ok(v.clone()),
            ControlValue::Vector(v) => Err(Error::schema(path, format!("expected {k} components, got {}", v.len()))),
        }
    }
}

/// Initial control: a constant (scalar or vector) or one row per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControlInit {
    Constant(ControlValue),
    Path(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Dims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<String>>,
    /// Rows of the `n × d` diffusion matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<ControlInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<ControlValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<ControlValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "defaults::steps")]
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { steps: defaults::steps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "defaults::paths")]
    pub paths: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { paths: defaults::paths(), seed: defaults::seed() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BsdeMode {
    /// Deterministic when the diffusion is structurally zero, regression otherwise.
    #[default]
    Auto,
    Deterministic,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeConfig {
    #[serde(default)]
    pub mode: BsdeMode,
    #[serde(default = "defaults::basis_degree")]
    pub basis_degree: usize,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        BsdeConfig { mode: BsdeMode::Auto, basis_degree: defaults::basis_degree() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    #[serde(default = "defaults::band", rename = "at_T_band_cells", alias = "at_t_band_cells")]
    pub at_t_band_cells: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig { at_t_band_cells: defaults::band() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpConfig {
    /// Probe control values; defaults to five evenly spaced points of the box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_probes: Option<Vec<ControlValue>>,
    /// Spacing of the probed grid nodes; when absent, `t_nodes` nodes spread over `[0, τ̂]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_stride: Option<usize>,
    #[serde(default = "defaults::t_nodes")]
    pub t_nodes: usize,
    #[serde(default = "defaults::rho_list")]
    pub rho_list: Vec<f64>,
    /// Perturbation direction for grad-check and rho-table; defaults to all ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<ControlInit>,
}

impl Default for SmpConfig {
    fn default() -> Self {
        SmpConfig {
            u_probes: None,
            t_stride: None,
            t_nodes: defaults::t_nodes(),
            rho_list: defaults::rho_list(),
            direction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::step0")]
    pub step0: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    #[serde(default = "defaults::armijo_c")]
    pub armijo_c: f64,
    #[serde(default = "defaults::shrink")]
    pub shrink: f64,
    #[serde(default = "defaults::grad_tol")]
    pub grad_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step0: defaults::step0(),
            max_iters: defaults::max_iters(),
            armijo_c: defaults::armijo_c(),
            shrink: defaults::shrink(),
            grad_tol: defaults::grad_tol(),
        }
    }
}

mod defaults {
    pub fn steps() -> usize {
        1000
    }
    pub fn paths() -> usize {
        10_000
    }
    pub fn seed() -> u64 {
        20_240_601
    }
    pub fn basis_degree() -> usize {
        2
    }
    pub fn band() -> usize {
        2
    }
    pub fn t_nodes() -> usize {
        50
    }
    pub fn rho_list() -> Vec<f64> {
        vec![1e-1, 5e-2, 2.5e-2, 1.25e-2]
    }
    pub fn step0() -> f64 {
        1e4
    }
    pub fn max_iters() -> usize {
        200
    }
    pub fn armijo_c() -> f64 {
        1e-4
    }
    pub fn shrink() -> f64 {
        0.5
    }
    pub fn grad_tol() -> f64 {
        1e-6
    }
}

/// The whole run description. Top-level `horizon`, `alpha`, `x0` and the control
/// box override a builtin's values and are required for inline problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Alpha>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub bsde: BsdeConfig,
    #[serde(default)]
    pub stopping: StoppingConfig,
    #[serde(default)]
    pub smp: SmpConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl RunConfig {
    pub fn builtin(name: &str) -> Self {
        RunConfig {
            problem: ProblemConfig { builtin: Some(name.to_string()), ..Default::default() },
            horizon: None,
            alpha: None,
            x0: None,
            control: ControlConfig::default(),
            grid: GridConfig::default(),
            mc: McConfig::default(),
            bsde: BsdeConfig::default(),
            stopping: StoppingConfig::default(),
            smp: SmpConfig::default(),
            optimizer: OptimizerConfig::default(),
            output: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::schema("$", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::schema("$", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Structural checks that do not need the problem's dimensions.
    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::schema("horizon", "must be a positive finite number"));
            }
        }
        if let Some(a) = self.alpha {
            if a.0.is_nan() || a.0 == f64::NEG_INFINITY {
                return Err(Error::schema("alpha", "must be a number or \"inf\""));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema("x0", "must be finite"));
            }
        }
        if self.grid.steps == 0 {
            return Err(Error::schema("grid.steps", "must be positive"));
        }
        if self.mc.paths == 0 {
            return Err(Error::schema("mc.paths", "must be positive"));
        }
        if self.smp.rho_list.is_empty() || self.smp.rho_list.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::schema("smp.rho_list", "must be a non-empty list of positive numbers"));
        }
        if self.smp.rho_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::schema("smp.rho_list", "must be strictly decreasing"));
        }
        if self.smp.t_nodes == 0 {
            return Err(Error::schema("smp.t_nodes", "must be positive"));
        }
        if self.smp.t_stride == Some(0) {
            return Err(Error::schema("smp.t_stride", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.step0 > 0.0) {
            return Err(Error::schema("optimizer.step0", "must be positive"));
        }
        if !(o.armijo_c > 0.0 && o.armijo_c < 1.0) {
            return Err(Error::schema("optimizer.armijo_c", "must lie in (0, 1)"));
        }
        if !(o.shrink > 0.0 && o.shrink < 1.0) {
            return Err(Error::schema("optimizer.shrink", "must lie in (0, 1)"));
        }
        if !(o.grad_tol > 0.0) {
            return Err(Error::schema("optimizer.grad_tol", "must be positive"));
        }
        if o.max_iters == 0 {
            return Err(Error::schema("optimizer.max_iters", "must be positive"));
        }
        Ok(())
    }
}

/// Applies a `key.path=value` override to a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise; missing objects are created.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::schema(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::schema(assignment, "empty override key"));
    }
    let value = serde_json::from_str::<serde_json::Value>(raw.trim())
        .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::schema(parts[..i].join("."), "cannot descend into a non-object"));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_accepts_inf_and_numbers() {
        let a: Alpha = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(a.0, f64::INFINITY);
        let b: Alpha = serde_json::from_str("1.5").unwrap();
        assert_eq!(b.0, 1.5);
        assert_eq!(serde_json::to_string(&a).unwrap(), "\"inf\"");
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_json_str(r#"{"problem":{"builtin":"paper-example"}}"#).unwrap();
        assert_eq!(cfg.grid.steps, 1000);
        assert_eq!(cfg.smp.rho_list.len(), 4);
    }

    #[test]
    fn unknown_fields_are_schema_errors() {
        let e = RunConfig::from_json_str(r#"{"problem":{"builtin":"x"},"bogus":1}"#).unwrap_err();
        assert_eq!(e.code(), "SchemaError");
    }

    #[test]
    fn override_creates_nested_keys() {
        let mut doc = serde_json::json!({"problem":{"builtin":"paper-example"}});
        apply_override(&mut doc, "control.init=2").unwrap();
        apply_override(&mut doc, "alpha=inf").unwrap();
        let cfg = RunConfig::from_value(doc).unwrap();
        assert_eq!(cfg.control.init, Some(ControlInit::Constant(ControlValue::Scalar(2.0))));
        assert_eq!(cfg.alpha, Some(Alpha(f64::INFINITY)));
    }
}
