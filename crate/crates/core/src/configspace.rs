//! Hierarchical hyperparameter spaces.
//!
//! A space is an ordered list of hyperparameter specs. A spec may carry a
//! single-parent condition naming an earlier categorical spec and the set of
//! parent values that activate it. Configurations hold exactly the active
//! hyperparameters.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Sentinel written into encoding slots of inactive hyperparameters.
pub const INACTIVE: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Cat(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:.16e}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Continuous {
        lo: f64,
        hi: f64,
        #[serde(default)]
        log_scale: bool,
    },
    Integer {
        lo: i64,
        hi: i64,
        #[serde(default)]
        log_scale: bool,
    },
    Categorical {
        choices: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub parent: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSpec {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
    pub default: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

impl HyperparameterSpec {
    pub fn continuous(name: &str, lo: f64, hi: f64, log_scale: bool, default: f64) -> Self {
        Self {
            name: name.to_string(),
            domain: Domain::Continuous { lo, hi, log_scale },
            default: Value::Real(default),
            condition: None,
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64, log_scale: bool, default: i64) -> Self {
        Self {
            name: name.to_string(),
            domain: Domain::Integer { lo, hi, log_scale },
            default: Value::Int(default),
            condition: None,
        }
    }

    pub fn categorical(name: &str, choices: &[&str], default: &str) -> Self {
        Self {
            name: name.to_string(),
            domain: Domain::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
            default: Value::Cat(default.to_string()),
            condition: None,
        }
    }

    pub fn when(mut self, parent: &str, values: &[&str]) -> Self {
        self.condition = Some(Condition {
            parent: parent.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        });
        self
    }

    fn width(&self) -> usize {
        match &self.domain {
            Domain::Categorical { choices } => choices.len(),
            _ => 1,
        }
    }

    /// Checks a value against this spec's domain, ignoring activity.
    fn check_value(&self, value: &Value) -> Option<ViolationKind> {
        match (&self.domain, value) {
            (Domain::Continuous { lo, hi, .. }, Value::Real(v)) => {
                (!(v.is_finite() && *v >= *lo && *v <= *hi)).then_some(ViolationKind::OutOfBounds)
            }
            (Domain::Integer { lo, hi, .. }, Value::Int(v)) => {
                (*v < *lo || *v > *hi).then_some(ViolationKind::OutOfBounds)
            }
            (Domain::Categorical { choices }, Value::Cat(c)) => {
                (!choices.contains(c)).then_some(ViolationKind::IllegalChoice)
            }
            _ => Some(ViolationKind::WrongType),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownName,
    MissingActive,
    InactivePresent,
    OutOfBounds,
    IllegalChoice,
    WrongType,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::UnknownName => "unknown name",
            ViolationKind::MissingActive => "active missing",
            ViolationKind::InactivePresent => "inactive present",
            ViolationKind::OutOfBounds => "out of bounds",
            ViolationKind::IllegalChoice => "illegal choice",
            ViolationKind::WrongType => "wrong type",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub name: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Configuration {
    pub space_name: String,
    pub values: BTreeMap<String, Value>,
}

// Values never hold NaN once validated, so equality is total in practice.
impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Real(a), Value::Real(b)) => a.total_cmp(b),
            (Value::Cat(a), Value::Cat(b)) => a.cmp(b),
            (Value::Int(_), _) => Ordering::Less,
            (_, Value::Int(_)) => Ordering::Greater,
            (Value::Real(_), _) => Ordering::Less,
            (_, Value::Real(_)) => Ordering::Greater,
        }
    }
}

impl Configuration {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }

    /// `name=value;name=value` in key order, reals with 17 significant digits.
    pub fn to_flat(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_flat())
    }
}

#[derive(Serialize, Deserialize)]
struct RawSpace {
    name: String,
    specs: Vec<HyperparameterSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct ConfigurationSpace {
    name: String,
    specs: Vec<HyperparameterSpec>,
    index: HashMap<String, usize>,
    offsets: Vec<usize>,
    dim: usize,
}

impl PartialEq for ConfigurationSpace {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.specs == other.specs
    }
}

impl TryFrom<RawSpace> for ConfigurationSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        ConfigurationSpace::new(&raw.name, raw.specs)
    }
}

impl From<ConfigurationSpace> for RawSpace {
    fn from(space: ConfigurationSpace) -> Self {
        RawSpace {
            name: space.name,
            specs: space.specs,
        }
    }
}

impl ConfigurationSpace {
    pub fn new(name: &str, specs: Vec<HyperparameterSpec>) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidSpace(msg));
        if specs.is_empty() {
            return bad("space has no hyperparameters".into());
        }
        let mut index = HashMap::new();
        let mut offsets = Vec::with_capacity(specs.len());
        let mut dim = 0;
        for (i, spec) in specs.iter().enumerate() {
            if index.insert(spec.name.clone(), i).is_some() {
                return bad(format!("duplicate name {}", spec.name));
            }
            match &spec.domain {
                Domain::Continuous { lo, hi, log_scale } => {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return bad(format!("{}: need finite lo < hi", spec.name));
                    }
                    if *log_scale && *lo <= 0.0 {
                        return bad(format!("{}: log scale needs lo > 0", spec.name));
                    }
                }
                Domain::Integer { lo, hi, log_scale } => {
                    if lo >= hi {
                        return bad(format!("{}: need lo < hi", spec.name));
                    }
                    if *log_scale && *lo <= 0 {
                        return bad(format!("{}: log scale needs lo > 0", spec.name));
                    }
                }
                Domain::Categorical { choices } => {
                    let distinct: HashSet<_> = choices.iter().collect();
                    if choices.len() < 2 || distinct.len() != choices.len() {
                        return bad(format!("{}: need >= 2 distinct choices", spec.name));
                    }
                }
            }
            if spec.check_value(&spec.default).is_some() {
                return bad(format!("{}: illegal default {}", spec.name, spec.default));
            }
            if let Some(cond) = &spec.condition {
                let parent = match index.get(&cond.parent) {
                    Some(&p) if p < i => &specs[p],
                    _ => {
                        return bad(format!(
                            "{}: parent {} must be declared earlier",
                            spec.name, cond.parent
                        ))
                    }
                };
                let Domain::Categorical { choices } = &parent.domain else {
                    return bad(format!(
                        "{}: parent {} is not categorical",
                        spec.name, cond.parent
                    ));
                };
                if cond.values.is_empty() || cond.values.iter().any(|v| !choices.contains(v)) {
                    return bad(format!(
                        "{}: condition values must be parent choices",
                        spec.name
                    ));
                }
            }
            offsets.push(dim);
            dim += spec.width();
        }
        Ok(Self {
            name: name.to_string(),
            specs,
            index,
            offsets,
            dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> &[HyperparameterSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&HyperparameterSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    /// Encoding dimensionality.
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn is_active(&self, spec: &HyperparameterSpec, values: &BTreeMap<String, Value>) -> bool {
        match &spec.condition {
            None => true,
            Some(cond) => match values.get(&cond.parent) {
                Some(Value::Cat(v)) => cond.values.contains(v),
                _ => false,
            },
        }
    }

    pub fn default_configuration(&self) -> Configuration {
        let mut values = BTreeMap::new();
        for spec in &self.specs {
            if self.is_active(spec, &values) {
                values.insert(spec.name.clone(), spec.default.clone());
            }
        }
        self.configuration(values)
    }

    fn configuration(&self, values: BTreeMap<String, Value>) -> Configuration {
        Configuration {
            space_name: self.name.clone(),
            values,
        }
    }

    /// Draws a configuration; deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> Configuration {
        self.sample_with(&mut rng::rng(seed))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let mut values = BTreeMap::new();
        for spec in &self.specs {
            if !self.is_active(spec, &values) {
                continue;
            }
            let v = match &spec.domain {
                Domain::Continuous { lo, hi, log_scale } => {
                    let u: f64 = rng.gen();
                    Value::Real(canonical_real(
                        unit_unscale(u, *lo, *hi, *log_scale),
                        *lo,
                        *hi,
                        *log_scale,
                    ))
                }
                Domain::Integer { lo, hi, log_scale } => {
                    if *log_scale {
                        let (a, b) = ((*lo as f64).ln(), ((*hi + 1) as f64).ln());
                        let u: f64 = rng.gen();
                        let v = (a + u * (b - a)).exp().floor() as i64;
                        Value::Int(v.clamp(*lo, *hi))
                    } else {
                        Value::Int(rng.gen_range(*lo..=*hi))
                    }
                }
                Domain::Categorical { choices } => {
                    Value::Cat(choices[rng.gen_range(0..choices.len())].clone())
                }
            };
            values.insert(spec.name.clone(), v);
        }
        self.configuration(values)
    }

    /// Lists every rule the configuration breaks. Empty means valid.
    pub fn validate(&self, config: &Configuration) -> Vec<Violation> {
        let mut out = Vec::new();
        let violation = |name: &str, kind| Violation {
            name: name.to_string(),
            kind,
        };
        for name in config.values.keys() {
            if !self.index.contains_key(name) {
                out.push(violation(name, ViolationKind::UnknownName));
            }
        }
        for spec in &self.specs {
            let present = config.values.get(&spec.name);
            match (self.is_active(spec, &config.values), present) {
                (true, None) => out.push(violation(&spec.name, ViolationKind::MissingActive)),
                (false, Some(_)) => out.push(violation(&spec.name, ViolationKind::InactivePresent)),
                (true, Some(v)) => {
                    if let Some(kind) = spec.check_value(v) {
                        out.push(violation(&spec.name, kind));
                    }
                }
                (false, None) => {}
            }
        }
        out
    }

    pub fn check(&self, config: &Configuration) -> Result<()> {
        let v = self.validate(config);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfiguration(v))
        }
    }

    /// Fixed-width numeric encoding: one-hot categoricals, numerics scaled to
    /// [0, 1] (after a log transform when log-scaled), inactive slots set to
    /// [`INACTIVE`].
    pub fn encode(&self, config: &Configuration) -> Result<Vec<f64>> {
        self.check(config)?;
        let mut out = vec![INACTIVE; self.dim];
        for (spec, &off) in self.specs.iter().zip(&self.offsets) {
            let Some(value) = config.values.get(&spec.name) else {
                continue;
            };
            match (&spec.domain, value) {
                (Domain::Continuous { lo, hi, log_scale }, Value::Real(v)) => {
                    out[off] = unit_scale(*v, *lo, *hi, *log_scale);
                }
                (Domain::Integer { lo, hi, log_scale }, Value::Int(v)) => {
                    out[off] = unit_scale(*v as f64, *lo as f64, *hi as f64, *log_scale);
                }
                (Domain::Categorical { choices }, Value::Cat(c)) => {
                    for (k, choice) in choices.iter().enumerate() {
                        out[off + k] = if choice == c { 1.0 } else { 0.0 };
                    }
                }
                _ => unreachable!("validated above"),
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode). Out-of-range slots are clamped,
    /// integers round half-up, and activity follows the decoded parents.
    pub fn decode(&self, vector: &[f64]) -> Result<Configuration> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let mut values = BTreeMap::new();
        for (spec, &off) in self.specs.iter().zip(&self.offsets) {
            if !self.is_active(spec, &values) {
                continue;
            }
            let v = match &spec.domain {
                Domain::Continuous { lo, hi, log_scale } => {
                    Value::Real(unit_unscale_exact(vector[off], *lo, *hi, *log_scale))
                }
                Domain::Integer { lo, hi, log_scale } => {
                    let x = unit_unscale(vector[off], *lo as f64, *hi as f64, *log_scale);
                    Value::Int(((x + 0.5).floor() as i64).clamp(*lo, *hi))
                }
                Domain::Categorical { choices } => {
                    let slots = &vector[off..off + choices.len()];
                    let best = slots
                        .iter()
                        .enumerate()
                        .fold(0, |b, (k, s)| if *s > slots[b] { k } else { b });
                    Value::Cat(choices[best].clone())
                }
            };
            values.insert(spec.name.clone(), v);
        }
        Ok(self.configuration(values))
    }

    /// Parses the `name=value;...` form written by [`Configuration::to_flat`],
    /// typing each value by its spec. The result is validated.
    pub fn parse_flat(&self, text: &str) -> Result<Configuration> {
        let mut values = BTreeMap::new();
        for pair in text.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected name=value, got {pair}")))?;
            let spec = self
                .spec(k)
                .ok_or_else(|| Error::Parse(format!("unknown hyperparameter {k}")))?;
            let value = match spec.domain {
                Domain::Continuous { .. } => {
                    Value::Real(v.parse().map_err(|e| Error::Parse(format!("{k}: {e}")))?)
                }
                Domain::Integer { .. } => {
                    Value::Int(v.parse().map_err(|e| Error::Parse(format!("{k}: {e}")))?)
                }
                Domain::Categorical { .. } => Value::Cat(v.to_string()),
            };
            values.insert(k.to_string(), value);
        }
        let config = self.configuration(values);
        self.check(&config)?;
        Ok(config)
    }

    /// A random local move: numeric active slots jittered with Gaussian noise
    /// of scale `step` in encoded units, and each categorical re-drawn with
    /// probability `step`.
    pub fn neighbor<R: Rng + ?Sized>(
        &self,
        config: &Configuration,
        step: f64,
        rng: &mut R,
    ) -> Result<Configuration> {
        let mut x = self.encode(config)?;
        for (spec, &off) in self.specs.iter().zip(&self.offsets) {
            if !config.values.contains_key(&spec.name) {
                continue;
            }
            match &spec.domain {
                Domain::Categorical { choices } => {
                    if rng.gen::<f64>() < step {
                        let k = rng.gen_range(0..choices.len());
                        for j in 0..choices.len() {
                            x[off + j] = if j == k { 1.0 } else { 0.0 };
                        }
                    }
                }
                _ => {
                    x[off] = (x[off] + step * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
                }
            }
        }
        // Children activated by a categorical switch pick up their defaults.
        let mut decoded = self.decode(&x)?;
        for spec in &self.specs {
            if let Some(Value::Real(_) | Value::Int(_)) = decoded.values.get(&spec.name) {
                if x[self.offsets[self.index[&spec.name]]] == INACTIVE {
                    decoded
                        .values
                        .insert(spec.name.clone(), spec.default.clone());
                }
            }
        }
        Ok(decoded)
    }
}

fn unit_scale(v: f64, lo: f64, hi: f64, log_scale: bool) -> f64 {
    if log_scale {
        (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
    } else {
        (v - lo) / (hi - lo)
    }
}

/// Float nearest to `unit_unscale(t)` that encodes back to exactly `t`, so
/// decoded reals survive another encode/decode.
fn unit_unscale_exact(t: f64, lo: f64, hi: f64, log_scale: bool) -> f64 {
    let x = unit_unscale(t, lo, hi, log_scale);
    if unit_scale(x, lo, hi, log_scale) == t {
        return x;
    }
    let (mut down, mut up) = (x, x);
    for _ in 0..32 {
        up = up.next_up();
        down = down.next_down();
        if up <= hi && unit_scale(up, lo, hi, log_scale) == t {
            return up;
        }
        if down >= lo && unit_scale(down, lo, hi, log_scale) == t {
            return down;
        }
    }
    x
}

/// Moves `v` onto a value that decode(encode(.)) leaves unchanged.
fn canonical_real(v: f64, lo: f64, hi: f64, log_scale: bool) -> f64 {
    let mut v = v;
    for _ in 0..8 {
        let next = unit_unscale_exact(unit_scale(v, lo, hi, log_scale), lo, hi, log_scale);
        if next == v {
            break;
        }
        v = next;
    }
    v
}

fn unit_unscale(t: f64, lo: f64, hi: f64, log_scale: bool) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let v = if log_scale {
        (lo.ln() + t * (hi.ln() - lo.ln())).exp()
    } else {
        lo + t * (hi - lo)
    };
    v.clamp(lo, hi)
}
