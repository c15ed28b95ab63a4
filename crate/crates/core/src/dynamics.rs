//! Ground-truth benchmark systems and trajectory datasets.
//!
//! Two families are provided: a torque-driven pendulum and a force-driven
//! cart-pole. Angles are measured from upright, so the hanging rest state is
//! `theta = pi`. Integration is semi-implicit Euler at the system's `dt`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Half-width of the uniform start-state perturbation around the rest state.
pub const START_PERTURBATION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Pendulum,
    Cartpole,
}

impl Family {
    pub fn state_dim(self) -> usize {
        match self {
            Family::Pendulum => 2,
            Family::Cartpole => 4,
        }
    }

    pub fn control_dim(self) -> usize {
        1
    }

    /// Indices of state entries that are angles.
    pub fn angle_dims(self) -> &'static [usize] {
        match self {
            Family::Pendulum => &[0],
            Family::Cartpole => &[1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Pendulum => "pendulum",
            Family::Cartpole => "cartpole",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(Family::Pendulum),
            "cartpole" => Ok(Family::Cartpole),
            other => Err(Error::InvalidArgument(format!(
                "unknown system family {other}"
            ))),
        }
    }

    /// Stable rest state (pole hanging down, everything at rest).
    pub fn rest_state(self) -> Vec<f64> {
        match self {
            Family::Pendulum => vec![std::f64::consts::PI, 0.0],
            Family::Cartpole => vec![0.0, std::f64::consts::PI, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// m/s^2
    pub gravity: f64,
    /// Multiplier on every body mass.
    pub mass_scale: f64,
    /// Multiplier on every body length.
    pub length_scale: f64,
    /// Joint viscous damping, N*m*s.
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub family: Family,
    pub params: PhysicalParams,
    pub dt: f64,
    pub control_bounds: Vec<(f64, f64)>,
}

// Nominal body constants before scaling.
const PENDULUM_MASS: f64 = 1.0;
const PENDULUM_LENGTH: f64 = 1.0;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;

impl SystemSpec {
    pub fn pendulum() -> Self {
        Self {
            family: Family::Pendulum,
            params: PhysicalParams {
                gravity: 9.81,
                mass_scale: 1.0,
                length_scale: 1.0,
                damping: 0.05,
            },
            dt: 0.05,
            control_bounds: vec![(-2.0, 2.0)],
        }
    }

    pub fn cartpole() -> Self {
        Self {
            family: Family::Cartpole,
            params: PhysicalParams {
                gravity: 9.81,
                mass_scale: 1.0,
                length_scale: 1.0,
                damping: 0.0,
            },
            dt: 0.05,
            control_bounds: vec![(-10.0, 10.0)],
        }
    }

    pub fn of_family(family: Family) -> Self {
        match family {
            Family::Pendulum => Self::pendulum(),
            Family::Cartpole => Self::cartpole(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.family.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.family.control_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if !(p.mass_scale > 0.0 && p.length_scale > 0.0 && p.gravity >= 0.0 && p.damping >= 0.0) {
            return Err(Error::InvalidArgument(
                "physical scales must be positive".into(),
            ));
        }
        if self.control_bounds.len() != self.control_dim()
            || self
                .control_bounds
                .iter()
                .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(Error::InvalidArgument(
                "control bounds must be finite with lo < hi".into(),
            ));
        }
        Ok(())
    }

    pub fn clamp_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.control_bounds)
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }

    /// Continuous-time accelerations for the velocity components.
    fn accelerations(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = &self.params;
        match self.family {
            Family::Pendulum => {
                let m = PENDULUM_MASS * p.mass_scale;
                let l = PENDULUM_LENGTH * p.length_scale;
                let (theta, omega) = (x[0], x[1]);
                let inertia = m * l * l;
                vec![p.gravity / l * theta.sin() + (u[0] - p.damping * omega) / inertia]
            }
            Family::Cartpole => {
                let mc = CART_MASS * p.mass_scale;
                let mp = POLE_MASS * p.mass_scale;
                let l = POLE_HALF_LENGTH * p.length_scale;
                let total = mc + mp;
                let (theta, omega) = (x[1], x[3]);
                let (s, c) = theta.sin_cos();
                let temp = (u[0] + mp * l * omega * omega * s) / total;
                let theta_acc = (p.gravity * s - c * temp - p.damping * omega / (mp * l))
                    / (l * (4.0 / 3.0 - mp * c * c / total));
                let x_acc = temp - mp * l * theta_acc * c / total;
                vec![x_acc, theta_acc]
            }
        }
    }

    /// One semi-implicit Euler step of `x_{t+1} = f(x_t, u_t)`; the control is
    /// clamped to the bounds first.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n = self.state_dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.control_dim(),
                actual: u.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state".into()));
        }
        let u = self.clamp_control(u);
        let acc = self.accelerations(x, &u);
        let half = n / 2;
        let mut next = x.to_vec();
        for (k, a) in acc.iter().enumerate() {
            next[half + k] += self.dt * a;
            next[k] += self.dt * next[half + k];
        }
        Ok(next)
    }

    /// Copy with gravity, masses and lengths multiplied by the given scales.
    pub fn make_variant(
        &self,
        gravity_scale: f64,
        mass_scale: f64,
        length_scale: f64,
    ) -> Result<Self> {
        for (name, s) in [
            ("gravity_scale", gravity_scale),
            ("mass_scale", mass_scale),
            ("length_scale", length_scale),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {s}"
                )));
            }
        }
        let mut out = self.clone();
        out.params.gravity *= gravity_scale;
        out.params.mass_scale *= mass_scale;
        out.params.length_scale *= length_scale;
        Ok(out)
    }

    /// Total mechanical energy of the pendulum, zero at the hanging rest state.
    pub fn pendulum_energy(&self, x: &[f64]) -> f64 {
        let m = PENDULUM_MASS * self.params.mass_scale;
        let l = PENDULUM_LENGTH * self.params.length_scale;
        0.5 * m * l * l * x[1] * x[1] + m * self.params.gravity * l * (1.0 + x[0].cos())
    }

    fn start_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x = self.family.rest_state();
        let mut jitter = || rng.gen_range(-START_PERTURBATION..=START_PERTURBATION);
        match self.family {
            Family::Pendulum => {
                x[0] += jitter();
                x[1] += jitter();
            }
            Family::Cartpole => {
                x[0] += jitter();
                x[1] += jitter();
                x[3] += jitter();
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `L + 1` rows of length `n`.
    pub states: Vec<Vec<f64>>,
    /// `L` rows of length `m`.
    pub controls: Vec<Vec<f64>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// `(x_t, u_t, x_{t+1})` transitions, never crossing trajectory ends.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64])> + '_ {
        self.controls.iter().enumerate().map(|(t, u)| {
            (
                self.states[t].as_slice(),
                u.as_slice(),
                self.states[t + 1].as_slice(),
            )
        })
    }

    fn check(&self, n: usize, m: usize) -> Result<()> {
        if self.states.len() != self.controls.len() + 1 {
            return Err(Error::Parse(format!(
                "trajectory has {} states for {} controls",
                self.states.len(),
                self.controls.len()
            )));
        }
        if self.states.iter().any(|s| s.len() != n) || self.controls.iter().any(|u| u.len() != m) {
            return Err(Error::Parse("trajectory row width mismatch".into()));
        }
        if self
            .states
            .iter()
            .chain(&self.controls)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("trajectory entry".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.15,
            test: 0.15,
        }
    }
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(*f > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Boundaries `(train_end, valid_end)` over `n` trajectories.
    pub fn boundaries(&self, n: usize) -> (usize, usize) {
        let train_end = ((n as f64 * self.train).round() as usize).clamp(1.min(n), n);
        let valid_end =
            ((n as f64 * (self.train + self.valid)).round() as usize).clamp(train_end, n);
        (train_end, valid_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub system: SystemSpec,
    pub seed: u64,
    pub split: Split,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    pub fn train(&self) -> &[Trajectory] {
        let (a, _) = self.split.boundaries(self.trajectories.len());
        &self.trajectories[..a]
    }

    pub fn valid(&self) -> &[Trajectory] {
        let (a, b) = self.split.boundaries(self.trajectories.len());
        &self.trajectories[a..b]
    }

    pub fn test(&self) -> &[Trajectory] {
        let (_, b) = self.split.boundaries(self.trajectories.len());
        &self.trajectories[b..]
    }
}

/// Rolls out `n_traj` trajectories of `length` steps under i.i.d. uniform
/// controls. Trajectory `i` draws from its own derived stream.
pub fn generate_dataset(
    id: &str,
    system: &SystemSpec,
    n_traj: usize,
    length: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    system.validate()?;
    split.validate()?;
    if n_traj == 0 || length == 0 {
        return Err(Error::InvalidArgument(
            "need at least one trajectory of one step".into(),
        ));
    }
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| rollout_random(system, length, rng::derive(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        id: id.to_string(),
        system: system.clone(),
        seed,
        split,
        trajectories,
    })
}

fn rollout_random(system: &SystemSpec, length: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = rng::rng(seed);
    let mut x = system.start_state(&mut rng);
    let mut states = Vec::with_capacity(length + 1);
    let mut controls = Vec::with_capacity(length);
    states.push(x.clone());
    for _ in 0..length {
        let u: Vec<f64> = system
            .control_bounds
            .iter()
            .map(|(lo, hi)| rng.gen_range(*lo..=*hi))
            .collect();
        x = system.step(&x, &u)?;
        states.push(x.clone());
        controls.push(u);
    }
    Ok(Trajectory {
        states,
        controls,
        dt: system.dt,
    })
}

const DATASET_MAGIC: &str = "# mpc-portfolio dataset v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Plain-text dataset document: two header lines, a column line, then one
/// row per `(trajectory, step)`. The final state row of each trajectory has
/// empty control columns.
pub fn write_dataset_string(ds: &Dataset) -> String {
    let (n, m) = (ds.state_dim(), ds.control_dim());
    let p = &ds.system.params;
    let mut out = String::new();
    let lo: Vec<_> = ds
        .system
        .control_bounds
        .iter()
        .map(|b| fmt_f64(b.0))
        .collect();
    let hi: Vec<_> = ds
        .system
        .control_bounds
        .iter()
        .map(|b| fmt_f64(b.1))
        .collect();
    let _ = writeln!(out, "{DATASET_MAGIC}");
    let _ = writeln!(
        out,
        "# id={} family={} gravity={} mass_scale={} length_scale={} damping={} dt={} n={} m={} u_lo={} u_hi={} seed={} split={},{},{}",
        ds.id,
        ds.system.family.name(),
        fmt_f64(p.gravity),
        fmt_f64(p.mass_scale),
        fmt_f64(p.length_scale),
        fmt_f64(p.damping),
        fmt_f64(ds.system.dt),
        n,
        m,
        lo.join(","),
        hi.join(","),
        ds.seed,
        fmt_f64(ds.split.train),
        fmt_f64(ds.split.valid),
        fmt_f64(ds.split.test),
    );
    let cols: Vec<String> = ["traj".to_string(), "step".to_string()]
        .into_iter()
        .chain((0..n).map(|i| format!("x{i}")))
        .chain((0..m).map(|i| format!("u{i}")))
        .collect();
    let _ = writeln!(out, "{}", cols.join(","));
    for (i, traj) in ds.trajectories.iter().enumerate() {
        for (t, x) in traj.states.iter().enumerate() {
            let _ = write!(out, "{i},{t}");
            for v in x {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            match traj.controls.get(t) {
                Some(u) => {
                    for v in u {
                        let _ = write!(out, ",{}", fmt_f64(*v));
                    }
                }
                None => out.push_str(&",".repeat(m)),
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_dataset_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    if lines.next() != Some(DATASET_MAGIC) {
        return Err(Error::Parse("missing dataset magic line".into()));
    }
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::Parse("missing header".into()))?;
    let fields: std::collections::HashMap<&str, &str> = header
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Parse(format!("header lacks {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|e| Error::Parse(format!("{k}: {e}")))
    };
    let list = |k: &str| -> Result<Vec<f64>> {
        get(k)?
            .split(',')
            .map(|v| v.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))))
            .collect()
    };
    let family = Family::parse(get("family")?)?;
    let n: usize = num("n")? as usize;
    let m: usize = num("m")? as usize;
    if n != family.state_dim() || m != family.control_dim() {
        return Err(Error::Parse(
            "header dimensions disagree with family".into(),
        ));
    }
    let split = list("split")?;
    if split.len() != 3 {
        return Err(Error::Parse("split needs three fractions".into()));
    }
    let system = SystemSpec {
        family,
        params: PhysicalParams {
            gravity: num("gravity")?,
            mass_scale: num("mass_scale")?,
            length_scale: num("length_scale")?,
            damping: num("damping")?,
        },
        dt: num("dt")?,
        control_bounds: list("u_lo")?.into_iter().zip(list("u_hi")?).collect(),
    };
    system.validate()?;
    let split = Split {
        train: split[0],
        valid: split[1],
        test: split[2],
    };
    split.validate()?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|e| Error::Parse(format!("seed: {e}")))?;

    lines.next(); // column names
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 + n + m {
            return Err(Error::Parse(format!(
                "row {lineno}: expected {} columns",
                2 + n + m
            )));
        }
        let traj: usize = cells[0]
            .parse()
            .map_err(|e| Error::Parse(format!("row {lineno}: {e}")))?;
        let parse_row = |cells: &[&str]| -> Result<Vec<f64>> {
            cells
                .iter()
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {lineno}: {e}")))
                })
                .collect()
        };
        if traj == trajectories.len() {
            trajectories.push(Trajectory {
                states: Vec::new(),
                controls: Vec::new(),
                dt: system.dt,
            });
        } else if traj + 1 != trajectories.len() {
            return Err(Error::Parse(format!(
                "row {lineno}: trajectories out of order"
            )));
        }
        let t = trajectories.last_mut().expect("pushed above");
        t.states.push(parse_row(&cells[2..2 + n])?);
        if cells[2 + n..].iter().all(|c| c.is_empty()) {
            continue;
        }
        t.controls.push(parse_row(&cells[2 + n..])?);
    }
    if trajectories.is_empty() {
        return Err(Error::Empty("dataset has no trajectories".into()));
    }
    for t in &trajectories {
        t.check(n, m)?;
    }
    Ok(Dataset {
        id: get("id")?.to_string(),
        system,
        seed,
        split,
        trajectories,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_dataset_string(ds))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset_str(&std::fs::read_to_string(path)?)
}
