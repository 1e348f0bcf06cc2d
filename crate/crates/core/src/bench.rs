//! Negated synthetic test functions on their native boxes, the affine map to
//! the unit box and the normalised immediate regret.

use std::fmt;
use std::f64::consts::{E, PI};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("point outside the task domain")]
    OutOfDomain,
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("{0} does not support dimension {1}")]
    BadDimension(TaskKind, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Levy,
    Ackley,
    Powell,
    DixonPrice,
    StyblinskiTang,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::Levy, TaskKind::Ackley, TaskKind::Powell, TaskKind::DixonPrice, TaskKind::StyblinskiTang];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Levy => "levy",
            TaskKind::Ackley => "ackley",
            TaskKind::Powell => "powell",
            TaskKind::DixonPrice => "dixon_price",
            TaskKind::StyblinskiTang => "styblinski_tang",
        }
    }

    /// Native box `[lo, hi]` shared by every coordinate.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            TaskKind::Levy => (-10.0, 10.0),
            TaskKind::Ackley => (-32.768, 32.768),
            TaskKind::Powell => (-4.0, 5.0),
            TaskKind::DixonPrice => (-10.0, 10.0),
            TaskKind::StyblinskiTang => (-5.0, 5.0),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, TaskError> {
        let k = s.to_ascii_lowercase().replace('-', "_");
        TaskKind::ALL.into_iter().find(|t| t.name() == k).ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

/// Per-coordinate minimiser of Styblinski-Tang.
pub const STYBLINSKI_TANG_ARGMIN: f64 = -2.903534027771177;
/// Per-coordinate minimum of Styblinski-Tang.
pub const STYBLINSKI_TANG_MIN: f64 = -39.16616570377142;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Maximum of the negated function.
    pub optimum_value: f64,
    pub optimum_point: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, dim: usize) -> Result<Self, TaskError> {
        if dim == 0 || (kind == TaskKind::Powell && !dim.is_multiple_of(4)) {
            return Err(TaskError::BadDimension(kind, dim));
        }
        let (lo, hi) = kind.bounds();
        let (optimum_value, optimum_point) = match kind {
            TaskKind::Levy => (0.0, vec![1.0; dim]),
            TaskKind::Ackley | TaskKind::Powell => (0.0, vec![0.0; dim]),
            TaskKind::DixonPrice => {
                let p = (1..=dim)
                    .map(|i| {
                        let e = 2f64.powi(i as i32);
                        2f64.powf(-(e - 2.0) / e)
                    })
                    .collect();
                (0.0, p)
            }
            TaskKind::StyblinskiTang => (-STYBLINSKI_TANG_MIN * dim as f64, vec![STYBLINSKI_TANG_ARGMIN; dim]),
        };
        Ok(SyntheticTask { kind, dim, lower: vec![lo; dim], upper: vec![hi; dim], optimum_value, optimum_point })
    }

    pub fn by_name(name: &str, dim: usize) -> Result<Self, TaskError> {
        SyntheticTask::new(name.parse()?, dim)
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Negated function value at a native-domain point.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, TaskError> {
        if x.len() != self.dim {
            return Err(TaskError::OutOfDomain);
        }
        let slack = 1e-12;
        for ((v, l), h) in x.iter().zip(&self.lower).zip(&self.upper) {
            if !(v.is_finite() && *v >= l - slack && *v <= h + slack) {
                return Err(TaskError::OutOfDomain);
            }
        }
        Ok(-raw_value(self.kind, x))
    }

    pub fn evaluate_unit(&self, u: &[f64]) -> Result<f64, TaskError> {
        self.evaluate(&self.from_unit(u)?)
    }

    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>, TaskError> {
        map_box(x, &self.lower, &self.upper, |v, l, h| (v - l) / (h - l), (&self.lower, &self.upper))
    }

    pub fn from_unit(&self, u: &[f64]) -> Result<Vec<f64>, TaskError> {
        let zeros = vec![0.0; self.dim];
        let ones = vec![1.0; self.dim];
        map_box(u, &self.lower, &self.upper, |v, l, h| l + v * (h - l), (&zeros, &ones))
    }
}

fn map_box(
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
    f: impl Fn(f64, f64, f64) -> f64,
    check: (&[f64], &[f64]),
) -> Result<Vec<f64>, TaskError> {
    if x.len() != lower.len() {
        return Err(TaskError::OutOfDomain);
    }
    let slack = 1e-12;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(v.is_finite() && v >= check.0[i] - slack && v <= check.1[i] + slack) {
                return Err(TaskError::OutOfDomain);
            }
            Ok(f(v, lower[i], upper[i]))
        })
        .collect()
}

/// Standard (minimisation) definition.
fn raw_value(kind: TaskKind, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    match kind {
        TaskKind::Ackley => {
            let (a, b, c) = (20.0, 0.2, 2.0 * PI);
            let sq = x.iter().map(|v| v * v).sum::<f64>() / d;
            let cs = x.iter().map(|v| (c * v).cos()).sum::<f64>() / d;
            -a * (-b * sq.sqrt()).exp() - cs.exp() + a + E
        }
        TaskKind::Levy => {
            let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
            let n = w.len();
            let mut s = (PI * w[0]).sin().powi(2);
            for wi in &w[..n - 1] {
                s += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
            }
            s + (w[n - 1] - 1.0).powi(2) * (1.0 + (2.0 * PI * w[n - 1]).sin().powi(2))
        }
        TaskKind::Powell => x
            .chunks_exact(4)
            .map(|c| {
                (c[0] + 10.0 * c[1]).powi(2)
                    + 5.0 * (c[2] - c[3]).powi(2)
                    + (c[1] - 2.0 * c[2]).powi(4)
                    + 10.0 * (c[0] - c[3]).powi(4)
            })
            .sum(),
        TaskKind::DixonPrice => {
            (x[0] - 1.0).powi(2) + (1..x.len()).map(|i| (i + 1) as f64 * (2.0 * x[i] * x[i] - x[i - 1]).powi(2)).sum::<f64>()
        }
        TaskKind::StyblinskiTang => 0.5 * x.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub step: usize,
    pub incumbent: f64,
    pub regret: f64,
}

/// `r_t = |f_t − f*| / |f_0 − f*|`; all zeros when the initial gap vanishes.
pub fn normalised_regret(incumbents: &[f64], optimum: f64) -> Vec<RegretRow> {
    let Some(&f0) = incumbents.first() else { return Vec::new() };
    let gap0 = (f0 - optimum).abs();
    incumbents
        .iter()
        .enumerate()
        .map(|(step, &f)| {
            let regret = if gap0 == 0.0 { 0.0 } else if step == 0 { 1.0 } else { (f - optimum).abs() / gap0 };
            RegretRow { step, incumbent: f, regret }
        })
        .collect()
}
