//! Normalization of the two branch outputs and their element-wise combination.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Guard against division by zero in L2 normalization.
pub const L2_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Combine raw branch outputs.
    None,
    /// Divide each branch vector by its L2 norm.
    L2,
    /// Per-channel learned scale and bias (a diagonal 1x1 convolution).
    #[serde(rename = "conv")]
    LearnedScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sum,
    Prod,
    Max,
}

impl Normalization {
    pub const ALL: [Normalization; 3] = [Normalization::None, Normalization::L2, Normalization::LearnedScale];

    pub fn as_str(&self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::L2 => "l2",
            Normalization::LearnedScale => "conv",
        }
    }
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sum, Strategy::Prod, Strategy::Max];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Sum => "sum",
            Strategy::Prod => "prod",
            Strategy::Max => "max",
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "eltwise" => Ok(Normalization::None),
            "l2" => Ok(Normalization::L2),
            "conv" | "learned_scale" => Ok(Normalization::LearnedScale),
            other => Err(Error::Config(format!("unknown normalization {other:?} (none|l2|conv)"))),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Strategy::Sum),
            "prod" => Ok(Strategy::Prod),
            "max" => Ok(Strategy::Max),
            other => Err(Error::Config(format!("unknown coupling strategy {other:?} (sum|prod|max)"))),
        }
    }
}

/// Normalization mode, coupling strategy and which branches run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingConfig {
    pub normalization: Normalization,
    pub strategy: Strategy,
    pub enable_local: bool,
    pub enable_global: bool,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            normalization: Normalization::LearnedScale,
            strategy: Strategy::Sum,
            enable_local: true,
            enable_global: true,
        }
    }
}

impl CouplingConfig {
    pub fn coupled(normalization: Normalization, strategy: Strategy) -> Self {
        CouplingConfig {
            normalization,
            strategy,
            enable_local: true,
            enable_global: true,
        }
    }

    /// Plain local-only head (no normalization).
    pub fn local_only() -> Self {
        CouplingConfig {
            normalization: Normalization::None,
            strategy: Strategy::Sum,
            enable_local: true,
            enable_global: false,
        }
    }

    /// Plain global-only head (no normalization).
    pub fn global_only() -> Self {
        CouplingConfig {
            normalization: Normalization::None,
            strategy: Strategy::Sum,
            enable_local: false,
            enable_global: true,
        }
    }

    pub fn both_enabled(&self) -> bool {
        self.enable_local && self.enable_global
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enable_local && !self.enable_global {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if !self.both_enabled() && self.strategy != Strategy::Sum {
            return Err(Error::Config(format!(
                "strategy {} requires both branches enabled",
                self.strategy
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match (self.enable_local, self.enable_global) {
            (true, false) => "local-only".into(),
            (false, true) => "global-only".into(),
            _ => format!("{}+{}", self.normalization, self.strategy),
        }
    }
}

/// Per-channel affine map `scale * v + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineScale {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineScale {
    pub fn identity(len: usize) -> Self {
        AffineScale {
            scale: vec![1.0; len],
            bias: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }
}

/// Learned-scale parameters for both branches and both outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    pub local_cls: AffineScale,
    pub global_cls: AffineScale,
    pub local_bbox: AffineScale,
    pub global_bbox: AffineScale,
}

impl ScaleParams {
    pub fn identity(classes_plus_bg: usize) -> Self {
        ScaleParams {
            local_cls: AffineScale::identity(classes_plus_bg),
            global_cls: AffineScale::identity(classes_plus_bg),
            local_bbox: AffineScale::identity(4),
            global_bbox: AffineScale::identity(4),
        }
    }
}

pub fn normalize_branch(v: &[f64], mode: Normalization, scale: Option<&AffineScale>) -> Result<Vec<f64>> {
    match mode {
        Normalization::None => Ok(v.to_vec()),
        Normalization::L2 => {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_EPSILON);
            Ok(v.iter().map(|x| x / norm).collect())
        }
        Normalization::LearnedScale => {
            let p = require_scale(v, scale)?;
            Ok(v
                .iter()
                .zip(&p.scale)
                .zip(&p.bias)
                .map(|((x, s), b)| s * x + b)
                .collect())
        }
    }
}

fn require_scale<'a>(v: &[f64], scale: Option<&'a AffineScale>) -> Result<&'a AffineScale> {
    let p = scale.ok_or_else(|| Error::InvalidArgument("learned-scale normalization needs scale parameters".into()))?;
    if p.scale.len() != v.len() || p.bias.len() != v.len() {
        return Err(shape_err(
            "normalize_branch",
            format!("vector of {} vs scale params of {}", v.len(), p.scale.len()),
        ));
    }
    Ok(p)
}

/// Gradients of [`normalize_branch`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizeGrad {
    pub input: Vec<f64>,
    /// Present for learned-scale normalization: (d scale, d bias).
    pub affine: Option<AffineScale>,
}

pub fn normalize_branch_backward(
    v: &[f64],
    mode: Normalization,
    scale: Option<&AffineScale>,
    upstream: &[f64],
) -> Result<NormalizeGrad> {
    if upstream.len() != v.len() {
        return Err(shape_err(
            "normalize_branch_backward",
            format!("{} cotangents for {} inputs", upstream.len(), v.len()),
        ));
    }
    match mode {
        Normalization::None => Ok(NormalizeGrad {
            input: upstream.to_vec(),
            affine: None,
        }),
        Normalization::L2 => {
            let raw = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if raw <= L2_EPSILON {
                // constant denominator inside the guard
                return Ok(NormalizeGrad {
                    input: upstream.iter().map(|g| g / L2_EPSILON).collect(),
                    affine: None,
                });
            }
            let y: Vec<f64> = v.iter().map(|x| x / raw).collect();
            let dot: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
            Ok(NormalizeGrad {
                input: upstream.iter().zip(&y).map(|(g, yi)| (g - yi * dot) / raw).collect(),
                affine: None,
            })
        }
        Normalization::LearnedScale => {
            let p = require_scale(v, scale)?;
            Ok(NormalizeGrad {
                input: upstream.iter().zip(&p.scale).map(|(g, s)| g * s).collect(),
                affine: Some(AffineScale {
                    scale: upstream.iter().zip(v).map(|(g, x)| g * x).collect(),
                    bias: upstream.to_vec(),
                }),
            })
        }
    }
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("local has {} entries, global {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn couple(local: &[f64], global: &[f64], strategy: Strategy) -> Result<Vec<f64>> {
    check_pair("couple", local, global)?;
    let f = match strategy {
        Strategy::Sum => |a: f64, b: f64| a + b,
        Strategy::Prod => |a: f64, b: f64| a * b,
        Strategy::Max => |a: f64, b: f64| if a >= b { a } else { b },
    };
    Ok(local.iter().zip(global).map(|(&a, &b)| f(a, b)).collect())
}

/// Returns `(grad_local, grad_global)`. Max ties route to the local branch.
pub fn couple_backward(
    local: &[f64],
    global: &[f64],
    strategy: Strategy,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair("couple_backward", local, global)?;
    check_pair("couple_backward", local, upstream)?;
    let mut gl = Vec::with_capacity(local.len());
    let mut gg = Vec::with_capacity(local.len());
    for ((&a, &b), &g) in local.iter().zip(global).zip(upstream) {
        let (x, y) = match strategy {
            Strategy::Sum => (g, g),
            Strategy::Prod => (g * b, g * a),
            Strategy::Max if a >= b => (g, 0.0),
            Strategy::Max => (0.0, g),
        };
        gl.push(x);
        gg.push(y);
    }
    Ok((gl, gg))
}
