//! Shannon information measures (in bits) over subsets of {X, Y, Z}.

use std::fmt;
use std::ops::BitOr;

use thiserror::Error;

use crate::source::JointPmf3;
use crate::util::entropy_bits;

/// Rounding slack tolerated before a negative measure is treated as a bug.
const NEGATIVE_SLACK: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("variable set must be nonempty")]
    EmptyVarSet,
    #[error("variable sets {0} and {1} overlap")]
    OverlappingSets(VarSet, VarSet),
    #[error("probability {0} is outside [0, 1]")]
    ParamOutOfRange(f64),
    #[error("information measure evaluated to {0}, below the rounding tolerance")]
    Inconsistent(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    Z,
}

impl Var {
    pub const ALL: [Var; 3] = [Var::X, Var::Y, Var::Z];

    fn position(self) -> usize {
        self as usize
    }
}

/// A subset of {X, Y, Z}.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct VarSet(u8);

impl VarSet {
    pub const EMPTY: VarSet = VarSet(0);
    pub const X: VarSet = VarSet(1);
    pub const Y: VarSet = VarSet(2);
    pub const Z: VarSet = VarSet(4);
    pub const XY: VarSet = VarSet(3);
    pub const XZ: VarSet = VarSet(5);
    pub const YZ: VarSet = VarSet(6);
    pub const XYZ: VarSet = VarSet(7);

    pub fn of(vars: &[Var]) -> VarSet {
        vars.iter().fold(VarSet::EMPTY, |s, &v| s | VarSet::from(v))
    }

    pub fn contains(self, v: Var) -> bool {
        self.0 & (1 << v.position()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_disjoint(self, other: VarSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn union(self, other: VarSet) -> VarSet {
        VarSet(self.0 | other.0)
    }

    pub fn vars(self) -> impl Iterator<Item = Var> {
        Var::ALL.into_iter().filter(move |&v| self.contains(v))
    }

    /// All seven nonempty subsets.
    pub fn nonempty_subsets() -> impl Iterator<Item = VarSet> {
        (1u8..8).map(VarSet)
    }
}

impl From<Var> for VarSet {
    fn from(v: Var) -> Self {
        VarSet(1 << v.position())
    }
}

impl BitOr for VarSet {
    type Output = VarSet;
    fn bitor(self, rhs: VarSet) -> VarSet {
        self.union(rhs)
    }
}

impl fmt::Display for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .vars()
            .map(|v| match v {
                Var::X => "X",
                Var::Y => "Y",
                Var::Z => "Z",
            })
            .collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

impl fmt::Debug for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Marginal masses on `vars`, indexed row-major in X, Y, Z order.
pub fn marginal(pmf: &JointPmf3, vars: VarSet) -> Vec<f64> {
    let card = pmf.card();
    let size: usize = vars.vars().map(|v| card[v.position()]).product();
    let mut out = vec![0.0; size];
    for (cell, &p) in pmf.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let syms = pmf.cell_symbols(cell);
        let idx = vars
            .vars()
            .fold(0, |acc, v| acc * card[v.position()] + syms[v.position()]);
        out[idx] += p;
    }
    out
}

fn joint_entropy(pmf: &JointPmf3, vars: VarSet) -> f64 {
    if vars.is_empty() {
        0.0
    } else {
        // masses may sum to 1 + ulp, which would give -0.0000...
        entropy_bits(marginal(pmf, vars)).max(0.0)
    }
}

fn nonnegative(value: f64) -> Result<f64, InfoError> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -NEGATIVE_SLACK {
        Ok(0.0)
    } else {
        Err(InfoError::Inconsistent(value))
    }
}

fn require_nonempty(set: VarSet) -> Result<(), InfoError> {
    if set.is_empty() {
        Err(InfoError::EmptyVarSet)
    } else {
        Ok(())
    }
}

fn require_disjoint(a: VarSet, b: VarSet) -> Result<(), InfoError> {
    if a.is_disjoint(b) {
        Ok(())
    } else {
        Err(InfoError::OverlappingSets(a, b))
    }
}

/// H(vars).
pub fn entropy(pmf: &JointPmf3, vars: VarSet) -> Result<f64, InfoError> {
    require_nonempty(vars)?;
    Ok(joint_entropy(pmf, vars))
}

/// H(target | given); `given` may be empty.
pub fn conditional_entropy(
    pmf: &JointPmf3,
    target: VarSet,
    given: VarSet,
) -> Result<f64, InfoError> {
    require_nonempty(target)?;
    require_disjoint(target, given)?;
    nonnegative(joint_entropy(pmf, target | given) - joint_entropy(pmf, given))
}

/// I(u ∧ v).
pub fn mutual_information(pmf: &JointPmf3, u: VarSet, v: VarSet) -> Result<f64, InfoError> {
    require_nonempty(u)?;
    require_nonempty(v)?;
    require_disjoint(u, v)?;
    nonnegative(joint_entropy(pmf, u) + joint_entropy(pmf, v) - joint_entropy(pmf, u | v))
}

/// I(u ∧ v | w); an empty `w` reduces to [`mutual_information`].
pub fn conditional_mutual_information(
    pmf: &JointPmf3,
    u: VarSet,
    v: VarSet,
    w: VarSet,
) -> Result<f64, InfoError> {
    require_nonempty(u)?;
    require_nonempty(v)?;
    require_disjoint(u, v)?;
    require_disjoint(u, w)?;
    require_disjoint(v, w)?;
    if w.is_empty() {
        return mutual_information(pmf, u, v);
    }
    let value = joint_entropy(pmf, u | w) + joint_entropy(pmf, v | w)
        - joint_entropy(pmf, u | v | w)
        - joint_entropy(pmf, w);
    nonnegative(value)
}

/// h(p) = -p log2 p - (1-p) log2 (1-p).
pub fn binary_entropy(p: f64) -> Result<f64, InfoError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(InfoError::ParamOutOfRange(p));
    }
    Ok(entropy_bits([p, 1.0 - p]))
}
