//! Finite-alphabet three-component sources: construction, validation,
//! spec-file parsing and i.i.d. sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest per-component alphabet produced by [`random_pmf`].
pub const RANDOM_PMF_MAX_CARD: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("mass array has length {got}, expected {expected} for alphabet sizes {card:?}")]
    ShapeMismatch {
        card: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("mass {value} at cell {index} is negative or not finite")]
    NegativeMass { index: usize, value: f64 },
    #[error("masses sum to {sum}, more than 1e-9 away from 1")]
    BadSum { sum: f64 },
    #[error("parameter {name} = {value} is outside [0, 1]")]
    ParamOutOfRange { name: &'static str, value: f64 },
    #[error("alphabet sizes {0:?} must each lie in 1..=4")]
    CardTooLarge([usize; 3]),
    #[error("blocklength must be at least 1")]
    ZeroBlocklength,
    #[error("invalid source spec: {0}")]
    Spec(String),
}

/// Joint distribution of (X, Y, Z) on finite alphabets.
///
/// Masses are stored densely, row-major with `x` outermost, then `y`, then `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPmf3 {
    card: [usize; 3],
    probs: Vec<f64>,
}

impl JointPmf3 {
    pub fn card(&self) -> [usize; 3] {
        self.card
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of cells, `|X|·|Y|·|Z|`.
    pub fn cells(&self) -> usize {
        self.probs.len()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.card[1] + y) * self.card[2] + z
    }

    /// Inverse of [`JointPmf3::index`].
    pub fn cell_symbols(&self, cell: usize) -> [usize; 3] {
        let z = cell % self.card[2];
        let rest = cell / self.card[2];
        [rest / self.card[1], rest % self.card[1], z]
    }

    pub fn prob(&self, x: usize, y: usize, z: usize) -> f64 {
        self.probs[self.index(x, y, z)]
    }

    /// Relabel each component's symbols: symbol `s` of component `k` becomes `perms[k][s]`.
    pub fn relabeled(&self, perms: &[Vec<usize>; 3]) -> JointPmf3 {
        for (k, perm) in perms.iter().enumerate() {
            assert_eq!(perm.len(), self.card[k], "permutation size mismatch");
        }
        let mut probs = vec![0.0; self.probs.len()];
        for (cell, &p) in self.probs.iter().enumerate() {
            let [x, y, z] = self.cell_symbols(cell);
            probs[self.index(perms[0][x], perms[1][y], perms[2][z])] = p;
        }
        JointPmf3 {
            card: self.card,
            probs,
        }
    }
}

/// One length-`n` realization of the source.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleBlock {
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
    pub zs: Vec<usize>,
}

impl SampleBlock {
    pub fn new(xs: Vec<usize>, ys: Vec<usize>, zs: Vec<usize>) -> Self {
        assert!(
            xs.len() == ys.len() && ys.len() == zs.len(),
            "component sequences must share one length"
        );
        Self { xs, ys, zs }
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    /// Check every symbol against the alphabet sizes.
    pub fn fits(&self, card: [usize; 3]) -> bool {
        self.xs.iter().all(|&s| s < card[0])
            && self.ys.iter().all(|&s| s < card[1])
            && self.zs.iter().all(|&s| s < card[2])
    }
}

/// Validate a mass array. Sums off by at most 1e-9 are renormalized.
pub fn make_joint_pmf(card: [usize; 3], probs: Vec<f64>) -> Result<JointPmf3, SourceError> {
    let expected = card.iter().product::<usize>();
    if card.contains(&0) || probs.len() != expected {
        return Err(SourceError::ShapeMismatch {
            card,
            expected,
            got: probs.len(),
        });
    }
    if let Some((index, &value)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !p.is_finite() || **p < 0.0)
    {
        return Err(SourceError::NegativeMass { index, value });
    }
    let sum = crate::util::KahanSum::from_iter(probs.iter().copied()).value();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SourceError::BadSum { sum });
    }
    let probs = if sum == 1.0 {
        probs
    } else {
        probs.into_iter().map(|p| p / sum).collect()
    };
    Ok(JointPmf3 { card, probs })
}

/// The point-mass source on alphabets of size one.
pub fn point_mass() -> JointPmf3 {
    JointPmf3 {
        card: [1, 1, 1],
        probs: vec![1.0],
    }
}

/// X, Y independent fair bits and Z = X xor Y.
pub fn xor_source() -> JointPmf3 {
    let mut probs = vec![0.0; 8];
    for x in 0..2 {
        for y in 0..2 {
            probs[(x * 2 + y) * 2 + (x ^ y)] = 0.25;
        }
    }
    JointPmf3 {
        card: [2, 2, 2],
        probs,
    }
}

/// Whether `(p, q)` satisfies the ordering `0 < q < p < 1/2` under which the
/// cascade source's capacity region has its closed form.
pub fn cascade_ordering_holds(p: f64, q: f64) -> bool {
    0.0 < q && q < p && p < 0.5
}

/// Uniform X observed through two binary symmetric channels: Y flips X with
/// probability `p`, Z flips X with probability `q`, so Y - X - Z is Markov.
pub fn cascade_bsc_source(p: f64, q: f64) -> Result<JointPmf3, SourceError> {
    for (name, value) in [("p", p), ("q", q)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(SourceError::ParamOutOfRange { name, value });
        }
    }
    if !cascade_ordering_holds(p, q) {
        log::warn!("cascade_bsc parameters p={p}, q={q} violate 0 < q < p < 1/2");
    }
    let flip = |a: usize, b: usize, e: f64| if a == b { 1.0 - e } else { e };
    let mut probs = Vec::with_capacity(8);
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                probs.push(0.5 * flip(x, y, p) * flip(x, z, q));
            }
        }
    }
    Ok(JointPmf3 {
        card: [2, 2, 2],
        probs,
    })
}

/// Inverse-CDF sampler over the flattened mass array.
#[derive(Debug, Clone)]
pub struct CellSampler {
    card: [usize; 3],
    cdf: Vec<f64>,
    last_positive: usize,
}

impl CellSampler {
    pub fn new(pmf: &JointPmf3) -> Self {
        let mut acc = 0.0;
        let cdf = pmf
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let last_positive = pmf.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Self {
            card: pmf.card,
            cdf,
            last_positive,
        }
    }

    fn draw_cell<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let cell = self.cdf.partition_point(|&c| c <= u);
        cell.min(self.last_positive)
    }

    pub fn block(&self, n: usize, seed: u64) -> SampleBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [_, cy, cz] = self.card;
        let mut block = SampleBlock {
            xs: Vec::with_capacity(n),
            ys: Vec::with_capacity(n),
            zs: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let cell = self.draw_cell(&mut rng);
            block.xs.push(cell / (cy * cz));
            block.ys.push((cell / cz) % cy);
            block.zs.push(cell % cz);
        }
        block
    }
}

/// Draw `n` i.i.d. symbol triples; deterministic in `(pmf, n, seed)`.
pub fn sample_iid(pmf: &JointPmf3, n: usize, seed: u64) -> Result<SampleBlock, SourceError> {
    if n == 0 {
        return Err(SourceError::ZeroBlocklength);
    }
    Ok(CellSampler::new(pmf).block(n, seed))
}

/// Distribution drawn uniformly from the probability simplex.
pub fn random_pmf(card: [usize; 3], seed: u64) -> Result<JointPmf3, SourceError> {
    if card.iter().any(|&c| c == 0 || c > RANDOM_PMF_MAX_CARD) {
        return Err(SourceError::CardTooLarge(card));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = card.iter().product::<usize>();
    let draws: Vec<f64> = (0..cells).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let probs = draws.into_iter().map(|d| d / total).collect();
    make_joint_pmf(card, probs)
}

/// On-disk / inline description of a source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Table { card: [usize; 3], p: Vec<f64> },
    Xor,
    CascadeBsc { p: f64, q: f64 },
    PointMass,
}

impl SourceSpec {
    pub fn build(&self) -> Result<JointPmf3, SourceError> {
        match self {
            SourceSpec::Table { card, p } => make_joint_pmf(*card, p.clone()),
            SourceSpec::Xor => Ok(xor_source()),
            SourceSpec::CascadeBsc { p, q } => cascade_bsc_source(*p, *q),
            SourceSpec::PointMass => Ok(point_mass()),
        }
    }

    /// Parse a source-spec record. Fields not belonging to the record's
    /// type are rejected.
    pub fn from_json(text: &str) -> Result<Self, SourceError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SourceError::Spec(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| SourceError::Spec("source spec must be an object".into()))?;
        let allowed: &[&str] = match obj.get("type").and_then(|t| t.as_str()) {
            Some("table") => &["type", "card", "p"],
            Some("cascade_bsc") => &["type", "p", "q"],
            Some("xor") | Some("point_mass") => &["type"],
            other => return Err(SourceError::Spec(format!("unknown source type {other:?}"))),
        };
        if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(SourceError::Spec(format!("unknown field {extra:?}")));
        }
        serde_json::from_value(value).map_err(|e| SourceError::Spec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SourceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SourceError::Spec(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Parse an inline builder: `xor`, `point_mass`, `cascade_bsc:p,q` or
    /// `table@path` (a source-spec file).
    pub fn parse_inline(text: &str) -> Result<Self, SourceError> {
        let text = text.trim();
        if let Some(path) = text.strip_prefix("table@") {
            return Self::load(Path::new(path));
        }
        if let Some(args) = text.strip_prefix("cascade_bsc:") {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| SourceError::Spec(format!("bad number {s:?} in {text:?}")))
            };
            return match parts.as_slice() {
                [p, q] => Ok(SourceSpec::CascadeBsc {
                    p: parse(p)?,
                    q: parse(q)?,
                }),
                _ => Err(SourceError::Spec(format!(
                    "expected cascade_bsc:p,q, got {text:?}"
                ))),
            };
        }
        match text {
            "xor" => Ok(SourceSpec::Xor),
            "point_mass" => Ok(SourceSpec::PointMass),
            _ => Err(SourceError::Spec(format!(
                "unknown source builder {text:?}"
            ))),
        }
    }
}
