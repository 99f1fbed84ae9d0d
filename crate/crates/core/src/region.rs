//! (SK, PK) rate regions: the A, B, C quantities, the outer and inner bounds,
//! the exact region when it is known, corner points, and 2D polygon helpers.
//!
//! Regions are kept in H-representation (a list of half-planes over
//! `(rs, rp)`, implicitly intersected with the nonnegative quadrant).
//! Vertices are derived on demand by [`vertices`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{conditional_mutual_information, entropy, mutual_information, VarSet};
use crate::source::JointPmf3;

/// Tolerance used for feasibility filtering and deduplication of vertices.
pub const VERTEX_TOL: f64 = 1e-9;

/// Default tolerance when testing `min{A, B, C} = B`.
pub const THEOREM3_TOL: f64 = 1e-9;

/// Threshold below which `I(X ∧ Y | Z)` is treated as zero in the inner bound.
const DEGENERATE_PK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("half-plane {0:?} has both coefficients zero")]
    ZeroNormal(String),
    #[error("region is unbounded in the nonnegative quadrant")]
    UnboundedRegion,
}

/// An (SK, PK) rate pair in bits per source symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePair {
    pub rs: f64,
    pub rp: f64,
}

impl RatePair {
    pub fn new(rs: f64, rp: f64) -> Self {
        Self { rs, rp }
    }

    fn distance(&self, other: &RatePair) -> f64 {
        (self.rs - other.rs).hypot(self.rp - other.rp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbcTriple {
    /// I(Z ∧ X, Y)
    pub a: f64,
    /// min{I(X ∧ Y, Z), I(Y ∧ X, Z)}
    pub b: f64,
    /// (H(X) + H(Y) + H(Z) - H(X, Y, Z)) / 2
    pub c: f64,
}

impl AbcTriple {
    pub fn min(&self) -> f64 {
        self.a.min(self.b).min(self.c)
    }
}

/// `coef_rs·rs + coef_rp·rp ≤ bound`, scaled so the larger coefficient
/// magnitude is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub label: String,
    #[serde(rename = "coefA")]
    pub coef_rs: f64,
    #[serde(rename = "coefB")]
    pub coef_rp: f64,
    pub bound: f64,
}

impl HalfPlane {
    pub fn new(
        label: impl Into<String>,
        coef_rs: f64,
        coef_rp: f64,
        bound: f64,
    ) -> Result<Self, RegionError> {
        let label = label.into();
        let scale = coef_rs.abs().max(coef_rp.abs());
        if scale == 0.0 {
            return Err(RegionError::ZeroNormal(label));
        }
        Ok(Self {
            label,
            coef_rs: coef_rs / scale,
            coef_rp: coef_rp / scale,
            bound: bound / scale,
        })
    }

    pub fn slack(&self, pair: &RatePair) -> f64 {
        self.bound - (self.coef_rs * pair.rs + self.coef_rp * pair.rp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Outer,
    Inner,
    Exact,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionKind::Outer => "outer",
            RegionKind::Inner => "inner",
            RegionKind::Exact => "exact",
        })
    }
}

/// A bounded polygonal rate region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub kind: RegionKind,
    halfplanes: Vec<HalfPlane>,
}

impl RegionSpec {
    /// Build a region, rejecting half-plane sets that leave some nonnegative
    /// direction uncut.
    pub fn new(kind: RegionKind, halfplanes: Vec<HalfPlane>) -> Result<Self, RegionError> {
        if !is_bounded(&halfplanes) {
            return Err(RegionError::UnboundedRegion);
        }
        Ok(Self { kind, halfplanes })
    }

    pub fn halfplanes(&self) -> &[HalfPlane] {
        &self.halfplanes
    }

    pub fn halfplane(&self, label: &str) -> Option<&HalfPlane> {
        self.halfplanes.iter().find(|h| h.label == label)
    }
}

/// The recession cone inside the quadrant is nonzero iff one of its extreme
/// rays (an axis, or a direction along some half-plane boundary) survives
/// every half-plane.
fn is_bounded(halfplanes: &[HalfPlane]) -> bool {
    let mut candidates = vec![(1.0, 0.0), (0.0, 1.0)];
    for h in halfplanes {
        if h.coef_rs * h.coef_rp < 0.0 {
            candidates.push((h.coef_rp.abs(), h.coef_rs.abs()));
        }
    }
    candidates.into_iter().all(|(dx, dy)| {
        halfplanes
            .iter()
            .any(|h| h.coef_rs * dx + h.coef_rp * dy > 1e-15)
    })
}

/// The single-letter quantities behind every bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMeasures {
    pub h_x: f64,
    pub h_y: f64,
    pub h_z: f64,
    pub h_xyz: f64,
    pub i_x_yz: f64,
    pub i_y_xz: f64,
    pub i_z_xy: f64,
    pub i_x_z: f64,
    pub i_y_z: f64,
    pub i_x_y: f64,
    pub i_x_y_given_z: f64,
}

impl SourceMeasures {
    pub fn of(pmf: &JointPmf3) -> Self {
        const MSG: &str = "fixed disjoint variable sets on a validated pmf";
        let h = |s| entropy(pmf, s).expect(MSG);
        let i = |u, v| mutual_information(pmf, u, v).expect(MSG);
        Self {
            h_x: h(VarSet::X),
            h_y: h(VarSet::Y),
            h_z: h(VarSet::Z),
            h_xyz: h(VarSet::XYZ),
            i_x_yz: i(VarSet::X, VarSet::YZ),
            i_y_xz: i(VarSet::Y, VarSet::XZ),
            i_z_xy: i(VarSet::Z, VarSet::XY),
            i_x_z: i(VarSet::X, VarSet::Z),
            i_y_z: i(VarSet::Y, VarSet::Z),
            i_x_y: i(VarSet::X, VarSet::Y),
            i_x_y_given_z: conditional_mutual_information(pmf, VarSet::X, VarSet::Y, VarSet::Z)
                .expect(MSG),
        }
    }

    pub fn abc(&self) -> AbcTriple {
        AbcTriple {
            a: self.i_z_xy,
            b: self.i_x_yz.min(self.i_y_xz),
            c: (0.5 * (self.h_x + self.h_y + self.h_z - self.h_xyz)).max(0.0),
        }
    }

    fn min_pairwise_z(&self) -> f64 {
        self.i_x_z.min(self.i_y_z)
    }

    fn max_pairwise_z(&self) -> f64 {
        self.i_x_z.max(self.i_y_z)
    }
}

pub fn compute_abc(pmf: &JointPmf3) -> AbcTriple {
    SourceMeasures::of(pmf).abc()
}

/// min{A, B, C}.
pub fn sk_capacity(pmf: &JointPmf3) -> f64 {
    compute_abc(pmf).min()
}

/// I(X ∧ Y | Z).
pub fn pk_capacity(pmf: &JointPmf3) -> f64 {
    SourceMeasures::of(pmf).i_x_y_given_z
}

fn plane(label: &str, a: f64, b: f64, bound: f64) -> HalfPlane {
    HalfPlane::new(label, a, b, bound).expect("nonzero normal")
}

/// Necessary conditions on any achievable pair, labeled eq6..eq9.
pub fn outer_bound(pmf: &JointPmf3) -> RegionSpec {
    let m = SourceMeasures::of(pmf);
    let abc = m.abc();
    let planes = vec![
        plane("eq6", 1.0, 0.0, abc.a),
        plane("eq7", 0.0, 1.0, m.i_x_y_given_z),
        plane("eq8", 1.0, 1.0, abc.b),
        plane("eq9", 2.0, 1.0, 2.0 * abc.c),
    ];
    RegionSpec::new(RegionKind::Outer, planes).expect("outer bound is bounded")
}

/// The achievable trapezoid spanned by time sharing between the SK capacity
/// point and the common-randomness split point. The slope coefficient is
/// kept as computed, including a negative value.
pub fn inner_bound(pmf: &JointPmf3) -> RegionSpec {
    let m = SourceMeasures::of(pmf);
    let sk = m.abc().min();
    let pk = m.i_x_y_given_z;
    let planes = if pk > DEGENERATE_PK {
        let slope = (sk - m.min_pairwise_z()) / pk;
        if slope < 0.0 {
            log::warn!(
                "inner bound slope is negative: min(A,B,C) = {sk} < min(I(X;Z), I(Y;Z)) = {}",
                m.min_pairwise_z()
            );
        }
        vec![
            plane("eq10", 1.0, slope, sk),
            plane("eq10_rp", 0.0, 1.0, pk),
        ]
    } else {
        vec![plane("eq10", 1.0, 0.0, sk), plane("eq10_rp", 0.0, 1.0, 0.0)]
    };
    RegionSpec::new(RegionKind::Inner, planes).expect("inner bound is bounded")
}

/// The capacity region when `min{A, B, C} = B` (within `tol`), otherwise `None`.
pub fn exact_region(pmf: &JointPmf3, tol: f64) -> Option<RegionSpec> {
    let m = SourceMeasures::of(pmf);
    let abc = m.abc();
    if abc.min() < abc.b - tol {
        return None;
    }
    let planes = vec![
        plane("eq7", 0.0, 1.0, m.i_x_y_given_z),
        plane("eq8", 1.0, 1.0, abc.b),
    ];
    Some(RegionSpec::new(RegionKind::Exact, planes).expect("exact region is bounded"))
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Extreme points of the region, counterclockwise, starting at the vertex
/// on the rs-axis closest to the origin. An infeasible region yields an
/// empty list.
pub fn vertices(region: &RegionSpec) -> Result<Vec<RatePair>, RegionError> {
    if !is_bounded(&region.halfplanes) {
        return Err(RegionError::UnboundedRegion);
    }
    let mut lines: Vec<(f64, f64, f64)> = region
        .halfplanes
        .iter()
        .map(|h| (h.coef_rs, h.coef_rp, h.bound))
        .collect();
    lines.push((-1.0, 0.0, 0.0));
    lines.push((0.0, -1.0, 0.0));

    let mut points: Vec<RatePair> = Vec::new();
    for i in 0..lines.len() {
        for j in (i + 1)..lines.len() {
            let (a1, b1, c1) = lines[i];
            let (a2, b2, c2) = lines[j];
            let det = a1 * b2 - a2 * b1;
            if det.abs() < 1e-14 {
                continue;
            }
            let p = RatePair::new(
                snap((c1 * b2 - c2 * b1) / det),
                snap((a1 * c2 - a2 * c1) / det),
            );
            let feasible = lines
                .iter()
                .all(|&(a, b, c)| a * p.rs + b * p.rp <= c + VERTEX_TOL);
            if feasible && !points.iter().any(|q| q.distance(&p) < VERTEX_TOL) {
                points.push(p);
            }
        }
    }
    Ok(order_ccw(points))
}

fn order_ccw(mut points: Vec<RatePair>) -> Vec<RatePair> {
    if points.len() < 2 {
        return points;
    }
    let k = points.len() as f64;
    let cx = points.iter().map(|p| p.rs).sum::<f64>() / k;
    let cy = points.iter().map(|p| p.rp).sum::<f64>() / k;
    let angle = |p: &RatePair| (p.rp - cy).atan2(p.rs - cx);
    points.sort_by(|p, q| angle(p).total_cmp(&angle(q)));
    let start = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.rp.abs() <= VERTEX_TOL)
        .min_by(|(_, p), (_, q)| p.rs.total_cmp(&q.rs))
        .or_else(|| {
            points
                .iter()
                .enumerate()
                .min_by(|(_, p), (_, q)| p.rp.total_cmp(&q.rp).then(p.rs.total_cmp(&q.rs)))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    points.rotate_left(start);
    points
}

/// Shoelace area of an ordered polygon.
pub fn polygon_area(vertices: &[RatePair]) -> f64 {
    let k = vertices.len();
    if k < 3 {
        return 0.0;
    }
    let twice: f64 = (0..k)
        .map(|i| {
            let (p, q) = (vertices[i], vertices[(i + 1) % k]);
            p.rs * q.rp - q.rs * p.rp
        })
        .sum();
    (twice / 2.0).abs()
}

pub fn contains(region: &RegionSpec, pair: &RatePair, tol: f64) -> bool {
    pair.rs >= -tol && pair.rp >= -tol && region.halfplanes.iter().all(|h| h.slack(pair) >= -tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub label: String,
    pub point: RatePair,
    /// A negative coordinate was clamped to zero.
    pub clamped: bool,
}

impl LabeledPoint {
    fn clamped(label: &str, rs: f64, rp: f64) -> Self {
        Self {
            label: label.to_string(),
            point: RatePair::new(rs.max(0.0), rp.max(0.0)),
            clamped: rs < 0.0 || rp < 0.0,
        }
    }
}

/// Which of the ordering cases of A, B, C the source falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    /// min{A, B, C} = B: outer and inner bounds coincide.
    Theorem3,
    /// min{A, B, C} = C < B.
    Case1,
    /// A < C ≤ B.
    Case2,
    /// A < B < C, which should never be observed.
    ImpossibleCase,
}

impl fmt::Display for CaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseTag::Theorem3 => "theorem3",
            CaseTag::Case1 => "case1",
            CaseTag::Case2 => "case2",
            CaseTag::ImpossibleCase => "impossible_case",
        })
    }
}

pub fn classify(abc: &AbcTriple, tol: f64) -> CaseTag {
    let min = abc.min();
    if min >= abc.b - tol {
        CaseTag::Theorem3
    } else if (min - abc.c).abs() <= tol {
        CaseTag::Case1
    } else if abc.a < abc.c && abc.c <= abc.b + tol {
        CaseTag::Case2
    } else {
        CaseTag::ImpossibleCase
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotablePoints {
    pub points: Vec<LabeledPoint>,
    pub case: CaseTag,
}

impl NotablePoints {
    pub fn get(&self, label: &str) -> Option<&LabeledPoint> {
        self.points.iter().find(|p| p.label == label)
    }
}

/// Corner points P1..P5 whose achievability decides the region, plus the
/// case tag.
pub fn notable_points(pmf: &JointPmf3) -> NotablePoints {
    let m = SourceMeasures::of(pmf);
    let abc = m.abc();
    let pk = m.i_x_y_given_z;
    let hi = m.max_pairwise_z();
    let case = classify(&abc, THEOREM3_TOL);
    if case == CaseTag::ImpossibleCase {
        log::warn!("observed A < B < C ordering: {abc:?}");
    }
    NotablePoints {
        points: vec![
            LabeledPoint::clamped("P1", 0.0, pk),
            LabeledPoint::clamped("P2", abc.min(), 0.0),
            LabeledPoint::clamped("P3", m.min_pairwise_z(), pk),
            LabeledPoint::clamped("P4", hi, abc.b - hi),
            LabeledPoint::clamped("P5", m.i_z_xy, m.i_x_y - m.i_z_xy),
        ],
        case,
    }
}
