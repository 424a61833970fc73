//! Analytic quasiregular test maps: identity, dilations, left translations,
//! k-fold windings about the centre axis of a 3-dimensional Heisenberg group, and
//! compositions of these.

mod inequality;
mod lift;

pub use inequality::{module_inequality_report, sample_ring_configs, ModuleInequalityReport, RingConfig, Verdict, INEQUALITY_TOL};
pub use lift::{lift_curve, LiftOutcome};

use crate::algebra::HTypeAlgebra;
use crate::error::{Error, Result};
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use crate::quadrature::BallRegion;
use crate::sampling;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Serialize, Serializer};
use std::f64::consts::PI;
use std::fmt;

/// Horizontal radius below which a point counts as lying on a winding axis.
pub const BRANCH_TOL: f64 = 1e-6;

/// Parsed form of the map mini-language.
#[derive(Debug, Clone, PartialEq)]
pub enum MapDescriptor {
    Identity,
    Dilate(f64),
    Translate(Vec<f64>),
    Winding(u32),
    /// `compose:[a;b]` is `a ∘ b`: the last entry is applied first.
    Compose(Vec<MapDescriptor>),
}

impl MapDescriptor {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s, None),
        };
        let num = |a: &str| -> Result<f64> {
            a.trim().parse::<f64>().map_err(|_| Error::Parse(format!("not a number: {a:?}")))
        };
        match (head, arg) {
            ("identity", None) => Ok(Self::Identity),
            ("dilate", Some(a)) => {
                let l = num(a)?;
                if !(l > 0.0) || !l.is_finite() {
                    return Err(Error::Parse(format!("dilation factor must be positive, got {a}")));
                }
                Ok(Self::Dilate(l))
            }
            ("translate", Some(a)) => {
                let w = a.split(',').map(num).collect::<Result<Vec<_>>>()?;
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Parse("translation must be finite".into()));
                }
                Ok(Self::Translate(w))
            }
            ("winding", Some(a)) => {
                let k: u32 = a.parse().map_err(|_| Error::Parse(format!("winding needs a positive integer, got {a:?}")))?;
                if k == 0 {
                    return Err(Error::Parse("winding order must be at least 1".into()));
                }
                Ok(Self::Winding(k))
            }
            ("compose", Some(a)) => {
                let inner = a
                    .strip_prefix('[')
                    .and_then(|x| x.strip_suffix(']'))
                    .ok_or_else(|| Error::Parse(format!("compose needs [..], got {a:?}")))?;
                let parts = split_top(inner)?;
                if parts.iter().all(|p| p.trim().is_empty()) {
                    return Err(Error::Parse("empty composition".into()));
                }
                Ok(Self::Compose(parts.iter().map(|p| Self::parse(p)).collect::<Result<_>>()?))
            }
            _ => Err(Error::Parse(format!("unknown map descriptor {s:?}"))),
        }
    }
}

fn split_top(s: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ';' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return Err(Error::Parse("unbalanced brackets".into()));
        }
    }
    if depth != 0 {
        return Err(Error::Parse("unbalanced brackets".into()));
    }
    out.push(&s[start..]);
    Ok(out)
}

impl fmt::Display for MapDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Dilate(l) => write!(f, "dilate:{l}"),
            Self::Translate(w) => {
                let s: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                write!(f, "translate:{}", s.join(","))
            }
            Self::Winding(k) => write!(f, "winding:{k}"),
            Self::Compose(parts) => {
                let s: Vec<String> = parts.iter().map(|x| x.to_string()).collect();
                write!(f, "compose:[{}]", s.join(";"))
            }
        }
    }
}

impl Serialize for MapDescriptor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Identity,
    Dilate(f64),
    Translate(GroupPoint),
    Winding(u32),
    Compose(Vec<Node>),
}

/// A descriptor bound to an algebra.
#[derive(Debug, Clone)]
pub struct QRMap {
    alg: HTypeAlgebra,
    desc: MapDescriptor,
    root: Node,
}

fn bind(alg: &HTypeAlgebra, d: &MapDescriptor) -> Result<Node> {
    Ok(match d {
        MapDescriptor::Identity => Node::Identity,
        MapDescriptor::Dilate(l) => Node::Dilate(*l),
        MapDescriptor::Translate(w) => Node::Translate(GroupPoint::from_flat(alg, w)?),
        MapDescriptor::Winding(k) => {
            if alg.n1() != 2 || alg.n2() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "winding maps need a 3-dimensional Heisenberg group, got n1={} n2={}",
                    alg.n1(),
                    alg.n2()
                )));
            }
            Node::Winding(*k)
        }
        MapDescriptor::Compose(parts) => {
            if parts.is_empty() {
                return Err(Error::InvalidArgument("empty composition".into()));
            }
            Node::Compose(parts.iter().map(|p| bind(alg, p)).collect::<Result<_>>()?)
        }
    })
}

fn wind(k: u32, p: &GroupPoint) -> GroupPoint {
    let (x, y) = (p.v[0], p.v[1]);
    let r = x.hypot(y);
    let kf = k as f64;
    if r == 0.0 {
        return GroupPoint::new(vec![0.0, 0.0], vec![kf * p.z[0]]);
    }
    let th = kf * y.atan2(x);
    GroupPoint::new(vec![r * th.cos(), r * th.sin()], vec![kf * p.z[0]])
}

fn rot(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

impl Node {
    fn apply(&self, alg: &HTypeAlgebra, p: &GroupPoint) -> GroupPoint {
        match self {
            Node::Identity => p.clone(),
            Node::Dilate(l) => group::dil(*l, p),
            Node::Translate(w) => group::mul(alg, w, p),
            Node::Winding(k) => wind(*k, p),
            Node::Compose(parts) => parts.iter().rev().fold(p.clone(), |x, f| f.apply(alg, &x)),
        }
    }

    fn differential(&self, alg: &HTypeAlgebra, p: &GroupPoint) -> Result<DMatrix<f64>> {
        let n1 = alg.n1();
        Ok(match self {
            Node::Identity | Node::Translate(_) => DMatrix::identity(n1, n1),
            Node::Dilate(l) => DMatrix::identity(n1, n1) * *l,
            Node::Winding(k) => {
                let r = p.horizontal_norm();
                if *k > 1 && r < BRANCH_TOL {
                    return Err(Error::BranchLocus(format!("horizontal radius {r:e} on the winding axis")));
                }
                let th = p.v[1].atan2(p.v[0]);
                let kf = *k as f64;
                let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, kf]);
                rot(kf * th) * d * rot(-th)
            }
            Node::Compose(parts) => {
                let mut x = p.clone();
                let mut acc = DMatrix::identity(n1, n1);
                for f in parts.iter().rev() {
                    acc = f.differential(alg, &x)? * acc;
                    x = f.apply(alg, &x);
                }
                acc
            }
        })
    }

    fn fiber(&self, alg: &HTypeAlgebra, y: &GroupPoint) -> Vec<(GroupPoint, u32)> {
        match self {
            Node::Identity => vec![(y.clone(), 1)],
            Node::Dilate(l) => vec![(group::dil(1.0 / l, y), 1)],
            Node::Translate(w) => vec![(group::mul(alg, &group::inverse(w), y), 1)],
            Node::Winding(k) => {
                let kf = *k as f64;
                let t = y.z[0] / kf;
                let rho = y.horizontal_norm();
                if rho == 0.0 {
                    return vec![(GroupPoint::h1(0.0, 0.0, t), *k)];
                }
                let psi = y.v[1].atan2(y.v[0]);
                (0..*k)
                    .map(|j| {
                        let a = (psi + 2.0 * PI * j as f64) / kf;
                        (GroupPoint::h1(rho * a.cos(), rho * a.sin(), t), 1)
                    })
                    .collect()
            }
            Node::Compose(parts) => {
                let mut cur = vec![(y.clone(), 1u32)];
                for f in parts {
                    cur = cur
                        .iter()
                        .flat_map(|(x, i)| f.fiber(alg, x).into_iter().map(move |(u, j)| (u, i * j)))
                        .collect();
                }
                cur
            }
        }
    }

    fn equivariant(&self) -> bool {
        match self {
            Node::Identity | Node::Dilate(_) | Node::Winding(_) => true,
            Node::Translate(w) => w.is_zero(),
            Node::Compose(parts) => parts.iter().all(|p| p.equivariant()),
        }
    }

    fn similarity(&self, alg: &HTypeAlgebra) -> Option<(GroupPoint, f64)> {
        match self {
            Node::Identity => Some((GroupPoint::zero(alg), 1.0)),
            Node::Dilate(l) => Some((GroupPoint::zero(alg), *l)),
            Node::Translate(w) => Some((w.clone(), 1.0)),
            Node::Winding(1) => Some((GroupPoint::zero(alg), 1.0)),
            Node::Winding(_) => None,
            Node::Compose(parts) => {
                // (w1 δ_λ1)(w2 δ_λ2) = (w1 · δ_λ1 w2) δ_{λ1 λ2}
                let mut acc = (GroupPoint::zero(alg), 1.0);
                for f in parts.iter().rev() {
                    let (w, l) = f.similarity(alg)?;
                    acc = (group::mul(alg, &w, &group::dil(l, &acc.0)), l * acc.1);
                }
                Some(acc)
            }
        }
    }

    fn branch_radius(&self, alg: &HTypeAlgebra, p: &GroupPoint) -> f64 {
        match self {
            Node::Winding(k) if *k > 1 => p.horizontal_norm(),
            Node::Compose(parts) => {
                let mut x = p.clone();
                let mut best = f64::INFINITY;
                for f in parts.iter().rev() {
                    best = best.min(f.branch_radius(alg, &x));
                    x = f.apply(alg, &x);
                }
                best
            }
            _ => f64::INFINITY,
        }
    }

    fn max_winding(&self) -> u32 {
        match self {
            Node::Winding(k) => *k,
            Node::Compose(parts) => parts.iter().map(|p| p.max_winding()).product(),
            _ => 1,
        }
    }
}

/// Distortion suprema over a sample of points.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Distortion {
    /// `sup |D_H f| / l(D_H f)`.
    pub k: f64,
    /// `sup |D_H f|^Q / J`.
    pub k_outer: f64,
    /// `sup J / l(D_H f)^Q`.
    pub k_inner: f64,
    /// `sup 1 / l(D_H f)`.
    pub lambda: f64,
    pub samples: usize,
    pub skipped: usize,
}

impl QRMap {
    pub fn new(alg: &HTypeAlgebra, desc: MapDescriptor) -> Result<Self> {
        let root = bind(alg, &desc)?;
        Ok(Self { alg: alg.clone(), desc, root })
    }

    pub fn parse(alg: &HTypeAlgebra, s: &str) -> Result<Self> {
        Self::new(alg, MapDescriptor::parse(s)?)
    }

    pub fn descriptor(&self) -> &MapDescriptor {
        &self.desc
    }

    pub fn alg(&self) -> &HTypeAlgebra {
        &self.alg
    }

    pub fn apply(&self, p: &GroupPoint) -> Result<GroupPoint> {
        p.check(&self.alg)?;
        Ok(self.root.apply(&self.alg, p))
    }

    pub(crate) fn eval(&self, p: &GroupPoint) -> GroupPoint {
        self.root.apply(&self.alg, p)
    }

    /// Analytic `D_H f(p)` in the horizontal frames at `p` and `f(p)`.
    pub fn horizontal_differential(&self, p: &GroupPoint) -> Result<DMatrix<f64>> {
        p.check(&self.alg)?;
        self.root.differential(&self.alg, p)
    }

    /// Central-difference `D_H f(p)`: column `j` is the horizontal part of
    /// `f(p)⁻¹ f(p·exp(±h e_j))` divided by `2h`.
    pub fn fd_horizontal_differential(&self, p: &GroupPoint, h: f64) -> Result<DMatrix<f64>> {
        p.check(&self.alg)?;
        let n1 = self.alg.n1();
        let mut d = DMatrix::zeros(n1, n1);
        for j in 0..n1 {
            let fp = self.eval(&group::step_along(&self.alg, p, j, h));
            let fm = self.eval(&group::step_along(&self.alg, p, j, -h));
            for i in 0..n1 {
                d[(i, j)] = (fp.v[i] - fm.v[i]) / (2.0 * h);
            }
        }
        Ok(d)
    }

    /// `det D_H f · det Λ` with `Λ [u, v] = [D_H f u, D_H f v]` solved in least squares.
    pub fn formal_jacobian(&self, p: &GroupPoint) -> Result<f64> {
        let d = self.horizontal_differential(p)?;
        self.jacobian_of(&d)
    }

    fn jacobian_of(&self, d: &DMatrix<f64>) -> Result<f64> {
        let alg = &self.alg;
        let (n1, n2) = (alg.n1(), alg.n2());
        let pairs: Vec<(usize, usize)> = (0..n1).flat_map(|i| (i + 1..n1).map(move |j| (i, j))).collect();
        let mut pm = DMatrix::zeros(n2, pairs.len());
        let mut rm = DMatrix::zeros(n2, pairs.len());
        for (c, &(i, j)) in pairs.iter().enumerate() {
            let (di, dj): (Vec<f64>, Vec<f64>) = (d.column(i).iter().copied().collect(), d.column(j).iter().copied().collect());
            let img = alg.bracket(&di, &dj);
            for m in 0..n2 {
                pm[(m, c)] = alg.b(i, j, m);
                rm[(m, c)] = img[m];
            }
        }
        let pinv = pm.clone().pseudo_inverse(1e-12).map_err(|e| Error::InvalidAlgebra(e.to_string()))?;
        let lambda = &rm * pinv;
        let resid = (&lambda * &pm - &rm).amax();
        if resid > 1e-8 * (1.0 + rm.amax()) {
            return Err(Error::NotContact(format!("bracket system residual {resid:e}")));
        }
        Ok(d.determinant() * lambda.determinant())
    }

    /// Suprema of the three distortion ratios over `samples` points drawn
    /// uniformly from `region`; points on the branch locus are skipped.
    pub fn distortion(&self, k: &KaplanNorm, region: &BallRegion, samples: usize, seed: u64) -> Result<Distortion> {
        let q = k.q() as i32;
        let bx = k.bounding_box(region.radius);
        let mut rng = sampling::rng(seed, 0x6469);
        let mut out = Distortion { k: 0.0, k_outer: 0.0, k_inner: 0.0, lambda: 0.0, samples: 0, skipped: 0 };
        let n1 = self.alg.n1();
        let mut drawn = 0usize;
        while drawn < samples {
            let c: Vec<f64> = bx.iter().map(|h| rng.random_range(-h..*h)).collect();
            let x = GroupPoint::from_flat(&self.alg, &c)?;
            if k.norm(&x) >= region.radius {
                continue;
            }
            drawn += 1;
            let p = group::mul(&self.alg, &region.center, &x);
            let d = match self.root.differential(&self.alg, &p) {
                Ok(d) => d,
                Err(Error::BranchLocus(_)) => {
                    out.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let sv = d.clone().singular_values();
            let (big, small) = (sv.max(), sv.min());
            let j = self.jacobian_of(&d)?;
            if !(small > 0.0 && j > 0.0) || n1 == 0 {
                out.skipped += 1;
                continue;
            }
            out.samples += 1;
            out.k = out.k.max(big / small);
            out.k_outer = out.k_outer.max(big.powi(q) / j);
            out.k_inner = out.k_inner.max(j / small.powi(q));
            out.lambda = out.lambda.max(1.0 / small);
        }
        if out.samples == 0 {
            return Err(Error::Degenerate("every distortion sample was singular".into()));
        }
        Ok(out)
    }

    /// Full fiber `f⁻¹(y)` with local indices.
    pub fn fiber(&self, y: &GroupPoint) -> Result<Vec<(GroupPoint, u32)>> {
        y.check(&self.alg)?;
        if !y.is_finite() {
            return Err(Error::InvalidArgument("target is not finite".into()));
        }
        Ok(self.root.fiber(&self.alg, y))
    }

    /// Preimages of `y` inside `B(0, r)` with local indices.
    pub fn preimages(&self, k: &KaplanNorm, y: &GroupPoint, r: f64) -> Result<Vec<(GroupPoint, u32)>> {
        Ok(self.fiber(y)?.into_iter().filter(|(x, _)| k.norm(x) < r).collect())
    }

    /// `n(r, y)`: index-weighted preimage count in `B(0, r)`.
    pub fn counting_n(&self, k: &KaplanNorm, r: f64, y: &GroupPoint) -> Result<u32> {
        if !(r > 0.0) {
            return Ok(0);
        }
        Ok(self.preimages(k, y, r)?.iter().map(|(_, i)| i).sum())
    }

    /// True when `f ∘ δ_λ = δ_λ ∘ f` and `f` commutes with the radial flow, so
    /// preimages of `φ(s, y)` have norm proportional to `s`.
    pub fn is_radially_equivariant(&self) -> bool {
        self.root.equivariant()
    }

    /// `(w, λ)` with `f(x) = w · δ_λ x`, when `f` is of that form.
    pub fn as_similarity(&self) -> Option<(GroupPoint, f64)> {
        self.root.similarity(&self.alg)
    }

    /// Smallest horizontal radius at which any winding factor is evaluated
    /// (infinite for unbranched maps).
    pub fn branch_radius(&self, p: &GroupPoint) -> f64 {
        self.root.branch_radius(&self.alg, p)
    }

    /// Degree of the map (product of winding orders).
    pub fn degree(&self) -> u32 {
        self.root.max_winding()
    }
}
