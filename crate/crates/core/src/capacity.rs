//! Condenser p-capacity: the closed form for rings and a variational minimiser of
//! the discrete horizontal p-energy on trilinear (Q1) elements.

use crate::error::{Error, Result};
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use crate::quadrature::{radial_rule, SphereQuadrature};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::VecDeque;
use std::f64::consts::PI;

/// `κ(𝔾,p) (|p−Q|/(p−1))^{p−1} |R^{(p−Q)/(p−1)} − r^{(p−Q)/(p−1)}|^{1−p}`, or
/// `κ(𝔾,Q)(ln R/r)^{1−Q}` when `p = Q`.
pub fn ring_capacity(kappa_p: f64, q: f64, p: f64, r: f64, big_r: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::InvalidArgument(format!("p must exceed 1, got {p}")));
    }
    if !(r > 0.0 && big_r > r) {
        return Err(Error::InvalidArgument(format!("ring needs 0 < r < R, got {r}, {big_r}")));
    }
    if (p - q).abs() < 1e-12 {
        return Ok(kappa_p * (big_r / r).ln().powf(1.0 - q));
    }
    let e = (p - q) / (p - 1.0);
    Ok(kappa_p * ((p - q).abs() / (p - 1.0)).powf(p - 1.0) * (big_r.powf(e) - r.powf(e)).abs().powf(1.0 - p))
}

/// Plate geometry relative to the Kaplan distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// `{x : d(c, x) < radius}`.
    Ball { center: GroupPoint, radius: f64 },
    /// `{x : d(c, x) ≤ radius}`.
    ClosedBall { center: GroupPoint, radius: f64 },
    /// `{x : d(c, x) ≥ radius}`.
    ComplementOfBall { center: GroupPoint, radius: f64 },
}

impl Region {
    fn parts(&self) -> (&GroupPoint, f64) {
        match self {
            Region::Ball { center, radius } | Region::ClosedBall { center, radius } | Region::ComplementOfBall { center, radius } => {
                (center, *radius)
            }
        }
    }

    pub fn contains(&self, k: &KaplanNorm, x: &GroupPoint) -> bool {
        let (c, r) = self.parts();
        let d = k.distance(c, x);
        match self {
            Region::Ball { .. } => d < r,
            Region::ClosedBall { .. } => d <= r,
            Region::ComplementOfBall { .. } => d >= r,
        }
    }

    /// Kaplan distance from `x` to the region (0 inside).
    fn gap(&self, k: &KaplanNorm, x: &GroupPoint) -> f64 {
        let (c, r) = self.parts();
        let d = k.distance(c, x);
        match self {
            Region::ComplementOfBall { .. } => (r - d).max(0.0),
            _ => (d - r).max(0.0),
        }
    }

    /// The same region translated on the left by `w`.
    pub fn translate(&self, k: &KaplanNorm, w: &GroupPoint) -> Self {
        let (c, r) = self.parts();
        let center = group::mul(k.alg(), w, c);
        match self {
            Region::Ball { .. } => Region::Ball { center, radius: r },
            Region::ClosedBall { .. } => Region::ClosedBall { center, radius: r },
            Region::ComplementOfBall { .. } => Region::ComplementOfBall { center, radius: r },
        }
    }

    /// The region dilated by `λ`.
    pub fn dilate(&self, l: f64) -> Self {
        let (c, r) = self.parts();
        let center = group::dil(l, c);
        match self {
            Region::Ball { .. } => Region::Ball { center, radius: l * r },
            Region::ClosedBall { .. } => Region::ClosedBall { center, radius: l * r },
            Region::ComplementOfBall { .. } => Region::ComplementOfBall { center, radius: l * r },
        }
    }
}

/// `(F0, F1; 𝔾)`: admissible functions vanish on `F0` and equal 1 on `F1`. One of
/// the plates must be the complement of a ball, which bounds the computational box.
#[derive(Debug, Clone, Serialize)]
pub struct Condenser {
    pub f0: Region,
    pub f1: Region,
}

impl Condenser {
    /// The spherical ring `(B̄(c, r), 𝔾 ∖ B(c, R))`.
    pub fn ring(center: &GroupPoint, r: f64, big_r: f64) -> Result<Self> {
        if !(r > 0.0 && big_r > r) {
            return Err(Error::InvalidArgument(format!("ring needs 0 < r < R, got {r}, {big_r}")));
        }
        Ok(Self {
            f0: Region::ClosedBall { center: center.clone(), radius: r },
            f1: Region::ComplementOfBall { center: center.clone(), radius: big_r },
        })
    }

    /// Checks that the plates are disjoint (triangle inequality of the Kaplan
    /// distance) and that exactly one is unbounded.
    pub fn validate(&self, k: &KaplanNorm) -> Result<()> {
        use Region::*;
        let (c0, r0) = self.f0.parts();
        let (c1, r1) = self.f1.parts();
        c0.check(k.alg())?;
        c1.check(k.alg())?;
        if !(r0 > 0.0 && r1 > 0.0) {
            return Err(Error::InvalidArgument("plate radii must be positive".into()));
        }
        let d = k.distance(c0, c1);
        let disjoint = match (&self.f0, &self.f1) {
            (ComplementOfBall { .. }, ComplementOfBall { .. }) => false,
            (ComplementOfBall { .. }, _) | (_, ComplementOfBall { .. }) => {
                let (inner, outer) = if matches!(self.f0, ComplementOfBall { .. }) { (r1, r0) } else { (r0, r1) };
                d + inner < outer
            }
            _ => d > r0 + r1,
        };
        if !disjoint {
            return Err(Error::InvalidArgument("condenser plates overlap".into()));
        }
        if !matches!(self.f0, ComplementOfBall { .. }) && !matches!(self.f1, ComplementOfBall { .. }) {
            return Err(Error::InvalidArgument("one plate must be the complement of a ball".into()));
        }
        Ok(())
    }

    fn outer(&self) -> (&GroupPoint, f64) {
        if matches!(self.f0, Region::ComplementOfBall { .. }) {
            self.f0.parts()
        } else {
            self.f1.parts()
        }
    }
}

/// Plate status of a degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Free,
    Zero,
    One,
}

/// Coordinates carried by the structured lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lattice {
    /// Axis-aligned box in exponential coordinates `(x, y, t)`.
    Box,
    /// `(s, θ, φ) ↦ c·δ_{s/N(ω)} ω` with `ω` the Euclidean unit vector of polar
    /// angles `(θ, φ)`: the level sets `s = const` are the spheres about `c`.
    /// Nodes on the axis `φ ∈ {0, π}` are merged.
    RingFitted { center: GroupPoint },
}

/// Nodal values on a structured lattice.
#[derive(Debug, Clone, Serialize)]
pub struct GridField {
    pub lattice: Lattice,
    pub n: [usize; 3],
    pub lo: [f64; 3],
    pub h: [f64; 3],
    pub dofs: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
    #[serde(skip)]
    pub kind: Vec<NodeKind>,
}

impl GridField {
    pub fn free_count(&self) -> usize {
        self.kind.iter().filter(|k| **k == NodeKind::Free).count()
    }
}

/// Which box-lattice nodes are held at the plate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateRule {
    /// Nodes inside the plate.
    Inside,
    /// Nodes within one cell of the plate.
    OneCell,
}

/// Lattice selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshChoice {
    /// Ring-fitted for concentric ring condensers, box otherwise.
    Auto,
    Box,
    RingFitted,
}

/// Solver controls.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolverOptions {
    /// Nodes per axis.
    pub grid: usize,
    pub max_iterations: usize,
    /// Stop when the projected gradient falls below `tol` times its initial size.
    pub tol: f64,
    /// L-BFGS memory.
    pub memory: usize,
    pub plates: PlateRule,
    pub mesh: MeshChoice,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { grid: 32, max_iterations: 6000, tol: 1e-6, memory: 12, plates: PlateRule::OneCell, mesh: MeshChoice::Auto }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityResult {
    pub value: f64,
    pub initial_energy: f64,
    pub iterations: usize,
    /// Projected gradient norm relative to the initial one.
    pub gradient_ratio: f64,
    /// Energy never increased across accepted iterations.
    pub monotone: bool,
    pub free_nodes: usize,
    pub field: GridField,
}

const GAUSS: f64 = 0.577_350_269_189_625_8;

/// Reference gradients of the trilinear basis on `[-1,1]³`, `[gauss][node]`.
fn reference_gradients() -> [[[f64; 3]; 8]; 8] {
    let mut out = [[[0.0; 3]; 8]; 8];
    let sgn = |bit: usize| if bit == 0 { -1.0 } else { 1.0 };
    for (g, row) in out.iter_mut().enumerate() {
        let xi = [sgn(g & 1) * GAUSS, sgn((g >> 1) & 1) * GAUSS, sgn((g >> 2) & 1) * GAUSS];
        for (a, d) in row.iter_mut().enumerate() {
            let s = [sgn(a & 1), sgn((a >> 1) & 1), sgn((a >> 2) & 1)];
            let f = |k: usize| 0.5 * (1.0 + s[k] * xi[k]);
            *d = [0.5 * s[0] * f(1) * f(2), 0.5 * s[1] * f(0) * f(2), 0.5 * s[2] * f(0) * f(1)];
        }
    }
    out
}

fn gauss_offsets(g: usize) -> [f64; 3] {
    let o = |bit: usize| 0.5 * (1.0 + if bit == 0 { -GAUSS } else { GAUSS });
    [o(g & 1), o((g >> 1) & 1), o((g >> 2) & 1)]
}

/// Element connectivity plus, per Gauss point, `B_j = DF⁻¹ X_j` (so that
/// `X_j v = B_j · ∇_ξ v`) and the weight `|det DF| / m0`.
struct Mesh {
    field: GridField,
    elems: Vec<[usize; 8]>,
    gauss: Vec<[[f64; 7]; 8]>,
}

fn gauss_data(k: &KaplanNorm, x: &GroupPoint, df: &[[f64; 3]; 3]) -> Option<[f64; 7]> {
    let alg = k.alg();
    let m = nalgebra::Matrix3::from_fn(|i, j| df[i][j]);
    let det = m.determinant();
    let inv = m.try_inverse()?;
    let (px, py) = (x.v[0], x.v[1]);
    let frames = [
        [1.0, 0.0, 0.5 * (px * alg.b(0, 0, 0) + py * alg.b(1, 0, 0))],
        [0.0, 1.0, 0.5 * (px * alg.b(0, 1, 0) + py * alg.b(1, 1, 0))],
    ];
    let mut out = [0.0; 7];
    for (j, fr) in frames.iter().enumerate() {
        let b = inv * nalgebra::Vector3::new(fr[0], fr[1], fr[2]);
        out[3 * j..3 * j + 3].copy_from_slice(&[b[0], b[1], b[2]]);
    }
    out[6] = det.abs() / k.m0();
    Some(out)
}

fn check_group(k: &KaplanNorm, n: usize) -> Result<()> {
    if k.alg().n1() != 2 || k.alg().n2() != 1 {
        return Err(Error::InvalidArgument("the variational solver supports 3-dimensional groups only".into()));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!("grid needs at least 4 nodes per axis, got {n}")));
    }
    Ok(())
}

/// Box lattice over a coordinate box containing the bounded plate complement.
pub fn build_grid(k: &KaplanNorm, cond: &Condenser, n: usize, plates: PlateRule) -> Result<GridField> {
    check_group(k, n)?;
    cond.validate(k)?;
    let alg = k.alg();
    let (c, big_r) = cond.outer();
    // c·B(0,R) is the image of an axis box under an affine map: bound it by corners
    let bx = k.bounding_box(big_r);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let x = GroupPoint::h1(
            if corner & 1 == 0 { -bx[0] } else { bx[0] },
            if corner & 2 == 0 { -bx[1] } else { bx[1] },
            if corner & 4 == 0 { -bx[2] } else { bx[2] },
        );
        let f = group::mul(alg, c, &x).to_flat();
        for d in 0..3 {
            lo[d] = lo[d].min(f[d]);
            hi[d] = hi[d].max(f[d]);
        }
    }
    let h = [0, 1, 2].map(|d| (hi[d] - lo[d]) / (n - 1) as f64);
    let total = n * n * n;
    let point = |idx: usize| {
        let (i, j, l) = (idx % n, (idx / n) % n, idx / (n * n));
        GroupPoint::h1(lo[0] + i as f64 * h[0], lo[1] + j as f64 * h[1], lo[2] + l as f64 * h[2])
    };
    let inside: Vec<(bool, bool)> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let x = point(idx);
            (cond.f0.contains(k, &x), cond.f1.contains(k, &x))
        })
        .collect();
    let marks: Vec<(bool, bool)> = match plates {
        PlateRule::Inside => inside.clone(),
        PlateRule::OneCell => (0..total)
            .map(|idx| {
                let (i, j, l) = (idx % n, (idx / n) % n, idx / (n * n));
                let mut m = (false, false);
                for dl in l.saturating_sub(1)..=(l + 1).min(n - 1) {
                    for dj in j.saturating_sub(1)..=(j + 1).min(n - 1) {
                        for di in i.saturating_sub(1)..=(i + 1).min(n - 1) {
                            let (a, b) = inside[di + n * (dj + n * dl)];
                            m.0 |= a;
                            m.1 |= b;
                        }
                    }
                }
                m
            })
            .collect(),
    };
    let mut values = vec![0.0; total];
    let mut kind = vec![NodeKind::Free; total];
    for (idx, &(in0, in1)) in marks.iter().enumerate() {
        if in0 && in1 {
            return Err(Error::InvalidArgument("plates not separated on the grid".into()));
        }
        if in0 {
            kind[idx] = NodeKind::Zero;
        } else if in1 {
            kind[idx] = NodeKind::One;
            values[idx] = 1.0;
        } else {
            let x = point(idx);
            let (g0, g1) = (cond.f0.gap(k, &x), cond.f1.gap(k, &x));
            values[idx] = g0 / (g0 + g1).max(1e-300);
        }
    }
    let field = GridField { lattice: Lattice::Box, n: [n; 3], lo, h, dofs: total, values, kind };
    let zeros = field.kind.iter().filter(|k| **k == NodeKind::Zero).count();
    let ones = field.kind.iter().filter(|k| **k == NodeKind::One).count();
    if zeros == 0 || ones == 0 || field.free_count() == 0 {
        return Err(Error::InvalidArgument(format!(
            "plates not separated on the grid ({zeros} zero, {ones} one, {} free nodes)",
            field.free_count()
        )));
    }
    Ok(field)
}

fn box_mesh(k: &KaplanNorm, field: GridField) -> Result<Mesh> {
    let n = field.n[0];
    let (lo, h) = (field.lo, field.h);
    let ne = (n - 1) * (n - 1) * (n - 1);
    let df = [[0.5 * h[0], 0.0, 0.0], [0.0, 0.5 * h[1], 0.0], [0.0, 0.0, 0.5 * h[2]]];
    let built: Vec<Option<([usize; 8], [[f64; 7]; 8])>> = (0..ne)
        .into_par_iter()
        .map(|e| {
            let m = n - 1;
            let (i, j, l) = (e % m, (e / m) % m, e / (m * m));
            let mut nodes = [0; 8];
            for (a, o) in nodes.iter_mut().enumerate() {
                *o = (i + (a & 1)) + n * ((j + ((a >> 1) & 1)) + n * (l + ((a >> 2) & 1)));
            }
            let mut gd = [[0.0; 7]; 8];
            for (g, slot) in gd.iter_mut().enumerate() {
                let off = gauss_offsets(g);
                let x = GroupPoint::h1(
                    lo[0] + (i as f64 + off[0]) * h[0],
                    lo[1] + (j as f64 + off[1]) * h[1],
                    lo[2] + (l as f64 + off[2]) * h[2],
                );
                *slot = gauss_data(k, &x, &df)?;
            }
            Some((nodes, gd))
        })
        .collect();
    let mut elems = Vec::with_capacity(ne);
    let mut gauss = Vec::with_capacity(ne);
    for b in built {
        let (e, g) = b.ok_or_else(|| Error::Degenerate("singular box element".into()))?;
        elems.push(e);
        gauss.push(g);
    }
    Ok(Mesh { field, elems, gauss })
}

/// `(center, r, R, value on the inner sphere)` for concentric ring condensers.
fn ring_shape(cond: &Condenser) -> Option<(GroupPoint, f64, f64, f64)> {
    use Region::*;
    match (&cond.f0, &cond.f1) {
        (Ball { center: a, radius: r } | ClosedBall { center: a, radius: r }, ComplementOfBall { center: b, radius: big })
            if a == b =>
        {
            Some((a.clone(), *r, *big, 0.0))
        }
        (ComplementOfBall { center: b, radius: big }, Ball { center: a, radius: r } | ClosedBall { center: a, radius: r })
            if a == b =>
        {
            Some((a.clone(), *r, *big, 1.0))
        }
        _ => None,
    }
}

fn ring_point(k: &KaplanNorm, c: &GroupPoint, s: f64, th: f64, ph: f64) -> GroupPoint {
    let om = GroupPoint::h1(ph.sin() * th.cos(), ph.sin() * th.sin(), ph.cos());
    group::mul(k.alg(), c, &group::dil(s / k.norm(&om), &om))
}

fn ring_mesh(k: &KaplanNorm, cond: &Condenser, n: usize) -> Result<Mesh> {
    check_group(k, n)?;
    cond.validate(k)?;
    let (c, r, big_r, inner_value) =
        ring_shape(cond).ok_or_else(|| Error::InvalidArgument("ring-fitted lattice needs a concentric ring condenser".into()))?;
    let (zero, one) = if inner_value == 0.0 { (NodeKind::Zero, NodeKind::One) } else { (NodeKind::One, NodeKind::Zero) };
    shell_mesh(k, &c, r, big_r, n, |is, _, _, lin| {
        if is == 0 {
            (inner_value, zero)
        } else if is == n - 1 {
            (1.0 - inner_value, one)
        } else {
            ((1.0 - inner_value) * lin + inner_value * (1.0 - lin), NodeKind::Free)
        }
    })
}

/// Ring-fitted lattice over `r ≤ s ≤ R` with node values and kinds from
/// `assign(is, θ, φ, (s − r)/(R − r))`; axis nodes are passed `θ = 0`.
fn shell_mesh<F>(k: &KaplanNorm, c: &GroupPoint, r: f64, big_r: f64, n: usize, assign: F) -> Result<Mesh>
where
    F: Fn(usize, f64, f64, f64) -> (f64, NodeKind),
{
    let c = c.clone();
    let (ns, nt, np) = (n, n, n);
    let lo = [r, 0.0, 0.0];
    let h = [(big_r - r) / (ns - 1) as f64, 2.0 * PI / nt as f64, PI / (np - 1) as f64];
    let per = 2 + nt * (np - 2);
    let dof = |is: usize, it: usize, ip: usize| -> usize {
        let base = is * per;
        if ip == 0 {
            base
        } else if ip == np - 1 {
            base + 1
        } else {
            base + 2 + (it % nt) * (np - 2) + (ip - 1)
        }
    };
    let dofs = ns * per;
    let mut values = vec![0.0; dofs];
    let mut kind = vec![NodeKind::Free; dofs];
    for is in 0..ns {
        let lin = is as f64 / (ns - 1) as f64;
        for ip in 0..np {
            let its = if ip == 0 || ip == np - 1 { 0..1 } else { 0..nt };
            for it in its {
                let (v, kd) = assign(is, it as f64 * h[1], ip as f64 * h[2], lin);
                let d = dof(is, it, ip);
                values[d] = v;
                kind[d] = kd;
            }
        }
    }
    let ne = (ns - 1) * nt * (np - 1);
    let built: Vec<Option<([usize; 8], [[f64; 7]; 8])>> = (0..ne)
        .into_par_iter()
        .map(|e| {
            let (is, it, ip) = (e % (ns - 1), (e / (ns - 1)) % nt, e / ((ns - 1) * nt));
            let mut nodes = [0; 8];
            for (a, o) in nodes.iter_mut().enumerate() {
                *o = dof(is + (a & 1), it + ((a >> 1) & 1), ip + ((a >> 2) & 1));
            }
            let mut gd = [[0.0; 7]; 8];
            for (g, slot) in gd.iter_mut().enumerate() {
                let off = gauss_offsets(g);
                let q = [
                    lo[0] + (is as f64 + off[0]) * h[0],
                    lo[1] + (it as f64 + off[1]) * h[1],
                    lo[2] + (ip as f64 + off[2]) * h[2],
                ];
                let x = ring_point(k, &c, q[0], q[1], q[2]);
                // DF in ξ: central differences of the parameter map times h/2
                let mut df = [[0.0; 3]; 3];
                for d in 0..3 {
                    let eps = 1e-6 * if d == 0 { q[0].max(1.0) } else { 1.0 };
                    let (mut qa, mut qb) = (q, q);
                    qa[d] += eps;
                    qb[d] -= eps;
                    let fa = ring_point(k, &c, qa[0], qa[1], qa[2]).to_flat();
                    let fb = ring_point(k, &c, qb[0], qb[1], qb[2]).to_flat();
                    for (i, row) in df.iter_mut().enumerate() {
                        row[d] = (fa[i] - fb[i]) / (2.0 * eps) * 0.5 * h[d];
                    }
                }
                *slot = gauss_data(k, &x, &df)?;
            }
            Some((nodes, gd))
        })
        .collect();
    let mut elems = Vec::with_capacity(ne);
    let mut gauss = Vec::with_capacity(ne);
    for b in built {
        let (e, g) = b.ok_or_else(|| Error::Degenerate("singular ring element".into()))?;
        elems.push(e);
        gauss.push(g);
    }
    let field = GridField { lattice: Lattice::RingFitted { center: c }, n: [ns, nt, np], lo, h, dofs, values, kind };
    Ok(Mesh { field, elems, gauss })
}

/// Discrete energy `Σ_e Σ_g |∇₀v|^p w_g`.
struct Energy {
    mesh: Mesh,
    p: f64,
    dref: [[[f64; 3]; 8]; 8],
    /// `p/2` when it is an integer.
    half_int: Option<i32>,
    free: Vec<usize>,
    slot: Vec<usize>,
}

impl Energy {
    fn new(mesh: Mesh, p: f64) -> Self {
        let mut slot = vec![usize::MAX; mesh.field.dofs];
        let free: Vec<usize> = (0..mesh.field.dofs).filter(|&i| mesh.field.kind[i] == NodeKind::Free).collect();
        for (s, &i) in free.iter().enumerate() {
            slot[i] = s;
        }
        let half = 0.5 * p;
        let half_int = (half.fract() == 0.0 && half <= 16.0).then_some(half as i32);
        Self { mesh, p, dref: reference_gradients(), half_int, free, slot }
    }

    /// Element energy and, when `grad` is given, its nodal gradient.
    fn element(&self, e: usize, vals: &[f64], grad: Option<&mut [f64; 8]>) -> f64 {
        let c = &self.mesh.elems[e];
        let mut u = [0.0; 8];
        for a in 0..8 {
            u[a] = vals[c[a]];
        }
        let half = 0.5 * self.p;
        let mut en = 0.0;
        let mut gacc = [0.0; 8];
        for (g, gd) in self.mesh.gauss[e].iter().enumerate() {
            let d = &self.dref[g];
            let mut bx = [0.0; 8];
            let mut by = [0.0; 8];
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..8 {
                bx[a] = gd[0] * d[a][0] + gd[1] * d[a][1] + gd[2] * d[a][2];
                by[a] = gd[3] * d[a][0] + gd[4] * d[a][1] + gd[5] * d[a][2];
                gx += bx[a] * u[a];
                gy += by[a] * u[a];
            }
            let m2 = gx * gx + gy * gy;
            let lower = match self.half_int {
                Some(h) => m2.powi(h - 1),
                None => m2.powf(half - 1.0),
            };
            en += gd[6] * lower * m2;
            if grad.is_some() && m2 > 0.0 {
                let w = gd[6] * self.p * lower;
                for a in 0..8 {
                    gacc[a] += w * (gx * bx[a] + gy * by[a]);
                }
            }
        }
        if let Some(gr) = grad {
            *gr = gacc;
        }
        en
    }

    fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.mesh.field.values.clone();
        for (s, &i) in self.free.iter().enumerate() {
            v[i] = x[s];
        }
        v
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let v = self.expand(x);
        let per: Vec<f64> =
            (0..self.mesh.elems.len()).into_par_iter().with_min_len(512).map(|e| self.element(e, &v, None)).collect();
        per.iter().sum()
    }

    fn energy_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let v = self.expand(x);
        let per: Vec<(f64, [f64; 8])> = (0..self.mesh.elems.len())
            .into_par_iter()
            .with_min_len(512)
            .map(|e| {
                let mut g = [0.0; 8];
                let en = self.element(e, &v, Some(&mut g));
                (en, g)
            })
            .collect();
        let mut grad = vec![0.0; self.free.len()];
        let mut total = 0.0;
        for (e, (en, g)) in per.iter().enumerate() {
            total += en;
            for (a, &node) in self.mesh.elems[e].iter().enumerate() {
                let s = self.slot[node];
                if s != usize::MAX {
                    grad[s] += g[a];
                }
            }
        }
        (total, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn projected_grad_norm(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| if (xi <= 0.0 && gi > 0.0) || (xi >= 1.0 && gi < 0.0) { 0.0 } else { gi * gi })
        .sum::<f64>()
        .sqrt()
}

/// Minimises the discrete p-energy over admissible nodal functions with
/// projected L-BFGS, starting from the linear interpolant between the plates.
pub fn variational_capacity(k: &KaplanNorm, cond: &Condenser, p: f64, opts: &SolverOptions) -> Result<CapacityResult> {
    if !(p >= 2.0) {
        return Err(Error::InvalidArgument(format!("p must be at least 2 for the smooth discrete energy, got {p}")));
    }
    let fitted = match opts.mesh {
        MeshChoice::Auto => ring_shape(cond).is_some(),
        MeshChoice::Box => false,
        MeshChoice::RingFitted => true,
    };
    let mesh = if fitted { ring_mesh(k, cond, opts.grid)? } else { box_mesh(k, build_grid(k, cond, opts.grid, opts.plates)?)? };
    minimise(mesh, p, opts)
}

/// Default for the constant `c(Q)` in `M_Q(Γ) ≥ c(Q) ln(ρ/r)` on H¹: the
/// [`sector_modulus`] at `p = 4`, grid 32 (grid 16 gives 0.2053). A numerical
/// estimate, not a certified lower bound; callers may pass their own value.
pub const LOEWNER_DEFAULT: f64 = 0.2098;

/// Half-width of the sectors in [`sector_modulus`]. Grids that are multiples of
/// 16 place lattice nodes exactly on the sector edges.
pub const SECTOR_HALF_ANGLE: f64 = PI / 8.0;

/// `p`-modulus of the curves inside `1 ≤ N ≤ e` joining two opposite solid
/// sectors `|θ − θ₀| ≤ π/8`, `π/4 ≤ φ ≤ 3π/4` (θ₀ = 0, π). Both sectors meet every
/// sphere `S(0, τ)`, `1 ≤ τ ≤ e`; the faces `N = 1, e` are free.
pub fn sector_modulus(k: &KaplanNorm, p: f64, opts: &SolverOptions) -> Result<CapacityResult> {
    if !(p >= 2.0) {
        return Err(Error::InvalidArgument(format!("p must be at least 2 for the smooth discrete energy, got {p}")));
    }
    check_group(k, opts.grid)?;
    let o = GroupPoint::zero(k.alg());
    let belt = |ph: f64| (PI / 4.0 - 1e-12..=0.75 * PI + 1e-12).contains(&ph);
    let mesh = shell_mesh(k, &o, 1.0, std::f64::consts::E, opts.grid, |_, th, ph, _| {
        let off = |c: f64| (th - c + PI).rem_euclid(2.0 * PI) - PI;
        if belt(ph) && off(0.0).abs() <= SECTOR_HALF_ANGLE + 1e-12 {
            (0.0, NodeKind::Zero)
        } else if belt(ph) && off(PI).abs() <= SECTOR_HALF_ANGLE + 1e-12 {
            (1.0, NodeKind::One)
        } else {
            (0.5 * (1.0 - th.cos() * ph.sin()), NodeKind::Free)
        }
    })?;
    let zeros = mesh.field.kind.iter().filter(|k| **k == NodeKind::Zero).count();
    let ones = mesh.field.kind.iter().filter(|k| **k == NodeKind::One).count();
    if zeros == 0 || ones == 0 {
        return Err(Error::InvalidArgument(format!("grid {} does not resolve the sectors", opts.grid)));
    }
    minimise(mesh, p, opts)
}

fn minimise(mesh: Mesh, p: f64, opts: &SolverOptions) -> Result<CapacityResult> {
    let en = Energy::new(mesh, p);
    let mut x: Vec<f64> = en.free.iter().map(|&i| en.mesh.field.values[i]).collect();
    let (mut f, mut g) = en.energy_grad(&x);
    let f_init = f;
    let g0 = projected_grad_norm(&x, &g).max(1e-300);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut monotone = true;
    let mut converged = false;
    let mut iters = 0;
    let mut ratio = 1.0;
    let mut stall = 0;
    while iters < opts.max_iterations {
        ratio = projected_grad_norm(&x, &g) / g0;
        if ratio <= opts.tol {
            converged = true;
            break;
        }
        iters += 1;
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        } else {
            let gn = dot(&g, &g).sqrt();
            d.iter_mut().for_each(|di| *di *= 1e-2 / gn.max(1e-300));
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        if dot(&d, &g) >= 0.0 {
            hist.clear();
            d = g.iter().map(|v| -1e-2 * v / dot(&g, &g).sqrt().max(1e-300)).collect();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xn);
            let dec: f64 = xn.iter().zip(&x).zip(&g).map(|((a, b), c)| (a - b) * c).sum();
            // the full step is usually taken, so its gradient is computed with the energy
            let (fnew, gtrial) = if step == 1.0 { let (a, b) = en.energy_grad(&xn); (a, Some(b)) } else { (en.energy(&xn), None) };
            if fnew <= f + 1e-4 * dec && dec < 0.0 {
                accepted = Some((xn, fnew, gtrial));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gtrial)) = accepted else {
            hist.clear();
            stall += 1;
            if stall > 3 {
                break;
            }
            continue;
        };
        let gn = match gtrial {
            Some(g) => g,
            None => en.energy_grad(&xn).1,
        };
        if fnew > f {
            monotone = false;
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > opts.memory {
                hist.pop_front();
            }
        }
        let rel = (f - fnew) / f.abs().max(1e-300);
        stall = if rel < 1e-13 { stall + 1 } else { 0 };
        x = xn;
        f = fnew;
        g = gn;
        if stall > 20 {
            converged = true;
            break;
        }
    }
    ratio = ratio.min(projected_grad_norm(&x, &g) / g0);
    if !converged && ratio > opts.tol {
        return Err(Error::NonConvergence(format!(
            "projected gradient ratio {ratio:e} after {iters} iterations (energy {f})"
        )));
    }
    let values = en.expand(&x);
    let free_nodes = x.len();
    let mut field = en.mesh.field;
    field.values = values;
    Ok(CapacityResult { value: f, initial_energy: f_init, iterations: iters, gradient_ratio: ratio, monotone, free_nodes, field })
}

/// `p`-modulus of the radial family joining the boundary spheres of the ring,
/// `κ(𝔾,p) (∫_r^R s^{(1−Q)/(p−1)} ds)^{1−p}`, with the 1-d integral by quadrature.
pub fn radial_ring_modulus(quad: &SphereQuadrature, q: f64, p: f64, r: f64, big_r: f64) -> Result<f64> {
    if !(p > 1.0 && r > 0.0 && big_r > r) {
        return Err(Error::InvalidArgument("need p > 1 and 0 < r < R".into()));
    }
    let e = (1.0 - q) / (p - 1.0);
    // s = r e^u keeps the integrand smooth on [0, ln R/r]
    let integral: f64 = radial_rule((big_r / r).ln(), 24)
        .iter()
        .map(|&(u, w)| w * (r * u.exp()).powf(e + 1.0))
        .sum();
    Ok(quad.kappa(p) * integral.powf(1.0 - p))
}

#[derive(Debug, Clone, Serialize)]
pub struct EqualityReport {
    pub p: f64,
    pub inner: f64,
    pub outer: f64,
    pub modulus: f64,
    pub ring_formula: f64,
    /// `None` when the ring is too thin for the grid.
    pub variational: Option<f64>,
    pub gap_modulus_formula: f64,
    pub gap_variational_formula: Option<f64>,
    pub gap_variational_modulus: Option<f64>,
    /// Both closed forms exceed `10⁶ κ(𝔾,p)`: the ring is degenerate.
    pub diverges: bool,
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Compares the radial-family modulus, the ring formula and the variational
/// capacity for a ring condenser about `center`.
pub fn capacity_modulus_equality_check(
    k: &KaplanNorm,
    quad: &SphereQuadrature,
    center: &GroupPoint,
    r: f64,
    big_r: f64,
    p: f64,
    opts: &SolverOptions,
) -> Result<EqualityReport> {
    let q = k.qf();
    let kp = quad.kappa(p);
    let formula = ring_capacity(kp, q, p, r, big_r)?;
    let modulus = radial_ring_modulus(quad, q, p, r, big_r)?;
    let diverges = formula > 1e6 * kp && modulus > 1e6 * kp;
    let variational = if diverges {
        None
    } else {
        Some(variational_capacity(k, &Condenser::ring(center, r, big_r)?, p, opts)?.value)
    };
    Ok(EqualityReport {
        p,
        inner: r,
        outer: big_r,
        modulus,
        ring_formula: formula,
        variational,
        gap_modulus_formula: rel_gap(modulus, formula),
        gap_variational_formula: variational.map(|v| rel_gap(v, formula)),
        gap_variational_modulus: variational.map(|v| rel_gap(v, modulus)),
        diverges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::HTypeAlgebra;

    fn h1() -> KaplanNorm {
        KaplanNorm::new(&HTypeAlgebra::heisenberg(1))
    }

    #[test]
    fn ring_formula_branches() {
        let e = std::f64::consts::E;
        assert!((ring_capacity(2.0, 4.0, 4.0, 1.0, e).unwrap() - 2.0).abs() < 1e-14);
        assert!((ring_capacity(2.0, 4.0, 4.0, 1.0, e * e).unwrap() - 2.0 / 8.0).abs() < 1e-14);
        // p → Q continuity
        let a = ring_capacity(2.0, 4.0, 4.0 + 1e-7, 1.0, 2.0).unwrap();
        let b = ring_capacity(2.0, 4.0, 4.0, 1.0, 2.0).unwrap();
        assert!((a - b).abs() / b < 1e-5);
        assert!(ring_capacity(2.0, 4.0, 4.0, 2.0, 1.0).is_err());
        assert!(ring_capacity(2.0, 4.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn overlapping_plates_rejected() {
        let k = h1();
        let o = GroupPoint::h1(0.0, 0.0, 0.0);
        let cond = Condenser {
            f0: Region::ClosedBall { center: o.clone(), radius: 2.0 },
            f1: Region::ComplementOfBall { center: o.clone(), radius: 1.5 },
        };
        assert!(cond.validate(&k).is_err());
        assert!(variational_capacity(&k, &cond, 4.0, &SolverOptions::default()).is_err());
        assert!(variational_capacity(&k, &Condenser::ring(&o, 1.0, 2.0).unwrap(), 1.5, &SolverOptions::default()).is_err());
    }

    #[test]
    fn sector_modulus_near_default() {
        let opts = SolverOptions { grid: 16, tol: 1e-5, ..Default::default() };
        let res = sector_modulus(&h1(), 4.0, &opts).unwrap();
        assert!((res.value / LOEWNER_DEFAULT - 1.0).abs() < 0.05, "{}", res.value);
    }

    #[test]
    fn coarse_ring_energy_decreases() {
        let k = h1();
        let cond = Condenser::ring(&GroupPoint::h1(0.0, 0.0, 0.0), 1.0, std::f64::consts::E).unwrap();
        let opts = SolverOptions { grid: 12, max_iterations: 3000, tol: 1e-5, ..Default::default() };
        let res = variational_capacity(&k, &cond, 4.0, &opts).unwrap();
        assert!(res.monotone);
        assert!(res.value < res.initial_energy);
        assert!(res.field.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
