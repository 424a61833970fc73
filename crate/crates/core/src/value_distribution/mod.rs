//! Sphere averages of the counting function and the auxiliary function `A(r)`.
//!
//! `ν(r, Y)` averages `n(r, y)` over `Y = S(w, t)` in the σ-measure, normalised by
//! `κ = Σ υ_i^Q w_i` so that a map covering every point once has `ν = 1`.
//! `A(r) = (2Q/πκ) ∫_{B(0,r)} J(x) υ(f(x))^Q / (1 + N(f(x))^{2Q}) dx`.

mod decomposition;
mod exceptional;

pub use decomposition::{ball_decomposition, DecompositionParams, DecompositionReport, RingCover};
pub use exceptional::{exceptional_checks, exceptional_set, ASamples, ExceptionalCheck, ExceptionalParams, ExceptionalSet, Tier};

use crate::error::{Error, Result};
use crate::flow;
use crate::group::{self, GroupPoint};
use crate::maps::QRMap;
use crate::norm::KaplanNorm;
use crate::quadrature::{radial_rule, Estimate, SphereQuadrature};
use crate::sampling;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;
use std::fmt::Write as _;

/// Sphere `S(w, t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sphere {
    pub center: GroupPoint,
    pub radius: f64,
}

impl Sphere {
    pub fn new(center: GroupPoint, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("sphere radius must be positive, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn about_origin(k: &KaplanNorm, radius: f64) -> Result<Self> {
        Self::new(GroupPoint::zero(k.alg()), radius)
    }
}

/// `ν(r, Y)` with the spread of the weighted node values as its error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NuEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `ν(r, S(w, s))`.
pub fn nu_average(f: &QRMap, k: &KaplanNorm, quad: &SphereQuadrature, r: f64, sphere: &Sphere) -> Result<NuEstimate> {
    sphere.center.check(k.alg())?;
    let q = k.qf();
    let sw = quad.sigma_weights(q);
    let kappa: f64 = sw.iter().sum();
    let counts: Vec<Result<f64>> = quad
        .nodes
        .par_iter()
        .map(|y| {
            let p = flow::flow_point(k, y, sphere.radius)?;
            let target = group::mul(k.alg(), &sphere.center, &p);
            Ok(f.counting_n(k, r, &target)? as f64)
        })
        .collect();
    let mut n = Vec::with_capacity(counts.len());
    for c in counts {
        n.push(c?);
    }
    let value = n.iter().zip(&sw).map(|(a, w)| a * w).sum::<f64>() / kappa;
    let var: f64 = n.iter().zip(&sw).map(|(a, w)| (w * (a - value)).powi(2)).sum();
    Ok(NuEstimate { value, std_error: var.sqrt() / kappa })
}

/// Counting form `A(r) = (2/πκ) Σ_i σ_i ∫_0^{π/2} n(r, φ_{t(u)}(ω_i)) du` with
/// `u = arctan t^Q`. For radially equivariant maps the preimages of `φ_t(ω)`
/// have norms `t N_j`, which gives `Σ_j idx_j arctan((r/N_j)^Q)` per node; other
/// maps use a midpoint rule in `u`.
pub fn a_counting(f: &QRMap, k: &KaplanNorm, quad: &SphereQuadrature, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Ok(0.0);
    }
    let q = k.qf();
    let sw = quad.sigma_weights(q);
    let kappa: f64 = sw.iter().sum();
    let equivariant = f.is_radially_equivariant();
    let per: Vec<Result<f64>> = quad
        .nodes
        .par_iter()
        .map(|y| {
            if equivariant {
                let mut acc = 0.0;
                for (x, idx) in f.fiber(y)? {
                    let nx = k.norm(&x);
                    acc += idx as f64 * if nx > 0.0 { (r / nx).powf(q).atan() } else { 0.5 * PI };
                }
                Ok(acc)
            } else {
                const PANELS: usize = 512;
                let du = 0.5 * PI / PANELS as f64;
                let mut acc = 0.0;
                for i in 0..PANELS {
                    let t = ((i as f64 + 0.5) * du).tan().powf(1.0 / q);
                    let target = flow::flow_point(k, y, t)?;
                    acc += f.counting_n(k, r, &target)? as f64 * du;
                }
                Ok(acc)
            }
        })
        .collect();
    let mut total = 0.0;
    for (v, w) in per.into_iter().zip(&sw) {
        total += v? * w;
    }
    Ok(2.0 * total / (PI * kappa))
}

/// Domain form of `A(r)` by importance sampling: node `i ∝ w_i`, radius
/// `t ∝ t^{Q-1}/(1+t^{2Q})` on `(0, r)`, point `φ_t(ω_i)`.
pub fn a_domain(f: &QRMap, k: &KaplanNorm, quad: &SphereQuadrature, r: f64, samples: usize, seed: u64) -> Result<Estimate> {
    if !(r > 0.0) {
        return Ok(Estimate { value: 0.0, std_error: 0.0, samples: 0 });
    }
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let q = k.qf();
    let kappa = quad.kappa(q);
    let big_w = quad.total_weight();
    let pick = WeightedIndex::new(&quad.weights).map_err(|e| Error::Quadrature(e.to_string()))?;
    let top = r.powf(q).atan();
    let scale = 2.0 * q / (PI * kappa) * big_w * top / q;
    const CHUNK: usize = 4096;
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Result<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = sampling::rng(seed, 0x4172 + c as u64);
            let m = CHUNK.min(samples - c * CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..m {
                let i = pick.sample(&mut rng);
                let t = (rng.random::<f64>() * top).tan().powf(1.0 / q);
                let x = flow::flow_point(k, &quad.nodes[i], t)?;
                let g = match (f.formal_jacobian(&x), f.apply(&x)) {
                    (Ok(j), Ok(y)) => {
                        let ny = k.norm(&y);
                        let u = k.upsilon(&y).unwrap_or(0.0);
                        j * u.powf(q) / (1.0 + ny.powf(2.0 * q)) * (1.0 + t.powf(2.0 * q))
                    }
                    _ => 0.0,
                };
                s1 += g;
                s2 += g * g;
            }
            Ok((s1, s2))
        })
        .collect();
    let (mut s1, mut s2) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        s1 += a;
        s2 += b;
    }
    let n = samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(Estimate { value: scale * mean, std_error: scale * (var / n).sqrt(), samples })
}

/// `A` on the geometric grid `r_j = r0 g^j`, `j < count`, in counting form.
pub fn a_grid(f: &QRMap, k: &KaplanNorm, quad: &SphereQuadrature, r0: f64, g: f64, count: usize) -> Result<ASamples> {
    if !(r0 > 0.0 && g > 1.0) {
        return Err(Error::InvalidArgument(format!("grid needs r0 > 0 and ratio > 1, got {r0}, {g}")));
    }
    let r: Vec<f64> = (0..count).map(|j| r0 * g.powi(j as i32)).collect();
    let mut a = Vec::with_capacity(count);
    for &x in &r {
        a.push(a_counting(f, k, quad, x)?);
    }
    ASamples::new(r, a)
}

/// `c0 = (2Q/π) ∫_0^∞ |ln s|^{Q-1} s^{Q-1}/(1+s^{2Q}) ds = (2Q/π) ∫_0^∞ u^{Q-1}/cosh(Qu) du`.
pub fn sandwich_c0(q: f64) -> f64 {
    let b = 50.0 / q;
    let integral: f64 = radial_rule(b, 48).iter().map(|&(u, w)| w * u.powf(q - 1.0) / (q * u).cosh()).sum();
    2.0 * q / PI * integral
}

/// `c1 = 2^{Q-2}`.
pub fn sandwich_c1(q: f64) -> f64 {
    2f64.powf(q - 2.0)
}

/// `ν(ϱ,t) ≥ ν(r,s) − K_I |ln t/s|^{Q-1} (ln ϱ/r)^{1-Q}` on spheres about `w`.
#[derive(Debug, Clone, Serialize)]
pub struct TransferCheck {
    pub r: f64,
    pub rho: f64,
    pub s: f64,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub allowance: f64,
    pub margin: f64,
    pub holds: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn transfer_check(
    f: &QRMap,
    k: &KaplanNorm,
    quad: &SphereQuadrature,
    w: &GroupPoint,
    r: f64,
    rho: f64,
    s: f64,
    t: f64,
    k_inner: f64,
) -> Result<TransferCheck> {
    if !(r > 0.0 && rho > r) {
        return Err(Error::InvalidArgument(format!("need ϱ > r > 0, got r = {r}, ϱ = {rho}")));
    }
    if !(s > 0.0 && t > 0.0) {
        return Err(Error::InvalidArgument(format!("sphere radii must be positive, got {s}, {t}")));
    }
    let q = k.qf();
    let big = nu_average(f, k, quad, rho, &Sphere::new(w.clone(), t)?)?;
    let small = nu_average(f, k, quad, r, &Sphere::new(w.clone(), s)?)?;
    let rhs = small.value - k_inner * (t / s).ln().abs().powf(q - 1.0) * (rho / r).ln().powf(1.0 - q);
    let allowance = 3.0 * big.std_error.hypot(small.std_error);
    let margin = big.value - rhs;
    Ok(TransferCheck { r, rho, s, t, lhs: big.value, rhs, allowance, margin, holds: margin >= -allowance - 1e-12 })
}

/// `ν(r/θ, Y) − slack ≤ A(r) ≤ ν(θr, Y) + slack`.
#[derive(Debug, Clone, Serialize)]
pub struct SandwichCheck {
    pub r: f64,
    pub theta: f64,
    pub sphere_radius: f64,
    pub a: f64,
    pub nu_inner: f64,
    pub nu_outer: f64,
    pub slack: f64,
    pub c0: f64,
    pub c1: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
}

pub fn sandwich_check(
    f: &QRMap,
    k: &KaplanNorm,
    quad: &SphereQuadrature,
    r: f64,
    theta: f64,
    sphere: &Sphere,
    k_inner: f64,
) -> Result<SandwichCheck> {
    if !(theta > 1.0) {
        return Err(Error::InvalidArgument(format!("θ must exceed 1, got {theta}")));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("r must be positive, got {r}")));
    }
    let q = k.qf();
    let (c0, c1) = (sandwich_c0(q), sandwich_c1(q));
    let slack = c1 * k_inner * (sphere.radius.ln().abs().powf(q - 1.0) + c0) / theta.ln().powf(q - 1.0);
    let a = a_counting(f, k, quad, r)?;
    let lo = nu_average(f, k, quad, r / theta, sphere)?;
    let hi = nu_average(f, k, quad, theta * r, sphere)?;
    let noise = 3.0 * lo.std_error.max(hi.std_error);
    Ok(SandwichCheck {
        r,
        theta,
        sphere_radius: sphere.radius,
        a,
        nu_inner: lo.value,
        nu_outer: hi.value,
        slack,
        c0,
        c1,
        lower_holds: lo.value - slack <= a + noise,
        upper_holds: a <= hi.value + slack + noise,
    })
}

/// Target value of the counting function; `Infinity` is the point at infinity.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Finite(GroupPoint),
    Infinity,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetDefect {
    pub target: Target,
    /// `n(r, a_j)`.
    pub count: u32,
    /// `(1 − n(r,a_j)/ν(r,1))₊`.
    pub defect: f64,
    /// `1 − n(s′,a_j)/ν(s,σ_M)` with `s′ = r`.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DefectReport {
    pub map: String,
    pub r: f64,
    /// Inner radius `s` with `s + s/(ε₀ A(s)^{1/(Q-1)}) = r`; absent when `r`
    /// is too small for the relation to have a solution.
    pub s: Option<f64>,
    pub eps0: f64,
    pub nu_unit: f64,
    pub nu_sigma_m: Option<f64>,
    pub sigma_big: f64,
    /// `¼` of the least distance between finite targets, when there are two.
    pub sigma_small: Option<f64>,
    pub varsigma0: Option<f64>,
    pub targets: Vec<TargetDefect>,
    pub defect_sum: f64,
    pub delta_sum: Option<f64>,
}

/// Largest `s` with `s + s/(ε₀ A(s)^{1/(Q-1)}) = s′`.
pub fn inner_radius<F: Fn(f64) -> f64>(a: F, s_prime: f64, eps0: f64, q: f64) -> Result<f64> {
    let g = |s: f64| {
        let av = a(s);
        if av > 0.0 {
            s + s / (eps0 * av.powf(1.0 / (q - 1.0)))
        } else {
            f64::INFINITY
        }
    };
    // g blows up at both ends of (0, s′] when A ~ r^Q near 0; take the largest root
    if !(g(s_prime) > s_prime) {
        return Err(Error::InvalidArgument(format!("no inner radius for s′ = {s_prime}")));
    }
    let mut lo = s_prime;
    let mut hi = s_prime;
    while !(g(lo) < s_prime) {
        hi = lo;
        lo *= 0.5;
        if lo < 1e-12 * s_prime {
            return Err(Error::InvalidArgument(format!("A is too small below s′ = {s_prime}")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < s_prime {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(lo)
}

pub fn defect_report(f: &QRMap, k: &KaplanNorm, quad: &SphereQuadrature, r: f64, targets: &[Target]) -> Result<DefectReport> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("r must be positive, got {r}")));
    }
    let alg = k.alg();
    let finite: Vec<&GroupPoint> = targets
        .iter()
        .filter_map(|t| match t {
            Target::Finite(p) => Some(p),
            Target::Infinity => None,
        })
        .collect();
    for p in &finite {
        p.check(alg)?;
    }
    if targets.len() - finite.len() > 1 {
        return Err(Error::InvalidArgument("duplicate target ∞".into()));
    }
    let mut least: Option<f64> = None;
    for (i, a) in finite.iter().enumerate() {
        for b in &finite[i + 1..] {
            let d = k.distance(a, b);
            if d <= 1e-12 {
                return Err(Error::InvalidArgument(format!("duplicate targets at distance {d:e}")));
            }
            least = Some(least.map_or(d, |l: f64| l.min(d)));
        }
    }
    let q = k.qf();
    let sigma_big = 4.0 * finite.iter().map(|p| k.norm(p)).fold(1.0, f64::max);
    let sigma_small = least.map(|d| 0.25 * d);
    let eps0 = (0.2f64).min(1.0 / (8.0 * finite.len() as f64 + 9.0));
    let s = inner_radius(|x| a_counting(f, k, quad, x).unwrap_or(0.0), r, eps0, q).ok();
    let nu_unit = nu_average(f, k, quad, r, &Sphere::about_origin(k, 1.0)?)?.value;
    let nu_sigma_m = match s {
        Some(s) => Some(nu_average(f, k, quad, s, &Sphere::about_origin(k, sigma_big)?)?.value),
        None => None,
    };
    let mut rows = Vec::with_capacity(targets.len());
    for t in targets {
        let count = match t {
            Target::Finite(p) => f.counting_n(k, r, p)?,
            Target::Infinity => 0,
        };
        let defect = if nu_unit > 0.0 { (1.0 - count as f64 / nu_unit).max(0.0) } else { 1.0 };
        let delta = nu_sigma_m.map(|v| if v > 0.0 { 1.0 - count as f64 / v } else { 1.0 });
        rows.push(TargetDefect { target: t.clone(), count, defect, delta });
    }
    Ok(DefectReport {
        map: f.descriptor().to_string(),
        r,
        s,
        eps0,
        nu_unit,
        nu_sigma_m,
        sigma_big,
        sigma_small,
        varsigma0: sigma_small.map(|v| 0.25 * v),
        defect_sum: rows.iter().map(|t| t.defect).sum(),
        delta_sum: rows.iter().map(|t| t.delta).sum(),
        targets: rows,
    })
}

fn csv<'a, I: IntoIterator<Item = (f64, f64)>>(header: &str, rows: I) -> String {
    let mut out = format!("{header}\n");
    for (a, b) in rows {
        let _ = writeln!(out, "{a:.16e},{b:.16e}");
    }
    out
}

/// `r,A` rows.
pub fn a_csv(samples: &ASamples) -> String {
    csv("r,A", samples.r.iter().copied().zip(samples.a.iter().copied()))
}

/// `r,nu` rows.
pub fn nu_csv(rows: &[(f64, f64)]) -> String {
    csv("r,nu", rows.iter().copied())
}

/// `j,defect` rows.
pub fn defects_csv(report: &DefectReport) -> String {
    let mut out = String::from("j,defect\n");
    for (j, t) in report.targets.iter().enumerate() {
        let _ = writeln!(out, "{j},{:.16e}", t.defect);
    }
    out
}
