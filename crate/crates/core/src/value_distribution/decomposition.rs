//! Ring decomposition of `B(0, s)` into finitely overlapping balls.
//!
//! With `d = s′ − s`, `R_0 = B̄(0,s) ∖ B(0,s−d)` and
//! `R_n = B̄(0,s−2^{n−1}d) ∖ B(0,s−2^n d)` up to the first `L` with
//! `s − 2^L d ≤ 2^L d`; the core `B(0, s−2^L d)` is covered separately. Ring `n`
//! uses radius `2^{n−2}d/(100ϖϰ)` (`d/(100ϖϰ)` for `R_0`, `2^{L−1}d/(100ϖϰ)` for
//! the core). Centres are the points of the dilated lattice
//! `δ_ε ℤ³ = {(εa, εb, ε²c)}` lying in the ring, with `ε = r/(4ρ)` and `ρ` the
//! covering radius of `ℤ³`, so every ring point is within `r/4` of a lattice point.
//! Lattice points are counted exactly column by column: for fixed `(a, b)` the
//! admissible `c` form at most two intervals.

use crate::error::{Error, Result};
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use crate::sampling;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecompositionParams {
    pub s: f64,
    pub s_prime: f64,
    /// Triangle constant `ϖ ≥ 1`.
    pub varpi: f64,
    /// Overlap multiplicity `M` of each ring cover.
    pub wiener_m: f64,
    pub k_outer: f64,
    pub k_inner: f64,
    pub c_q: f64,
    /// `κ(𝔾, Q)`.
    pub kappa: f64,
    pub cover_points: usize,
    pub multiplicity_points: usize,
    pub seed: u64,
    /// Largest number of lattice columns counted exactly per ring.
    pub exact_columns: f64,
}

impl DecompositionParams {
    pub fn new(s: f64, s_prime: f64, kappa: f64, c_q: f64) -> Self {
        Self {
            s,
            s_prime,
            varpi: 1.0,
            wiener_m: 1.0,
            k_outer: 1.0,
            k_inner: 1.0,
            c_q,
            kappa,
            cover_points: 10_000,
            multiplicity_points: 64,
            seed: 0,
            exact_columns: 4e7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RingCover {
    /// Ring index; the core is `L + 1`.
    pub index: usize,
    pub core: bool,
    pub inner: f64,
    pub outer: f64,
    pub radius: f64,
    pub lattice_step: f64,
    pub balls: f64,
    /// `balls` is an exact lattice count rather than volume over covolume.
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub s: f64,
    pub s_prime: f64,
    pub d: f64,
    pub levels: usize,
    pub theta: f64,
    pub varkappa: f64,
    pub varpi: f64,
    pub wiener_m: f64,
    pub rings: Vec<RingCover>,
    /// Radii of `U, V, W, X, Y, Z` as multiples of `r_i`.
    pub chain: [f64; 6],
    pub ball_count: f64,
    pub all_counts_exact: bool,
    /// `p / (s/d)^{Q−1}`.
    pub c3: f64,
    pub cover_points: usize,
    pub uncovered: usize,
    pub u_multiplicity_max: usize,
    pub z_multiplicity_max: usize,
    /// `max(wiener_m, u_multiplicity_max)`.
    pub m_effective: f64,
    /// `(40ϰϖ)^Q M` with `M = m_effective`.
    pub z_bound: f64,
    pub z_bound_holds: bool,
    /// Every `Z_i` lies in `B̄(0, s′)` by the triangle inequality.
    pub z_inside: bool,
}

struct Lattice<'a> {
    k: &'a KaplanNorm,
    g: f64,
}

impl Lattice<'_> {
    fn point(&self, eps: f64, a: i64, b: i64, c: i64) -> GroupPoint {
        GroupPoint::h1(eps * a as f64, eps * b as f64, eps * eps * c as f64)
    }

    /// `|c|` range `[lo, hi]` (reals) keeping `(εa, εb, ε²c)` in `lo ≤ N ≤ hi`.
    fn ring_c(&self, eps: f64, a: i64, b: i64, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let h2 = eps * eps * ((a * a + b * b) as f64);
        let h4 = h2 * h2;
        let top = hi.powi(4) - h4;
        if top < 0.0 {
            return None;
        }
        let e4 = eps.powi(4);
        let cmax = (top / (self.g * e4)).sqrt();
        let cmin = ((lo.powi(4) - h4).max(0.0) / (self.g * e4)).sqrt();
        Some((cmin, cmax))
    }
}

/// Integers in `[a, b]`.
fn ints(a: f64, b: f64) -> i64 {
    if b < a {
        return 0;
    }
    ((b.floor() - a.ceil()) as i64 + 1).max(0)
}

/// Integers `c` in `[x0, x1]` with `cmin ≤ |c| ≤ cmax`.
fn count_c(x0: f64, x1: f64, cmin: f64, cmax: f64) -> i64 {
    ints(x0.max(cmin), x1.min(cmax)) + ints(x0.max(-cmax), x1.min(-cmin)) - if cmin <= 0.0 && x0 <= 0.0 && x1 >= 0.0 { 1 } else { 0 }
}

fn validate(k: &KaplanNorm, p: &DecompositionParams) -> Result<()> {
    if k.alg().n1() != 2 || k.alg().n2() != 1 {
        return Err(Error::InvalidArgument("ball decomposition supports 3-dimensional groups only".into()));
    }
    if !(p.s > 0.0 && p.s.is_finite()) {
        return Err(Error::InvalidArgument(format!("s must be positive, got {}", p.s)));
    }
    if !(p.s_prime > p.s) || !p.s_prime.is_finite() || (p.s_prime - p.s) <= 1e-12 * p.s {
        return Err(Error::Degenerate(format!("ring width s′ − s is not positive ({} − {})", p.s_prime, p.s)));
    }
    if !(p.c_q > 0.0 && p.kappa > 0.0 && p.varpi >= 1.0 && p.wiener_m >= 1.0 && p.k_outer >= 1.0 && p.k_inner >= 1.0) {
        return Err(Error::InvalidArgument("need c(Q), κ > 0 and ϖ, M, K_O, K_I ≥ 1".into()));
    }
    Ok(())
}

pub fn ball_decomposition(k: &KaplanNorm, p: &DecompositionParams) -> Result<DecompositionReport> {
    validate(k, p)?;
    let q = k.qf();
    let s = p.s;
    let d = p.s_prime - p.s;
    let theta = 2.0 * ((p.kappa * p.k_outer * p.k_inner / (p.c_q * (1.2f64).ln())).powf(1.0 / (q - 1.0))).exp();
    let varkappa = 3.0 * theta;
    let unit = d / (100.0 * p.varpi * varkappa);
    let mut levels = 0usize;
    while s - 2f64.powi(levels as i32) * d > 2f64.powi(levels as i32) * d {
        levels += 1;
    }
    let g = k.centre_quad(&[1.0]);
    let rho = (0.25 + 0.25 * g).powf(0.25);
    let lat = Lattice { k, g };
    let mut rings = Vec::new();
    let mut push = |index: usize, core: bool, inner: f64, outer: f64, radius: f64| {
        rings.push(RingCover { index, core, inner, outer, radius, lattice_step: radius / (4.0 * rho), balls: 0.0, exact: false });
    };
    push(0, false, (s - d).max(0.0), s, unit);
    for n in 1..=levels {
        let n2 = 2f64.powi(n as i32);
        push(n, false, (s - n2 * d).max(0.0), s - 0.5 * n2 * d, 0.25 * n2 * unit);
    }
    let core_r = s - 2f64.powi(levels as i32) * d;
    if core_r > 0.0 {
        push(levels + 1, true, 0.0, core_r, 0.5 * 2f64.powi(levels as i32) * unit);
    }
    for ring in rings.iter_mut() {
        let eps = ring.lattice_step;
        let span = (ring.outer / eps).floor() as i64;
        let columns = std::f64::consts::PI * (span as f64 + 1.0).powi(2);
        if columns <= p.exact_columns {
            let total: i64 = (-span..=span)
                .into_par_iter()
                .map(|a| {
                    let mut acc = 0i64;
                    for b in -span..=span {
                        if let Some((cmin, cmax)) = lat.ring_c(eps, a, b, ring.inner, ring.outer) {
                            acc += count_c(f64::NEG_INFINITY, f64::INFINITY, cmin, cmax);
                        }
                    }
                    acc
                })
                .sum();
            ring.balls = total as f64;
            ring.exact = true;
        } else {
            ring.balls = k.m0() * (ring.outer.powf(q) - ring.inner.powf(q)) / eps.powi(4);
        }
    }
    let ball_count: f64 = rings.iter().map(|r| r.balls).sum();
    let all_counts_exact = rings.iter().all(|r| r.exact);
    let z_inside = rings.iter().all(|r| r.outer + p.varpi * 4.0 * varkappa * r.radius <= p.s_prime * (1.0 + 1e-12));

    // cover: every sampled point of B(0,s) lies in some B(x_i, r_i)
    let bx = k.bounding_box(s);
    let draw = |seed: u64, stream: u64, n: usize, radius: f64| -> Vec<GroupPoint> {
        let b = k.bounding_box(radius);
        let mut rng = sampling::rng(seed, stream);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let x = GroupPoint::h1(rng.random_range(-b[0]..b[0]), rng.random_range(-b[1]..b[1]), rng.random_range(-b[2]..b[2]));
            if k.norm(&x) < radius {
                out.push(x);
            }
        }
        out
    };
    let _ = bx;
    let pts = draw(p.seed, 0x636f, p.cover_points, s);
    let u_counts: Vec<usize> = pts.par_iter().map(|x| near_count(&lat, &rings, x, 1.0, p.varpi, true)).collect();
    let uncovered = u_counts.iter().filter(|&&c| c == 0).count();
    let mpts = draw(p.seed, 0x7a6d, p.multiplicity_points, p.s_prime);
    let u_mult: Vec<usize> = pts.iter().take(p.multiplicity_points).map(|x| near_count(&lat, &rings, x, 1.0, p.varpi, false)).collect();
    let z_mult: Vec<usize> = mpts.iter().map(|x| near_count(&lat, &rings, x, 4.0 * varkappa, p.varpi, false)).collect();
    let z_multiplicity_max = z_mult.into_iter().max().unwrap_or(0);
    let u_multiplicity_max = u_mult.into_iter().max().unwrap_or(0);
    // the lattice cover overlaps more than a Wiener-type cover would, so the bound uses what was measured
    let m_eff = p.wiener_m.max(u_multiplicity_max as f64);
    let z_bound = (40.0 * varkappa * p.varpi).powf(q) * m_eff;
    Ok(DecompositionReport {
        s,
        s_prime: p.s_prime,
        d,
        levels,
        theta,
        varkappa,
        varpi: p.varpi,
        wiener_m: p.wiener_m,
        chain: [1.0, 2.0, 4.0, 6.0, 2.0 * varkappa, 4.0 * varkappa],
        ball_count,
        all_counts_exact,
        c3: ball_count / (s / d).powf(q - 1.0),
        cover_points: p.cover_points,
        uncovered,
        u_multiplicity_max,
        m_effective: m_eff,
        z_multiplicity_max,
        z_bound,
        z_bound_holds: z_multiplicity_max as f64 <= z_bound,
        z_inside,
        rings,
    })
}

/// Number of centres `x_i` with `N(x_i⁻¹ y) < factor·r_i` (or whether one exists
/// when `first_only`).
fn near_count(lat: &Lattice, rings: &[RingCover], y: &GroupPoint, factor: f64, varpi: f64, first_only: bool) -> usize {
    let alg = lat.k.alg();
    let ny = lat.k.norm(y);
    let bracket = alg.b(0, 1, 0);
    let mut total = 0usize;
    for ring in rings {
        let big = factor * ring.radius;
        if ny + varpi * big < ring.inner || ny > varpi * (ring.outer + big) {
            continue;
        }
        let eps = ring.lattice_step;
        let w = (big / eps).ceil() as i64 + 1;
        let (a0, b0) = ((y.v[0] / eps).round() as i64, (y.v[1] / eps).round() as i64);
        let big4 = big.powi(4);
        for a in a0 - w..=a0 + w {
            for b in b0 - w..=b0 + w {
                let (lx, ly) = (eps * a as f64, eps * b as f64);
                let (vx, vy) = (y.v[0] - lx, y.v[1] - ly);
                let h = (vx * vx + vy * vy).powi(2);
                if h >= big4 {
                    continue;
                }
                let Some((cmin, cmax)) = lat.ring_c(eps, a, b, ring.inner, ring.outer) else { continue };
                // t-part of ℓ⁻¹y is y_t − ε²c + ½ b₀₁ (−lx·y₁ + ly·y₀)
                let shift = y.z[0] + 0.5 * bracket * (-lx * y.v[1] + ly * y.v[0]);
                let half = ((big4 - h) / lat.g).sqrt();
                let e2 = eps * eps;
                let (x0, x1) = ((shift - half) / e2, (shift + half) / e2);
                let n = count_c(x0, x1, cmin, cmax);
                if n > 0 {
                    if first_only {
                        // confirm with the group law on one candidate
                        let c = ((shift / e2).round() as i64).clamp(x0.ceil() as i64, x1.floor() as i64);
                        let l = lat.point(eps, a, b, c);
                        let nl = lat.k.norm(&l);
                        if lat.k.norm(&group::rel(alg, &l, y)) < big && nl >= ring.inner && nl <= ring.outer {
                            return 1;
                        }
                        for c in x0.ceil() as i64..=x1.floor() as i64 {
                            let l = lat.point(eps, a, b, c);
                            let nl = lat.k.norm(&l);
                            if nl >= ring.inner && nl <= ring.outer && lat.k.norm(&group::rel(alg, &l, y)) < big {
                                return 1;
                            }
                        }
                    } else {
                        total += n as usize;
                    }
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::HTypeAlgebra;

    #[test]
    fn count_c_cases() {
        assert_eq!(count_c(f64::NEG_INFINITY, f64::INFINITY, 0.0, 2.5), 5);
        assert_eq!(count_c(f64::NEG_INFINITY, f64::INFINITY, 1.5, 3.0), 4);
        assert_eq!(count_c(-0.5, 10.0, 0.0, 2.0), 3);
        assert_eq!(count_c(-0.5, 0.5, 1.0, 2.0), 0);
    }

    #[test]
    fn exact_count_matches_brute_force() {
        let alg = HTypeAlgebra::heisenberg(1);
        let k = KaplanNorm::new(&alg);
        let lat = Lattice { k: &k, g: k.centre_quad(&[1.0]) };
        let (eps, lo, hi) = (0.13, 0.6, 1.0);
        let span = (hi / eps) as i64 + 1;
        let mut brute = 0;
        let mut fast = 0;
        for a in -span..=span {
            for b in -span..=span {
                for c in -4 * span * span..=4 * span * span {
                    let n = k.norm(&lat.point(eps, a, b, c));
                    if n >= lo && n <= hi {
                        brute += 1;
                    }
                }
                if let Some((cmin, cmax)) = lat.ring_c(eps, a, b, lo, hi) {
                    fast += count_c(f64::NEG_INFINITY, f64::INFINITY, cmin, cmax);
                }
            }
        }
        assert_eq!(brute, fast);
    }

    #[test]
    fn wide_ring_is_single_level() {
        let alg = HTypeAlgebra::heisenberg(1);
        let k = KaplanNorm::new(&alg);
        let mut p = DecompositionParams::new(1.0, 2.5, 2.0, 1e6);
        p.cover_points = 500;
        p.multiplicity_points = 4;
        let rep = ball_decomposition(&k, &p).unwrap();
        assert_eq!(rep.levels, 0);
        assert_eq!(rep.rings.len(), 1);
        assert_eq!(rep.rings[0].inner, 0.0);
        assert_eq!(rep.uncovered, 0);
        assert!(rep.z_inside && rep.z_bound_holds);
    }

    #[test]
    fn degenerate_width_rejected() {
        let alg = HTypeAlgebra::heisenberg(1);
        let k = KaplanNorm::new(&alg);
        assert!(ball_decomposition(&k, &DecompositionParams::new(1.0, 1.0, 2.0, 1.0)).is_err());
        assert!(ball_decomposition(&k, &DecompositionParams::new(1.0, 2.0, 2.0, 0.0)).is_err());
    }
}
