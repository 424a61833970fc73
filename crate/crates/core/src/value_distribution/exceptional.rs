//! Exceptional radii of finite logarithmic measure.
//!
//! Per tier `m ≥ 2`: `φ(r) = m⁻² A(r)^{1/(Q-1)}`,
//! `F_m = {r > r₀″ : A(r + 2r/φ(r)) > m/(m−1) A(r)}`, the chain
//! `r_k = inf F_m ∩ (r″_{k−1}, ∞)`, `r″_k = r_k + 2r_k/φ(r_k)`,
//! `ρ_k = r″_k + 2r″_k/φ(r_k)`, `H_m = ∪ [r_k, ρ_k]`, and `E_m = H_m ∩ [d_m, ∞)`
//! with `d_m ≥ 3r₀″(m)` increasing and `∫_{E_m} dr/r < 2^{−m}`.

use super::{inner_radius, nu_average, sandwich_c0, sandwich_c1, Sphere};
use crate::error::{Error, Result};
use crate::maps::QRMap;
use crate::norm::KaplanNorm;
use crate::quadrature::SphereQuadrature;
use crate::sampling;
use rand::Rng;
use serde::Serialize;

/// Nondecreasing samples of `A` on increasing radii, interpolated linearly in
/// `ln r` and held constant outside the sampled range.
#[derive(Debug, Clone, Serialize)]
pub struct ASamples {
    pub r: Vec<f64>,
    pub a: Vec<f64>,
}

impl ASamples {
    pub fn new(r: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if r.len() != a.len() || r.len() < 2 {
            return Err(Error::InvalidArgument("need at least two (r, A) samples of equal length".into()));
        }
        if r.windows(2).any(|w| !(w[1] > w[0])) || r[0] <= 0.0 {
            return Err(Error::InvalidArgument("sample radii must be positive and increasing".into()));
        }
        // counting-form samples are exact up to rounding; anything larger is a real decrease
        if a.windows(2).any(|w| w[1] < w[0] - 1e-12 * w[0].abs().max(1.0)) {
            return Err(Error::InvalidArgument("A samples must be nondecreasing".into()));
        }
        if !(a[a.len() - 1] > 0.0) {
            return Err(Error::InvalidArgument("A is not eventually positive".into()));
        }
        Ok(Self { r, a })
    }

    pub fn r_max(&self) -> f64 {
        self.r[self.r.len() - 1]
    }

    pub fn eval(&self, r: f64) -> f64 {
        let n = self.r.len();
        if r <= self.r[0] {
            return self.a[0];
        }
        if r >= self.r[n - 1] {
            return self.a[n - 1];
        }
        let j = self.r.partition_point(|&x| x <= r);
        let (r0, r1) = (self.r[j - 1], self.r[j]);
        let u = (r / r0).ln() / (r1 / r0).ln();
        self.a[j - 1] + u * (self.a[j] - self.a[j - 1])
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExceptionalParams {
    pub eps0: f64,
    pub q: f64,
    pub k_inner: f64,
    /// Largest `|ln t|` in the ω-table.
    pub tau_max: f64,
    pub tau_step: f64,
    /// Grid points per sample interval when scanning for `F_m`.
    pub refine: usize,
}

impl ExceptionalParams {
    pub fn new(eps0: f64, q: f64, k_inner: f64) -> Self {
        Self { eps0, q, k_inner, tau_max: 1.0, tau_step: 0.25, refine: 8 }
    }

    /// Least `m ≥ 4` with `m²/(m−1)² < 1 + ε₀/2` and `c₁K_I(τ^{Q−1} + c₀) ≤ m/2^{Q−1}`.
    pub fn tier_for(&self, tau: f64) -> usize {
        let (c0, c1) = (sandwich_c0(self.q), sandwich_c1(self.q));
        let need = c1 * self.k_inner * (tau.powf(self.q - 1.0) + c0) * 2f64.powf(self.q - 1.0);
        let mut m = (need.ceil() as usize).max(4);
        while (m * m) as f64 / ((m - 1) * (m - 1)) as f64 >= 1.0 + self.eps0 / 2.0 {
            m += 1;
        }
        m
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Tier {
    pub m: usize,
    pub r0: f64,
    /// `φ(r₀″) ≥ 1` was attainable on the sampled range.
    pub phi_reaches_one: bool,
    /// `[r_k, ρ_k]`.
    pub h: Vec<(f64, f64)>,
    pub h_log_measure: f64,
    /// `8m²/A(r₁)^{1/(Q−1)} Σ_k ((m−1)/m)^{k/(Q−1)}`.
    pub h_bound: f64,
    pub d: f64,
    pub e: Vec<(f64, f64)>,
    pub e_log_measure: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExceptionalSet {
    pub params: ExceptionalParams,
    pub tiers: Vec<Tier>,
    /// Merged `∪ E_m` over the computed tiers.
    pub intervals: Vec<(f64, f64)>,
    pub log_measure: f64,
    /// `log_measure + 2^{−m_max}`: covers every tier beyond the last computed one.
    pub log_measure_bound: f64,
    /// `(τ, m(τ), ω(τ))`.
    pub omega: Vec<(f64, usize, f64)>,
    pub d_eps0: f64,
    /// `A(D_{ε₀}) > ε₀^{1−Q}`.
    pub d_condition_holds: bool,
    /// Some construction step read `A` beyond the last sample.
    pub beyond_grid: bool,
}

impl ExceptionalSet {
    pub fn contains(&self, r: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| r >= a && r <= b)
    }

    /// `ω(τ) = d_{m(τ)}` when that tier was computed.
    pub fn omega_at(&self, tau: f64) -> Option<f64> {
        let m = self.params.tier_for(tau);
        self.tiers.iter().find(|t| t.m == m).map(|t| t.d)
    }
}

fn merge(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn log_measure(iv: &[(f64, f64)]) -> f64 {
    iv.iter().map(|&(a, b)| (b / a).ln()).sum()
}

struct TierBuilder<'a> {
    a: &'a ASamples,
    q: f64,
    m: f64,
    grid: Vec<f64>,
    beyond: bool,
}

impl TierBuilder<'_> {
    fn phi(&self, r: f64) -> f64 {
        self.a.eval(r).powf(1.0 / (self.q - 1.0)) / (self.m * self.m)
    }

    fn in_f(&mut self, r: f64) -> bool {
        let p = self.phi(r);
        if !(p > 0.0) {
            return false;
        }
        let far = r + 2.0 * r / p;
        if far > self.a.r_max() {
            self.beyond = true;
        }
        self.a.eval(far) > self.m / (self.m - 1.0) * self.a.eval(r)
    }

    /// `inf F_m ∩ (lo, ∞)` on the scan grid, refined by bisection.
    fn next_in_f(&mut self, lo: f64) -> Option<f64> {
        if self.in_f(lo * (1.0 + 1e-12)) {
            return Some(lo);
        }
        let start = self.grid.partition_point(|&x| x <= lo);
        let hit = (start..self.grid.len()).find(|&j| {
            let r = self.grid[j];
            self.in_f(r)
        })?;
        let (mut a, mut b) = (if hit == start { lo } else { self.grid[hit - 1] }, self.grid[hit]);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if self.in_f(mid) {
                b = mid;
            } else {
                a = mid;
            }
        }
        Some(b)
    }

    fn build(&mut self, m: usize, d_prev: f64) -> Tier {
        let q = self.q;
        let first_positive = self.a.r.iter().zip(&self.a.a).find(|(_, a)| **a > 0.0).map(|(r, _)| *r).unwrap_or(1.0);
        let reach = self.a.r.iter().copied().find(|&r| r >= 1.0 && self.phi(r) >= 1.0);
        let r0 = reach.unwrap_or(first_positive.max(1.0));
        let mut h = Vec::new();
        let mut a_r1 = None;
        let mut prev = r0;
        while let Some(rk) = self.next_in_f(prev) {
            if rk >= self.a.r_max() {
                break;
            }
            let p = self.phi(rk);
            let rpp = rk + 2.0 * rk / p;
            let rho = rpp + 2.0 * rpp / p;
            a_r1.get_or_insert(self.a.eval(rk));
            h.push((rk, rho));
            prev = rpp;
        }
        if h.last().is_some_and(|&(_, rho)| rho > self.a.r_max()) {
            self.beyond = true;
        }
        let merged = merge(h.clone());
        let x = ((m as f64 - 1.0) / m as f64).powf(1.0 / (q - 1.0));
        let h_bound = match a_r1 {
            Some(a1) => 8.0 * (m * m) as f64 / a1.powf(1.0 / (q - 1.0)) * x / (1.0 - x),
            None => 0.0,
        };
        // least d with ∫_{H_m ∩ [d,∞)} dr/r < 2^{−m}
        let target = 2f64.powi(-(m as i32));
        let mut tail = 0.0;
        let mut cut = 0.0;
        for &(lo, hi) in merged.iter().rev() {
            let piece = (hi / lo).ln();
            if tail + piece < target {
                tail += piece;
            } else {
                cut = hi * (tail - target).exp() * (1.0 + 1e-9);
                break;
            }
        }
        let d = (3.0 * r0).max(d_prev * (1.0 + 1e-9)).max(cut);
        let e: Vec<(f64, f64)> = merged.iter().filter(|&&(_, hi)| hi > d).map(|&(lo, hi)| (lo.max(d), hi)).collect();
        Tier {
            m,
            r0,
            phi_reaches_one: reach.is_some(),
            h_log_measure: log_measure(&merged),
            h,
            h_bound,
            d,
            e_log_measure: log_measure(&e),
            e,
        }
    }
}

/// Builds tiers `2..=m(τ_max)`, the set `E`, and the ω-table.
pub fn exceptional_set(a: &ASamples, params: ExceptionalParams) -> Result<ExceptionalSet> {
    let ExceptionalParams { eps0, q, .. } = params;
    if !(eps0 > 0.0 && eps0 < 0.2) {
        return Err(Error::InvalidArgument(format!("ε₀ must lie in (0, 1/5), got {eps0}")));
    }
    if !(q > 1.0) || params.refine == 0 || !(params.tau_step > 0.0) || !(params.tau_max >= 0.0) {
        return Err(Error::InvalidArgument("invalid exceptional-set parameters".into()));
    }
    let mut grid = Vec::with_capacity(a.r.len() * params.refine);
    for w in a.r.windows(2) {
        for i in 0..params.refine {
            grid.push(w[0] * (w[1] / w[0]).powf(i as f64 / params.refine as f64));
        }
    }
    grid.push(a.r_max());
    let taus: Vec<f64> = (0..)
        .map(|i| i as f64 * params.tau_step)
        .take_while(|t| *t <= params.tau_max + 1e-12)
        .collect();
    let m_eps = (4usize..).find(|&m| 2.0 / ((m * m) as f64) < eps0).unwrap_or(4);
    let m_zero = params.tier_for(0.0).max(m_eps);
    let m_max = taus.iter().map(|&t| params.tier_for(t)).max().unwrap_or(4).max(m_zero);
    let mut b = TierBuilder { a, q, m: 2.0, grid, beyond: false };
    let mut tiers = Vec::with_capacity(m_max - 1);
    let mut d_prev = 0.0;
    for m in 2..=m_max {
        b.m = m as f64;
        let tier = b.build(m, d_prev);
        d_prev = tier.d;
        tiers.push(tier);
    }
    let intervals = merge(tiers.iter().flat_map(|t| t.e.iter().copied()).collect());
    let lm = log_measure(&intervals);
    let omega = taus
        .iter()
        .map(|&t| {
            let m = params.tier_for(t);
            (t, m, tiers[m - 2].d)
        })
        .collect();
    let d_eps0 = tiers[m_zero - 2].d;
    Ok(ExceptionalSet {
        params,
        log_measure: lm,
        log_measure_bound: lm + 2f64.powi(-(m_max as i32)),
        intervals,
        tiers,
        omega,
        d_eps0,
        d_condition_holds: a.eval(d_eps0) > eps0.powf(1.0 - q),
        beyond_grid: b.beyond,
    })
}

/// Fractions of sampled `s′ ≥ ω(|ln t|)`, `s′ ∉ E`, at which
/// `|ν(s,Y)/A(s′) − 1| < ε₀` and `ν(s,Y)/ν(s′,Y) > 1 − ε₀` hold.
#[derive(Debug, Clone, Serialize)]
pub struct ExceptionalCheck {
    pub points: usize,
    pub skipped_in_e: usize,
    pub skipped_spheres: usize,
    pub held_near_a: usize,
    pub held_stable: usize,
    pub fraction_near_a: f64,
    pub fraction_stable: f64,
    /// Largest `|ν(s,Y)/A(s′) − 1|`.
    pub worst_deviation: f64,
    /// Smallest `ν(s,Y)/ν(s′,Y)`.
    pub worst_ratio: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn exceptional_checks(
    f: &QRMap,
    k: &KaplanNorm,
    quad: &SphereQuadrature,
    set: &ExceptionalSet,
    a: &ASamples,
    spheres: &[Sphere],
    per_sphere: usize,
    seed: u64,
) -> Result<ExceptionalCheck> {
    let (eps0, q) = (set.params.eps0, set.params.q);
    let mut rng = sampling::rng(seed, 0x4578);
    let mut out = ExceptionalCheck {
        points: 0,
        skipped_in_e: 0,
        skipped_spheres: 0,
        held_near_a: 0,
        held_stable: 0,
        fraction_near_a: 0.0,
        fraction_stable: 0.0,
        worst_deviation: 0.0,
        worst_ratio: f64::INFINITY,
    };
    for sph in spheres {
        let Some(lo) = set.omega_at(sph.radius.ln().abs()) else {
            out.skipped_spheres += 1;
            continue;
        };
        for _ in 0..per_sphere {
            let sp = lo * 10f64.powf(rng.random_range(0.0..3.0));
            if set.contains(sp) {
                out.skipped_in_e += 1;
                continue;
            }
            let s = inner_radius(|x| a.eval(x), sp, eps0, q)?;
            let nu_s = nu_average(f, k, quad, s, sph)?.value;
            let nu_sp = nu_average(f, k, quad, sp, sph)?.value;
            let a_sp = super::a_counting(f, k, quad, sp)?;
            let dev = (nu_s / a_sp - 1.0).abs();
            let ratio = if nu_sp > 0.0 { nu_s / nu_sp } else { 0.0 };
            out.points += 1;
            out.worst_deviation = out.worst_deviation.max(dev);
            out.worst_ratio = out.worst_ratio.min(ratio);
            if dev < eps0 {
                out.held_near_a += 1;
            }
            if ratio > 1.0 - eps0 {
                out.held_stable += 1;
            }
        }
    }
    if out.points > 0 {
        out.fraction_near_a = out.held_near_a as f64 / out.points as f64;
        out.fraction_stable = out.held_stable as f64 / out.points as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(value: f64) -> ASamples {
        let r: Vec<f64> = (0..40).map(|j| 2f64.powi(j)).collect();
        let a = vec![value; r.len()];
        ASamples::new(r, a).unwrap()
    }

    #[test]
    fn flat_a_gives_empty_set() {
        let e = exceptional_set(&flat(5.0), ExceptionalParams::new(0.1, 4.0, 1.0)).unwrap();
        assert!(e.intervals.is_empty());
        assert_eq!(e.log_measure, 0.0);
        assert!(e.tiers.iter().all(|t| t.h.is_empty()));
    }

    #[test]
    fn eps0_out_of_range_rejected() {
        assert!(exceptional_set(&flat(5.0), ExceptionalParams::new(0.3, 4.0, 1.0)).is_err());
        assert!(exceptional_set(&flat(5.0), ExceptionalParams::new(0.0, 4.0, 1.0)).is_err());
    }

    #[test]
    fn nonmonotone_or_zero_samples_rejected() {
        assert!(ASamples::new(vec![1.0, 2.0], vec![2.0, 1.0]).is_err());
        assert!(ASamples::new(vec![1.0, 2.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn step_in_a_creates_interval() {
        // A jumps from 1 to 4 between r = 1e3 and 2e3
        let r: Vec<f64> = (0..60).map(|j| 2f64.powi(j)).collect();
        let a = r.iter().map(|&x| if x < 1.5e3 { 1.0 } else { 4.0 }).collect();
        let s = ASamples::new(r, a).unwrap();
        let e = exceptional_set(&s, ExceptionalParams::new(0.1, 4.0, 1.0)).unwrap();
        let t2 = &e.tiers[0];
        assert_eq!(t2.m, 2);
        assert!(!t2.h.is_empty());
        // the interval chain starts before the jump
        assert!(t2.h[0].0 < 1.5e3);
        assert!(t2.h_log_measure <= t2.h_bound * (1.0 + 1e-12));
        for t in &e.tiers {
            assert!(t.e_log_measure < 2f64.powi(-(t.m as i32)));
            assert!(t.d >= 3.0 * t.r0);
        }
        assert!(e.tiers.windows(2).all(|w| w[1].d > w[0].d));
    }

    #[test]
    fn tier_for_grows_with_tau() {
        let p = ExceptionalParams::new(0.1, 4.0, 4.0);
        assert!(p.tier_for(1.0) > p.tier_for(0.0));
        assert!(p.tier_for(0.0) >= 4);
    }
}
