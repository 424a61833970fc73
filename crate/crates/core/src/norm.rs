//! Kaplan gauge, horizontal gradient, characteristic set and normalised Haar measure.

use crate::algebra::HTypeAlgebra;
use crate::error::{Error, Result};
use crate::group::{self, GroupPoint};
use crate::sampling;
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use statrs::function::{beta::beta, gamma::gamma};
use std::f64::consts::PI;

/// Homogeneous norm `N = (|v|⁴ + c zᵀĜz)^{1/4}` with `Ĝ = G·n2/tr G`.
#[derive(Debug, Clone)]
pub struct KaplanNorm {
    alg: HTypeAlgebra,
    c: f64,
    ghat: Vec<f64>,
    m0: f64,
}

/// Outcome of the harmonicity sweep over `c`.
#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub c: f64,
    pub c_analytic: f64,
    pub residual: f64,
    pub residual_minus10: f64,
    pub residual_plus10: f64,
    pub gap_ratio: f64,
}

impl KaplanNorm {
    /// Norm with the centre coefficient `c* = 16 tr(G)/n2` for which `N^{2-Q}`
    /// is annihilated by the sub-Laplacian away from 0 on H-type groups.
    pub fn new(alg: &HTypeAlgebra) -> Self {
        let c = Self::analytic_c(alg);
        Self::with_c(alg, c).expect("analytic c is positive")
    }

    pub fn with_c(alg: &HTypeAlgebra, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!("centre coefficient must be positive, got {c}")));
        }
        let n2 = alg.n2();
        let scale = n2 as f64 / alg.metric_trace();
        let ghat: Vec<f64> = alg.centre_metric().iter().map(|g| g * scale).collect();
        let det = DMatrix::from_row_slice(n2, n2, &ghat).determinant();
        if !(det > 0.0) {
            return Err(Error::InvalidAlgebra("centre metric is not positive definite".into()));
        }
        let n1 = alg.n1() as f64;
        let n2f = n2 as f64;
        let ball_n2 = PI.powf(n2f / 2.0) / gamma(n2f / 2.0 + 1.0);
        let sphere_n1 = 2.0 * PI.powf(n1 / 2.0) / gamma(n1 / 2.0);
        let radial = 0.25 * beta(n1 / 4.0, n2f / 2.0 + 1.0);
        let m0 = ball_n2 * c.powf(-n2f / 2.0) / det.sqrt() * sphere_n1 * radial;
        Ok(Self { alg: alg.clone(), c, ghat, m0 })
    }

    /// Runs [`calibrate_c`] and keeps the analytic coefficient once the sweep
    /// confirms it to relative accuracy 1e-3.
    pub fn calibrated(alg: &HTypeAlgebra) -> Result<(Self, Calibration)> {
        let trial = Self::new(alg);
        let cal = calibrate_c(&trial)?;
        if ((cal.c - cal.c_analytic) / cal.c_analytic).abs() > 1e-3 {
            return Err(Error::Calibration(format!(
                "swept c = {} disagrees with analytic {}",
                cal.c, cal.c_analytic
            )));
        }
        Ok((trial, cal))
    }

    pub fn analytic_c(alg: &HTypeAlgebra) -> f64 {
        16.0 * alg.metric_trace() / alg.n2() as f64
    }

    pub fn alg(&self) -> &HTypeAlgebra {
        &self.alg
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn q(&self) -> usize {
        self.alg.q()
    }
    pub fn qf(&self) -> f64 {
        self.alg.q() as f64
    }
    /// Raw coordinate volume of the unit ball.
    pub fn m0(&self) -> f64 {
        self.m0
    }
    /// True when the stored coefficient is the analytic one (closed-form flow valid).
    pub fn is_exact(&self) -> bool {
        (self.c / Self::analytic_c(&self.alg) - 1.0).abs() < 1e-12 && self.alg.is_htype()
    }

    /// `zᵀĜz`.
    #[inline]
    pub fn centre_quad(&self, z: &[f64]) -> f64 {
        let n2 = z.len();
        let mut s = 0.0;
        for i in 0..n2 {
            for j in 0..n2 {
                s += z[i] * self.ghat[i * n2 + j] * z[j];
            }
        }
        s
    }

    #[inline]
    pub fn norm4(&self, p: &GroupPoint) -> f64 {
        let r2: f64 = p.v.iter().map(|x| x * x).sum();
        r2 * r2 + self.c * self.centre_quad(&p.z)
    }

    #[inline]
    pub fn norm(&self, p: &GroupPoint) -> f64 {
        self.norm4(p).sqrt().sqrt()
    }

    /// `d(p, q) = N(p⁻¹ q)`.
    pub fn distance(&self, p: &GroupPoint, q: &GroupPoint) -> f64 {
        self.norm(&group::rel(&self.alg, p, q))
    }

    /// Largest sampled ratio `d(x,y) / (d(x,z) + d(z,y))`.
    pub fn triangle_constant(&self, samples: usize, seed: u64) -> f64 {
        let mut r = sampling::rng(seed, 0x7472);
        let draw = |r: &mut sampling::SeededRng| {
            let s = 2.0f64.powf(r.random_range(-3.0..3.0));
            let v = (0..self.alg.n1()).map(|_| sampling::normal(r)).collect();
            let z = (0..self.alg.n2()).map(|_| sampling::normal(r)).collect();
            let p = GroupPoint::new(v, z);
            let n = self.norm(&p).max(1e-300);
            group::dil(s / n, &p)
        };
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = draw(&mut r);
            let y = draw(&mut r);
            // z near the segment between x and y makes the ratio sharp
            let t: f64 = r.random();
            let mid = GroupPoint::new(
                x.v.iter().zip(&y.v).map(|(a, b)| a + t * (b - a)).collect(),
                x.z.iter().zip(&y.z).map(|(a, b)| a + t * (b - a)).collect(),
            );
            let z = if r.random::<bool>() { mid } else { draw(&mut r) };
            let den = self.distance(&x, &z) + self.distance(&z, &y);
            if den > 0.0 {
                worst = worst.max(self.distance(&x, &y) / den);
            }
        }
        worst
    }

    /// Horizontal gradient coefficients of `N⁴`.
    pub fn grad_n4(&self, p: &GroupPoint) -> Vec<f64> {
        let (n1, n2) = (self.alg.n1(), self.alg.n2());
        let r2: f64 = p.v.iter().map(|x| x * x).sum();
        let mut gz = vec![0.0; n2];
        for i in 0..n2 {
            for j in 0..n2 {
                gz[i] += self.ghat[i * n2 + j] * p.z[j];
            }
        }
        (0..n1)
            .map(|j| {
                let mut t = 0.0;
                for (m, g) in gz.iter().enumerate() {
                    if *g == 0.0 {
                        continue;
                    }
                    let br: f64 = (0..n1).map(|i| p.v[i] * self.alg.b(i, j, m)).sum();
                    t += g * br;
                }
                4.0 * r2 * p.v[j] + self.c * t
            })
            .collect()
    }

    /// `∇₀N` in the horizontal frame.
    pub fn horizontal_gradient(&self, p: &GroupPoint) -> Result<Vec<f64>> {
        let n = self.norm(p);
        if n == 0.0 {
            return Err(Error::Degenerate("gradient of the norm at the identity".into()));
        }
        let k = 1.0 / (4.0 * n * n * n);
        Ok(self.grad_n4(p).into_iter().map(|g| g * k).collect())
    }

    /// `υ(p) = |∇₀N(p)|₀`; homogeneous of degree 0.
    pub fn upsilon(&self, p: &GroupPoint) -> Result<f64> {
        let g = self.horizontal_gradient(p)?;
        Ok(g.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    pub fn is_characteristic(&self, p: &GroupPoint, tol: f64) -> Result<bool> {
        Ok(self.upsilon(p)? < tol)
    }

    /// Normalised measure of `B(x, r)`, i.e. `r^Q`.
    pub fn ball_volume(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be non-negative, got {r}")));
        }
        Ok(r.powi(self.q() as i32))
    }

    /// Monte Carlo estimate of the raw coordinate volume of `B(0, r)`.
    pub fn raw_ball_volume(&self, r: f64, samples: usize, seed: u64) -> f64 {
        let bx = self.bounding_box(r);
        let vol: f64 = bx.iter().map(|h| 2.0 * h).product();
        let mut rg = sampling::rng(seed, 0x6276);
        let mut hit = 0usize;
        let (n1, n2) = (self.alg.n1(), self.alg.n2());
        let mut p = GroupPoint::zero(&self.alg);
        for _ in 0..samples {
            for i in 0..n1 {
                p.v[i] = rg.random_range(-bx[i]..bx[i]);
            }
            for m in 0..n2 {
                p.z[m] = rg.random_range(-bx[n1 + m]..bx[n1 + m]);
            }
            if self.norm(&p) < r {
                hit += 1;
            }
        }
        vol * hit as f64 / samples as f64
    }

    /// Half-widths of a coordinate box containing `B(0, r)`.
    pub fn bounding_box(&self, r: f64) -> Vec<f64> {
        let n2 = self.alg.n2();
        let gm = DMatrix::from_row_slice(n2, n2, &self.ghat);
        let inv = gm.try_inverse().expect("Ĝ invertible");
        let mut out = vec![r; self.alg.n1()];
        for m in 0..n2 {
            out.push(r * r * (inv[(m, m)] / self.c).sqrt());
        }
        out
    }

    /// Projects a nonzero point onto the sphere `N = s` by dilation.
    pub fn to_level(&self, p: &GroupPoint, s: f64) -> GroupPoint {
        group::dil(s / self.norm(p), p)
    }
}

/// Sub-Laplacian residual of `N_c^{2-Q}` on a fixed point set, relative to the
/// size of the individual second derivatives.
pub fn harmonic_residual(k: &KaplanNorm, c: f64) -> f64 {
    let alg = k.alg();
    let kc = match KaplanNorm::with_c(alg, c) {
        Ok(kc) => kc,
        Err(_) => return f64::INFINITY,
    };
    let expo = 2.0 - k.qf();
    let u = |p: &GroupPoint| kc.norm(p).powf(expo);
    let pts = calibration_points(alg);
    let h = 1e-3;
    let mut num = 0.0;
    let mut den = 0.0;
    for p in &pts {
        let u0 = u(p);
        let mut lap = 0.0;
        for j in 0..alg.n1() {
            let f = |t: f64| u(&group::step_along(alg, p, j, t));
            let d2 = (-f(2.0 * h) + 16.0 * f(h) - 30.0 * u0 + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h);
            lap += d2;
            den += d2 * d2;
        }
        num += lap * lap;
    }
    (num / den.max(1e-300)).sqrt()
}

fn calibration_points(alg: &HTypeAlgebra) -> Vec<GroupPoint> {
    let mut r = sampling::rng(0xca11b, 0);
    (0..48)
        .map(|_| {
            let mut v: Vec<f64> = (0..alg.n1()).map(|_| sampling::normal(&mut r)).collect();
            let z: Vec<f64> = (0..alg.n2()).map(|_| sampling::normal(&mut r)).collect();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let rad = 0.4 + 0.6 * r.random::<f64>();
            v.iter_mut().for_each(|x| *x *= rad / nv);
            GroupPoint::new(v, z)
        })
        .collect()
}

/// Finds the centre coefficient minimising [`harmonic_residual`]: log-grid sweep
/// over `[1e-4, 1e4]`, then golden-section refinement in `ln c`.
pub fn calibrate_c(k: &KaplanNorm) -> Result<Calibration> {
    let f = |lc: f64| harmonic_residual(k, lc.exp());
    let n = 161;
    let (lo, hi) = (1e-4f64.ln(), 1e4f64.ln());
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let best = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(n - 1)];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    let c = (0.5 * (a + b)).exp();
    let residual = harmonic_residual(k, c);
    let rm = harmonic_residual(k, 0.9 * c);
    let rp = harmonic_residual(k, 1.1 * c);
    if !(residual < 1e-4) {
        return Err(Error::Calibration(format!(
            "minimal sub-Laplacian residual {residual:.3e} at c = {c:.6}; the norm is not a fundamental-solution gauge"
        )));
    }
    Ok(Calibration {
        c,
        c_analytic: KaplanNorm::analytic_c(k.alg()),
        residual,
        residual_minus10: rm,
        residual_plus10: rp,
        gap_ratio: rm.min(rp) / residual.max(1e-300),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h1() -> KaplanNorm {
        KaplanNorm::new(&HTypeAlgebra::heisenberg(1))
    }

    #[test]
    fn unit_examples() {
        let k = h1();
        assert_eq!(k.c(), 1.0);
        assert_eq!(k.norm(&GroupPoint::h1(1.0, 0.0, 0.0)), 1.0);
        assert_eq!(k.norm(&GroupPoint::h1(0.0, 0.0, 1.0)), 1.0);
        let p = GroupPoint::h1(0.3, -0.2, 0.7);
        let d = group::dil(3.0, &p);
        assert!((k.norm(&d) - 3.0 * k.norm(&p)).abs() < 1e-14);
        assert!((k.norm(&group::inverse(&p)) - k.norm(&p)).abs() < 1e-15);
    }

    #[test]
    fn unit_ball_volume_h1() {
        let k = h1();
        assert!((k.m0() - PI * PI / 2.0).abs() < 1e-12);
        assert_eq!(k.ball_volume(1.0).unwrap(), 1.0);
        assert_eq!(k.ball_volume(2.0).unwrap(), 16.0);
        assert_eq!(k.ball_volume(0.0).unwrap(), 0.0);
        let mc = k.raw_ball_volume(1.0, 400_000, 3);
        assert!((mc / k.m0() - 1.0).abs() < 0.01);
    }

    #[test]
    fn gradient_examples() {
        let k = h1();
        let g = k.horizontal_gradient(&GroupPoint::h1(1.0, 0.0, 0.0)).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-15 && g[1].abs() < 1e-15);
        assert_eq!(k.upsilon(&GroupPoint::h1(0.0, 0.0, 1.0)).unwrap(), 0.0);
        assert!(k.is_characteristic(&GroupPoint::h1(0.0, 0.0, 1.0), 1e-8).unwrap());
        assert!(!k.is_characteristic(&GroupPoint::h1(1.0, 0.0, 0.0), 1e-8).unwrap());
        assert!(k.is_characteristic(&GroupPoint::h1(1.0, 0.0, 0.0), f64::INFINITY).unwrap());
        assert!(k.upsilon(&GroupPoint::h1(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn gradient_matches_symbolic_h1() {
        // X = ∂x + 2y∂t, Y = ∂y − 2x∂t applied to r⁴ + t²
        let k = h1();
        let (x, y, t) = (0.4, -0.9, 0.35);
        let r2 = x * x + y * y;
        let g = k.grad_n4(&GroupPoint::h1(x, y, t));
        assert!((g[0] - (4.0 * r2 * x + 4.0 * y * t)).abs() < 1e-14);
        assert!((g[1] - (4.0 * r2 * y - 4.0 * x * t)).abs() < 1e-14);
        let n = k.norm(&GroupPoint::h1(x, y, t));
        let ups = k.upsilon(&GroupPoint::h1(x, y, t)).unwrap();
        assert!((ups - r2.sqrt() / n).abs() < 1e-14);
    }

    #[test]
    fn calibration_h1() {
        let k = h1();
        let cal = calibrate_c(&k).unwrap();
        assert!((cal.c - 1.0).abs() < 1e-3, "c = {}", cal.c);
        assert!(cal.gap_ratio >= 10.0);
    }

    #[test]
    fn calibration_rescaled_convention() {
        let alg = HTypeAlgebra::heisenberg_scaled(1, 1.0, "H1half");
        let k = KaplanNorm::new(&alg);
        assert_eq!(k.c(), 16.0);
        let cal = calibrate_c(&k).unwrap();
        assert!((cal.c / 16.0 - 1.0).abs() < 1e-3, "c = {}", cal.c);
    }

    #[test]
    fn calibration_fails_off_htype() {
        let n1 = 4;
        let mut b = vec![0.0; n1 * n1];
        b[1] = -4.0;
        b[n1] = 4.0;
        let alg = HTypeAlgebra::new_unchecked("H1xR2", n1, 1, b).unwrap();
        let k = KaplanNorm::with_c(&alg, 1.0).unwrap();
        assert!(matches!(calibrate_c(&k), Err(Error::Calibration(_))));
    }

    #[test]
    fn triangle_constant_is_one() {
        let k = h1();
        let w = k.triangle_constant(20_000, 5);
        assert!(w <= 1.0 + 1e-6, "ϖ = {w}");
        assert!(w > 0.5);
    }

    #[test]
    fn distance_basics() {
        let k = h1();
        let p = GroupPoint::h1(0.2, 0.5, -0.4);
        assert_eq!(k.distance(&p, &p), 0.0);
        assert!((k.distance(&GroupPoint::h1(0.0, 0.0, 0.0), &p) - k.norm(&p)).abs() < 1e-15);
    }
}
