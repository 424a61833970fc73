//! Modulus inequalities for images of radial curve families.
//!
//! `Γ` is the family `c·φ(s, y)`, `a < s < b`, `y ∈ E`, with exact modulus
//! `σ(E)(ln b/a)^{1-Q}`. For similarities `x ↦ w·δ_λ x` the image is the radial
//! family over `E` about `w·δ_λ c` in `(λa, λb)`. For radially equivariant maps and
//! `c = 0` the image of `φ(s, y)` is `φ(s, f(y))`, a radial segment over the
//! direction of `f(y)` whose level ratio is still `b/a`; the image family is
//! then radial over `Ê = {ω : some preimage direction of ω lies in E}`.

use super::QRMap;
use crate::curves::SphereSet;
use crate::error::{Error, Result};
use crate::flow;
use crate::group::GroupPoint;
use crate::norm::KaplanNorm;
use crate::quadrature::SphereQuadrature;
use crate::sampling;
use rand::Rng;
use serde::Serialize;

/// Relative slack allowed on every verdict.
pub const INEQUALITY_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Verdict {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs/lhs − 1` (infinite when `lhs = 0`).
    pub margin: f64,
    pub holds: bool,
}

impl Verdict {
    fn new(lhs: f64, rhs: f64) -> Self {
        let margin = if lhs > 0.0 { rhs / lhs - 1.0 } else { f64::INFINITY };
        Self { lhs, rhs, margin, holds: lhs <= rhs * (1.0 + INEQUALITY_TOL) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleInequalityReport {
    pub map: String,
    pub inner: f64,
    pub outer: f64,
    pub modulus: f64,
    pub image_modulus: f64,
    pub k_outer: f64,
    pub k_inner: f64,
    /// Largest number of domain curves over one image curve.
    pub multiplicity: u32,
    /// Smallest number of liftings of an image curve into the family.
    pub liftings: u32,
    /// `M(Γ) ≤ K_O N M(fΓ)`.
    pub outer_bound: Verdict,
    /// `M(fΓ) ≤ K_I M(Γ)`.
    pub inner_bound: Verdict,
    /// `M(fΓ) ≤ (K_I/m) M(Γ)`.
    pub lifting_bound: Verdict,
}

/// Evaluates the three inequalities for the radial family over `set` about
/// `centre` in the ring `a < N < b`, with distortion constants `k_outer`, `k_inner`.
#[allow(clippy::too_many_arguments)]
pub fn module_inequality_report(
    f: &QRMap,
    k: &KaplanNorm,
    quad: &SphereQuadrature,
    set: &SphereSet,
    centre: &GroupPoint,
    a: f64,
    b: f64,
    k_outer: f64,
    k_inner: f64,
) -> Result<ModuleInequalityReport> {
    centre.check(k.alg())?;
    if !(a > 0.0 && b > a) {
        return Err(Error::InvalidArgument(format!("need 0 < a < b, got {a}, {b}")));
    }
    let q = k.qf();
    let ln_factor = (b / a).ln().powf(1.0 - q);
    let sw = quad.sigma_weights(q);
    let sigma_e: f64 = quad.nodes.iter().zip(&sw).filter(|(y, _)| set.contains(y)).map(|(_, w)| w).sum();
    let (sigma_img, mult, lift) = if f.as_similarity().is_some() {
        (sigma_e, 1, 1)
    } else if f.is_radially_equivariant() && centre.is_zero() {
        let mut total = 0.0;
        let mut nmax = 0u32;
        let mut mmin = u32::MAX;
        for (om, w) in quad.nodes.iter().zip(&sw) {
            let mut hits = 0u32;
            let mut level: Option<f64> = None;
            for (x, _) in f.fiber(om)? {
                // every preimage must carry the same level range over ω
                let nx = k.norm(&x);
                if let Some(l) = level {
                    if ((nx - l) / l).abs() > 1e-9 {
                        return Err(Error::InvalidArgument("image segments over one direction differ".into()));
                    }
                }
                level = Some(nx);
                let d = flow::sphere_direction(k, &x)?;
                if set.contains(&d) {
                    hits += 1;
                }
            }
            nmax = nmax.max(hits);
            if hits > 0 {
                total += w;
                mmin = mmin.min(hits);
            }
        }
        (total, nmax.max(1), if mmin == u32::MAX { 1 } else { mmin })
    } else {
        return Err(Error::InvalidArgument(
            "image family is known only for similarities, or for equivariant maps about 0".into(),
        ));
    };
    let m_gamma = sigma_e * ln_factor;
    let m_img = sigma_img * ln_factor;
    Ok(ModuleInequalityReport {
        map: f.descriptor().to_string(),
        inner: a,
        outer: b,
        modulus: m_gamma,
        image_modulus: m_img,
        k_outer,
        k_inner,
        multiplicity: mult,
        liftings: lift,
        outer_bound: Verdict::new(m_gamma, k_outer * mult as f64 * m_img),
        inner_bound: Verdict::new(m_img, k_inner * m_gamma),
        lifting_bound: Verdict::new(m_img, k_inner / lift as f64 * m_gamma),
    })
}

/// Ring family `c·φ(s, y)`, `a < s < b`, `y ∈ set`.
#[derive(Debug, Clone, Serialize)]
pub struct RingConfig {
    pub set: SphereSet,
    pub centre: GroupPoint,
    pub a: f64,
    pub b: f64,
}

/// Seeded ring families with half-space direction sets. Centres are random for
/// similarities and 0 otherwise.
pub fn sample_ring_configs(f: &QRMap, count: usize, seed: u64) -> Vec<RingConfig> {
    let alg = f.alg();
    let mut rng = sampling::rng(seed, 0x7269);
    let free_centre = f.as_similarity().is_some();
    (0..count)
        .map(|_| {
            let mut normal: Vec<f64> = (0..alg.n_top()).map(|_| sampling::normal(&mut rng)).collect();
            let len = normal.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            normal.iter_mut().for_each(|x| *x /= len);
            let threshold = rng.random_range(-0.6..0.6);
            let centre = if free_centre {
                let c: Vec<f64> = (0..alg.n_top()).map(|_| sampling::normal(&mut rng)).collect();
                GroupPoint::from_flat(alg, &c).expect("dimension fixed")
            } else {
                GroupPoint::zero(alg)
            };
            let a = rng.random_range(0.5..2.0);
            let b = a * rng.random_range(0.3f64..2.0).exp();
            RingConfig { set: SphereSet::HalfSpace { normal, threshold }, centre, a, b }
        })
        .collect()
}
