//! Sphere quadrature for the polar measure σ*, polar and Cartesian integration.

use crate::error::{Error, Result};
use crate::flow::{self, CHARACTERISTIC_TOL};
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use crate::report;
use crate::sampling::ShiftedHalton;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;
use std::path::Path;

/// Nodes on the unit Kaplan sphere minus the characteristic set, with weights
/// approximating σ* in the normalised measure (so `Σ w ≈ Q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereQuadrature {
    pub group: String,
    pub c: f64,
    pub seed: u64,
    pub node_count: usize,
    pub rejected: usize,
    pub nodes: Vec<GroupPoint>,
    pub weights: Vec<f64>,
    pub upsilon: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct QuadratureFile {
    schema: String,
    checksum: String,
    quadrature: SphereQuadrature,
}

impl SphereQuadrature {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ υ_i^p w_i`.
    pub fn kappa(&self, p: f64) -> f64 {
        self.upsilon.iter().zip(&self.weights).map(|(u, w)| u.powf(p) * w).sum()
    }

    /// `σ(E) = Σ_{y_i ∈ E} υ_i^Q w_i`.
    pub fn sigma<F: Fn(&GroupPoint) -> bool>(&self, q: f64, in_set: F) -> f64 {
        self.nodes
            .iter()
            .zip(self.upsilon.iter().zip(&self.weights))
            .filter(|(y, _)| in_set(y))
            .map(|(_, (u, w))| u.powf(q) * w)
            .sum()
    }

    /// σ-weights `υ_i^Q w_i`.
    pub fn sigma_weights(&self, q: f64) -> Vec<f64> {
        self.upsilon.iter().zip(&self.weights).map(|(u, w)| u.powf(q) * w).collect()
    }

    /// Writes the quadrature as JSON with a SHA-256 checksum of the payload.
    pub fn save(&self, path: &Path) -> Result<String> {
        let payload = report::to_json(self);
        let checksum = report::sha256_hex(payload.as_bytes());
        let file = QuadratureFile { schema: report::SCHEMA.into(), checksum: checksum.clone(), quadrature: self.clone() };
        std::fs::write(path, report::to_json(&file))?;
        Ok(checksum)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let f: QuadratureFile = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let computed = report::sha256_hex(report::to_json(&f.quadrature).as_bytes());
        if computed != f.checksum {
            return Err(Error::Checksum { stored: f.checksum, computed });
        }
        Ok(f.quadrature)
    }

    /// Checksum of the payload as written by [`save`](Self::save).
    pub fn checksum(&self) -> String {
        report::sha256_hex(report::to_json(self).as_bytes())
    }
}

fn sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// Builds the quadrature from `node_count` shifted-Halton directions ω on the
/// Euclidean sphere, mapped to `y = δ_{1/N(ω)} ω` with density
/// `N(ω)^{-Q} (|ω_v|² + 2|ω_z|²)` (the cone measure `dA/|∇_E N|` in ω).
pub fn build_sphere_quadrature(k: &KaplanNorm, node_count: usize, seed: u64) -> Result<SphereQuadrature> {
    if node_count == 0 {
        return Err(Error::Quadrature("node_count is 0".into()));
    }
    let alg = k.alg();
    let n = alg.n_top();
    let n1 = alg.n1();
    let q = k.qf();
    let halton = ShiftedHalton::new(n, seed);
    let normal = Normal::standard();
    let scale = sphere_area(n) / (node_count as f64 * k.m0());
    let raw: Vec<Option<(GroupPoint, f64, f64)>> = (0..node_count)
        .into_par_iter()
        .map(|i| {
            let u = halton.point(i);
            let mut w: Vec<f64> = u.iter().map(|&x| normal.inverse_cdf(x)).collect();
            let len = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(len > 0.0) {
                return None;
            }
            w.iter_mut().for_each(|x| *x /= len);
            let om = GroupPoint::new(w[..n1].to_vec(), w[n1..].to_vec());
            let nw = k.norm(&om);
            let dv: f64 = om.v.iter().map(|x| x * x).sum();
            let dz: f64 = om.z.iter().map(|x| x * x).sum();
            let density = nw.powf(-q) * (dv + 2.0 * dz);
            let y = group::dil(1.0 / nw, &om);
            let ups = k.upsilon(&y).ok()?;
            if ups < CHARACTERISTIC_TOL {
                return None;
            }
            Some((y, density * scale, ups))
        })
        .collect();
    let mut nodes = Vec::with_capacity(node_count);
    let mut weights = Vec::with_capacity(node_count);
    let mut upsilon = Vec::with_capacity(node_count);
    for (y, w, u) in raw.iter().flatten() {
        nodes.push(y.clone());
        weights.push(*w);
        upsilon.push(*u);
    }
    let rejected = node_count - nodes.len();
    if nodes.len() < 8.max(node_count / 2) {
        return Err(Error::Quadrature(format!("only {} of {node_count} nodes usable", nodes.len())));
    }
    Ok(SphereQuadrature { group: alg.name().to_string(), c: k.c(), seed, node_count, rejected, nodes, weights, upsilon })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (8 points).
const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Composite Gauss–Legendre rule on `[0, b]` with geometric panels toward 0.
pub fn radial_rule(b: f64, panels: usize) -> Vec<(f64, f64)> {
    let mut edges = vec![0.0];
    for k in (0..panels).rev() {
        edges.push(b * 2f64.powf(-(k as f64) / 2.0));
    }
    let mut out = Vec::with_capacity(8 * panels);
    for win in edges.windows(2) {
        let (a, c) = (win[0], win[1]);
        let (m, h) = (0.5 * (a + c), 0.5 * (c - a));
        for (x, w) in GL8 {
            out.push((m + h * x, h * w));
        }
    }
    out
}

/// `∫_{B(0,r_max)} u dx = ∫_0^{r_max} ∫_S u(φ(s,y)) s^{Q-1} dσ*(y) ds` on the quadrature.
pub fn polar_integrate<F>(k: &KaplanNorm, quad: &SphereQuadrature, u: F, r_max: f64) -> Result<f64>
where
    F: Fn(&GroupPoint) -> f64 + Sync,
{
    if !(r_max > 0.0) {
        return Err(Error::InvalidArgument("r_max must be positive".into()));
    }
    let rule = radial_rule(r_max, 40);
    let qm1 = k.q() as i32 - 1;
    let per_node: Vec<Result<f64>> = quad
        .nodes
        .par_iter()
        .zip(quad.weights.par_iter())
        .map(|(y, w)| {
            let mut acc = 0.0;
            for &(s, ws) in &rule {
                let p = flow::flow_point(k, y, s)?;
                acc += ws * s.powi(qm1) * u(&p);
            }
            Ok(acc * w)
        })
        .collect();
    let mut total = 0.0;
    for v in per_node {
        total += v?;
    }
    if !total.is_finite() {
        return Err(Error::Divergent("polar integral is not finite".into()));
    }
    Ok(total)
}

/// Integration domain for [`cartesian_integrate`]: the ball `B(center, radius)`.
#[derive(Debug, Clone)]
pub struct BallRegion {
    pub center: GroupPoint,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Normalised-measure integral of `u` over a ball by shifted-Halton sampling of a
/// bounding box, using left invariance: `∫_{B(w,r)} u = ∫_{B(0,r)} u(w·x) dx`.
pub fn cartesian_integrate<F>(k: &KaplanNorm, u: F, region: &BallRegion, samples: usize, seed: u64) -> Result<Estimate>
where
    F: Fn(&GroupPoint) -> f64 + Sync,
{
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    let alg = k.alg();
    let bx = k.bounding_box(region.radius);
    let vol: f64 = bx.iter().map(|h| 2.0 * h).product::<f64>() / k.m0();
    let halton = ShiftedHalton::new(alg.n_top(), seed);
    let chunk = 4096;
    let nchunks = samples.div_ceil(chunk);
    let parts: Vec<(f64, f64, f64)> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut big: f64 = 0.0;
            for i in c * chunk..((c + 1) * chunk).min(samples) {
                let x = halton.point(i);
                let c: Vec<f64> = x.iter().zip(&bx).map(|(t, h)| (2.0 * t - 1.0) * h).collect();
                let p = GroupPoint::from_flat(alg, &c).expect("dimension fixed");
                if k.norm(&p) >= region.radius {
                    continue;
                }
                let val = u(&group::mul(alg, &region.center, &p));
                s += val;
                s2 += val * val;
                big = big.max(val.abs());
            }
            (s, s2, big)
        })
        .collect();
    let half = parts.len() / 2;
    let (mut s, mut s2, mut big) = (0.0, 0.0, 0.0f64);
    let mut first = 0.0;
    for (i, (a, b, c)) in parts.into_iter().enumerate() {
        if i < half {
            first += a;
        }
        s += a;
        s2 += b;
        big = big.max(c);
    }
    let n = samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    // running-mean instability: one sample or one half of the run dominates
    let n_first = (half * chunk).min(samples) as f64;
    let unstable = half > 0
        && s != 0.0
        && (big > 0.25 * s.abs() || ((first / n_first) / mean - 1.0).abs() > 0.5);
    if !mean.is_finite() || unstable {
        return Err(Error::Divergent(format!("sample mean unstable (largest term {big:e} vs sum {s:e})")));
    }
    Ok(Estimate { value: vol * mean, std_error: vol * (var / n).sqrt(), samples })
}

/// One row of [`polar_check`].
#[derive(Debug, Clone, Serialize)]
pub struct PolarRow {
    pub integrand: &'static str,
    pub polar: f64,
    pub cartesian: f64,
    pub std_error: f64,
    pub rel_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolarCheck {
    pub radius: f64,
    pub nodes: usize,
    pub samples: usize,
    pub rows: Vec<PolarRow>,
    /// `σ*(S∖Z)`, expected to equal `Q`.
    pub sphere_measure: f64,
    pub sphere_gap: f64,
}

type Integrand = fn(&GroupPoint) -> f64;

fn polar_integrands() -> [(&'static str, Integrand); 3] {
    fn one(_: &GroupPoint) -> f64 {
        1.0
    }
    fn gaussian(p: &GroupPoint) -> f64 {
        let r2: f64 = p.v.iter().chain(&p.z).map(|x| x * x).sum();
        (-r2).exp()
    }
    fn tilted(p: &GroupPoint) -> f64 {
        let x = p.v[0];
        let y = p.v.get(1).copied().unwrap_or(0.0);
        let t = p.z[0];
        (1.0 + 0.8 * x + 0.5 * y * y) * (0.7 * t).cos()
    }
    [("one", one), ("gaussian", gaussian), ("tilted", tilted)]
}

/// Polar quadrature against Cartesian sampling over `B(0, radius)` for three
/// smooth integrands, plus the total sphere measure.
pub fn polar_check(k: &KaplanNorm, quad: &SphereQuadrature, radius: f64, samples: usize, seed: u64) -> Result<PolarCheck> {
    let region = BallRegion { center: GroupPoint::zero(k.alg()), radius };
    let mut rows = Vec::new();
    for (name, u) in polar_integrands() {
        let polar = polar_integrate(k, quad, u, radius)?;
        let cart = cartesian_integrate(k, u, &region, samples, seed)?;
        rows.push(PolarRow {
            integrand: name,
            polar,
            cartesian: cart.value,
            std_error: cart.std_error,
            rel_gap: (polar - cart.value).abs() / cart.value.abs().max(1e-300),
        });
    }
    let q = k.qf();
    let total = quad.total_weight();
    Ok(PolarCheck {
        radius,
        nodes: quad.len(),
        samples,
        rows,
        sphere_measure: total,
        sphere_gap: (total - q).abs() / q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::HTypeAlgebra;

    fn setup(n: usize) -> (KaplanNorm, SphereQuadrature) {
        let k = KaplanNorm::new(&HTypeAlgebra::heisenberg(1));
        let q = build_sphere_quadrature(&k, n, 11).unwrap();
        (k, q)
    }

    #[test]
    fn weights_sum_to_q() {
        let (_, q) = setup(20_000);
        assert!((q.total_weight() / 4.0 - 1.0).abs() < 0.01, "{}", q.total_weight());
        assert!(q.upsilon.iter().all(|&u| u >= CHARACTERISTIC_TOL));
    }

    #[test]
    fn kappa_h1_is_two() {
        // κ_raw(H¹,4) = 4·∫_B r⁴/N⁴ dx = π², normalised by m0 = π²/2
        let (_, q) = setup(20_000);
        assert!((q.kappa(4.0) - 2.0).abs() < 0.01 * 2.0, "{}", q.kappa(4.0));
        assert!((q.kappa(0.0) - 4.0).abs() < 0.04);
    }

    #[test]
    fn kappa_converges_under_doubling() {
        let (_, a) = setup(10_000);
        let (_, b) = setup(20_000);
        assert!((a.kappa(4.0) / b.kappa(4.0) - 1.0).abs() < 0.005);
    }

    #[test]
    fn empty_request_fails() {
        let k = KaplanNorm::new(&HTypeAlgebra::heisenberg(1));
        assert!(matches!(build_sphere_quadrature(&k, 0, 1), Err(Error::Quadrature(_))));
    }

    #[test]
    fn nodes_lie_on_unit_sphere() {
        let (k, q) = setup(500);
        for y in &q.nodes {
            assert!((k.norm(y) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn polar_constant_and_norm() {
        let (k, q) = setup(20_000);
        let one = polar_integrate(&k, &q, |_| 1.0, 1.0).unwrap();
        assert!((one - 1.0).abs() < 0.01);
        let nrm = polar_integrate(&k, &q, |p| k.norm(p), 1.0).unwrap();
        assert!((nrm - 0.8).abs() < 0.01 * 0.8);
    }

    #[test]
    fn radial_rule_integrates_power() {
        let r = radial_rule(2.0, 30);
        let s: f64 = r.iter().map(|(x, w)| w * x.powi(3)).sum();
        assert!((s - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cartesian_ball_volume() {
        let k = KaplanNorm::new(&HTypeAlgebra::heisenberg(1));
        let reg = BallRegion { center: GroupPoint::h1(0.3, -0.2, 0.5), radius: 1.5 };
        let e = cartesian_integrate(&k, |_| 1.0, &reg, 200_000, 2).unwrap();
        assert!((e.value / 1.5f64.powi(4) - 1.0).abs() < 0.01);
    }

    #[test]
    fn divergent_integrand_detected() {
        let k = KaplanNorm::new(&HTypeAlgebra::heisenberg(1));
        let reg = BallRegion { center: GroupPoint::h1(0.0, 0.0, 0.0), radius: 1.0 };
        let r = cartesian_integrate(&k, |p| 1.0 / k.norm4(p).powi(3), &reg, 50_000, 2);
        assert!(matches!(r, Err(Error::Divergent(_))));
    }

    #[test]
    fn save_and_load() {
        let (_, q) = setup(64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.json");
        let sum = q.save(&path).unwrap();
        let back = SphereQuadrature::load(&path).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.checksum(), sum);
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"seed\":11", "\"seed\":12", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(SphereQuadrature::load(&path), Err(Error::Checksum { .. })));
    }
}
