//! Radial flow `φ(s, y)` along the normalised horizontal gradient of the norm.
//!
//! On H-type groups with the analytic centre coefficient the flow has the closed form
//! `z(σ) = σ² z`, `v(σ) = σ exp((4 ln σ / |v|²) J_z) v`; the fixed-step RK4 integrator
//! is the independent route used for any other coefficient and for drift reports.

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use serde::Serialize;

/// Minimal `|∇₀N|₀` treated as non-characteristic by the flow.
pub const CHARACTERISTIC_TOL: f64 = 1e-8;

/// `φ(σ, x)`: the point on the flow line through `x` with norm `σ·N(x)`.
pub fn flow_point(k: &KaplanNorm, x: &GroupPoint, sigma: f64) -> Result<GroupPoint> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("flow parameter must be positive, got {sigma}")));
    }
    let r2: f64 = x.v.iter().map(|a| a * a).sum();
    if r2 == 0.0 {
        return Err(Error::Degenerate("flow started on the characteristic set".into()));
    }
    if k.is_exact() {
        Ok(flow_exact(k, x, sigma, r2))
    } else {
        let n0 = k.norm(x);
        let steps = ((sigma.ln().abs() / 1e-3).ceil() as usize).max(8);
        let (p, _) = integrate(k, x, n0, sigma * n0, steps, true)?;
        Ok(p)
    }
}

fn flow_exact(k: &KaplanNorm, x: &GroupPoint, sigma: f64, r2: f64) -> GroupPoint {
    let alg = k.alg();
    let alpha = 4.0 * sigma.ln() / r2;
    let zg = alg.centre_inner(&x.z, &x.z).max(0.0).sqrt();
    let v = if zg == 0.0 || alpha == 0.0 {
        x.v.iter().map(|a| sigma * a).collect()
    } else {
        let j = alg.j_map(&x.z);
        let (cs, sn) = ((alpha * zg).cos(), (alpha * zg).sin());
        let n1 = alg.n1();
        (0..n1)
            .map(|i| {
                let jv: f64 = (0..n1).map(|l| j[(i, l)] * x.v[l]).sum();
                sigma * (cs * x.v[i] + sn * jv / zg)
            })
            .collect()
    };
    let s2 = sigma * sigma;
    GroupPoint { v, z: x.z.iter().map(|a| s2 * a).collect() }
}

/// Projects a nonzero point back to the unit sphere along its flow line.
pub fn sphere_direction(k: &KaplanNorm, x: &GroupPoint) -> Result<GroupPoint> {
    let n = k.norm(x);
    if n == 0.0 {
        return Err(Error::Degenerate("direction of the identity".into()));
    }
    flow_point(k, x, 1.0 / n)
}

/// Coordinate velocity `dγ/ds = Σ_j a_j X_j` with `a = ∇₀N / |∇₀N|₀²`.
fn velocity(k: &KaplanNorm, p: &GroupPoint) -> Result<Vec<f64>> {
    let alg = k.alg();
    let g = k.horizontal_gradient(p)?;
    let g2: f64 = g.iter().map(|x| x * x).sum();
    if g2.sqrt() < CHARACTERISTIC_TOL {
        return Err(Error::Degenerate("flow entered the characteristic set".into()));
    }
    let a: Vec<f64> = g.iter().map(|x| x / g2).collect();
    let mut out = a.clone();
    let zdot = alg.bracket(&p.v, &a);
    out.extend(zdot.iter().map(|b| 0.5 * b));
    Ok(out)
}

fn axpy(p: &GroupPoint, h: f64, d: &[f64]) -> GroupPoint {
    let n1 = p.v.len();
    GroupPoint {
        v: p.v.iter().zip(d).map(|(a, b)| a + h * b).collect(),
        z: p.z.iter().zip(&d[n1..]).map(|(a, b)| a + h * b).collect(),
    }
}

/// RK4 in the level parameter from `N = s0` to `N = s1`; returns the end point and
/// the largest pre-projection level drift.
fn integrate(
    k: &KaplanNorm,
    start: &GroupPoint,
    s0: f64,
    s1: f64,
    steps: usize,
    project: bool,
) -> Result<(GroupPoint, f64)> {
    let h = (s1 - s0) / steps as f64;
    let mut p = start.clone();
    let mut drift: f64 = 0.0;
    for i in 0..steps {
        p = rk4_step(k, &p, h)?;
        let s = s0 + h * (i + 1) as f64;
        drift = drift.max((k.norm(&p) - s).abs());
        if project {
            p = k.to_level(&p, s);
        }
    }
    Ok((p, drift))
}

fn rk4_step(k: &KaplanNorm, p: &GroupPoint, h: f64) -> Result<GroupPoint> {
    let k1 = velocity(k, p)?;
    let k2 = velocity(k, &axpy(p, 0.5 * h, &k1))?;
    let k3 = velocity(k, &axpy(p, 0.5 * h, &k2))?;
    let k4 = velocity(k, &axpy(p, h, &k3))?;
    let d: Vec<f64> = (0..k1.len()).map(|i| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0).collect();
    Ok(axpy(p, h, &d))
}

/// Numerically integrated flow curve with its drift diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct FlowRun {
    #[serde(skip)]
    pub curve: Curve,
    /// Largest `|N(γ(s)) − s|` before projection.
    pub norm_drift: f64,
    /// Largest `|υ(γ(s)) − υ(y)|`.
    pub upsilon_drift: f64,
    /// Largest coordinate gap to the closed-form flow (NaN when unavailable).
    pub closed_form_gap: f64,
    pub projected: bool,
    pub steps: usize,
}

/// Integrates the flow from `φ(s0, y)` to `φ(s1, y)` for a unit-sphere point `y`
/// with fixed step `step`, projecting onto `N = s` after every step when `project`.
pub fn radial_flow(k: &KaplanNorm, y: &GroupPoint, s0: f64, s1: f64, step: f64, project: bool) -> Result<FlowRun> {
    y.check(k.alg())?;
    if (k.norm(y) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("start point has norm {} != 1", k.norm(y))));
    }
    if !(s0 > 0.0 && s1 > s0) {
        return Err(Error::InvalidArgument(format!("need 0 < s0 < s1, got {s0}, {s1}")));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let u0 = k.upsilon(y)?;
    if u0 < CHARACTERISTIC_TOL {
        return Err(Error::Degenerate("start point is characteristic".into()));
    }
    let steps = ((s1 - s0) / step).round().max(1.0) as usize;
    let h = (s1 - s0) / steps as f64;
    let mut p = if s0 == 1.0 { y.clone() } else { flow_point(k, y, s0)? };
    let mut ts = vec![s0];
    let mut pts = vec![p.clone()];
    let mut drift: f64 = 0.0;
    let mut udrift: f64 = (k.upsilon(&p)? - u0).abs();
    let mut gap: f64 = if k.is_exact() { 0.0 } else { f64::NAN };
    for i in 0..steps {
        p = rk4_step(k, &p, h)?;
        let s = s0 + h * (i + 1) as f64;
        drift = drift.max((k.norm(&p) - s).abs());
        if project {
            p = k.to_level(&p, s);
        }
        udrift = udrift.max((k.upsilon(&p)? - u0).abs());
        if k.is_exact() {
            let e = flow_exact(k, y, s, y.v.iter().map(|a| a * a).sum());
            gap = gap.max(e.coord_dist(&p));
        }
        ts.push(s);
        pts.push(p.clone());
    }
    Ok(FlowRun {
        curve: Curve::new(ts, pts, false)?,
        norm_drift: drift,
        upsilon_drift: udrift,
        closed_form_gap: gap,
        projected: project,
        steps,
    })
}

/// Flow curve sampled from the closed form (or the projected integrator) at
/// `n + 1` equally spaced levels in `[s0, s1]`.
pub fn flow_curve(k: &KaplanNorm, y: &GroupPoint, s0: f64, s1: f64, n: usize) -> Result<Curve> {
    if !(s0 > 0.0 && s1 > s0) || n == 0 {
        return Err(Error::InvalidArgument("need 0 < s0 < s1 and n > 0".into()));
    }
    let n0 = k.norm(y);
    let mut ts = Vec::with_capacity(n + 1);
    let mut pts = Vec::with_capacity(n + 1);
    if k.is_exact() {
        for i in 0..=n {
            let s = s0 + (s1 - s0) * i as f64 / n as f64;
            ts.push(s);
            pts.push(flow_point(k, y, s / n0)?);
        }
    } else {
        let mut p = flow_point(k, y, s0 / n0)?;
        ts.push(s0);
        pts.push(p.clone());
        for i in 1..=n {
            let a = s0 + (s1 - s0) * (i - 1) as f64 / n as f64;
            let b = s0 + (s1 - s0) * i as f64 / n as f64;
            let sub = (((b - a) / 1e-3).ceil() as usize).max(1);
            p = integrate(k, &p, a, b, sub, true)?.0;
            ts.push(b);
            pts.push(p.clone());
        }
    }
    Curve::new(ts, pts, false)
}

/// Left-translated radial curve `w·φ(s, y)`.
pub fn translated_flow_curve(k: &KaplanNorm, w: &GroupPoint, y: &GroupPoint, s0: f64, s1: f64, n: usize) -> Result<Curve> {
    let c = flow_curve(k, y, s0, s1, n)?;
    let pts = c.points.iter().map(|p| group::mul(k.alg(), w, p)).collect();
    Curve::new(c.t, pts, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::HTypeAlgebra;
    use crate::curves;

    fn h1() -> KaplanNorm {
        KaplanNorm::new(&HTypeAlgebra::heisenberg(1))
    }

    fn unit(k: &KaplanNorm, p: GroupPoint) -> GroupPoint {
        k.to_level(&p, 1.0)
    }

    #[test]
    fn cylindrical_closed_form_h1() {
        // r = s r0, θ = θ0 − (t0 / r0²) ln s, t = s² t0
        let k = h1();
        let y = unit(&k, GroupPoint::h1(0.6, 0.3, 0.5));
        let (r0, th0, t0) = (y.v[0].hypot(y.v[1]), y.v[1].atan2(y.v[0]), y.z[0]);
        let s = 2.3f64;
        let p = flow_point(&k, &y, s).unwrap();
        let th = th0 - t0 / (r0 * r0) * s.ln();
        assert!((p.v[0] - s * r0 * th.cos()).abs() < 1e-14);
        assert!((p.v[1] - s * r0 * th.sin()).abs() < 1e-14);
        assert!((p.z[0] - s * s * t0).abs() < 1e-14);
    }

    #[test]
    fn closed_form_properties() {
        let k = h1();
        let y = unit(&k, GroupPoint::h1(-0.2, 0.7, -0.9));
        let u = k.upsilon(&y).unwrap();
        for s in [0.1, 0.5, 1.0, 3.0, 40.0] {
            let p = flow_point(&k, &y, s).unwrap();
            assert!((k.norm(&p) - s).abs() < 1e-12 * s);
            assert!((k.upsilon(&p).unwrap() - u).abs() < 1e-13);
        }
        let back = sphere_direction(&k, &flow_point(&k, &y, 7.0).unwrap()).unwrap();
        assert!(back.coord_dist(&y) < 1e-13);
    }

    #[test]
    fn rk4_meets_drift_budget() {
        let k = h1();
        let y = unit(&k, GroupPoint::h1(0.5, -0.4, 0.8));
        let run = radial_flow(&k, &y, 1.0, std::f64::consts::E, 1e-3, true).unwrap();
        assert!(run.norm_drift <= 1e-6, "{}", run.norm_drift);
        assert!(run.upsilon_drift <= 1e-6, "{}", run.upsilon_drift);
        assert!(run.closed_form_gap <= 1e-8, "{}", run.closed_form_gap);
    }

    #[test]
    fn unprojected_run_also_stays_on_level() {
        let k = h1();
        let y = unit(&k, GroupPoint::h1(0.1, 0.9, 0.6));
        let run = radial_flow(&k, &y, 1.0, 2.0, 1e-3, false).unwrap();
        assert!(run.norm_drift <= 1e-6);
        assert!(run.closed_form_gap <= 1e-8);
    }

    #[test]
    fn cc_length_of_flow() {
        let k = h1();
        let y = unit(&k, GroupPoint::h1(0.8, 0.1, -0.3));
        let u = k.upsilon(&y).unwrap();
        let run = radial_flow(&k, &y, 1.0, std::f64::consts::E, 1e-3, true).unwrap();
        let l = curves::cc_length(k.alg(), &run.curve).unwrap();
        assert!((l - (std::f64::consts::E - 1.0) / u).abs() < 1e-4);
    }

    #[test]
    fn h2_flow_closed_form_matches_rk4() {
        let k = KaplanNorm::new(&HTypeAlgebra::heisenberg(2));
        let y = unit(&k, GroupPoint::new(vec![0.3, -0.5, 0.2, 0.4], vec![0.7]));
        let run = radial_flow(&k, &y, 0.5, 2.0, 1e-3, true).unwrap();
        assert!(run.closed_form_gap < 1e-8, "{}", run.closed_form_gap);
    }

    #[test]
    fn non_exact_coefficient_uses_integrator() {
        let alg = HTypeAlgebra::heisenberg(1);
        let k = KaplanNorm::with_c(&alg, 2.0).unwrap();
        assert!(!k.is_exact());
        let y = k.to_level(&GroupPoint::h1(0.5, 0.2, 0.4), 1.0);
        let p = flow_point(&k, &y, 1.7).unwrap();
        assert!((k.norm(&p) - 1.7).abs() < 1e-9);
    }

    #[test]
    fn characteristic_start_is_rejected() {
        let k = h1();
        assert!(flow_point(&k, &GroupPoint::h1(0.0, 0.0, 1.0), 2.0).is_err());
        assert!(radial_flow(&k, &GroupPoint::h1(0.0, 0.0, 1.0), 1.0, 2.0, 1e-3, true).is_err());
        assert!(radial_flow(&k, &GroupPoint::h1(1.0, 0.0, 0.0), 2.0, 1.0, 1e-3, true).is_err());
    }
}
