//! Sampled curves, Carnot–Carathéodory length, densities and curve-family moduli.

use crate::algebra::HTypeAlgebra;
use crate::error::{Error, Result};
use crate::flow;
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use crate::quadrature::{self, BallRegion, Estimate, SphereQuadrature};
use serde::Serialize;
use std::path::Path;

/// Largest horizontality residual accepted by [`cc_length`].
pub const HORIZONTAL_TOL: f64 = 1e-5;

/// Ordered samples `(t_i, γ(t_i))`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curve {
    pub t: Vec<f64>,
    pub points: Vec<GroupPoint>,
    pub arclength: bool,
}

impl Curve {
    pub fn new(t: Vec<f64>, points: Vec<GroupPoint>, arclength: bool) -> Result<Self> {
        if t.len() != points.len() {
            return Err(Error::Dimension { expected: t.len().to_string(), got: points.len().to_string() });
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("curve parameter must be strictly increasing".into()));
        }
        Ok(Self { t, points, arclength })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn translate(&self, alg: &HTypeAlgebra, w: &GroupPoint) -> Self {
        Self {
            t: self.t.clone(),
            points: self.points.iter().map(|p| group::mul(alg, w, p)).collect(),
            arclength: self.arclength,
        }
    }

    pub fn dilate(&self, lambda: f64) -> Self {
        Self {
            t: self.t.clone(),
            points: self.points.iter().map(|p| group::dil(lambda, p)).collect(),
            arclength: false,
        }
    }

    /// Reads `t, coords...` rows; lines starting with `#` and a non-numeric header are skipped.
    pub fn read_csv(alg: &HTypeAlgebra, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(alg, &text)
    }

    pub fn parse_csv(alg: &HTypeAlgebra, text: &str) -> Result<Self> {
        let mut t = Vec::new();
        let mut pts = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let nums: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            let nums = match nums {
                Ok(n) => n,
                Err(_) if t.is_empty() => continue,
                Err(e) => return Err(Error::Parse(format!("line {}: {e}", ln + 1))),
            };
            if nums.len() != alg.n_top() + 1 {
                return Err(Error::Parse(format!(
                    "line {}: expected {} columns, got {}",
                    ln + 1,
                    alg.n_top() + 1,
                    nums.len()
                )));
            }
            t.push(nums[0]);
            pts.push(GroupPoint::from_flat(alg, &nums[1..])?);
        }
        Self::new(t, pts, false)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(p) = self.points.first() {
            s.push('t');
            for i in 0..p.v.len() {
                s.push_str(&format!(",v{i}"));
            }
            for i in 0..p.z.len() {
                s.push_str(&format!(",z{i}"));
            }
            s.push('\n');
        }
        for (t, p) in self.t.iter().zip(&self.points) {
            s.push_str(&format!("{t:.16e}"));
            for x in p.v.iter().chain(&p.z) {
                s.push_str(&format!(",{x:.16e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Reads a family manifest: one curve CSV path per line, relative to the manifest.
pub fn read_family(alg: &HTypeAlgebra, manifest: &Path) -> Result<Vec<Curve>> {
    let text = std::fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| Curve::read_csv(alg, &base.join(l)))
        .collect()
}

const FIVE_POINT: [[f64; 5]; 5] = [
    [-25.0, 48.0, -36.0, 16.0, -3.0],
    [-3.0, -10.0, 18.0, -6.0, 1.0],
    [1.0, -8.0, 0.0, 8.0, -1.0],
    [-1.0, 6.0, -18.0, 10.0, 3.0],
    [3.0, -16.0, 36.0, -48.0, 25.0],
];

/// Fourth-order derivative `(v̇, ż)` at `i` from the five-sample window around it
/// (shifted inward at the ends) when that window is equally spaced in `t`.
fn five_point(curve: &Curve, i: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if curve.len() < 5 {
        return None;
    }
    let j0 = i.saturating_sub(2).min(curve.len() - 5);
    let h = curve.t[j0 + 1] - curve.t[j0];
    let uniform = (j0..j0 + 4).all(|j| ((curve.t[j + 1] - curve.t[j]) - h).abs() <= 1e-9 * h.abs());
    if !(h > 0.0 && uniform) {
        return None;
    }
    let w = FIVE_POINT[i - j0];
    let pts = &curve.points[j0..j0 + 5];
    let d = |f: &dyn Fn(&GroupPoint) -> &[f64]| -> Vec<f64> {
        (0..f(&pts[0]).len()).map(|c| (0..5).map(|m| w[m] * f(&pts[m])[c]).sum::<f64>() / (12.0 * h)).collect()
    };
    Some((d(&|p| &p.v), d(&|p| &p.z)))
}

/// Frame coefficients `a` of the central-difference derivative at interior sample
/// `i`, and the norm of its non-horizontal component.
pub fn horizontal_velocity(alg: &HTypeAlgebra, curve: &Curve, i: usize) -> Result<(Vec<f64>, f64)> {
    if i == 0 || i + 1 >= curve.len() {
        return Err(Error::InvalidArgument(format!("sample {i} is not interior")));
    }
    let dt = curve.t[i + 1] - curve.t[i - 1];
    if !(dt > 0.0) {
        return Err(Error::Degenerate("zero parameter step".into()));
    }
    let p = &curve.points[i];
    let (av, dz) = if let Some(d) = five_point(curve, i) {
        d
    } else {
        let (a, b) = (&curve.points[i - 1], &curve.points[i + 1]);
        (
            a.v.iter().zip(&b.v).map(|(x, y)| (y - x) / dt).collect(),
            a.z.iter().zip(&b.z).map(|(x, y)| (y - x) / dt).collect(),
        )
    };
    let expect = alg.bracket(&p.v, &av);
    let res = dz.iter().zip(&expect).map(|(d, e)| (d - 0.5 * e).powi(2)).sum::<f64>().sqrt();
    Ok((av, res))
}

/// Largest horizontality residual over interior samples.
pub fn horizontality_residual(alg: &HTypeAlgebra, curve: &Curve) -> f64 {
    (1..curve.len().saturating_sub(1))
        .filter_map(|i| horizontal_velocity(alg, curve, i).ok())
        .map(|(_, r)| r)
        .fold(0.0, f64::max)
}

fn chord_sum(curve: &Curve, stride: usize) -> f64 {
    let idx: Vec<usize> = (0..curve.len()).step_by(stride).chain(std::iter::once(curve.len() - 1)).collect();
    idx.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (a, b) = (&curve.points[w[0]], &curve.points[w[1]]);
            a.v.iter().zip(&b.v).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt()
        })
        .sum()
}

/// `l(γ) = ∫ |a(t)| dt`, accumulated from horizontal chords.
pub fn cc_length(alg: &HTypeAlgebra, curve: &Curve) -> Result<f64> {
    if curve.len() < 2 {
        return Ok(0.0);
    }
    let res = horizontality_residual(alg, curve);
    if res > HORIZONTAL_TOL {
        return Err(Error::NonHorizontal(res));
    }
    Ok(chord_sum(curve, 1))
}

/// Relative change of the length estimate between the full and every-other sampling.
pub fn cc_length_refinement(curve: &Curve) -> f64 {
    if curve.len() < 3 {
        return 0.0;
    }
    let fine = chord_sum(curve, 1);
    let coarse = chord_sum(curve, 2);
    ((fine - coarse) / fine.max(1e-300)).abs()
}

/// A nonnegative Borel function with known support ball.
pub trait Density: Sync {
    fn eval(&self, p: &GroupPoint) -> f64;
    /// Ball containing the support.
    fn support(&self) -> BallRegion;
}

/// Subset of the unit sphere, as a predicate on sphere points.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SphereSet {
    Full,
    Empty,
    /// `{y : <u, ŷ> > threshold}` with `ŷ` the Euclidean direction of `y`.
    HalfSpace { normal: Vec<f64>, threshold: f64 },
    Intersection { parts: Vec<SphereSet> },
}

impl SphereSet {
    pub fn contains(&self, y: &GroupPoint) -> bool {
        match self {
            SphereSet::Full => true,
            SphereSet::Empty => false,
            SphereSet::HalfSpace { normal, threshold } => {
                let c: Vec<f64> = y.to_flat();
                let len = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                let d: f64 = c.iter().zip(normal).map(|(a, b)| a * b).sum();
                d / len > *threshold
            }
            SphereSet::Intersection { parts } => parts.iter().all(|s| s.contains(y)),
        }
    }
}

/// `ρ(z) = υ(w⁻¹z) / (N(w⁻¹z) ln(t/s))` on the ring `s < N(w⁻¹z) < t`, optionally
/// restricted to the flow tube over a sphere set.
pub struct RingDensity<'a> {
    k: &'a KaplanNorm,
    center: GroupPoint,
    s: f64,
    t: f64,
    set: SphereSet,
}

impl<'a> RingDensity<'a> {
    pub fn inner(&self) -> f64 {
        self.s
    }
    pub fn outer(&self) -> f64 {
        self.t
    }
}

impl Density for RingDensity<'_> {
    fn eval(&self, p: &GroupPoint) -> f64 {
        let x = group::rel(self.k.alg(), &self.center, p);
        let n = self.k.norm(&x);
        if !(n > self.s && n < self.t) {
            return 0.0;
        }
        if self.set != SphereSet::Full {
            match flow::sphere_direction(self.k, &x) {
                Ok(y) if self.set.contains(&y) => {}
                _ => return 0.0,
            }
        }
        match self.k.upsilon(&x) {
            Ok(u) => u / (n * (self.t / self.s).ln()),
            Err(_) => 0.0,
        }
    }
    fn support(&self) -> BallRegion {
        BallRegion { center: self.center.clone(), radius: self.t }
    }
}

pub fn ring_density<'a>(k: &'a KaplanNorm, center: &GroupPoint, s: f64, t: f64) -> Result<RingDensity<'a>> {
    ring_density_over(k, center, s, t, SphereSet::Full)
}

pub fn ring_density_over<'a>(k: &'a KaplanNorm, center: &GroupPoint, s: f64, t: f64, set: SphereSet) -> Result<RingDensity<'a>> {
    center.check(k.alg())?;
    if !(s > 0.0 && t > s) {
        return Err(Error::InvalidArgument(format!("ring needs 0 < s < t, got {s}, {t}")));
    }
    Ok(RingDensity { k, center: center.clone(), s, t, set })
}

/// Exact modulus of the radial family over `E` in the ring `a < N < b`:
/// `σ(E) (ln b/a)^{1-Q}`.
pub fn radial_family_modulus(k: &KaplanNorm, quad: &SphereQuadrature, set: &SphereSet, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > a) {
        return Err(Error::InvalidArgument(format!("need 0 < a < b, got {a}, {b}")));
    }
    let q = k.qf();
    Ok(quad.sigma(q, |y| set.contains(y)) * (b / a).ln().powf(1.0 - q))
}

/// `∫ ρ^p dx` in the normalised measure: an upper bound for the p-modulus of
/// every family for which `ρ` is admissible.
pub fn modulus_upper_bound<D: Density>(k: &KaplanNorm, density: &D, p: f64, samples: usize, seed: u64) -> Result<Estimate> {
    quadrature::cartesian_integrate(k, |x| density.eval(x).powf(p), &density.support(), samples, seed)
}

fn lerp_point(a: &GroupPoint, b: &GroupPoint, s: f64) -> GroupPoint {
    GroupPoint {
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + s * (y - x)).collect(),
        z: a.z.iter().zip(&b.z).map(|(x, y)| x + s * (y - x)).collect(),
    }
}

fn segment_integral<D: Density + ?Sized>(d: &D, a: &GroupPoint, b: &GroupPoint, fa: f64, fb: f64, len: f64, depth: u32) -> f64 {
    let m = lerp_point(a, b, 0.5);
    let fm = d.eval(&m);
    let simpson = len * (fa + 4.0 * fm + fb) / 6.0;
    let trap = len * (fa + 2.0 * fm + fb) / 4.0;
    if depth == 0 || (simpson - trap).abs() <= 1e-7 * (1e-3 + simpson.abs()) {
        return simpson;
    }
    segment_integral(d, a, &m, fa, fm, len / 2.0, depth - 1) + segment_integral(d, &m, b, fm, fb, len / 2.0, depth - 1)
}

/// `∫_γ ρ ds` with CC arclength from horizontal chords and adaptive Simpson
/// refinement of segments where `ρ` is not resolved (e.g. at support edges).
pub fn line_integral<D: Density + ?Sized>(density: &D, curve: &Curve) -> f64 {
    let mut total = 0.0;
    let vals: Vec<f64> = curve.points.iter().map(|p| density.eval(p)).collect();
    for i in 0..curve.len().saturating_sub(1) {
        let (a, b) = (&curve.points[i], &curve.points[i + 1]);
        let len = a.v.iter().zip(&b.v).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt();
        if len == 0.0 {
            continue;
        }
        total += segment_integral(density, a, b, vals[i], vals[i + 1], len, 30);
    }
    total
}

/// Minimum line integral over the sampled family and the index attaining it.
pub fn admissibility_check<D: Density + ?Sized>(density: &D, family: &[Curve]) -> (f64, usize) {
    family
        .iter()
        .enumerate()
        .map(|(i, c)| (line_integral(density, c), i))
        .fold((f64::INFINITY, 0), |acc, x| if x.0 < acc.0 { x } else { acc })
}

/// Zero density, used to exercise admissibility failure.
pub struct ZeroDensity(pub BallRegion);

impl Density for ZeroDensity {
    fn eval(&self, _: &GroupPoint) -> f64 {
        0.0
    }
    fn support(&self) -> BallRegion {
        self.0.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::build_sphere_quadrature;
    use std::f64::consts::E;

    fn h1() -> KaplanNorm {
        KaplanNorm::new(&HTypeAlgebra::heisenberg(1))
    }

    fn segment(f: impl Fn(f64) -> GroupPoint, n: usize) -> Curve {
        let t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let p = t.iter().map(|&s| f(s)).collect();
        Curve::new(t, p, false).unwrap()
    }

    #[test]
    fn straight_horizontal_segment() {
        let alg = HTypeAlgebra::heisenberg(1);
        let c = segment(|s| GroupPoint::h1(s, 0.0, 0.0), 100);
        let (a, r) = horizontal_velocity(&alg, &c, 50).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12 && a[1].abs() < 1e-12);
        assert!(r <= 1e-8);
        assert!((cc_length(&alg, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vertical_segment_is_not_horizontal() {
        let alg = HTypeAlgebra::heisenberg(1);
        let c = segment(|s| GroupPoint::h1(0.0, 0.0, s), 100);
        let (_, r) = horizontal_velocity(&alg, &c, 50).unwrap();
        assert!(r > 0.5);
        assert!(matches!(cc_length(&alg, &c), Err(Error::NonHorizontal(_))));
    }

    #[test]
    fn flow_curve_is_horizontal() {
        let k = h1();
        let y = k.to_level(&GroupPoint::h1(0.4, 0.7, 0.5), 1.0);
        let c = flow::flow_curve(&k, &y, 1.0, E, 2000).unwrap();
        assert!(horizontality_residual(k.alg(), &c) <= 1e-6);
    }

    #[test]
    fn length_invariances() {
        let k = h1();
        let alg = k.alg();
        let y = k.to_level(&GroupPoint::h1(-0.3, 0.5, 0.9), 1.0);
        let c = flow::flow_curve(&k, &y, 0.5, 2.0, 3000).unwrap();
        let l = cc_length(alg, &c).unwrap();
        let w = GroupPoint::h1(1.5, -2.0, 3.0);
        let lt = cc_length(alg, &c.translate(alg, &w)).unwrap();
        assert!((lt / l - 1.0).abs() < 1e-8);
        let ld = cc_length(alg, &c.dilate(1.7)).unwrap();
        assert!((ld / (1.7 * l) - 1.0).abs() < 1e-6);
        assert!(cc_length_refinement(&c) < 1e-4);
    }

    #[test]
    fn modulus_examples() {
        let k = h1();
        let q = build_sphere_quadrature(&k, 20_000, 4).unwrap();
        let full = radial_family_modulus(&k, &q, &SphereSet::Full, 1.0, E).unwrap();
        assert!((full - q.kappa(4.0)).abs() < 1e-12);
        assert_eq!(radial_family_modulus(&k, &q, &SphereSet::Empty, 1.0, E).unwrap(), 0.0);
        let wide = radial_family_modulus(&k, &q, &SphereSet::Full, 1.0, E * E).unwrap();
        assert!((full / wide - 8.0).abs() < 1e-12);
        assert!(radial_family_modulus(&k, &q, &SphereSet::Full, 2.0, 1.0).is_err());
    }

    #[test]
    fn ring_density_examples() {
        let k = h1();
        let w = GroupPoint::h1(0.5, 0.5, -1.0);
        let rho = ring_density(&k, &w, 1.0, E).unwrap();
        assert_eq!(rho.eval(&w), 0.0);
        let y = k.to_level(&GroupPoint::h1(0.6, -0.1, 0.4), 1.0);
        let c = flow::translated_flow_curve(&k, &w, &y, 0.5, 3.2, 2700).unwrap();
        assert!((line_integral(&rho, &c) - 1.0).abs() < 1e-3);
        assert!(ring_density(&k, &w, 2.0, 1.0).is_err());
    }

    #[test]
    fn zero_density_line_integral() {
        let k = h1();
        let y = k.to_level(&GroupPoint::h1(0.6, -0.1, 0.4), 1.0);
        let c = flow::flow_curve(&k, &y, 0.5, 3.0, 100).unwrap();
        let z = ZeroDensity(BallRegion { center: GroupPoint::h1(0.0, 0.0, 0.0), radius: 3.0 });
        assert_eq!(admissibility_check(&z, &[c]), (0.0, 0));
    }

    #[test]
    fn csv_round_trip() {
        let alg = HTypeAlgebra::heisenberg(1);
        let c = segment(|s| GroupPoint::h1(s, s * s, -s), 5);
        let back = Curve::parse_csv(&alg, &c.to_csv()).unwrap();
        assert_eq!(back, c);
        assert!(Curve::parse_csv(&alg, "t,x\n0,1\n").is_err());
    }

    #[test]
    fn non_monotone_parameter_rejected() {
        let p = GroupPoint::h1(0.0, 0.0, 0.0);
        assert!(Curve::new(vec![0.0, 0.0], vec![p.clone(), p], false).is_err());
    }
}
