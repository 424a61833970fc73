//! Path lifting by predictor–corrector continuation.

use super::{QRMap, BRANCH_TOL};
use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::group::{self, GroupPoint};
use crate::norm::KaplanNorm;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Tolerance on `N(f(α(t))⁻¹ β(t))` for an accepted lift point.
pub const LIFT_TOL: f64 = 1e-6;

const MAX_HALVINGS: u32 = 24;

/// Lifted curve up to the last accepted sample.
#[derive(Debug, Clone, Serialize)]
pub struct LiftOutcome {
    #[serde(skip)]
    pub curve: Curve,
    /// Continuation stopped because the lift reached the branch locus.
    pub branch_encountered: bool,
    /// Parameter of the last accepted sample when the lift stopped early.
    pub stopped_at: Option<f64>,
    /// `max_i N(f(α(t_i))⁻¹ β(t_i))`.
    pub max_residual: f64,
    pub halvings: usize,
}

fn lerp(a: &GroupPoint, b: &GroupPoint, s: f64) -> GroupPoint {
    GroupPoint::new(
        a.v.iter().zip(&b.v).map(|(x, y)| x + s * (y - x)).collect(),
        a.z.iter().zip(&b.z).map(|(x, y)| x + s * (y - x)).collect(),
    )
}

/// Coordinate Jacobian of `f` by central differences.
fn coord_jacobian(f: &QRMap, x: &[f64]) -> DMatrix<f64> {
    let alg = f.alg();
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[j] += h;
        b[j] -= h;
        let fa = f.eval(&GroupPoint::from_flat(alg, &a).expect("dimension")).to_flat();
        let fb = f.eval(&GroupPoint::from_flat(alg, &b).expect("dimension")).to_flat();
        for i in 0..n {
            jac[(i, j)] = (fa[i] - fb[i]) / (2.0 * h);
        }
    }
    jac
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Newton corrector for `f(x) = target` from `guess`; `None` when it fails to
/// converge.
fn correct(f: &QRMap, guess: &GroupPoint, target: &GroupPoint) -> Option<GroupPoint> {
    let alg = f.alg();
    let tf = target.to_flat();
    let mut x = guess.to_flat();
    let scale = 1.0 + sup(&tf);
    for _ in 0..40 {
        let fx = f.eval(&GroupPoint::from_flat(alg, &x).ok()?).to_flat();
        let res: Vec<f64> = fx.iter().zip(&tf).map(|(a, b)| a - b).collect();
        if sup(&res) <= 1e-14 * scale {
            return GroupPoint::from_flat(alg, &x).ok();
        }
        let jac = coord_jacobian(f, &x);
        let dx = jac.lu().solve(&DVector::from_vec(res))?;
        for (xi, di) in x.iter_mut().zip(dx.iter()) {
            *xi -= di;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        if sup(dx.as_slice()) <= 1e-15 * (1.0 + sup(&x)) {
            return GroupPoint::from_flat(alg, &x).ok();
        }
    }
    None
}

/// Smallest singular value of the coordinate Jacobian, used to bound how far an
/// honest continuation step may move.
fn inverse_lipschitz(f: &QRMap, x: &GroupPoint) -> f64 {
    let sv = coord_jacobian(f, &x.to_flat()).singular_values();
    1.0 / sv.min().max(1e-300)
}

enum Step {
    Ok(GroupPoint),
    Branch,
}

struct Lifter<'a> {
    f: &'a QRMap,
    halvings: usize,
}

impl Lifter<'_> {
    /// Moves the lift from `x` (over `from`) to a point over `to`, halving the
    /// target step whenever the corrector fails or jumps sheets.
    fn advance(&mut self, x: &GroupPoint, from: &GroupPoint, to: &GroupPoint, depth: u32) -> Result<Step> {
        if self.f.branch_radius(x) < BRANCH_TOL {
            return Ok(Step::Branch);
        }
        let dy = from.coord_dist(to);
        // secant predictor: first-order change through the local inverse
        let jac = coord_jacobian(self.f, &x.to_flat());
        let delta: Vec<f64> = to.to_flat().iter().zip(from.to_flat()).map(|(a, b)| a - b).collect();
        let guess = match jac.clone().lu().solve(&DVector::from_vec(delta)) {
            Some(d) => GroupPoint::from_flat(self.f.alg(), &x.to_flat().iter().zip(d.iter()).map(|(a, b)| a + b).collect::<Vec<_>>())?,
            None => x.clone(),
        };
        let bound = 4.0 * inverse_lipschitz(self.f, x) * dy + 1e-12;
        if let Some(nx) = correct(self.f, &guess, to) {
            if nx.coord_dist(x) <= bound {
                return Ok(Step::Ok(nx));
            }
        }
        if depth >= MAX_HALVINGS {
            if self.f.branch_radius(x) < 1e3 * BRANCH_TOL {
                return Ok(Step::Branch);
            }
            return Err(Error::NonConvergence(format!("corrector failed after {MAX_HALVINGS} halvings")));
        }
        self.halvings += 1;
        let mid = lerp(from, to, 0.5);
        match self.advance(x, from, &mid, depth + 1)? {
            Step::Ok(xm) => self.advance(&xm, &mid, to, depth + 1),
            Step::Branch => Ok(Step::Branch),
        }
    }
}

/// Lifts `beta` through `f` starting at `x0` (which must lie over `beta(t_0)`),
/// using sub-steps of at most `step` in the curve parameter.
pub fn lift_curve(f: &QRMap, k: &KaplanNorm, beta: &Curve, x0: &GroupPoint, step: f64) -> Result<LiftOutcome> {
    let alg = f.alg();
    x0.check(alg)?;
    if beta.is_empty() {
        return Err(Error::InvalidArgument("empty curve".into()));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let gap = k.distance(&f.eval(x0), &beta.points[0]);
    if gap > LIFT_TOL {
        return Err(Error::InvalidArgument(format!("start point is not over the curve start (gap {gap:e})")));
    }
    let mut lifter = Lifter { f, halvings: 0 };
    let mut ts = vec![beta.t[0]];
    let mut pts = vec![x0.clone()];
    let mut worst = gap;
    let mut branch = false;
    let mut stopped = None;
    let mut x = x0.clone();
    'outer: for i in 1..beta.len() {
        let (b0, b1) = (&beta.points[i - 1], &beta.points[i]);
        let m = ((beta.t[i] - beta.t[i - 1]) / step).ceil().max(1.0) as usize;
        for j in 0..m {
            let from = lerp(b0, b1, j as f64 / m as f64);
            let to = if j + 1 == m { b1.clone() } else { lerp(b0, b1, (j + 1) as f64 / m as f64) };
            match lifter.advance(&x, &from, &to, 0)? {
                Step::Ok(nx) => x = nx,
                Step::Branch => {
                    branch = true;
                    stopped = Some(beta.t[i - 1]);
                    break 'outer;
                }
            }
        }
        if f.branch_radius(&x) < BRANCH_TOL {
            branch = true;
            stopped = Some(beta.t[i]);
            break;
        }
        worst = worst.max(k.norm(&group::rel(alg, &f.eval(&x), b1)));
        ts.push(beta.t[i]);
        pts.push(x.clone());
    }
    Ok(LiftOutcome {
        curve: Curve::new(ts, pts, false)?,
        branch_encountered: branch,
        stopped_at: stopped,
        max_residual: worst,
        halvings: lifter.halvings,
    })
}
