//! Group law in exponential coordinates of the first kind.

use crate::algebra::HTypeAlgebra;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Point in normal coordinates, split into horizontal `v` and centre `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint {
    pub v: Vec<f64>,
    pub z: Vec<f64>,
}

impl GroupPoint {
    pub fn new(v: Vec<f64>, z: Vec<f64>) -> Self {
        Self { v, z }
    }

    pub fn zero(alg: &HTypeAlgebra) -> Self {
        Self { v: vec![0.0; alg.n1()], z: vec![0.0; alg.n2()] }
    }

    /// H¹ shorthand `(x, y, t)`.
    pub fn h1(x: f64, y: f64, t: f64) -> Self {
        Self { v: vec![x, y], z: vec![t] }
    }

    /// Splits a flat coordinate slice `[v.., z..]`.
    pub fn from_flat(alg: &HTypeAlgebra, c: &[f64]) -> Result<Self> {
        if c.len() != alg.n_top() {
            return Err(Error::Dimension {
                expected: alg.n_top().to_string(),
                got: c.len().to_string(),
            });
        }
        Ok(Self { v: c[..alg.n1()].to_vec(), z: c[alg.n1()..].to_vec() })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.v.clone();
        out.extend_from_slice(&self.z);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.z).all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.v.iter().chain(&self.z).all(|&x| x == 0.0)
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Euclidean distance in coordinates (diagnostics only).
    pub fn coord_dist(&self, other: &Self) -> f64 {
        self.v
            .iter()
            .zip(&other.v)
            .chain(self.z.iter().zip(&other.z))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn check(&self, alg: &HTypeAlgebra) -> Result<()> {
        if self.v.len() != alg.n1() || self.z.len() != alg.n2() {
            return Err(Error::Dimension {
                expected: format!("({}, {})", alg.n1(), alg.n2()),
                got: format!("({}, {})", self.v.len(), self.z.len()),
            });
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// `p·q = (v_p + v_q, z_p + z_q + ½[v_p, v_q])`.
pub fn multiply(alg: &HTypeAlgebra, p: &GroupPoint, q: &GroupPoint) -> Result<GroupPoint> {
    p.check(alg)?;
    q.check(alg)?;
    Ok(mul(alg, p, q))
}

/// Unchecked product for internal hot paths.
#[inline]
pub(crate) fn mul(alg: &HTypeAlgebra, p: &GroupPoint, q: &GroupPoint) -> GroupPoint {
    let v: Vec<f64> = p.v.iter().zip(&q.v).map(|(a, b)| a + b).collect();
    let mut z = vec![0.0; alg.n2()];
    alg.bracket_into(&p.v, &q.v, &mut z);
    for (m, zm) in z.iter_mut().enumerate() {
        *zm = p.z[m] + q.z[m] + 0.5 * *zm;
    }
    GroupPoint { v, z }
}

pub fn inverse(p: &GroupPoint) -> GroupPoint {
    GroupPoint {
        v: p.v.iter().map(|x| -x).collect(),
        z: p.z.iter().map(|x| -x).collect(),
    }
}

/// `δ_λ(v, z) = (λv, λ²z)`.
pub fn dilate(lambda: f64, p: &GroupPoint) -> Result<GroupPoint> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("dilation factor must be positive, got {lambda}")));
    }
    Ok(dil(lambda, p))
}

#[inline]
pub(crate) fn dil(lambda: f64, p: &GroupPoint) -> GroupPoint {
    let l2 = lambda * lambda;
    GroupPoint {
        v: p.v.iter().map(|x| lambda * x).collect(),
        z: p.z.iter().map(|x| l2 * x).collect(),
    }
}

pub fn left_translate(alg: &HTypeAlgebra, w: &GroupPoint, p: &GroupPoint) -> Result<GroupPoint> {
    multiply(alg, w, p)
}

/// `p⁻¹·q`.
#[inline]
pub(crate) fn rel(alg: &HTypeAlgebra, p: &GroupPoint, q: &GroupPoint) -> GroupPoint {
    mul(alg, &inverse(p), q)
}

/// `p·exp(h e_j)`: the integral curve of `X_j` through `p` at time `h`.
pub fn step_along(alg: &HTypeAlgebra, p: &GroupPoint, j: usize, h: f64) -> GroupPoint {
    let mut e = GroupPoint::zero(alg);
    e.v[j] = h;
    mul(alg, p, &e)
}

/// Rows are the coordinates of `X_j = ∂_{v_j} + ½ Σ_m [v, e_j]_m ∂_{z_m}` at `p`.
pub fn horizontal_frame(alg: &HTypeAlgebra, p: &GroupPoint) -> Result<DMatrix<f64>> {
    p.check(alg)?;
    let (n1, n2) = (alg.n1(), alg.n2());
    let mut f = DMatrix::zeros(n1, n1 + n2);
    for j in 0..n1 {
        f[(j, j)] = 1.0;
        for m in 0..n2 {
            let s: f64 = (0..n1).map(|i| p.v[i] * alg.b(i, j, m)).sum();
            f[(j, n1 + m)] = 0.5 * s;
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h1() -> HTypeAlgebra {
        HTypeAlgebra::heisenberg(1)
    }

    #[test]
    fn product_example() {
        let r = multiply(&h1(), &GroupPoint::h1(1.0, 0.0, 0.0), &GroupPoint::h1(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(r, GroupPoint::h1(1.0, 1.0, -2.0));
    }

    #[test]
    fn product_matches_coordinate_formula() {
        let (x, y, t) = (0.3, -1.2, 2.5);
        let (a, b, c) = (-0.7, 0.4, -1.1);
        let r = multiply(&h1(), &GroupPoint::h1(x, y, t), &GroupPoint::h1(a, b, c)).unwrap();
        assert_eq!(r, GroupPoint::h1(x + a, y + b, t + c - 2.0 * x * b + 2.0 * y * a));
    }

    #[test]
    fn identity_and_inverse() {
        let alg = h1();
        let p = GroupPoint::h1(1.0, 2.0, 3.0);
        assert_eq!(multiply(&alg, &p, &GroupPoint::zero(&alg)).unwrap(), p);
        assert_eq!(inverse(&p), GroupPoint::h1(-1.0, -2.0, -3.0));
        assert_eq!(inverse(&inverse(&p)), p);
        assert!(multiply(&alg, &p, &inverse(&p)).unwrap().is_zero());
        assert!(inverse(&GroupPoint::zero(&alg)).is_zero());
    }

    #[test]
    fn dilation_example() {
        assert_eq!(dilate(2.0, &GroupPoint::h1(1.0, 1.0, 1.0)).unwrap(), GroupPoint::h1(2.0, 2.0, 4.0));
        let p = GroupPoint::h1(0.1, 0.2, 0.3);
        assert_eq!(dilate(1.0, &p).unwrap(), p);
        assert!(dilate(0.0, &p).is_err());
        assert!(dilate(-1.0, &p).is_err());
    }

    #[test]
    fn frame_examples() {
        let alg = h1();
        let f = horizontal_frame(&alg, &GroupPoint::h1(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(f, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let f = horizontal_frame(&alg, &GroupPoint::h1(3.0, 5.0, 7.0)).unwrap();
        assert_eq!(f, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 10.0, 0.0, 1.0, -6.0]));
    }

    #[test]
    fn dimension_mismatch() {
        let alg = h1();
        let bad = GroupPoint::new(vec![1.0], vec![0.0]);
        assert!(matches!(multiply(&alg, &bad, &bad), Err(Error::Dimension { .. })));
        assert!(GroupPoint::from_flat(&alg, &[1.0, 2.0]).is_err());
    }
}
