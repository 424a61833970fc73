//! Step-2 stratified Lie algebras given by a bracket tensor, with the H-type test.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::Deserialize;

const HTYPE_TOL: f64 = 1e-9;

/// Step-2 algebra `V1 ⊕ V2` with `[e_i, e_j] = Σ_m B[i][j][m] f_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct HTypeAlgebra {
    name: String,
    n1: usize,
    n2: usize,
    bracket: Vec<f64>,
    /// Clifford metric H with `M_b M_c + M_c M_b = -2 H_bc Id`.
    clifford: Vec<f64>,
    /// Centre metric G = H^{-1}; `J_Z^2 = -<Z,Z>_G Id`.
    metric: Vec<f64>,
    htype: bool,
}

#[derive(Deserialize)]
struct AlgebraFile {
    name: Option<String>,
    n1: usize,
    n2: usize,
    #[serde(default)]
    bracket: Vec<BracketEntry>,
}

#[derive(Deserialize)]
struct BracketEntry {
    i: usize,
    j: usize,
    m: usize,
    value: f64,
}

impl HTypeAlgebra {
    /// Builds and validates an algebra. `bracket` is indexed `(i*n1 + j)*n2 + m`.
    pub fn new(name: &str, n1: usize, n2: usize, bracket: Vec<f64>) -> Result<Self> {
        let alg = Self::new_unchecked(name, n1, n2, bracket)?;
        alg.check_htype()?;
        Ok(Self { htype: true, ..alg })
    }

    /// Builds an algebra without the H-type test (antisymmetry is still enforced).
    /// Used to exercise calibration failure on non-H-type brackets.
    pub fn new_unchecked(name: &str, n1: usize, n2: usize, bracket: Vec<f64>) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::InvalidAlgebra("n1 and n2 must be positive".into()));
        }
        if bracket.len() != n1 * n1 * n2 {
            return Err(Error::Dimension {
                expected: format!("{} bracket entries", n1 * n1 * n2),
                got: bracket.len().to_string(),
            });
        }
        if bracket.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidAlgebra("non-finite bracket entry".into()));
        }
        for i in 0..n1 {
            for j in 0..n1 {
                for m in 0..n2 {
                    let a = bracket[(i * n1 + j) * n2 + m];
                    let b = bracket[(j * n1 + i) * n2 + m];
                    if (a + b).abs() > HTYPE_TOL * (1.0 + a.abs()) {
                        return Err(Error::InvalidAlgebra(format!(
                            "bracket not antisymmetric at ({i},{j},{m})"
                        )));
                    }
                }
            }
        }
        let mut alg = Self {
            name: name.to_string(),
            n1,
            n2,
            bracket,
            clifford: vec![0.0; n2 * n2],
            metric: vec![0.0; n2 * n2],
            htype: false,
        };
        let h = alg.clifford_estimate();
        let hm = DMatrix::from_row_slice(n2, n2, &h);
        let g = hm.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n2, n2));
        alg.clifford = h;
        alg.metric = g.transpose().iter().copied().collect();
        Ok(alg)
    }

    /// Heisenberg group H^n with `[X_i, Y_i] = -4T`, basis order (x_1..x_n, y_1..y_n).
    pub fn heisenberg(n: usize) -> Self {
        Self::heisenberg_scaled(n, 4.0, &format!("H{n}"))
    }

    /// Heisenberg group with `[X_i, Y_i] = -s T`; `s = 4` is the ±2 convention,
    /// `s = 1` the ±1/2 convention.
    pub fn heisenberg_scaled(n: usize, s: f64, name: &str) -> Self {
        let n1 = 2 * n;
        let mut b = vec![0.0; n1 * n1];
        for i in 0..n {
            b[i * n1 + n + i] = -s;
            b[(n + i) * n1 + i] = s;
        }
        Self::new(name, n1, 1, b).expect("Heisenberg bracket is H-type")
    }

    /// Built-in algebras by name: "H1", "H2".
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "H1" => Ok(Self::heisenberg(1)),
            "H2" => Ok(Self::heisenberg(2)),
            _ => Err(Error::InvalidAlgebra(format!("unknown built-in group '{name}'"))),
        }
    }

    /// Parses a TOML configuration (`n1`, `n2`, `[[bracket]] i j m value`).
    /// Missing antisymmetric partners are filled in.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: AlgebraFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let (n1, n2) = (f.n1, f.n2);
        let mut b = vec![0.0; n1 * n1 * n2];
        let mut set = vec![false; n1 * n1 * n2];
        for e in &f.bracket {
            if e.i >= n1 || e.j >= n1 || e.m >= n2 {
                return Err(Error::Parse(format!(
                    "bracket index ({},{},{}) out of range",
                    e.i, e.j, e.m
                )));
            }
            let k = (e.i * n1 + e.j) * n2 + e.m;
            b[k] = e.value;
            set[k] = true;
        }
        for e in &f.bracket {
            let k = (e.j * n1 + e.i) * n2 + e.m;
            if !set[k] {
                b[k] = -e.value;
            }
        }
        Self::new(f.name.as_deref().unwrap_or("custom"), n1, n2, b)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n1(&self) -> usize {
        self.n1
    }
    pub fn n2(&self) -> usize {
        self.n2
    }
    /// Homogeneous dimension `n1 + 2 n2`.
    pub fn q(&self) -> usize {
        self.n1 + 2 * self.n2
    }
    /// Topological dimension `n1 + n2`.
    pub fn n_top(&self) -> usize {
        self.n1 + self.n2
    }
    pub fn is_htype(&self) -> bool {
        self.htype
    }

    #[inline]
    pub fn b(&self, i: usize, j: usize, m: usize) -> f64 {
        self.bracket[(i * self.n1 + j) * self.n2 + m]
    }

    pub fn bracket_tensor(&self) -> &[f64] {
        &self.bracket
    }

    /// `[u, v]` for horizontal vectors.
    pub fn bracket(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n2];
        self.bracket_into(u, v, &mut out);
        out
    }

    pub(crate) fn bracket_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n1 {
            if u[i] == 0.0 {
                continue;
            }
            for j in 0..self.n1 {
                if v[j] == 0.0 {
                    continue;
                }
                let uv = u[i] * v[j];
                let base = (i * self.n1 + j) * self.n2;
                for (m, o) in out.iter_mut().enumerate() {
                    *o += uv * self.bracket[base + m];
                }
            }
        }
    }

    /// `M_b[i][j] = B[i][j][b]`.
    pub fn clifford_matrix(&self, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n1, self.n1, |i, j| self.b(i, j, b))
    }

    /// Row-major `H`.
    pub fn clifford_metric(&self) -> &[f64] {
        &self.clifford
    }

    /// Row-major centre metric `G = H^{-1}`.
    pub fn centre_metric(&self) -> &[f64] {
        &self.metric
    }

    pub fn metric_trace(&self) -> f64 {
        (0..self.n2).map(|i| self.metric[i * self.n2 + i]).sum()
    }

    /// `<a, b>_G`.
    pub fn centre_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let n2 = self.n2;
        let mut s = 0.0;
        for i in 0..n2 {
            for j in 0..n2 {
                s += a[i] * self.metric[i * n2 + j] * b[j];
            }
        }
        s
    }

    /// `J_Z` defined by `<J_Z u, v> = <Z, [u, v]>_G`.
    pub fn j_map(&self, z: &[f64]) -> DMatrix<f64> {
        let n2 = self.n2;
        let mut out = DMatrix::zeros(self.n1, self.n1);
        for b in 0..n2 {
            let gz: f64 = (0..n2).map(|c| self.metric[b * n2 + c] * z[c]).sum();
            if gz != 0.0 {
                out += self.clifford_matrix(b).transpose() * gz;
            }
        }
        out
    }

    /// Largest deviation of `J_Z^2 + <Z,Z>_G Id` relative to `<Z,Z>_G`.
    pub fn htype_residual(&self, z: &[f64]) -> f64 {
        let j = self.j_map(z);
        let zz = self.centre_inner(z, z);
        let r = &j * &j + DMatrix::identity(self.n1, self.n1) * zz;
        r.amax() / zz.max(f64::MIN_POSITIVE)
    }

    fn clifford_estimate(&self) -> Vec<f64> {
        let n2 = self.n2;
        let mut h = vec![0.0; n2 * n2];
        let ms: Vec<_> = (0..n2).map(|b| self.clifford_matrix(b)).collect();
        for b in 0..n2 {
            for c in 0..n2 {
                let s = &ms[b] * &ms[c] + &ms[c] * &ms[b];
                h[b * n2 + c] = -s.trace() / (2.0 * self.n1 as f64);
            }
        }
        h
    }

    fn check_htype(&self) -> Result<()> {
        let n2 = self.n2;
        let ms: Vec<_> = (0..n2).map(|b| self.clifford_matrix(b)).collect();
        let scale = ms.iter().map(|m| m.amax()).fold(0.0, f64::max).powi(2).max(1e-300);
        for b in 0..n2 {
            for c in 0..n2 {
                let s = &ms[b] * &ms[c] + &ms[c] * &ms[b];
                let target = DMatrix::identity(self.n1, self.n1) * (-2.0 * self.clifford[b * n2 + c]);
                if (s - target).amax() > HTYPE_TOL * scale {
                    return Err(Error::InvalidAlgebra(format!(
                        "H-type condition fails for centre directions ({b},{c})"
                    )));
                }
            }
        }
        let hm = DMatrix::from_row_slice(n2, n2, &self.clifford);
        match hm.cholesky() {
            Some(_) => {}
            None => {
                return Err(Error::InvalidAlgebra(
                    "Clifford metric is not positive definite".into(),
                ))
            }
        }
        for b in 0..n2 {
            let mut z = vec![0.0; n2];
            z[b] = 1.0;
            if self.htype_residual(&z) > HTYPE_TOL {
                return Err(Error::InvalidAlgebra(format!(
                    "J_Z^2 != -|Z|^2 Id for basis vector {b}"
                )));
            }
        }
        Ok(())
    }
}
