//! Shared fixtures for the benchmarks.

use qmvd::quadrature::build_sphere_quadrature;
use qmvd::{GroupPoint, HTypeAlgebra, KaplanNorm, SphereQuadrature};

pub struct Fixture {
    pub alg: HTypeAlgebra,
    pub k: KaplanNorm,
    pub quad: SphereQuadrature,
    pub points: Vec<GroupPoint>,
}

/// H¹ with a seeded quadrature and a fixed cloud of points.
pub fn h1(nodes: usize) -> Fixture {
    let alg = HTypeAlgebra::heisenberg(1);
    let k = KaplanNorm::new(&alg);
    let quad = build_sphere_quadrature(&k, nodes, 7).expect("quadrature");
    let points = (0..1024)
        .map(|i| {
            let s = i as f64;
            GroupPoint::h1((0.37 * s).sin() * 1.5, (0.91 * s).cos() * 1.5, (0.13 * s).sin() * 2.0)
        })
        .collect();
    Fixture { alg, k, quad, points }
}
