//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use qmvd::capacity::{self, Condenser, SolverOptions};
use qmvd::curves::{self, Curve, SphereSet};
use qmvd::maps::{self, INEQUALITY_TOL};
use qmvd::norm;
use qmvd::quadrature::{self, BallRegion};
use qmvd::value_distribution::{self as vd, Sphere, Target};
use qmvd::{flow, sampling, GroupPoint, HTypeAlgebra, KaplanNorm, QRMap, SphereQuadrature};
use rand::Rng;
use std::f64::consts::{E, PI};
use std::process::Command;
use std::time::{Duration, Instant};

const NODES: usize = 20_000;
const SEED: u64 = 7;
const BUILTIN_MAPS: [&str; 5] = ["identity", "dilate:2.0", "translate:0.5,-0.3,0.2", "winding:2", "winding:3"];

// 1
const POLAR_TOL: f64 = 0.01;
const POLAR_SAMPLES: usize = 400_000;
const POLAR_TIME: Duration = Duration::from_secs(60);
// 2
const CALIBRATION_GAP: f64 = 10.0;
const CALIBRATION_C_TOL: f64 = 0.01;
// 3
const FLOW_STEP: f64 = 1e-3;
const FLOW_DRIFT: f64 = 1e-6;
const FLOW_LENGTH_TOL: f64 = 1e-4;
// 4
const CAPACITY_GRIDS: [usize; 3] = [24, 32, 48];
const CAPACITY_TOL: f64 = 0.10;
const CAPACITY_TIME: Duration = Duration::from_secs(300);
// 5
const MODULUS_TOL: f64 = 0.02;
const MODULUS_CURVES: usize = 200;
const MODULUS_SAMPLES: usize = 400_000;
const ADMISSIBLE_MIN: f64 = 0.999;
// 6
const DISTORTION_TOL: f64 = 0.02;
const NU_TOL: f64 = 0.01;
const A_TOL: f64 = 0.02;
const DEFECT_MAX: f64 = 0.05;
// 7, 8
const INEQUALITY_CONFIGS: usize = 20;
const TRANSFER_TUPLES: usize = 100;
// 9
const EXCEPTIONAL_FRACTION: f64 = 0.95;
// 10
const DECOMPOSITION_D: f64 = 0.1;
const SCALING_FACTOR: f64 = 2.0;
// 11
const LIFT_CURVES: usize = 50;
const LIFT_TOL: f64 = 1e-6;

struct Setup {
    alg: HTypeAlgebra,
    k: KaplanNorm,
    quad: SphereQuadrature,
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_polar(s: &Setup) -> Outcome {
    let start = Instant::now();
    let quad = quadrature::build_sphere_quadrature(&s.k, NODES, SEED).map_err(|e| e.to_string())?;
    let pc = quadrature::polar_check(&s.k, &quad, 1.0, POLAR_SAMPLES, SEED).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = pc.rows.iter().map(|r| r.rel_gap).fold(0.0, f64::max);
    check(
        worst <= POLAR_TOL && pc.sphere_gap <= POLAR_TOL && elapsed <= POLAR_TIME,
        format!("worst integrand gap {worst:.2e}, sigma*(S) = {:.6} ({:.2e}), {:.1?}", pc.sphere_measure, pc.sphere_gap, elapsed),
    )
}

fn c2_calibration(s: &Setup) -> Outcome {
    let cal = norm::calibrate_c(&s.k).map_err(|e| e.to_string())?;
    let ratio = cal.residual_minus10.min(cal.residual_plus10) / cal.residual.max(1e-300);
    check(
        ratio >= CALIBRATION_GAP && (cal.c - 1.0).abs() <= CALIBRATION_C_TOL,
        format!("c = {:.9}, residual {:.2e}, neighbours {:.2e}/{:.2e}, ratio {ratio:.2e}", cal.c, cal.residual, cal.residual_minus10, cal.residual_plus10),
    )
}

fn c3_flow(s: &Setup) -> Outcome {
    let mut rng = sampling::rng(SEED, 3);
    let (mut norm_drift, mut ups_drift, mut len_gap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let c: Vec<f64> = (0..3).map(|_| sampling::normal(&mut rng)).collect();
        let y = s.k.to_level(&GroupPoint::from_flat(&s.alg, &c).unwrap(), 1.0);
        let raw = flow::radial_flow(&s.k, &y, 1.0, E, FLOW_STEP, false).map_err(|e| e.to_string())?;
        norm_drift = norm_drift.max(raw.norm_drift);
        ups_drift = ups_drift.max(raw.upsilon_drift);
        let run = flow::radial_flow(&s.k, &y, 1.0, E, FLOW_STEP, true).map_err(|e| e.to_string())?;
        let l = curves::cc_length(&s.alg, &run.curve).map_err(|e| e.to_string())?;
        let u = s.k.upsilon(&y).map_err(|e| e.to_string())?;
        len_gap = len_gap.max((l - (E - 1.0) / u).abs());
    }
    check(
        norm_drift <= FLOW_DRIFT && ups_drift <= FLOW_DRIFT && len_gap <= FLOW_LENGTH_TOL,
        format!("norm drift {norm_drift:.1e}, upsilon drift {ups_drift:.1e}, length gap {len_gap:.1e}"),
    )
}

fn c4_capacity(s: &Setup) -> Outcome {
    let start = Instant::now();
    let q = s.k.qf();
    let exact = capacity::ring_capacity(s.quad.kappa(q), q, q, 1.0, E).map_err(|e| e.to_string())?;
    let cond = Condenser::ring(&GroupPoint::zero(&s.alg), 1.0, E).map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    for g in CAPACITY_GRIDS {
        let opts = SolverOptions { grid: g, ..SolverOptions::default() };
        let res = capacity::variational_capacity(&s.k, &cond, q, &opts).map_err(|e| e.to_string())?;
        gaps.push((res.value - exact).abs() / exact);
    }
    let elapsed = start.elapsed();
    let shrinking = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *gaps.last().unwrap();
    check(
        last <= CAPACITY_TOL && shrinking && elapsed <= CAPACITY_TIME,
        format!("closed form {exact:.6}, gaps {:?} on grids {CAPACITY_GRIDS:?}, {:.1?}", gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>(), elapsed),
    )
}

fn c5_modulus(s: &Setup) -> Outcome {
    let q = s.k.qf();
    let set = SphereSet::HalfSpace { normal: vec![0.6, -0.8, 0.0], threshold: 0.1 };
    let (a, b) = (1.0, E);
    let exact = curves::radial_family_modulus(&s.k, &s.quad, &set, a, b).map_err(|e| e.to_string())?;
    let rho = curves::ring_density_over(&s.k, &GroupPoint::zero(&s.alg), a, b, set.clone()).map_err(|e| e.to_string())?;
    let energy = curves::modulus_upper_bound(&s.k, &rho, q, MODULUS_SAMPLES, SEED).map_err(|e| e.to_string())?;
    let inside: Vec<&GroupPoint> = s.quad.nodes.iter().filter(|y| set.contains(y)).collect();
    let mut rng = sampling::rng(SEED, 5);
    let family = (0..MODULUS_CURVES)
        .map(|_| flow::flow_curve(&s.k, inside[rng.random_range(0..inside.len())], a, b, 400))
        .collect::<qmvd::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let (min_int, _) = curves::admissibility_check(&rho, &family);
    let gap = (energy.value - exact).abs() / exact;
    check(
        gap <= MODULUS_TOL && min_int >= ADMISSIBLE_MIN,
        format!("modulus {exact:.5}, energy {:.5} (gap {gap:.2e}), min line integral {min_int:.5}", energy.value),
    )
}

fn c6_winding(s: &Setup) -> Outcome {
    let f = QRMap::parse(&s.alg, "winding:2").unwrap();
    let region = BallRegion { center: GroupPoint::zero(&s.alg), radius: 2.0 };
    let d = f.distortion(&s.k, &region, 2000, SEED).map_err(|e| e.to_string())?;
    let dist_ok = (d.k / 2.0 - 1.0).abs() <= DISTORTION_TOL
        && (d.k_outer / 4.0 - 1.0).abs() <= DISTORTION_TOL
        && (d.k_inner / 4.0 - 1.0).abs() <= DISTORTION_TOL;
    let unit = Sphere::about_origin(&s.k, 1.0).map_err(|e| e.to_string())?;
    let mut nu_worst = 0.0f64;
    for r in [1.2, 2.0, 5.0, 20.0] {
        let nu = vd::nu_average(&f, &s.k, &s.quad, r, &unit).map_err(|e| e.to_string())?;
        nu_worst = nu_worst.max((nu.value / 2.0 - 1.0).abs());
    }
    let a = vd::a_counting(&f, &s.k, &s.quad, 1e3).map_err(|e| e.to_string())?;
    let targets = [GroupPoint::h1(0.3, 0.2, 0.1), GroupPoint::h1(-0.5, 0.1, 0.4), GroupPoint::h1(0.1, -0.7, -0.2)]
        .into_iter()
        .map(Target::Finite)
        .collect::<Vec<_>>();
    let rep = vd::defect_report(&f, &s.k, &s.quad, 10.0, &targets).map_err(|e| e.to_string())?;
    check(
        dist_ok && nu_worst <= NU_TOL && (a / 2.0 - 1.0).abs() <= A_TOL && rep.defect_sum <= DEFECT_MAX,
        format!(
            "(K, K_O, K_I) = ({:.4}, {:.4}, {:.4}), worst nu gap {nu_worst:.1e}, A(1e3) = {a:.5}, defect sum {:.3}",
            d.k, d.k_outer, d.k_inner, rep.defect_sum
        ),
    )
}

fn c7_inequalities(s: &Setup) -> Outcome {
    let region = BallRegion { center: GroupPoint::zero(&s.alg), radius: 2.0 };
    let mut failed = Vec::new();
    let mut worst = f64::INFINITY;
    let mut total = 0;
    for (i, name) in BUILTIN_MAPS.iter().enumerate() {
        let f = QRMap::parse(&s.alg, name).unwrap();
        let d = f.distortion(&s.k, &region, 2000, SEED).map_err(|e| e.to_string())?;
        for (j, cfg) in maps::sample_ring_configs(&f, INEQUALITY_CONFIGS, SEED + i as u64).iter().enumerate() {
            let rep = maps::module_inequality_report(&f, &s.k, &s.quad, &cfg.set, &cfg.centre, cfg.a, cfg.b, d.k_outer, d.k_inner)
                .map_err(|e| format!("{name} config {j}: {e}"))?;
            total += 1;
            for v in [rep.outer_bound, rep.inner_bound, rep.lifting_bound] {
                worst = worst.min(v.margin);
                if !v.holds {
                    failed.push(format!("{name}#{j}"));
                }
            }
        }
    }
    check(
        failed.is_empty(),
        format!("{total} configurations, smallest margin {worst:.2e} (slack {INEQUALITY_TOL}), failures {failed:?}"),
    )
}

fn c8_transfer(s: &Setup) -> Outcome {
    let region = BallRegion { center: GroupPoint::zero(&s.alg), radius: 2.0 };
    let mut failed = 0;
    let mut worst = f64::INFINITY;
    for (i, name) in BUILTIN_MAPS.iter().enumerate() {
        let f = QRMap::parse(&s.alg, name).unwrap();
        let k_inner = f.distortion(&s.k, &region, 2000, SEED).map_err(|e| e.to_string())?.k_inner;
        let mut rng = sampling::rng(SEED + i as u64, 8);
        for _ in 0..TRANSFER_TUPLES {
            let c: Vec<f64> = (0..3).map(|_| 0.3 * sampling::normal(&mut rng)).collect();
            let w = GroupPoint::from_flat(&s.alg, &c).unwrap();
            let r = rng.random_range(0.3..3.0);
            let rho = r * rng.random_range(0.1f64..2.0).exp();
            let sr = rng.random_range(0.3..2.0);
            let t = rng.random_range(0.3..2.0);
            let tc = vd::transfer_check(&f, &s.k, &s.quad, &w, r, rho, sr, t, k_inner).map_err(|e| e.to_string())?;
            worst = worst.min(tc.margin + tc.allowance);
            if !tc.holds {
                failed += 1;
            }
        }
    }
    check(
        failed == 0,
        format!("{} tuples, {failed} failures, smallest margin incl. allowance {worst:.2e}", TRANSFER_TUPLES * BUILTIN_MAPS.len()),
    )
}

fn c9_exceptional(s: &Setup) -> Outcome {
    let f = QRMap::parse(&s.alg, "winding:2").unwrap();
    let samples = vd::a_grid(&f, &s.k, &s.quad, 0.01, 2f64.sqrt(), 120).map_err(|e| e.to_string())?;
    let set = vd::exceptional_set(&samples, vd::ExceptionalParams::new(0.1, s.k.qf(), 4.0)).map_err(|e| e.to_string())?;
    let spheres = [((0.3, 0.1, 0.2), 1.0), ((0.0, 0.0, 0.0), 2.0), ((-0.4, 0.2, -0.1), 0.7), ((0.1, -0.3, 0.5), 1.5)]
        .into_iter()
        .map(|((x, y, t), r)| Sphere::new(GroupPoint::h1(x, y, t), r))
        .collect::<qmvd::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let chk = vd::exceptional_checks(&f, &s.k, &s.quad, &set, &samples, &spheres, 25, SEED).map_err(|e| e.to_string())?;
    check(
        set.log_measure.is_finite()
            && set.log_measure <= set.log_measure_bound
            && chk.points > 0
            && chk.fraction_near_a >= EXCEPTIONAL_FRACTION
            && chk.fraction_stable >= EXCEPTIONAL_FRACTION,
        format!(
            "log measure {:.4} (bound {:.4}), {} points off E, fractions {:.3}/{:.3}",
            set.log_measure, set.log_measure_bound, chk.points, chk.fraction_near_a, chk.fraction_stable
        ),
    )
}

fn c10_decomposition(s: &Setup) -> Outcome {
    let q = s.k.qf();
    let mut reports = Vec::new();
    for d in [DECOMPOSITION_D, DECOMPOSITION_D / 2.0] {
        let mut p = vd::DecompositionParams::new(1.0, 1.0 + d, s.quad.kappa(q), capacity::LOEWNER_DEFAULT);
        p.multiplicity_points = 8;
        p.seed = SEED;
        reports.push(vd::ball_decomposition(&s.k, &p).map_err(|e| e.to_string())?);
    }
    let ratio = reports[1].ball_count / reports[0].ball_count;
    let ideal = 2f64.powf(q - 1.0);
    let r0 = &reports[0];
    check(
        reports.iter().all(|r| r.uncovered == 0 && r.z_bound_holds && r.cover_points == 10_000)
            && ratio >= ideal / SCALING_FACTOR
            && ratio <= ideal * SCALING_FACTOR,
        format!(
            "uncovered {}/{}, Z-multiplicity {} <= {:.2e}, count ratio {ratio:.2} (ideal {ideal})",
            r0.uncovered + reports[1].uncovered,
            r0.cover_points + reports[1].cover_points,
            r0.z_multiplicity_max.max(reports[1].z_multiplicity_max),
            r0.z_bound
        ),
    )
}

/// Smooth curve with winding angle and radius kept away from the vertical axis.
fn random_domain_curve(alg: &HTypeAlgebra, rng: &mut sampling::SeededRng) -> Curve {
    let (r0, th0, t0) = (rng.random_range(0.6..1.4), rng.random_range(0.0..2.0 * PI), rng.random_range(-1.0..1.0));
    let (ra, tha, ta) = (rng.random_range(-0.3..0.3), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
    let freq = rng.random_range(1.0..4.0);
    let ts: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
    let pts = ts
        .iter()
        .map(|&t| {
            let r = r0 + ra * (freq * PI * t).sin();
            let th = th0 + tha * t;
            GroupPoint::from_flat(alg, &[r * th.cos(), r * th.sin(), t0 + ta * (freq * t).sin()]).unwrap()
        })
        .collect();
    Curve::new(ts, pts, false).unwrap()
}

fn c11_lifting(s: &Setup) -> Outcome {
    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    let mut flagged = 0;
    for (i, name) in BUILTIN_MAPS.iter().enumerate() {
        let f = QRMap::parse(&s.alg, name).unwrap();
        let mut rng = sampling::rng(SEED + i as u64, 11);
        for j in 0..LIFT_CURVES {
            let gamma = random_domain_curve(&s.alg, &mut rng);
            let pts = gamma.points.iter().map(|p| f.apply(p)).collect::<qmvd::Result<Vec<_>>>().map_err(|e| e.to_string())?;
            let beta = Curve::new(gamma.t.clone(), pts, false).unwrap();
            let out = maps::lift_curve(&f, &s.k, &beta, &gamma.points[0], 0.01).map_err(|e| format!("{name}#{j}: {e}"))?;
            worst = worst.max(out.max_residual);
            // the lift from γ(0) is γ itself unless a sheet was skipped
            let sheet = gamma.points.iter().zip(&out.curve.points).map(|(a, b)| a.coord_dist(b)).fold(0.0, f64::max);
            if out.branch_encountered || out.max_residual > LIFT_TOL || sheet > 1e-4 {
                problems.push(format!("{name}#{j}"));
            }
        }
        if f.degree() > 1 {
            // curves through the axis must stop with a flag
            for j in 0..10 {
                let a = rng.random_range(0.0..2.0 * PI);
                let ts: Vec<f64> = (0..=100).map(|i| i as f64 / 50.0).collect();
                let pts = ts.iter().map(|t| GroupPoint::h1((1.0 - t) * a.cos(), (1.0 - t) * a.sin(), 0.1 * j as f64)).collect();
                let beta = Curve::new(ts, pts, false).unwrap();
                let x0 = f.fiber(&beta.points[0]).map_err(|e| e.to_string())?[0].0.clone();
                let out = maps::lift_curve(&f, &s.k, &beta, &x0, 0.01).map_err(|e| format!("{name} axis#{j}: {e}"))?;
                if out.branch_encountered && out.stopped_at.is_some_and(|t| t <= 1.0) {
                    flagged += 1;
                } else {
                    problems.push(format!("{name} axis#{j} not flagged"));
                }
            }
        }
    }
    check(
        problems.is_empty(),
        format!(
            "{} curves, worst residual {worst:.1e}, {flagged} axis crossings flagged, problems {problems:?}",
            LIFT_CURVES * BUILTIN_MAPS.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qmvd")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(out.stdout)
}

fn c12_determinism(_: &Setup) -> Outcome {
    let runs: [&[&str]; 4] = [
        &["--group", "H1", "calibrate", "--nodes", "5000"],
        &["--group", "H1", "map-report", "--map", "winding:3"],
        &["--group", "H1", "exceptional", "--map", "winding:2", "--count", "60"],
        &["--group", "H1", "capacity", "--grid", "12"],
    ];
    for args in runs {
        let a = run_cli(args)?;
        let b = run_cli(args)?;
        if a != b {
            return Err(format!("outputs differ for {args:?}"));
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut sums = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        run_cli(&["--group", "H1", "calibrate", "--nodes", "5000", "--out", out.to_str().unwrap()])?;
        sums.push(std::fs::read(out.join("quadrature.json")).map_err(|e| e.to_string())?);
    }
    check(sums[0] == sums[1], format!("{} commands and the persisted quadrature are byte-identical", runs.len()))
}

fn main() {
    let alg = HTypeAlgebra::heisenberg(1);
    let k = KaplanNorm::new(&alg);
    let quad = quadrature::build_sphere_quadrature(&k, NODES, SEED).expect("quadrature");
    let setup = Setup { alg, k, quad };
    let criteria: [(&str, fn(&Setup) -> Outcome); 12] = [
        ("polar coordinates", c1_polar),
        ("norm calibration", c2_calibration),
        ("radial flow", c3_flow),
        ("ring capacity", c4_capacity),
        ("radial-family modulus", c5_modulus),
        ("winding map k=2", c6_winding),
        ("module inequalities", c7_inequalities),
        ("nu transfer inequality", c8_transfer),
        ("exceptional set", c9_exceptional),
        ("ball decomposition", c10_decomposition),
        ("lifting", c11_lifting),
        ("determinism", c12_determinism),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f(&setup);
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.1?}]", i + 1, start.elapsed());
    }
    if failures > 0 {
        eprintln!("{failures} criteria failed");
        std::process::exit(1);
    }
}
