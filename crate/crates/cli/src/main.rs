use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use qmvd::capacity::{self, MeshChoice, SolverOptions};
use qmvd::curves::{self, SphereSet};
use qmvd::maps::{self, RingConfig};
use qmvd::quadrature::{self, BallRegion};
use qmvd::report::{self, Envelope};
use qmvd::value_distribution::{self as vd, Sphere, Target};
use qmvd::{flow, sampling, Error, GroupPoint, HTypeAlgebra, KaplanNorm, QRMap, SphereQuadrature};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const THREADS_VAR: &str = "QMVD_THREADS";

#[derive(Parser, Debug)]
#[command(name = "qmvd", version, about = "Value-distribution numerics on H-type Carnot groups")]
#[command(group(ArgGroup::new("algebra").args(["group", "config"]).required(true)))]
struct Cli {
    /// Built-in group: H1 or H2.
    #[arg(long, global = true)]
    group: Option<String>,
    /// Algebra file (TOML with n1, n2 and the bracket tensor).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Sphere quadrature nodes.
    #[arg(long, global = true, default_value_t = 20_000)]
    nodes: usize,
    /// Solver grid sizes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Vec<usize>,
    /// Solver tolerance (relative projected gradient).
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Directory for JSON and CSV outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate the norm, build the sphere quadrature and report κ(𝔾,p).
    Calibrate {
        #[arg(long, value_delimiter = ',', default_value = "4")]
        p: Vec<f64>,
    },
    /// Ring capacity: closed form and variational solutions.
    Capacity(CapacityArgs),
    /// Radial-family modulus and the density that realises it.
    Modulus(ModulusArgs),
    /// Polar against Cartesian integration.
    PolarCheck {
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 400_000)]
        samples: usize,
    },
    /// Distortion, counting spot checks and module inequalities for a map.
    MapReport(MapArgs),
    /// Counting-function defects at a list of targets.
    Defects {
        #[arg(long)]
        map: String,
        #[arg(long)]
        r: f64,
        /// Targets `x,y,t;x,y,t;inf`.
        #[arg(long)]
        targets: String,
    },
    /// Exceptional set of radii from sampled A(r).
    Exceptional(ExceptionalArgs),
    /// Ring decomposition of the annulus `s < N < s′` into balls.
    Decompose(DecomposeArgs),
}

#[derive(Args, Debug)]
struct CapacityArgs {
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[arg(long, default_value_t = std::f64::consts::E)]
    big_r: f64,
    /// Exponent; defaults to Q.
    #[arg(long)]
    p: Option<f64>,
    /// Ring centre `x,y,t`.
    #[arg(long, value_delimiter = ',')]
    center: Vec<f64>,
    #[arg(long, value_enum, default_value_t = MeshArg::Auto)]
    mesh: MeshArg,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Only the closed form.
    #[arg(long)]
    closed_form_only: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MeshArg {
    Auto,
    Box,
    Ring,
}

#[derive(Args, Debug)]
struct ModulusArgs {
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = std::f64::consts::E)]
    b: f64,
    /// Half-space normal for the direction set; the full sphere when absent.
    #[arg(long, value_delimiter = ',')]
    normal: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, default_value_t = 400_000)]
    samples: usize,
    #[arg(long, default_value_t = 200)]
    curves: usize,
    /// Also solve for the sector modulus used as c(Q).
    #[arg(long)]
    sector: bool,
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long)]
    map: String,
    /// Radius of the ball the distortion is sampled in.
    #[arg(long, default_value_t = 2.0)]
    radius: f64,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Ring-family configurations for the module inequalities.
    #[arg(long, default_value_t = 5)]
    configs: usize,
}

#[derive(Args, Debug)]
struct ExceptionalArgs {
    #[arg(long)]
    map: String,
    #[arg(long, default_value_t = 0.1)]
    eps0: f64,
    /// Inner distortion; measured from the map when absent.
    #[arg(long)]
    k_inner: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    r0: f64,
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    ratio: f64,
    #[arg(long, default_value_t = 120)]
    count: usize,
    /// Sampled radii per check sphere.
    #[arg(long, default_value_t = 10)]
    checks: usize,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long, default_value_t = 1.0)]
    s: f64,
    #[arg(long, default_value_t = 1.1)]
    s_prime: f64,
    #[arg(long, default_value_t = capacity::LOEWNER_DEFAULT)]
    c_q: f64,
    #[arg(long, default_value_t = 1.0)]
    k_outer: f64,
    #[arg(long, default_value_t = 1.0)]
    k_inner: f64,
    #[arg(long, default_value_t = 10_000)]
    cover_points: usize,
    #[arg(long, default_value_t = 16)]
    multiplicity_points: usize,
}

struct Ctx {
    alg: HTypeAlgebra,
    k: KaplanNorm,
    seed: u64,
    nodes: usize,
    out: Option<PathBuf>,
}

impl Ctx {
    fn quad(&self) -> qmvd::Result<SphereQuadrature> {
        quadrature::build_sphere_quadrature(&self.k, self.nodes, self.seed)
    }

    fn point(&self, c: &[f64]) -> qmvd::Result<GroupPoint> {
        GroupPoint::from_flat(&self.alg, c)
    }

    fn write(&self, name: &str, text: &str) -> qmvd::Result<()> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

fn load_algebra(cli: &Cli) -> qmvd::Result<HTypeAlgebra> {
    match (&cli.group, &cli.config) {
        (Some(g), _) => HTypeAlgebra::builtin(g),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            HTypeAlgebra::from_toml(&text)
        }
        (None, None) => unreachable!("clap requires one of --group/--config"),
    }
}

fn solver_options(cli: &Cli, grid: usize) -> SolverOptions {
    let mut o = SolverOptions { grid, ..SolverOptions::default() };
    if let Some(t) = cli.tol {
        o.tol = t;
    }
    o
}

fn grids(cli: &Cli) -> Vec<usize> {
    if cli.grid.is_empty() {
        vec![SolverOptions::default().grid]
    } else {
        cli.grid.clone()
    }
}

fn parse_targets(ctx: &Ctx, s: &str) -> qmvd::Result<Vec<Target>> {
    let mut out = Vec::new();
    for t in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        if t.eq_ignore_ascii_case("inf") {
            out.push(Target::Infinity);
            continue;
        }
        let c = t
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad target coordinate {x:?}"))))
            .collect::<qmvd::Result<Vec<_>>>()?;
        out.push(Target::Finite(ctx.point(&c)?));
    }
    Ok(out)
}

fn calibrate(ctx: &Ctx, ps: &[f64]) -> qmvd::Result<Value> {
    let cal = qmvd::norm::calibrate_c(&ctx.k)?;
    let quad = ctx.quad()?;
    let checksum = quad.checksum();
    if let Some(dir) = &ctx.out {
        std::fs::create_dir_all(dir)?;
        quad.save(&dir.join("quadrature.json"))?;
    }
    let kappa: Vec<Value> = ps.iter().map(|&p| json!({ "p": p, "kappa": quad.kappa(p) })).collect();
    Ok(json!({
        "group": ctx.alg.name(),
        "q": ctx.alg.q(),
        "calibration": cal,
        "nodes": quad.len(),
        "seed": ctx.seed,
        "sphere_measure": quad.total_weight(),
        "kappa": kappa,
        "quadrature_checksum": checksum,
    }))
}

#[derive(Serialize)]
struct GridRun {
    grid: usize,
    value: f64,
    gap: f64,
    initial_energy: f64,
    iterations: usize,
    gradient_ratio: f64,
    monotone: bool,
    free_nodes: usize,
    field: capacity::GridField,
}

fn capacity_cmd(cli: &Cli, ctx: &Ctx, a: &CapacityArgs) -> qmvd::Result<Value> {
    let q = ctx.k.qf();
    let p = a.p.unwrap_or(q);
    let quad = ctx.quad()?;
    let kp = quad.kappa(p);
    let closed = capacity::ring_capacity(kp, q, p, a.r, a.big_r)?;
    let center = if a.center.is_empty() { GroupPoint::zero(&ctx.alg) } else { ctx.point(&a.center)? };
    let cond = capacity::Condenser::ring(&center, a.r, a.big_r)?;
    let mut runs = Vec::new();
    if !a.closed_form_only {
        for g in grids(cli) {
            let mut o = solver_options(cli, g);
            o.mesh = match a.mesh {
                MeshArg::Auto => MeshChoice::Auto,
                MeshArg::Box => MeshChoice::Box,
                MeshArg::Ring => MeshChoice::RingFitted,
            };
            if let Some(m) = a.max_iterations {
                o.max_iterations = m;
            }
            let res = capacity::variational_capacity(&ctx.k, &cond, p, &o)?;
            runs.push(GridRun {
                grid: g,
                value: res.value,
                gap: (res.value - closed).abs() / closed,
                initial_energy: res.initial_energy,
                iterations: res.iterations,
                gradient_ratio: res.gradient_ratio,
                monotone: res.monotone,
                free_nodes: res.free_nodes,
                field: res.field,
            });
        }
    }
    let gaps_shrink = runs.windows(2).all(|w| w[1].gap <= w[0].gap);
    let csv = std::iter::once("grid,value,gap,iterations".to_string())
        .chain(runs.iter().map(|r| format!("{},{:.16e},{:.16e},{}", r.grid, r.value, r.gap, r.iterations)))
        .collect::<Vec<_>>()
        .join("\n");
    ctx.write("capacity.csv", &(csv + "\n"))?;
    Ok(json!({
        "p": p,
        "r": a.r,
        "big_r": a.big_r,
        "center": center,
        "kappa_p": kp,
        "closed_form": closed,
        "runs": runs,
        "gaps_shrink": gaps_shrink,
    }))
}

fn modulus_cmd(cli: &Cli, ctx: &Ctx, a: &ModulusArgs) -> qmvd::Result<Value> {
    let quad = ctx.quad()?;
    let set = if a.normal.is_empty() {
        SphereSet::Full
    } else {
        if a.normal.len() != ctx.alg.n_top() {
            return Err(Error::Dimension { expected: ctx.alg.n_top().to_string(), got: a.normal.len().to_string() });
        }
        SphereSet::HalfSpace { normal: a.normal.clone(), threshold: a.threshold }
    };
    let q = ctx.k.qf();
    let exact = curves::radial_family_modulus(&ctx.k, &quad, &set, a.a, a.b)?;
    let origin = GroupPoint::zero(&ctx.alg);
    let rho = curves::ring_density_over(&ctx.k, &origin, a.a, a.b, set.clone())?;
    let energy = curves::modulus_upper_bound(&ctx.k, &rho, q, a.samples, ctx.seed)?;
    let family = sample_family(ctx, &quad, &set, a.a, a.b, a.curves)?;
    let (min_integral, argmin) = curves::admissibility_check(&rho, &family);
    let sector = if a.sector {
        let g = grids(cli)[0];
        let res = capacity::sector_modulus(&ctx.k, q, &solver_options(cli, g))?;
        Some(json!({ "grid": g, "value": res.value, "iterations": res.iterations, "monotone": res.monotone }))
    } else {
        None
    };
    Ok(json!({
        "set": set,
        "a": a.a,
        "b": a.b,
        "modulus": exact,
        "density_energy": energy,
        "energy_gap": (energy.value - exact).abs() / exact.max(1e-300),
        "curves": family.len(),
        "min_line_integral": if family.is_empty() { Value::Null } else { json!(min_integral) },
        "argmin": argmin,
        "sector_modulus": sector,
    }))
}

/// Radial curves over quadrature nodes in `set`, chosen with a seeded stream.
fn sample_family(ctx: &Ctx, quad: &SphereQuadrature, set: &SphereSet, a: f64, b: f64, count: usize) -> qmvd::Result<Vec<curves::Curve>> {
    let inside: Vec<&GroupPoint> = quad.nodes.iter().filter(|y| set.contains(y)).collect();
    if inside.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = sampling::rng(ctx.seed, 0x6375);
    (0..count)
        .map(|_| {
            let y = inside[rng.random_range(0..inside.len())];
            flow::flow_curve(&ctx.k, y, a, b, 400)
        })
        .collect()
}

fn polar_cmd(ctx: &Ctx, radius: f64, samples: usize) -> qmvd::Result<Value> {
    let quad = ctx.quad()?;
    let check = quadrature::polar_check(&ctx.k, &quad, radius, samples, ctx.seed)?;
    let csv = std::iter::once("integrand,polar,cartesian,std_error,rel_gap".to_string())
        .chain(check.rows.iter().map(|r| {
            format!("{},{:.16e},{:.16e},{:.16e},{:.16e}", r.integrand, r.polar, r.cartesian, r.std_error, r.rel_gap)
        }))
        .collect::<Vec<_>>()
        .join("\n");
    ctx.write("polar.csv", &(csv + "\n"))?;
    serde_json::to_value(&check).map_err(|e| Error::Io(e.to_string()))
}

fn map_report(ctx: &Ctx, a: &MapArgs) -> qmvd::Result<Value> {
    let f = QRMap::parse(&ctx.alg, &a.map)?;
    let quad = ctx.quad()?;
    let region = BallRegion { center: GroupPoint::zero(&ctx.alg), radius: a.radius };
    let dist = f.distortion(&ctx.k, &region, a.samples, ctx.seed)?;
    let mut rng = sampling::rng(ctx.seed, 0x6e72);
    let mut counts = Vec::new();
    for _ in 0..3 {
        let c: Vec<f64> = (0..ctx.alg.n_top()).map(|_| 0.5 * sampling::normal(&mut rng)).collect();
        let y = ctx.point(&c)?;
        for r in [0.5, 1.0, 2.0, 5.0] {
            counts.push(json!({ "target": y, "r": r, "n": f.counting_n(&ctx.k, r, &y)? }));
        }
    }
    let configs = maps::sample_ring_configs(&f, a.configs, ctx.seed);
    let mut verdicts = Vec::new();
    for RingConfig { set, centre, a: lo, b: hi } in &configs {
        let rep = maps::module_inequality_report(&f, &ctx.k, &quad, set, centre, *lo, *hi, dist.k_outer, dist.k_inner);
        verdicts.push(match rep {
            Ok(r) => serde_json::to_value(&r).map_err(|e| Error::Io(e.to_string()))?,
            Err(e) => json!({ "skipped": e.to_string() }),
        });
    }
    Ok(json!({
        "map": f.descriptor().to_string(),
        "degree": f.degree(),
        "distortion": dist,
        "counting": counts,
        "inequalities": verdicts,
    }))
}

fn defects_cmd(ctx: &Ctx, map: &str, r: f64, targets: &str) -> qmvd::Result<Value> {
    let f = QRMap::parse(&ctx.alg, map)?;
    let quad = ctx.quad()?;
    let targets = parse_targets(ctx, targets)?;
    let rep = vd::defect_report(&f, &ctx.k, &quad, r, &targets)?;
    ctx.write("defects.csv", &vd::defects_csv(&rep))?;
    serde_json::to_value(&rep).map_err(|e| Error::Io(e.to_string()))
}

fn exceptional_cmd(ctx: &Ctx, a: &ExceptionalArgs) -> qmvd::Result<Value> {
    let f = QRMap::parse(&ctx.alg, &a.map)?;
    let quad = ctx.quad()?;
    let k_inner = match a.k_inner {
        Some(v) => v,
        None => {
            let region = BallRegion { center: GroupPoint::zero(&ctx.alg), radius: 2.0 };
            f.distortion(&ctx.k, &region, 2000, ctx.seed)?.k_inner
        }
    };
    let samples = vd::a_grid(&f, &ctx.k, &quad, a.r0, a.ratio, a.count)?;
    ctx.write("a_samples.csv", &vd::a_csv(&samples))?;
    let set = vd::exceptional_set(&samples, vd::ExceptionalParams::new(a.eps0, ctx.k.qf(), k_inner))?;
    let mut rng = sampling::rng(ctx.seed, 0x7370);
    let spheres = (0..2)
        .map(|i| {
            let c: Vec<f64> = (0..ctx.alg.n_top()).map(|_| 0.3 * sampling::normal(&mut rng)).collect();
            Sphere::new(ctx.point(&c)?, [1.0, 2.0][i])
        })
        .collect::<qmvd::Result<Vec<_>>>()?;
    let checks = vd::exceptional_checks(&f, &ctx.k, &quad, &set, &samples, &spheres, a.checks, ctx.seed)?;
    Ok(json!({ "map": f.descriptor().to_string(), "k_inner": k_inner, "set": set, "checks": checks }))
}

fn decompose_cmd(ctx: &Ctx, a: &DecomposeArgs) -> qmvd::Result<Value> {
    let quad = ctx.quad()?;
    let mut p = vd::DecompositionParams::new(a.s, a.s_prime, quad.kappa(ctx.k.qf()), a.c_q);
    p.k_outer = a.k_outer;
    p.k_inner = a.k_inner;
    p.cover_points = a.cover_points;
    p.multiplicity_points = a.multiplicity_points;
    p.seed = ctx.seed;
    let rep = vd::ball_decomposition(&ctx.k, &p)?;
    serde_json::to_value(&rep).map_err(|e| Error::Io(e.to_string()))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Calibrate { .. } => "calibrate",
        Command::Capacity(_) => "capacity",
        Command::Modulus(_) => "modulus",
        Command::PolarCheck { .. } => "polar-check",
        Command::MapReport(_) => "map-report",
        Command::Defects { .. } => "defects",
        Command::Exceptional(_) => "exceptional",
        Command::Decompose(_) => "decompose",
    }
}

fn run(cli: &Cli) -> qmvd::Result<Value> {
    let alg = load_algebra(cli)?;
    let ctx = Ctx { k: KaplanNorm::new(&alg), alg, seed: cli.seed, nodes: cli.nodes, out: cli.out.clone() };
    match &cli.command {
        Command::Calibrate { p } => calibrate(&ctx, p),
        Command::Capacity(a) => capacity_cmd(cli, &ctx, a),
        Command::Modulus(a) => modulus_cmd(cli, &ctx, a),
        Command::PolarCheck { radius, samples } => polar_cmd(&ctx, *radius, *samples),
        Command::MapReport(a) => map_report(&ctx, a),
        Command::Defects { map, r, targets } => defects_cmd(&ctx, map, *r, targets),
        Command::Exceptional(a) => exceptional_cmd(&ctx, a),
        Command::Decompose(a) => decompose_cmd(&ctx, a),
    }
}

fn error_json(kind: &str, message: &str) -> String {
    report::to_json_pretty(&json!({ "schema": report::SCHEMA, "error": { "kind": kind, "message": message } }))
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("{THREADS_VAR} must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err(format!("{THREADS_VAR} must be a positive integer, got {v:?}"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn write_report(dir: &Path, name: &str, text: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.json")), text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            eprint!("{}", error_json("usage", e.render().to_string().trim()));
            return ExitCode::from(2);
        }
    };
    if let Err(msg) = init_threads() {
        eprint!("{}", error_json("usage", &msg));
        return ExitCode::from(2);
    }
    let name = command_name(&cli.command);
    match run(&cli) {
        Ok(body) => {
            let text = report::to_json_pretty(&Envelope::new(name, &body));
            if let Some(dir) = &cli.out {
                if let Err(e) = write_report(dir, name, &text) {
                    eprint!("{}", error_json("io", &e.to_string()));
                    return ExitCode::FAILURE;
                }
            }
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprint!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
