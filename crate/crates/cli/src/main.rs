//! `gstein` command-line front end.
//!
//! Every command writes one report: a JSON envelope with the merged
//! configuration, its SHA-256, the seed and the library version, or a CSV
//! table where the command has one. Output bytes depend only on the
//! configuration; `--with-timing` adds the wall time.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use gstein::dejong::{dejong_bound, demo_sequence, family_instance, CdPolicy, Family};
use gstein::distances::{
    d2_dictionary, d2_reference_dictionary, kolmogorov, smoothing_bound, wasserstein1, wasserstein1_vs_centered_gamma,
    D2Target,
};
use gstein::gamma_dist::centered_gamma_cdf;
use gstein::hoeffding::{
    component_stats, hoeffding_decompose_exact, hoeffding_decompose_to_order, mask_coords, verify_degeneracy,
};
use gstein::malliavin_gauss::{gauss_gamma_bound, GaussChaosFunctional};
use gstein::malliavin_poisson::{poisson_gamma_bound, seeded_second_order, PoissonChaosFunctional, PoissonSpace};
use gstein::model::{parse, GaussSpec, HoeffdingSpec, PoissonSpec};
use gstein::stein::{certify_bounds, explosion_report, residual_stats, solve_stein, GridSpec, Target};
use gstein::{testfn, CenteredGammaParams, Error, GammaParams};

/// Version of the JSON report layout.
const SCHEMA: &str = "gstein-report/1";

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VIOLATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "gstein",
    version,
    about = "Gamma Stein solver, bound certifier and de Jong experiments"
)]
struct Cli {
    /// JSON file of option values; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Include the wall time in the report.
    #[arg(long, global = true)]
    with_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Stein equation for one test function on a grid.
    Solve(SolveArgs),
    /// Check the smoothness bounds of Stein solutions.
    Certify(CertifyArgs),
    /// Hoeffding decomposition of a kernel on a discrete product space.
    Hoeffding(HoeffdingArgs),
    /// Gamma bounds for degenerate U-statistics.
    Dejong(DejongArgs),
    /// Gamma bounds for Gaussian and Poisson chaos functionals.
    Chaos(ChaosArgs),
    /// Distances between a sample and the centered Gamma law.
    Distance(DistanceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TargetKind {
    Gamma,
    Centered,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
struct SolveArgs {
    #[arg(long, value_enum)]
    target: Option<TargetKind>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// Test function name, e.g. `arctan`, `huber:0.5`, `bumps:7`.
    #[arg(long)]
    h: Option<String>,
    /// `start:stop:step`.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
struct CertifyArgs {
    #[arg(long, value_enum)]
    target: Option<TargetKind>,
    /// Comma-separated shapes.
    #[arg(long, value_delimiter = ',')]
    r: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    nu: Vec<f64>,
    /// A single test function; the full dictionary otherwise.
    #[arg(long)]
    h: Option<String>,
    /// Use the coarse grid.
    #[arg(long)]
    coarse: bool,
    /// Evaluate the explosion witness at each `--r` instead.
    #[arg(long)]
    explosion: bool,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
struct HoeffdingArgs {
    /// Model JSON, inline or a file path.
    #[arg(long)]
    model: Option<String>,
    /// Degree `d` to test degeneracy against.
    #[arg(long)]
    order: Option<usize>,
    /// Decompose in exact rational arithmetic.
    #[arg(long)]
    exact: bool,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
struct DejongArgs {
    #[arg(long)]
    family: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `exact`, `require` or a numeric C_d; used with `--model`.
    #[arg(long)]
    cd: Option<String>,
    /// Single-kernel mode: model JSON, inline or a file path.
    #[arg(long)]
    model: Option<String>,
    /// Fail instead of falling back to Monte Carlo.
    #[arg(long)]
    exact_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ChaosModel {
    Gauss,
    Poisson,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
struct ChaosArgs {
    #[arg(long, value_enum)]
    model: Option<ChaosModel>,
    /// Gauss: identity_nu, perturbed, eigenvalues. Poisson: indicator, seeded.
    #[arg(long)]
    kernel: Option<String>,
    /// Full kernel JSON, inline or a file path; replaces `--kernel`.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    nu: Option<f64>,
    /// Chaos order of built-in Poisson kernels.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    eigenvalues: Vec<f64>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default)]
struct DistanceArgs {
    /// File of samples: a JSON array or one number per line.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Second sample for a two-sample d₁.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long)]
    nu: Option<f64>,
}

/// Error plus exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) | Error::Domain(_) | Error::Contract(_) | Error::UndefinedD(_) => {
                EXIT_CONFIG
            }
            Error::Accuracy { .. } | Error::Resource { .. } => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

type Res<T> = std::result::Result<T, Failure>;

/// The command's result plus its exit status.
struct Outcome {
    result: Value,
    seed: Option<u64>,
    csv: Option<String>,
    violation: bool,
}

impl Outcome {
    fn json(result: Value) -> Self {
        Self {
            result,
            seed: None,
            csv: None,
            violation: false,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("gstein: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Res<u8> {
    if let Ok(t) = std::env::var("GSTEIN_THREADS") {
        let n: usize = t
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err(format!("GSTEIN_THREADS must be a positive integer, got '{t}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_err(e.to_string()))?;
    }
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let start = Instant::now();
    let (name, config, outcome) = match cli.command {
        Command::Solve(a) => {
            let a: SolveArgs = merge(&file, &a)?;
            ("solve", to_value(&a), cmd_solve(&a)?)
        }
        Command::Certify(a) => {
            let a: CertifyArgs = merge(&file, &a)?;
            ("certify", to_value(&a), cmd_certify(&a)?)
        }
        Command::Hoeffding(a) => {
            let a: HoeffdingArgs = merge(&file, &a)?;
            ("hoeffding", to_value(&a), cmd_hoeffding(&a)?)
        }
        Command::Dejong(a) => {
            let a: DejongArgs = merge(&file, &a)?;
            ("dejong", to_value(&a), cmd_dejong(&a)?)
        }
        Command::Chaos(a) => {
            let a: ChaosArgs = merge(&file, &a)?;
            ("chaos", to_value(&a), cmd_chaos(&a)?)
        }
        Command::Distance(a) => {
            let a: DistanceArgs = merge(&file, &a)?;
            ("distance", to_value(&a), cmd_distance(&a)?)
        }
    };
    let text = match cli.format {
        Format::Csv => outcome
            .csv
            .clone()
            .ok_or_else(|| config_err(format!("'{name}' has no CSV output")))?,
        Format::Json => {
            let canonical = serde_json::to_string(&config).expect("config serializes");
            let mut report = json!({
                "schema": SCHEMA,
                "command": name,
                "version": gstein::VERSION,
                "config": config,
                "config_hash": hex::encode(Sha256::digest(canonical.as_bytes())),
                "seed": outcome.seed,
                "result": outcome.result,
            });
            if cli.with_timing {
                report["wall_time_s"] = json!(start.elapsed().as_secs_f64());
            }
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
        }
    };
    match &cli.output {
        Some(p) => fs::write(p, text).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(if outcome.violation { EXIT_VIOLATION } else { 0 })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("arguments serialize")
}

/// Overlay the flags that were given onto the config file values.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(file: &Value, flags: &T) -> Res<T> {
    let mut base = match file {
        Value::Object(m) => m.clone(),
        _ => return Err(config_err("config file must hold a JSON object")),
    };
    if let Value::Object(m) = to_value(flags) {
        for (k, v) in m {
            let given = match &v {
                Value::Null | Value::Bool(false) => false,
                Value::Array(a) => !a.is_empty(),
                _ => true,
            };
            if given {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| config_err(format!("config: {e}")))
}

fn need<T: Copy>(v: Option<T>, flag: &str) -> Res<T> {
    v.ok_or_else(|| config_err(format!("--{flag} is required")))
}

/// Inline JSON, or the contents of the named file.
fn json_arg(s: &str) -> Res<String> {
    if s.trim_start().starts_with('{') {
        Ok(s.to_string())
    } else {
        fs::read_to_string(s).map_err(|e| config_err(format!("{s}: {e}")))
    }
}

fn build_target(kind: TargetKind, r: Option<f64>, lambda: Option<f64>, nu: Option<f64>) -> Res<Target> {
    Ok(match kind {
        TargetKind::Gamma => Target::Gamma(GammaParams::new(need(r, "r")?, lambda.unwrap_or(1.0))?),
        TargetKind::Centered => Target::Centered(CenteredGammaParams::new(need(nu, "nu")?)?),
    })
}

fn parse_grid(s: &str) -> Res<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_err(format!("grid must be start:stop:step, got '{s}'")))?;
    let [a, b, step] = parts[..] else {
        return Err(config_err(format!("grid must be start:stop:step, got '{s}'")));
    };
    if !(step > 0.0 && b >= a && a.is_finite() && b.is_finite()) {
        return Err(config_err(format!("bad grid '{s}'")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    if n > 1_000_000 {
        return Err(config_err("grid has more than 10⁶ points"));
    }
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}

fn cmd_solve(a: &SolveArgs) -> Res<Outcome> {
    let target = build_target(a.target.unwrap_or(TargetKind::Gamma), a.r, a.lambda, a.nu)?;
    let h = testfn::by_name(a.h.as_deref().unwrap_or("arctan"))?;
    let xs = parse_grid(a.grid.as_deref().unwrap_or("-10:10:0.1"))?;
    let sol = solve_stein(&h, target)?;
    let mut rows = Vec::with_capacity(xs.len());
    for &x in &xs {
        let (f, fp) = sol.eval_pair(x)?;
        rows.push([x, f, fp]);
    }
    let res = residual_stats(&sol, &xs)?;
    let mut csv = String::from("x,f,fprime\n");
    for [x, f, fp] in &rows {
        csv.push_str(&format!("{x},{f:.15e},{fp:.15e}\n"));
    }
    Ok(Outcome {
        result: json!({
            "function": h.name,
            "target": target,
            "expected_h": sol.expected_h,
            "residual": res,
            "grid": rows,
        }),
        seed: None,
        csv: Some(csv),
        violation: false,
    })
}

fn cmd_certify(a: &CertifyArgs) -> Res<Outcome> {
    if a.explosion {
        if a.r.is_empty() {
            return Err(config_err("--explosion needs --r"));
        }
        let reports =
            a.r.iter()
                .map(|&r| explosion_report(r))
                .collect::<gstein::Result<Vec<_>>>()?;
        let violation = reports.iter().any(|e| e.closed_form < e.lower_bound);
        return Ok(Outcome {
            violation,
            ..Outcome::json(json!({ "explosion": reports }))
        });
    }
    let kind = a.target.unwrap_or(TargetKind::Gamma);
    let mut targets = Vec::new();
    match kind {
        TargetKind::Gamma => {
            let rs = if a.r.is_empty() {
                vec![0.5, 1.0, 2.0, 5.0]
            } else {
                a.r.clone()
            };
            let ls = if a.lambda.is_empty() {
                vec![1.0]
            } else {
                a.lambda.clone()
            };
            for &r in &rs {
                for &l in &ls {
                    targets.push(Target::Gamma(GammaParams::new(r, l)?));
                }
            }
        }
        TargetKind::Centered => {
            let nus = if a.nu.is_empty() {
                vec![0.5, 1.0, 2.0, 7.0]
            } else {
                a.nu.clone()
            };
            for &nu in &nus {
                targets.push(Target::Centered(CenteredGammaParams::new(nu)?));
            }
        }
    }
    let funcs = match &a.h {
        Some(name) => vec![testfn::by_name(name)?],
        None => testfn::dictionary(),
    };
    let grid = if a.coarse {
        GridSpec::coarse()
    } else {
        GridSpec::default()
    };
    let mut reports = Vec::new();
    for t in &targets {
        for h in &funcs {
            reports.push(certify_bounds(h, *t, &grid)?);
        }
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    Ok(Outcome {
        violation: failed > 0,
        ..Outcome::json(json!({ "checked": reports.len(), "violations": failed, "reports": reports }))
    })
}

fn cmd_hoeffding(a: &HoeffdingArgs) -> Res<Outcome> {
    let spec: HoeffdingSpec = parse(&json_arg(
        a.model.as_deref().ok_or_else(|| config_err("--model is required"))?,
    )?)?;
    let m = spec.build()?;
    let order = a.order.or(m.order);
    let dec = hoeffding_decompose_to_order(&m.kernel, &m.space, m.space.n())?;
    let sigma2: Vec<Value> = dec
        .sigma2
        .iter()
        .map(|(&mask, &v)| json!({ "coords": mask_coords(mask), "sigma2": v }))
        .collect();
    let mut result = json!({ "n": m.space.n(), "mean": dec.mean, "sigma2": sigma2 });
    if let Some(d) = order {
        result["degeneracy"] = to_value(&verify_degeneracy(&dec, d, 1e-10));
        match component_stats(&dec, d) {
            Ok(s) => result["components"] = to_value(&s),
            Err(Error::UndefinedD(_)) => result["components"] = Value::Null,
            Err(e) => return Err(e.into()),
        }
    }
    if a.exact {
        let ex = hoeffding_decompose_exact(&m.kernel, &m.space, m.space.n())?;
        let s: Vec<Value> = ex
            .sigma2
            .keys()
            .map(|&mask| json!({ "coords": mask_coords(mask), "sigma2": ex.component_moment(mask, 2).to_string() }))
            .collect();
        result["sigma2_exact"] = Value::Array(s);
    }
    Ok(Outcome::json(result))
}

fn cmd_dejong(a: &DejongArgs) -> Res<Outcome> {
    let seed = a.seed.unwrap_or(0);
    if let Some(model) = &a.model {
        let m = parse::<HoeffdingSpec>(&json_arg(model)?)?.build()?;
        let d = m.order.ok_or_else(|| config_err("the model needs an 'order'"))?;
        let nu = a.nu.or(m.nu).ok_or_else(|| config_err("--nu is required"))?;
        let policy: CdPolicy = a.cd.as_deref().unwrap_or("exact").parse()?;
        let b = dejong_bound(&m.kernel, &m.space, d, nu, policy)?;
        return Ok(Outcome::json(to_value(&b)));
    }
    let family: Family = a.family.as_deref().unwrap_or("rademacher-quadratic").parse()?;
    let nu = need(a.nu, "nu")?;
    if a.n.is_empty() {
        return Err(config_err("--n is required"));
    }
    if a.exact_only {
        for &n in &a.n {
            family_instance(family, n, nu, seed)?.space.checked_size()?;
        }
    }
    let table = demo_sequence(family, &a.n, nu, seed)?;
    Ok(Outcome {
        result: to_value(&table),
        seed: Some(seed),
        csv: Some(table.to_csv()),
        violation: false,
    })
}

fn cmd_chaos(a: &ChaosArgs) -> Res<Outcome> {
    let model = need(a.model, "model")?;
    let seed = a.seed.unwrap_or(0);
    let samples = a.samples.unwrap_or(100_000);
    let nu = need(a.nu, "nu")?;
    let result = match model {
        ChaosModel::Gauss => {
            let f = match (&a.spec, a.kernel.as_deref()) {
                (Some(s), _) => parse::<GaussSpec>(&json_arg(s)?)?.build()?,
                (None, Some("identity_nu")) => GaussChaosFunctional::identity_nu(whole(nu)?, whole(nu)?)?,
                (None, Some("perturbed")) => GaussChaosFunctional::perturbed(whole(nu)?, a.eps.unwrap_or(0.1))?,
                (None, Some("eigenvalues")) => GaussChaosFunctional::eigenvalues(&a.eigenvalues)?,
                (None, k) => return Err(config_err(format!("unknown gauss kernel {k:?}"))),
            };
            to_value(&gauss_gamma_bound(&f, nu, samples, seed)?)
        }
        ChaosModel::Poisson => {
            let cells = a.cells.unwrap_or(gstein::malliavin_poisson::DEFAULT_CELLS);
            let f = match (&a.spec, a.kernel.as_deref()) {
                (Some(s), _) => parse::<PoissonSpec>(&json_arg(s)?)?.build()?,
                (None, Some("indicator")) => {
                    if a.p.unwrap_or(1) != 1 {
                        return Err(config_err("the indicator kernel has order 1"));
                    }
                    // F = I₁(2·1_B) with μ(B) = ν/2 on the first half of the cells.
                    let half: Vec<usize> = (0..cells / 2).collect();
                    if half.is_empty() {
                        return Err(config_err("the indicator kernel needs at least 2 cells"));
                    }
                    let space = PoissonSpace::uniform(cells, nu * cells as f64 / (2 * half.len()) as f64)?;
                    PoissonChaosFunctional::indicator(space, &half, 2.0)?
                }
                (None, Some("seeded")) => {
                    if a.p.unwrap_or(2) != 2 {
                        return Err(config_err("the seeded kernel has order 2"));
                    }
                    seeded_second_order(PoissonSpace::uniform(cells, 1.0)?, nu, seed)?
                }
                (None, k) => return Err(config_err(format!("unknown poisson kernel {k:?}"))),
            };
            to_value(&poisson_gamma_bound(&f, nu, samples, seed)?)
        }
    };
    Ok(Outcome {
        seed: Some(seed),
        ..Outcome::json(result)
    })
}

fn whole(nu: f64) -> Res<usize> {
    if nu >= 1.0 && nu.fract() == 0.0 && nu <= 1e6 {
        Ok(nu as usize)
    } else {
        Err(config_err(format!("this kernel needs a whole ν, got {nu}")))
    }
}

fn read_samples(p: &PathBuf) -> Res<Vec<f64>> {
    let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())));
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| config_err(format!("{}: bad number '{l}'", p.display())))
        })
        .collect()
}

fn cmd_distance(a: &DistanceArgs) -> Res<Outcome> {
    let xs = read_samples(a.samples.as_ref().ok_or_else(|| config_err("--samples is required"))?)?;
    let mut result = Map::new();
    if let Some(b) = &a.against {
        let ys = read_samples(b)?;
        result.insert("d1_two_sample".into(), to_value(&wasserstein1(&xs, &ys)?));
    }
    if let Some(nu) = a.nu {
        let c = CenteredGammaParams::new(nu)?;
        let w = vec![1.0 / xs.len().max(1) as f64; xs.len()];
        let d1 = wasserstein1_vs_centered_gamma(&xs, &w, nu)?;
        let d2 = d2_dictionary(&xs, D2Target::Centered(c), &d2_reference_dictionary(nu))?;
        let ks = kolmogorov(&xs, |x| centered_gamma_cdf(x, c).unwrap_or(f64::NAN))?;
        result.insert("d1".into(), json!(d1));
        if d2.value <= 1.0 {
            result.insert("d1_smoothing_bound".into(), json!(smoothing_bound(d2.value)?));
        }
        result.insert("d2_dictionary".into(), to_value(&d2));
        result.insert("kolmogorov".into(), to_value(&ks));
    }
    if result.is_empty() {
        return Err(config_err("give --nu, --against or both"));
    }
    Ok(Outcome::json(Value::Object(result)))
}
