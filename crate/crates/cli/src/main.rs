use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use partrans::discrete_ot::{self, euclidean};
use partrans::games::{self, CoreVerdict};
use partrans::interpolated::{self, CostPair, SiteSet};
use partrans::io::{self, Kind, Options, Problem, ProblemFile};
use partrans::matching::{self, PreferenceProfile, QuantifiedPrefs};
use partrans::multipartition::{self, GoodsField, SearchOptions, Verdict};
use partrans::semidiscrete;
use partrans::{DiscreteMeasure, Error, FieldValues};

#[derive(Parser)]
#[command(name = "partrans", version, about = "Optimal transport, matching, partition and coalition game solvers")]
struct Cli {
    /// Write the result here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of every randomized step
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Tolerance, or grid step of the Nash audits
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assignment and transport problems
    #[command(subcommand)]
    Ot(OtCmd),
    /// Stable matching
    #[command(subcommand)]
    Match(MatchCmd),
    /// Capacity constrained partitions
    #[command(subcommand)]
    Partition(PartitionCmd),
    /// Vector valued capacities
    #[command(subcommand)]
    Multi(MultiCmd),
    /// Transport through finitely many hub sites
    #[command(subcommand)]
    Interp(InterpCmd),
    /// Coalition games and Nash audits
    #[command(subcommand)]
    Game(GameCmd),
    /// Check a problem file and list what is wrong with it
    Validate { file: PathBuf },
}

#[derive(Subcommand)]
enum OtCmd {
    /// Best permutation of a square payoff
    Assign(Input),
    /// Kantorovich problem with dual potentials
    Solve(Input),
    /// Euclidean transport distance with a Lipschitz certificate
    Metric(Input),
}

#[derive(Subcommand)]
enum MatchCmd {
    /// Deferred acceptance
    Gs(Input),
    /// (p,q)-stability of a matching
    Pq(Input),
    /// Stable partition of candidates among capacitated firms
    Partition(Input),
}

#[derive(Subcommand)]
enum PartitionCmd {
    /// Optimal prices and partition
    Solve(Input),
    /// Individual values, at given prices or at the optimum
    Values(Input),
    /// Price adjustment trajectory
    Dynamics(Input),
}

#[derive(Subcommand)]
enum MultiCmd {
    /// Is the capacity matrix reached by some (sub)partition
    Feasible(Input),
    /// Does m dominate m2
    Dominate(Input),
    /// Optimal multipartition
    Solve(Input),
    /// Two nations boundary trace
    Region(Input),
}

#[derive(Subcommand)]
enum InterpCmd {
    /// Congruent partitions for fixed sites
    Solve(Input),
    /// One site improvement step
    Improve(Input),
    /// Alternate solves and site improvements
    Loop(Input),
    /// Excess of the restricted cost over the exact one
    Gap(Input),
    /// Displacement interpolation on the line
    Mccann(Input),
    /// Hedonic market equilibrium
    Hedonic(Input),
}

#[derive(Subcommand)]
enum GameCmd {
    /// Surplus coalition game
    Surplus(Input),
    /// Self-profit coalition game
    Profit(Input),
    /// Core test with an imputation or a balanced collection
    Core(Input),
    /// Grid audit of flat prices and commissions
    Nash(Input),
    /// Free price equilibrium
    Free(Input),
}

/// Problem input: a file and per-field overrides. Values may be a JSON
/// file, inline JSON or a comma separated list of numbers.
#[derive(Args, Default)]
struct Input {
    /// Problem file
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    nu: Option<String>,
    /// Capacities
    #[arg(long)]
    m: Option<String>,
    /// Capacities must be met exactly
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    zeta: Option<String>,
    #[arg(long)]
    sites: Option<String>,
    /// Cost family such as `quadratic`, `split:r=3` or `power:r=2,a=1,b=2`
    #[arg(long)]
    costs: Option<String>,
    #[arg(long)]
    prices: Option<String>,
    #[arg(long)]
    commissions: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    /// Interpolation time
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Number of random initial sites when none are given
    #[arg(long)]
    k: Option<usize>,
}

struct Ctx {
    out: Option<PathBuf>,
    seed: u64,
    tol: Option<f64>,
    format: Format,
}

/// Result of a command: JSON, an optional CSV form and whether it is a
/// semantic negative (infeasible, empty core).
struct Outcome {
    json: Value,
    csv: Option<String>,
    negative: bool,
}

impl Outcome {
    fn of<T: Serialize>(v: &T) -> Result<Self> {
        Ok(Outcome { json: serde_json::to_value(v)?, csv: None, negative: false })
    }

    fn csv(mut self, s: String) -> Self {
        self.csv = Some(s);
        self
    }

    fn negative(mut self, yes: bool) -> Self {
        self.negative = yes;
        self
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    partrans::init_threads_from_env();
    let ctx = Ctx { out: cli.out, seed: cli.seed.unwrap_or(0), tol: cli.tol, format: cli.format };
    match run(&ctx, cli.cmd).and_then(|o| emit(&ctx, &o).map(|_| o.negative)) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            if let Some(Error::Infeasible(msg)) = e.downcast_ref::<Error>() {
                let o = Outcome { json: json!({"status": "infeasible", "message": msg}), csv: None, negative: true };
                if emit(&Ctx { format: Format::Json, ..ctx }, &o).is_ok() {
                    eprintln!("infeasible: {msg}");
                    return ExitCode::from(2);
                }
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit(ctx: &Ctx, o: &Outcome) -> Result<()> {
    let text = match ctx.format {
        Format::Json => serde_json::to_string_pretty(&o.json)? + "\n",
        Format::Csv => o.csv.clone().ok_or_else(|| anyhow!("this command has no CSV output"))?,
    };
    match &ctx.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_value(arg: &str) -> Result<Value> {
    let t = arg.trim();
    if t.starts_with('[') || t.starts_with('{') {
        return serde_json::from_str(t).context("parsing inline JSON");
    }
    let nums: std::result::Result<Vec<f64>, _> = t.split(',').map(|s| s.trim().parse::<f64>()).collect();
    if let Ok(v) = nums {
        return Ok(json!(v));
    }
    read_file(Path::new(t))
}

fn read_file(p: &Path) -> Result<Value> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Merges the file and the overrides and reads them as `kind`.
fn load(kind: Kind, input: &Input) -> Result<(Problem, Options)> {
    let mut v = match &input.file {
        Some(p) => read_file(p)?,
        None => Value::Object(Map::new()),
    };
    let obj = v.as_object_mut().ok_or_else(|| anyhow!("problem file must hold a JSON object"))?;
    let mut set = |key: &str, arg: &Option<String>| -> Result<()> {
        if let Some(a) = arg {
            obj.insert(key.into(), read_value(a).with_context(|| format!("--{key}"))?);
        }
        Ok(())
    };
    set("theta", &input.theta)?;
    set("mu", &input.mu)?;
    set("nu", &input.nu)?;
    set("m", &input.m)?;
    set("zeta", &input.zeta)?;
    set("sites", &input.sites)?;
    set("prices", &input.prices)?;
    set("commissions", &input.commissions)?;
    if let Some(c) = &input.costs {
        let cost = if c.trim_start().starts_with('{') {
            read_value(c)?
        } else {
            serde_json::to_value(CostPair::from_str(c)?)?
        };
        obj.insert("costs".into(), cost);
    }
    if kind == Kind::Partition {
        if let Some(m @ Value::Array(_)) = obj.get("m").cloned() {
            let mode = if input.exact { "exact" } else { "at-most" };
            obj.insert("m".into(), json!({"m": m, "mode": mode}));
        } else if input.exact {
            if let Some(Value::Object(spec)) = obj.get_mut("m") {
                spec.insert("mode".into(), json!("exact"));
            }
        }
    }
    if let Some(s) = input.s {
        obj.insert("s".into(), json!(s));
    }
    let file = ProblemFile::with_kind(kind, &v)?;
    let mut o = file.options;
    o.p = input.p.or(o.p);
    o.q = input.q.or(o.q);
    o.dt = input.dt.or(o.dt);
    o.steps = input.steps.or(o.steps);
    o.iterations = input.iterations.or(o.iterations);
    Ok((file.problem, o))
}

macro_rules! payload {
    ($kind:ident, $input:expr) => {{
        match load(Kind::$kind, $input)? {
            (Problem::$kind(p), o) => (p, o),
            _ => unreachable!("load returns the requested kind"),
        }
    }};
}

fn need<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("missing `{what}`"))
}

fn run(ctx: &Ctx, cmd: Cmd) -> Result<Outcome> {
    match cmd {
        Cmd::Ot(c) => ot(c),
        Cmd::Match(c) => matching_cmd(c),
        Cmd::Partition(c) => partition(ctx, c),
        Cmd::Multi(c) => multi(ctx, c),
        Cmd::Interp(c) => interp(ctx, c),
        Cmd::Game(c) => game(ctx, c),
        Cmd::Validate { file } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let d = io::validate(&text);
            Ok(Outcome::of(&json!({"file": file.display().to_string(), "diagnostics": d}))?)
        }
    }
}

fn ot(c: OtCmd) -> Result<Outcome> {
    match c {
        OtCmd::Assign(i) => {
            let (p, _) = payload!(Assignment, &i);
            Outcome::of(&discrete_ot::solve_assignment(&p.theta)?)
        }
        OtCmd::Solve(i) => {
            let (p, _) = payload!(Kantorovich, &i);
            let theta = need(p.theta, "theta")?;
            Outcome::of(&discrete_ot::solve_kantorovich(&p.mu, &p.nu, &theta, p.sense, p.balance)?)
        }
        OtCmd::Metric(i) => {
            let (p, _) = payload!(Kantorovich, &i);
            Outcome::of(&discrete_ot::monge_metric_distance(&p.mu, &p.nu, p.balance, &euclidean)?)
        }
    }
}

fn prefs_of(p: &io::MarriageProblem) -> Result<(PreferenceProfile, Option<QuantifiedPrefs>)> {
    match (&p.theta_m, &p.theta_w, &p.men, &p.women) {
        (Some(a), Some(b), _, _) => {
            let q = QuantifiedPrefs::new(a.clone(), b.clone())?;
            Ok((q.to_profile()?, Some(q)))
        }
        (_, _, Some(m), Some(w)) => Ok((PreferenceProfile::new(m.clone(), w.clone())?, None)),
        _ => bail!("give theta_m and theta_w, or men and women"),
    }
}

fn matching_cmd(c: MatchCmd) -> Result<Outcome> {
    match c {
        MatchCmd::Gs(i) => {
            let (p, _) = payload!(Marriage, &i);
            let (profile, _) = prefs_of(&p)?;
            let tau = matching::gale_shapley(&profile, p.proposing)?;
            let blocking = matching::find_blocking_pairs(&tau, &profile)?;
            Outcome::of(&json!({"tau": tau, "blocking_pairs": blocking}))
        }
        MatchCmd::Pq(i) => {
            let (p, o) = payload!(Marriage, &i);
            let (profile, q) = prefs_of(&p)?;
            let q = need(q, "theta_m and theta_w")?;
            let tau = match p.tau {
                Some(t) => t,
                None => matching::gale_shapley(&profile, p.proposing)?,
            };
            let (pp, qq) = (o.p.unwrap_or(0.0), o.q.unwrap_or(0.0));
            let k_max = o.k_max.unwrap_or(tau.len());
            let verdict = matching::pq_stability_check(&tau, &q, pp, qq, k_max)?;
            Outcome::of(&json!({"tau": tau, "p": pp, "q": qq, "stable": verdict.is_stable(), "verdict": verdict}))
        }
        MatchCmd::Partition(i) => {
            let (p, _) = payload!(Partition, &i);
            let (phi, psi) = (need(p.phi, "phi")?, need(p.psi, "psi")?);
            let m = need(p.m, "m")?;
            let l = matching::gs_partition(&p.mu, &phi, &psi, &m)?;
            let blocking = matching::audit_partition_stability(&phi, &psi, &l);
            let csv = io::labeling_csv(&l, &p.mu);
            Ok(Outcome::of(&json!({"labeling": l, "blocking_pairs": blocking}))?.csv(csv))
        }
    }
}

fn field(p: &io::PartitionProblem) -> Result<FieldValues> {
    Ok(need(p.theta.as_ref(), "theta")?.evaluate(&p.mu)?)
}

fn partition(ctx: &Ctx, c: PartitionCmd) -> Result<Outcome> {
    match c {
        PartitionCmd::Solve(i) => {
            let (p, _) = payload!(Partition, &i);
            let theta = field(&p)?;
            let r = semidiscrete::solve_prices(&p.mu, &theta, &need(p.m, "m")?, None)?;
            let csv = io::labeling_csv(&r.labeling, &p.mu);
            Ok(Outcome::of(&r)?.csv(csv))
        }
        PartitionCmd::Values(i) => {
            let (p, _) = payload!(Partition, &i);
            let theta = field(&p)?;
            match &p.prices {
                Some(prices) => {
                    let q = p.commissions.clone().unwrap_or_else(|| vec![0.0; prices.len()]);
                    Outcome::of(&semidiscrete::profits(prices, &q, &theta, &p.mu)?)
                }
                None => {
                    let m = need(p.m, "m or prices")?;
                    let r = semidiscrete::solve_prices(&p.mu, &theta, &m, None)?;
                    let mut out = json!({"prices": r.prices, "masses": r.masses, "values": r.values});
                    if let Some(io::FieldInput::Field(partrans::UtilityField::Scaled { lambda, base })) = &p.theta {
                        if m.total() <= p.mu.total_mass() {
                            out["closed_form"] = json!(semidiscrete::scaled_family_values(lambda, base, &p.mu, &m.m)?);
                        }
                    }
                    let csv = io::csv_table(&["agent", "mass", "value"], &rows3(&r.masses, &r.values));
                    Ok(Outcome::of(&out)?.csv(csv))
                }
            }
        }
        PartitionCmd::Dynamics(i) => {
            let (p, o) = payload!(Partition, &i);
            let theta = field(&p)?;
            let m = need(p.m, "m")?;
            let p0 = p.prices.clone().unwrap_or_else(|| vec![0.0; m.len()]);
            let dt = o.dt.unwrap_or(0.1);
            let threshold = o.threshold.or(ctx.tol.map(|t| 1.0 / t)).unwrap_or(1e6);
            let d = semidiscrete::price_dynamics(&p0, &p.mu, &theta, &m.m, dt, o.steps.unwrap_or(200), threshold)?;
            let csv = io::dynamics_csv(&d, dt);
            Ok(Outcome::of(&d)?.csv(csv))
        }
    }
}

fn rows3(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    a.iter().zip(b).enumerate().map(|(k, (x, y))| vec![(k + 1) as f64, *x, *y]).collect()
}

fn goods(p: &io::MultiProblem) -> Result<GoodsField> {
    Ok(GoodsField::new(need(p.zeta.as_ref(), "zeta")?)?)
}

fn multi(ctx: &Ctx, c: MultiCmd) -> Result<Outcome> {
    match c {
        MultiCmd::Feasible(i) => {
            let (p, o) = payload!(Multipartition, &i);
            let zeta = goods(&p)?;
            let m = need(p.m.as_ref(), "m")?;
            let opts = SearchOptions {
                seed: o.seed.unwrap_or(ctx.seed),
                iterations: o.iterations.unwrap_or(SearchOptions::default().iterations),
                ..SearchOptions::default()
            };
            let f = multipartition::feasibility_test_with(m, &p.mu, &zeta, p.mode, &opts)?;
            let negative = f.verdict == Verdict::Infeasible;
            Ok(Outcome::of(&f)?.negative(negative))
        }
        MultiCmd::Dominate(i) => {
            let (p, _) = payload!(Multipartition, &i);
            Outcome::of(&multipartition::dominance_test(need(p.m.as_ref(), "m")?, need(p.m2.as_ref(), "m2")?)?)
        }
        MultiCmd::Solve(i) => {
            let (p, _) = payload!(Multipartition, &i);
            let zeta = goods(&p)?;
            let theta = need(p.theta.as_ref(), "theta")?.evaluate(&p.mu)?;
            let r = multipartition::solve_multipartition(&p.mu, &zeta, need(p.m.as_ref(), "m")?, &theta, p.mode)?;
            let csv = io::labeling_csv(&r.labeling, &p.mu);
            Ok(Outcome::of(&r)?.csv(csv))
        }
        MultiCmd::Region(i) => {
            let (p, _) = payload!(Multipartition, &i);
            let share = need(p.share.as_ref(), "share")?;
            let thresholds = p.thresholds.clone().unwrap_or_else(|| (0..=100).map(|k| k as f64 * 0.05).collect());
            let pts = multipartition::two_nations_region(share, &p.mu, &thresholds)?;
            let csv = io::region_points_csv(&pts);
            Ok(Outcome::of(&pts)?.csv(csv))
        }
    }
}

fn random_sites(mu: &DiscreteMeasure, k: usize, seed: u64) -> Result<SiteSet> {
    if !mu.has_coordinates() || k == 0 || k > mu.len() {
        bail!("cannot draw {k} sites from {} atoms", mu.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, mu.len(), k).into_vec();
    idx.sort_unstable();
    Ok(SiteSet::new(idx.iter().map(|&x| mu.point(x).to_vec()).collect())?)
}

/// Exact cost the hub sites interpolate, `k |x - y|^r`.
fn exact_costs(mu: &DiscreteMeasure, nu: &DiscreteMeasure, costs: &CostPair) -> Result<Vec<Vec<f64>>> {
    let (r, k) = match *costs {
        CostPair::Split { r } => (r, 1.0),
        CostPair::Power { r, a, b } if r > 1.0 => {
            let e = 1.0 / (1.0 - r);
            (r, (a.powf(e) + b.powf(e)).powf(1.0 - r))
        }
        CostPair::Power { r, a, b } => (r, a.min(b)),
        CostPair::Matrix { .. } => bail!("the exact cost is only known for the geometric families"),
    };
    let c = interpolated::power_cost_matrix(mu, nu, r)?;
    Ok(c.into_iter().map(|row| row.into_iter().map(|v| k * v).collect()).collect())
}

fn interp(ctx: &Ctx, c: InterpCmd) -> Result<Outcome> {
    let sites_of = |p: &io::InterpProblem, k: Option<usize>, o: &Options| -> Result<SiteSet> {
        match &p.sites {
            Some(s) => Ok(s.clone()),
            None => random_sites(&p.mu, k.unwrap_or(4), o.seed.unwrap_or(ctx.seed)),
        }
    };
    let costs_of = |p: &io::InterpProblem| p.costs.clone().unwrap_or(CostPair::Split { r: 2.0 });
    match c {
        InterpCmd::Solve(i) => {
            let (p, o) = payload!(Interp, &i);
            let sites = sites_of(&p, i.k, &o)?;
            Outcome::of(&interpolated::solve_congruent(&p.mu, &p.nu, &sites, &costs_of(&p))?)
        }
        InterpCmd::Improve(i) => {
            let (p, o) = payload!(Interp, &i);
            let sites = sites_of(&p, i.k, &o)?;
            let costs = costs_of(&p);
            let part = interpolated::solve_congruent(&p.mu, &p.nu, &sites, &costs)?;
            Outcome::of(&interpolated::improve_sites(&sites, &part, &p.mu, &p.nu, &costs)?)
        }
        InterpCmd::Loop(i) => {
            let (p, o) = payload!(Interp, &i);
            let sites = sites_of(&p, i.k, &o)?;
            let t = interpolated::lloyd_loop(&p.mu, &p.nu, &sites, &costs_of(&p), o.iterations.unwrap_or(50))?;
            let csv = t.csv();
            Ok(Outcome::of(&t)?.csv(csv))
        }
        InterpCmd::Gap(i) => {
            let (p, o) = payload!(Interp, &i);
            let sites = sites_of(&p, i.k, &o)?;
            let costs = costs_of(&p);
            let exact = exact_costs(&p.mu, &p.nu, &costs)?;
            Outcome::of(&interpolated::gap_phi(&p.mu, &p.nu, &sites, &costs, &exact)?)
        }
        InterpCmd::Mccann(i) => {
            let (p, _) = payload!(Interp, &i);
            let s = p.s.unwrap_or(0.5);
            let ms = interpolated::mccann_interpolate(&p.mu, &p.nu, s)?;
            let w = interpolated::w1d(&p.mu, &p.nu, 2.0)?;
            let (a, b) = (interpolated::w1d(&p.mu, &ms, 2.0)?, interpolated::w1d(&ms, &p.nu, 2.0)?);
            let pts: Vec<Vec<f64>> = (0..ms.len()).map(|k| vec![ms.point(k)[0], ms.weights()[k]]).collect();
            let csv = io::csv_table(&["x", "weight"], &pts);
            Ok(Outcome::of(&json!({"s": s, "measure": ms, "w2": w, "w2_to_start": a, "w2_to_end": b}))?.csv(csv))
        }
        InterpCmd::Hedonic(i) => {
            let (p, o) = payload!(Interp, &i);
            let sites = sites_of(&p, i.k, &o)?;
            Outcome::of(&interpolated::hedonic_equilibrium(&p.mu, &p.nu, &sites, &costs_of(&p))?)
        }
    }
}

fn game(ctx: &Ctx, c: GameCmd) -> Result<Outcome> {
    match c {
        GameCmd::Surplus(i) => {
            let (p, _) = payload!(Partition, &i);
            let theta = field(&p)?;
            Outcome::of(&games::surplus_game(&theta, &need(p.m, "m")?, &p.mu)?)
        }
        GameCmd::Profit(i) => {
            let (p, _) = payload!(Partition, &i);
            let theta = field(&p)?;
            Outcome::of(&games::profit_game(&theta, &need(p.m, "m")?, &p.mu)?)
        }
        GameCmd::Core(i) => {
            let (g, _) = payload!(Game, &i);
            let v = games::core_nonempty(&g);
            let negative = matches!(v, CoreVerdict::Empty { .. });
            Ok(Outcome::of(&v)?.negative(negative))
        }
        GameCmd::Nash(i) => {
            let (p, o) = payload!(Partition, &i);
            let theta = field(&p)?;
            let prices = need(p.prices.as_ref(), "prices")?;
            let step = ctx.tol.or(o.step).unwrap_or(1e-3);
            let caps = p.m.as_ref().map(|m| m.m.as_slice());
            Outcome::of(&games::nash_check_flat(prices, p.commissions.as_deref(), &theta, &p.mu, caps, step)?)
        }
        GameCmd::Free(i) => {
            let (p, o) = payload!(Partition, &i);
            let theta = field(&p)?;
            let fp = games::free_price_equilibrium(&theta, &p.mu)?;
            let audit = games::nash_check_free(&fp.charges, &theta, &p.mu, ctx.tol.or(o.step).unwrap_or(1e-3))?;
            let csv = io::csv_table(
                &["atom", "label", "residual"],
                &fp.labeling.labels.iter().zip(&fp.residuals).enumerate().map(|(k, (l, r))| vec![k as f64, *l as f64, *r]).collect::<Vec<_>>(),
            );
            Ok(Outcome::of(&json!({"equilibrium": fp, "audit": audit}))?.csv(csv))
        }
    }
}
