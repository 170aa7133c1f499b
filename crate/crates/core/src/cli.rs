//! `crprime` command line: domain ingestion, orchestration and JSON reports.

use crate::ambient::{ambient_identities, gjms_suite, AmbientState};
use crate::cr_tensors::{build_frame, deformation_operator_gap, dim5_integrands, pi_burns_epstein, rescaled_pseudo_einstein, tw_identities, tw_invariants};
use crate::monge_ampere::{check_anchor, default_trunc, fefferman_solve, seed_dependence, DomainSpec, FeffermanSolution, RhoTerm};
use crate::variation::{first_variation_check, obstruction_variation_check, second_variation_check, solve_family, DeformationFamily};
use crate::volume::{boundary_radius, build_grid, qprime_from_values, ray, renormalized_volume, surface_integral, EpsGrid, GridOptions, Wants};
use clap::{Parser, Subcommand};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Parser, Debug, Clone)]
#[command(name = "crprime", version, about = "Fefferman defining functions, boundary invariants and total Q-prime curvature")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Domain file (JSON, "schema": 1). Without it, the unit ball in C^{n+1}.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Raw ε-expansion data ("epsilon,value") for qprime and volume.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Jet truncation for the Monge–Ampère solve.
    #[arg(long, global = true)]
    pub trunc: Option<usize>,
    /// Angular grid: "ETA" or "ETA,PHASE".
    #[arg(long, global = true, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long, global = true, default_value_t = 0.1)]
    pub eps0: f64,
    #[arg(long = "eps-ratio", global = true, default_value_t = 0.8)]
    pub eps_ratio: f64,
    #[arg(long = "eps-count", global = true, default_value_t = 24)]
    pub eps_count: usize,
    #[arg(long, global = true, env = "CRPRIME_THREADS")]
    pub threads: Option<usize>,
    /// Replaces every check tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Fefferman defining function and obstruction at the anchors.
    Solve,
    /// Tanaka–Webster invariants at the anchors.
    Invariants,
    /// Total Q′ by three routes.
    Qprime,
    /// Renormalized volume (ball).
    Volume,
    /// First/second variation along the t-terms of the input.
    Vary,
    /// Identity suite at the anchors.
    Verify,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |x: &str| x.parse::<usize>().map_err(|e| format!("bad grid size {x:?}: {e}"));
    match parts.as_slice() {
        [a] => Ok((num(a)?, num(a)?)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(format!("grid must be ETA or ETA,PHASE, got {s:?}")),
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input: {0}")]
    Input(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    fn compute(e: impl std::fmt::Display) -> CliError {
        CliError::Compute(e.to_string())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermJson {
    pub zpow: Vec<u8>,
    pub zbarpow: Vec<u8>,
    #[serde(default)]
    pub tpow: usize,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Points are lists of `[re, im]` pairs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFile {
    pub schema: u32,
    pub n: usize,
    pub rho: Vec<TermJson>,
    #[serde(default)]
    pub anchors: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub star_center: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub t_max: Option<f64>,
}

fn point(v: &[[f64; 2]]) -> Vec<C64> {
    v.iter().map(|x| C64::new(x[0], x[1])).collect()
}

impl DomainFile {
    pub fn parse(text: &str) -> Result<DomainFile, CliError> {
        let f: DomainFile = serde_json::from_str(text).map_err(|e| CliError::Input(e.to_string()))?;
        if f.schema != 1 {
            return Err(CliError::Input(format!("unsupported schema {}", f.schema)));
        }
        Ok(f)
    }

    pub fn spec(&self) -> Result<DomainSpec, CliError> {
        let m = self.n + 1;
        let terms = self.rho.iter().map(|t| RhoTerm { zpow: t.zpow.clone(), zbarpow: t.zbarpow.clone(), tpow: t.tpow, c: C64::new(t.re, t.im) }).collect();
        let mut s = DomainSpec::new(self.n, terms);
        for (i, a) in self.anchors.iter().enumerate() {
            if a.len() != m {
                return Err(CliError::Input(format!("anchor {i} has {} coordinates, expected {m}", a.len())));
            }
            s.anchor_points.push(point(a));
        }
        if let Some(c) = &self.star_center {
            if c.len() != m {
                return Err(CliError::Input(format!("star_center has {} coordinates, expected {m}", c.len())));
            }
            s.star_center = point(c);
        }
        s.check().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: Command,
    pub n: usize,
    pub config: Value,
    pub results: Value,
    pub checks: Vec<Check>,
    pub pass: bool,
    #[serde(skip)]
    pub csv: Vec<(f64, f64)>,
}

struct Checks {
    list: Vec<Check>,
    over: Option<f64>,
}

impl Checks {
    fn new(over: Option<f64>) -> Checks {
        Checks { list: vec![], over }
    }

    fn le(&mut self, name: impl Into<String>, value: f64, tol: f64) {
        let tol = self.over.unwrap_or(tol);
        self.list.push(Check { name: name.into(), value, tol, pass: value.is_finite() && value <= tol });
    }

    fn truth(&mut self, name: impl Into<String>, ok: bool) {
        self.list.push(Check { name: name.into(), value: if ok { 0.0 } else { 1.0 }, tol: 0.0, pass: ok });
    }
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).unwrap_or(Value::Null)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(m));
        if let Some(n) = self.n {
            if !(1..=2).contains(&n) {
                return bad(format!("--n {n}: only n = 1, 2 are supported"));
            }
        }
        if let Some(t) = self.trunc {
            if !(6..=24).contains(&t) {
                return bad(format!("--trunc {t} outside 6..=24"));
            }
        }
        if let Some((a, b)) = self.grid {
            if !(1..=64).contains(&a) || !(1..=64).contains(&b) {
                return bad("--grid sizes must lie in 1..=64".into());
            }
        }
        if !(self.eps0 > 0.0 && self.eps0 < 1.0) {
            return bad(format!("--eps0 {} outside (0, 1)", self.eps0));
        }
        if !(self.eps_ratio > 0.0 && self.eps_ratio < 1.0) {
            return bad(format!("--eps-ratio {} outside (0, 1)", self.eps_ratio));
        }
        if !(8..=400).contains(&self.eps_count) {
            return bad(format!("--eps-count {} outside 8..=400", self.eps_count));
        }
        if self.threads == Some(0) {
            return bad("--threads must be positive".into());
        }
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("--tol {t} must be positive"));
            }
        }
        Ok(())
    }

    fn echo(&self, spec: &DomainSpec) -> Value {
        json!({
            "input": self.input.as_ref().map(|p| p.display().to_string()),
            "n": spec.n,
            "trunc": self.trunc_for(spec.n),
            "grid": self.grid_for(spec.n),
            "eps0": self.eps0,
            "eps_ratio": self.eps_ratio,
            "eps_count": self.eps_count,
            "tol": self.tol,
            "threads": self.threads,
            "seed": self.seed,
            "rho_terms": spec.rho_terms.len(),
            "star_center": spec.star_center,
        })
    }

    fn trunc_for(&self, n: usize) -> usize {
        self.trunc.unwrap_or_else(|| default_trunc(n))
    }

    fn grid_for(&self, n: usize) -> (usize, usize) {
        self.grid.unwrap_or(if n == 1 { (12, 12) } else { (7, 8) })
    }

    fn grid_options(&self, n: usize) -> GridOptions {
        let (a, b) = self.grid_for(n);
        GridOptions { trunc: self.trunc, ..GridOptions::new(a, b) }
    }

    fn eps(&self) -> EpsGrid {
        EpsGrid { eps0: self.eps0, ratio: self.eps_ratio, count: self.eps_count }
    }

    pub fn domain(&self) -> Result<DomainSpec, CliError> {
        let spec = match &self.input {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                let f = DomainFile::parse(&text)?;
                if let Some(n) = self.n {
                    if n != f.n {
                        return Err(CliError::Input(format!("--n {n} disagrees with the input (n = {})", f.n)));
                    }
                }
                if let Some(t) = f.t_max {
                    if !(t > 0.0 && t < 1.0) {
                        return Err(CliError::Input(format!("t_max {t} outside (0, 1)")));
                    }
                }
                f.spec()?
            }
            None => DomainSpec::ball(self.n.unwrap_or(1)),
        };
        if !(1..=2).contains(&spec.n) {
            return Err(CliError::Input(format!("unsupported n = {}", spec.n)));
        }
        Ok(spec)
    }

    fn t_max(&self) -> Option<f64> {
        let p = self.input.as_ref()?;
        DomainFile::parse(&std::fs::read_to_string(p).ok()?).ok()?.t_max
    }
}

/// Anchors from the file, or `count` boundary points along seeded directions
/// (the first along e₀).
pub fn anchors(spec: &DomainSpec, count: usize, seed: u64) -> Result<Vec<Vec<C64>>, CliError> {
    if !spec.anchor_points.is_empty() {
        return Ok(spec.anchor_points.clone());
    }
    let m = spec.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];
    for i in 0..count {
        let mut w: Vec<C64> = if i == 0 {
            (0..m).map(|j| C64::new(if j == 0 { 1.0 } else { 0.0 }, 0.0)).collect()
        } else {
            (0..m).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
        };
        let nrm = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= nrm);
        let r = boundary_radius(spec, &w).map_err(|e| CliError::Input(e.to_string()))?;
        out.push(ray(&spec.star_center, &w, r));
    }
    Ok(out)
}

fn solve_at(spec: &DomainSpec, p: &[C64], trunc: usize) -> Result<FeffermanSolution, CliError> {
    check_anchor(spec, p).map_err(|e| CliError::Input(e.to_string()))?;
    fefferman_solve(spec, p, trunc).map_err(|e| CliError::Compute(format!("at {p:?}: {e}")))
}

fn seed_comparison(spec: &DomainSpec, sol: &FeffermanSolution, rng: &mut ChaCha8Rng) -> Result<(f64, f64), CliError> {
    let bump: Vec<f64> = (0..spec.m()).map(|_| rng.gen_range(0.05..0.2)).collect();
    seed_dependence(spec, sol, &bump).map_err(CliError::compute)
}

fn cmd_solve(cfg: &RunConfig, spec: &DomainSpec, ck: &mut Checks) -> Result<Value, CliError> {
    let trunc = cfg.trunc_for(spec.n);
    let pts = anchors(spec, 4, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![];
    for (i, p) in pts.iter().enumerate() {
        let sol = solve_at(spec, p, trunc)?;
        let div = sol.residuals.iter().cloned().fold(0.0, f64::max);
        let (seed_r, seed_o) = seed_comparison(spec, &sol, &mut rng)?;
        ck.le(format!("anchor {i}: divisibility residual"), div, 1e-8);
        ck.le(format!("anchor {i}: r seed dependence mod r^(n+3)"), seed_r, 1e-8);
        ck.le(format!("anchor {i}: obstruction seed dependence"), seed_o, 1e-8);
        out.push(json!({
            "anchor": p,
            "achieved_order": sol.achieved_order,
            "obstruction": sol.obstruction_value(),
            "multiplier": sol.multiplier.value(0).re,
            "residuals": sol.residuals,
            "seed_residual": seed_r,
            "seed_obstruction_change": seed_o,
        }));
    }
    Ok(json!({ "trunc": trunc, "anchors": out }))
}

fn cmd_invariants(cfg: &RunConfig, spec: &DomainSpec, ck: &mut Checks) -> Result<Value, CliError> {
    let trunc = cfg.trunc_for(spec.n);
    let mut out = vec![];
    for (i, p) in anchors(spec, 4, cfg.seed)?.iter().enumerate() {
        let sol = solve_at(spec, p, trunc)?;
        let tw = tw_invariants(&build_frame(&sol).map_err(CliError::compute)?).map_err(CliError::compute)?;
        let id = tw_identities(&tw, cfg.seed);
        ck.le(format!("anchor {i}: Tanaka-Webster identities"), id.worst(), 1e-8);
        ck.le(format!("anchor {i}: pseudo-Einstein residual"), id.pseudo_einstein, 1e-7);
        let d5 = if spec.n == 2 { Some(dim5_integrands(&tw).map_err(CliError::compute)?) } else { None };
        out.push(json!({
            "anchor": p,
            "obstruction": sol.obstruction_value(),
            "scal": tw.scal_value(),
            "torsion_norm_sq": tw.a_norm_sq(),
            "chern_norm_sq": tw.chern.norm_sq(),
            "kappa_jets": tw.kappa_jets,
            "pi": pi_burns_epstein(&tw).map_err(CliError::compute)?,
            "dim5": d5,
            "identities": id,
        }));
    }
    Ok(json!({ "trunc": trunc, "anchors": out }))
}

fn cmd_qprime(cfg: &RunConfig, spec: &DomainSpec, ck: &mut Checks, csv: &mut Vec<(f64, f64)>) -> Result<Value, CliError> {
    let n = spec.n;
    let opts = cfg.grid_options(n);
    let want = Wants { qprime: true, s_order: Some(n + 3), pi: true, ..Default::default() };
    let (grid, vals) = build_grid(spec, &opts, &want).map_err(CliError::compute)?;
    let q = qprime_from_values(&grid, &vals, &cfg.eps()).map_err(CliError::compute)?;
    ck.le("Q' definition vs s-route (relative)", q.rel_def_s, 1e-6);
    ck.le("Q' log-fit route (relative)", q.rel_fit, 1e-4);
    csv.extend(q.fit.epsilon_grid.iter().cloned().zip(q.fit.values.iter().cloned()));
    let mu = surface_integral(&grid, &vals.iter().map(|v| v.pi).collect::<Vec<_>>()).map_err(CliError::compute)?;
    let bridge = -(4.0 * PI).powi(n as i32 + 1) * mu;
    Ok(json!({
        "totals": q,
        "burns_epstein": { "mu": mu, "bridge": bridge, "qprime_over_bridge": q.route_def / bridge },
        "obstruction": vals.iter().map(|v| v.obstruction).collect::<Vec<_>>(),
        "radii": grid.radii,
    }))
}

fn cmd_volume(cfg: &RunConfig, spec: &DomainSpec, ck: &mut Checks, csv: &mut Vec<(f64, f64)>) -> Result<Value, CliError> {
    let v = renormalized_volume(spec, &cfg.grid_options(spec.n), &cfg.eps()).map_err(|e| match e {
        crate::volume::VolumeError::Unsupported(m) => CliError::Input(m.into()),
        e => CliError::compute(e),
    })?;
    ck.le("V vs coefficient * Q' (relative)", v.rel_error, 1e-6);
    csv.extend(v.fit.epsilon_grid.iter().cloned().zip(v.fit.values.iter().cloned()));
    Ok(to_value(&v))
}

fn cmd_vary(cfg: &RunConfig, spec: &DomainSpec, ck: &mut Checks) -> Result<Value, CliError> {
    let n = spec.n;
    let mut fam = DeformationFamily::from_spec(spec).map_err(|e| CliError::Input(e.to_string()))?;
    if fam.t_terms.is_empty() {
        return Err(CliError::Input("vary needs rho terms with tpow 1 or 2".into()));
    }
    if let Some(t) = cfg.t_max() {
        fam.t_max = t;
    }
    let h = fam.t_max / 2.0;
    let opts = cfg.grid_options(n);
    let amb = cfg.trunc.unwrap_or(if n == 1 { 14 } else { 16 });
    let sf = solve_family(&fam, &opts, Some(amb)).map_err(CliError::compute)?;
    let ov = obstruction_variation_check(&sf);
    ck.le("obstruction variation (pointwise, scaled)", ov.max_diff / ov.scale.max(1.0), 1e-6);
    let fv = first_variation_check(&fam, &opts, h).map_err(CliError::compute)?;
    let scale = fv.qprime0.abs().max(1.0);
    let at_critical = sf.nodes.iter().all(|x| x.obstruction.abs() < 1e-10);
    if at_critical {
        ck.le("first variation at a critical point (scaled)", fv.lhs.abs().max(fv.rhs.abs()) / scale, 1e-4);
    } else {
        ck.le("first variation (relative)", fv.rel, 1e-3);
    }
    let sv = if at_critical {
        let sv = second_variation_check(&fam, &opts, h, amb).map_err(CliError::compute)?;
        let tiny = sv.lhs.abs().max(sv.rhs.abs()) <= 1e-4 * scale;
        if tiny {
            ck.le("second variation, automorphism family (scaled)", sv.lhs.abs().max(sv.rhs.abs()) / scale, 1e-4);
        } else {
            ck.le("second variation (relative)", sv.rel, 1e-3);
        }
        Some(sv)
    } else {
        None
    };
    Ok(json!({
        "t_max": fam.t_max,
        "step": h,
        "ambient_trunc": amb,
        "first_variation": fv,
        "second_variation": sv,
        "obstruction_variation": ov,
        "nodes": sf.nodes,
    }))
}

fn cmd_verify(cfg: &RunConfig, spec: &DomainSpec, ck: &mut Checks) -> Result<Value, CliError> {
    let n = spec.n;
    let trunc = cfg.trunc_for(n).max(12);
    let pts = anchors(spec, if n == 1 { 20 } else { 6 }, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![];
    for (i, p) in pts.iter().enumerate() {
        let sol = solve_at(spec, p, trunc)?;
        let (seed_r, seed_o) = seed_comparison(spec, &sol, &mut rng)?;
        let st = AmbientState::build(&sol).map_err(CliError::compute)?;
        let amb = ambient_identities(&st, cfg.seed + i as u64).map_err(CliError::compute)?;
        let tw = tw_invariants(&build_frame(&sol).map_err(CliError::compute)?).map_err(CliError::compute)?;
        let id = tw_identities(&tw, cfg.seed + i as u64);
        let gap = deformation_operator_gap(&sol, &tw, 3, cfg.seed + i as u64).map_err(CliError::compute)?;
        let tag = |s: &str| format!("anchor {i}: {s}");
        ck.le(tag("divisibility residual"), sol.residuals.iter().cloned().fold(0.0, f64::max), 1e-8);
        ck.le(tag("seed dependence of r and obstruction"), seed_r.max(seed_o), 1e-8);
        ck.truth(tag("Lorentz signature"), amb.lorentz(n));
        ck.le(tag("ambient identities"), amb.worst(), 1e-7);
        ck.le(tag("Tanaka-Webster identities"), id.worst(), 1e-8);
        ck.le(tag("pseudo-Einstein residual"), id.pseudo_einstein, 1e-7);
        ck.le(tag("deformation operator routes"), gap, 1e-8);
        out.push(json!({ "anchor": p, "obstruction": sol.obstruction_value(), "ambient": amb, "tanaka_webster": id, "deformation_gap": gap }));
    }
    // strict normalization needs the obstruction to second order: r^{n+4} corrections
    let sol = solve_at(spec, &pts[0], trunc.max(2 * n + 10))?;
    let neg = rescaled_pseudo_einstein(&sol).map_err(CliError::compute)?;
    ck.truth("non-pluriharmonic rescale breaks pseudo-Einstein", neg > 1e-2);
    let ks: &[i32] = if n == 1 { &[0, 1] } else { &[0] };
    let g = gjms_suite(&sol, ks, cfg.seed).map_err(CliError::compute)?;
    ck.le("GJMS routes and extension independence", g.worst_gjms(), 1e-8);
    if let (Some(p), Some(d), Some(x)) = (g.p_potential, g.p_decomposition, g.p_extension_change) {
        ck.le("P_{n+3} annihilates the potential", p, 1e-10);
        ck.le("P_{n+3} decomposition", d, 1e-7);
        ck.le("P_{n+3} extension independence", x, 1e-7);
    }
    ck.le("strict normalization: Laplacian of obstruction", g.laplacian_obstruction_after, 1e-7);
    Ok(json!({ "trunc": trunc, "anchors": out, "rescaled_pseudo_einstein": neg, "gjms": g }))
}

pub fn run(cfg: &RunConfig) -> Result<Report, CliError> {
    cfg.validate()?;
    let spec = cfg.domain()?;
    if cfg.command != Command::Vary && spec.t_degree() > 0 {
        return Err(CliError::Input("t-dependent terms are only meaningful for vary".into()));
    }
    let mut ck = Checks::new(cfg.tol);
    let mut csv = vec![];
    let results = match cfg.command {
        Command::Solve => cmd_solve(cfg, &spec, &mut ck)?,
        Command::Invariants => cmd_invariants(cfg, &spec, &mut ck)?,
        Command::Qprime => cmd_qprime(cfg, &spec, &mut ck, &mut csv)?,
        Command::Volume => cmd_volume(cfg, &spec, &mut ck, &mut csv)?,
        Command::Vary => cmd_vary(cfg, &spec, &mut ck)?,
        Command::Verify => cmd_verify(cfg, &spec, &mut ck)?,
    };
    let pass = ck.list.iter().all(|c| c.pass);
    Ok(Report { command: cfg.command, n: spec.n, config: cfg.echo(&spec), results, checks: ck.list, pass, csv })
}

fn write_outputs(cfg: &RunConfig, rep: &Report) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(rep)? + "\n";
    match &cfg.output {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(p) = &cfg.csv {
        let mut s = String::from("epsilon,value\n");
        for (e, v) in &rep.csv {
            s.push_str(&format!("{e:e},{v:e}\n"));
        }
        std::fs::write(p, s)?;
    }
    Ok(())
}

/// Parses `args`, runs, writes the report. 0 ok, 2 a check failed, 1 input or compute error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(t) = cfg.threads {
        if t > 0 {
            // a second call in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
    match run(&cfg) {
        Ok(rep) => {
            if let Err(e) = write_outputs(&cfg, &rep) {
                eprintln!("crprime: writing report: {e}");
                return ExitCode::from(1);
            }
            for c in rep.checks.iter().filter(|c| !c.pass) {
                eprintln!("crprime: check failed: {} = {:.3e} (tol {:.1e})", c.name, c.value, c.tol);
            }
            if rep.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("crprime: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(args: &[&str]) -> RunConfig {
        RunConfig::try_parse_from(std::iter::once("crprime").chain(args.iter().cloned())).unwrap()
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("8").unwrap(), (8, 8));
        assert_eq!(parse_grid("6, 9").unwrap(), (6, 9));
        assert!(parse_grid("6,7,8").is_err());
        assert!(parse_grid("x").is_err());
    }

    #[test]
    fn schema_and_unknown_fields() {
        let ok = r#"{"schema":1,"n":1,"rho":[{"zpow":[0,0],"zbarpow":[0,0],"tpow":0,"re":1.0,"im":0.0}]}"#;
        assert!(DomainFile::parse(ok).is_ok());
        assert!(DomainFile::parse(&ok.replace("\"schema\":1", "\"schema\":2")).is_err());
        assert!(DomainFile::parse(&ok.replace("\"n\":1", "\"n\":1,\"colour\":3")).is_err());
        assert!(DomainFile::parse(&ok.replace("\"tpow\":0", "\"tpow\":0,\"weight\":1")).is_err());
    }

    #[test]
    fn non_real_rho_rejected() {
        let f = DomainFile::parse(r#"{"schema":1,"n":1,"rho":[{"zpow":[1,0],"zbarpow":[0,0],"re":1.0}]}"#).unwrap();
        assert!(matches!(f.spec(), Err(CliError::Input(_))));
    }

    #[test]
    fn ranges() {
        assert!(cfg(&["solve", "--n", "3"]).validate().is_err());
        assert!(cfg(&["solve", "--eps0", "1.5"]).validate().is_err());
        assert!(cfg(&["solve", "--threads", "0"]).validate().is_err());
        assert!(cfg(&["qprime", "--grid", "0,4"]).validate().is_err());
        assert!(cfg(&["qprime", "--grid", "4,4", "--n", "2"]).validate().is_ok());
    }

    #[test]
    fn ball_solve_report() {
        let rep = run(&cfg(&["solve", "--n", "1"])).unwrap();
        assert!(rep.pass, "{:?}", rep.checks);
        assert_eq!(rep.results["anchors"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn tol_override_applies() {
        let rep = run(&cfg(&["solve", "--n", "1", "--tol", "1e-300"])).unwrap();
        assert!(rep.checks.iter().all(|c| c.tol == 1e-300));
    }

    #[test]
    fn anchors_lie_on_boundary() {
        let spec = DomainSpec::ball(2).add_real(&[2, 0, 0], &[0, 1, 0], 0, C64::new(-0.05, 0.0));
        for p in anchors(&spec, 5, 3).unwrap() {
            assert!(spec.eval(&p, 0.0).abs() < 1e-12);
        }
    }
}
