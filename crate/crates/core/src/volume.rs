//! Boundary quadrature, shell integrals and the total Q′ curvature.
//!
//! Star-shaped domains are parametrized radially, `z = c + R(ω)ω` with ω on the
//! unit sphere. Gauss–Legendre in the squared moduli, a uniform grid in
//! the phases; when ρ only depends on a few phase combinations, the phase grid
//! lives on the quotient torus instead.

use crate::ambient::{AmbientError, AmbientState};
use crate::cr_tensors::{build_frame, dim5_integrands, pi_burns_epstein, pseudo_einstein_residual, s_jets, tw_invariants, CrError, Dim5Integrands};
use crate::jets::Jet;
use crate::monge_ampere::{default_trunc, fefferman_solve, DomainSpec, FeffermanSolution, SolveError};
use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Ambient(#[from] AmbientError),
    #[error(transparent)]
    Cr(#[from] CrError),
    #[error("domain is not star-shaped about its center along {0:?}")]
    NotStarShaped(Vec<C64>),
    #[error("too few quadrature nodes: {0} (need {1})")]
    TooFewNodes(usize, usize),
    #[error("ill-conditioned fit: condition number {0:.3e}")]
    IllConditioned(f64),
    #[error("fit residual {0:.3e} exceeds tolerance {1:.3e}")]
    FitResidual(f64, f64),
    #[error("not enough epsilon samples: {0} (need {1})")]
    FewSamples(usize, usize),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}

/// Resolution of the angular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridOptions {
    /// Gauss–Legendre points per modulus coordinate.
    pub eta: usize,
    /// Uniform points per (reduced) phase.
    pub phase: usize,
    /// Jet truncation for the per-node solve; `None` uses the default.
    pub trunc: Option<usize>,
    /// Sample only the phase combinations ρ depends on. Integrands that break
    /// the phase symmetry of ρ need the full torus.
    pub reduce_phases: bool,
    /// Explicit phase lattice (overrides the one read off ρ).
    pub lattice: Option<Vec<Vec<i64>>>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { eta: 10, phase: 10, trunc: None, reduce_phases: true, lattice: None }
    }
}

impl GridOptions {
    pub fn new(eta: usize, phase: usize) -> GridOptions {
        GridOptions { eta, phase, trunc: None, reduce_phases: true, lattice: None }
    }

    pub fn full(eta: usize, phase: usize) -> GridOptions {
        GridOptions { reduce_phases: false, ..GridOptions::new(eta, phase) }
    }
}

/// Point on the parameter sphere with its quadrature weight (surface measure).
#[derive(Clone, Debug)]
pub struct SphereNode {
    pub omega: Vec<C64>,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    pub n: usize,
    pub nodes: Vec<SphereNode>,
    pub radii: Vec<f64>,
    pub boundary_points: Vec<Vec<C64>>,
    /// θ∧(dθ)^n per unit sphere measure, θ = d^c r.
    pub surface_density: Vec<f64>,
    /// Rank of the phase lattice actually sampled.
    pub phase_rank: usize,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Combined weights `w_i μ_i`.
    pub fn mass_weights(&self) -> Vec<f64> {
        self.nodes.iter().zip(&self.surface_density).map(|(x, d)| x.weight * d).collect()
    }
}

/// Deterministic pairwise reduction.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn gl(deg: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(deg.max(2)).expect("degree >= 2");
    rule.iter().map(|(x, w)| (0.5 * ((b - a) * x + b + a), 0.5 * (b - a) * w)).collect()
}

// Z-basis of the lattice spanned by the rows, by integer row reduction.
fn lattice_basis(rows: &[Vec<i64>], m: usize) -> Vec<Vec<i64>> {
    let mut a: Vec<Vec<i64>> = rows.iter().filter(|r| r.iter().any(|&x| x != 0)).cloned().collect();
    let mut basis = vec![];
    for col in 0..m {
        loop {
            let piv = a.iter().enumerate().filter(|(_, r)| r[col] != 0).min_by_key(|(_, r)| r[col].abs()).map(|(i, _)| i);
            let Some(p) = piv else { break };
            let pr = a[p].clone();
            let mut done = true;
            for (i, r) in a.iter_mut().enumerate() {
                if i != p && r[col] != 0 {
                    let q = r[col] / pr[col];
                    for k in 0..m {
                        r[k] -= q * pr[k];
                    }
                    if r[col] != 0 {
                        done = false;
                    }
                }
            }
            if done {
                basis.push(a.remove(p));
                break;
            }
        }
        a.retain(|r| r.iter().any(|&x| x != 0));
    }
    basis
}

/// Phase lattice of ρ: integer combinations of `zpow - zbarpow`.
pub fn phase_lattice(spec: &DomainSpec) -> Vec<Vec<i64>> {
    let m = spec.m();
    if spec.star_center.iter().any(|c| c.norm() > 0.0) {
        return identity_lattice(m);
    }
    let rows: Vec<Vec<i64>> = spec
        .rho_terms
        .iter()
        .filter(|t| t.c.norm() > 0.0)
        .map(|t| (0..m).map(|j| t.zpow[j] as i64 - t.zbarpow[j] as i64).collect())
        .collect();
    lattice_basis(&rows, m)
}

fn identity_lattice(m: usize) -> Vec<Vec<i64>> {
    (0..m).map(|j| (0..m).map(|k| (j == k) as i64).collect()).collect()
}

/// Moduli `|ω_j|` from simplex coordinates `v ∈ [0,1]^n`, and the Jacobian of
/// `dσ = 2^{-n} du_0…du_{n-1} dφ` where `u_j = |ω_j|²`.
fn moduli(n: usize, v: &[f64]) -> (Vec<f64>, f64) {
    let mut x = Vec::with_capacity(n + 1);
    let mut rest = 1.0;
    let mut jac = 0.5f64.powi(n as i32);
    for &t in v {
        x.push((rest * t).sqrt());
        jac *= rest;
        rest *= 1.0 - t;
    }
    x.push(rest.sqrt());
    (x, jac)
}

/// Angular nodes on S^{2n+1} for the phase lattice of `spec`.
pub fn sphere_nodes(spec: &DomainSpec, opts: &GridOptions) -> Result<(Vec<SphereNode>, usize), VolumeError> {
    let n = spec.n;
    let m = n + 1;
    if opts.eta < 2 {
        return Err(VolumeError::TooFewNodes(opts.eta, 2));
    }
    let lat = match (&opts.lattice, opts.reduce_phases) {
        (Some(l), _) => l.clone(),
        (None, true) => phase_lattice(spec),
        (None, false) => identity_lattice(m),
    };
    let d = lat.len();
    if d > 0 && opts.phase < 2 {
        return Err(VolumeError::TooFewNodes(opts.phase, 2));
    }
    // φ = K⁺ψ solves Kφ = ψ
    let pinv = if d > 0 {
        let k = DMatrix::from_fn(d, m, |i, j| lat[i][j] as f64);
        let kkt = &k * k.transpose();
        Some(k.transpose() * kkt.try_inverse().ok_or(VolumeError::Unsupported("singular phase lattice"))?)
    } else {
        None
    };
    let g = gl(opts.eta, 0.0, 1.0);
    let phase_w = (2.0 * PI).powi(m as i32) / (opts.phase as f64).powi(d as i32);
    let mut nodes = vec![];
    let ne = g.len().pow(n as u32);
    let np = if d > 0 { opts.phase.pow(d as u32) } else { 1 };
    for ie in 0..ne {
        let mut idx = ie;
        let mut eta = vec![];
        let mut w = phase_w;
        for _ in 0..n {
            let (e, we) = g[idx % g.len()];
            idx /= g.len();
            eta.push(e);
            w *= we;
        }
        let (x, jac) = moduli(n, &eta);
        for ip in 0..np {
            let mut phi = vec![0.0; m];
            if let Some(p) = &pinv {
                let mut idx = ip;
                let psi = DVector::from_fn(d, |_, _| {
                    let v = 2.0 * PI * (idx % opts.phase) as f64 / opts.phase as f64;
                    idx /= opts.phase;
                    v
                });
                let ph = p * psi;
                phi = ph.iter().copied().collect();
            }
            let omega = (0..m).map(|j| C64::from_polar(x[j], phi[j])).collect();
            nodes.push(SphereNode { omega, weight: w * jac });
        }
    }
    let need = 2;
    if nodes.len() < need {
        return Err(VolumeError::TooFewNodes(nodes.len(), need));
    }
    Ok((nodes, d))
}

pub(crate) fn ray(c: &[C64], w: &[C64], t: f64) -> Vec<C64> {
    c.iter().zip(w).map(|(a, b)| a + b * t).collect()
}

fn radial_derivative(spec: &DomainSpec, z: &[C64], w: &[C64], t: f64) -> f64 {
    2.0 * spec.grad(z, t).iter().zip(w).map(|(g, x)| (g * x).re).sum::<f64>()
}

/// `R(ω)` with `ρ(c + Rω) = 0`, by bracketing then Newton.
pub fn boundary_radius(spec: &DomainSpec, omega: &[C64]) -> Result<f64, VolumeError> {
    let c = &spec.star_center;
    let f = |t: f64| spec.eval(&ray(c, omega, t), 0.0);
    let bad = || VolumeError::NotStarShaped(omega.to_vec());
    if f(0.0) <= 0.0 {
        return Err(bad());
    }
    let h = 1.0 / 64.0;
    let mut t = 0.0;
    while f(t + h) > 0.0 {
        t += h;
        if t > 1e3 {
            return Err(bad());
        }
    }
    let (mut lo, mut hi) = (t, t + h);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut r = 0.5 * (lo + hi);
    for _ in 0..8 {
        let z = ray(c, omega, r);
        let dr = radial_derivative(spec, &z, omega, 0.0);
        if dr >= 0.0 {
            return Err(bad());
        }
        let step = spec.eval(&z, 0.0) / dr;
        r -= step;
        if step.abs() < 1e-15 * r.max(1.0) {
            break;
        }
    }
    // a second crossing further out means the ray leaves and re-enters
    let mut s = r + h;
    while s < r + 4.0 {
        if f(s) > 0.0 {
            return Err(bad());
        }
        s += h;
    }
    Ok(r)
}

/// θ∧(dθ)^n per unit sphere measure at the boundary point of `sol`.
pub fn surface_density(sol: &FeffermanSolution, omega: &[C64], radius: f64) -> f64 {
    let n = sol.n;
    let m = n + 1;
    let r = &sol.r;
    let rd: Vec<Jet> = (0..m).map(|j| r.d(j)).collect();
    let b = DMatrix::from_fn(m + 1, m + 1, |i, k| match (i, k) {
        (0, 0) => C64::default(),
        (0, k) => r.db(k - 1).value(0),
        (i, 0) => rd[i - 1].value(0),
        (i, k) => rd[i - 1].db(k - 1).value(0),
    });
    let b0 = b.determinant().re;
    let fact: f64 = (1..=n).map(|x| x as f64).product();
    let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
    let mu = 2f64.powi(m as i32) * fact * sign * b0;
    let dt: f64 = 2.0 * rd.iter().zip(omega).map(|(g, x)| (g.value(0) * x).re).sum::<f64>();
    mu * radius.powi(2 * n as i32 + 1) / dt.abs()
}

/// Holomorphic polynomial `Σ c z^a` used to rescale the contact form.
pub type HolPoly = Vec<(Vec<u8>, C64)>;

/// Which pointwise quantities to compute at every node.
#[derive(Clone, Debug, Default)]
pub struct Wants {
    pub qprime: bool,
    /// Q′ for θ rescaled by `e^{2 Re G}`.
    pub gauge: Option<HolPoly>,
    /// Highest normal derivative of s (0 = none).
    pub s_order: Option<usize>,
    pub pi: bool,
    pub dim5: bool,
    pub pseudo_einstein: bool,
}

#[derive(Clone, Debug)]
pub struct NodeValues {
    pub obstruction: f64,
    pub qprime: f64,
    pub qprime_gauge: f64,
    pub s: Vec<f64>,
    pub pi: f64,
    pub scal: f64,
    pub a_norm_sq: f64,
    pub dim5: Option<Dim5Integrands>,
    pub pseudo_einstein: f64,
}

fn eval_node(spec: &DomainSpec, p: &[C64], omega: &[C64], radius: f64, trunc: usize, want: &Wants) -> Result<(f64, NodeValues), VolumeError> {
    let sol = fefferman_solve(spec, p, trunc)?;
    let dens = surface_density(&sol, omega, radius);
    let mut out = NodeValues {
        obstruction: sol.obstruction_value(),
        qprime: f64::NAN,
        qprime_gauge: f64::NAN,
        s: vec![],
        pi: f64::NAN,
        scal: f64::NAN,
        a_norm_sq: f64::NAN,
        dim5: None,
        pseudo_einstein: f64::NAN,
    };
    if want.qprime || want.gauge.is_some() {
        let st = AmbientState::build(&sol)?;
        if want.qprime {
            out.qprime = st.qprime_pointwise(None)?;
        }
        if let Some(g) = &want.gauge {
            let m = spec.m();
            let terms: Vec<_> = g.iter().map(|(a, c)| (a.clone(), vec![0u8; m], 0usize, *c)).collect();
            let gj = Jet::from_poly_at(st.r.vars(), st.r.trunc(), &terms, p);
            out.qprime_gauge = st.qprime_pointwise(Some(&gj))?;
        }
    }
    if want.s_order.is_some() || want.pi || want.dim5 || want.pseudo_einstein {
        let frame = build_frame(&sol)?;
        if let Some(k) = want.s_order {
            out.s = s_jets(&frame, k)?;
        }
        if want.pi || want.dim5 || want.pseudo_einstein {
            let tw = tw_invariants(&frame)?;
            if want.pi {
                out.pi = pi_burns_epstein(&tw)?;
                out.scal = tw.scal_value();
                out.a_norm_sq = tw.a_norm_sq();
            }
            if want.dim5 {
                out.dim5 = Some(dim5_integrands(&tw)?);
            }
            if want.pseudo_einstein {
                out.pseudo_einstein = pseudo_einstein_residual(&tw);
            }
        }
    }
    Ok((dens, out))
}

/// Builds the grid and evaluates the requested quantities at every node.
pub fn build_grid(spec: &DomainSpec, opts: &GridOptions, want: &Wants) -> Result<(QuadratureGrid, Vec<NodeValues>), VolumeError> {
    spec.check()?;
    let (nodes, phase_rank) = sphere_nodes(spec, opts)?;
    let trunc = opts.trunc.unwrap_or_else(|| default_trunc(spec.n));
    let evals: Result<Vec<_>, VolumeError> = nodes
        .par_iter()
        .map(|nd| {
            let r = boundary_radius(spec, &nd.omega)?;
            let p = ray(&spec.star_center, &nd.omega, r);
            let (d, v) = eval_node(spec, &p, &nd.omega, r, trunc, want)?;
            Ok((r, p, d, v))
        })
        .collect();
    let evals = evals?;
    let mut grid = QuadratureGrid { n: spec.n, nodes, radii: vec![], boundary_points: vec![], surface_density: vec![], phase_rank };
    let mut vals = vec![];
    for (r, p, d, v) in evals {
        grid.radii.push(r);
        grid.boundary_points.push(p);
        grid.surface_density.push(d);
        vals.push(v);
    }
    Ok((grid, vals))
}

/// `Σ w_i μ_i f_i`.
pub fn surface_integral(grid: &QuadratureGrid, density: &[f64]) -> Result<f64, VolumeError> {
    let need = 2;
    if grid.len() < need {
        return Err(VolumeError::TooFewNodes(grid.len(), need));
    }
    if density.len() != grid.len() {
        return Err(VolumeError::TooFewNodes(density.len(), grid.len()));
    }
    let terms: Vec<f64> = grid.mass_weights().iter().zip(density).map(|(w, f)| w * f).collect();
    Ok(pairwise_sum(&terms))
}

/// `∫_M θ∧(dθ)^n`.
pub fn total_mass(grid: &QuadratureGrid) -> Result<f64, VolumeError> {
    surface_integral(grid, &vec![1.0; grid.len()])
}

/// Least-squares basis: `ε^{-n-1}..ε^{-1}`, optionally `log ε`, `1`, then `ε..ε^extra`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitBasis {
    pub n: usize,
    pub log: bool,
    pub extra: usize,
}

impl FitBasis {
    pub fn new(n: usize) -> FitBasis {
        FitBasis { n, log: true, extra: 0 }
    }

    pub fn size(&self) -> usize {
        self.n + 2 + self.log as usize + self.extra
    }

    fn row(&self, e: f64) -> Vec<f64> {
        let mut r: Vec<f64> = (0..=self.n).map(|j| e.powi(j as i32 - self.n as i32 - 1)).collect();
        if self.log {
            r.push(e.ln());
        }
        r.push(1.0);
        r.extend((1..=self.extra).map(|k| e.powi(k as i32)));
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansionFit {
    /// Coefficient of `ε^{-n-1+j}`, j = 0..=n.
    pub coefficients: Vec<f64>,
    pub log: f64,
    pub constant: f64,
    /// Coefficients of `ε, ε², …` when requested.
    pub extra: Vec<f64>,
    pub epsilon_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub residual: f64,
    pub condition_number: f64,
}

pub const MAX_CONDITION: f64 = 1e10;
pub const FIT_RESIDUAL: f64 = 1e-6;

/// `ε_k = ε₀ q^k`, k = 0..=count.
pub fn epsilon_grid(eps0: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|k| eps0 * ratio.powi(k as i32)).collect()
}

pub fn expansion_fit(eps: &[f64], values: &[f64], basis: FitBasis) -> Result<ExpansionFit, VolumeError> {
    let nb = basis.size();
    if eps.len() != values.len() || eps.len() < nb + 4 {
        return Err(VolumeError::FewSamples(eps.len().min(values.len()), nb + 4));
    }
    // rows weighted by ε^{(n+1)/2}: tames the most singular column without
    // letting the smallest ε dominate the residual
    let rw: Vec<f64> = eps.iter().map(|e| e.powf(0.5 * (basis.n as f64 + 1.0))).collect();
    let mut a = DMatrix::from_fn(eps.len(), nb, |i, j| rw[i] * basis.row(eps[i])[j]);
    let scales: Vec<f64> = (0..nb).map(|j| a.column(j).norm()).collect();
    for j in 0..nb {
        let s = scales[j];
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(VolumeError::IllConditioned(cond));
    }
    let y = DVector::from_fn(eps.len(), |i, _| rw[i] * values[i]);
    let x = svd.solve(&y, 0.0).map_err(|_| VolumeError::IllConditioned(cond))?;
    let residual = (&a * &x - &y).iter().zip(&rw).map(|(r, w)| (r / w).abs()).fold(0.0, f64::max);
    let tol = FIT_RESIDUAL * values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residual > tol {
        return Err(VolumeError::FitResidual(residual, tol));
    }
    let c: Vec<f64> = (0..nb).map(|j| x[j] / scales[j]).collect();
    let mut it = c.into_iter();
    let coefficients = (&mut it).take(basis.n + 1).collect();
    let log = if basis.log { it.next().unwrap() } else { 0.0 };
    let constant = it.next().unwrap();
    Ok(ExpansionFit {
        coefficients,
        log,
        constant,
        extra: it.collect(),
        epsilon_grid: eps.to_vec(),
        values: values.to_vec(),
        residual,
        condition_number: cond,
    })
}

/// ε grid used by the shell fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsGrid {
    pub eps0: f64,
    pub ratio: f64,
    pub count: usize,
}

impl Default for EpsGrid {
    fn default() -> Self {
        EpsGrid { eps0: 0.1, ratio: 0.8, count: 24 }
    }
}

impl EpsGrid {
    pub fn points(&self) -> Vec<f64> {
        epsilon_grid(self.eps0, self.ratio, self.count)
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

// ∫_a^b f(τ) dτ by Gauss–Legendre in log τ
fn log_quad(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    gl(64, a.ln(), b.ln()).iter().map(|&(s, w)| w * s.exp() * f(s.exp())).sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct QPrimeTotals {
    pub route_def: f64,
    pub route_s: f64,
    pub route_fit: f64,
    pub fit: ExpansionFit,
    pub mass: f64,
    pub nodes: usize,
    pub phase_rank: usize,
    pub rel_def_s: f64,
    pub rel_fit: f64,
    /// Routes disagree beyond 1e-6 (def vs s) or 1e-4 (fit).
    pub flagged: bool,
    pub max_obstruction: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Shell energies `∫_{ε<r<ε₀} |d log r|² dv` from normal jets of s.
pub fn shell_energies(grid: &QuadratureGrid, s: &[Vec<f64>], eps: &[f64], eps0: f64) -> Vec<f64> {
    let n = grid.n;
    let mw = grid.mass_weights();
    let pref = 2.0 / factorial(n);
    eps.iter()
        .map(|&e| {
            let terms: Vec<f64> = s
                .iter()
                .zip(&mw)
                .map(|(sj, w)| {
                    let f = |t: f64| sj.iter().enumerate().map(|(j, x)| x * t.powi(j as i32 - n as i32 - 2) / factorial(j)).sum::<f64>();
                    w * pref * if e < eps0 { log_quad(e, eps0, f) } else { 0.0 }
                })
                .collect();
            pairwise_sum(&terms)
        })
        .collect()
}

/// Q̄′ by the definition route only.
pub fn qprime_def(spec: &DomainSpec, opts: &GridOptions) -> Result<f64, VolumeError> {
    let (grid, vals) = build_grid(spec, opts, &Wants { qprime: true, ..Default::default() })?;
    surface_integral(&grid, &vals.iter().map(|v| v.qprime).collect::<Vec<_>>())
}

/// Q̄′ by the definition, s and log-fit routes on one shared grid.
pub fn qprime_total(spec: &DomainSpec, opts: &GridOptions, eg: &EpsGrid) -> Result<QPrimeTotals, VolumeError> {
    let n = spec.n;
    let want = Wants { qprime: true, s_order: Some(n + 3), ..Default::default() };
    let (grid, vals) = build_grid(spec, opts, &want)?;
    qprime_from_values(&grid, &vals, eg)
}

pub fn qprime_from_values(grid: &QuadratureGrid, vals: &[NodeValues], eg: &EpsGrid) -> Result<QPrimeTotals, VolumeError> {
    let n = grid.n;
    let q: Vec<f64> = vals.iter().map(|v| v.qprime).collect();
    let route_def = surface_integral(grid, &q)?;
    let sn1: Vec<f64> = vals.iter().map(|v| v.s[n + 1]).collect();
    let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
    let route_s = sign * 2.0 * factorial(n) / (n as f64 + 1.0) * surface_integral(grid, &sn1)?;
    let s: Vec<Vec<f64>> = vals.iter().map(|v| v.s.clone()).collect();
    let eps = eg.points();
    let energies = shell_energies(grid, &s, &eps, eg.eps0);
    let extra = s.iter().map(|x| x.len()).min().unwrap_or(0).saturating_sub(n + 2);
    let fit = expansion_fit(&eps, &energies, FitBasis { n, log: true, extra })?;
    let route_fit = -sign * factorial(n).powi(3) * fit.log;
    let rel_def_s = rel(route_def, route_s);
    let rel_fit = rel(route_def, route_fit).max(rel(route_s, route_fit));
    Ok(QPrimeTotals {
        route_def,
        route_s,
        route_fit,
        fit,
        mass: total_mass(grid)?,
        nodes: grid.len(),
        phase_rank: grid.phase_rank,
        rel_def_s,
        rel_fit,
        flagged: rel_def_s > 1e-6 || rel_fit > 1e-4,
        max_obstruction: vals.iter().map(|v| v.obstruction.abs()).fold(0.0, f64::max),
    })
}

/// `(−1)^{n+1} / (2 (n!)³ (n+1))`.
pub fn volume_coefficient(n: usize) -> f64 {
    let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
    sign / (2.0 * factorial(n).powi(3) * (n as f64 + 1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct RenormalizedVolume {
    pub v: f64,
    pub fit: ExpansionFit,
    pub qprime: f64,
    /// `volume_coefficient(n) · Q̄′`
    pub predicted: f64,
    pub rel_error: f64,
}

fn is_ball(spec: &DomainSpec) -> bool {
    let ball = DomainSpec::ball(spec.n);
    let m = spec.m();
    let z = vec![C64::default(); m];
    if spec.star_center != z || spec.t_degree() > 0 {
        return false;
    }
    let a = spec.rho_at(&z, spec.max_degree().max(2) + 1, 0);
    let b = ball.rho_at(&z, spec.max_degree().max(2) + 1, 0);
    (&a - &b).max_abs() < 1e-14
}

/// `∫_{u>ε} dv_{g₊}` for the complete Kähler–Einstein metric of the ball, `u = 1 − |z|²`.
pub fn ball_volume_samples(grid: &QuadratureGrid, eps: &[f64]) -> Vec<f64> {
    let n = grid.n as i32;
    // dv = 2^{n+1} u^{-n-2} dV, and t^{2n+1} dt = ½ (1−u)^n du along each ray
    let radial = |e: f64| log_quad(e, 1.0, |u| 2f64.powi(n + 1) * u.powi(-n - 2) * 0.5 * (1.0 - u).powi(n));
    let w: Vec<f64> = grid.nodes.iter().map(|x| x.weight).collect();
    eps.iter().map(|&e| radial(e) * pairwise_sum(&w)).collect()
}

/// Renormalized volume of the ball from the ε-expansion of `Vol({u > ε})`.
pub fn renormalized_volume(spec: &DomainSpec, opts: &GridOptions, eg: &EpsGrid) -> Result<RenormalizedVolume, VolumeError> {
    if !is_ball(spec) {
        return Err(VolumeError::Unsupported("renormalized volume needs an exact Kähler–Einstein potential (ball only)"));
    }
    let q = qprime_total(spec, opts, eg)?;
    let eps = eg.points();
    let vals = ball_volume_samples(&build_grid(spec, opts, &Wants::default())?.0, &eps);
    let fit = expansion_fit(&eps, &vals, FitBasis::new(spec.n))?;
    let predicted = volume_coefficient(spec.n) * q.route_def;
    Ok(RenormalizedVolume { v: fit.constant, rel_error: rel(fit.constant, predicted), fit, qprime: q.route_def, predicted })
}
