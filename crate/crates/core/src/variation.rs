//! One-parameter deformations `ρ_t = ρ + tρ₁ + t²ρ₂` and the variational
//! formulas for the total Q′ curvature.
//!
//! The family is solved with t as a nilpotent jet variable (t³ = 0), so ṙ, r̈ and
//! 𝒪̇ come out exactly at every node. Derivatives of Q̄′_t are finite
//! differences of independent fixed-t runs on a grid with a fixed phase lattice.

use crate::ambient::{c_nk, AmbientError, AmbientState, DensityJet};
use crate::jets::{Jet, VariableSet};
use crate::monge_ampere::{check_anchor, default_trunc, fefferman_from_seed, fefferman_solve, DomainSpec, FeffermanSolution, RhoTerm, SolveError};
use crate::volume::{boundary_radius, phase_lattice, qprime_def, ray, sphere_nodes, surface_density, surface_integral, GridOptions, QuadratureGrid, VolumeError};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariationError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Ambient(#[from] AmbientError),
    #[error("pseudoconvexity lost at t = {0}")]
    PseudoconvexityLost(f64),
    #[error("family terms must have t-degree 1 or 2")]
    BadTerm,
}

#[derive(Clone, Debug)]
pub struct DeformationFamily {
    pub base: DomainSpec,
    pub t_terms: Vec<RhoTerm>,
    /// Range of t on which the family is checked for pseudoconvexity.
    pub t_max: f64,
}

impl DeformationFamily {
    pub fn new(base: DomainSpec, t_terms: Vec<RhoTerm>) -> Result<DeformationFamily, VariationError> {
        if t_terms.iter().any(|t| !(1..=2).contains(&t.tpow)) || base.t_degree() > 0 {
            return Err(VariationError::BadTerm);
        }
        Ok(DeformationFamily { base, t_terms, t_max: 0.02 })
    }

    /// Splits a spec with t-dependent terms into base and family.
    pub fn from_spec(spec: &DomainSpec) -> Result<DeformationFamily, VariationError> {
        let mut base = spec.clone();
        base.rho_terms.retain(|t| t.tpow == 0);
        let t_terms = spec.rho_terms.iter().filter(|t| t.tpow > 0).cloned().collect();
        DeformationFamily::new(base, t_terms)
    }

    /// Adds `c z^a z̄^b t^k + conj`.
    pub fn add_real(mut self, a: &[u8], b: &[u8], k: usize, c: C64) -> DeformationFamily {
        let s = DomainSpec::new(self.base.n, vec![]).add_real(a, b, k, c);
        self.t_terms.extend(s.rho_terms);
        self
    }

    pub fn spec(&self) -> DomainSpec {
        let mut s = self.base.clone();
        s.rho_terms.extend(self.t_terms.iter().cloned());
        s
    }

    pub fn at(&self, t: f64) -> DomainSpec {
        let mut s = self.base.clone();
        s.rho_terms.extend(self.t_terms.iter().map(|x| RhoTerm { tpow: 0, c: x.c * t.powi(x.tpow as i32), ..x.clone() }));
        s
    }

    /// Same family in the parameter `λt`.
    pub fn reparametrized(&self, lambda: f64) -> DeformationFamily {
        let mut f = self.clone();
        for x in &mut f.t_terms {
            x.c *= lambda.powi(x.tpow as i32);
        }
        f.t_max /= lambda.abs();
        f
    }

    /// Grid options whose phase lattice covers every member of the family.
    pub fn grid_options(&self, opts: &GridOptions) -> GridOptions {
        let mut o = opts.clone();
        if o.lattice.is_none() && o.reduce_phases {
            o.lattice = Some(phase_lattice(&self.spec()));
        }
        o
    }
}

fn cz(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// `c_n = (−1)^{n+1} 2 n! (n+2)!`
pub fn c_n(n: usize) -> f64 {
    let f = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    let s = if n % 2 == 0 { -1.0 } else { 1.0 };
    s * 2.0 * f(n) * f(n + 2)
}

/// `k_n = (−1)^n ((n+2)!)²`
pub fn k_n(n: usize) -> f64 {
    c_nk(n, 1)
}

/// Seed ρ_t at p with t-parts up to t².
pub fn family_seed(fam: &DomainSpec, p: &[C64], trunc: usize) -> Jet {
    let terms: Vec<_> = fam.rho_terms.iter().map(|t| (t.zpow.clone(), t.zbarpow.clone(), t.tpow, t.c)).collect();
    let mut rho = Jet::from_poly_at(VariableSet::with_t(fam.m(), 2), trunc, &terms, p);
    rho.set_value(0, C64::default());
    rho
}

/// Fefferman's r_t at a point of the t = 0 boundary, exact through t².
pub fn solve_family_at(fam: &DeformationFamily, p: &[C64], trunc: usize) -> Result<FeffermanSolution, VariationError> {
    check_anchor(&fam.base, p)?;
    Ok(fefferman_from_seed(&family_seed(&fam.spec(), p, trunc), fam.base.n, p)?)
}

/// Per-node data of a solved family.
#[derive(Clone, Debug, Serialize)]
pub struct FamilyNode {
    pub point: Vec<(f64, f64)>,
    pub rdot: f64,
    pub rddot: f64,
    pub obstruction: f64,
    pub odot: f64,
    /// `|∂ṙ|²_g̃ = ṙ_A ṙ^A`
    pub grad_rdot_sq: f64,
    /// `P_{n+3} ṙ`
    pub p_rdot: f64,
    /// `Re ṙ^A 𝒪_A`
    pub rdot_dobs: f64,
    /// Largest low-order coefficient of `Δ̃ṙ − (n+2)ṙ𝒪𝒓^{n+1} − 𝒪̇𝒓^{n+2}`.
    pub linearization_residual: f64,
}

#[derive(Clone, Debug)]
pub struct SolvedFamily {
    pub grid: QuadratureGrid,
    pub nodes: Vec<FamilyNode>,
}

/// Ambient-side quantities need a higher truncation; `None` skips them.
pub fn solve_family(fam: &DeformationFamily, opts: &GridOptions, ambient_trunc: Option<usize>) -> Result<SolvedFamily, VariationError> {
    let base = &fam.base;
    base.check()?;
    fam.spec().check()?;
    let n = base.n;
    let opts = fam.grid_options(opts);
    let (sphere, phase_rank) = sphere_nodes(base, &opts)?;
    for t in [-fam.t_max, fam.t_max] {
        let spec = fam.at(t);
        let bad: Result<(), VariationError> = sphere.par_iter().try_for_each(|nd| {
            let r = boundary_radius(&spec, &nd.omega).map_err(|_| VariationError::PseudoconvexityLost(t))?;
            check_anchor(&spec, &ray(&spec.star_center, &nd.omega, r)).map_err(|_| VariationError::PseudoconvexityLost(t))
        });
        bad?;
    }
    let trunc = ambient_trunc.unwrap_or_else(|| opts.trunc.unwrap_or_else(|| default_trunc(n)));
    let res: Result<Vec<_>, VariationError> = sphere
        .par_iter()
        .map(|nd| {
            let r = boundary_radius(base, &nd.omega)?;
            let p = ray(&base.star_center, &nd.omega, r);
            let sol = solve_family_at(fam, &p, trunc)?;
            let dens = surface_density(&sol, &nd.omega, r);
            let node = family_node(&sol, ambient_trunc.is_some())?;
            Ok((r, p, dens, node))
        })
        .collect();
    let mut grid = QuadratureGrid { n, nodes: sphere, radii: vec![], boundary_points: vec![], surface_density: vec![], phase_rank };
    let mut nodes = vec![];
    for (r, p, d, node) in res? {
        grid.radii.push(r);
        grid.boundary_points.push(p);
        grid.surface_density.push(d);
        nodes.push(node);
    }
    Ok(SolvedFamily { grid, nodes })
}

fn family_node(sol: &FeffermanSolution, ambient: bool) -> Result<FamilyNode, VariationError> {
    let n = sol.n;
    let r0 = sol.r.t_coeff(0);
    let rdot = sol.r.t_coeff(1);
    let o0 = sol.obstruction.t_coeff(0);
    let odot = sol.obstruction.t_coeff(1);
    let mut node = FamilyNode {
        point: sol.anchor.iter().map(|z| (z.re, z.im)).collect(),
        rdot: rdot.value(0).re,
        rddot: 2.0 * sol.r.t_coeff(2).value(0).re,
        obstruction: o0.value(0).re,
        odot: odot.value(0).re,
        grad_rdot_sq: f64::NAN,
        p_rdot: f64::NAN,
        rdot_dobs: f64::NAN,
        linearization_residual: f64::NAN,
    };
    if ambient {
        let mut st = AmbientState::from_potential(&r0, n, &sol.anchor)?;
        st.obstruction = Some(o0.clone());
        let f = DensityJet::density(1, rdot);
        let fa = st.raise(&f);
        let m = st.m();
        let o = st.obstruction_density()?;
        node.grad_rdot_sq = (0..=m).map(|a| st.d(&f, a).mul(&fa[a]).value()).sum::<C64>().re;
        node.rdot_dobs = (0..=m).map(|a| st.d(&o, a).mul(&fa[a]).value()).sum::<C64>().re;
        node.p_rdot = st.p_n3(&f)?;
        let w = -(n as i32) - 2;
        let lin = st
            .laplacian(&f)
            .sub(&st.mul_r(&f.mul(&o), n + 1).scale_re(n as f64 + 2.0))
            .sub(&st.mul_r(&DensityJet::density(w, odot), n + 2));
        let prec = lin.min_prec().min(2 * n as i32 + 2);
        node.linearization_residual = lin.max_abs_upto(prec);
    }
    Ok(node)
}

impl SolvedFamily {
    pub fn integrate(&self, f: impl Fn(&FamilyNode) -> f64) -> Result<f64, VariationError> {
        Ok(surface_integral(&self.grid, &self.nodes.iter().map(f).collect::<Vec<_>>())?)
    }
}

/// ṙ and r̈ at p by 4-point differences of fixed-t solves, each anchored on M_t
/// along the ray through p and re-expanded at p.
pub fn rdot_finite_difference(fam: &DeformationFamily, p: &[C64], h: f64, trunc: usize) -> Result<(f64, f64), VariationError> {
    let c = &fam.base.star_center;
    let dir: Vec<C64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
    let len = dir.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let omega: Vec<C64> = dir.iter().map(|x| x / len).collect();
    let r_at = |t: f64| -> Result<f64, VariationError> {
        let spec = fam.at(t);
        let rad = boundary_radius(&spec, &omega)?;
        let q = ray(c, &omega, rad);
        let sol = fefferman_solve(&spec, &q, trunc)?;
        let w: Vec<C64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
        Ok(sol.r.eval_at(&w, 0).re)
    };
    let v: Vec<f64> = [-2.0, -1.0, 1.0, 2.0].iter().map(|k| r_at(k * h)).collect::<Result<_, _>>()?;
    let d1 = (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h);
    // r_0(p) = 0
    let d2 = (-v[0] + 16.0 * v[1] + 16.0 * v[2] - v[3]) / (12.0 * h * h);
    Ok((d1, d2))
}

/// Q̄′_t on the family's grid.
pub fn qprime_at(fam: &DeformationFamily, t: f64, opts: &GridOptions) -> Result<f64, VariationError> {
    Ok(qprime_def(&fam.at(t), &fam.grid_options(opts))?)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn d1_5pt(q: &dyn Fn(f64) -> Result<f64, VariationError>, h: f64) -> Result<f64, VariationError> {
    Ok((q(-2.0 * h)? - 8.0 * q(-h)? + 8.0 * q(h)? - q(2.0 * h)?) / (12.0 * h))
}

fn d2_5pt(q: &dyn Fn(f64) -> Result<f64, VariationError>, h: f64) -> Result<f64, VariationError> {
    Ok((-q(-2.0 * h)? + 16.0 * q(-h)? - 30.0 * q(0.0)? + 16.0 * q(h)? - q(2.0 * h)?) / (12.0 * h * h))
}

#[derive(Clone, Debug, Serialize)]
pub struct FirstVariation {
    pub lhs: f64,
    /// Same difference with h/2 (Richardson gate).
    pub lhs_half_step: f64,
    pub rhs: f64,
    pub c_n: f64,
    pub qprime0: f64,
    pub rel: f64,
    pub step_rel: f64,
}

/// `d/dt Q̄′_t` at 0 against `c_n ∫ ṙ𝒪`.
pub fn first_variation_check(fam: &DeformationFamily, opts: &GridOptions, h: f64) -> Result<FirstVariation, VariationError> {
    let n = fam.base.n;
    let sf = solve_family(fam, opts, None)?;
    let rhs = c_n(n) * sf.integrate(|x| x.rdot * x.obstruction)?;
    let q = |t: f64| qprime_at(fam, t, opts);
    let lhs = d1_5pt(&q, h)?;
    let lhs_half_step = d1_5pt(&q, h / 2.0)?;
    Ok(FirstVariation { lhs, lhs_half_step, rhs, c_n: c_n(n), qprime0: q(0.0)?, rel: rel(lhs, rhs), step_rel: rel(lhs, lhs_half_step) })
}

#[derive(Clone, Debug, Serialize)]
pub struct SecondVariation {
    pub lhs: f64,
    pub lhs_half_step: f64,
    /// `c_n ∫(k_n ṙP_{n+3}ṙ + (r̈ − |∂ṙ|²)𝒪)`
    pub rhs: f64,
    /// Same with `c_{n,1}^{-1}` in place of `k_n`.
    pub rhs_inverse: f64,
    pub pairing: f64,
    pub obstruction_term: f64,
    pub rel: f64,
    pub rel_inverse: f64,
    pub step_rel: f64,
}

pub fn second_variation_check(fam: &DeformationFamily, opts: &GridOptions, h: f64, ambient_trunc: usize) -> Result<SecondVariation, VariationError> {
    let n = fam.base.n;
    let sf = solve_family(fam, opts, Some(ambient_trunc))?;
    let pairing = sf.integrate(|x| x.rdot * x.p_rdot)?;
    let obstruction_term = sf.integrate(|x| (x.rddot - x.grad_rdot_sq) * x.obstruction)?;
    let rhs = c_n(n) * (k_n(n) * pairing + obstruction_term);
    let rhs_inverse = c_n(n) * (pairing / c_nk(n, 1) + obstruction_term);
    let q = |t: f64| qprime_at(fam, t, opts);
    let lhs = d2_5pt(&q, h)?;
    let lhs_half_step = d2_5pt(&q, h / 2.0)?;
    Ok(SecondVariation {
        lhs,
        lhs_half_step,
        rhs,
        rhs_inverse,
        pairing,
        obstruction_term,
        rel: rel(lhs, rhs),
        rel_inverse: rel(lhs, rhs_inverse),
        step_rel: rel(lhs, lhs_half_step),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ObstructionVariation {
    /// `𝒪̇ − Re ṙ^A𝒪_A` per node.
    pub lhs: Vec<f64>,
    /// `c_{n,1}^{-1} P_{n+3} ṙ` per node.
    pub rhs: Vec<f64>,
    pub max_diff: f64,
    pub scale: f64,
}

pub fn obstruction_variation_check(sf: &SolvedFamily) -> ObstructionVariation {
    let n = sf.grid.n;
    let lhs: Vec<f64> = sf.nodes.iter().map(|x| x.odot - x.rdot_dobs).collect();
    let rhs: Vec<f64> = sf.nodes.iter().map(|x| x.p_rdot / c_nk(n, 1)).collect();
    let max_diff = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = lhs.iter().chain(&rhs).map(|x| x.abs()).fold(0.0, f64::max);
    ObstructionVariation { lhs, rhs, max_diff, scale }
}

/// (ṙ, r̈) at p from a second seed `ρ_t (1 + bump)`; on M both are fixed by the
/// family. (𝒪̇ alone is not: it sees the normal derivative of 𝒪.)
pub fn rdot_other_seed(fam: &DeformationFamily, p: &[C64], trunc: usize, bump: &[(Vec<u8>, Vec<u8>, usize, C64)]) -> Result<(f64, f64), VariationError> {
    let n = fam.base.n;
    let seed = family_seed(&fam.spec(), p, trunc);
    let b = Jet::from_poly_at(seed.vars(), trunc, bump, p).add_const(cz(1.0));
    let sol = fefferman_from_seed(&(&seed * &b), n, p)?;
    Ok((sol.r.t_coeff(1).value(0).re, 2.0 * sol.r.t_coeff(2).value(0).re))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn perturbed(n: usize, e: f64) -> DomainSpec {
        let mut a = vec![0u8; n + 1];
        a[0] = 2;
        let mut b = vec![0u8; n + 1];
        b[1] = 1;
        DomainSpec::ball(n).add_real(&a, &b, 0, c(-e, 0.0))
    }

    // 1 − |z − tv|²
    fn translation(n: usize, v: &[C64]) -> DeformationFamily {
        let m = n + 1;
        let mut f = DeformationFamily::new(DomainSpec::ball(n), vec![]).unwrap();
        for j in 0..m {
            let mut e = vec![0u8; m];
            e[j] = 1;
            f = f.add_real(&e, &vec![0; m], 1, v[j].conj());
        }
        let v2: f64 = v.iter().map(|x| x.norm_sqr()).sum();
        f.add_real(&vec![0; m], &vec![0; m], 2, c(-v2, 0.0))
    }

    fn cubic_family(base: DomainSpec) -> DeformationFamily {
        DeformationFamily::new(base, vec![])
            .unwrap()
            .add_real(&[1, 1], &[1, 0], 1, c(0.3, 0.1))
            .add_real(&[0, 3], &[0, 0], 1, c(0.2, -0.1))
            .add_real(&[1, 0], &[0, 2], 1, c(-0.1, 0.2))
    }

    #[test]
    fn constants() {
        assert_eq!(c_n(1), 12.0);
        assert_eq!(c_n(2), -96.0);
        assert_eq!(k_n(1), -36.0);
        assert_eq!(c_nk(1, 1), -36.0);
    }

    #[test]
    fn trivial_family_is_static() {
        let fam = DeformationFamily::new(perturbed(1, 0.1), vec![]).unwrap();
        let sf = solve_family(&fam, &GridOptions::new(4, 4), None).unwrap();
        assert!(sf.nodes.iter().all(|x| x.rdot == 0.0 && x.rddot == 0.0 && x.odot == 0.0));
        assert!(DeformationFamily::new(DomainSpec::ball(1), vec![RhoTerm { zpow: vec![0, 0], zbarpow: vec![0, 0], tpow: 3, c: c(1.0, 0.0) }]).is_err());
    }

    #[test]
    fn translation_rdot_matches_explicit_and_differences() {
        let v = [c(0.3, -0.2), c(0.1, 0.4)];
        let fam = translation(1, &v);
        let p = [c(0.6, 0.0), c(0.0, 0.8)];
        let sol = solve_family_at(&fam, &p, 10).unwrap();
        let rdot = sol.r.t_coeff(1).value(0).re;
        let exact = 2.0 * (p[0] * v[0].conj() + p[1] * v[1].conj()).re;
        assert!((rdot - exact).abs() < 1e-12, "{rdot} {exact}");
        let rddot = 2.0 * sol.r.t_coeff(2).value(0).re;
        assert!((rddot + 2.0 * (v[0].norm_sqr() + v[1].norm_sqr())).abs() < 1e-12);
        let (d1, d2) = rdot_finite_difference(&fam, &p, 1e-3, 10).unwrap();
        assert!((d1 - rdot).abs() < 1e-7 && (d2 - rddot).abs() < 1e-6, "{d1} {d2}");
    }

    #[test]
    fn nilpotent_t_matches_fixed_t_solves() {
        let fam = cubic_family(perturbed(1, 0.1));
        let r = boundary_radius(&fam.base, &[c(0.6, 0.0), c(0.0, 0.8)]).unwrap();
        let p = [c(0.6 * r, 0.0), c(0.0, 0.8 * r)];
        let sol = solve_family_at(&fam, &p, 10).unwrap();
        let (d1, d2) = rdot_finite_difference(&fam, &p, 1e-3, 10).unwrap();
        let rdot = sol.r.t_coeff(1).value(0).re;
        let rddot = 2.0 * sol.r.t_coeff(2).value(0).re;
        assert!((d1 - rdot).abs() < 1e-6 && (d2 - rddot).abs() < 1e-6, "{d1} {rdot} {d2} {rddot}");
        // boundary values of ṙ, r̈ do not depend on the seed
        let bump = vec![(vec![1, 0], vec![1, 0], 0, c(0.1, 0.0)), (vec![1, 0], vec![0, 0], 1, c(0.05, 0.02)), (vec![0, 0], vec![1, 0], 1, c(0.05, -0.02))];
        let (r2, s2) = rdot_other_seed(&fam, &p, 10, &bump).unwrap();
        assert!((r2 - rdot).abs() < 1e-8 && (s2 - rddot).abs() < 1e-8, "{r2} {rdot} {s2} {rddot}");
    }

    #[test]
    fn reparametrization_scales() {
        let fam = cubic_family(perturbed(1, 0.1));
        let p = [c(1.0, 0.0), c(0.0, 0.0)];
        let a = solve_family_at(&fam, &p, 10).unwrap();
        let b = solve_family_at(&fam.reparametrized(2.0), &p, 10).unwrap();
        let (ra, rb) = (a.r.t_coeff(1).value(0).re, b.r.t_coeff(1).value(0).re);
        let (sa, sb) = (a.r.t_coeff(2).value(0).re, b.r.t_coeff(2).value(0).re);
        assert!((rb - 2.0 * ra).abs() < 1e-12 && (sb - 4.0 * sa).abs() < 1e-12);
    }

    #[test]
    fn linearization_and_obstruction_variation() {
        let fam = cubic_family(perturbed(1, 0.1));
        let sf = solve_family(&fam, &GridOptions::full(2, 2), Some(14)).unwrap();
        for x in &sf.nodes {
            assert!(x.linearization_residual < 1e-7, "{x:?}");
        }
        let ov = obstruction_variation_check(&sf);
        assert!(ov.max_diff < 1e-6 * ov.scale.max(1.0), "{ov:?}");
        assert!(ov.scale > 1e-4);
    }

    #[test]
    fn ball_obstruction_variation_vanishes() {
        // translations are automorphisms: 𝒪 stays zero and P ṙ = 0
        let fam = translation(1, &[c(0.2, 0.1), c(-0.1, 0.3)]);
        let sf = solve_family(&fam, &GridOptions::full(2, 2), Some(14)).unwrap();
        let ov = obstruction_variation_check(&sf);
        assert!(ov.scale < 1e-9, "{ov:?}");
    }

    // terms whose phases lie in the lattice of the base, so ṙ actually couples to 𝒪
    fn coupled_family(base: DomainSpec) -> DeformationFamily {
        DeformationFamily::new(base, vec![])
            .unwrap()
            .add_real(&[2, 0], &[0, 1], 1, c(0.3, 0.1))
            .add_real(&[1, 1], &[1, 1], 1, c(0.2, 0.0))
            .add_real(&[2, 0], &[2, 0], 1, c(-0.1, 0.0))
    }

    #[test]
    fn ball_is_critical() {
        let fam = DeformationFamily::new(DomainSpec::ball(1), vec![]).unwrap().add_real(&[1, 1], &[1, 1], 1, c(0.3, 0.0));
        let fv = first_variation_check(&fam, &GridOptions::new(8, 8), 1e-2).unwrap();
        assert!(fv.rhs.abs() < 1e-12);
        assert!(fv.lhs.abs() < 1e-4 * fv.qprime0, "{fv:?}");
        assert!((fv.qprime0 - 8.0 * PI * PI).abs() < 1e-8);
    }

    #[test]
    fn first_variation_perturbed() {
        let fam = coupled_family(perturbed(1, 0.1));
        let fv = first_variation_check(&fam, &GridOptions::new(10, 10), 1e-2).unwrap();
        assert!(fv.rhs.abs() > 0.1);
        assert!(fv.rel < 1e-5 && fv.step_rel < 1e-5, "{fv:?}");
    }

    #[test]
    fn second_variation_ball() {
        let fam = DeformationFamily::new(DomainSpec::ball(1), vec![]).unwrap().add_real(&[1, 1], &[1, 1], 1, c(0.3, 0.0));
        let sv = second_variation_check(&fam, &GridOptions::new(6, 6), 1e-2, 14).unwrap();
        assert!(sv.lhs < 0.0);
        assert!(sv.rel_inverse < 1e-6, "{sv:?}");
        // doubling t quadruples both sides
        let sv2 = second_variation_check(&fam.reparametrized(2.0), &GridOptions::new(6, 6), 5e-3, 14).unwrap();
        assert!((sv2.rhs_inverse / sv.rhs_inverse - 4.0).abs() < 1e-8);
        assert!((sv2.lhs / sv.lhs - 4.0).abs() < 1e-6);
    }
}
