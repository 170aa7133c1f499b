//! Complex Monge–Ampère operator and Fefferman's approximate solution.

use crate::jets::{Jet, JetError, VariableSet};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error("point {0:?} is not on the boundary: rho = {1:.3e}")]
    OffBoundary(Vec<C64>, f64),
    #[error("d rho vanishes at {0:?}")]
    Critical(Vec<C64>),
    #[error("Levi form not positive definite at {0:?}")]
    LeviNotPositive(Vec<C64>),
    #[error("defining function is not real")]
    NotReal,
    #[error("unsupported dimension n = {0}")]
    Dimension(usize),
    #[error("truncation {0} too small (need at least {1})")]
    Truncation(usize, usize),
}

/// One monomial `c z^zpow zbar^zbarpow t^tpow` of a defining function.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoTerm {
    pub zpow: Vec<u8>,
    pub zbarpow: Vec<u8>,
    pub tpow: usize,
    pub c: C64,
}

/// Domain `{rho > 0}` in C^{n+1}, rho a real polynomial (optionally depending on t).
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub n: usize,
    pub rho_terms: Vec<RhoTerm>,
    pub anchor_points: Vec<Vec<C64>>,
    pub star_center: Vec<C64>,
}

fn cr(x: f64) -> C64 {
    C64::new(x, 0.0)
}

impl DomainSpec {
    pub fn new(n: usize, rho_terms: Vec<RhoTerm>) -> DomainSpec {
        DomainSpec { n, rho_terms, anchor_points: vec![], star_center: vec![C64::default(); n + 1] }
    }

    /// `1 - |z|^2` in C^{n+1}.
    pub fn ball(n: usize) -> DomainSpec {
        let m = n + 1;
        let mut terms = vec![RhoTerm { zpow: vec![0; m], zbarpow: vec![0; m], tpow: 0, c: cr(1.0) }];
        for j in 0..m {
            let mut e = vec![0u8; m];
            e[j] = 1;
            terms.push(RhoTerm { zpow: e.clone(), zbarpow: e, tpow: 0, c: cr(-1.0) });
        }
        DomainSpec::new(n, terms)
    }

    /// Adds `c z^a zbar^b t^k + conj` (one term if self-conjugate).
    pub fn add_real(mut self, a: &[u8], b: &[u8], k: usize, c: C64) -> DomainSpec {
        if a == b {
            self.rho_terms.push(RhoTerm { zpow: a.to_vec(), zbarpow: b.to_vec(), tpow: k, c: cr(c.re) });
        } else {
            self.rho_terms.push(RhoTerm { zpow: a.to_vec(), zbarpow: b.to_vec(), tpow: k, c });
            self.rho_terms.push(RhoTerm { zpow: b.to_vec(), zbarpow: a.to_vec(), tpow: k, c: c.conj() });
        }
        self
    }

    pub fn m(&self) -> usize {
        self.n + 1
    }

    pub fn t_degree(&self) -> usize {
        self.rho_terms.iter().map(|t| t.tpow).max().unwrap_or(0)
    }

    pub fn check(&self) -> Result<(), SolveError> {
        if !(1..=2).contains(&self.n) {
            return Err(SolveError::Dimension(self.n));
        }
        let m = self.m();
        if self.rho_terms.iter().any(|t| t.zpow.len() != m || t.zbarpow.len() != m || t.tpow > 2) {
            return Err(SolveError::Jet(JetError::Mismatch));
        }
        let tmax = self.t_degree();
        let j = self.rho_at(&vec![C64::default(); m], 4 * self.max_degree().max(1), tmax);
        if j.reality_defect() > 1e-12 * j.max_abs().max(1.0) {
            return Err(SolveError::NotReal);
        }
        Ok(())
    }

    pub fn max_degree(&self) -> usize {
        self.rho_terms.iter().map(|t| t.zpow.iter().chain(&t.zbarpow).map(|&x| x as usize).sum::<usize>()).max().unwrap_or(0)
    }

    fn raw_terms(&self, tmax: usize) -> Vec<(Vec<u8>, Vec<u8>, usize, C64)> {
        self.rho_terms.iter().filter(|t| t.tpow <= tmax).map(|t| (t.zpow.clone(), t.zbarpow.clone(), t.tpow, t.c)).collect()
    }

    /// rho expanded about `p`, with t-parts up to `tmax`.
    pub fn rho_at(&self, p: &[C64], trunc: usize, tmax: usize) -> Jet {
        let vars = if tmax > 0 { VariableSet::with_t(self.m(), tmax) } else { VariableSet::new(self.m()) };
        Jet::from_poly_at(vars, trunc, &self.raw_terms(tmax), p)
    }

    /// rho(z) at fixed t.
    pub fn eval(&self, z: &[C64], t: f64) -> f64 {
        self.rho_terms
            .iter()
            .map(|term| {
                let mut v = term.c * t.powi(term.tpow as i32);
                for j in 0..z.len() {
                    v *= z[j].powi(term.zpow[j] as i32) * z[j].conj().powi(term.zbarpow[j] as i32);
                }
                v.re
            })
            .sum()
    }

    /// Gradient `d rho / d z_j` at fixed t.
    pub fn grad(&self, z: &[C64], t: f64) -> Vec<C64> {
        let m = self.m();
        (0..m)
            .map(|j| {
                self.rho_terms
                    .iter()
                    .filter(|term| term.zpow[j] > 0)
                    .map(|term| {
                        let mut v = term.c * t.powi(term.tpow as i32) * term.zpow[j] as f64;
                        for k in 0..m {
                            let e = term.zpow[k] as i32 - if k == j { 1 } else { 0 };
                            v *= z[k].powi(e) * z[k].conj().powi(term.zbarpow[k] as i32);
                        }
                        v
                    })
                    .sum()
            })
            .collect()
    }

    /// Same domain at a fixed parameter value t (t-terms folded into the coefficients).
    pub fn at_t(&self, t: f64) -> DomainSpec {
        let mut s = self.clone();
        s.rho_terms = self
            .rho_terms
            .iter()
            .map(|x| RhoTerm { tpow: 0, c: x.c * t.powi(x.tpow as i32), ..x.clone() })
            .filter(|x| x.c.norm() != 0.0)
            .collect();
        s
    }
}

/// Levi matrix `-d dbar rho` restricted to `ker d rho` at the center of a jet, in
/// the basis `e_a - (rho_a/rho_p) e_p` (p the largest gradient component).
pub fn levi_matrix(rho: &Jet) -> Option<DMatrix<C64>> {
    let m = rho.vars().num_complex;
    let g: Vec<C64> = (0..m).map(|j| rho.d(j).value(0)).collect();
    let p = (0..m).max_by(|&a, &b| g[a].norm().partial_cmp(&g[b].norm()).unwrap())?;
    if g[p].norm() == 0.0 {
        return None;
    }
    let h = DMatrix::from_fn(m, m, |j, k| rho.d(j).db(k).value(0));
    let basis: Vec<Vec<C64>> = (0..m)
        .filter(|&a| a != p)
        .map(|a| {
            let mut v = vec![C64::default(); m];
            v[a] = cr(1.0);
            v[p] = -g[a] / g[p];
            v
        })
        .collect();
    let n = basis.len();
    Some(DMatrix::from_fn(n, n, |x, y| {
        let mut s = C64::default();
        for j in 0..m {
            for k in 0..m {
                s -= h[(j, k)] * basis[x][j] * basis[y][k].conj();
            }
        }
        s
    }))
}

/// `(-1)^{n+1} det [[u, u_b̄], [u_a, u_ab̄]]` by Gaussian elimination on jets.
pub fn jmap(u: &Jet, n: usize) -> Result<Jet, JetError> {
    let m = n + 1;
    if u.vars().num_complex != m {
        return Err(JetError::Mismatch);
    }
    let du: Vec<Jet> = (0..m).map(|a| u.d(a)).collect();
    let mut mat: Vec<Vec<Jet>> = Vec::with_capacity(m + 1);
    let mut row0 = vec![u.clone()];
    row0.extend((0..m).map(|b| u.db(b)));
    mat.push(row0);
    for a in 0..m {
        let mut row = vec![du[a].clone()];
        row.extend((0..m).map(|b| du[a].db(b)));
        mat.push(row);
    }
    let det = det_jets(mat)?;
    Ok(if n % 2 == 0 { -det } else { det })
}

/// Determinant of a square jet matrix, pivoting on constant terms.
pub fn det_jets(mut a: Vec<Vec<Jet>>) -> Result<Jet, JetError> {
    let k = a.len();
    let mut det: Option<Jet> = None;
    let mut sign = 1.0;
    for c in 0..k {
        let piv = (c..k).max_by(|&x, &y| a[x][c].value(0).norm().partial_cmp(&a[y][c].value(0).norm()).unwrap()).unwrap();
        if a[piv][c].value(0).norm() == 0.0 {
            return Err(JetError::ZeroConstant);
        }
        if piv != c {
            a.swap(piv, c);
            sign = -sign;
        }
        let inv = a[c][c].invert()?;
        for r in c + 1..k {
            let f = &a[r][c] * &inv;
            for j in c + 1..k {
                let v = &a[r][j] - &(&f * &a[c][j]);
                a[r][j] = v;
            }
        }
        det = Some(match det {
            None => a[c][c].clone(),
            Some(d) => &d * &a[c][c],
        });
    }
    Ok(det.expect("nonempty matrix").scale_re(sign))
}

/// Inverse of a square jet matrix (Gauss–Jordan on constant-term pivots).
pub fn inverse_jets(a: &[Vec<Jet>]) -> Result<Vec<Vec<Jet>>, JetError> {
    let k = a.len();
    let vars = a[0][0].vars();
    let tr = a[0][0].trunc();
    let mut m: Vec<Vec<Jet>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..k).map(|j| if i == j { Jet::one(vars, tr) } else { Jet::zero(vars, tr) }));
            r
        })
        .collect();
    for c in 0..k {
        let piv = (c..k).max_by(|&x, &y| m[x][c].value(0).norm().partial_cmp(&m[y][c].value(0).norm()).unwrap()).unwrap();
        if m[piv][c].value(0).norm() == 0.0 {
            return Err(JetError::ZeroConstant);
        }
        m.swap(piv, c);
        let inv = m[c][c].invert()?;
        for j in 0..2 * k {
            m[c][j] = &m[c][j] * &inv;
        }
        for r in 0..k {
            if r == c {
                continue;
            }
            let f = m[r][c].clone();
            if f.max_abs() == 0.0 {
                continue;
            }
            for j in 0..2 * k {
                let v = &m[r][j] - &(&f * &m[c][j]);
                m[r][j] = v;
            }
        }
    }
    Ok(m.into_iter().map(|r| r[k..].to_vec()).collect())
}

#[derive(Debug, Clone)]
pub struct FeffermanSolution {
    pub n: usize,
    pub anchor: Vec<C64>,
    /// Seed defining function (rho or a multiple of it) at the anchor.
    pub rho: Jet,
    pub r: Jet,
    pub achieved_order: usize,
    pub obstruction: Jet,
    /// `r / rho`
    pub multiplier: Jet,
    /// Divisibility residual at each step (zeroth normalization, s = 1..n+1, obstruction).
    pub residuals: Vec<f64>,
}

impl FeffermanSolution {
    /// Obstruction value at the anchor.
    pub fn obstruction_value(&self) -> f64 {
        self.obstruction.value(0).re
    }

    pub fn trunc(&self) -> usize {
        self.r.trunc()
    }
}

/// Default truncation: `2(n+2)+4`.
pub fn default_trunc(n: usize) -> usize {
    2 * (n + 2) + 4
}

pub fn check_anchor(spec: &DomainSpec, p: &[C64]) -> Result<(), SolveError> {
    let v = spec.eval(p, 0.0);
    if v.abs() > 1e-9 {
        return Err(SolveError::OffBoundary(p.to_vec(), v));
    }
    let rho = spec.rho_at(p, 3, 0);
    let g: f64 = (0..spec.m()).map(|j| rho.d(j).value(0).norm_sqr()).sum();
    if g.sqrt() < 1e-10 {
        return Err(SolveError::Critical(p.to_vec()));
    }
    let l = levi_matrix(&rho).ok_or_else(|| SolveError::Critical(p.to_vec()))?;
    if l.symmetric_eigenvalues().iter().any(|&x| x <= 0.0) {
        return Err(SolveError::LeviNotPositive(p.to_vec()));
    }
    Ok(())
}

/// Fefferman's defining function at `p` and the obstruction jet.
pub fn fefferman_solve(spec: &DomainSpec, p: &[C64], trunc: usize) -> Result<FeffermanSolution, SolveError> {
    check_anchor(spec, p)?;
    let mut rho = spec.rho_at(p, trunc, spec.t_degree());
    rho.set_value(0, C64::default());
    fefferman_from_seed(&rho, spec.n, p)
}

/// Same iteration from an arbitrary seed defining function (jet at the anchor).
pub fn fefferman_from_seed(rho: &Jet, n: usize, p: &[C64]) -> Result<FeffermanSolution, SolveError> {
    let need = n + 4;
    if rho.trunc() < need {
        return Err(SolveError::Truncation(rho.trunc(), need));
    }
    let nn = (n + 2) as i64;
    let mut res = vec![0.0];
    let j0 = jmap(rho, n)?;
    let mut r = rho * &j0.power_frac(-1, nn)?;
    for s in 1..=n + 1 {
        let e = jmap(&r, n)?.add_const(cr(-1.0));
        let (q, rr) = e.divide_by_defining_res(&r, s)?;
        res.push(rr);
        let c = 1.0 / ((s + 1) * (n + 2 - s)) as f64;
        let upd = &q * &r.powi(s as u32 + 1);
        r = &r - &upd.scale_re(c);
    }
    let e = jmap(&r, n)?.add_const(cr(-1.0));
    let (o, rr) = e.divide_by_defining_res(&r, n + 2)?;
    res.push(rr);
    if o.prec() < 0 {
        return Err(SolveError::Jet(JetError::Truncation { need: 0, have: o.prec() }));
    }
    let multiplier = r.divide_by_defining(rho, 1)?;
    Ok(FeffermanSolution {
        n,
        anchor: p.to_vec(),
        rho: rho.clone(),
        r,
        achieved_order: n + 2,
        obstruction: o,
        multiplier,
        residuals: res,
    })
}

/// Obstruction value at `p`.
pub fn obstruction_at(spec: &DomainSpec, p: &[C64], trunc: usize) -> Result<f64, SolveError> {
    Ok(fefferman_solve(spec, p, trunc)?.obstruction_value())
}

/// Re-solves from the seed `ρ(1 + Σ b_j|z_j − p_j|²)` and returns the remainder of
/// `r' − r` on division by r^{n+3} and the change in 𝒪 at p.
pub fn seed_dependence(spec: &DomainSpec, sol: &FeffermanSolution, bump: &[f64]) -> Result<(f64, f64), SolveError> {
    let n = spec.n;
    let m = spec.m();
    let p = &sol.anchor;
    let trunc = sol.trunc();
    let mut rho = spec.rho_at(p, trunc, 0);
    rho.set_value(0, C64::default());
    let terms: Vec<_> = bump
        .iter()
        .take(m)
        .enumerate()
        .map(|(j, &b)| {
            let mut e = vec![0u8; m];
            e[j] = 1;
            (e.clone(), e, 0usize, cr(b))
        })
        .collect();
    // jets live in w = z − p, so the monomials are already centered
    let b = Jet::from_terms(rho.vars(), trunc, &terms).add_const(cr(1.0));
    let other = fefferman_from_seed(&(&rho * &b), n, p)?;
    let d = &other.r - &sol.r;
    let res = match d.divide_by_defining_res(&sol.r, n + 3) {
        Ok((_, r)) => r,
        Err(JetError::Divisibility { residual, .. }) => residual,
        Err(e) => return Err(e.into()),
    };
    Ok((res, (other.obstruction_value() - sol.obstruction_value()).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jets::Sym;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    // 3x3 determinant by explicit minor expansion
    fn det3(a: &[[Jet; 3]; 3]) -> Jet {
        let m = |i: usize, j: usize, k: usize, l: usize| &(&a[i][k] * &a[j][l]) - &(&a[i][l] * &a[j][k]);
        let t0 = &a[0][0] * &m(1, 2, 1, 2);
        let t1 = &a[0][1] * &m(1, 2, 0, 2);
        let t2 = &a[0][2] * &m(1, 2, 0, 1);
        &(&t0 - &t1) + &t2
    }

    fn perturbed(n: usize, eps: f64) -> DomainSpec {
        let mut a = vec![0u8; n + 1];
        a[0] = 2;
        let mut b = vec![0u8; n + 1];
        b[1] = 1;
        DomainSpec::ball(n).add_real(&a, &b, 0, c(-eps, 0.0))
    }

    #[test]
    fn ball_jmap_is_one() {
        for n in 1..=2 {
            let spec = DomainSpec::ball(n);
            let p = {
                let mut p = vec![c(0.0, 0.0); n + 1];
                p[0] = c(0.6, 0.0);
                p[1] = c(0.0, 0.8);
                p
            };
            let u = spec.rho_at(&p, 8, 0);
            let j = jmap(&u, n).unwrap();
            assert!(j.add_const(c(-1.0, 0.0)).max_abs() < 1e-13);
            let k = jmap(&u.scale_re(1.7), n).unwrap();
            assert!((&k - &j.scale_re(1.7f64.powi(n as i32 + 2))).max_abs() < 1e-12);
        }
    }

    #[test]
    fn jmap_matches_minor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spec = DomainSpec::ball(1);
        for _ in 0..4 {
            let a = [rng.gen_range(0..3u8), rng.gen_range(0..2u8)];
            let b = [rng.gen_range(0..2u8), rng.gen_range(0..2u8)];
            spec = spec.add_real(&a, &b, 0, c(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)));
        }
        let u = spec.rho_at(&[c(0.2, 0.1), c(-0.1, 0.3)], 7, 0);
        let j = jmap(&u, 1).unwrap();
        let mat = [
            [u.clone(), u.db(0), u.db(1)],
            [u.d(0), u.d(0).db(0), u.d(0).db(1)],
            [u.d(1), u.d(1).db(0), u.d(1).db(1)],
        ];
        let want = det3(&mat);
        assert!((&j - &want).max_abs() < 1e-11);
        assert!(j.is_real(1e-12));
    }

    #[test]
    fn ball_solution_is_exact() {
        for n in 1..=2 {
            let spec = DomainSpec::ball(n);
            let mut p = vec![c(0.0, 0.0); n + 1];
            p[0] = c(1.0, 0.0);
            let sol = fefferman_solve(&spec, &p, default_trunc(n)).unwrap();
            assert!((&sol.r - &sol.rho).max_abs_upto(sol.r.prec()) < 1e-12);
            assert!(sol.obstruction.max_abs() < 1e-10);
            assert!(sol.residuals.iter().all(|&x| x < 1e-12));
        }
    }

    #[test]
    fn perturbed_ball_reaches_order() {
        let spec = perturbed(1, 0.05);
        let sol = fefferman_solve(&spec, &[c(1.0, 0.0), c(0.0, 0.0)], 10).unwrap();
        assert_eq!(sol.achieved_order, 3);
        let e = jmap(&sol.r, 1).unwrap().add_const(c(-1.0, 0.0));
        let (_, res) = e.divide_by_defining_res(&sol.r, 3).unwrap();
        assert!(res < 1e-10);
        assert!(sol.obstruction_value().abs() > 1e-6);
        assert!(sol.obstruction.value(0).im.abs() < 1e-10);
        assert!(sol.multiplier.value(0).re > 0.0);
    }

    #[test]
    fn seed_independence() {
        let spec = perturbed(1, 0.05);
        let p = [c(1.0, 0.0), c(0.0, 0.0)];
        let a = fefferman_solve(&spec, &p, 10).unwrap();
        let rho = &a.rho;
        let seed = rho * &rho.scale_re(0.5).add_const(c(1.0, 0.0));
        let b = fefferman_from_seed(&seed, 1, &p).unwrap();
        // r agrees modulo r^{n+3}
        let d = &a.r - &b.r;
        let q = d.divide_by_defining(&a.r, 4).unwrap();
        assert!(q.prec() >= 0);
        assert!((a.obstruction_value() - b.obstruction_value()).abs() < 1e-8);
        // idempotence: its own output as seed
        let hi = fefferman_solve(&spec, &p, 14).unwrap();
        let c2 = fefferman_from_seed(&hi.r, 1, &p).unwrap();
        (&c2.r - &hi.r).divide_by_defining(&hi.r, 4).unwrap();
        assert!((c2.obstruction_value() - hi.obstruction_value()).abs() < 1e-10);
        assert!((hi.obstruction_value() - a.obstruction_value()).abs() < 1e-10);
    }

    #[test]
    fn inverse_matrix_round_trip() {
        let v = VariableSet::new(1);
        let x = Jet::var(v, 5, Sym::Z(0)).unwrap();
        let a = vec![
            vec![x.add_const(c(0.0, 0.0)), Jet::one(v, 5)],
            vec![Jet::one(v, 5).scale_re(2.0), x.conj().add_const(c(1.0, 1.0))],
        ];
        let inv = inverse_jets(&a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let s = &(&a[i][0] * &inv[0][j]) + &(&a[i][1] * &inv[1][j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(s.add_const(c(-want, 0.0)).max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_anchors() {
        let spec = DomainSpec::ball(1);
        assert!(matches!(fefferman_solve(&spec, &[c(0.5, 0.0), c(0.0, 0.0)], 10), Err(SolveError::OffBoundary(..))));
        // pseudoconcave side: complement of the ball
        let neg = DomainSpec::new(1, spec.rho_terms.iter().map(|t| RhoTerm { c: -t.c, ..t.clone() }).collect());
        assert!(matches!(fefferman_solve(&neg, &[c(1.0, 0.0), c(0.0, 0.0)], 10), Err(SolveError::LeviNotPositive(..))));
    }
}
