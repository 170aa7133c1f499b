//! Ambient Kähler metric with potential `|X⁰|² r(X/X⁰)`, worked on the slice X⁰ = 1.
//!
//! A function homogeneous of bidegree (p, q) is stored as
//! `(X⁰)^p (X̄⁰)^q Σ ℓ^i ℓ̄^j f_ij(z)` with `ℓ = log X⁰` and `z = X'/X⁰`;
//! differentiation in X⁰ is then expressed through the Euler operator in z,
//! so nothing ever leaves the n+1 slice variables.

use crate::jets::{Jet, JetError};
use crate::monge_ampere::{inverse_jets, jmap, FeffermanSolution};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use num_complex::Complex64 as C64;
use std::collections::BTreeMap;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbientError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error("weight mismatch: ({0},{1}) vs ({2},{3})")]
    Weight(i32, i32, i32, i32),
    #[error("metric is not Lorentzian at the anchor (positive eigenvalues: {0})")]
    Signature(usize),
    #[error("order {0} reaches the obstruction order {1}")]
    ObstructionOrder(usize, i32),
    #[error("truncation exhausted: {0}")]
    Truncation(String),
    #[error("density is not in the kernel of the deformation operator (residual {0:.3e})")]
    NotInKernel(f64),
    #[error("routes disagree: {0:.3e} vs {1:.3e}")]
    Routes(f64, f64),
}

/// Homogeneous function on the ambient space; a density of weight w when p = q = w.
#[derive(Clone, Debug)]
pub struct DensityJet {
    pub p: i32,
    pub q: i32,
    pub logs: BTreeMap<(u8, u8), Jet>,
}

impl DensityJet {
    /// `(X⁰)^p (X̄⁰)^q f(z)`.
    pub fn new(p: i32, q: i32, f: Jet) -> DensityJet {
        let mut logs = BTreeMap::new();
        logs.insert((0, 0), f);
        DensityJet { p, q, logs }
    }

    /// Weight-w density with slice representative f.
    pub fn density(w: i32, f: Jet) -> DensityJet {
        DensityJet::new(w, w, f)
    }

    pub fn weight(&self) -> Option<i32> {
        (self.p == self.q).then_some(self.p)
    }

    fn any(&self) -> &Jet {
        self.logs.values().next().expect("nonempty density")
    }

    /// Restriction to the slice X⁰ = 1 (where ℓ = 0).
    pub fn slice(&self) -> Jet {
        self.logs.get(&(0, 0)).cloned().unwrap_or_else(|| Jet::zero(self.any().vars(), self.any().trunc()))
    }

    pub fn value(&self) -> C64 {
        self.slice().value(0)
    }

    pub fn try_add(&self, o: &DensityJet) -> Result<DensityJet, AmbientError> {
        if (self.p, self.q) != (o.p, o.q) {
            return Err(AmbientError::Weight(self.p, self.q, o.p, o.q));
        }
        let mut logs = self.logs.clone();
        for (k, v) in &o.logs {
            let e = match logs.get(k) {
                Some(x) => x + v,
                None => v.clone(),
            };
            logs.insert(*k, e);
        }
        Ok(DensityJet { p: self.p, q: self.q, logs })
    }

    pub fn add(&self, o: &DensityJet) -> DensityJet {
        self.try_add(o).expect("density weights must match")
    }

    pub fn sub(&self, o: &DensityJet) -> DensityJet {
        self.add(&o.scale(C64::new(-1.0, 0.0)))
    }

    pub fn mul(&self, o: &DensityJet) -> DensityJet {
        let mut logs: BTreeMap<(u8, u8), Jet> = BTreeMap::new();
        for ((i, j), a) in &self.logs {
            for ((k, l), b) in &o.logs {
                let key = (i + k, j + l);
                let v = a * b;
                let e = match logs.remove(&key) {
                    Some(x) => &x + &v,
                    None => v,
                };
                logs.insert(key, e);
            }
        }
        DensityJet { p: self.p + o.p, q: self.q + o.q, logs }
    }

    /// Multiplication by a weight-0 function of z.
    pub fn mul_jet(&self, f: &Jet) -> DensityJet {
        self.map(|x| x * f)
    }

    pub fn scale(&self, c: C64) -> DensityJet {
        self.map(|x| x.scale(c))
    }

    pub fn scale_re(&self, c: f64) -> DensityJet {
        self.map(|x| x.scale_re(c))
    }

    pub fn map(&self, f: impl Fn(&Jet) -> Jet) -> DensityJet {
        DensityJet { p: self.p, q: self.q, logs: self.logs.iter().map(|(k, v)| (*k, f(v))).collect() }
    }

    pub fn conj(&self) -> DensityJet {
        DensityJet { p: self.q, q: self.p, logs: self.logs.iter().map(|(&(i, j), v)| ((j, i), v.conj())).collect() }
    }

    pub fn re(&self) -> DensityJet {
        self.add(&self.conj()).scale_re(0.5)
    }

    pub fn max_abs(&self) -> f64 {
        self.logs.values().map(|j| j.max_abs()).fold(0.0, f64::max)
    }

    pub fn min_prec(&self) -> i32 {
        self.logs.values().map(|j| j.prec()).min().unwrap_or(i32::MAX)
    }

    pub fn max_abs_upto(&self, d: i32) -> f64 {
        self.logs.values().map(|j| j.max_abs_upto(d)).fold(0.0, f64::max)
    }

    pub fn truncated(&self, d: i32) -> DensityJet {
        self.map(|j| j.truncated(d))
    }
}

/// Ambient metric, inverse and Christoffel symbols at an anchor on the slice.
pub struct AmbientState {
    pub n: usize,
    pub anchor: Vec<C64>,
    /// Defining function r on the slice (the potential is |X⁰|² r).
    pub r: Jet,
    /// Obstruction jet when built from a Fefferman solution.
    pub obstruction: Option<Jet>,
    /// `g[A][B] = g̃_{A B̄}`, index 0 = X⁰.
    pub g: Vec<Vec<Jet>>,
    /// `ginv[A][B] = g̃^{A B̄}`.
    pub ginv: Vec<Vec<Jet>>,
    gamma: OnceLock<Vec<Vec<Vec<Jet>>>>,
}

impl std::fmt::Debug for AmbientState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AmbientState(n={}, anchor={:?})", self.n, self.anchor)
    }
}

/// `(-1)^n ((n+2k)!)^2`.
pub fn c_nk(n: usize, k: i32) -> f64 {
    let f: f64 = (1..=(n as i32 + 2 * k)).map(|x| x as f64).product();
    if n % 2 == 0 {
        f * f
    } else {
        -f * f
    }
}

fn cr(x: f64) -> C64 {
    C64::new(x, 0.0)
}

impl AmbientState {
    pub fn build(sol: &FeffermanSolution) -> Result<AmbientState, AmbientError> {
        let mut st = AmbientState::from_potential(&sol.r, sol.n, &sol.anchor)?;
        st.obstruction = Some(sol.obstruction.clone());
        Ok(st)
    }

    /// Ambient data for an arbitrary slice potential `r` centered at `anchor`.
    pub fn from_potential(r: &Jet, n: usize, anchor: &[C64]) -> Result<AmbientState, AmbientError> {
        let m = n + 1;
        let mut st = AmbientState {
            n,
            anchor: anchor.to_vec(),
            r: r.clone(),
            obstruction: None,
            g: vec![],
            ginv: vec![],
            gamma: OnceLock::new(),
        };
        let pot = st.potential();
        let dbar: Vec<DensityJet> = (0..=m).map(|b| st.db(&pot, b)).collect();
        st.g = (0..=m).map(|a| (0..=m).map(|b| st.d(&dbar[b], a).slice()).collect()).collect();
        let c0 = DMatrix::from_fn(m + 1, m + 1, |a, b| st.g[a][b].value(0));
        // Ω = {r > 0} gives signature (1, n+1): one timelike direction
        let ev = c0.symmetric_eigenvalues();
        let pos = ev.iter().filter(|&&x| x > 0.0).count();
        if pos != 1 || ev.iter().any(|&x| x == 0.0) {
            return Err(AmbientError::Signature(pos));
        }
        let inv = inverse_jets(&st.g)?;
        // g^{A B̄} g_{C B̄} = δ: with M = (g_{A B̄}), g^{A B̄} = (M^{-1})_{B A}
        st.ginv = (0..=m).map(|a| (0..=m).map(|b| inv[b][a].clone()).collect()).collect();
        Ok(st)
    }

    pub fn m(&self) -> usize {
        self.n + 1
    }

    /// The potential 𝒓 = |X⁰|² r as a weight-1 density.
    pub fn potential(&self) -> DensityJet {
        DensityJet::density(1, self.r.clone())
    }

    pub fn one(&self) -> Jet {
        Jet::one(self.r.vars(), self.r.trunc())
    }

    /// Holomorphic coordinate X^A as a bidegree (1,0) function.
    pub fn coord(&self, a: usize) -> DensityJet {
        let f = if a == 0 { self.one() } else { self.one().scale(self.anchor[a - 1]) + self.one().mul_z(a - 1) };
        DensityJet::new(1, 0, f)
    }

    // Σ_b z^b ∂_b f with z^b = anchor_b + w_b
    fn euler(&self, f: &Jet) -> Jet {
        let mut acc: Option<Jet> = None;
        for b in 0..self.m() {
            let db = f.d(b);
            let t = &db.scale(self.anchor[b]) + &db.mul_z(b);
            acc = Some(match acc {
                None => t,
                Some(x) => &x + &t,
            });
        }
        acc.unwrap()
    }

    fn euler_bar(&self, f: &Jet) -> Jet {
        let mut acc: Option<Jet> = None;
        for b in 0..self.m() {
            let db = f.db(b);
            let t = &db.scale(self.anchor[b].conj()) + &db.mul_zb(b);
            acc = Some(match acc {
                None => t,
                Some(x) => &x + &t,
            });
        }
        acc.unwrap()
    }

    fn insert(logs: &mut BTreeMap<(u8, u8), Jet>, k: (u8, u8), v: Jet) {
        let e = match logs.remove(&k) {
            Some(x) => &x + &v,
            None => v,
        };
        logs.insert(k, e);
    }

    /// `∂ / ∂X^A`.
    pub fn d(&self, f: &DensityJet, a: usize) -> DensityJet {
        if a > 0 {
            return DensityJet { p: f.p - 1, q: f.q, logs: f.logs.iter().map(|(k, v)| (*k, v.d(a - 1))).collect() };
        }
        let mut logs = BTreeMap::new();
        for (&(i, j), v) in &f.logs {
            let t = &v.scale_re(f.p as f64) - &self.euler(v);
            Self::insert(&mut logs, (i, j), t);
            if i > 0 {
                Self::insert(&mut logs, (i - 1, j), v.scale_re(i as f64));
            }
        }
        DensityJet { p: f.p - 1, q: f.q, logs }
    }

    /// `∂ / ∂X̄^B`.
    pub fn db(&self, f: &DensityJet, b: usize) -> DensityJet {
        if b > 0 {
            return DensityJet { p: f.p, q: f.q - 1, logs: f.logs.iter().map(|(k, v)| (*k, v.db(b - 1))).collect() };
        }
        let mut logs = BTreeMap::new();
        for (&(i, j), v) in &f.logs {
            let t = &v.scale_re(f.q as f64) - &self.euler_bar(v);
            Self::insert(&mut logs, (i, j), t);
            if j > 0 {
                Self::insert(&mut logs, (i, j - 1), v.scale_re(j as f64));
            }
        }
        DensityJet { p: f.p, q: f.q - 1, logs }
    }

    fn sum(parts: impl IntoIterator<Item = DensityJet>) -> DensityJet {
        parts.into_iter().reduce(|a, b| a.add(&b)).expect("nonempty sum")
    }

    /// Kähler Laplacian `g̃^{A B̄} ∂_A ∂_B̄ F`; lowers each bidegree by one.
    pub fn laplacian(&self, f: &DensityJet) -> DensityJet {
        let m = self.m();
        Self::sum((0..=m).flat_map(|b| {
            let fb = self.db(f, b);
            (0..=m).map(move |a| self.d(&fb, a).mul_jet(&self.ginv[a][b])).collect::<Vec<_>>()
        }))
    }

    pub fn laplacian_pow(&self, f: &DensityJet, k: usize) -> DensityJet {
        (0..k).fold(f.clone(), |x, _| self.laplacian(&x))
    }

    /// `F^A = g̃^{A B̄} ∂_B̄ F`.
    pub fn raise(&self, f: &DensityJet) -> Vec<DensityJet> {
        let m = self.m();
        let fb: Vec<DensityJet> = (0..=m).map(|b| self.db(f, b)).collect();
        (0..=m).map(|a| Self::sum((0..=m).map(|b| fb[b].mul_jet(&self.ginv[a][b])))).collect()
    }

    /// `Γ[C][A][B] = g̃^{C D̄} ∂_A g̃_{B D̄}` (bidegree (-1, 0)).
    pub fn christoffel(&self) -> &Vec<Vec<Vec<Jet>>> {
        self.gamma.get_or_init(|| {
            let m = self.m();
            let dg: Vec<Vec<Vec<Jet>>> = (0..=m)
                .map(|a| (0..=m).map(|b| (0..=m).map(|d| self.d(&DensityJet::new(0, 0, self.g[b][d].clone()), a).slice()).collect()).collect())
                .collect();
            (0..=m)
                .map(|c| {
                    (0..=m)
                        .map(|a| {
                            (0..=m)
                                .map(|b| (0..=m).map(|d| &self.ginv[c][d] * &dg[a][b][d]).reduce(|x, y| &x + &y).unwrap())
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
    }

    /// `∇̃_{AB} F = ∂_A ∂_B F − Γ^C_{AB} ∂_C F`.
    pub fn cov_hessian_hol(&self, f: &DensityJet) -> Vec<Vec<DensityJet>> {
        let m = self.m();
        let gam = self.christoffel();
        let df: Vec<DensityJet> = (0..=m).map(|c| self.d(f, c)).collect();
        let mut out: Vec<Vec<Option<DensityJet>>> = vec![vec![None; m + 1]; m + 1];
        for a in 0..=m {
            for b in a..=m {
                let mut t = self.d(&df[b], a);
                for c in 0..=m {
                    let g = DensityJet::new(-1, 0, gam[c][a][b].clone());
                    t = t.sub(&g.mul(&df[c]));
                }
                out[b][a] = Some(t.clone());
                out[a][b] = Some(t);
            }
        }
        out.into_iter().map(|r| r.into_iter().map(|x| x.unwrap()).collect()).collect()
    }

    /// `∇̃^{AB}{}_{AB} F = g̃^{A C̄} ∂_C̄ ( g̃^{B D̄} ∂_D̄ ∇̃_{AB} F )`.
    pub fn double_divergence(&self, f: &DensityJet) -> DensityJet {
        let m = self.m();
        let h = self.cov_hessian_hol(f);
        let u: Vec<DensityJet> = (0..=m)
            .map(|a| Self::sum((0..=m).flat_map(|b| (0..=m).map(move |d| (b, d))).map(|(b, d)| self.db(&h[a][b], d).mul_jet(&self.ginv[b][d]))))
            .collect();
        Self::sum((0..=m).flat_map(|a| (0..=m).map(move |c| (a, c))).map(|(a, c)| self.db(&u[a], c).mul_jet(&self.ginv[a][c])))
    }

    /// `Ric_{A B̄} = −∂_A ∂_B̄ log det g̃`, using det g̃ ∝ 𝒥[r] on the slice.
    pub fn ricci(&self) -> Result<Vec<Vec<DensityJet>>, AmbientError> {
        let m = self.m();
        let jr = DensityJet::new(0, 0, jmap(&self.r, self.n)?);
        let inv = jr.slice().invert()?;
        let da: Vec<DensityJet> = (0..=m).map(|a| self.d(&jr, a)).collect();
        let db: Vec<DensityJet> = (0..=m).map(|b| self.db(&jr, b)).collect();
        let inv2 = &inv * &inv;
        Ok((0..=m)
            .map(|a| {
                (0..=m)
                    .map(|b| {
                        let t1 = self.d(&db[b], a).mul_jet(&inv);
                        let t2 = da[a].mul(&db[b]).mul_jet(&inv2);
                        t2.sub(&t1)
                    })
                    .collect()
            })
            .collect())
    }

    /// `(-1)^{n+1} det g̃` on the slice.
    pub fn det_metric(&self) -> Result<Jet, AmbientError> {
        let d = crate::monge_ampere::det_jets(self.g.clone())?;
        Ok(if self.n % 2 == 0 { -d } else { d })
    }

    /// Divides by 𝒓^s (each log coefficient by r^s).
    pub fn div_r(&self, f: &DensityJet, s: usize) -> Result<DensityJet, AmbientError> {
        let mut logs = BTreeMap::new();
        for (k, v) in &f.logs {
            logs.insert(*k, v.divide_by_defining(&self.r, s)?);
        }
        Ok(DensityJet { p: f.p - s as i32, q: f.q - s as i32, logs })
    }

    pub fn mul_r(&self, f: &DensityJet, s: usize) -> DensityJet {
        let rs = self.r.powi(s as u32);
        DensityJet { p: f.p + s as i32, q: f.q + s as i32, logs: f.logs.iter().map(|(k, v)| (*k, v * &rs)).collect() }
    }

    /// Extension F of the restriction of `f` (weight k) with Δ̃F ∈ (𝒓^order).
    pub fn harmonic_extend(&self, f: &DensityJet, order: usize) -> Result<DensityJet, AmbientError> {
        let k = f.weight().ok_or(AmbientError::Weight(f.p, f.q, f.p, f.p))?;
        let crit = self.n as i32 + 2 * k;
        if order as i32 > crit {
            return Err(AmbientError::ObstructionOrder(order, crit));
        }
        let mut big_f = f.clone();
        for j in 0..order {
            let psi = self.div_r(&self.laplacian(&big_f), j)?;
            let c = 1.0 / (((j + 1) as i32) * (crit - j as i32)) as f64;
            big_f = big_f.sub(&self.mul_r(&psi, j + 1).scale_re(c));
        }
        Ok(big_f)
    }

    /// GJMS value at the anchor: (direct power on `f`, c_{n,k}ψ from the harmonic extension).
    pub fn gjms(&self, f: &DensityJet) -> Result<(C64, C64), AmbientError> {
        let k = f.weight().ok_or(AmbientError::Weight(f.p, f.q, f.p, f.p))?;
        let crit = (self.n as i32 + 2 * k) as usize;
        let direct = self.laplacian_pow(f, crit + 1);
        let big_f = self.harmonic_extend(f, crit)?;
        let psi = self.div_r(&self.laplacian(&big_f), crit)?;
        let (a, b) = (direct.value(), psi.value() * c_nk(self.n, k));
        if !(a.re.is_finite() && b.re.is_finite()) {
            return Err(AmbientError::Truncation(format!("GJMS order {}", crit + 1)));
        }
        Ok((a, b))
    }

    /// `Δ̃^{n+1} ∇̃^{AB}{}_{AB} F` (before taking the real part).
    pub fn p_n3_raw(&self, f: &DensityJet) -> DensityJet {
        self.laplacian_pow(&self.double_divergence(f), self.n + 1)
    }

    /// `P_{n+3}` at the anchor for a weight-1 extension F.
    pub fn p_n3(&self, f: &DensityJet) -> Result<f64, AmbientError> {
        let v = self.p_n3_raw(f).value().re;
        if !v.is_finite() {
            return Err(AmbientError::Truncation("P_{n+3}".into()));
        }
        Ok(v)
    }

    /// Residual of `Δ̃^{n+1}∇̃^{AB}_{AB}F − Δ̃^{n+3}F − c_{n,1}(𝒪Δ̃F + 𝒪_A F^A + Δ̃𝒪·F)` at the anchor.
    pub fn p_n3_decomposition(&self, f: &DensityJet) -> Result<(C64, C64), AmbientError> {
        let n = self.n;
        let o = self.obstruction_density()?;
        let lhs = self.p_n3_raw(f).sub(&self.laplacian_pow(f, n + 3));
        let m = self.m();
        let fa = self.raise(f);
        let oa = Self::sum((0..=m).map(|a| self.d(&o, a).mul(&fa[a])));
        let rhs = o.mul(&self.laplacian(f)).add(&oa).add(&self.laplacian(&o).mul(f)).scale_re(c_nk(n, 1));
        Ok((lhs.value(), rhs.value()))
    }

    /// The obstruction as a weight −n−2 density.
    pub fn obstruction_density(&self) -> Result<DensityJet, AmbientError> {
        let o = self.obstruction.clone().ok_or_else(|| AmbientError::Truncation("no obstruction".into()))?;
        Ok(DensityJet::density(-(self.n as i32) - 2, o))
    }

    /// `½ ∇̃_{ᾱβ̄} F` at the anchor for the frame `Z_α` (coefficients on ∂_{z^j}) and a weight-1 F.
    pub fn p_alphabeta_ambient(&self, f: &DensityJet, z: &[Vec<C64>]) -> Vec<Vec<C64>> {
        // ∇̃_{āb̄}F = conj(∇̃_{ab} F̄)
        let h = self.cov_hessian_hol(&f.conj());
        let m = self.m();
        let hv: Vec<Vec<C64>> = (0..=m).map(|a| (0..=m).map(|b| h[a][b].value()).collect()).collect();
        z.iter()
            .map(|za| {
                z.iter()
                    .map(|zb| {
                        let mut s = C64::default();
                        for a in 0..m {
                            for b in 0..m {
                                s += za[a] * zb[b] * hv[a + 1][b + 1];
                            }
                        }
                        0.5 * s.conj()
                    })
                    .collect()
            })
            .collect()
    }

    /// Transversal field ξ^a = r̄_a / |∂r|² (so that ξ^a r_a = 1).
    pub fn xi_simple(&self) -> Result<Vec<Jet>, AmbientError> {
        let m = self.m();
        let ra: Vec<Jet> = (0..m).map(|a| self.r.d(a)).collect();
        let norm = ra.iter().map(|x| x * &x.conj()).reduce(|a, b| &a + &b).unwrap();
        let inv = norm.invert()?;
        Ok(ra.iter().map(|x| &x.conj() * &inv).collect())
    }

    /// Extension F with ∇̃_{AB}F ∈ (𝒓^order) for f in the kernel of the deformation operator.
    pub fn extend_bgg(&self, f: &DensityJet, order: usize, tol: f64) -> Result<(DensityJet, f64), AmbientError> {
        let m = self.m();
        let mut big_f = self.harmonic_extend(f, 2.min(self.n + 2))?;
        let xi = self.xi_simple()?;
        let scale = f.max_abs().max(1e-300);
        for mm in 1..order {
            let h = self.cov_hessian_hol(&big_f);
            let mut phi = vec![vec![None; m + 1]; m + 1];
            for a in 0..=m {
                for b in 0..=m {
                    match self.div_r(&h[a][b], mm) {
                        Ok(x) => phi[a][b] = Some(x),
                        Err(_) if mm == 1 => {
                            return Err(AmbientError::NotInKernel(h[a][b].value().norm() / scale));
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            let mut psi: Option<DensityJet> = None;
            for a in 1..=m {
                for b in 1..=m {
                    let v = DensityJet::new(0, -2, &xi[a - 1] * &xi[b - 1]);
                    let t = phi[a][b].as_ref().unwrap().mul(&v);
                    psi = Some(match psi {
                        None => t,
                        Some(x) => x.add(&t),
                    });
                }
            }
            let psi = psi.unwrap();
            let c = 1.0 / ((mm + 2) * (mm + 1)) as f64;
            big_f = big_f.sub(&self.mul_r(&psi, mm + 2).scale_re(c));
        }
        let h = self.cov_hessian_hol(&big_f);
        let mut res = 0.0f64;
        for row in &h {
            for x in row {
                for v in x.logs.values() {
                    let (_, r) = v.divide_by_defining_res(&self.r, order)?;
                    res = res.max(r / scale);
                }
            }
        }
        if res > tol {
            return Err(AmbientError::NotInKernel(res));
        }
        Ok((big_f, res))
    }

    /// `(log h̃)² = ((n+2)(ℓ+ℓ̄) + 2 Re G)²` for a holomorphic jet G.
    pub fn log_h_squared(&self, g: Option<&Jet>) -> DensityJet {
        let k = (self.n + 2) as f64;
        let mut logs = BTreeMap::new();
        logs.insert((1, 0), self.one().scale_re(k));
        logs.insert((0, 1), self.one().scale_re(k));
        if let Some(g) = g {
            logs.insert((0, 0), g + &g.conj());
        }
        let lh = DensityJet { p: 0, q: 0, logs };
        lh.mul(&lh)
    }

    /// Pointwise Q′ at the anchor in the trivialization θ = d^c r.
    pub fn qprime_pointwise(&self, g: Option<&Jet>) -> Result<f64, AmbientError> {
        let n = self.n;
        let v = self.laplacian_pow(&self.log_h_squared(g), n + 1).value();
        if !v.re.is_finite() {
            return Err(AmbientError::Truncation("Q'".into()));
        }
        Ok(v.re / ((n + 2) * (n + 2)) as f64)
    }
}

/// Strictly normalized Fefferman defining function `r − 𝒓^{n+4} Δ̃𝒪 /(n+4)²`.
pub fn strict_normalize(sol: &FeffermanSolution, st: &AmbientState) -> Result<FeffermanSolution, AmbientError> {
    let n = sol.n;
    let lo = st.laplacian(&st.obstruction_density()?);
    let corr = st.mul_r(&lo, n + 4).slice().scale_re(1.0 / ((n + 4) * (n + 4)) as f64);
    let rhat = &sol.r - &corr;
    let e = jmap(&rhat, n)?.add_const(cr(-1.0));
    let o = e.divide_by_defining(&rhat, n + 2)?;
    if o.prec() < 2 {
        return Err(AmbientError::Truncation(format!("normalized obstruction known to order {}", o.prec())));
    }
    let mut out = sol.clone();
    out.r = rhat;
    out.obstruction = o;
    out.multiplier = out.r.divide_by_defining(&sol.rho, 1)?;
    Ok(out)
}

/// Random real weight-w density: a few monomials of degree ≤ deg in (z, z̄) on the slice.
pub fn random_density(st: &AmbientState, rng: &mut impl Rng, w: i32, deg: usize) -> DensityJet {
    let m = st.m();
    let terms: Vec<_> = (0..8)
        .map(|_| {
            let a: Vec<u8> = (0..m).map(|_| rng.gen_range(0..=deg as u8 / 2)).collect();
            let b: Vec<u8> = (0..m).map(|_| rng.gen_range(0..=deg as u8 / 2)).collect();
            (a, b, 0, C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        })
        .collect();
    DensityJet::density(w, Jet::from_terms(st.r.vars(), st.r.trunc(), &terms).re())
}

/// Residuals of the structural identities of the ambient metric at the anchor.
#[derive(Clone, Debug, Serialize)]
pub struct AmbientIdentities {
    /// ∇̃_{AB}𝒓
    pub hessian_potential: f64,
    /// 𝒓^A − X^A
    pub raised_potential: f64,
    /// Δ̃𝒓 − (n+2)
    pub laplacian_potential: f64,
    pub positive_eigenvalues: usize,
    pub negative_eigenvalues: usize,
    /// X^A ∂_A f − w f on random densities
    pub euler: f64,
    /// Δ̃(𝒓^l f) − l(n+l+2w+1)𝒓^{l−1}f − 𝒓^l Δ̃f, relative
    pub commutator: f64,
    /// Ric + ∂∂̄(𝒓^{n+2}𝒪) through degree 2n+1
    pub ricci_potential: f64,
    /// remainder of Ric on division by 𝒓^n
    pub ricci_order: f64,
    /// det g̃ against 𝒥[r]
    pub determinant: f64,
    /// (det g̃ − 1)/𝒓^{n+2} − 𝒪 at the anchor
    pub determinant_obstruction: f64,
}

impl AmbientIdentities {
    pub fn lorentz(&self, n: usize) -> bool {
        self.positive_eigenvalues == 1 && self.negative_eigenvalues == n + 1
    }

    pub fn worst(&self) -> f64 {
        [
            self.hessian_potential,
            self.raised_potential,
            self.laplacian_potential,
            self.euler,
            self.commutator,
            self.ricci_potential,
            self.ricci_order,
            self.determinant,
            self.determinant_obstruction,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn ambient_identities(st: &AmbientState, seed: u64) -> Result<AmbientIdentities, AmbientError> {
    let n = st.n;
    let m = st.m();
    let pot = st.potential();
    let mut hessian: f64 = 0.0;
    for row in st.cov_hessian_hol(&pot) {
        for h in row {
            hessian = hessian.max(h.max_abs());
        }
    }
    let rb: Vec<DensityJet> = (0..=m).map(|b| st.db(&pot, b)).collect();
    let mut raised: f64 = 0.0;
    for a in 0..=m {
        let ra = AmbientState::sum((0..=m).map(|b| rb[b].mul_jet(&st.ginv[a][b])));
        let d = ra.sub(&st.coord(a));
        raised = raised.max(d.max_abs_upto(d.min_prec()));
    }
    let lap = st.laplacian(&pot).slice().add_const(cr(-((n + 2) as f64))).max_abs();

    let c0 = DMatrix::from_fn(m + 1, m + 1, |a, b| st.g[a][b].value(0));
    let ev = c0.symmetric_eigenvalues();
    let pos = ev.iter().filter(|&&x| x > 0.0).count();
    let neg = ev.iter().filter(|&&x| x < 0.0).count();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut euler, mut comm): (f64, f64) = (0.0, 0.0);
    for w in -2..=2 {
        let f = random_density(st, &mut rng, w, 4);
        let e = AmbientState::sum((0..=m).map(|a| st.coord(a).mul(&st.d(&f, a))));
        let d = e.sub(&f.scale_re(w as f64));
        euler = euler.max(d.max_abs_upto(d.min_prec()));
        for l in 1..=3usize {
            let lhs = st.laplacian(&st.mul_r(&f, l));
            let k = (l as i32 * (n as i32 + l as i32 + 2 * w + 1)) as f64;
            let rhs = st.mul_r(&f, l - 1).scale_re(k).add(&st.mul_r(&st.laplacian(&f), l));
            let d = lhs.sub(&rhs);
            let p = d.min_prec();
            comm = comm.max(d.max_abs_upto(p) / rhs.max_abs_upto(p).max(1.0));
        }
    }

    let o = st.obstruction_density()?;
    let ro = st.mul_r(&o, n + 2);
    let ric = st.ricci()?;
    let (mut rp, mut ro_res): (f64, f64) = (0.0, 0.0);
    for a in 0..=m {
        for b in 0..=m {
            // log(1 + 𝒪𝒓^{n+2}) − 𝒪𝒓^{n+2} = O(𝒓^{2n+4}), seen from degree 2n+2 after ∂∂̄
            let t = ric[a][b].add(&st.d(&st.db(&ro, b), a));
            rp = rp.max(t.max_abs_upto(t.min_prec().min(2 * n as i32 + 1)));
            for v in ric[a][b].logs.values() {
                let res = match v.divide_by_defining_res(&st.r, n) {
                    Ok((_, r)) => r,
                    Err(JetError::Divisibility { residual, .. }) => residual,
                    Err(e) => return Err(e.into()),
                };
                ro_res = ro_res.max(res);
            }
        }
    }
    let det = st.det_metric()?;
    let j = jmap(&st.r, n)?;
    let dd = (&det - &j).max_abs_upto(det.prec());
    let q = det.add_const(cr(-1.0)).divide_by_defining(&st.r, n + 2)?;
    let dobs = (q.value(0) - o.value()).norm();
    Ok(AmbientIdentities {
        hessian_potential: hessian,
        raised_potential: raised,
        laplacian_potential: lap,
        positive_eigenvalues: pos,
        negative_eigenvalues: neg,
        euler,
        commutator: comm,
        ricci_potential: rp,
        ricci_order: ro_res,
        determinant: dd,
        determinant_obstruction: dobs,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GjmsCheck {
    pub k: i32,
    pub direct: f64,
    pub extension: f64,
    /// |direct − c_{n,k}ψ| / max(|direct|, 1)
    pub routes: f64,
    /// change of the direct value when f is altered off the null cone
    pub extension_change: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GjmsSuite {
    pub gjms: Vec<GjmsCheck>,
    /// P_{n+3}𝒓, the decomposition gap and extension change (n = 1; n = 2 exhausts the truncation)
    pub p_potential: Option<f64>,
    pub p_decomposition: Option<f64>,
    pub p_extension_change: Option<f64>,
    pub laplacian_obstruction_before: f64,
    pub laplacian_obstruction_after: f64,
    pub strict_obstruction_change: f64,
}

impl GjmsSuite {
    pub fn worst_gjms(&self) -> f64 {
        self.gjms.iter().map(|g| g.routes.max(g.extension_change)).fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// GJMS two-route and extension checks for the weights in `ks`, the P_{n+3}
/// decomposition and strict normalization.  Needs a solution truncated at 12 or more.
pub fn gjms_suite(sol: &FeffermanSolution, ks: &[i32], seed: u64) -> Result<GjmsSuite, AmbientError> {
    let st = AmbientState::build(sol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gjms = vec![];
    for &k in ks {
        let f = random_density(&st, &mut rng, k, 4);
        let (a, b) = st.gjms(&f)?;
        let g = random_density(&st, &mut rng, k - 1, 4);
        let (a2, _) = st.gjms(&f.add(&st.mul_r(&g, 1)))?;
        gjms.push(GjmsCheck { k, direct: a.re, extension: b.re, routes: (a - b).norm() / a.norm().max(1.0), extension_change: (a - a2).norm() / a.norm().max(1.0) });
    }
    let (mut p_potential, mut p_decomposition, mut p_extension_change) = (None, None, None);
    if sol.n == 1 {
        p_potential = Some(st.p_n3(&st.potential())?.abs());
        let f = random_density(&st, &mut rng, 1, 4);
        let (l, r) = st.p_n3_decomposition(&f)?;
        p_decomposition = Some((l - r).norm() / l.norm().max(1.0));
        let g = random_density(&st, &mut rng, 0, 4);
        p_extension_change = Some(rel(st.p_n3(&f)?, st.p_n3(&f.add(&st.mul_r(&g, 1)))?));
    }
    let before = st.laplacian(&st.obstruction_density()?).value().norm();
    let hat = strict_normalize(sol, &st)?;
    let st2 = AmbientState::build(&hat)?;
    let after = st2.laplacian(&st2.obstruction_density()?).value().norm();
    Ok(GjmsSuite {
        gjms,
        p_potential,
        p_decomposition,
        p_extension_change,
        laplacian_obstruction_before: before,
        laplacian_obstruction_after: after,
        strict_obstruction_change: (hat.obstruction_value() - sol.obstruction_value()).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monge_ampere::{fefferman_solve, DomainSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn perturbed1() -> DomainSpec {
        DomainSpec::ball(1).add_real(&[2, 0], &[0, 1], 0, c(-0.05, 0.0))
    }

    fn anchor1() -> Vec<C64> {
        vec![c(1.0, 0.0), c(0.0, 0.0)]
    }

    #[test]
    fn ball_metric_is_flat_lorentz() {
        let spec = DomainSpec::ball(1);
        let sol = fefferman_solve(&spec, &anchor1(), 10).unwrap();
        let st = AmbientState::build(&sol).unwrap();
        let want = [1.0, -1.0, -1.0];
        for a in 0..3 {
            for b in 0..3 {
                let w = if a == b { want[a] } else { 0.0 };
                assert!((st.g[a][b].add_const(c(-w, 0.0))).max_abs() < 1e-13, "{a}{b}");
            }
        }
    }

    #[test]
    fn identity_suite_perturbed() {
        let sol = fefferman_solve(&perturbed1(), &anchor1(), 10).unwrap();
        let st = AmbientState::build(&sol).unwrap();
        let id = ambient_identities(&st, 1).unwrap();
        assert!(id.lorentz(1));
        assert!(id.hessian_potential < 1e-11 && id.raised_potential < 1e-11 && id.laplacian_potential < 1e-11, "{id:?}");
        assert!(id.euler < 1e-11 && id.commutator < 1e-9, "{id:?}");
        assert!(id.ricci_potential < 1e-9 && id.ricci_order < 1e-8 && id.determinant < 1e-10, "{id:?}");
        assert!(id.determinant_obstruction < 1e-8, "{id:?}");
    }

    #[test]
    fn interior_laplacian_bridge() {
        // Δ_{g+} u = −𝒓 Δ̃ u at an interior point, g+ = −∂∂̄ log r
        let spec = perturbed1();
        let p = [c(0.3, 0.1), c(-0.2, 0.2)];
        let r = spec.rho_at(&p, 8, 0);
        let st = AmbientState::from_potential(&r, 1, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_density(&st, &mut rng, 0, 4);
        let lhs = {
            let m = 2;
            let h = DMatrix::from_fn(m, m, |j, k| {
                let rj = r.d(j).value(0);
                let rk = r.db(k).value(0);
                let r0 = r.value(0);
                -(r.d(j).db(k).value(0) / r0 - rj * rk / (r0 * r0))
            });
            let hi = h.try_inverse().unwrap();
            let mut s = c(0.0, 0.0);
            for j in 0..m {
                for k in 0..m {
                    // g+^{j k̄} = (h^{-1})_{k j}
                    s += hi[(k, j)] * u.slice().d(j).db(k).value(0);
                }
            }
            s
        };
        let rhs = -st.laplacian(&u).value() * r.value(0);
        assert!((lhs - rhs).norm() < 1e-9 * lhs.norm().max(1.0));
    }

    #[test]
    fn harmonic_extension_orders() {
        let sol = fefferman_solve(&perturbed1(), &anchor1(), 12).unwrap();
        let st = AmbientState::build(&sol).unwrap();
        // f = 1: F = 1 and Δ̃F = 0
        let one = DensityJet::density(0, st.one());
        let f = st.harmonic_extend(&one, 1).unwrap();
        assert!(st.laplacian(&f).max_abs() < 1e-12);
        // holomorphic weight 0: already harmonic
        let v = st.r.vars();
        let hol = DensityJet::density(0, Jet::from_terms(v, 12, &[(vec![2, 1], vec![0, 0], 0, c(0.4, 0.3))]));
        assert!(st.laplacian(&hol).max_abs() < 1e-12);
        // random k = 1: Δ̃F ∈ (𝒓^3)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_density(&st, &mut rng, 1, 4);
        let big = st.harmonic_extend(&f, 3).unwrap();
        st.div_r(&st.laplacian(&big), 3).unwrap();
        assert!(matches!(st.harmonic_extend(&f, 4), Err(AmbientError::ObstructionOrder(..))));
    }

    #[test]
    fn qprime_ball_value() {
        // ball, n = 1: Q′ is the constant with ∫ Q′ = 8π² over a total mass (2π)²
        let sol = fefferman_solve(&DomainSpec::ball(1), &anchor1(), 10).unwrap();
        let st = AmbientState::build(&sol).unwrap();
        let q = st.qprime_pointwise(None).unwrap();
        assert!((q - 2.0).abs() < 1e-10, "{q}");
    }

    #[test]
    fn gjms_and_strict_suite() {
        let sol = fefferman_solve(&perturbed1(), &anchor1(), 12).unwrap();
        let s = gjms_suite(&sol, &[0, 1], 3).unwrap();
        assert!(s.worst_gjms() < 1e-8, "{s:?}");
        assert!(s.p_potential.unwrap() < 1e-10 && s.p_decomposition.unwrap() < 1e-7 && s.p_extension_change.unwrap() < 1e-7, "{s:?}");
        assert!(s.laplacian_obstruction_after < 1e-7 && s.strict_obstruction_change < 1e-9, "{s:?}");
    }

    #[test]
    fn bgg_extension_of_translation() {
        let sol = fefferman_solve(&DomainSpec::ball(1), &anchor1(), 12).unwrap();
        let st = AmbientState::build(&sol).unwrap();
        let v = st.r.vars();
        // ṙ of the translated ball 1 − |z − t v|², v = (0.3, 0.4i)
        let vv = [c(0.3, 0.0), c(0.0, 0.4)];
        let lin = Jet::from_poly_at(v, 12, &[(vec![1, 0], vec![0, 0], 0, vv[0].conj()), (vec![0, 1], vec![0, 0], 0, vv[1].conj())], &st.anchor);
        let f = DensityJet::density(1, lin.re().scale_re(2.0));
        let (_, res) = st.extend_bgg(&f, 4, 1e-7).unwrap();
        assert!(res < 1e-7);
        assert!(st.p_n3(&f).unwrap().abs() < 1e-9);
        let bump = DensityJet::density(1, Jet::from_poly_at(v, 12, &[(vec![2, 0], vec![0, 0], 0, c(1.0, 0.0))], &st.anchor).re());
        assert!(matches!(st.extend_bgg(&bump, 4, 1e-7), Err(AmbientError::NotInKernel(_))));
    }

    #[test]
    fn qprime_ball_n2() {
        let sol = fefferman_solve(&DomainSpec::ball(2), &[c(0.6, 0.0), c(0.0, 0.8), c(0.0, 0.0)], 12).unwrap();
        let st = AmbientState::build(&sol).unwrap();
        let q = st.qprime_pointwise(None).unwrap();
        assert!((q - 8.0).abs() < 1e-9, "{q}");
    }
}
