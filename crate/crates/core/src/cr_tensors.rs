//! Pseudo-hermitian calculus at a boundary point.
//!
//! Everything is carried as jets centered at the anchor: the defining function,
//! the Graham–Lee frame `Z_α, ξ`, the transverse curvature κ and the connection
//! coefficients in all directions `Z_γ, Z̄_γ, N, T`. Frames are ℓ-orthonormal, so
//! raising an index is just swapping barred and unbarred.

use crate::jets::{Jet, JetError};
use crate::monge_ampere::{inverse_jets, FeffermanSolution};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error("degenerate Levi form at the anchor")]
    DegenerateLevi,
    #[error("structure equation residual {0:.3e}")]
    Structure(f64),
    #[error("truncation exhausted: {0}")]
    Truncation(&'static str),
    #[error("unsupported dimension n = {0}")]
    Dimension(usize),
    #[error("routes disagree: {0:.3e} vs {1:.3e}")]
    Routes(f64, f64),
    #[error("ambient: {0}")]
    Ambient(String),
}

fn c(x: f64) -> C64 {
    C64::new(x, 0.0)
}

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Complex vector field `Σ a^j ∂_j + b^j ∂_j̄`; a missing half is zero.
#[derive(Clone, Debug)]
pub struct VField {
    pub a: Option<Vec<Jet>>,
    pub b: Option<Vec<Jet>>,
}

fn add_opt(x: Option<Jet>, y: Jet) -> Option<Jet> {
    Some(match x {
        Some(x) => &x + &y,
        None => y,
    })
}

impl VField {
    pub fn hol(a: Vec<Jet>) -> VField {
        VField { a: Some(a), b: None }
    }

    pub fn conj(&self) -> VField {
        let cj = |v: &Option<Vec<Jet>>| v.as_ref().map(|v| v.iter().map(Jet::conj).collect());
        VField { a: cj(&self.b), b: cj(&self.a) }
    }

    pub fn apply(&self, f: &Jet) -> Jet {
        let mut out: Option<Jet> = None;
        if let Some(a) = &self.a {
            for (j, x) in a.iter().enumerate() {
                out = add_opt(out, x * &f.d(j));
            }
        }
        if let Some(b) = &self.b {
            for (j, x) in b.iter().enumerate() {
                out = add_opt(out, x * &f.db(j));
            }
        }
        out.unwrap_or_else(|| Jet::zero(f.vars(), f.trunc()))
    }

    fn lin(&self, s: C64, o: &VField, t: C64) -> VField {
        let comb = |x: &Option<Vec<Jet>>, y: &Option<Vec<Jet>>| match (x, y) {
            (None, None) => None,
            (Some(x), None) => Some(x.iter().map(|u| u.scale(s)).collect()),
            (None, Some(y)) => Some(y.iter().map(|v| v.scale(t)).collect()),
            (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(u, v)| &u.scale(s) + &v.scale(t)).collect()),
        };
        VField { a: comb(&self.a, &o.a), b: comb(&self.b, &o.b) }
    }

    /// Lie bracket `[X, Y]`.
    pub fn bracket(&self, o: &VField) -> VField {
        let half = |x: &Option<Vec<Jet>>, y: &Option<Vec<Jet>>| -> Option<Vec<Jet>> {
            let k = x.as_ref().or(y.as_ref())?.len();
            Some(
                (0..k)
                    .map(|j| {
                        let mut v = match y {
                            Some(y) => self.apply(&y[j]),
                            None => Jet::zero(x.as_ref().unwrap()[0].vars(), x.as_ref().unwrap()[0].trunc()),
                        };
                        if let Some(x) = x {
                            v = &v - &o.apply(&x[j]);
                        }
                        v
                    })
                    .collect(),
            )
        };
        VField { a: half(&self.a, &o.a), b: half(&self.b, &o.b) }
    }
}

/// Graham–Lee adapted frame of a defining function at a boundary point.
#[derive(Clone, Debug)]
pub struct AdaptedFrame {
    pub n: usize,
    pub p: Vec<C64>,
    pub rho: Jet,
    /// ℓ-orthonormal basis of ker ∂ρ (coefficients on ∂_j).
    pub z_alpha: Vec<Vec<Jet>>,
    pub xi: Vec<Jet>,
    pub kappa_jet: Jet,
    pub n_field: VField,
    pub t_field: VField,
    /// ℓ_{αβ̄} at p.
    pub levi: DMatrix<C64>,
    /// `H_{jk̄} = -ρ_{jk̄}`, so that `dϑ = i H_{jk̄} dz^j ∧ dz̄^k`.
    h: Vec<Vec<Jet>>,
    rho_d: Vec<Jet>,
    /// `ξ ⌟ dϑ - iκ∂̄ρ` and `ξρ - 1` at p.
    pub xi_residual: f64,
}

impl AdaptedFrame {
    pub fn m(&self) -> usize {
        self.n + 1
    }

    pub fn z(&self, a: usize) -> VField {
        VField::hol(self.z_alpha[a].clone())
    }

    pub fn zb(&self, a: usize) -> VField {
        self.z(a).conj()
    }

    pub fn xi_field(&self) -> VField {
        VField::hol(self.xi.clone())
    }

    fn hform(&self, u: &[Jet], v: &[Jet]) -> Jet {
        hpair(&self.h, u, v)
    }

    /// θ^α(V) for α = 0..n.
    pub fn theta(&self, v: &VField) -> Vec<Jet> {
        let vars = self.rho.vars();
        let tr = self.rho.trunc();
        match &v.a {
            None => vec![Jet::zero(vars, tr); self.n],
            Some(a) => self.z_alpha.iter().map(|z| self.hform(a, z)).collect(),
        }
    }

    /// θ^ᾱ(V) = conj(θ^α(V̄)).
    pub fn theta_bar(&self, v: &VField) -> Vec<Jet> {
        self.theta(&v.conj()).iter().map(Jet::conj).collect()
    }

    /// ∂ρ(V).
    pub fn drho(&self, v: &VField) -> Jet {
        match &v.a {
            None => Jet::zero(self.rho.vars(), self.rho.trunc()),
            Some(a) => a.iter().zip(&self.rho_d).map(|(x, r)| x * r).reduce(|x, y| &x + &y).unwrap(),
        }
    }

    /// ∂̄ρ(V).
    pub fn dbrho(&self, v: &VField) -> Jet {
        self.drho(&v.conj()).conj()
    }
}

fn hpair(h: &[Vec<Jet>], u: &[Jet], v: &[Jet]) -> Jet {
    let mut s: Option<Jet> = None;
    for (j, uj) in u.iter().enumerate() {
        for (k, vk) in v.iter().enumerate() {
            s = add_opt(s, &(&h[j][k] * uj) * &vk.conj());
        }
    }
    s.unwrap()
}

/// Adapted frame of `rho` at its center `p`. `seed` (n × m, constant) picks the
/// starting vectors for Gram–Schmidt; the default is coordinate order skipping
/// the largest gradient component.
pub fn build_frame_from(rho: &Jet, n: usize, p: &[C64], seed: Option<&[Vec<C64>]>) -> Result<AdaptedFrame, CrError> {
    let m = n + 1;
    let vars = rho.vars();
    let tr = rho.trunc();
    let rho_d: Vec<Jet> = (0..m).map(|j| rho.d(j)).collect();
    let h: Vec<Vec<Jet>> = (0..m).map(|j| (0..m).map(|k| -rho_d[j].db(k)).collect()).collect();
    // rows k: Σ_j H_{jk̄} ξ^j - κ ρ_k̄ = 0; last row: Σ_j ρ_j ξ^j = 1
    let mut mat: Vec<Vec<Jet>> = (0..m)
        .map(|k| {
            let mut row: Vec<Jet> = (0..m).map(|j| h[j][k].clone()).collect();
            row.push(-rho_d[k].conj());
            row
        })
        .collect();
    let mut last: Vec<Jet> = rho_d.clone();
    last.push(Jet::zero(vars, tr));
    mat.push(last);
    let inv = inverse_jets(&mat).map_err(|_| CrError::DegenerateLevi)?;
    let xi: Vec<Jet> = (0..m).map(|j| inv[j][m].clone()).collect();
    let kappa = inv[m][m].re();
    let xi_residual = {
        let mut r = (xi.iter().zip(&rho_d).map(|(x, y)| x * y).reduce(|a, b| &a + &b).unwrap().value(0) - c(1.0)).norm();
        for k in 0..m {
            let mut s = -(&kappa * &rho_d[k].conj());
            for j in 0..m {
                s = &s + &(&h[j][k] * &xi[j]);
            }
            r = r.max(s.value(0).norm());
        }
        r
    };
    let g0: Vec<C64> = rho_d.iter().map(|x| x.value(0)).collect();
    let big = (0..m).max_by(|&a, &b| g0[a].norm().partial_cmp(&g0[b].norm()).unwrap()).unwrap();
    let default_seed: Vec<Vec<C64>> = (0..m)
        .filter(|&a| a != big)
        .map(|a| (0..m).map(|j| c(if j == a { 1.0 } else { 0.0 })).collect())
        .collect();
    let seed = seed.map(|s| s.to_vec()).unwrap_or(default_seed);
    // u = Σ_j s_j (e_j - ρ_j ξ) lies in ker ∂ρ
    let mut basis: Vec<Vec<Jet>> = Vec::new();
    for s in &seed {
        let sr = s.iter().zip(&rho_d).map(|(x, r)| r.scale(*x)).reduce(|a, b| &a + &b).unwrap();
        let mut u: Vec<Jet> = (0..m).map(|j| &Jet::constant(vars, tr, s[j]) - &(&sr * &xi[j])).collect();
        for v in &basis {
            let pr = hpair(&h, &u, v);
            u = u.iter().zip(v).map(|(x, y)| x - &(&pr * y)).collect();
        }
        let nn = hpair(&h, &u, &u).re();
        if !(nn.value(0).re > 1e-12) {
            return Err(CrError::DegenerateLevi);
        }
        let inv_sqrt = nn.power_frac(-1, 2)?;
        basis.push(u.iter().map(|x| x * &inv_sqrt).collect());
    }
    let levi = DMatrix::from_fn(n, n, |a, b| hpair(&h, &basis[a], &basis[b]).value(0));
    let xf = VField::hol(xi.clone());
    let xb = xf.conj();
    let n_field = xf.lin(c(0.5), &xb, c(0.5));
    let t_field = xf.lin(-I, &xb, I);
    Ok(AdaptedFrame {
        n,
        p: p.to_vec(),
        rho: rho.clone(),
        z_alpha: basis,
        xi,
        kappa_jet: kappa,
        n_field,
        t_field,
        levi,
        h,
        rho_d,
        xi_residual,
    })
}

/// Derivative budget that every quantity of [`tw_invariants`] fits into.
pub const FRAME_ORDER: usize = 7;

/// Frame of the Fefferman defining function at the solution's anchor.
pub fn build_frame(sol: &FeffermanSolution) -> Result<AdaptedFrame, CrError> {
    let r = sol.r.retrunc((sol.r.prec().max(0) as usize).min(FRAME_ORDER));
    build_frame_from(&r, sol.n, &sol.anchor, None)
}

/// Direction of differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dir {
    Z(usize),
    Zb(usize),
    N,
    T,
}

/// Index type of a tensor slot (all lower).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ix {
    Hol,
    Anti,
}

type Mat = Vec<Vec<Jet>>;

/// Tensor with lower frame indices, components flattened with the first index
/// most significant.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub n: usize,
    pub kinds: Vec<Ix>,
    pub comps: Vec<Jet>,
}

impl Tensor {
    pub fn scalar(n: usize, f: Jet) -> Tensor {
        Tensor { n, kinds: vec![], comps: vec![f] }
    }

    pub fn rank(&self) -> usize {
        self.kinds.len()
    }

    pub fn idx(&self, ix: &[usize]) -> usize {
        ix.iter().fold(0, |s, &i| s * self.n + i)
    }

    pub fn get(&self, ix: &[usize]) -> &Jet {
        &self.comps[self.idx(ix)]
    }

    pub fn at(&self, ix: &[usize]) -> C64 {
        self.get(ix).value(0)
    }

    fn multi(&self, mut k: usize) -> Vec<usize> {
        let mut v = vec![0; self.rank()];
        for s in (0..self.rank()).rev() {
            v[s] = k % self.n;
            k /= self.n;
        }
        v
    }

    /// All index tuples.
    pub fn indices(&self) -> Vec<Vec<usize>> {
        (0..self.comps.len()).map(|k| self.multi(k)).collect()
    }

    /// Squared norm `Σ |t_I|²` at p (orthonormal frame).
    pub fn norm_sq(&self) -> f64 {
        self.comps.iter().map(|x| x.value(0).norm_sqr()).sum()
    }

    pub fn values(&self) -> Vec<C64> {
        self.comps.iter().map(|x| x.value(0)).collect()
    }
}

/// Tanaka–Webster data at p, with the Graham–Lee extension in the N direction.
#[derive(Clone, Debug)]
pub struct TWState {
    pub frame: AdaptedFrame,
    /// ω_α^β(X) for X = Z_γ, Z̄_γ, N, T, as `[α][β]`.
    pub omega_z: Vec<Mat>,
    pub omega_zb: Vec<Mat>,
    pub omega_n: Mat,
    pub omega_t: Mat,
    /// A_{αβ}.
    pub torsion: Tensor,
    /// R_{αβ̄ρσ̄}.
    pub curvature: Tensor,
    pub ricci: Tensor,
    pub scal: Jet,
    /// A_{αβ,γ}, A_{αβ,γ̄}, A_{αβ,T}, A_{αβ,N}.
    pub da_h: Tensor,
    pub da_a: Tensor,
    pub da_t: Tensor,
    pub da_n: Tensor,
    /// A_{αβ,γ̄δ}.
    pub dda_ah: Tensor,
    /// Scal_α, Scal_ᾱ and Δ_b Scal.
    pub dscal_h: Tensor,
    pub dscal_a: Tensor,
    pub lap_scal: Jet,
    /// Chern tensor S_{αβ̄γδ̄} and (div S)_{αβ̄γ} = S_{αβ̄γδ̄,δ}.
    pub chern: Tensor,
    pub div_s: Tensor,
    /// κ^{(0)}, κ^{(1)}, κ^{(2)}.
    pub kappa_jets: [f64; 3],
    /// Largest violation of the structure equations at p.
    pub structure_residual: f64,
}

fn mat_conj(m: &Mat) -> Mat {
    m.iter().map(|r| r.iter().map(Jet::conj).collect()).collect()
}

impl TWState {
    pub fn n(&self) -> usize {
        self.frame.n
    }

    pub fn field(&self, d: Dir) -> VField {
        match d {
            Dir::Z(g) => self.frame.z(g),
            Dir::Zb(g) => self.frame.zb(g),
            Dir::N => self.frame.n_field.clone(),
            Dir::T => self.frame.t_field.clone(),
        }
    }

    /// ω_α^β(X) for a frame direction, `[α][β]`.
    pub fn omega(&self, d: Dir) -> &Mat {
        match d {
            Dir::Z(g) => &self.omega_z[g],
            Dir::Zb(g) => &self.omega_zb[g],
            Dir::N => &self.omega_n,
            Dir::T => &self.omega_t,
        }
    }

    /// ω_ᾱ^β̄(X) = conj(ω_α^β(X̄)).
    fn omega_anti(&self, d: Dir) -> Mat {
        let cd = match d {
            Dir::Z(g) => Dir::Zb(g),
            Dir::Zb(g) => Dir::Z(g),
            x => x,
        };
        mat_conj(self.omega(cd))
    }

    /// ω(V) for an arbitrary vector field, through the coframe.
    pub fn omega_of(&self, v: &VField) -> Mat {
        let f = &self.frame;
        let n = f.n;
        let th = f.theta(v);
        let thb = f.theta_bar(v);
        let a = f.drho(v);
        let b = f.dbrho(v);
        // ξ = N + (i/2)T, ξ̄ = N - (i/2)T
        let cn = &a + &b;
        let ct = (&a - &b).scale(I * 0.5);
        (0..n)
            .map(|al| {
                (0..n)
                    .map(|be| {
                        let mut s = &(&cn * &self.omega_n[al][be]) + &(&ct * &self.omega_t[al][be]);
                        for g in 0..n {
                            s = &s + &(&th[g] * &self.omega_z[g][al][be]);
                            s = &s + &(&thb[g] * &self.omega_zb[g][al][be]);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    /// ∇_X t for a frame direction (same rank).
    pub fn cov_dir(&self, t: &Tensor, d: Dir) -> Tensor {
        let v = self.field(d);
        let oh = self.omega(d).clone();
        let oa = if t.kinds.contains(&Ix::Anti) { self.omega_anti(d) } else { vec![] };
        let comps = t
            .indices()
            .iter()
            .map(|ix| {
                let mut s = v.apply(t.get(ix));
                for (slot, kind) in t.kinds.iter().enumerate() {
                    let o = if *kind == Ix::Hol { &oh } else { &oa };
                    let mut jx = ix.clone();
                    for cc in 0..t.n {
                        jx[slot] = cc;
                        s = &s - &(&o[ix[slot]][cc] * t.get(&jx));
                    }
                }
                s
            })
            .collect();
        Tensor { n: t.n, kinds: t.kinds.clone(), comps }
    }

    /// ∇t with the new index appended (Z_γ for Hol, Z̄_γ for Anti).
    pub fn cov(&self, t: &Tensor, kind: Ix) -> Tensor {
        let n = t.n;
        let parts: Vec<Tensor> =
            (0..n).map(|g| self.cov_dir(t, if kind == Ix::Hol { Dir::Z(g) } else { Dir::Zb(g) })).collect();
        let mut kinds = t.kinds.clone();
        kinds.push(kind);
        let mut comps = Vec::with_capacity(t.comps.len() * n);
        for k in 0..t.comps.len() {
            for p in &parts {
                comps.push(p.comps[k].clone());
            }
        }
        Tensor { n, kinds, comps }
    }

    /// Δ_b f = Σ (f_{γγ̄} + f_{γ̄γ}).
    pub fn sublaplacian(&self, f: &Jet) -> Jet {
        let n = self.n();
        let t = Tensor::scalar(n, f.clone());
        let fh = self.cov(&t, Ix::Hol);
        let fa = self.cov(&t, Ix::Anti);
        let fha = self.cov(&fh, Ix::Anti);
        let fah = self.cov(&fa, Ix::Hol);
        (0..n).map(|g| fha.get(&[g, g]) + fah.get(&[g, g])).reduce(|a, b| &a + &b).unwrap()
    }

    pub fn a_norm_sq(&self) -> f64 {
        self.torsion.norm_sq()
    }

    /// |∇A|² = Σ |A_{αβ,γ̄}|².
    pub fn grad_a_norm_sq(&self) -> f64 {
        self.da_a.norm_sq()
    }

    /// R_{αβ̄γδ̄} A^{αγ} A^{β̄δ̄} at p.
    pub fn raa(&self) -> f64 {
        let n = self.n();
        let a = self.torsion.values();
        let mut s = C64::default();
        for al in 0..n {
            for be in 0..n {
                for ga in 0..n {
                    for de in 0..n {
                        s += self.curvature.at(&[al, be, ga, de]) * a[al * n + ga].conj() * a[be * n + de];
                    }
                }
            }
        }
        s.re
    }

    pub fn scal_value(&self) -> f64 {
        self.scal.value(0).re
    }

    /// |∂_b Scal|² = Σ |Scal_α|².
    pub fn dscal_norm_sq(&self) -> f64 {
        self.dscal_h.norm_sq()
    }
}

fn tensor_from(n: usize, kinds: Vec<Ix>, f: impl Fn(&[usize]) -> Jet) -> Tensor {
    let mut t = Tensor { n, kinds, comps: vec![] };
    let total = n.pow(t.rank() as u32);
    t.comps = (0..total).map(|k| f(&t.multi(k))).collect();
    t
}

/// Tanaka–Webster connection, torsion, curvature and derived tensors.
pub fn tw_invariants(frame: &AdaptedFrame) -> Result<TWState, CrError> {
    let n = frame.n;
    let vars = frame.rho.vars();
    let tr = frame.rho.trunc();
    let zs: Vec<VField> = (0..n).map(|a| frame.z(a)).collect();
    let zbs: Vec<VField> = zs.iter().map(VField::conj).collect();
    let nf = &frame.n_field;
    let tf = &frame.t_field;
    let kappa = &frame.kappa_jet;
    // ω(X)[α][β] = θ^β([X, Z_α]) for X = Z̄_γ, T; minus κ/2 δ for X = N
    let from_bracket = |x: &VField| -> Mat { zs.iter().map(|za| frame.theta(&x.bracket(za))).collect() };
    let omega_zb: Vec<Mat> = zbs.iter().map(&from_bracket).collect();
    let omega_t = from_bracket(tf);
    let mut omega_n = from_bracket(nf);
    for (a, row) in omega_n.iter_mut().enumerate() {
        row[a] = &row[a] - &kappa.scale_re(0.5);
    }
    // metric compatibility in an orthonormal frame: ω skew-hermitian
    let omega_z: Vec<Mat> =
        (0..n).map(|g| (0..n).map(|a| (0..n).map(|b| -omega_zb[g][b][a].conj()).collect()).collect()).collect();
    // A_{βα} = -θ^ᾱ([T, Z_β])
    let tb: Vec<Vec<Jet>> = zs.iter().map(|zb_| frame.theta_bar(&tf.bracket(zb_))).collect();
    let torsion = tensor_from(n, vec![Ix::Hol, Ix::Hol], |ix| -&tb[ix[0]][ix[1]]);

    let mut st = TWState {
        frame: frame.clone(),
        omega_z,
        omega_zb,
        omega_n,
        omega_t,
        torsion: torsion.clone(),
        curvature: Tensor::scalar(n, Jet::zero(vars, tr)),
        ricci: Tensor::scalar(n, Jet::zero(vars, tr)),
        scal: Jet::zero(vars, tr),
        da_h: torsion.clone(),
        da_a: torsion.clone(),
        da_t: torsion.clone(),
        da_n: torsion.clone(),
        dda_ah: torsion.clone(),
        dscal_h: torsion.clone(),
        dscal_a: torsion.clone(),
        lap_scal: Jet::zero(vars, tr),
        chern: torsion.clone(),
        div_s: torsion.clone(),
        kappa_jets: [0.0; 3],
        structure_residual: 0.0,
    };

    // curvature Ω_α^β(Z_ρ, Z̄_σ)
    let mut rr = vec![Jet::zero(vars, tr); n.pow(4)];
    for rho_ in 0..n {
        for sig in 0..n {
            let br = zs[rho_].bracket(&zbs[sig]);
            let ob = st.omega_of(&br);
            let (o1, o2) = (&st.omega_z[rho_], &st.omega_zb[sig]);
            for al in 0..n {
                for be in 0..n {
                    let mut s = &(&zs[rho_].apply(&o2[al][be]) - &zbs[sig].apply(&o1[al][be])) - &ob[al][be];
                    for g in 0..n {
                        s = &s - &(&(&o1[al][g] * &o2[g][be]) - &(&o2[al][g] * &o1[g][be]));
                    }
                    rr[((al * n + be) * n + rho_) * n + sig] = s;
                }
            }
        }
    }
    st.curvature = Tensor { n, kinds: vec![Ix::Hol, Ix::Anti, Ix::Hol, Ix::Anti], comps: rr };
    st.ricci = tensor_from(n, vec![Ix::Hol, Ix::Anti], |ix| {
        (0..n).map(|g| st.curvature.get(&[g, g, ix[0], ix[1]]).clone()).reduce(|a, b| &a + &b).unwrap()
    });
    st.scal = (0..n).map(|g| st.ricci.get(&[g, g]).clone()).reduce(|a, b| &a + &b).unwrap().re();

    st.da_h = st.cov(&torsion, Ix::Hol);
    st.da_a = st.cov(&torsion, Ix::Anti);
    st.da_t = st.cov_dir(&torsion, Dir::T);
    st.da_n = st.cov_dir(&torsion, Dir::N);
    st.dda_ah = st.cov(&st.da_a, Ix::Hol);
    let sc = Tensor::scalar(n, st.scal.clone());
    st.dscal_h = st.cov(&sc, Ix::Hol);
    st.dscal_a = st.cov(&sc, Ix::Anti);
    st.lap_scal = st.sublaplacian(&st.scal);

    // Chern tensor: totally trace-free part of R
    let nf_ = n as f64;
    let ric = &st.ricci;
    let scal = &st.scal;
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    st.chern = tensor_from(n, vec![Ix::Hol, Ix::Anti, Ix::Hol, Ix::Anti], |ix| {
        let (a, b, g, d) = (ix[0], ix[1], ix[2], ix[3]);
        let mut s = st.curvature.get(ix).clone();
        let tr4 = &(&(&ric.get(&[a, b]).scale_re(delta(g, d)) + &ric.get(&[g, b]).scale_re(delta(a, d)))
            + &ric.get(&[a, d]).scale_re(delta(g, b)))
            + &ric.get(&[g, d]).scale_re(delta(a, b));
        s = &s - &tr4.scale_re(1.0 / (nf_ + 2.0));
        let hh = delta(a, b) * delta(g, d) + delta(a, d) * delta(g, b);
        &s + &scal.scale_re(hh / ((nf_ + 1.0) * (nf_ + 2.0)))
    });
    let ds = st.cov(&st.chern, Ix::Hol);
    st.div_s = tensor_from(n, vec![Ix::Hol, Ix::Anti, Ix::Hol], |ix| {
        (0..n).map(|d| ds.get(&[ix[0], ix[1], ix[2], d, d]).clone()).reduce(|a, b| &a + &b).unwrap()
    });

    let k1 = nf.apply(kappa);
    let k2 = nf.apply(&k1);
    st.kappa_jets = [kappa.value(0).re, k1.value(0).re, k2.value(0).re];
    if st.kappa_jets.iter().any(|x| x.is_nan()) || st.lap_scal.value(0).re.is_nan() || st.div_s.values()[0].re.is_nan() {
        return Err(CrError::Truncation("frame jets too short for the requested derivatives"));
    }
    st.structure_residual = structure_residual(&st);
    Ok(st)
}

/// Largest violation at p of the Graham–Lee structure equations and the
/// algebraic symmetries of torsion and curvature.
pub fn structure_residual(st: &TWState) -> f64 {
    let f = &st.frame;
    let n = f.n;
    let zs: Vec<VField> = (0..n).map(|a| f.z(a)).collect();
    let zbs: Vec<VField> = zs.iter().map(VField::conj).collect();
    let mut r: f64 = f.xi_residual;
    let mut upd = |x: C64| r = r.max(x.norm());
    // ω skew-hermitian along the real fields N, T
    for d in [Dir::N, Dir::T] {
        let o = st.omega(d);
        for a in 0..n {
            for b in 0..n {
                upd(o[a][b].value(0) + o[b][a].value(0).conj());
            }
        }
    }
    for be in 0..n {
        // (N, Z̄_β): -θ^α([N, Z̄_β]) = (i/2) A^α_β̄
        let th = f.theta(&f.n_field.bracket(&zbs[be]));
        for al in 0..n {
            upd(-th[al].value(0) - I * 0.5 * st.torsion.at(&[al, be]).conj());
        }
        for ga in 0..n {
            // (Z_β, Z_γ): θ^α([Z_β, Z_γ]) + ω_β^α(Z_γ) - ω_γ^α(Z_β) = 0
            let th = f.theta(&zs[be].bracket(&zs[ga]));
            let thb = f.theta(&zbs[be].bracket(&zbs[ga]));
            for al in 0..n {
                upd(th[al].value(0) + st.omega_z[ga][be][al].value(0) - st.omega_z[be][ga][al].value(0));
                upd(thb[al].value(0));
            }
            upd(st.torsion.at(&[be, ga]) - st.torsion.at(&[ga, be]));
        }
    }
    // (N, T): θ^α([N, T]) = i Z̄_α κ
    let th = f.theta(&f.n_field.bracket(&f.t_field));
    for al in 0..n {
        upd(th[al].value(0) - I * zbs[al].apply(&f.kappa_jet).value(0));
    }
    // R_{αβ̄ρσ̄} = R_{ρβ̄ασ̄} and conj(R_{αβ̄ρσ̄}) = R_{βᾱσρ̄}
    for ix in st.curvature.indices() {
        let (a, b, p, s) = (ix[0], ix[1], ix[2], ix[3]);
        upd(st.curvature.at(&ix) - st.curvature.at(&[p, b, a, s]));
        upd(st.curvature.at(&ix).conj() - st.curvature.at(&[b, a, s, p]));
    }
    r
}

/// Norm of the pseudo-Einstein defect: tf Ric (n > 1) or Scal_1 - iA_{11,}{}^1 (n = 1).
pub fn pseudo_einstein_residual(tw: &TWState) -> f64 {
    let n = tw.n();
    if n == 1 {
        (tw.dscal_h.at(&[0]) - I * tw.da_a.at(&[0, 0, 0])).norm()
    } else {
        let s = tw.scal_value() / n as f64;
        let mut r: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let d = if a == b { s } else { 0.0 };
                r = r.max((tw.ricci.at(&[a, b]) - d).norm());
            }
        }
        r
    }
}

/// (κ^{(0)}, κ^{(1)}, κ^{(2)}) = N^k κ at p.
pub fn kappa_normal_jets(frame: &AdaptedFrame) -> Result<[f64; 3], CrError> {
    let k = &frame.kappa_jet;
    let k1 = frame.n_field.apply(k);
    let k2 = frame.n_field.apply(&k1);
    let out = [k.value(0).re, k1.value(0).re, k2.value(0).re];
    if out.iter().any(|x| x.is_nan()) {
        return Err(CrError::Truncation("κ normal jets"));
    }
    Ok(out)
}

/// Logarithmic rate `g` with `N s = g s` along the N-flow: the divergence of N
/// for the volume form `dr ∧ ϑ ∧ (dϑ)^n`.
pub fn s_rate(frame: &AdaptedFrame) -> Result<Jet, CrError> {
    let m = frame.m();
    let rho = &frame.rho;
    let mut rows: Vec<Vec<Jet>> = Vec::with_capacity(m + 1);
    let mut r0 = vec![Jet::zero(rho.vars(), rho.trunc())];
    r0.extend((0..m).map(|k| rho.db(k)));
    rows.push(r0);
    for j in 0..m {
        let mut row = vec![frame.rho_d[j].clone()];
        row.extend((0..m).map(|k| frame.rho_d[j].db(k)));
        rows.push(row);
    }
    let b0 = crate::monge_ampere::det_jets(rows)?;
    let div = frame.xi.iter().enumerate().map(|(j, x)| x.d(j)).reduce(|a, b| &a + &b).unwrap().re();
    let nlog = &frame.n_field.apply(&b0) * &b0.invert()?;
    Ok(&div + &nlog.re())
}

fn normal_series(frame: &AdaptedFrame, g: &Jet, j: usize) -> Vec<f64> {
    let mut p = Jet::one(g.vars(), g.trunc());
    let mut out = vec![1.0];
    for _ in 0..j {
        p = &frame.n_field.apply(&p) + &(g * &p);
        out.push(p.value(0).re);
    }
    out
}

/// `s^{(k)} = N^k s|_M` for k = 0..=j through the volume-form ratio.
pub fn s_jets(frame: &AdaptedFrame, j: usize) -> Result<Vec<f64>, CrError> {
    let g = s_rate(frame)?;
    let out = normal_series(frame, &g, j);
    if out.iter().any(|x| x.is_nan()) {
        return Err(CrError::Truncation("s jets"));
    }
    Ok(out)
}

/// The same series from the transport equation `N s = -(n+1) κ s`.
pub fn s_jets_kappa(frame: &AdaptedFrame, j: usize) -> Result<Vec<f64>, CrError> {
    let g = frame.kappa_jet.scale_re(-(frame.n as f64 + 1.0));
    let out = normal_series(frame, &g, j);
    if out.iter().any(|x| x.is_nan()) {
        return Err(CrError::Truncation("s jets"));
    }
    Ok(out)
}

/// `s^{(3)}` from the κ jets for n = 2.
pub fn s3_from_kappa(k: &[f64; 3]) -> f64 {
    -3.0 * k[2] + 27.0 * k[0] * k[1] - 27.0 * k[0].powi(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Dim5Integrands {
    pub s3_direct: f64,
    pub s3_curvature: f64,
    pub pi5: f64,
    pub divs_normsq: f64,
    pub s_normsq: f64,
}

pub fn dim5_integrands(tw: &TWState) -> Result<Dim5Integrands, CrError> {
    if tw.n() != 2 {
        return Err(CrError::Dimension(tw.n()));
    }
    let s = s_jets(&tw.frame, 3)?;
    let sc = tw.scal_value();
    let lap = tw.lap_scal.value(0).re;
    let raa = tw.raa();
    let s3_curvature = -sc.powi(3) / 36.0 + 0.25 * sc * lap + 3.0 * tw.grad_a_norm_sq() + 3.0 * raa;
    Ok(Dim5Integrands {
        s3_direct: s[3],
        s3_curvature,
        pi5: pi_burns_epstein(tw)?,
        divs_normsq: tw.div_s.norm_sq(),
        s_normsq: tw.chern.norm_sq(),
    })
}

/// Burns–Epstein integrand Π at p (n = 1, 2). For n = 1 both terms must carry
/// the weight of θ∧dθ, so the scalar curvature enters squared.
pub fn pi_burns_epstein(tw: &TWState) -> Result<f64, CrError> {
    let sc = tw.scal_value();
    match tw.n() {
        1 => Ok((sc * sc - 4.0 * tw.a_norm_sq()) / (4.0 * PI).powi(2)),
        2 => Ok(-(sc.powi(3) / 27.0 - 4.0 * tw.raa() + tw.chern.norm_sq() * sc / 3.0) / (4.0 * PI).powi(3)),
        n => Err(CrError::Dimension(n)),
    }
}

/// `P_{ᾱβ̄} f = ½(f_{ᾱβ̄} - iA_{ᾱβ̄} f)` for the scale of the frame.
pub fn p_alphabeta_tw(tw: &TWState, f: &Jet) -> Vec<Vec<C64>> {
    let n = tw.n();
    let t = Tensor::scalar(n, f.clone());
    let h = tw.cov(&tw.cov(&t, Ix::Anti), Ix::Anti);
    let f0 = f.value(0);
    (0..n)
        .map(|a| (0..n).map(|b| 0.5 * (h.at(&[a, b]) - I * tw.torsion.at(&[a, b]).conj() * f0)).collect())
        .collect()
}

/// Random polynomial of degree ≤ 3 in (w, w̄) with the shape of `like`.
pub fn random_jet(like: &Jet, rng: &mut impl Rng) -> Jet {
    let m = like.vars().num_complex;
    let sp = like.space();
    let terms: Vec<_> = (0..sp.count(3))
        .map(|i| {
            let e = sp.exponents(i);
            (e[..m].to_vec(), e[m..].to_vec(), 0, C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        })
        .collect();
    Jet::from_terms(like.vars(), like.trunc(), &terms)
}

/// Truncated exponential of a jet.
pub fn exp_jet(g: &Jet) -> Jet {
    let g0 = g.value(0);
    let h = g.add_const(-g0);
    let mut term = Jet::one(g.vars(), g.trunc());
    let mut sum = term.clone();
    for k in 1..=g.trunc() {
        term = (&term * &h).scale_re(1.0 / k as f64);
        sum = &sum + &term;
    }
    sum.scale(g0.exp())
}

/// Pointwise residuals of the Tanaka–Webster identities at p.
#[derive(Clone, Debug, Serialize)]
pub struct TwIdentities {
    pub n: usize,
    pub structure: f64,
    /// f_{αβ}−f_{βα}, f_{αβ̄}−f_{β̄α}−iℓf_0, f_{0α}−f_{α0}−A f_ᾱ, and the T/N commutator
    pub function_commutators: f64,
    /// N-derivative commutator on (1,0)-forms
    pub form_commutator: f64,
    /// A_{αβ,γ} symmetry, A_{αβ,N}, in A_{αβ,}{}^β = Scal_α (pseudo-Einstein)
    pub bianchi: f64,
    /// div S tensor identity (n = 2)
    pub div_s: Option<f64>,
    /// |div S|² − 4|∇A|² + ⅔|∂_b Scal|² (n = 2)
    pub div_s_norm: Option<f64>,
    /// κ^{(0)} − Scal/6 (n = 2)
    pub kappa0: Option<f64>,
    /// κ^{(1)} − (Δ_b Scal/24 + Scal²/36 + |A|²/2) (n = 2)
    pub kappa1: Option<f64>,
    pub pseudo_einstein: f64,
    pub a_norm_sq: f64,
}

impl TwIdentities {
    pub fn worst(&self) -> f64 {
        [self.structure, self.function_commutators, self.form_commutator, self.bianchi]
            .into_iter()
            .chain([self.div_s, self.div_s_norm, self.kappa0, self.kappa1].into_iter().flatten())
            .fold(0.0, f64::max)
    }
}

pub fn tw_identities(tw: &TWState, seed: u64) -> TwIdentities {
    let n = tw.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Tensor::scalar(n, tw.frame.kappa_jet.clone());
    let kv = k.at(&[]);
    let kh = tw.cov(&k, Ix::Hol);
    let ka = tw.cov(&k, Ix::Anti);

    let mut fc: f64 = 0.0;
    for _ in 0..10 {
        let f = Tensor::scalar(n, random_jet(&tw.frame.rho, &mut rng));
        let fh = tw.cov(&f, Ix::Hol);
        let fa = tw.cov(&f, Ix::Anti);
        let f0 = tw.cov_dir(&f, Dir::T);
        let fhh = tw.cov(&fh, Ix::Hol);
        let fha = tw.cov(&fh, Ix::Anti);
        let fah = tw.cov(&fa, Ix::Hol);
        let f0h = tw.cov(&f0, Ix::Hol);
        let fh0 = tw.cov_dir(&fh, Dir::T);
        for a in 0..n {
            for b in 0..n {
                fc = fc.max((fhh.at(&[a, b]) - fhh.at(&[b, a])).norm());
                let d = if a == b { I * f0.at(&[]) } else { c(0.0) };
                fc = fc.max((fha.at(&[a, b]) - fah.at(&[b, a]) - d).norm());
            }
            let mut rhs = c(0.0);
            for b in 0..n {
                rhs += tw.torsion.at(&[a, b]) * fa.at(&[b]);
            }
            fc = fc.max((f0h.at(&[a]) - fh0.at(&[a]) - rhs).norm());
        }
        // f_{TN} − f_{NT} = i(f_γ κ^γ − f_γ̄ κ^γ̄) + κ f_T
        let ftn = tw.cov_dir(&f0, Dir::N).at(&[]);
        let fnt = tw.cov_dir(&tw.cov_dir(&f, Dir::N), Dir::T).at(&[]);
        let mut rhs = kv * f0.at(&[]);
        for g in 0..n {
            rhs += I * (fh.at(&[g]) * ka.at(&[g]) - fa.at(&[g]) * kh.at(&[g]));
        }
        fc = fc.max((ftn - fnt - rhs).norm());
    }

    let t = Tensor { n, kinds: vec![Ix::Hol], comps: (0..n).map(|_| random_jet(&tw.frame.rho, &mut rng)).collect() };
    let ta = tw.cov(&t, Ix::Anti);
    let th = tw.cov(&t, Ix::Hol);
    let lhs1 = tw.cov_dir(&ta, Dir::N);
    let lhs2 = tw.cov(&tw.cov_dir(&t, Dir::N), Ix::Anti);
    let mut form: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let mut rhs = 0.5 * kv * ta.at(&[a, b]) - 0.5 * t.at(&[a]) * ka.at(&[b]);
            for g in 0..n {
                rhs -= 0.5 * I * th.at(&[a, g]) * tw.torsion.at(&[g, b]).conj();
                rhs -= 0.5 * I * t.at(&[g]) * tw.da_a.at(&[g, b, a]).conj();
                if a == b {
                    rhs -= t.at(&[g]) * ka.at(&[g]);
                }
            }
            form = form.max((lhs1.at(&[a, b]) - lhs2.at(&[a, b]) - rhs).norm());
        }
    }

    let khh = tw.cov(&kh, Ix::Hol);
    let (mut bianchi, mut div_s): (f64, f64) = (0.0, 0.0);
    let q = 1.0 / (n + 1) as f64;
    for a in 0..n {
        let mut div = c(0.0);
        for b in 0..n {
            div += tw.da_a.at(&[a, b, b]);
            for g in 0..n {
                bianchi = bianchi.max((tw.da_h.at(&[a, b, g]) - tw.da_h.at(&[a, g, b])).norm());
                let rhs = -2.0 * I * tw.da_a.at(&[a, g, b])
                    + (tw.dscal_h.at(&[a]) * if g == b { 1.0 } else { 0.0 } + tw.dscal_h.at(&[g]) * if a == b { 1.0 } else { 0.0 }) * q;
                div_s = div_s.max((tw.div_s.at(&[a, b, g]) - rhs).norm());
            }
            let rhs = kv * tw.torsion.at(&[a, b]) - I * khh.at(&[a, b]) - 0.5 * I * tw.da_t.at(&[a, b]);
            bianchi = bianchi.max((tw.da_n.at(&[a, b]) - rhs).norm());
        }
        bianchi = bianchi.max((n as f64 * I * div - tw.dscal_h.at(&[a])).norm());
    }
    let sc = tw.scal_value();
    let two = n == 2;
    let kj = tw.kappa_jets;
    TwIdentities {
        n,
        structure: tw.structure_residual,
        function_commutators: fc,
        form_commutator: form,
        bianchi,
        div_s: two.then_some(div_s),
        div_s_norm: two.then(|| (tw.div_s.norm_sq() - 4.0 * tw.grad_a_norm_sq() + 2.0 / 3.0 * tw.dscal_norm_sq()).abs()),
        kappa0: two.then(|| (kj[0] - sc / 6.0).abs()),
        kappa1: two.then(|| (kj[1] - (tw.lap_scal.value(0).re / 24.0 + sc * sc / 36.0 + 0.5 * tw.a_norm_sq())).abs()),
        pseudo_einstein: pseudo_einstein_residual(tw),
        a_norm_sq: tw.a_norm_sq(),
    }
}

/// Pseudo-Einstein residual after rescaling r by e^u, u = |w₁|²(1 + 2 Re w₁), w = z − p.
/// u is not pluriharmonic, and the cubic part breaks the rotation symmetry of the ball.
pub fn rescaled_pseudo_einstein(sol: &FeffermanSolution) -> Result<f64, CrError> {
    let r = sol.r.retrunc(FRAME_ORDER);
    let z1 = Jet::var(r.vars(), r.trunc(), crate::jets::Sym::Z(1))?;
    let u = &(&z1 * &z1.conj()) * &(&z1 + &z1.conj()).add_const(c(1.0));
    let scale = exp_jet(&u);
    let tw = tw_invariants(&build_frame_from(&(&scale * &r), sol.n, &sol.anchor, None)?)?;
    Ok(pseudo_einstein_residual(&tw))
}

/// Largest gap between the Tanaka–Webster and ambient forms of P_{ᾱβ̄} on random weight-1 densities.
pub fn deformation_operator_gap(sol: &FeffermanSolution, tw: &TWState, samples: usize, seed: u64) -> Result<f64, CrError> {
    use crate::ambient::{AmbientState, DensityJet};
    let n = sol.n;
    let st = AmbientState::build(sol).map_err(|e| CrError::Ambient(e.to_string()))?;
    let zv: Vec<Vec<C64>> = tw.frame.z_alpha.iter().map(|z| z.iter().map(|x| x.value(0)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let f = random_jet(&sol.r, &mut rng).re();
        let amb = st.p_alphabeta_ambient(&DensityJet::density(1, f.clone()), &zv);
        let twp = p_alphabeta_tw(tw, &f.retrunc(FRAME_ORDER));
        for a in 0..n {
            for b in 0..n {
                worst = worst.max((amb[a][b] - twp[a][b]).norm());
            }
        }
    }
    Ok(worst)
}
