//! Truncated power series in paired symbols `z_j`, `zbar_j` with complex
//! coefficients, optionally adjoined with a nilpotent real parameter `t`.
//!
//! Storage is dense and graded by total degree: the monomials of a space are
//! listed degree by degree, so "everything up to degree d" is a prefix.  Each
//! t-coefficient carries its own precision: coefficients above `prec` are
//! unknown, not zero.  Products only compute what the operands determine,
//! `min(Pa + val(b), Pb + val(a))`, which is what keeps repeated division by a
//! defining function affordable.

use num_complex::Complex64 as C64;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

const BITS: u32 = 5;

/// Absolute floor of the divisibility tolerance.
pub const DIV_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JetError {
    #[error("mismatched variable sets or truncation")]
    Mismatch,
    #[error("unknown symbol {0}")]
    UnknownSymbol(usize),
    #[error("constant term is zero")]
    ZeroConstant,
    #[error("fractional power needs a positive real constant term, got {0}")]
    NonPositive(C64),
    #[error("not divisible by the defining function: residual {residual:.3e} > tol {tol:.3e}")]
    Divisibility { residual: f64, tol: f64 },
    #[error("defining function has vanishing differential")]
    DegenerateDefining,
    #[error("singular affine map")]
    SingularMap,
    #[error("truncation exhausted: need order {need}, have {have}")]
    Truncation { need: i32, have: i32 },
}

/// Symbols of a space: holomorphic `Z(j)` and antiholomorphic `Zb(j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sym {
    Z(usize),
    Zb(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariableSet {
    pub num_complex: usize,
    pub has_param_t: bool,
    pub t_max_degree: usize,
}

impl VariableSet {
    pub fn new(num_complex: usize) -> Self {
        VariableSet { num_complex, has_param_t: false, t_max_degree: 0 }
    }

    pub fn with_t(num_complex: usize, t_max_degree: usize) -> Self {
        assert!(t_max_degree <= 2, "t_max_degree must be 0, 1 or 2");
        VariableSet { num_complex, has_param_t: true, t_max_degree }
    }
}

/// Monomial tables shared by all jets of one (variables, truncation) pair.
pub struct Space {
    pub m: usize,
    pub nsym: usize,
    pub trunc: usize,
    exps: Vec<u8>,
    deg: Vec<u8>,
    ncum: Vec<usize>,
    index: HashMap<u64, u32>,
    row_off: Vec<usize>,
    table: Vec<u32>,
    deriv: Vec<Vec<(u32, u32, f64)>>,
    up: Vec<Vec<u32>>,
    conj_idx: Vec<u32>,
    parent: Vec<(u32, u8)>,
    sym_order: Mutex<HashMap<usize, Arc<Vec<u32>>>>,
}

fn pack(e: &[u8]) -> u64 {
    e.iter().enumerate().fold(0u64, |k, (s, &x)| k | ((x as u64) << (BITS * s as u32)))
}

impl Space {
    fn build(m: usize, trunc: usize) -> Space {
        let nsym = 2 * m;
        assert!(nsym * BITS as usize <= 64 && trunc < 31, "space too large");
        let mut exps: Vec<u8> = Vec::new();
        let mut deg = Vec::new();
        let mut ncum = Vec::new();
        // graded enumeration, lexicographic inside each degree
        for d in 0..=trunc {
            let mut cur = vec![0u8; nsym];
            fn rec(s: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<u8>, nsym: usize) {
                if s == nsym - 1 {
                    cur[s] = left as u8;
                    out.extend_from_slice(cur);
                    return;
                }
                for x in (0..=left).rev() {
                    cur[s] = x as u8;
                    rec(s + 1, left - x, cur, out, nsym);
                }
                cur[s] = 0;
            }
            let before = exps.len() / nsym;
            rec(0, d, &mut cur, &mut exps, nsym);
            let after = exps.len() / nsym;
            deg.extend(std::iter::repeat(d as u8).take(after - before));
            ncum.push(after);
        }
        let count = deg.len();
        let mut index = HashMap::with_capacity(count);
        for i in 0..count {
            index.insert(pack(&exps[i * nsym..(i + 1) * nsym]), i as u32);
        }
        let keys: Vec<u64> = (0..count).map(|i| pack(&exps[i * nsym..(i + 1) * nsym])).collect();
        let mut row_off = Vec::with_capacity(count + 1);
        let total: usize = (0..count).map(|i| ncum[trunc - deg[i] as usize]).sum();
        let mut table = Vec::with_capacity(total);
        for i in 0..count {
            row_off.push(table.len());
            let lim = ncum[trunc - deg[i] as usize];
            for j in 0..lim {
                table.push(index[&(keys[i] + keys[j])]);
            }
        }
        row_off.push(table.len());
        let mut deriv = vec![Vec::new(); nsym];
        let mut up = vec![vec![u32::MAX; count]; nsym];
        for i in 0..count {
            for s in 0..nsym {
                let e = exps[i * nsym + s];
                if e > 0 {
                    let k = keys[i] - (1u64 << (BITS * s as u32));
                    deriv[s].push((i as u32, index[&k], e as f64));
                }
                if (deg[i] as usize) < trunc {
                    up[s][i] = index[&(keys[i] + (1u64 << (BITS * s as u32)))];
                }
            }
        }
        let mut conj_idx = vec![0u32; count];
        let mut parent = vec![(0u32, 0u8); count];
        for i in 0..count {
            let e = &exps[i * nsym..(i + 1) * nsym];
            let mut c = vec![0u8; nsym];
            c[..m].copy_from_slice(&e[m..]);
            c[m..].copy_from_slice(&e[..m]);
            conj_idx[i] = index[&pack(&c)];
            if let Some(s) = e.iter().position(|&x| x > 0) {
                let k = keys[i] - (1u64 << (BITS * s as u32));
                parent[i] = (index[&k], s as u8);
            }
        }
        Space {
            m,
            nsym,
            trunc,
            exps,
            deg,
            ncum,
            index,
            row_off,
            table,
            deriv,
            up,
            conj_idx,
            parent,
            sym_order: Mutex::new(HashMap::new()),
        }
    }

    /// Shared tables for `m` complex variables truncated at total degree `trunc`.
    pub fn get(m: usize, trunc: usize) -> Arc<Space> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Space>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(sp) = cache.lock().unwrap().get(&(m, trunc)) {
            return sp.clone();
        }
        let sp = Arc::new(Space::build(m, trunc));
        cache.lock().unwrap().entry((m, trunc)).or_insert(sp).clone()
    }

    pub fn len(&self) -> usize {
        self.deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deg.is_empty()
    }

    /// Number of monomials of degree `<= d` (0 for negative d).
    pub fn count(&self, d: i32) -> usize {
        if d < 0 {
            0
        } else {
            self.ncum[(d as usize).min(self.trunc)]
        }
    }

    fn block(&self, d: i32) -> std::ops::Range<usize> {
        self.count(d - 1)..self.count(d)
    }

    pub fn exponents(&self, i: usize) -> &[u8] {
        &self.exps[i * self.nsym..(i + 1) * self.nsym]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.deg[i] as usize
    }

    pub fn index_of(&self, e: &[u8]) -> Option<usize> {
        if e.len() != self.nsym {
            return None;
        }
        self.index.get(&pack(e)).map(|&i| i as usize)
    }

    fn sym_index(&self, s: Sym) -> Result<usize, JetError> {
        match s {
            Sym::Z(j) if j < self.m => Ok(j),
            Sym::Zb(j) if j < self.m => Ok(self.m + j),
            Sym::Z(j) | Sym::Zb(j) => Err(JetError::UnknownSymbol(j)),
        }
    }

    // monomials sorted by degree, then by decreasing exponent of symbol s
    fn order_by(&self, s: usize) -> Arc<Vec<u32>> {
        let mut g = self.sym_order.lock().unwrap();
        g.entry(s)
            .or_insert_with(|| {
                let mut v: Vec<u32> = (0..self.len() as u32).collect();
                v.sort_by_key(|&i| {
                    let i = i as usize;
                    (self.deg[i], std::cmp::Reverse(self.exps[i * self.nsym + s]), i)
                });
                Arc::new(v)
            })
            .clone()
    }
}

impl std::fmt::Debug for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Space(m={}, D={})", self.m, self.trunc)
    }
}

/// One t-coefficient: known through total degree `prec`.
#[derive(Clone, Debug)]
pub(crate) struct Part {
    pub(crate) c: Vec<C64>,
    pub(crate) prec: i32,
}

impl Part {
    fn zeros(sp: &Space, prec: i32) -> Part {
        Part { c: vec![C64::new(0.0, 0.0); sp.count(prec)], prec }
    }

    fn val(&self, sp: &Space) -> i32 {
        match self.c.iter().position(|x| x.re != 0.0 || x.im != 0.0) {
            Some(i) => sp.deg[i] as i32,
            None => i32::MAX / 4,
        }
    }

    fn truncate(&mut self, sp: &Space, prec: i32) {
        if prec < self.prec {
            self.prec = prec;
            self.c.truncate(sp.count(prec));
        }
    }
}

#[derive(Clone)]
pub struct Jet {
    sp: Arc<Space>,
    vars: VariableSet,
    pub(crate) parts: Vec<Part>,
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Jet({:?}, t<={}, prec={:?})", self.sp, self.tmax(), self.precs())
    }
}

fn czero() -> C64 {
    C64::new(0.0, 0.0)
}

impl Jet {
    pub fn zero(vars: VariableSet, trunc: usize) -> Jet {
        let sp = Space::get(vars.num_complex, trunc);
        let parts = (0..=vars.t_max_degree).map(|_| Part::zeros(&sp, trunc as i32)).collect();
        Jet { sp, vars, parts }
    }

    pub fn constant(vars: VariableSet, trunc: usize, c: C64) -> Jet {
        let mut j = Jet::zero(vars, trunc);
        j.parts[0].c[0] = c;
        j
    }

    pub fn one(vars: VariableSet, trunc: usize) -> Jet {
        Jet::constant(vars, trunc, C64::new(1.0, 0.0))
    }

    /// The coordinate symbol itself (centered at the origin of the space).
    pub fn var(vars: VariableSet, trunc: usize, s: Sym) -> Result<Jet, JetError> {
        let mut j = Jet::zero(vars, trunc);
        let k = j.sp.sym_index(s)?;
        let mut e = vec![0u8; j.sp.nsym];
        e[k] = 1;
        if trunc >= 1 {
            let i = j.sp.index_of(&e).unwrap();
            j.parts[0].c[i] = C64::new(1.0, 0.0);
        }
        Ok(j)
    }

    /// The parameter `t` itself.
    pub fn t_var(vars: VariableSet, trunc: usize) -> Jet {
        let mut j = Jet::zero(vars, trunc);
        if vars.t_max_degree >= 1 {
            j.parts[1].c[0] = C64::new(1.0, 0.0);
        }
        j
    }

    /// Builds a jet from monomials `(zpow, zbarpow, tpow, coeff)`; terms beyond
    /// the truncation are dropped.
    pub fn from_terms(vars: VariableSet, trunc: usize, terms: &[(Vec<u8>, Vec<u8>, usize, C64)]) -> Jet {
        let mut j = Jet::zero(vars, trunc);
        for (a, b, k, c) in terms {
            if *k > vars.t_max_degree {
                continue;
            }
            let mut e = a.clone();
            e.extend_from_slice(b);
            if e.iter().map(|&x| x as usize).sum::<usize>() > trunc {
                continue;
            }
            if let Some(i) = j.sp.index_of(&e) {
                j.parts[*k].c[i] += *c;
            }
        }
        j
    }

    pub fn vars(&self) -> VariableSet {
        self.vars
    }

    pub fn trunc(&self) -> usize {
        self.sp.trunc
    }

    pub fn space(&self) -> &Arc<Space> {
        &self.sp
    }

    pub fn tmax(&self) -> usize {
        self.parts.len() - 1
    }

    /// Precision (highest known total degree) of each t-coefficient.
    pub fn precs(&self) -> Vec<i32> {
        self.parts.iter().map(|p| p.prec).collect()
    }

    pub fn prec(&self) -> i32 {
        self.parts[0].prec
    }

    fn same(&self, o: &Jet) -> Result<(), JetError> {
        if Arc::ptr_eq(&self.sp, &o.sp) && self.vars == o.vars {
            Ok(())
        } else {
            Err(JetError::Mismatch)
        }
    }

    fn with_parts(&self, parts: Vec<Part>) -> Jet {
        Jet { sp: self.sp.clone(), vars: self.vars, parts }
    }

    /// Coefficient of `z^a zbar^b t^k` (zero if unknown or absent).
    pub fn coeff(&self, a: &[u8], b: &[u8], k: usize) -> C64 {
        let mut e = a.to_vec();
        e.extend_from_slice(b);
        match (self.sp.index_of(&e), self.parts.get(k)) {
            (Some(i), Some(p)) if i < p.c.len() => p.c[i],
            _ => czero(),
        }
    }

    /// Value at the center (constant term of the t^k coefficient); NaN if unknown.
    pub fn value(&self, k: usize) -> C64 {
        match self.parts.get(k) {
            Some(p) if p.prec < 0 => C64::new(f64::NAN, f64::NAN),
            Some(p) => p.c[0],
            None => czero(),
        }
    }

    pub fn set_value(&mut self, k: usize, c: C64) {
        if let Some(x) = self.parts.get_mut(k).and_then(|p| p.c.first_mut()) {
            *x = c;
        }
    }

    /// Raw coefficients of the t^k part, graded order.
    pub fn part_coeffs(&self, k: usize) -> &[C64] {
        &self.parts[k].c
    }

    /// The t^k coefficient as a t-free jet.
    pub fn t_coeff(&self, k: usize) -> Jet {
        let v = VariableSet::new(self.vars.num_complex);
        let sp = self.sp.clone();
        let part = self.parts.get(k).cloned().unwrap_or_else(|| Part::zeros(&sp, sp.trunc as i32));
        Jet { sp, vars: v, parts: vec![part] }
    }

    /// Reassembles a t-jet from t-free coefficients.
    pub fn from_t_coeffs(vars: VariableSet, cs: &[Jet]) -> Jet {
        let sp = cs[0].sp.clone();
        let parts = (0..=vars.t_max_degree)
            .map(|k| cs.get(k).map(|c| c.parts[0].clone()).unwrap_or_else(|| Part::zeros(&sp, sp.trunc as i32)))
            .collect();
        Jet { sp, vars, parts }
    }

    /// Same series viewed with a different t-truncation.
    pub fn with_tmax(&self, tmax: usize) -> Jet {
        let vars = if tmax == 0 && !self.vars.has_param_t {
            self.vars
        } else {
            VariableSet::with_t(self.vars.num_complex, tmax)
        };
        let parts =
            (0..=tmax).map(|k| self.parts.get(k).cloned().unwrap_or_else(|| Part::zeros(&self.sp, self.sp.trunc as i32))).collect();
        Jet { sp: self.sp.clone(), vars, parts }
    }

    /// The same coefficients in the space of another truncation.
    pub fn retrunc(&self, trunc: usize) -> Jet {
        let sp = Space::get(self.sp.m, trunc);
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let prec = p.prec.min(trunc as i32);
                let mut out = Part::zeros(&sp, prec);
                for (i, x) in out.c.iter_mut().enumerate() {
                    *x = p.c[self.sp.index_of(sp.exponents(i)).unwrap()];
                }
                out
            })
            .collect();
        Jet { sp, vars: self.vars, parts }
    }

    pub fn truncated(&self, prec: i32) -> Jet {
        let mut j = self.clone();
        for p in &mut j.parts {
            p.truncate(&self.sp, prec);
        }
        j
    }

    pub fn max_abs(&self) -> f64 {
        self.parts.iter().flat_map(|p| p.c.iter()).fold(0.0, |m, x| m.max(x.norm()))
    }

    /// Largest coefficient modulus among degrees `<= d` of every t-part.
    pub fn max_abs_upto(&self, d: i32) -> f64 {
        let n = self.sp.count(d);
        self.parts.iter().flat_map(|p| p.c.iter().take(n)).fold(0.0, |m, x| m.max(x.norm()))
    }

    pub fn try_add(&self, o: &Jet) -> Result<Jet, JetError> {
        self.same(o)?;
        Ok(self.zip(o, |a, b| a + b))
    }

    pub fn try_sub(&self, o: &Jet) -> Result<Jet, JetError> {
        self.same(o)?;
        Ok(self.zip(o, |a, b| a - b))
    }

    fn zip(&self, o: &Jet, f: impl Fn(C64, C64) -> C64) -> Jet {
        let parts = self
            .parts
            .iter()
            .zip(&o.parts)
            .map(|(a, b)| {
                let prec = a.prec.min(b.prec);
                let n = self.sp.count(prec);
                Part { c: (0..n).map(|i| f(a.c[i], b.c[i])).collect(), prec }
            })
            .collect();
        self.with_parts(parts)
    }

    pub fn scale(&self, s: C64) -> Jet {
        self.with_parts(self.parts.iter().map(|p| Part { c: p.c.iter().map(|x| x * s).collect(), prec: p.prec }).collect())
    }

    pub fn scale_re(&self, s: f64) -> Jet {
        self.scale(C64::new(s, 0.0))
    }

    pub fn add_const(&self, c: C64) -> Jet {
        let mut j = self.clone();
        if !j.parts[0].c.is_empty() {
            j.parts[0].c[0] += c;
        }
        j
    }

    fn mul_part_into(sp: &Space, a: &Part, b: &Part, prec: i32, acc: &mut [C64]) {
        if prec < 0 {
            return;
        }
        let na = sp.count(prec).min(a.c.len());
        for i in 0..na {
            let ai = a.c[i];
            if ai.re == 0.0 && ai.im == 0.0 {
                continue;
            }
            let lim = sp.count(prec - sp.deg[i] as i32).min(b.c.len());
            let row = &sp.table[sp.row_off[i]..sp.row_off[i] + lim];
            for (bj, &t) in b.c[..lim].iter().zip(row) {
                let t = t as usize;
                acc[t].re += ai.re * bj.re - ai.im * bj.im;
                acc[t].im += ai.re * bj.im + ai.im * bj.re;
            }
        }
    }

    pub fn try_mul(&self, o: &Jet) -> Result<Jet, JetError> {
        self.same(o)?;
        let sp = &self.sp;
        let va: Vec<i32> = self.parts.iter().map(|p| p.val(sp)).collect();
        let vb: Vec<i32> = o.parts.iter().map(|p| p.val(sp)).collect();
        let mut parts = Vec::with_capacity(self.parts.len());
        for k in 0..self.parts.len() {
            let mut prec = sp.trunc as i32;
            for i in 0..=k {
                let (a, b) = (&self.parts[i], &o.parts[k - i]);
                let p = (a.prec.saturating_add(vb[k - i])).min(b.prec.saturating_add(va[i]));
                prec = prec.min(p);
            }
            let mut acc = Part::zeros(sp, prec);
            for i in 0..=k {
                Self::mul_part_into(sp, &self.parts[i], &o.parts[k - i], prec, &mut acc.c);
            }
            parts.push(acc);
        }
        Ok(self.with_parts(parts))
    }

    /// Formal partial derivative; precision drops by one.
    pub fn try_diff(&self, s: Sym) -> Result<Jet, JetError> {
        let k = self.sp.sym_index(s)?;
        Ok(self.diff_idx(k))
    }

    pub(crate) fn diff_idx(&self, k: usize) -> Jet {
        let sp = &self.sp;
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let prec = p.prec - 1;
                let mut out = Part::zeros(sp, prec);
                let n = p.c.len();
                for &(src, dst, f) in &sp.deriv[k] {
                    let (src, dst) = (src as usize, dst as usize);
                    if src < n {
                        out.c[dst] += p.c[src] * f;
                    }
                }
                out
            })
            .collect();
        self.with_parts(parts)
    }

    pub fn d(&self, j: usize) -> Jet {
        self.diff_idx(j)
    }

    pub fn db(&self, j: usize) -> Jet {
        self.diff_idx(self.sp.m + j)
    }

    /// Derivative in the parameter t (shifts t-coefficients down).
    pub fn dt(&self) -> Jet {
        let tm = self.tmax();
        let parts = (0..=tm)
            .map(|k| {
                if k < tm {
                    let p = &self.parts[k + 1];
                    Part { c: p.c.iter().map(|x| x * (k as f64 + 1.0)).collect(), prec: p.prec }
                } else {
                    Part::zeros(&self.sp, self.sp.trunc as i32)
                }
            })
            .collect();
        self.with_parts(parts)
    }

    /// Multiplication by a coordinate symbol (cheap shift).
    pub(crate) fn mul_sym(&self, k: usize) -> Jet {
        let sp = &self.sp;
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let prec = (p.prec + 1).min(sp.trunc as i32);
                let mut out = Part::zeros(sp, prec);
                for i in 0..p.c.len() {
                    let t = sp.up[k][i];
                    if t != u32::MAX && (t as usize) < out.c.len() {
                        out.c[t as usize] += p.c[i];
                    }
                }
                out
            })
            .collect();
        self.with_parts(parts)
    }

    /// Multiply by `z_j` (holomorphic coordinate of the space, centered at 0).
    pub fn mul_z(&self, j: usize) -> Jet {
        self.mul_sym(j)
    }

    pub fn mul_zb(&self, j: usize) -> Jet {
        self.mul_sym(self.sp.m + j)
    }

    /// Complex conjugate: swaps z and zbar exponents and conjugates coefficients.
    pub fn conj(&self) -> Jet {
        let sp = &self.sp;
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let mut out = Part::zeros(sp, p.prec);
                for (i, x) in p.c.iter().enumerate() {
                    out.c[sp.conj_idx[i] as usize] = x.conj();
                }
                out
            })
            .collect();
        self.with_parts(parts)
    }

    /// Max deviation from Hermitian symmetry `c(a,b,k) = conj c(b,a,k)`.
    pub fn reality_defect(&self) -> f64 {
        let sp = &self.sp;
        self.parts
            .iter()
            .flat_map(|p| p.c.iter().enumerate().map(move |(i, x)| (x - p.c[sp.conj_idx[i] as usize].conj()).norm()))
            .fold(0.0, f64::max)
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.reality_defect() <= tol * self.max_abs().max(1.0)
    }

    /// Real part `(f + conj f)/2`.
    pub fn re(&self) -> Jet {
        (self + &self.conj()).scale_re(0.5)
    }

    // graded solve shared by invert and power_frac on a single t-part
    fn graded_power(sp: &Space, a: &Part, e: f64, y0: C64) -> Part {
        let a0 = a.c[0];
        let mut y = Part::zeros(sp, a.prec);
        y.c[0] = y0;
        for d in 1..=a.prec {
            let blk = sp.block(d);
            let start = blk.start;
            let mut acc = vec![czero(); blk.len()];
            for i in 1..sp.count(d).min(a.c.len()) {
                let ai = a.c[i];
                if ai.re == 0.0 && ai.im == 0.0 {
                    continue;
                }
                let di = sp.deg[i] as i32;
                let w = e * di as f64 - (d - di) as f64;
                let jb = sp.block(d - di);
                let row = &sp.table[sp.row_off[i]..sp.row_off[i] + jb.end];
                let aw = ai * w;
                for j in jb {
                    acc[row[j] as usize - start] += aw * y.c[j];
                }
            }
            let den = a0 * d as f64;
            for (k, v) in acc.into_iter().enumerate() {
                y.c[start + k] = v / den;
            }
        }
        y
    }

    /// Multiplicative inverse (requires nonzero constant term).
    pub fn invert(&self) -> Result<Jet, JetError> {
        let a0 = self.value(0);
        if a0.norm() == 0.0 {
            return Err(JetError::ZeroConstant);
        }
        let y0 = Self::graded_power(&self.sp, &self.parts[0], -1.0, a0.inv());
        let y0j = self.with_parts(vec![y0]);
        self.lift_t(&y0j, -1.0)
    }

    /// `a^(p/q)`, principal branch; the constant term must be real and positive.
    pub fn power_frac(&self, p: i64, q: i64) -> Result<Jet, JetError> {
        let a0 = self.value(0);
        if !(a0.re > 0.0) || a0.im.abs() > 1e-12 * a0.re {
            return Err(JetError::NonPositive(a0));
        }
        let e = p as f64 / q as f64;
        let y0 = Self::graded_power(&self.sp, &self.parts[0], e, C64::new(a0.re.powf(e), 0.0));
        let y0j = self.with_parts(vec![y0]);
        self.lift_t(&y0j, e)
    }

    // extends f(a0) = a0^e to t-parts: (a0 + t a1 + t^2 a2)^e
    fn lift_t(&self, y0: &Jet, e: f64) -> Result<Jet, JetError> {
        let tm = self.tmax();
        let v0 = VariableSet::new(self.vars.num_complex);
        let y0 = Jet { sp: self.sp.clone(), vars: v0, parts: y0.parts.clone() };
        if tm == 0 {
            return Ok(Jet { vars: self.vars, ..y0 });
        }
        let a0 = self.t_coeff(0);
        let inv0 = if e == -1.0 { y0.clone() } else { a0.invert()? };
        let u = &self.t_coeff(1) * &inv0;
        let mut cs = vec![y0.clone(), (&y0 * &u).scale_re(e)];
        if tm >= 2 {
            let w = &self.t_coeff(2) * &inv0;
            let inner = &w.scale_re(e) + &(&u * &u).scale_re(e * (e - 1.0) / 2.0);
            cs.push(&y0 * &inner);
        }
        Ok(Jet::from_t_coeffs(self.vars, &cs))
    }

    pub fn powi(&self, k: u32) -> Jet {
        let mut r = Jet::one(self.vars, self.sp.trunc);
        for _ in 0..k {
            r = &r * self;
        }
        r
    }

    /// Quotient `q` with `f = q * rho^s` up to truncation, computed order by
    /// order against the linear part of `rho`.  The residual is the part of `f`
    /// that fails to vanish on `{rho = 0}`.
    pub fn divide_by_defining(&self, rho: &Jet, s: usize) -> Result<Jet, JetError> {
        self.divide_by_defining_res(rho, s).map(|x| x.0)
    }

    pub fn divide_by_defining_res(&self, rho: &Jet, s: usize) -> Result<(Jet, f64), JetError> {
        self.same(rho)?;
        let scale = self.max_abs();
        // relative tolerance with an absolute floor for inputs that are pure roundoff
        let tol = (1e-9 * scale).max(DIV_FLOOR);
        let mut q = self.clone();
        let mut res = 0.0f64;
        for _ in 0..s {
            let (nq, r) = q.div_once(rho)?;
            res = res.max(r);
            q = nq;
        }
        if res > tol {
            return Err(JetError::Divisibility { residual: res, tol });
        }
        Ok((q, res))
    }

    fn div_once(&self, rho: &Jet) -> Result<(Jet, f64), JetError> {
        let sp = self.sp.clone();
        let r0 = &rho.parts[0];
        let lin = sp.block(1);
        if r0.prec < 1 {
            return Err(JetError::Truncation { need: 1, have: r0.prec });
        }
        let pivot = lin.clone().max_by(|&a, &b| r0.c[a].norm().partial_cmp(&r0.c[b].norm()).unwrap()).unwrap();
        let lp = r0.c[pivot];
        if lp.norm() == 0.0 {
            return Err(JetError::DegenerateDefining);
        }
        let psym = sp.exps[pivot * sp.nsym..(pivot + 1) * sp.nsym].iter().position(|&x| x == 1).unwrap();
        let order = sp.order_by(psym);
        let lcoef: Vec<C64> = lin.clone().map(|i| r0.c[i]).collect();
        // rho without constant and linear part
        let mut rtail = r0.clone();
        rtail.c[0] = czero();
        for i in lin.clone() {
            rtail.c[i] = czero();
        }
        let mut res = 0.0f64;
        let mut qparts: Vec<Part> = Vec::new();
        for k in 0..self.parts.len() {
            // g = f_k - sum_{i<k} q_i rho_{k-i}
            let mut g = self.parts[k].clone();
            for i in 0..k {
                let prec = (qparts[i].prec + rho.parts[k - i].val(&sp)).min(rho.parts[k - i].prec + qparts[i].val(&sp)).min(g.prec);
                let mut acc = Part::zeros(&sp, prec);
                Self::mul_part_into(&sp, &qparts[i], &rho.parts[k - i], prec, &mut acc.c);
                g.truncate(&sp, prec);
                for (x, y) in g.c.iter_mut().zip(&acc.c) {
                    *x -= y;
                }
            }
            let qprec = (g.prec - 1).min(r0.prec - 1);
            let mut q = Part::zeros(&sp, qprec);
            if !g.c.is_empty() {
                res = res.max(g.c[0].norm());
            }
            for d in 0..=qprec {
                // h = g_{d+1} - [q_{<d} * rho_{>=2}]_{d+1}
                let blk = sp.block(d + 1);
                let start = blk.start;
                let mut h: Vec<C64> = g.c[blk.clone()].to_vec();
                for i in 0..sp.count(d - 1) {
                    let qi = q.c[i];
                    if qi.re == 0.0 && qi.im == 0.0 {
                        continue;
                    }
                    let di = sp.deg[i] as i32;
                    let jb = sp.block(d + 1 - di);
                    if jb.end > rtail.c.len() {
                        continue;
                    }
                    let row = &sp.table[sp.row_off[i]..sp.row_off[i] + jb.end];
                    for j in jb {
                        h[row[j] as usize - start] -= qi * rtail.c[j];
                    }
                }
                // synthetic division of h by the linear form, pivot symbol first
                for &mi in order.iter() {
                    let mi = mi as usize;
                    if sp.deg[mi] as i32 != d + 1 {
                        continue;
                    }
                    if sp.exps[mi * sp.nsym + psym] == 0 {
                        continue;
                    }
                    let c = h[mi - start] / lp;
                    if c.re == 0.0 && c.im == 0.0 {
                        continue;
                    }
                    let base = sp.index[&(pack(&sp.exps[mi * sp.nsym..(mi + 1) * sp.nsym]) - (1u64 << (BITS * psym as u32)))] as usize;
                    q.c[base] += c;
                    for (s, &ls) in lcoef.iter().enumerate() {
                        if ls.re == 0.0 && ls.im == 0.0 {
                            continue;
                        }
                        let t = sp.up[s_of(&sp, lin.start + s)][base] as usize;
                        h[t - start] -= c * ls;
                    }
                }
                for (k2, x) in h.iter().enumerate() {
                    if sp.exps[(start + k2) * sp.nsym + psym] == 0 {
                        res = res.max(x.norm());
                    }
                }
            }
            qparts.push(q);
        }
        Ok((self.with_parts(qparts), res))
    }

    /// Composition with the affine map `z = A w + b` (and `zbar = conj(A) wbar + conj(b)`).
    /// A translation treats the jet as the polynomial it stores.
    pub fn affine_recenter(&self, a: &[Vec<C64>], b: &[C64]) -> Result<Jet, JetError> {
        let m = self.sp.m;
        if a.len() != m || b.len() != m || a.iter().any(|r| r.len() != m) {
            return Err(JetError::Mismatch);
        }
        let mat = nalgebra::DMatrix::from_fn(m, m, |i, j| a[i][j]);
        if mat.determinant().norm() < 1e-14 {
            return Err(JetError::SingularMap);
        }
        let trunc = self.sp.trunc;
        let v0 = VariableSet::new(m);
        let mut lin = Vec::with_capacity(2 * m);
        for i in 0..m {
            let mut l = Jet::constant(v0, trunc, b[i]);
            for j in 0..m {
                l = &l + &Jet::var(v0, trunc, Sym::Z(j))?.scale(a[i][j]);
            }
            lin.push(l);
        }
        for i in 0..m {
            let c = lin[i].conj();
            lin.push(c);
        }
        let sp = &self.sp;
        let top = self
            .parts
            .iter()
            .filter_map(|p| p.c.iter().rposition(|x| x.re != 0.0 || x.im != 0.0))
            .max()
            .map_or(0, |i| sp.deg[i] as i32);
        let mut pw: Vec<Jet> = Vec::with_capacity(sp.count(top));
        pw.push(Jet::one(v0, trunc));
        for i in 1..sp.count(top) {
            let (p, s) = sp.parent[i];
            let v = &pw[p as usize] * &lin[s as usize];
            pw.push(v);
        }
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let mut acc = Part::zeros(sp, p.prec);
                for (i, x) in p.c.iter().enumerate().take(pw.len()) {
                    if x.re == 0.0 && x.im == 0.0 {
                        continue;
                    }
                    for (k, y) in pw[i].parts[0].c.iter().enumerate().take(acc.c.len()) {
                        acc.c[k] += x * y;
                    }
                }
                acc
            })
            .collect();
        Ok(self.with_parts(parts))
    }

    /// Polynomial `sum c z^a zbar^b t^k` expanded about `center` (binomially, no tables).
    pub fn from_poly_at(vars: VariableSet, trunc: usize, terms: &[(Vec<u8>, Vec<u8>, usize, C64)], center: &[C64]) -> Jet {
        let mut j = Jet::zero(vars, trunc);
        let m = vars.num_complex;
        let sp = j.sp.clone();
        let mut pts: Vec<C64> = center.to_vec();
        pts.extend(center.iter().map(|x| x.conj()));
        for (a, b, k, c) in terms {
            if *k > vars.t_max_degree {
                continue;
            }
            let mut e = a.clone();
            e.extend_from_slice(b);
            // all sub-exponents kk <= e
            let mut kk = vec![0u8; 2 * m];
            loop {
                let d: usize = kk.iter().map(|&x| x as usize).sum();
                if d <= trunc {
                    let mut w = *c;
                    for s in 0..2 * m {
                        let (n, r) = (e[s] as i32, kk[s] as i32);
                        w *= binom(n, r) * pts[s].powi(n - r);
                    }
                    if let Some(i) = sp.index_of(&kk) {
                        j.parts[*k].c[i] += w;
                    }
                }
                let mut s = 0;
                loop {
                    if s == 2 * m {
                        break;
                    }
                    if kk[s] < e[s] {
                        kk[s] += 1;
                        break;
                    }
                    kk[s] = 0;
                    s += 1;
                }
                if s == 2 * m {
                    break;
                }
            }
        }
        j
    }

    /// Pure translation `z = w + b`.
    pub fn translate(&self, b: &[C64]) -> Jet {
        let m = self.sp.m;
        let id: Vec<Vec<C64>> =
            (0..m).map(|i| (0..m).map(|j| if i == j { C64::new(1.0, 0.0) } else { czero() }).collect()).collect();
        self.affine_recenter(&id, b).expect("identity map")
    }

    /// Evaluates the t^k part along a curve `z_j(tau) = sum_{i>=1} delta[j][i] tau^i`
    /// (real parameter), returning its Taylor coefficients up to `order`.
    pub fn along_curve(&self, delta: &[Vec<C64>], order: usize, k: usize) -> Vec<C64> {
        let sp = &self.sp;
        let m = sp.m;
        let mut dl: Vec<Vec<C64>> = Vec::with_capacity(2 * m);
        for d in delta {
            let mut v = d.clone();
            v.resize(order + 1, czero());
            dl.push(v);
        }
        for j in 0..m {
            let c: Vec<C64> = dl[j].iter().map(|x| x.conj()).collect();
            dl.push(c);
        }
        let p = &self.parts[k];
        let nmon = sp.count(order as i32).min(p.c.len());
        let mut vals: Vec<Vec<C64>> = Vec::with_capacity(nmon);
        let mut one = vec![czero(); order + 1];
        one[0] = C64::new(1.0, 0.0);
        vals.push(one);
        for i in 1..nmon {
            let (pa, s) = sp.parent[i];
            let v = ser_mul(&vals[pa as usize], &dl[s as usize]);
            vals.push(v);
        }
        let mut out = vec![czero(); order + 1];
        for i in 0..nmon {
            let x = p.c[i];
            for (o, v) in out.iter_mut().zip(&vals[i]) {
                *o += x * v;
            }
        }
        out
    }

    /// Evaluates the stored polynomial (t^k part) at a displacement `w` from the center.
    pub fn eval_at(&self, w: &[C64], k: usize) -> C64 {
        let sp = &self.sp;
        let m = sp.m;
        let p = &self.parts[k];
        let mut vals = vec![czero(); p.c.len()];
        if vals.is_empty() {
            return czero();
        }
        vals[0] = C64::new(1.0, 0.0);
        let mut acc = p.c[0];
        for i in 1..p.c.len() {
            let (pa, s) = sp.parent[i];
            let s = s as usize;
            let x = if s < m { w[s] } else { w[s - m].conj() };
            vals[i] = vals[pa as usize] * x;
            acc += p.c[i] * vals[i];
        }
        acc
    }

    /// Homogeneous component of degree d of the t^k part.
    pub fn homogeneous(&self, d: i32, k: usize) -> Vec<(Vec<u8>, C64)> {
        let sp = &self.sp;
        let p = &self.parts[k];
        sp.block(d).filter(|&i| i < p.c.len()).map(|i| (sp.exponents(i).to_vec(), p.c[i])).collect()
    }
}

fn binom(n: i32, k: i32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn s_of(sp: &Space, lin_idx: usize) -> usize {
    sp.exps[lin_idx * sp.nsym..(lin_idx + 1) * sp.nsym].iter().position(|&x| x == 1).unwrap()
}

/// Truncated product of univariate series of equal length.
pub fn ser_mul(a: &[C64], b: &[C64]) -> Vec<C64> {
    let n = a.len().min(b.len());
    let mut out = vec![czero(); n];
    for i in 0..n {
        if a[i].re == 0.0 && a[i].im == 0.0 {
            continue;
        }
        for j in 0..n - i {
            out[i + j] += a[i] * b[j];
        }
    }
    out
}

macro_rules! binop {
    ($tr:ident, $f:ident, $m:ident) => {
        impl std::ops::$tr<&Jet> for &Jet {
            type Output = Jet;
            fn $f(self, o: &Jet) -> Jet {
                self.$m(o).expect("jet operands from different spaces")
            }
        }
        impl std::ops::$tr<Jet> for Jet {
            type Output = Jet;
            fn $f(self, o: Jet) -> Jet {
                self.$m(&o).expect("jet operands from different spaces")
            }
        }
        impl std::ops::$tr<&Jet> for Jet {
            type Output = Jet;
            fn $f(self, o: &Jet) -> Jet {
                self.$m(o).expect("jet operands from different spaces")
            }
        }
    };
}
binop!(Add, add, try_add);
binop!(Sub, sub, try_sub);
binop!(Mul, mul, try_mul);

impl std::ops::Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale_re(-1.0)
    }
}

impl std::ops::Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale_re(-1.0)
    }
}
