//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits 0 after printing every line so the rest of the test suite still runs;
//! set CRPRIME_ACCEPTANCE_STRICT=1 to exit nonzero when any criterion fails.

use crprime_core::ambient::{ambient_identities, gjms_suite, AmbientState};
use crprime_core::cli::anchors;
use crprime_core::cr_tensors::{build_frame, deformation_operator_gap, rescaled_pseudo_einstein, tw_identities, tw_invariants};
use crprime_core::monge_ampere::{default_trunc, fefferman_solve, jmap, seed_dependence, DomainSpec};
use crprime_core::variation::{first_variation_check, obstruction_variation_check, second_variation_check, solve_family, DeformationFamily};
use crprime_core::volume::{build_grid, qprime_from_values, renormalized_volume, surface_integral, EpsGrid, GridOptions, NodeValues, QPrimeTotals, QuadratureGrid, Wants};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::Instant;

type Outcome = Result<(bool, String), String>;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn e(n: usize, k: &[(usize, u8)]) -> Vec<u8> {
    let mut v = vec![0u8; n + 1];
    for &(i, p) in k {
        v[i] += p;
    }
    v
}

fn perturbed(n: usize, eps: f64) -> DomainSpec {
    DomainSpec::ball(n).add_real(&e(n, &[(0, 2)]), &e(n, &[(1, 1)]), 0, c(-eps, 0.0))
}

/// Ball plus a few random real cubic terms with |coeff| ≤ 0.05.
fn random_cubic(n: usize, seed: u64) -> DomainSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = DomainSpec::ball(n);
    for _ in 0..3 {
        let mut a = vec![0u8; n + 1];
        let mut b = vec![0u8; n + 1];
        for _ in 0..3 {
            let i = rng.gen_range(0..=n);
            if rng.gen_bool(0.5) {
                a[i] += 1
            } else {
                b[i] += 1
            }
        }
        let (r, t) = (rng.gen_range(0.0..0.05), rng.gen_range(0.0..2.0 * PI));
        s = s.add_real(&a, &b, 0, C64::from_polar(r, t) * 0.5);
    }
    s
}

fn e0(n: usize) -> Vec<C64> {
    (0..=n).map(|j| c(if j == 0 { 1.0 } else { 0.0 }, 0.0)).collect()
}

fn err(x: impl std::fmt::Display) -> String {
    x.to_string()
}

struct Grid {
    grid: QuadratureGrid,
    vals: Vec<NodeValues>,
    q: QPrimeTotals,
}

fn qgrid(spec: &DomainSpec, opts: &GridOptions) -> Result<Grid, String> {
    let n = spec.n;
    let want = Wants { qprime: true, s_order: Some(n + 3), pi: true, dim5: n == 2, ..Default::default() };
    let (grid, vals) = build_grid(spec, opts, &want).map_err(err)?;
    let q = qprime_from_values(&grid, &vals, &EpsGrid::default()).map_err(err)?;
    Ok(Grid { grid, vals, q })
}

fn crit1() -> Outcome {
    let t = Instant::now();
    let mut dev: f64 = 0.0;
    let mut obs: f64 = 0.0;
    for n in [1usize, 2] {
        let spec = DomainSpec::ball(n);
        for p in anchors(&spec, 3, 5).map_err(err)? {
            let rho = spec.rho_at(&p, default_trunc(n), 0);
            dev = dev.max(jmap(&rho, n).map_err(err)?.add_const(c(-1.0, 0.0)).max_abs());
            let sol = fefferman_solve(&spec, &p, default_trunc(n)).map_err(err)?;
            obs = obs.max(sol.obstruction.max_abs_upto(sol.obstruction.prec()));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((dev <= 1e-12 && obs <= 1e-10 && secs < 5.0, format!("max |J-1| coeff {dev:.1e}, max |O| {obs:.1e}, {secs:.2} s")))
}

fn crit2() -> Outcome {
    let mut div: f64 = 0.0;
    let mut seed_dep: f64 = 0.0;
    let mut slow = [0.0f64; 2];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (n, domains, per) in [(1usize, 3u64, 3usize), (2, 2, 2)] {
        for d in 0..domains {
            let spec = random_cubic(n, 100 * n as u64 + d);
            for p in anchors(&spec, per, d).map_err(err)? {
                let t = Instant::now();
                let sol = fefferman_solve(&spec, &p, default_trunc(n)).map_err(err)?;
                let bump: Vec<f64> = (0..=n).map(|_| rng.gen_range(0.05..0.2)).collect();
                let (r, o) = seed_dependence(&spec, &sol, &bump).map_err(err)?;
                slow[n - 1] = slow[n - 1].max(t.elapsed().as_secs_f64());
                div = div.max(sol.residuals.iter().cloned().fold(0.0, f64::max));
                seed_dep = seed_dep.max(r).max(o);
            }
        }
    }
    let ok = div <= 1e-8 && seed_dep <= 1e-8 && slow[0] < 30.0 && slow[1] < 300.0;
    Ok((ok, format!("divisibility {div:.1e}, seed dependence {seed_dep:.1e}, slowest anchor n=1 {:.2} s, n=2 {:.2} s", slow[0], slow[1])))
}

fn crit3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut lorentz = true;
    let mut count = 0;
    for (n, k) in [(1usize, 20usize), (2, 4)] {
        let spec = perturbed(n, 0.05);
        for (i, p) in anchors(&spec, k, 9).map_err(err)?.iter().enumerate() {
            let sol = fefferman_solve(&spec, p, default_trunc(n)).map_err(err)?;
            let st = AmbientState::build(&sol).map_err(err)?;
            let id = ambient_identities(&st, i as u64).map_err(err)?;
            lorentz &= id.lorentz(n);
            worst = worst.max(id.worst());
            count += 1;
        }
    }
    Ok((worst <= 1e-7 && lorentz, format!("{count} anchors (20 at n=1), worst residual {worst:.1e}, Lorentz signature {lorentz}")))
}

fn tw_at(spec: &DomainSpec, p: &[C64]) -> Result<(crprime_core::monge_ampere::FeffermanSolution, crprime_core::cr_tensors::TWState), String> {
    let sol = fefferman_solve(spec, p, default_trunc(spec.n).max(12)).map_err(err)?;
    let tw = tw_invariants(&build_frame(&sol).map_err(err)?).map_err(err)?;
    Ok((sol, tw))
}

fn crit4() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut torsion: f64 = 0.0;
    for n in [1usize, 2] {
        for d in 0..2 {
            let spec = random_cubic(n, 200 + 10 * n as u64 + d);
            for p in anchors(&spec, 2, d).map_err(err)? {
                let (_, tw) = tw_at(&spec, &p)?;
                let id = tw_identities(&tw, d);
                worst = worst.max(id.worst());
                torsion = torsion.max(id.a_norm_sq);
            }
        }
    }
    Ok((worst <= 1e-8 && torsion > 1e-8, format!("worst pointwise residual {worst:.1e} (largest |A|^2 {torsion:.1e})")))
}

fn crit5() -> Outcome {
    let mut pe: f64 = 0.0;
    let mut neg: f64 = f64::INFINITY;
    for n in [1usize, 2] {
        let spec = random_cubic(n, 300 + n as u64);
        for p in anchors(&spec, 3, 2).map_err(err)? {
            let (sol, tw) = tw_at(&spec, &p)?;
            pe = pe.max(tw_identities(&tw, 0).pseudo_einstein);
            neg = neg.min(rescaled_pseudo_einstein(&sol).map_err(err)?);
        }
    }
    Ok((pe <= 1e-7 && neg > 1e-2, format!("pseudo-Einstein residual {pe:.1e}; rescaled control {neg:.2e}")))
}

fn crit6(g2: &Grid) -> Outcome {
    let mut worst: f64 = 0.0;
    let spec = random_cubic(2, 400);
    for p in anchors(&spec, 3, 4).map_err(err)? {
        let (_, tw) = tw_at(&spec, &p)?;
        let id = tw_identities(&tw, 0);
        worst = worst.max(id.kappa0.unwrap()).max(id.kappa1.unwrap());
    }
    let d: Vec<f64> = g2.vals.iter().map(|v| v.dim5.unwrap().s3_direct).collect();
    let k: Vec<f64> = g2.vals.iter().map(|v| v.dim5.unwrap().s3_curvature).collect();
    let a = surface_integral(&g2.grid, &d).map_err(err)?;
    let b = surface_integral(&g2.grid, &k).map_err(err)?;
    let rel = (a - b).abs() / a.abs().max(b.abs());
    Ok((worst <= 1e-8 && rel <= 1e-6, format!("kappa0/kappa1 pointwise {worst:.1e}; integral s3 {a:.10} vs {b:.10}, rel {rel:.1e} ({} nodes)", g2.grid.len())))
}

fn crit7(grids: &[(&str, &Grid)]) -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for (name, g) in grids {
        ok &= g.q.rel_def_s <= 1e-6 && g.q.rel_fit <= 1e-4;
        parts.push(format!("{name}: Q'={:.8} def-s {:.1e} fit {:.1e}", g.q.route_def, g.q.rel_def_s, g.q.rel_fit));
    }
    Ok((ok, parts.join("; ")))
}

fn crit8() -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for (n, opts) in [(1usize, GridOptions::new(12, 12)), (2, GridOptions::new(7, 8))] {
        let v = renormalized_volume(&DomainSpec::ball(n), &opts, &EpsGrid::default()).map_err(err)?;
        ok &= v.rel_error <= 1e-6;
        parts.push(format!("n={n}: V={:.10} predicted {:.10} rel {:.1e}", v.v, v.predicted, v.rel_error));
    }
    Ok((ok, parts.join("; ")))
}

fn mu(g: &Grid) -> Result<f64, String> {
    surface_integral(&g.grid, &g.vals.iter().map(|v| v.pi).collect::<Vec<_>>()).map_err(err)
}

fn crit9(b1: &Grid, p1: &Grid, b2: &Grid) -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for (name, g) in [("sphere n=1", b1), ("perturbed n=1", p1)] {
        let r = g.q.route_def / (-(4.0 * PI).powi(2) * mu(g)?);
        ok &= (r - 1.0).abs() <= 1e-6;
        parts.push(format!("{name}: Q'/(-(4pi)^2 mu) = {r:.9}"));
    }
    let r = b2.q.route_def / (-(4.0 * PI).powi(3) * mu(b2)?);
    let s = b2.vals.iter().map(|v| v.dim5.unwrap().s_normsq).fold(0.0, f64::max);
    ok &= (r - 1.0).abs() <= 1e-6 && s <= 1e-9;
    parts.push(format!("sphere n=2: Q'/(-(4pi)^3 mu) = {r:.9}, max |S|^2 {s:.1e}"));
    Ok((ok, parts.join("; ")))
}

// lattice-compatible terms, so ṙ couples to the obstruction of the base
fn coupled_family() -> DeformationFamily {
    DeformationFamily::new(perturbed(1, 0.1), vec![])
        .unwrap()
        .add_real(&[2, 0], &[0, 1], 1, c(0.3, 0.1))
        .add_real(&[1, 1], &[1, 1], 1, c(0.2, 0.0))
        .add_real(&[2, 0], &[2, 0], 1, c(-0.1, 0.0))
}

fn ball_family() -> DeformationFamily {
    DeformationFamily::new(DomainSpec::ball(1), vec![]).unwrap().add_real(&[1, 1], &[1, 1], 1, c(0.3, 0.0))
}

// 1 − |z − tv|²
fn translation_family() -> DeformationFamily {
    let v = [c(0.2, 0.1), c(-0.1, 0.3)];
    let mut f = DeformationFamily::new(DomainSpec::ball(1), vec![]).unwrap();
    for (j, vj) in v.iter().enumerate() {
        f = f.add_real(&e(1, &[(j, 1)]), &e(1, &[]), 1, vj.conj());
    }
    f.t_terms.push(crprime_core::monge_ampere::RhoTerm { zpow: vec![0, 0], zbarpow: vec![0, 0], tpow: 2, c: c(-(v[0].norm_sqr() + v[1].norm_sqr()), 0.0) });
    f
}

fn crit10() -> Outcome {
    let fv = first_variation_check(&coupled_family(), &GridOptions::new(10, 10), 1e-2).map_err(err)?;
    let fb = first_variation_check(&ball_family(), &GridOptions::new(8, 8), 1e-2).map_err(err)?;
    let scale = fb.lhs.abs().max(fb.rhs.abs()) / fb.qprime0.abs();
    Ok((
        fv.rel <= 1e-3 && scale <= 1e-4,
        format!("perturbed base: dQ/dt {:.9} vs c_n int rdot O {:.9}, rel {:.1e}; ball: both sides / Q' {scale:.1e}", fv.lhs, fv.rhs, fv.rel),
    ))
}

fn crit11() -> Outcome {
    let sv = second_variation_check(&ball_family(), &GridOptions::new(6, 6), 1e-2, 14).map_err(err)?;
    let tr = second_variation_check(&translation_family(), &GridOptions::new(4, 4), 1e-2, 14).map_err(err)?;
    let q0 = 8.0 * PI * PI;
    let auto = tr.lhs.abs().max(tr.rhs.abs()) / q0;
    Ok((
        sv.rel <= 1e-3 && auto <= 1e-4,
        format!(
            "d2Q/dt2 {:.9} vs c_n k_n int rdot P rdot {:.6}: rel {:.3e} (ratio {:.1}); with 1/c_(n,1) in place of k_n: {:.9}, rel {:.1e}; automorphism family both sides / Q' {auto:.1e}",
            sv.lhs,
            sv.rhs,
            sv.rel,
            sv.rhs / sv.lhs,
            sv.rhs_inverse,
            sv.rel_inverse
        ),
    ))
}

fn crit12() -> Outcome {
    let sf = solve_family(&coupled_family(), &GridOptions::full(2, 3), Some(14)).map_err(err)?;
    let ov = obstruction_variation_check(&sf);
    let ok = sf.nodes.len() >= 10 && ov.scale > 1e-4 && ov.max_diff <= 1e-6 * ov.scale.max(1.0);
    Ok((ok, format!("{} nodes, max |lhs - rhs| {:.1e} at scale {:.2e}", sf.nodes.len(), ov.max_diff, ov.scale)))
}

fn crit13() -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for (n, ks) in [(1usize, vec![0, 1]), (2, vec![0])] {
        let spec = perturbed(n, 0.05);
        let sol = fefferman_solve(&spec, &e0(n), 2 * n + 10).map_err(err)?;
        let g = gjms_suite(&sol, &ks, 3).map_err(err)?;
        ok &= g.worst_gjms() <= 1e-8 && g.laplacian_obstruction_after <= 1e-7;
        parts.push(format!("n={n}: GJMS {:.1e}, strict Lap O {:.1e} (from {:.2e})", g.worst_gjms(), g.laplacian_obstruction_after, g.laplacian_obstruction_before));
        if let Some(d) = g.p_decomposition {
            ok &= d <= 1e-7;
            parts.push(format!("P decomposition {d:.1e}"));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn crit14() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1usize, 2] {
        let spec = random_cubic(n, 500 + n as u64);
        for (i, p) in anchors(&spec, 2, 6).map_err(err)?.iter().enumerate() {
            let (sol, tw) = tw_at(&spec, p)?;
            worst = worst.max(deformation_operator_gap(&sol, &tw, 5, i as u64).map_err(err)?);
        }
    }
    Ok((worst <= 1e-8, format!("worst |P_TW - P_ambient| {worst:.1e}")))
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let (ok, detail) = match f() {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id:>2} {} {name}: {detail} [{:.1} s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    ok
}

fn main() {
    let t = Instant::now();
    let grids = (|| -> Result<_, String> {
        Ok((
            qgrid(&DomainSpec::ball(1), &GridOptions::new(12, 12))?,
            qgrid(&perturbed(1, 0.05), &GridOptions::new(12, 12))?,
            qgrid(&DomainSpec::ball(2), &GridOptions::new(7, 8))?,
            qgrid(&perturbed(2, 0.1), &GridOptions::new(7, 8))?,
        ))
    })();
    println!("shared Q' grids built in {:.1} s", t.elapsed().as_secs_f64());
    let mut pass = vec![
        report(1, "ball exactness", crit1),
        report(2, "Fefferman order and seed independence", crit2),
        report(3, "ambient identities", crit3),
        report(4, "Tanaka-Webster structural suite", crit4),
        report(5, "pseudo-Einstein and negative control", crit5),
    ];
    match &grids {
        Ok((b1, p1, b2, p2)) => {
            pass.push(report(6, "transverse curvature identities", || crit6(p2)));
            pass.push(report(7, "Q' route consistency", || crit7(&[("ball n=1", b1), ("perturbed n=1", p1), ("ball n=2", b2), ("perturbed n=2", p2)])));
            pass.push(report(8, "renormalized volume", crit8));
            pass.push(report(9, "Burns-Epstein bridges", || crit9(b1, p1, b2)));
        }
        Err(e) => {
            for (i, name) in [(6, "transverse curvature identities"), (7, "Q' route consistency"), (9, "Burns-Epstein bridges")] {
                pass.push(report(i, name, || Err(e.clone())));
            }
            pass.push(report(8, "renormalized volume", crit8));
        }
    }
    pass.push(report(10, "first variation", crit10));
    pass.push(report(11, "second variation at the ball", crit11));
    pass.push(report(12, "obstruction variation", crit12));
    pass.push(report(13, "GJMS suite and strict normalization", crit13));
    pass.push(report(14, "deformation operator routes", crit14));
    let failed = pass.iter().filter(|x| !**x).count();
    println!("acceptance: {}/{} criteria pass [{:.1} s]", pass.len() - failed, pass.len(), t.elapsed().as_secs_f64());
    if failed > 0 && std::env::var("CRPRIME_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
