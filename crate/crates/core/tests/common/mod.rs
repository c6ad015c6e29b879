#![allow(dead_code)]

use std::path::PathBuf;

use deepsolve::netmodel::{BusKind, NetworkCase, RawBranch, RawBus, RawCase, RawCost, RawGenerator};
use proptest::prelude::*;

pub fn cases_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases")
}

/// Loads a shipped case by stem (`case30`, `case118`) from its MATPOWER file.
pub fn case(name: &str) -> NetworkCase {
    NetworkCase::load(&cases_dir().join(format!("{name}.m"))).unwrap()
}

#[derive(Debug, Clone)]
pub struct BranchParams {
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub tap: f64,
    pub shift_deg: f64,
}

fn branch_params(with_shift: bool) -> impl Strategy<Value = BranchParams> {
    let shift = if with_shift { (-10.0..10.0).boxed() } else { Just(0.0).boxed() };
    (0.001..0.1, 0.01..0.3, 0.0..0.2, prop_oneof![Just(1.0), 0.9..1.1], shift)
        .prop_map(|(r, x, b, tap, shift_deg)| BranchParams { r, x, b, tap, shift_deg })
}

/// A ring of `n` buses plus one chord, slack at bus 1, a generator at bus 2
/// (PV), the rest PQ with light loads and random shunts.
pub fn small_network(with_shift: bool) -> impl Strategy<Value = RawCase> {
    (3usize..7).prop_flat_map(move |n| {
        (
            Just(n),
            proptest::collection::vec(branch_params(with_shift), n + 1),
            proptest::collection::vec((0.0..30.0, 0.0..10.0, 0.0..2.0, -5.0..5.0), n),
        )
            .prop_map(|(n, params, loads)| {
                let bus = (0..n)
                    .map(|i| RawBus {
                        id: (i + 1) as u32,
                        kind: match i {
                            0 => BusKind::Slack,
                            1 => BusKind::Pv,
                            _ => BusKind::Pq,
                        },
                        pd_mw: if i == 0 { 0.0 } else { loads[i].0 },
                        qd_mvar: if i == 0 { 0.0 } else { loads[i].1 },
                        gs_mw: loads[i].2,
                        bs_mvar: loads[i].3,
                        vm_min: 0.9,
                        vm_max: 1.1,
                        base_kv: 138.0,
                    })
                    .collect();
                let mut ends: Vec<(u32, u32)> = (0..n).map(|i| (i as u32 + 1, ((i + 1) % n) as u32 + 1)).collect();
                ends.push((1, (n / 2) as u32 + 1));
                let branch = ends
                    .iter()
                    .zip(&params)
                    .map(|(&(from, to), p)| RawBranch {
                        from,
                        to,
                        r: p.r,
                        x: p.x,
                        b: p.b,
                        rate_a_mva: 0.0,
                        tap: p.tap,
                        shift_deg: p.shift_deg,
                    })
                    .collect();
                let generator = [1u32, 2]
                    .iter()
                    .map(|&bus| RawGenerator {
                        bus,
                        pg_mw: 20.0,
                        pmin_mw: 0.0,
                        pmax_mw: 200.0,
                        qmin_mvar: -100.0,
                        qmax_mvar: 100.0,
                        vg: 1.0,
                        cost: Some(RawCost { c2: 0.01, c1: 10.0, c0: 0.0 }),
                    })
                    .collect();
                RawCase { name: format!("ring{n}"), base_mva: 100.0, bus, branch, generator }
            })
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-14 * a.abs().max(b.abs()).max(1.0)
}

/// Equality up to the rounding of a unit conversion and back.
pub fn assert_case_close(a: &NetworkCase, b: &NetworkCase) {
    assert_eq!(a.name, b.name);
    assert_eq!(a.base_mva, b.base_mva);
    assert_eq!(a.layout(), b.layout());
    assert_eq!(a.buses.len(), b.buses.len());
    for (x, y) in a.buses.iter().zip(&b.buses) {
        assert_eq!((x.id, x.kind), (y.id, y.kind));
        for (u, v) in [
            (x.p_load, y.p_load),
            (x.q_load, y.q_load),
            (x.v_min, y.v_min),
            (x.v_max, y.v_max),
            (x.shunt_g, y.shunt_g),
            (x.shunt_b, y.shunt_b),
            (x.base_kv, y.base_kv),
        ] {
            assert!(close(u, v), "bus {}: {u} vs {v}", x.id);
        }
    }
    assert_eq!(a.branches.len(), b.branches.len());
    for (k, (x, y)) in a.branches.iter().zip(&b.branches).enumerate() {
        assert_eq!((x.from, x.to), (y.from, y.to));
        for (u, v) in [
            (x.series_r, y.series_r),
            (x.series_x, y.series_x),
            (x.charging_b, y.charging_b),
            (x.tap_ratio, y.tap_ratio),
            (x.phase_shift, y.phase_shift),
            (x.s_max, y.s_max),
        ] {
            assert!(close(u, v), "branch {k}: {u} vs {v}");
        }
    }
    assert_eq!(a.generators.len(), b.generators.len());
    for (k, (x, y)) in a.generators.iter().zip(&b.generators).enumerate() {
        assert_eq!(x.bus, y.bus);
        for (u, v) in [
            (x.p_min, y.p_min),
            (x.p_max, y.p_max),
            (x.q_min, y.q_min),
            (x.q_max, y.q_max),
            (x.v_setpoint, y.v_setpoint),
            (x.p_setpoint, y.p_setpoint),
        ] {
            assert!(close(u, v), "generator {k}: {u} vs {v}");
        }
    }
    for (k, (x, y)) in a.cost_curves.iter().zip(&b.cost_curves).enumerate() {
        for (u, v) in [(x.c2, y.c2), (x.c1, y.c1), (x.c0, y.c0)] {
            assert!(close(u, v), "cost {k}: {u} vs {v}");
        }
    }
}

pub fn proptest_config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

/// Active and reactive injections by the textbook trigonometric sums
/// `P_i = |V_i| Σ_k |V_k| (G_ik cos θ_ik + B_ik sin θ_ik)` and the matching
/// reactive sum.
pub fn trig_injections(g: &[Vec<f64>], b: &[Vec<f64>], v_mag: &[f64], v_ang: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v_mag.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for k in 0..n {
            let t = v_ang[i] - v_ang[k];
            p[i] += v_mag[i] * v_mag[k] * (g[i][k] * t.cos() + b[i][k] * t.sin());
            q[i] += v_mag[i] * v_mag[k] * (g[i][k] * t.sin() - b[i][k] * t.cos());
        }
    }
    (p, q)
}
