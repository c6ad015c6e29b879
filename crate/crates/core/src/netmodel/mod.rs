//! Network model: case parsing, per-unit conversion and the bus admittance matrix.
//!
//! Two textual sources are accepted. MATPOWER-style `mpc.*` matrix files are
//! what standard test systems ship as; the canonical TOML layout is the repo's
//! own format. Both are first read into a [`RawCase`] holding physical units
//! (MW, MVAr, degrees, $/MWh), and [`NetworkCase::from_raw`] is the single
//! place where per-unit conversion and validation happen.

mod admittance;
mod canonical;
mod matpower;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use admittance::{build_admittance, AdmittanceMatrix, BranchAdmittance};
pub use canonical::{parse_canonical, write_canonical, CANONICAL_FORMAT_VERSION};
pub use matpower::parse_matpower;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{what} refers to unknown bus {bus}")]
    UnknownBus { what: String, bus: u32 },
    #[error("missing cost curve for generator {gen} (bus {bus})")]
    MissingCost { gen: usize, bus: u32 },
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o error reading {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// Bus data in per-unit. Voltage limits are magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    pub base_kv: f64,
}

/// Branch data in per-unit. `from` and `to` are bus indices (positions in
/// [`NetworkCase::buses`]), not bus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub series_r: f64,
    pub series_x: f64,
    pub charging_b: f64,
    pub tap_ratio: f64,
    /// Radians.
    pub phase_shift: f64,
    /// Apparent power limit; 0 means unlimited.
    pub s_max: f64,
}

impl Branch {
    pub fn is_limited(&self) -> bool {
        self.s_max > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// Bus index.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_setpoint: f64,
    /// Scheduled active output from the source file, used only as a default
    /// operating point for debugging commands.
    pub p_setpoint: f64,
}

/// Quadratic cost `c2·P² + c1·P + c0` with `P` in per-unit and cost in $/hr.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }

    pub fn derivative(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

/// Index sets derived from bus types, computed once at validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub slack_bus: usize,
    pub slack_gen: usize,
    /// Generators on PV buses, in generator order. This is the set the
    /// learned model predicts `(P, |V|)` for.
    pub pv_gens: Vec<usize>,
    pub pv_buses: Vec<usize>,
    pub pq_buses: Vec<usize>,
    /// PV buses followed by PQ buses, in bus order within each group.
    pub pvpq_buses: Vec<usize>,
    pub gen_at_bus: Vec<Option<usize>>,
}

/// A validated network in per-unit on `base_mva`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub cost_curves: Vec<CostCurve>,
    layout: Layout,
}

impl NetworkCase {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_pv(&self) -> usize {
        self.layout.pv_gens.len()
    }

    pub fn n_pq(&self) -> usize {
        self.layout.pq_buses.len()
    }

    /// Default loads as a `2N` vector: active loads then reactive loads.
    pub fn default_loads(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.p_load).chain(self.buses.iter().map(|b| b.q_load)).collect()
    }

    /// Total generation cost in $/hr for a per-generator active dispatch.
    pub fn total_cost(&self, p_gen: &[f64]) -> f64 {
        self.cost_curves.iter().zip(p_gen).map(|(c, &p)| c.eval(p)).sum()
    }

    /// Reads a case from disk, choosing the grammar by extension (`.m` for
    /// MATPOWER, anything else canonical). A path without an extension is
    /// resolved by trying `.toml` and then `.m`.
    pub fn load(path: &Path) -> Result<NetworkCase, CaseError> {
        let path = resolve_case_path(path);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CaseError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let raw = match path.extension().and_then(|e| e.to_str()) {
            Some("m") => parse_matpower(&text, &stem)?,
            _ => parse_canonical(&text)?,
        };
        NetworkCase::from_raw(&raw)
    }

    pub fn parse_case(source: &str, name: &str) -> Result<NetworkCase, CaseError> {
        let raw = if source.contains("mpc.") { parse_matpower(source, name)? } else { parse_canonical(source)? };
        NetworkCase::from_raw(&raw)
    }

    pub fn from_raw(raw: &RawCase) -> Result<NetworkCase, CaseError> {
        let base = raw.base_mva;
        if !(base > 0.0) || !base.is_finite() {
            return Err(CaseError::Invalid(format!("base_mva must be positive, got {base}")));
        }
        let mut index: HashMap<u32, usize> = HashMap::new();
        let mut buses = Vec::with_capacity(raw.bus.len());
        for (i, b) in raw.bus.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(CaseError::Invalid(format!("duplicate bus id {}", b.id)));
            }
            if !(b.vm_min > 0.0 && b.vm_min <= b.vm_max) {
                return Err(CaseError::Invalid(format!(
                    "bus {}: voltage limits must satisfy 0 < v_min <= v_max",
                    b.id
                )));
            }
            buses.push(Bus {
                id: b.id,
                kind: b.kind,
                p_load: b.pd_mw / base,
                q_load: b.qd_mvar / base,
                v_min: b.vm_min,
                v_max: b.vm_max,
                shunt_g: b.gs_mw / base,
                shunt_b: b.bs_mvar / base,
                base_kv: b.base_kv,
            });
        }
        let lookup = |id: u32, what: &dyn Fn() -> String| {
            index.get(&id).copied().ok_or_else(|| CaseError::UnknownBus { what: what(), bus: id })
        };

        let mut branches = Vec::with_capacity(raw.branch.len());
        for (k, br) in raw.branch.iter().enumerate() {
            let from = lookup(br.from, &|| format!("branch {}", k + 1))?;
            let to = lookup(br.to, &|| format!("branch {}", k + 1))?;
            if br.r * br.r + br.x * br.x <= 0.0 {
                return Err(CaseError::Invalid(format!(
                    "branch {} ({}-{}) has zero series impedance",
                    k + 1,
                    br.from,
                    br.to
                )));
            }
            if !(br.tap > 0.0) {
                return Err(CaseError::Invalid(format!("branch {} has non-positive tap ratio", k + 1)));
            }
            branches.push(Branch {
                from,
                to,
                series_r: br.r,
                series_x: br.x,
                charging_b: br.b,
                tap_ratio: br.tap,
                phase_shift: br.shift_deg.to_radians(),
                s_max: br.rate_a_mva.max(0.0) / base,
            });
        }

        let mut generators = Vec::with_capacity(raw.generator.len());
        let mut cost_curves = Vec::with_capacity(raw.generator.len());
        for (k, g) in raw.generator.iter().enumerate() {
            let bus = lookup(g.bus, &|| format!("generator {}", k + 1))?;
            if g.pmin_mw > g.pmax_mw || g.qmin_mvar > g.qmax_mvar {
                return Err(CaseError::Invalid(format!(
                    "generator {} at bus {}: min limit exceeds max limit",
                    k + 1,
                    g.bus
                )));
            }
            let cost = g.cost.ok_or(CaseError::MissingCost { gen: k + 1, bus: g.bus })?;
            if cost.c2 < 0.0 {
                return Err(CaseError::Unsupported(format!("generator {} has a concave cost curve (c2 < 0)", k + 1)));
            }
            generators.push(Generator {
                bus,
                p_min: g.pmin_mw / base,
                p_max: g.pmax_mw / base,
                q_min: g.qmin_mvar / base,
                q_max: g.qmax_mvar / base,
                v_setpoint: g.vg,
                p_setpoint: g.pg_mw / base,
            });
            cost_curves.push(CostCurve { c2: cost.c2 * base * base, c1: cost.c1 * base, c0: cost.c0 });
        }

        let layout = build_layout(&buses, &generators)?;
        Ok(NetworkCase { name: raw.name.clone(), base_mva: base, buses, branches, generators, cost_curves, layout })
    }

    /// Converts back to physical units.
    pub fn to_raw(&self) -> RawCase {
        let base = self.base_mva;
        RawCase {
            name: self.name.clone(),
            base_mva: base,
            bus: self
                .buses
                .iter()
                .map(|b| RawBus {
                    id: b.id,
                    kind: b.kind,
                    pd_mw: b.p_load * base,
                    qd_mvar: b.q_load * base,
                    gs_mw: b.shunt_g * base,
                    bs_mvar: b.shunt_b * base,
                    vm_min: b.v_min,
                    vm_max: b.v_max,
                    base_kv: b.base_kv,
                })
                .collect(),
            branch: self
                .branches
                .iter()
                .map(|br| RawBranch {
                    from: self.buses[br.from].id,
                    to: self.buses[br.to].id,
                    r: br.series_r,
                    x: br.series_x,
                    b: br.charging_b,
                    rate_a_mva: br.s_max * base,
                    tap: br.tap_ratio,
                    shift_deg: br.phase_shift.to_degrees(),
                })
                .collect(),
            generator: self
                .generators
                .iter()
                .zip(&self.cost_curves)
                .map(|(g, c)| RawGenerator {
                    bus: self.buses[g.bus].id,
                    pg_mw: g.p_setpoint * base,
                    pmin_mw: g.p_min * base,
                    pmax_mw: g.p_max * base,
                    qmin_mvar: g.q_min * base,
                    qmax_mvar: g.q_max * base,
                    vg: g.v_setpoint,
                    cost: Some(RawCost { c2: c.c2 / (base * base), c1: c.c1 / base, c0: c.c0 }),
                })
                .collect(),
        }
    }
}

fn build_layout(buses: &[Bus], generators: &[Generator]) -> Result<Layout, CaseError> {
    let slacks: Vec<usize> = (0..buses.len()).filter(|&i| buses[i].kind == BusKind::Slack).collect();
    if slacks.len() != 1 {
        return Err(CaseError::Invalid(format!("exactly one slack bus required, found {}", slacks.len())));
    }
    let slack_bus = slacks[0];
    let mut gen_at_bus = vec![None; buses.len()];
    for (k, g) in generators.iter().enumerate() {
        let bus = &buses[g.bus];
        if bus.kind == BusKind::Pq {
            return Err(CaseError::Unsupported(format!("generator {} sits on PQ bus {}", k + 1, bus.id)));
        }
        if gen_at_bus[g.bus].replace(k).is_some() {
            return Err(CaseError::Unsupported(format!("more than one generator at bus {}", bus.id)));
        }
    }
    let slack_gen = gen_at_bus[slack_bus]
        .ok_or_else(|| CaseError::Invalid(format!("slack bus {} has no generator", buses[slack_bus].id)))?;
    let pv_buses: Vec<usize> = (0..buses.len()).filter(|&i| buses[i].kind == BusKind::Pv).collect();
    let mut pv_gens = Vec::with_capacity(pv_buses.len());
    for &i in &pv_buses {
        match gen_at_bus[i] {
            Some(g) => pv_gens.push(g),
            None => return Err(CaseError::Invalid(format!("PV bus {} has no generator", buses[i].id))),
        }
    }
    // Keep generator order for the prediction vector.
    pv_gens.sort_unstable();
    let pq_buses: Vec<usize> = (0..buses.len()).filter(|&i| buses[i].kind == BusKind::Pq).collect();
    let pvpq_buses = pv_buses.iter().chain(&pq_buses).copied().collect();
    Ok(Layout { slack_bus, slack_gen, pv_gens, pv_buses, pq_buses, pvpq_buses, gen_at_bus })
}

/// The file [`NetworkCase::load`] reads for `path`.
pub fn resolve_case_path(path: &Path) -> std::path::PathBuf {
    if path.exists() || path.extension().is_some() {
        return path.to_path_buf();
    }
    for ext in ["toml", "m"] {
        let candidate = path.with_extension(ext);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

/// Case data in physical units, shared by both input grammars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCase {
    pub name: String,
    pub base_mva: f64,
    pub bus: Vec<RawBus>,
    pub branch: Vec<RawBranch>,
    pub generator: Vec<RawGenerator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBus {
    pub id: u32,
    pub kind: BusKind,
    pub pd_mw: f64,
    pub qd_mvar: f64,
    pub gs_mw: f64,
    pub bs_mvar: f64,
    pub vm_min: f64,
    pub vm_max: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBranch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub rate_a_mva: f64,
    pub tap: f64,
    pub shift_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGenerator {
    pub bus: u32,
    pub pg_mw: f64,
    pub pmin_mw: f64,
    pub pmax_mw: f64,
    pub qmin_mvar: f64,
    pub qmax_mvar: f64,
    pub vg: f64,
    pub cost: Option<RawCost>,
}

/// Cost coefficients in $/MW²h, $/MWh and $/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Slack bus 1 feeding PQ bus 2 over one line.
    pub fn two_bus(r: f64, x: f64, p_load_mw: f64, q_load_mvar: f64) -> NetworkCase {
        let raw = RawCase {
            name: "two_bus".into(),
            base_mva: 100.0,
            bus: vec![
                RawBus {
                    id: 1,
                    kind: BusKind::Slack,
                    pd_mw: 0.0,
                    qd_mvar: 0.0,
                    gs_mw: 0.0,
                    bs_mvar: 0.0,
                    vm_min: 0.9,
                    vm_max: 1.1,
                    base_kv: 100.0,
                },
                RawBus {
                    id: 2,
                    kind: BusKind::Pq,
                    pd_mw: p_load_mw,
                    qd_mvar: q_load_mvar,
                    gs_mw: 0.0,
                    bs_mvar: 0.0,
                    vm_min: 0.9,
                    vm_max: 1.1,
                    base_kv: 100.0,
                },
            ],
            branch: vec![RawBranch { from: 1, to: 2, r, x, b: 0.0, rate_a_mva: 0.0, tap: 1.0, shift_deg: 0.0 }],
            generator: vec![RawGenerator {
                bus: 1,
                pg_mw: 0.0,
                pmin_mw: 0.0,
                pmax_mw: 200.0,
                qmin_mvar: -100.0,
                qmax_mvar: 100.0,
                vg: 1.0,
                cost: Some(RawCost { c2: 0.01, c1: 10.0, c0: 0.0 }),
            }],
        };
        NetworkCase::from_raw(&raw).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::two_bus;
    use super::*;

    #[test]
    fn two_bus_counts() {
        let case = two_bus(0.01, 0.1, 50.0, 20.0);
        assert_eq!(case.n_branch(), 1);
        assert_eq!(case.n_pq(), 1);
        assert_eq!(case.n_pv(), 0);
        assert_eq!(case.layout().slack_bus, 0);
    }

    #[test]
    fn per_unit_round_trip() {
        let case = two_bus(0.01, 0.1, 50.0, 20.0);
        let raw = case.to_raw();
        assert!((raw.bus[1].pd_mw - 50.0).abs() <= 1e-10 * 50.0);
        let again = NetworkCase::from_raw(&raw).unwrap();
        assert_eq!(again, case);
    }

    #[test]
    fn cost_scaled_to_per_unit() {
        let case = two_bus(0.01, 0.1, 50.0, 20.0);
        // 0.01 $/MW²h at 100 MVA base.
        assert!((case.cost_curves[0].c2 - 100.0).abs() < 1e-12);
        assert!((case.cost_curves[0].c1 - 1000.0).abs() < 1e-12);
        // 50 MW costs 0.01·2500 + 10·50.
        assert!((case.total_cost(&[0.5]) - 525.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_two_slacks() {
        let mut raw = two_bus(0.01, 0.1, 0.0, 0.0).to_raw();
        raw.bus[1].kind = BusKind::Slack;
        assert!(matches!(NetworkCase::from_raw(&raw), Err(CaseError::Invalid(_))));
    }

    #[test]
    fn rejects_unknown_branch_bus() {
        let mut raw = two_bus(0.01, 0.1, 0.0, 0.0).to_raw();
        raw.branch[0].to = 7;
        assert_eq!(NetworkCase::from_raw(&raw), Err(CaseError::UnknownBus { what: "branch 1".into(), bus: 7 }));
    }

    #[test]
    fn rejects_zero_impedance_and_bad_limits() {
        let mut raw = two_bus(0.01, 0.1, 0.0, 0.0).to_raw();
        raw.branch[0].r = 0.0;
        raw.branch[0].x = 0.0;
        assert!(NetworkCase::from_raw(&raw).is_err());
        raw.branch[0].x = 0.1;
        raw.bus[1].vm_min = 1.2;
        assert!(NetworkCase::from_raw(&raw).is_err());
        raw.bus[1].vm_min = 0.9;
        raw.base_mva = 0.0;
        assert!(NetworkCase::from_raw(&raw).is_err());
    }

    #[test]
    fn missing_cost_is_reported() {
        let mut raw = two_bus(0.01, 0.1, 0.0, 0.0).to_raw();
        raw.generator[0].cost = None;
        assert_eq!(NetworkCase::from_raw(&raw), Err(CaseError::MissingCost { gen: 1, bus: 1 }));
    }

    #[test]
    fn concave_cost_rejected() {
        let mut raw = two_bus(0.01, 0.1, 0.0, 0.0).to_raw();
        raw.generator[0].cost = Some(RawCost { c2: -1.0, c1: 0.0, c0: 0.0 });
        assert!(matches!(NetworkCase::from_raw(&raw), Err(CaseError::Unsupported(_))));
    }
}
