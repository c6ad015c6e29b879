use nalgebra::DMatrix;
use num_complex::Complex64;

use super::NetworkCase;

/// Two-port admittances of one branch, with `I_from = ff·V_from + ft·V_to`
/// and `I_to = tf·V_from + tt·V_to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub ff: Complex64,
    pub ft: Complex64,
    pub tf: Complex64,
    pub tt: Complex64,
}

/// Dense bus admittance matrix plus per-branch two-port terms.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub entries: DMatrix<Complex64>,
    pub branches: Vec<BranchAdmittance>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Bus current injections `Y·V`.
    pub fn currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim();
        (0..n).map(|i| v.iter().enumerate().map(|(k, vk)| self.entries[(i, k)] * vk).sum()).collect()
    }
}

/// Assembles Y-bus using the standard pi model with an ideal
/// phase-shifting transformer on the from side.
pub fn build_admittance(case: &NetworkCase) -> AdmittanceMatrix {
    let n = case.n_bus();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let mut branches = Vec::with_capacity(case.n_branch());
    for br in &case.branches {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.series_r, br.series_x);
        let half_b = Complex64::new(0.0, br.charging_b / 2.0);
        let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift);
        let tt = ys + half_b;
        let ff = tt / (br.tap_ratio * br.tap_ratio);
        let ft = -ys / tap.conj();
        let tf = -ys / tap;
        y[(br.from, br.from)] += ff;
        y[(br.from, br.to)] += ft;
        y[(br.to, br.from)] += tf;
        y[(br.to, br.to)] += tt;
        branches.push(BranchAdmittance { ff, ft, tf, tt });
    }
    for (i, bus) in case.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(bus.shunt_g, bus.shunt_b);
    }
    AdmittanceMatrix { entries: y, branches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::two_bus;
    use crate::netmodel::NetworkCase;

    #[test]
    fn two_bus_textbook() {
        let case = two_bus(0.02, 0.2, 0.0, 0.0);
        let ym = build_admittance(&case);
        let y = Complex64::new(1.0, 0.0) / Complex64::new(0.02, 0.2);
        assert!((ym.entries[(0, 0)] - y).norm() < 1e-12);
        assert!((ym.entries[(0, 1)] + y).norm() < 1e-12);
        assert!((ym.entries[(1, 0)] + y).norm() < 1e-12);
        assert!((ym.entries[(1, 1)] - y).norm() < 1e-12);
    }

    #[test]
    fn tap_model() {
        let mut raw = two_bus(0.02, 0.2, 0.0, 0.0).to_raw();
        raw.branch[0].tap = 0.95;
        let case = NetworkCase::from_raw(&raw).unwrap();
        let ym = build_admittance(&case);
        let y = Complex64::new(1.0, 0.0) / Complex64::new(0.02, 0.2);
        assert!((ym.entries[(0, 0)] - y / (0.95 * 0.95)).norm() < 1e-12);
        assert!((ym.entries[(0, 1)] + y / 0.95).norm() < 1e-12);
        assert!((ym.entries[(1, 0)] + y / 0.95).norm() < 1e-12);
        assert!((ym.entries[(1, 1)] - y).norm() < 1e-12);
    }

    #[test]
    fn rows_sum_to_zero_without_shunts() {
        let case = two_bus(0.01, 0.05, 10.0, 3.0);
        let ym = build_admittance(&case);
        for i in 0..2 {
            let s: Complex64 = (0..2).map(|k| ym.entries[(i, k)]).sum();
            assert!(s.norm() < 1e-12);
        }
    }

    #[test]
    fn charging_and_shunt_on_diagonal() {
        let mut raw = two_bus(0.02, 0.2, 0.0, 0.0).to_raw();
        raw.branch[0].b = 0.1;
        raw.bus[1].bs_mvar = 19.0;
        let case = NetworkCase::from_raw(&raw).unwrap();
        let ym = build_admittance(&case);
        let y = Complex64::new(1.0, 0.0) / Complex64::new(0.02, 0.2);
        let expected = y + Complex64::new(0.0, 0.05) + Complex64::new(0.0, 0.19);
        assert!((ym.entries[(1, 1)] - expected).norm() < 1e-12);
    }
}
