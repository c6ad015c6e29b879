use nalgebra::DMatrix;
use num_complex::Complex64;

/// Homogeneous quadratic `q(x) = Σ w·x_p·x_q` stored as merged bilinear
/// terms with `p <= q`.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct QuadForm {
    terms: Vec<(usize, usize, f64)>,
    /// Sorted variables the form depends on.
    vars: Vec<usize>,
}

impl QuadForm {
    pub fn add(&mut self, p: usize, q: usize, w: f64) {
        if w != 0.0 {
            self.terms.push((p.min(q), p.max(q), w));
        }
    }

    /// Adds `Re(c·V_a·conj(V_b))` to `re` and `Im(c·V_a·conj(V_b))` to `im`,
    /// with `V_k = x[k] + j·x[n + k]`.
    pub fn add_complex_product(re: &mut QuadForm, im: &mut QuadForm, c: Complex64, a: usize, b: usize, n: usize) {
        let (ea, fa, eb, fb) = (a, n + a, b, n + b);
        // V_a conj(V_b) = (ea·eb + fa·fb) + j(fa·eb − ea·fb)
        re.add(ea, eb, c.re);
        re.add(fa, fb, c.re);
        re.add(fa, eb, -c.im);
        re.add(ea, fb, c.im);
        im.add(ea, eb, c.im);
        im.add(fa, fb, c.im);
        im.add(fa, eb, c.re);
        im.add(ea, fb, -c.re);
    }

    /// Merges duplicate terms and drops exact cancellations.
    pub fn finish(mut self) -> QuadForm {
        self.terms.sort_by_key(|t| (t.0, t.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(self.terms.len());
        for (p, q, w) in self.terms {
            match merged.last_mut() {
                Some(last) if last.0 == p && last.1 == q => last.2 += w,
                _ => merged.push((p, q, w)),
            }
        }
        merged.retain(|t| t.2 != 0.0);
        let mut vars: Vec<usize> = merged.iter().flat_map(|t| [t.0, t.1]).collect();
        vars.sort_unstable();
        vars.dedup();
        QuadForm { terms: merged, vars }
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(p, q, w)| w * x[p] * x[q]).sum()
    }

    /// Gradient entries aligned with [`QuadForm::vars`].
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.vars.len()];
        let pos = |v: usize| self.vars.binary_search(&v).expect("term variable is indexed");
        for &(p, q, w) in &self.terms {
            if p == q {
                g[pos(p)] += 2.0 * w * x[p];
            } else {
                g[pos(p)] += w * x[q];
                g[pos(q)] += w * x[p];
            }
        }
        g
    }

    /// Adds `scale·∇²q` into a dense Hessian.
    pub fn add_hessian(&self, scale: f64, h: &mut DMatrix<f64>) {
        if scale == 0.0 {
            return;
        }
        for &(p, q, w) in &self.terms {
            if p == q {
                h[(p, p)] += 2.0 * scale * w;
            } else {
                h[(p, q)] += scale * w;
                h[(q, p)] += scale * w;
            }
        }
    }
}
