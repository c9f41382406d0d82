//! Truncated multivariate Taylor arithmetic.
//!
//! A jet stores the normalized Taylor coefficients `c_α = ∂^α f / α!` of a
//! function at a point, for every multi-index `α` in a downward-closed
//! [`JetSet`]. Products and compositions are truncated polynomial
//! arithmetic, so pushing a jet of the coordinates through a network yields
//! the exact partial derivatives of the network output for every `α` in the
//! set. This is how the training path gets `u_t`, `u_xx`, `u_xy`, ... for a
//! whole batch of points with a handful of matrix products, instead of one
//! derived tape per point.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array2, ArrayView2};

/// A downward-closed set of multi-indices over `nvars` coordinates. Index 0
/// is always the zero multi-index (the function value).
#[derive(Debug, Clone, PartialEq)]
pub struct JetSet {
    nvars: usize,
    indices: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    order: usize,
    factorials: Vec<f64>,
    products: Vec<Vec<(usize, usize)>>,
    products_nz: Vec<Vec<(usize, usize)>>,
}

impl JetSet {
    /// Smallest downward-closed set containing every multi-index in
    /// `required` (and the zero index).
    pub fn closure<I: IntoIterator<Item = Vec<u8>>>(nvars: usize, required: I) -> JetSet {
        let mut set: BTreeSet<Vec<u8>> = BTreeSet::new();
        set.insert(vec![0; nvars]);
        for m in required {
            assert_eq!(m.len(), nvars, "multi-index width mismatch");
            let mut stack = vec![m];
            while let Some(m) = stack.pop() {
                if !set.insert(m.clone()) {
                    continue;
                }
                for i in 0..nvars {
                    if m[i] > 0 {
                        let mut lower = m.clone();
                        lower[i] -= 1;
                        stack.push(lower);
                    }
                }
            }
        }
        let mut indices: Vec<Vec<u8>> = set.into_iter().collect();
        indices.sort_by(|a, b| total(a).cmp(&total(b)).then_with(|| b.cmp(a)));
        let lookup: HashMap<Vec<u8>, usize> = indices.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        let order = indices.iter().map(|m| total(m)).max().unwrap_or(0);
        let factorials =
            indices.iter().map(|m| m.iter().map(|&k| (1..=k as u32).product::<u32>() as f64).product()).collect();
        let mut products = vec![Vec::new(); indices.len()];
        let mut products_nz = vec![Vec::new(); indices.len()];
        for (a, ma) in indices.iter().enumerate() {
            for (b, mb) in indices.iter().enumerate() {
                let sum: Vec<u8> = ma.iter().zip(mb).map(|(x, y)| x + y).collect();
                if let Some(&g) = lookup.get(&sum) {
                    products[g].push((a, b));
                    if a != 0 && b != 0 {
                        products_nz[g].push((a, b));
                    }
                }
            }
        }
        JetSet { nvars, indices, lookup, order, factorials, products, products_nz }
    }

    /// Just the function value.
    pub fn value_only(nvars: usize) -> JetSet {
        JetSet::closure(nvars, std::iter::empty())
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Maximum total order.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn indices(&self) -> &[Vec<u8>] {
        &self.indices
    }

    pub fn index_of(&self, m: &[u8]) -> Option<usize> {
        self.lookup.get(m).copied()
    }

    /// Index of the first-order multi-index along coordinate `dir`.
    pub fn unit(&self, dir: usize) -> Option<usize> {
        let mut m = vec![0; self.nvars];
        m[dir] = 1;
        self.index_of(&m)
    }

    pub fn total_order(&self, i: usize) -> usize {
        total(&self.indices[i])
    }

    /// `α!` for the multi-index at position `i`.
    pub fn factorial(&self, i: usize) -> f64 {
        self.factorials[i]
    }

    /// Pairs `(α, β)` with `α + β` equal to the multi-index at `g`.
    pub fn product_pairs(&self, g: usize) -> &[(usize, usize)] {
        &self.products[g]
    }
}

fn total(m: &[u8]) -> usize {
    m.iter().map(|&k| k as usize).sum()
}

/// Derivatives `f, f', f'', ...` of tanh up to `order`, as polynomials in
/// `y = tanh(z)` (lowest degree first).
fn tanh_derivative_polys(order: usize) -> Vec<Vec<f64>> {
    let mut polys = vec![vec![0.0, 1.0]];
    for k in 0..order {
        let p = &polys[k];
        // d/dz p(y) = p'(y) (1 - y²)
        let dp: Vec<f64> = (1..p.len()).map(|i| p[i] * i as f64).collect();
        let mut next = vec![0.0; dp.len() + 2];
        for (i, c) in dp.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= c;
        }
        polys.push(next);
    }
    polys
}

fn horner(p: &[f64], y: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * y + c)
}

/// Jet of a scalar function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet<'s> {
    set: &'s JetSet,
    coeffs: Vec<f64>,
}

impl<'s> Jet<'s> {
    pub fn constant(set: &'s JetSet, value: f64) -> Self {
        let mut coeffs = vec![0.0; set.len()];
        coeffs[0] = value;
        Jet { set, coeffs }
    }

    /// The coordinate `dir` itself, with value `value`.
    pub fn variable(set: &'s JetSet, dir: usize, value: f64) -> Self {
        let mut j = Jet::constant(set, value);
        if let Some(i) = set.unit(dir) {
            j.coeffs[i] = 1.0;
        }
        j
    }

    /// Builds a jet from raw partial derivatives `∂^α f` (not normalized).
    pub fn from_derivatives(set: &'s JetSet, derivs: &[f64]) -> Self {
        let coeffs = derivs.iter().enumerate().map(|(i, d)| d / set.factorial(i)).collect();
        Jet { set, coeffs }
    }

    pub fn set(&self) -> &'s JetSet {
        self.set
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// Partial derivative `∂^α` for the multi-index at position `i`.
    pub fn derivative(&self, i: usize) -> f64 {
        self.coeffs[i] * self.set.factorial(i)
    }

    pub fn add(&self, o: &Jet<'s>) -> Jet<'s> {
        let coeffs = self.coeffs.iter().zip(&o.coeffs).map(|(a, b)| a + b).collect();
        Jet { set: self.set, coeffs }
    }

    pub fn sub(&self, o: &Jet<'s>) -> Jet<'s> {
        let coeffs = self.coeffs.iter().zip(&o.coeffs).map(|(a, b)| a - b).collect();
        Jet { set: self.set, coeffs }
    }

    pub fn scale(&self, c: f64) -> Jet<'s> {
        Jet { set: self.set, coeffs: self.coeffs.iter().map(|a| a * c).collect() }
    }

    pub fn add_const(&self, c: f64) -> Jet<'s> {
        let mut j = self.clone();
        j.coeffs[0] += c;
        j
    }

    pub fn mul(&self, o: &Jet<'s>) -> Jet<'s> {
        let coeffs = (0..self.set.len())
            .map(|g| self.set.products[g].iter().map(|&(a, b)| self.coeffs[a] * o.coeffs[b]).sum())
            .collect();
        Jet { set: self.set, coeffs }
    }

    /// `f(self)` given `derivs[k] = f^(k)(self.value())` for
    /// `k = 0..=order`.
    pub fn compose(&self, derivs: &[f64]) -> Jet<'s> {
        let set = self.set;
        let mut delta = self.clone();
        delta.coeffs[0] = 0.0;
        let mut out = Jet::constant(set, derivs[0]);
        let mut power = Jet::constant(set, 1.0);
        let mut fact = 1.0;
        for (k, d) in derivs.iter().enumerate().take(set.order + 1).skip(1) {
            power = power.mul(&delta);
            fact *= k as f64;
            for (o, p) in out.coeffs.iter_mut().zip(&power.coeffs) {
                *o += d / fact * p;
            }
        }
        out
    }

    pub fn sin(&self) -> Jet<'s> {
        let v = self.value();
        let d: Vec<f64> = (0..=self.set.order).map(|k| (v + k as f64 * std::f64::consts::FRAC_PI_2).sin()).collect();
        self.compose(&d)
    }

    pub fn cos(&self) -> Jet<'s> {
        let v = self.value();
        let d: Vec<f64> = (0..=self.set.order).map(|k| (v + k as f64 * std::f64::consts::FRAC_PI_2).cos()).collect();
        self.compose(&d)
    }

    pub fn tanh(&self) -> Jet<'s> {
        let y = self.value().tanh();
        let d: Vec<f64> = tanh_derivative_polys(self.set.order).iter().map(|p| horner(p, y)).collect();
        self.compose(&d)
    }

    pub fn exp(&self) -> Jet<'s> {
        let e = self.value().exp();
        self.compose(&vec![e; self.set.order + 1])
    }

    /// Natural logarithm; NaN coefficients for non-positive values.
    pub fn ln(&self) -> Jet<'s> {
        let v = self.value();
        let mut d = vec![v.ln()];
        let mut c = 1.0;
        for k in 1..=self.set.order {
            d.push(c / v.powi(k as i32));
            c *= -(k as f64);
        }
        self.compose(&d)
    }

    /// `self^p` for a real exponent `p`.
    pub fn powf(&self, p: f64) -> Jet<'s> {
        let v = self.value();
        let mut d = Vec::with_capacity(self.set.order + 1);
        let mut c = 1.0;
        for k in 0..=self.set.order {
            d.push(c * v.powf(p - k as f64));
            c *= p - k as f64;
        }
        self.compose(&d)
    }

    pub fn recip(&self) -> Jet<'s> {
        self.powf(-1.0)
    }

    pub fn sqrt(&self) -> Jet<'s> {
        self.powf(0.5)
    }

    pub fn tan(&self) -> Jet<'s> {
        self.sin().mul(&self.cos().recip())
    }

    pub fn abs(&self) -> Jet<'s> {
        if self.value() < 0.0 {
            self.scale(-1.0)
        } else {
            self.clone()
        }
    }

    pub fn powi(&self, n: i32) -> Jet<'s> {
        let base = if n < 0 { self.recip() } else { self.clone() };
        let mut out = Jet::constant(self.set, 1.0);
        for _ in 0..n.unsigned_abs() {
            out = out.mul(&base);
        }
        out
    }
}

/// Jets of a `rows × width` matrix of functions, stored as `set.len()`
/// vertically stacked blocks: block `α` holds the `α` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct JetBatch {
    pub rows: usize,
    pub data: Array2<f64>,
}

impl JetBatch {
    pub fn zeros(set: &JetSet, rows: usize, width: usize) -> Self {
        JetBatch { rows, data: Array2::zeros((set.len() * rows, width)) }
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn block(&self, a: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![a * self.rows..(a + 1) * self.rows, ..])
    }

    fn flat_block(&self, a: usize) -> &[f64] {
        let n = self.rows * self.data.ncols();
        &self.data.as_slice().expect("standard layout")[a * n..(a + 1) * n]
    }

    fn flat_block_mut(&mut self, a: usize) -> &mut [f64] {
        let n = self.rows * self.data.ncols();
        &mut self.data.as_slice_mut().expect("standard layout")[a * n..(a + 1) * n]
    }
}

/// Saved intermediates of [`tanh_forward`].
pub struct TanhCache {
    /// `g[k]` = tanh^(k)(z0)/k! for k = 0..=order+1.
    g: Vec<Vec<f64>>,
    /// `powers[k-1]` = δ^k, where δ is the input jet with its value zeroed.
    powers: Vec<JetBatch>,
}

/// `g[k][i] = tanh^(k)(z0[i]) / k!` for `k = 0..=top`.
fn tanh_coefficients(z0: &[f64], top: usize) -> Vec<Vec<f64>> {
    let n = z0.len();
    let mut g0 = vec![0.0; n];
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    for (((z, a), b), c) in z0.iter().zip(&mut g0).zip(&mut g1).zip(&mut g2) {
        let y = z.tanh();
        let d = 1.0 - y * y;
        *a = y;
        *b = d;
        *c = -y * d;
    }
    let mut g = vec![g0, g1, g2];
    if top > 2 {
        let polys = tanh_derivative_polys(top);
        let mut fact = 2.0;
        for (k, p) in polys.iter().enumerate().skip(3) {
            fact *= k as f64;
            let gk: Vec<f64> = g[0].iter().map(|&y| horner(p, y) / fact).collect();
            g.push(gk);
        }
    }
    g.truncate(top + 1);
    g
}

/// Elementwise tanh of a jet batch.
pub fn tanh_forward(set: &JetSet, z: JetBatch) -> (JetBatch, TanhCache) {
    let order = set.order();
    let rows = z.rows;
    let width = z.width();
    let n = rows * width;
    let g = tanh_coefficients(z.flat_block(0), (order + 1).max(2));
    let mut out = JetBatch::zeros(set, rows, width);
    out.flat_block_mut(0).copy_from_slice(&g[0]);
    let mut powers: Vec<JetBatch> = Vec::with_capacity(order);
    if order > 0 {
        let mut delta = z;
        delta.flat_block_mut(0).fill(0.0);
        powers.push(delta);
    }
    for k in 2..=order {
        let prev = &powers[k - 2];
        let delta = &powers[0];
        let mut next = JetBatch::zeros(set, rows, width);
        for gi in 0..set.len() {
            if set.total_order(gi) < k {
                continue;
            }
            let dst = next.flat_block_mut(gi);
            for &(a, b) in &set.products_nz[gi] {
                if set.total_order(a) < k - 1 {
                    continue;
                }
                let (pa, db) = (prev.flat_block(a), delta.flat_block(b));
                for i in 0..n {
                    dst[i] += pa[i] * db[i];
                }
            }
        }
        powers.push(next);
    }
    for gi in 1..set.len() {
        let top = set.total_order(gi).min(order);
        let dst = out.flat_block_mut(gi);
        let (g1, p1) = (&g[1], powers[0].flat_block(gi));
        for i in 0..n {
            dst[i] = g1[i] * p1[i];
        }
        for k in 2..=top {
            let (gk, pk) = (&g[k], powers[k - 1].flat_block(gi));
            for i in 0..n {
                dst[i] += gk[i] * pk[i];
            }
        }
    }
    (out, TanhCache { g, powers })
}

/// Gradient of [`tanh_forward`] with respect to its input jets.
pub fn tanh_backward(set: &JetSet, cache: &TanhCache, dy: JetBatch) -> JetBatch {
    let order = set.order();
    let n = dy.rows * dy.width();
    let g = &cache.g;
    let mut dz0 = vec![0.0; n];
    {
        let dy0 = dy.flat_block(0);
        for i in 0..n {
            dz0[i] = dy0[i] * g[1][i];
        }
        for gi in 1..set.len() {
            let dyg = dy.flat_block(gi);
            for k in 1..=set.total_order(gi).min(order) {
                let pk = cache.powers[k - 1].flat_block(gi);
                let gk1 = &g[k + 1];
                let c = (k + 1) as f64;
                for i in 0..n {
                    dz0[i] += dyg[i] * c * gk1[i] * pk[i];
                }
            }
        }
    }
    if order <= 1 {
        // δ enters linearly: ∂L/∂δ_γ = g1 · dy_γ.
        let mut dz = dy;
        dz.flat_block_mut(0).copy_from_slice(&dz0);
        let g1 = &g[1];
        for gi in 1..set.len() {
            for (d, gv) in dz.flat_block_mut(gi).iter_mut().zip(g1) {
                *d *= gv;
            }
        }
        return dz;
    }
    // dpowers[k-1] = ∂L/∂δ^k
    let mut dpowers: Vec<JetBatch> = (0..order).map(|_| JetBatch::zeros(set, dy.rows, dy.width())).collect();
    for (k, dp) in dpowers.iter_mut().enumerate() {
        let k = k + 1;
        for gi in 1..set.len() {
            if set.total_order(gi) < k {
                continue;
            }
            let (dyg, gk) = (dy.flat_block(gi), &g[k]);
            let dst = dp.flat_block_mut(gi);
            for i in 0..n {
                dst[i] = gk[i] * dyg[i];
            }
        }
    }
    let delta = &cache.powers[0];
    let mut dz = JetBatch::zeros(set, dy.rows, dy.width());
    for k in (2..=order).rev() {
        let (lower, upper) = dpowers.split_at_mut(k - 1);
        let dpk = &upper[0];
        let dprev = &mut lower[k - 2];
        let prev = &cache.powers[k - 2];
        for gi in 0..set.len() {
            if set.total_order(gi) < k {
                continue;
            }
            let dg = dpk.flat_block(gi);
            for &(a, b) in &set.products_nz[gi] {
                if set.total_order(a) < k - 1 {
                    continue;
                }
                {
                    let db = delta.flat_block(b);
                    let dst = dprev.flat_block_mut(a);
                    for i in 0..n {
                        dst[i] += dg[i] * db[i];
                    }
                }
                let pa = prev.flat_block(a);
                let dst = dz.flat_block_mut(b);
                for i in 0..n {
                    dst[i] += dg[i] * pa[i];
                }
            }
        }
    }
    dz.flat_block_mut(0).copy_from_slice(&dz0);
    for gi in 1..set.len() {
        let src = dpowers[0].flat_block(gi);
        for (d, v) in dz.flat_block_mut(gi).iter_mut().zip(src) {
            *d += v;
        }
    }
    dz
}

/// `out[f, (γ, m)] = Σ_{α+β=γ} mult[(α, m)] · x[f, (β, m)]` for jets laid
/// out as `F × (s·M)` matrices (column block γ holds coefficient γ for all
/// M points). `mult` has length `s·M`.
pub fn mul_point_jets(set: &JetSet, mult: &[f64], x: &Array2<f64>, points: usize) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for gi in 0..set.len() {
        for &(a, b) in &set.products[gi] {
            let m = &mult[a * points..(a + 1) * points];
            for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
                let xs = xrow.as_slice().expect("standard layout");
                let os = orow.as_slice_mut().expect("standard layout");
                for p in 0..points {
                    os[gi * points + p] += m[p] * xs[b * points + p];
                }
            }
        }
    }
    out
}

/// Adjoint of [`mul_point_jets`] with respect to `x`.
pub fn mul_point_jets_backward(set: &JetSet, mult: &[f64], dout: &Array2<f64>, points: usize) -> Array2<f64> {
    let mut dx = Array2::zeros(dout.raw_dim());
    for gi in 0..set.len() {
        for &(a, b) in &set.products[gi] {
            let m = &mult[a * points..(a + 1) * points];
            for (mut drow, orow) in dx.rows_mut().into_iter().zip(dout.rows()) {
                let os = orow.as_slice().expect("standard layout");
                let ds = drow.as_slice_mut().expect("standard layout");
                for p in 0..points {
                    ds[b * points + p] += m[p] * os[gi * points + p];
                }
            }
        }
    }
    dx
}
