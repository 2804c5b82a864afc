//! Finite-difference stencils on the stratification grid.
//!
//! A univariate stencil with `l` distinct integer offsets `κ` and order `a`
//! carries weights `w` with `Σ w_j κ_j^i = a! δ_{ia}` for `i < l`, so that
//! `h^{-a} Σ w_j g(x + κ_j h)` approximates `g^{(a)}(x)` with error
//! `O(h^{l-a})`. Multivariate stencils are tensor products over the active
//! axes, consumed in ascending axis order: the first active axis gets a
//! window of `r` nodes, each later axis `r - |α'|` nodes where `α'` is the
//! part of `α` already consumed. Weights only depend on the offset pattern,
//! never on `k`, and are cached per `(α, window starts)`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::lattice::{CentreIndex, GridSpec};

/// Per-axis derivative orders `α`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|α|`
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    /// `|α|_0`
    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&a| a != 0).count()
    }

    /// `α!`
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&a| factorial(a)).product()
    }

    /// `u^α`
    pub fn monomial(&self, u: &[f64]) -> f64 {
        self.0.iter().zip(u).map(|(&a, &x)| x.powi(a as i32)).product()
    }

    /// All multi-indices of dimension `dim` and total order `order`, in
    /// lexicographically decreasing order (`(order,0,..)` first).
    pub fn all_of_order(dim: usize, order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut cur = vec![0usize; dim];
        fn rec(axis: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
            if axis + 1 == cur.len() {
                cur[axis] = left;
                out.push(MultiIndex(cur.clone()));
                return;
            }
            for a in (0..=left).rev() {
                cur[axis] = a;
                rec(axis + 1, left - a, cur, out);
            }
            cur[axis] = 0;
        }
        if dim > 0 {
            rec(0, order, &mut cur, &mut out);
        }
        out
    }
}

impl From<Vec<usize>> for MultiIndex {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateStencil {
    pub offsets: Vec<i64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl UnivariateStencil {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// `Σ w_j κ_j^i`
    pub fn moment(&self, i: u32) -> f64 {
        self.offsets.iter().zip(&self.weights).map(|(&k, &w)| w * (k as f64).powi(i as i32)).sum()
    }

    /// `Σ |w_j κ_j^l|`, the constant of the truncation-error bound.
    pub fn error_sum(&self, l: u32) -> f64 {
        self.offsets.iter().zip(&self.weights).map(|(&k, &w)| (w * (k as f64).powi(l as i32)).abs()).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Weights of the order-`a` finite difference on the distinct integer nodes
/// `kappa`, i.e. the solution of the transposed Vandermonde system
/// `A_κ w = a! e_{a+1}`.
///
/// Solved through the Lagrange basis: `w_j` is `a!` times the coefficient of
/// `x^a` in `Π_{m≠j} (x - κ_m) / (κ_j - κ_m)`. With integer nodes the
/// numerator and denominator are exact integers, so each weight is the
/// correctly rounded value of an exact rational.
pub fn univariate_weights(kappa: &[i64], a: usize) -> Result<UnivariateStencil> {
    let l = kappa.len();
    if a == 0 || a >= l {
        return Err(Error::Order { order: a, nodes: l, limit: l.saturating_sub(1) });
    }
    for i in 0..l {
        for j in 0..i {
            if kappa[i] == kappa[j] {
                return Err(Error::InvalidStencil(format!("duplicate node {} in {:?}", kappa[i], kappa)));
            }
        }
    }
    let overflow = || Error::InvalidStencil(format!("node magnitudes too large in {kappa:?}"));
    let mut a_fact: i128 = 1;
    for i in 2..=a as i128 {
        a_fact = a_fact.checked_mul(i).ok_or_else(overflow)?;
    }
    let mut weights = Vec::with_capacity(l);
    for j in 0..l {
        // coefficients of Π_{m≠j} (x - κ_m), lowest degree first
        let mut poly: Vec<i128> = vec![1];
        let mut denom: i128 = 1;
        for (m, &km) in kappa.iter().enumerate() {
            if m == j {
                continue;
            }
            let km = km as i128;
            let mut next = vec![0i128; poly.len() + 1];
            for (d, &c) in poly.iter().enumerate() {
                next[d + 1] = next[d + 1].checked_add(c).ok_or_else(overflow)?;
                next[d] = next[d].checked_sub(c.checked_mul(km).ok_or_else(overflow)?).ok_or_else(overflow)?;
            }
            poly = next;
            denom = denom.checked_mul(kappa[j] as i128 - km).ok_or_else(overflow)?;
        }
        let mut num = poly[a].checked_mul(a_fact).ok_or_else(overflow)?;
        let g = gcd(num, denom).max(1);
        num /= g;
        let den = denom / g;
        weights.push(num as f64 / den as f64);
    }
    Ok(UnivariateStencil { offsets: kappa.to_vec(), weights, order: a })
}

/// Block tiling used by block-local stencils: every axis is cut into
/// `⌈k/r⌉` runs of `r` consecutive indices, the last run anchored at the
/// upper boundary (overlapping its neighbour when `r ∤ k`). A centre in an
/// overlap belongs to the lower-indexed block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockAssignment {
    dim: usize,
    k: usize,
    side: usize,
}

pub fn block_partition(grid: &GridSpec, r: usize) -> Result<BlockAssignment> {
    if grid.margin() != 0 {
        return Err(Error::Precondition("block partition requires a grid without margin".into()));
    }
    if r == 0 {
        return Err(Error::Precondition("block side must be positive".into()));
    }
    if grid.k() < r {
        return Err(Error::Resolution { k: grid.k(), needed: r });
    }
    Ok(BlockAssignment { dim: grid.dim(), k: grid.k(), side: r })
}

impl BlockAssignment {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn blocks_per_axis(&self) -> usize {
        self.k.div_ceil(self.side)
    }

    /// `p_{r,k} = ⌈k/r⌉^s`
    pub fn num_blocks(&self) -> usize {
        self.blocks_per_axis().pow(self.dim as u32)
    }

    pub fn axis_block(&self, j: i64) -> usize {
        ((j.max(0) as usize) / self.side).min(self.blocks_per_axis() - 1)
    }

    /// Inclusive index range of block `b` along one axis.
    pub fn axis_range(&self, b: usize) -> (i64, i64) {
        let lo = if b + 1 == self.blocks_per_axis() { self.k - self.side } else { b * self.side };
        (lo as i64, (lo + self.side - 1) as i64)
    }

    /// Flattened block id `q(c)`.
    pub fn block_of(&self, idx: &CentreIndex) -> usize {
        let nb = self.blocks_per_axis();
        idx.0.iter().fold(0, |acc, &j| acc * nb + self.axis_block(j))
    }

    /// Centres of block `q`, lexicographic.
    pub fn members(&self, q: usize) -> Vec<CentreIndex> {
        let nb = self.blocks_per_axis();
        let mut ranges = vec![(0i64, 0i64); self.dim];
        let mut rest = q;
        for slot in ranges.iter_mut().rev() {
            *slot = self.axis_range(rest % nb);
            rest /= nb;
        }
        let mut out = vec![Vec::new()];
        for (lo, hi) in ranges {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<i64>| {
                    (lo..=hi).map(move |j| {
                        let mut v = prefix.clone();
                        v.push(j);
                        v
                    })
                })
                .collect();
        }
        out.into_iter().map(CentreIndex).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StencilMode {
    Free,
    Block(BlockAssignment),
}

/// Offsets of a `window`-node stencil along `axis` around `centre`: as
/// centred as possible (ties towards negative offsets), shifted the minimum
/// amount needed to stay inside the grid, or inside the centre's block.
pub fn select_axis_nodes(
    centre: &CentreIndex,
    axis: usize,
    grid: &GridSpec,
    window: usize,
    mode: &StencilMode,
) -> Result<Vec<i64>> {
    let start = window_start(centre.0[axis], grid, window, mode)?;
    Ok((0..window as i64).map(|i| start + i).collect())
}

fn window_start(j: i64, grid: &GridSpec, window: usize, mode: &StencilMode) -> Result<i64> {
    if window < 2 {
        return Err(Error::InvalidStencil(format!("window of {window} nodes cannot differentiate")));
    }
    let (lo, hi) = match mode {
        StencilMode::Free => {
            if grid.side() < window {
                return Err(Error::Resolution { k: grid.k(), needed: window });
            }
            grid.index_range()
        }
        StencilMode::Block(blocks) => {
            if blocks.side() < window {
                return Err(Error::Resolution { k: blocks.side(), needed: window });
            }
            blocks.axis_range(blocks.axis_block(j))
        }
    };
    let w = window as i64;
    let mut start = -(w / 2);
    if j + start < lo {
        start = lo - j;
    }
    if j + start + w - 1 > hi {
        start = hi - (w - 1) - j;
    }
    Ok(start)
}

/// Tensor-product stencil relative to its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilPattern {
    dim: usize,
    /// Node offsets, `dim` entries per node.
    offsets: Vec<i64>,
    weights: Vec<f64>,
}

impl StencilPattern {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn offset(&self, node: usize) -> &[i64] {
        &self.offsets[node * self.dim..(node + 1) * self.dim]
    }

    /// `Σ w_q values[c + offset_q]` over a dense array in grid order.
    pub(crate) fn weighted_sum(&self, grid: &GridSpec, centre: &[i64], values: &[f64], scratch: &mut [i64]) -> f64 {
        let mut acc = 0.0;
        for (q, &w) in self.weights.iter().enumerate() {
            for ((s, &c), &o) in scratch.iter_mut().zip(centre).zip(self.offset(q)) {
                *s = c + o;
            }
            acc += w * values[grid.flat_index_unchecked(scratch)];
        }
        acc
    }
}

/// Lookup of node values by centre index.
pub trait NodeValues {
    fn value(&self, idx: &CentreIndex) -> Option<f64>;
}

impl NodeValues for HashMap<CentreIndex, f64> {
    fn value(&self, idx: &CentreIndex) -> Option<f64> {
        self.get(idx).copied()
    }
}

/// `f(c)` for every centre of a grid, in lexicographic order.
#[derive(Debug, Clone)]
pub struct GridValues {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl GridValues {
    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = grid.centres().map(|c| f(&c)).collect();
        Self { grid, values }
    }
}

impl NodeValues for GridValues {
    fn value(&self, idx: &CentreIndex) -> Option<f64> {
        self.grid.flat_index(idx).map(|i| self.values[i])
    }
}

/// A stencil anchored at a particular centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub centre: CentreIndex,
    pub nodes: Vec<CentreIndex>,
    pub weights: Vec<f64>,
    pub alpha: MultiIndex,
    /// `k^{|α|}`
    pub scale: f64,
}

impl Stencil {
    /// `k^{|α|} Σ w_j f(c^{(j)})`
    pub fn apply(&self, values: &impl NodeValues) -> Result<f64> {
        let mut acc = 0.0;
        for (node, &w) in self.nodes.iter().zip(&self.weights) {
            let v = values.value(node).ok_or_else(|| Error::IncompleteEvaluation { node: node.0.clone() })?;
            acc += w * v;
        }
        Ok(self.scale * acc)
    }

    pub fn max_node_distance(&self) -> i64 {
        self.nodes
            .iter()
            .flat_map(|n| n.0.iter().zip(&self.centre.0).map(|(a, b)| (a - b).abs()))
            .max()
            .unwrap_or(0)
    }
}

type PatternKey = (Vec<usize>, Vec<i64>);

/// Builds stencils of accuracy order `r` on one grid, sharing weights
/// between centres with the same boundary pattern.
///
/// `window_order` (≥ `r`) sets the window sizes; it equals `r` unless a
/// caller asks for wider windows. Safe to share between threads.
#[derive(Debug)]
pub struct StencilBuilder {
    grid: GridSpec,
    r: usize,
    window_order: usize,
    mode: StencilMode,
    cache: RwLock<HashMap<PatternKey, Arc<StencilPattern>>>,
}

impl StencilBuilder {
    pub fn new(grid: GridSpec, r: usize, mode: StencilMode) -> Result<Self> {
        Self::with_window_order(grid, r, r, mode)
    }

    pub fn with_window_order(grid: GridSpec, r: usize, window_order: usize, mode: StencilMode) -> Result<Self> {
        if r == 0 || window_order < r {
            return Err(Error::Precondition(format!("invalid stencil orders r={r}, window={window_order}")));
        }
        match mode {
            StencilMode::Free => {
                if r >= 2 && grid.side() < window_order {
                    return Err(Error::Resolution { k: grid.k(), needed: window_order });
                }
            }
            StencilMode::Block(b) => {
                if b.side() < window_order {
                    return Err(Error::Resolution { k: b.side(), needed: window_order });
                }
            }
        }
        Ok(Self { grid, r, window_order, mode, cache: RwLock::new(HashMap::new()) })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn window_order(&self) -> usize {
        self.window_order
    }

    pub fn mode(&self) -> &StencilMode {
        &self.mode
    }

    /// Window length for each active axis of `alpha`, ascending axis order.
    pub fn windows(&self, alpha: &MultiIndex) -> Vec<(usize, usize)> {
        let mut consumed = 0;
        let mut out = Vec::new();
        for (axis, &a) in alpha.0.iter().enumerate() {
            if a > 0 {
                out.push((axis, self.window_order - consumed));
                consumed += a;
            }
        }
        out
    }

    pub(crate) fn pattern(&self, alpha: &MultiIndex, centre: &[i64]) -> Result<Arc<StencilPattern>> {
        if alpha.dim() != self.grid.dim() {
            return Err(Error::Precondition("multi-index dimension does not match grid".into()));
        }
        if alpha.order() >= self.r {
            return Err(Error::Order { order: alpha.order(), nodes: self.window_order, limit: self.r - 1 });
        }
        let windows = self.windows(alpha);
        let mut starts = Vec::with_capacity(windows.len());
        for &(axis, w) in &windows {
            starts.push(window_start(centre[axis], &self.grid, w, &self.mode)?);
        }
        let key = (alpha.0.clone(), starts);
        if let Some(p) = self.cache.read().expect("stencil cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let pattern = Arc::new(self.build_pattern(alpha, &windows, &key.1)?);
        let mut cache = self.cache.write().expect("stencil cache poisoned");
        Ok(cache.entry(key).or_insert(pattern).clone())
    }

    fn build_pattern(&self, alpha: &MultiIndex, windows: &[(usize, usize)], starts: &[i64]) -> Result<StencilPattern> {
        let dim = self.grid.dim();
        let mut offsets = vec![0i64; dim];
        let mut weights = vec![1.0];
        for (&(axis, w), &start) in windows.iter().zip(starts) {
            let kappa: Vec<i64> = (0..w as i64).map(|i| start + i).collect();
            let uni = univariate_weights(&kappa, alpha.0[axis])?;
            let n = weights.len();
            let mut next_off = Vec::with_capacity(n * w * dim);
            let mut next_w = Vec::with_capacity(n * w);
            for q in 0..n {
                for (&kj, &wj) in uni.offsets.iter().zip(&uni.weights) {
                    let base = &offsets[q * dim..(q + 1) * dim];
                    next_off.extend_from_slice(base);
                    let last = next_off.len() - dim + axis;
                    next_off[last] = kj;
                    next_w.push(weights[q] * wj);
                }
            }
            offsets = next_off;
            weights = next_w;
        }
        Ok(StencilPattern { dim, offsets, weights })
    }

    pub fn stencil(&self, alpha: &MultiIndex, centre: &CentreIndex) -> Result<Stencil> {
        if !self.grid.contains(centre) {
            return Err(Error::Precondition(format!("centre {:?} not on grid", centre.0)));
        }
        let pattern = self.pattern(alpha, &centre.0)?;
        let nodes = (0..pattern.len())
            .map(|q| CentreIndex(centre.0.iter().zip(pattern.offset(q)).map(|(c, o)| c + o).collect()))
            .collect();
        Ok(Stencil {
            centre: centre.clone(),
            nodes,
            weights: pattern.weights.clone(),
            alpha: alpha.clone(),
            scale: (self.grid.k() as f64).powi(alpha.order() as i32),
        })
    }

    pub fn cached_patterns(&self) -> usize {
        self.cache.read().expect("stencil cache poisoned").len()
    }
}

/// One-off construction of `D̂^α_k` at `centre`.
pub fn multivariate_stencil(
    alpha: &MultiIndex,
    centre: &CentreIndex,
    grid: &GridSpec,
    r: usize,
    mode: StencilMode,
) -> Result<Stencil> {
    StencilBuilder::new(*grid, r, mode)?.stencil(alpha, centre)
}

/// Which offset patterns the stencil-error constant ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstantFamily {
    /// Windows of consecutive offsets containing 0, the patterns the
    /// builder actually generates.
    #[default]
    Used,
    /// Every set of distinct offsets in `{-(l-1), …, l-1}`.
    Full,
}

fn family_windows(nodes: usize, family: ConstantFamily) -> Vec<Vec<i64>> {
    let l = nodes as i64;
    match family {
        ConstantFamily::Used => (-(l - 1)..=0).map(|s| (s..s + l).collect()).collect(),
        ConstantFamily::Full => {
            let pool: Vec<i64> = (-(l - 1)..=l - 1).collect();
            let mut out = Vec::new();
            let mut cur = Vec::with_capacity(nodes);
            fn rec(pool: &[i64], from: usize, need: usize, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
                if cur.len() == need {
                    out.push(cur.clone());
                    return;
                }
                for i in from..pool.len() {
                    if pool.len() - i < need - cur.len() {
                        break;
                    }
                    cur.push(pool[i]);
                    rec(pool, i + 1, need, cur, out);
                    cur.pop();
                }
            }
            rec(&pool, 0, nodes, &mut cur, &mut out);
            out
        }
    }
}

/// `(C̃, S)`: maxima of `Σ|w_j κ_j^smooth|` and `Σ|w_j|` over the family of
/// `nodes`-point stencils with orders `1..smooth`.
fn family_constants(nodes: usize, smooth: usize, family: ConstantFamily) -> (f64, f64) {
    let mut c_tilde = 0.0f64;
    let mut s_abs = 0.0f64;
    for kappa in family_windows(nodes, family) {
        for a in 1..smooth.min(nodes) {
            let st = univariate_weights(&kappa, a).expect("family stencils are valid");
            c_tilde = c_tilde.max(st.error_sum(smooth as u32));
            s_abs = s_abs.max(st.abs_sum());
        }
    }
    (c_tilde, s_abs)
}

/// The constant `Ĉ_{s,r}` of the almost-sure error bound
/// `|Î_{r,k}(f) − I(f)| ≤ Ĉ_{s,r} ‖f‖_r k^{-r}` for stencils of order `r`.
pub fn error_constant(s: usize, r: usize) -> f64 {
    error_constant_for(s, r, r, ConstantFamily::Used)
}

/// [`error_constant`] for stencils whose windows are sized for
/// `stencil_order ≥ r` (wider windows than the smoothness).
pub fn error_constant_for(s: usize, r: usize, stencil_order: usize, family: ConstantFamily) -> f64 {
    assert!(s >= 1 && r >= 1 && stencil_order >= r);
    let mut memo: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    let mut consts = |nodes: usize, smooth: usize| *memo.entry((nodes, smooth)).or_insert_with(|| family_constants(nodes, smooth, family));

    // Worst derivative-error constant over every α with 1 ≤ |α| ≤ r-1.
    let mut c_bar = 0.0f64;
    for order in 1..r {
        for alpha in MultiIndex::all_of_order(s, order) {
            let mut consumed = 0usize;
            let mut c = 0.0f64;
            let mut first = true;
            for &a in alpha.0.iter().filter(|&&a| a > 0) {
                let (ct, sa) = consts(stencil_order - consumed, r - consumed);
                c = if first { ct } else { ct.max(sa) * (1.0 + c) };
                first = false;
                consumed += a;
            }
            c_bar = c_bar.max(c);
        }
    }
    let inv_fact_sum = |l: usize| (s as f64).powi(l as i32) / factorial(l);
    let lower: f64 = (1..r).map(inv_fact_sum).sum();
    2.0 * c_bar * lower + 2f64.powi(1 - r as i32) * inv_fact_sum(r)
}
