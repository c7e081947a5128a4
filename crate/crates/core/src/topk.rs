//! Hard, index-sorted Top-K and its linear-program view.
//!
//! Selecting the `K` largest scores with indices reported in ascending
//! order is the integral optimum of
//!
//! ```text
//! max <Y, s 1ᵀ>   s.t.  Y ≥ 0,  1ᵀY = 1,  Y1 ≤ 1,
//!                       Σ_i i·Y[i,k] < Σ_j j·Y[j,k']  for k < k'
//! ```
//!
//! [`brute_force_topk`] enumerates that constraint set's integral points
//! and serves as the oracle for [`hard_topk_indices`].

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Strictly increasing indices into `[0, N)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortedIndices {
    indices: Vec<usize>,
    n: usize,
}

impl SortedIndices {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return arg_err(format!("indices {indices:?} are not strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i >= n) {
            return arg_err(format!("indices {indices:?} out of range for N={n}"));
        }
        Ok(Self { indices, n })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn universe(&self) -> usize {
        self.n
    }
}

/// `N×K` matrix whose columns are (soft) one-hot selectors.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorMatrix(Tensor);

impl IndicatorMatrix {
    /// Wraps `y` after checking the assignment constraints within `tol`.
    pub fn new(y: Tensor, tol: f32) -> Result<Self> {
        validate_indicator(&y, tol)?;
        Ok(Self(y))
    }

    pub(crate) fn from_tensor_unchecked(y: Tensor) -> Self {
        Self(y)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.0.shape()[1]
    }

    /// `Σ_i i·Y[i,k]` for every column.
    pub fn column_centers(&self) -> Vec<f64> {
        let (n, k) = (self.n(), self.k());
        let y = self.0.data();
        (0..k)
            .map(|c| (0..n).map(|i| i as f64 * y[i * k + c] as f64).sum())
            .collect()
    }

    /// Row index of each column's largest entry (first on ties).
    pub fn column_argmax(&self) -> Vec<usize> {
        let (n, k) = (self.n(), self.k());
        let y = self.0.data();
        (0..k)
            .map(|c| {
                (0..n).fold(0, |best, i| {
                    if y[i * k + c] > y[best * k + c] {
                        i
                    } else {
                        best
                    }
                })
            })
            .collect()
    }
}

/// Checks nonnegativity, unit column sums, row sums ≤ 1 and increasing
/// column centers, each within `tol`.
pub fn validate_indicator(y: &Tensor, tol: f32) -> Result<()> {
    let (n, k) = y.dims2()?;
    let d = y.data();
    if let Some(v) = d.iter().find(|v| !(**v >= -tol)) {
        return arg_err(format!("indicator entry {v} is negative or NaN"));
    }
    let tol = tol as f64;
    for c in 0..k {
        let s: f64 = (0..n).map(|i| d[i * k + c] as f64).sum();
        if (s - 1.0).abs() > tol {
            return arg_err(format!("column {c} sums to {s}"));
        }
    }
    for i in 0..n {
        let s: f64 = d[i * k..(i + 1) * k].iter().map(|&v| v as f64).sum();
        if s > 1.0 + tol {
            return arg_err(format!("row {i} sums to {s}"));
        }
    }
    let centers = IndicatorMatrix(y.clone()).column_centers();
    if let Some(w) = centers.windows(2).find(|w| w[0] >= w[1]) {
        return arg_err(format!("column centers not increasing: {} >= {}", w[0], w[1]));
    }
    Ok(())
}

fn check_scores(s: &[f32]) -> Result<()> {
    if s.is_empty() {
        return arg_err("score vector is empty");
    }
    if let Some(i) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score[{i}] = {}", s[i])));
    }
    Ok(())
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 1 || k > n {
        return arg_err(format!("K={k} must lie in [1, N={n}]"));
    }
    Ok(())
}

/// Above this size the selection uses a partial sort.
const FULL_SORT_LIMIT: usize = 4096;

/// Indices of the `k` largest scores, in ascending index order. Ties go to
/// the lower index.
pub fn hard_topk_indices(s: &[f32], k: usize) -> Result<SortedIndices> {
    check_scores(s)?;
    check_k(s.len(), k)?;
    let mut out = Vec::with_capacity(k);
    topk_into(s, k, &mut out);
    Ok(SortedIndices { indices: out, n: s.len() })
}

/// `a` ranks above `b`: larger score, or equal score and lower index.
#[inline]
fn outranks(s: &[f32], a: usize, b: usize) -> bool {
    s[a] > s[b] || (s[a] == s[b] && a < b)
}

/// Unchecked selection kernel shared with the perturbed operator. Scores
/// must be finite and `1 ≤ k ≤ s.len()`. Writes sorted indices to `out`.
pub(crate) fn topk_into(s: &[f32], k: usize, out: &mut Vec<usize>) {
    let n = s.len();
    out.clear();
    if k == n {
        out.extend(0..n);
        return;
    }
    if k <= 16 {
        // Insertion into a small buffer ordered by rank. Scanning indices in
        // ascending order means a later index only enters on a strict win.
        let buf = out;
        for i in 0..n {
            if buf.len() < k {
                let pos = buf.iter().position(|&j| outranks(s, i, j)).unwrap_or(buf.len());
                buf.insert(pos, i);
            } else if outranks(s, i, buf[k - 1]) {
                let pos = buf.iter().position(|&j| outranks(s, i, j)).unwrap();
                buf.pop();
                buf.insert(pos, i);
            }
        }
        buf.sort_unstable();
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| {
        if outranks(s, *a, *b) {
            std::cmp::Ordering::Less
        } else if a == b {
            std::cmp::Ordering::Equal
        } else {
            std::cmp::Ordering::Greater
        }
    };
    if n <= FULL_SORT_LIMIT {
        order.sort_unstable_by(cmp);
    } else {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    out.extend_from_slice(&order[..k]);
    out.sort_unstable();
}

/// One-hot `N×K` indicator whose column `k` selects `y[k]`.
pub fn indicator_from_indices(y: &SortedIndices, n: usize) -> Result<IndicatorMatrix> {
    if y.universe() != n {
        return arg_err(format!(
            "indices built for N={} used with N={n}",
            y.universe()
        ));
    }
    if y.is_empty() {
        return arg_err("indicator needs at least one column");
    }
    let k = y.len();
    let mut data = vec![0.0f32; n * k];
    for (col, &row) in y.as_slice().iter().enumerate() {
        data[row * k + col] = 1.0;
    }
    Ok(IndicatorMatrix(Tensor::new(vec![n, k], data)?))
}

/// `⟨Y, s·1ᵀ⟩ = Σ_k Σ_n Y[n,k]·s[n]`.
pub fn lp_objective(y: &IndicatorMatrix, s: &[f32]) -> Result<f64> {
    let (n, k) = (y.n(), y.k());
    if s.len() != n {
        return shape_err(format!("Y has {n} rows, scores have {}", s.len()));
    }
    let d = y.tensor().data();
    Ok((0..n)
        .map(|i| {
            let row: f64 = d[i * k..(i + 1) * k].iter().map(|&v| v as f64).sum();
            row * s[i] as f64
        })
        .sum())
}

pub const BRUTE_FORCE_MAX_N: usize = 16;

/// Exhaustive maximizer of [`lp_objective`] over integral points of the
/// constraint set, i.e. over strictly increasing `K`-subsets of `[0, N)`.
/// Ties resolve to the lexicographically smallest subset.
pub fn brute_force_topk(s: &[f32], k: usize) -> Result<IndicatorMatrix> {
    check_scores(s)?;
    let n = s.len();
    if n > BRUTE_FORCE_MAX_N {
        return arg_err(format!("brute force limited to N ≤ {BRUTE_FORCE_MAX_N}, got {n}"));
    }
    check_k(n, k)?;
    let mut combo: Vec<usize> = (0..k).collect();
    let mut best = combo.clone();
    let mut best_val = f64::NEG_INFINITY;
    loop {
        let y = indicator_from_indices(&SortedIndices { indices: combo.clone(), n }, n)?;
        let val = lp_objective(&y, s)?;
        // Lexicographic enumeration + strict improvement keeps the smallest tie.
        if val > best_val {
            best_val = val;
            best.clone_from(&combo);
        }
        // Advance to the next strictly increasing K-subset.
        let mut i = k;
        loop {
            if i == 0 {
                return indicator_from_indices(&SortedIndices { indices: best, n }, n);
            }
            i -= 1;
            if combo[i] < n - k + i {
                combo[i] += 1;
                for j in i + 1..k {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// `(s − min s) / (max s − min s + ε)`, order preserving, into `[0, 1)`.
pub fn normalize_scores(s: &[f32], eps: f32) -> Result<Vec<f32>> {
    check_scores(s)?;
    if !(eps > 0.0) {
        return arg_err(format!("epsilon must be positive, got {eps}"));
    }
    let (lo, _, hi, _) = min_max(s);
    let denom = hi as f64 - lo as f64 + eps as f64;
    Ok(s.iter().map(|&v| ((v as f64 - lo as f64) / denom) as f32).collect())
}

/// `(min, argmin, max, argmax)`, first position on ties.
pub(crate) fn min_max(s: &[f32]) -> (f32, usize, f32, usize) {
    let (mut lo, mut lo_i, mut hi, mut hi_i) = (s[0], 0, s[0], 0);
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v < lo {
            lo = v;
            lo_i = i;
        }
        if v > hi {
            hi = v;
            hi_i = i;
        }
    }
    (lo, lo_i, hi, hi_i)
}
