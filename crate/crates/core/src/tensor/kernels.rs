//! Raw loops shared by the graph ops and by code that needs the exact same
//! arithmetic outside a graph (collapse, memory-bank updates).

use super::{numel, Real};

/// A strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols as isize,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.max_index(m, n) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        return;
    }
    assert!(av.max_index(m, k) < a.len(), "gemm: a out of bounds");
    assert!(bv.max_index(k, n) < b.len(), "gemm: b out of bounds");
    // SAFETY: bounds asserted above; `c` is a unique borrow so cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

/// NumPy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat indices of a broadcast output back onto one of its inputs.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    Same,
    /// Input equals a trailing block of the output, repeated.
    Repeat(usize),
    Index(Vec<usize>),
}

impl BroadcastMap {
    pub fn new(out: &[usize], src: &[usize]) -> Self {
        let src_trimmed: &[usize] = {
            let lead = src.iter().take_while(|&&d| d == 1).count();
            &src[lead.min(src.len())..]
        };
        if src == out {
            return BroadcastMap::Same;
        }
        if out.ends_with(src_trimmed) {
            return BroadcastMap::Repeat(numel(src_trimmed));
        }
        let rank = out.len();
        let pad = rank - src.len();
        let mut src_strides = vec![0usize; rank];
        let mut stride = 1;
        for i in (0..src.len()).rev() {
            src_strides[i + pad] = if src[i] == 1 { 0 } else { stride };
            stride *= src[i];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..total {
            map.push(flat);
            for d in (0..rank).rev() {
                idx[d] += 1;
                flat += src_strides[d];
                if idx[d] < out[d] {
                    break;
                }
                flat -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        BroadcastMap::Index(map)
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Same => i,
            BroadcastMap::Repeat(n) => i % n,
            BroadcastMap::Index(map) => map[i],
        }
    }
}

/// Copies `data` (of `shape`) into the axis order given by `perm`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `Σ_i weights[i]·items[i]`, accumulated in index order.
pub(crate) fn weighted_sum<T: Real>(items: &[&[T]], weights: &[T]) -> Vec<T> {
    debug_assert_eq!(items.len(), weights.len());
    let w0 = weights[0];
    let mut out: Vec<T> = items[0].iter().map(|&v| w0 * v).collect();
    for (item, &w) in items.iter().zip(weights).skip(1) {
        for (o, &v) in out.iter_mut().zip(item.iter()) {
            *o += w * v;
        }
    }
    out
}

/// Memory-bank EMA step `δ·m + (1−δ)·w`, elementwise.
pub(crate) fn ema<T: Real>(bank: &[T], w: &[T], delta: T) -> Vec<T> {
    let keep = T::one() - delta;
    bank.iter().zip(w).map(|(&m, &x)| delta * m + keep * x).collect()
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64_lossy(0.398_942_280_401_432_7) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Numerically stable softmax over `len` strided entries starting at `base`.
/// Entries at positions `>= valid` are excluded and come out as exact zeros.
pub(crate) fn softmax_lane<T: Real>(
    src: &[T],
    dst: &mut [T],
    base: usize,
    stride: usize,
    len: usize,
    valid: usize,
) {
    let mut max = T::neg_infinity();
    for j in 0..valid {
        max = max.max(src[base + j * stride]);
    }
    let mut sum = T::zero();
    for j in 0..valid {
        let e = (src[base + j * stride] - max).exp();
        dst[base + j * stride] = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for j in 0..valid {
        dst[base + j * stride] *= inv;
    }
    for j in valid..len {
        dst[base + j * stride] = T::zero();
    }
}
