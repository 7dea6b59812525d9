//! Dense row-major `f64` tensors and the value-level kernels behind every
//! differentiable primitive.
//!
//! Kernels here know nothing about gradients; [`crate::autodiff`] records
//! them on a tape and supplies the adjoint rules. Binary elementwise kernels
//! follow numpy broadcasting (dimensions aligned from the right, size-1 axes
//! stretch).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Infallible constructor for internal kernels whose sizes are correct by construction.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(v: &[f64]) -> Self {
        Tensor { shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("tensor", "ragged matrix rows"));
        }
        Tensor::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let s = strides(&self.shape);
        self.data[index.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data.iter().zip(&other.data).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub(crate) fn normalize_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize> {
    let a = if axis < 0 { rank as isize + axis } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::shape(op, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?} (dim {i}: {da} vs {db})"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned against `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len()).map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] }).collect()
}

/// Calls `f(out_offset, offsets...)` for each element of `out`, walking the
/// given per-input strides alongside.
fn for_each_index<const K: usize>(out: &[usize], in_strides: [&[usize]; K], mut f: impl FnMut(usize, [usize; K])) {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; K];
    for lin in 0..n {
        f(lin, offs);
        // increment multi-index
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                offs[k] += in_strides[k][d];
            }
            if idx[d] < out[d] {
                break;
            }
            for k in 0..K {
                offs[k] -= in_strides[k][d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::raw(a.shape.clone(), data));
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    // fast path: b is a trailing block of a
    if out == a.shape && b.shape.len() <= a.shape.len() && a.shape.ends_with(&b.shape) {
        let m = b.numel();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % m])).collect();
        return Ok(Tensor::raw(out, data));
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_index(&out, [&sa, &sb], |lin, [ia, ib]| data[lin] = f(a.data[ia], b.data[ib]));
    Ok(Tensor::raw(out, data))
}

/// Sums `t` down to `shape`, undoing a broadcast from `shape` to `t.shape()`.
pub(crate) fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let mut data = vec![0.0; numel(shape)];
    if t.shape.ends_with(shape) {
        let m = data.len();
        for (i, v) in t.data.iter().enumerate() {
            data[i % m] += v;
        }
    } else {
        let st = strides(&t.shape);
        let so = broadcast_strides(shape, &t.shape);
        for_each_index(&t.shape, [&st, &so], |_, [it, io]| data[io] += t.data[it]);
    }
    Tensor::raw(shape.to_vec(), data)
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = broadcast_shape("broadcast_to", &t.shape, shape)?;
    if out != shape {
        return Err(Error::shape("broadcast_to", format!("{:?} does not broadcast to {shape:?}", t.shape)));
    }
    let st = broadcast_strides(&t.shape, shape);
    let mut data = vec![0.0; numel(shape)];
    for_each_index(shape, [&st], |lin, [i]| data[lin] = t.data[i]);
    Ok(Tensor::raw(shape.to_vec(), data))
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the extents m,k,n with the given strides stay inside `a`, `b`
    // and `c`; callers derive them from the tensors' own shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layout of a matmul call, shared by the forward kernel and its adjoint.
#[derive(Clone, Copy, Debug)]
pub(crate) enum MatmulKind {
    /// `a[..., k] · b[k, n]`, leading dims of `a` flattened into `m`.
    Flat { m: usize, k: usize, n: usize },
    /// `a[.., m, k] · b[.., k, n]` over `batch` matching leading dims.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

pub(crate) fn matmul_kind(a: &[usize], b: &[usize]) -> Result<(MatmulKind, Vec<usize>)> {
    if a.is_empty() || b.len() < 2 {
        return Err(Error::shape("matmul", format!("need rank>=1 lhs and rank>=2 rhs, got {a:?} x {b:?}")));
    }
    if b.len() == 2 {
        let k = *a.last().unwrap();
        if k != b[0] {
            return Err(Error::shape("matmul", format!("inner dims differ: {a:?} x {b:?} ({k} vs {})", b[0])));
        }
        let mut out = a[..a.len() - 1].to_vec();
        out.push(b[1]);
        return Ok((MatmulKind::Flat { m: numel(&a[..a.len() - 1]), k, n: b[1] }, out));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape("matmul", format!("batch dims differ: {a:?} x {b:?}")));
    }
    let r = a.len();
    let (m, k, n) = (a[r - 2], a[r - 1], b[r - 1]);
    if k != b[r - 2] {
        return Err(Error::shape("matmul", format!("inner dims differ: {a:?} x {b:?} ({k} vs {})", b[r - 2])));
    }
    let mut out = a[..r - 1].to_vec();
    out.push(n);
    Ok((MatmulKind::Batched { batch: numel(&a[..r - 2]), m, k, n }, out))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (kind, out) = matmul_kind(&a.shape, &b.shape)?;
    let mut data = vec![0.0; numel(&out)];
    match kind {
        MatmulKind::Flat { m, k, n } => gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut data, false),
        MatmulKind::Batched { batch, m, k, n } => {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data[i * m * k..],
                    k as isize,
                    1,
                    &b.data[i * k * n..],
                    n as isize,
                    1,
                    &mut data[i * m * n..],
                    false,
                );
            }
        }
    }
    Ok(Tensor::raw(out, data))
}

/// Adjoints of `matmul` given the upstream gradient `g`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, kind: MatmulKind) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    match kind {
        MatmulKind::Flat { m, k, n } => {
            // ga = g · bᵀ ; gb = aᵀ · g
            gemm(m, n, k, &g.data, n as isize, 1, &b.data, 1, n as isize, &mut ga, false);
            gemm(k, m, n, &a.data, 1, k as isize, &g.data, n as isize, 1, &mut gb, false);
        }
        MatmulKind::Batched { batch, m, k, n } => {
            for i in 0..batch {
                let (ao, bo, go) = (i * m * k, i * k * n, i * m * n);
                gemm(m, n, k, &g.data[go..], n as isize, 1, &b.data[bo..], 1, n as isize, &mut ga[ao..], false);
                gemm(k, m, n, &a.data[ao..], 1, k as isize, &g.data[go..], n as isize, 1, &mut gb[bo..], false);
            }
        }
    }
    (Tensor::raw(a.shape.clone(), ga), Tensor::raw(b.shape.clone(), gb))
}

/// Swaps two axes.
pub(crate) fn transpose(t: &Tensor, i: usize, j: usize) -> Tensor {
    let mut perm: Vec<usize> = (0..t.rank()).collect();
    perm.swap(i, j);
    let out: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let s = strides(&t.shape);
    let ps: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut data = vec![0.0; t.numel()];
    for_each_index(&out, [&ps], |lin, [src]| data[lin] = t.data[src]);
    Tensor::raw(out, data)
}

pub(crate) fn softmax(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut data = vec![0.0; t.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mx = (0..len).map(|l| t.data[base + l * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (t.data[base + l * inner] - mx).exp();
                data[base + l * inner] = e;
                z += e;
            }
            for l in 0..len {
                data[base + l * inner] /= z;
            }
        }
    }
    Tensor::raw(t.shape.clone(), data)
}

pub(crate) fn log_softmax(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut data = vec![0.0; t.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mx = (0..len).map(|l| t.data[base + l * inner]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..len).map(|l| (t.data[base + l * inner] - mx).exp()).sum::<f64>().ln();
            for l in 0..len {
                data[base + l * inner] = t.data[base + l * inner] - lse;
            }
        }
    }
    Tensor::raw(t.shape.clone(), data)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub(crate) fn sum_axis(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &t.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::raw(removed_axis(&t.shape, axis), data)
}

/// Max along `axis`, returning the values and the winning position per slot
/// (first occurrence on ties).
pub(crate) fn max_axis(t: &Tensor, axis: usize) -> (Tensor, Vec<usize>) {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut data = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = t.data[(o * len + l) * inner + i];
                let slot = o * inner + i;
                if v > data[slot] {
                    data[slot] = v;
                    arg[slot] = l;
                }
            }
        }
    }
    (Tensor::raw(removed_axis(&t.shape, axis), data), arg)
}

/// Re-expands a reduced-axis gradient back to the full shape.
pub(crate) fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut data = vec![0.0; numel(shape)];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                data[(o * len + l) * inner + i] = g.data[o * inner + i] * scale;
            }
        }
    }
    Tensor::raw(shape.to_vec(), data)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.rank();
    let mut total = 0;
    for p in parts {
        if p.rank() != rank || p.shape[..axis] != first.shape[..axis] || p.shape[axis + 1..] != first.shape[axis + 1..]
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} and {:?} disagree off axis {axis}", first.shape, p.shape),
            ));
        }
        total += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::raw(shape, data))
}

pub(crate) fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if len == 0 || start + len > t.shape[axis] {
        return Err(Error::shape(
            "narrow",
            format!("range {start}..{} outside axis {axis} of {:?}", start + len, t.shape),
        ));
    }
    let (outer, full, inner) = axis_split(&t.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Ok(Tensor::raw(shape, data))
}

/// Zero tensor of `shape` with `g` written into `[start, start+len)` along `axis`.
pub(crate) fn pad_axis(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full, inner) = axis_split(shape, axis);
    let len = g.shape[axis];
    let mut data = vec![0.0; numel(shape)];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::raw(shape.to_vec(), data)
}

pub(crate) fn index_select(t: &Tensor, axis: usize, idx: &[usize]) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    if idx.is_empty() {
        return Err(Error::invalid("index_select with no indices"));
    }
    if let Some(bad) = idx.iter().find(|&&i| i >= len) {
        return Err(Error::shape("index_select", format!("index {bad} out of range for axis {axis} of {:?}", t.shape)));
    }
    let mut data = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let base = (o * len + i) * inner;
            data.extend_from_slice(&t.data[base..base + inner]);
        }
    }
    let mut shape = t.shape.clone();
    shape[axis] = idx.len();
    Ok(Tensor::raw(shape, data))
}

pub(crate) fn index_scatter_add(g: &Tensor, shape: &[usize], axis: usize, idx: &[usize]) -> Tensor {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut data = vec![0.0; numel(shape)];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            let dst = (o * len + i) * inner;
            let src = (o * idx.len() + j) * inner;
            for x in 0..inner {
                data[dst + x] += g.data[src + x];
            }
        }
    }
    Tensor::raw(shape.to_vec(), data)
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[2, 3]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(&[10.0, 20.0, 30.0]);
        let c = binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let back = sum_to_shape(&c, &[2, 1]);
        assert_eq!(back.data(), &[63.0, 66.0]);
        let back = sum_to_shape(&c, &[3]);
        assert_eq!(back.data(), &[23.0, 43.0, 63.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let err = matmul(&a, &Tensor::zeros(&[3, 2])).unwrap_err().to_string();
        assert!(err.contains("2 vs 3"), "{err}");
    }

    #[test]
    fn batched_matmul_matches_loop() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.5]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn transpose_swaps() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let tt = transpose(&t, 0, 1);
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn concat_narrow_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(narrow(&c, 1, 2, 1).unwrap(), b);
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&Tensor::vector(&[0.0, 0.0]), 0);
        assert_eq!(s.data(), &[0.5, 0.5]);
    }
}
