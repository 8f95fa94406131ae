//! Dense row-major tensors and the numeric kernels the autodiff tape is built on.
//!
//! Binary elementwise operations follow numpy broadcasting (shapes aligned on
//! the right, extents of 1 stretch). Matrix products act on the last two axes
//! and broadcast over any leading batch axes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Value-semantic dense array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes, or `None` if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` (right-aligned), zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visit every multi-index of `shape` in row-major order, passing the linear
/// offsets into two strided operands. The innermost axis runs as a tight loop.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0usize;
    loop {
        for j in 0..inner {
            f(out + j, oa + j * ia, ob + j * ib);
        }
        out += inner;
        // odometer over the outer axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Build from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            off = off * d + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Broadcasting binary map.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            });
        }
        let out = broadcast_shapes(&self.shape, &other.shape)
            .ok_or_else(|| Error::dim(op, &self.shape, &other.shape))?;
        let sa = aligned_strides(&self.shape, &out);
        let sb = aligned_strides(&other.shape, &out);
        let mut data = vec![T::zero(); out.iter().product()];
        walk2(&out, &sa, &sb, |o, a, b| data[o] = f(self.data[a], other.data[b]));
        Ok(Self { shape: out, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, n, inner) = self.axis_split(axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Self { shape, data })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "mean_axis")?;
        let n = self.shape[axis];
        if n == 0 {
            return Err(Error::EmptyInput("mean over empty axis"));
        }
        Ok(self.sum_axis(axis)?.scale(T::one() / T::of(n as f64)))
    }

    /// Reduce a broadcast result back to `target` (the reverse of broadcasting).
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        match broadcast_shapes(target, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => return Err(Error::dim("sum_to_shape", &self.shape, target)),
        }
        let st = aligned_strides(target, &self.shape);
        let mut data = vec![T::zero(); target.iter().product()];
        let own = strides(&self.shape);
        walk2(&self.shape, &own, &st, |_, src, dst| data[dst] += self.data[src]);
        Ok(Self {
            shape: target.to_vec(),
            data,
        })
    }

    /// Euclidean norm over the last axis, guarded as `sqrt(sum x^2 + delta)`; keeps the axis.
    pub fn norm_last(&self, delta: T) -> Result<Self> {
        let k = self.last_extent("norm")?;
        let data: Vec<T> = self
            .data
            .chunks(k)
            .map(|row| (row.iter().map(|&x| x * x).sum::<T>() + delta).sqrt())
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        Ok(Self { shape, data })
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_last(&self) -> Result<Self> {
        let k = self.last_extent("softmax")?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn log_softmax_last(&self) -> Result<Self> {
        let k = self.last_extent("log_softmax")?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    fn last_extent(&self, op: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&k) if k > 0 => Ok(k),
            _ => Err(Error::Shape(format!("{op} needs a non-empty last axis, got {:?}", self.shape))),
        }
    }

    /// Batched matrix product on the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        bmm(self, other, false, false)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape(format!("transpose of rank-{r} tensor")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for rank {r}")));
        }
        let own = strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let dst = strides(&shape);
        let mut data = vec![T::zero(); self.data.len()];
        walk2(&shape, &src, &dst, |_, s, d| data[d] = self.data[s]);
        Ok(Self { shape, data })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput("concat of zero tensors"))?;
        first.check_axis(axis, "concat")?;
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis..].iter().product::<usize>();
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis, "narrow")?;
        if start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "narrow {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                self.shape
            )));
        }
        let (outer, n, inner) = self.axis_split(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shapes(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::dim("broadcast_to", &self.shape, shape)),
        }
        let sa = aligned_strides(&self.shape, shape);
        let own = strides(shape);
        let mut data = vec![T::zero(); shape.iter().product()];
        walk2(shape, &sa, &own, |_, src, dst| data[dst] = self.data[src]);
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Inverse of [`Tensor::narrow`]: embed `self` at `start` along `axis` in zeros of extent `full`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Self> {
        self.check_axis(axis, "pad_axis")?;
        let len = self.shape[axis];
        if start + len > full {
            return Err(Error::Shape(format!("pad_axis: {start}+{len} exceeds {full}")));
        }
        let (outer, _, inner) = self.axis_split(axis);
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![T::zero(); outer * full * inner];
        for o in 0..outer {
            data[(o * full + start) * inner..(o * full + start + len) * inner]
                .copy_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(Self { shape, data })
    }

    /// Frobenius norm over all entries.
    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// `max |self - other|` for equal shapes.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Frobenius norm of `self - other` for equal shapes.
    pub fn dist(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim("dist", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }
}

/// Batched product `op(a) @ op(b)` where `op` optionally transposes the last two axes.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (a0, a1) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (b0, b1) = (b.shape[rb - 2], b.shape[rb - 1]);
    let (p, q) = if ta { (a1, a0) } else { (a0, a1) };
    let (q2, r) = if tb { (b1, b0) } else { (b0, b1) };
    if q != q2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let batch = broadcast_shapes(&a.shape[..ra - 2], &b.shape[..rb - 2])
        .ok_or_else(|| Error::dim("matmul", &a.shape, &b.shape))?;
    let bsa: Vec<usize> = aligned_strides(&a.shape[..ra - 2], &batch)
        .into_iter()
        .map(|s| s * a0 * a1)
        .collect();
    let bsb: Vec<usize> = aligned_strides(&b.shape[..rb - 2], &batch)
        .into_iter()
        .map(|s| s * b0 * b1)
        .collect();
    let nb: usize = batch.iter().product();
    let mut out = vec![T::zero(); nb * p * r];
    let mut shape = batch.clone();
    shape.extend([p, r]);

    let mut offsets = Vec::with_capacity(nb);
    if batch.is_empty() {
        offsets.push((0, 0));
    } else {
        walk2(&batch, &bsa, &bsb, |_, oa, ob| offsets.push((oa, ob)));
    }
    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
        let am = &a.data[oa..oa + a0 * a1];
        let bm = &b.data[ob..ob + b0 * b1];
        let c = &mut out[bi * p * r..(bi + 1) * p * r];
        match (ta, tb) {
            (false, false) => {
                for i in 0..p {
                    let crow = &mut c[i * r..(i + 1) * r];
                    for k in 0..q {
                        let aik = am[i * q + k];
                        let brow = &bm[k * r..(k + 1) * r];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv += aik * bv;
                        }
                    }
                }
            }
            (false, true) => {
                for i in 0..p {
                    let arow = &am[i * q..(i + 1) * q];
                    for j in 0..r {
                        let brow = &bm[j * q..(j + 1) * q];
                        let mut s = T::zero();
                        for (&x, &y) in arow.iter().zip(brow) {
                            s += x * y;
                        }
                        c[i * r + j] = s;
                    }
                }
            }
            (true, false) => {
                // a stored as q x p
                for k in 0..q {
                    let brow = &bm[k * r..(k + 1) * r];
                    for i in 0..p {
                        let aki = am[k * p + i];
                        let crow = &mut c[i * r..(i + 1) * r];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv += aki * bv;
                        }
                    }
                }
            }
            (true, true) => {
                for i in 0..p {
                    for j in 0..r {
                        let mut s = T::zero();
                        for k in 0..q {
                            s += am[k * p + i] * bm[j * q + k];
                        }
                        c[i * r + j] = s;
                    }
                }
            }
        }
    }
    Ok(Tensor { shape, data: out })
}
