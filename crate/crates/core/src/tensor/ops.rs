//! Differentiable operations on [`Var`].
//!
//! Broadcasting is limited to scalar-with-tensor in the elementwise
//! binary ops; everything else needs explicit reshapes. The `l1` and `l2`
//! losses are means over all elements.

use std::rc::Rc;

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};

/// Output slot with no source in [`Var::gather`]; yields zero.
pub const GATHER_NONE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

// ---------------------------------------------------------------- kernels

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a [m,n] · bᵀ where b is [k,n]; result [m,k].
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ · b where a is [m,k] and b is [m,n]; result [k,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Per-output taps `(source index within plane, weight)` for resampling a
/// `h×w` plane to `oh×ow` with half-pixel centers.
fn resample_taps(h: usize, w: usize, oh: usize, ow: usize, mode: ResampleMode) -> Vec<Vec<(usize, f64)>> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            match mode {
                ResampleMode::Nearest => {
                    let y = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                    let x = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                    taps.push(vec![(y * w + x, 1.0)]);
                }
                ResampleMode::Bilinear => {
                    let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let x0 = fx.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let wy = fy - y0 as f64;
                    let wx = fx - x0 as f64;
                    let mut t = Vec::with_capacity(4);
                    for (yy, wyy) in [(y0, 1.0 - wy), (y1, wy)] {
                        for (xx, wxx) in [(x0, 1.0 - wx), (x1, wx)] {
                            let wgt = wyy * wxx;
                            if wgt != 0.0 {
                                t.push((yy * w + xx, wgt));
                            }
                        }
                    }
                    taps.push(t);
                }
            }
        }
    }
    taps
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

/// Reduce a broadcast gradient back to the shape of a scalar operand.
fn reduce_to(g: Vec<f64>, numel: usize) -> Vec<f64> {
    if numel == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

// ------------------------------------------------------------------ ops

impl<'t> Var<'t> {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = Rc::clone(&self.value);
        let out = x.map(&f);
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            let gx = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let shape = same_or_scalar("add", &self.value, &other.value)?;
        let (a, b) = (self.data(), other.data());
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| at(a, i) + at(b, i)).collect();
        let (na, nb) = (a.len(), b.len());
        Ok(self
            .tape
            .record(Tensor::new(&shape, out)?, &[self, other], move |g, m| {
                vec![
                    m[0].then(|| reduce_to(g.to_vec(), na)),
                    m[1].then(|| reduce_to(g.to_vec(), nb)),
                ]
            }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let shape = same_or_scalar("sub", &self.value, &other.value)?;
        let (a, b) = (self.data(), other.data());
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| at(a, i) - at(b, i)).collect();
        let (na, nb) = (a.len(), b.len());
        Ok(self
            .tape
            .record(Tensor::new(&shape, out)?, &[self, other], move |g, m| {
                vec![
                    m[0].then(|| reduce_to(g.to_vec(), na)),
                    m[1].then(|| reduce_to(g.iter().map(|x| -x).collect(), nb)),
                ]
            }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let shape = same_or_scalar("mul", &self.value, &other.value)?;
        let (av, bv) = (Rc::clone(&self.value), Rc::clone(&other.value));
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| at(av.data(), i) * at(bv.data(), i)).collect();
        Ok(self
            .tape
            .record(Tensor::new(&shape, out)?, &[self, other], move |g, m| {
                let (a, b) = (av.data(), bv.data());
                let ga = m[0].then(|| {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(b, i)).collect();
                    reduce_to(full, a.len())
                });
                let gb = m[1].then(|| {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(a, i)).collect();
                    reduce_to(full, b.len())
                });
                vec![ga, gb]
            }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value.map(|x| x * c);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.iter().map(|x| x * c).collect())])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value.map(|x| x + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(|x| gelu_parts(x).0, |x, _| gelu_parts(x).1)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        self.tape
            .record(Tensor::scalar(s), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        self.tape.record(Tensor::scalar(s), &[self], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(), other.data(), &mut out, m, k, n);
        let (av, bv) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self
            .tape
            .record(Tensor::new(&[m, n], out)?, &[self, other], move |g, mask| {
                let ga = mask[0].then(|| matmul_nt(g, bv.data(), m, n, k));
                let gb = mask[1].then(|| matmul_tn(av.data(), g, m, k, n));
                vec![ga, gb]
            }))
    }

    /// `x · wᵀ + b` with `x: [n,in]`, `w: [out,in]`, `b: [out]`.
    pub fn affine(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("affine", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("affine", sw, sb));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = matmul_nt(self.data(), w.data(), n, i, o);
        for r in 0..n {
            for (y, bb) in out[r * o..(r + 1) * o].iter_mut().zip(b.data()) {
                *y += bb;
            }
        }
        let (xv, wv) = (Rc::clone(&self.value), Rc::clone(&w.value));
        Ok(self
            .tape
            .record(Tensor::new(&[n, o], out)?, &[self, w, b], move |g, mask| {
                let gx = mask[0].then(|| {
                    let mut gx = vec![0.0; n * i];
                    matmul_into(g, wv.data(), &mut gx, n, o, i);
                    gx
                });
                let gw = mask[1].then(|| matmul_tn(g, xv.data(), n, o, i));
                let gb = mask[2].then(|| {
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        for (acc, gg) in gb.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *acc += gg;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }))
    }

    /// Adds a `[d]` row to every row of an `[n,d]` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (sx, sr) = (self.shape(), row.shape());
        if sx.len() != 2 || sr != [sx[1]] {
            return Err(Error::shape("add_row", sx, sr));
        }
        let (n, d) = (sx[0], sx[1]);
        let mut out = self.data().to_vec();
        for r in 0..n {
            for (y, b) in out[r * d..(r + 1) * d].iter_mut().zip(row.data()) {
                *y += b;
            }
        }
        Ok(self
            .tape
            .record(Tensor::new(&[n, d], out)?, &[self, row], move |g, mask| {
                let gr = mask[1].then(|| {
                    let mut gr = vec![0.0; d];
                    for r in 0..n {
                        for (acc, gg) in gr.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *acc += gg;
                        }
                    }
                    gr
                });
                vec![mask[0].then(|| g.to_vec()), gr]
            }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value.transpose()?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let out = Tensor::new(shape, self.data().to_vec())?;
        Ok(self.tape.record(out, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == GATHER_NONE`.
    /// Gradients scatter-add back to the sources.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        let src = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_NONE && i >= src.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out: Vec<f64> = index
            .iter()
            .map(|&i| if i == GATHER_NONE { 0.0 } else { src[i] })
            .collect();
        let len = src.len();
        Ok(self.tape.record(Tensor::new(shape, out)?, &[self], move |g, _| {
            let mut gx = vec![0.0; len];
            for (&i, &gi) in index.iter().zip(g) {
                if i != GATHER_NONE {
                    gx[i] += gi;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Axis permutation; `perm[k]` names the source axis of output axis `k`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of rank {r}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; r];
        for k in (0..r.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * shape[k + 1];
        }
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; r];
        for _ in 0..n {
            index.push(coord.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
            for k in (0..r).rev() {
                coord[k] += 1;
                if coord[k] < out_shape[k] {
                    break;
                }
                coord[k] = 0;
            }
        }
        self.gather(index.into(), &out_shape)
    }

    /// Selects entries `indices` along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::InvalidArgument(format!(
                "index_select: axis {axis} / indices {indices:?} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * shape[axis] + i) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        self.gather(index.into(), &out_shape)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {s0:?}"
            )));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(k, (a, b))| k != axis && a != b) {
                return Err(Error::shape("concat", s0, s));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_block: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * total_block);
        for o in 0..outer {
            for (p, &blk) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = s0.to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let tape = first.tape;
        Ok(tape.record(Tensor::new(&shape, out)?, parts, move |g, mask| {
            let mut grads: Vec<Option<Vec<f64>>> = blocks
                .iter()
                .zip(mask)
                .map(|(&blk, &m)| m.then(|| Vec::with_capacity(outer * blk)))
                .collect();
            for o in 0..outer {
                let mut off = o * total_block;
                for (gp, &blk) in grads.iter_mut().zip(&blocks) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + blk]);
                    }
                    off += blk;
                }
            }
            grads
        }))
    }

    /// Spatial resampling of the last two axes to `(oh, ow)`.
    pub fn resample(&self, oh: usize, ow: usize, mode: ResampleMode) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "resample needs at least two axes, got {shape:?}"
            )));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "resample from {h}x{w} to zero-size target {oh}x{ow}"
            )));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let taps = Rc::new(resample_taps(h, w, oh, ow, mode));
        let src = self.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (o, t) in taps.iter().enumerate() {
                out[p * oh * ow + o] = t.iter().map(|&(i, wgt)| wgt * plane[i]).sum();
            }
        }
        let mut out_shape = shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        Ok(self.tape.record(Tensor::new(&out_shape, out)?, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for (o, t) in taps.iter().enumerate() {
                    let go = g[p * oh * ow + o];
                    for &(i, wgt) in t {
                        gx[p * h * w + i] += wgt * go;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Means of consecutive groups of `group` rows: `[n,d] -> [n/group,d]`.
    pub fn segment_mean(&self, group: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || group == 0 || !s[0].is_multiple_of(group) {
            return Err(Error::InvalidArgument(format!(
                "segment_mean: {s:?} does not split into groups of {group}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let m = n / group;
        let inv = 1.0 / group as f64;
        let mut out = vec![0.0; m * d];
        for r in 0..n {
            let o = &mut out[(r / group) * d..(r / group + 1) * d];
            for (y, x) in o.iter_mut().zip(&self.data()[r * d..(r + 1) * d]) {
                *y += x * inv;
            }
        }
        Ok(self.tape.record(Tensor::new(&[m, d], out)?, &[self], move |g, _| {
            let mut gx = vec![0.0; n * d];
            for r in 0..n {
                let src = &g[(r / group) * d..(r / group + 1) * d];
                for (y, x) in gx[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *y = x * inv;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise log-softmax of an `[n,C]` matrix.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::InvalidArgument(format!(
                "log_softmax needs [n, C] logits, got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            out.extend(row_log_softmax(&self.data()[r * c..(r + 1) * c]));
        }
        let y = Rc::new(out.clone());
        Ok(self.tape.record(Tensor::new(&[n, c], out)?, &[self], move |g, _| {
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                for j in 0..c {
                    gx[r * c + j] = g[r * c + j] - y[r * c + j].exp() * gs;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean cross-entropy of `[n,C]` logits against integer labels.
    pub fn softmax_ce(&self, labels: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_ce", s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "softmax_ce label {l} out of range for {c} classes"
            )));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let ls = row_log_softmax(&self.data()[r * c..(r + 1) * c]);
            loss -= ls[l];
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        let labels = labels.to_vec();
        Ok(self.tape.record(Tensor::scalar(loss / n as f64), &[self], move |g, _| {
            let mut gx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * c + l] -= 1.0;
            }
            let k = g[0] / n as f64;
            gx.iter_mut().for_each(|v| *v *= k);
            vec![Some(gx)]
        }))
    }

    /// Mean absolute difference.
    pub fn l1(&self, target: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("l1", self.shape(), target.shape()));
        }
        let n = self.numel();
        let diff: Vec<f64> = self.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
        Ok(self.tape.record(Tensor::scalar(loss), &[self, target], move |g, mask| {
            let k = g[0] / n as f64;
            let sign: Vec<f64> = diff
                .iter()
                .map(|&d| {
                    if d > 0.0 {
                        k
                    } else if d < 0.0 {
                        -k
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![
                mask[0].then(|| sign.clone()),
                mask[1].then(|| sign.iter().map(|s| -s).collect()),
            ]
        }))
    }

    /// Mean squared difference.
    pub fn l2(&self, target: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("l2", self.shape(), target.shape()));
        }
        let n = self.numel();
        let diff: Vec<f64> = self.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
        Ok(self.tape.record(Tensor::scalar(loss), &[self, target], move |g, mask| {
            let k = 2.0 * g[0] / n as f64;
            vec![
                mask[0].then(|| diff.iter().map(|d| d * k).collect()),
                mask[1].then(|| diff.iter().map(|d| -d * k).collect()),
            ]
        }))
    }
}
