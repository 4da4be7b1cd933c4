//! Dense row-major f64 tensors and the numeric kernels the counting
//! pipeline is built from: matmul, softmax, sigmoid, bilinear resize,
//! 1x1 channel projection and top-k selection.
//!
//! Values are validated at construction: NaN and infinities are rejected,
//! so every tensor in the system is finite by construction. Extents of
//! zero are permitted (an empty exemplar token matrix is a 0 x d tensor).

use crate::error::{Error, Result};
use crate::par;

/// Dense n-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the extents and that
    /// every value is finite.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} imply {} elements, got {}", dims, expected, data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor", index });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims, vec![value; len])
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims.is_empty()
    }

    /// The single value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(
                "scalar_value",
                format!("expected rank 0, got dims {:?}", self.dims),
            ));
        }
        Ok(self.data[0])
    }

    /// Same data, new extents. Element count must be unchanged.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.dims, dims),
            ));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    pub fn get3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {:?}", self.dims),
            ));
        }
        let (m, n) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            dims: vec![n, m],
            data: out,
        })
    }

    pub(crate) fn from_raw(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(dims, data)
    }
}

fn expect_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.dims)));
    }
    Ok((t.dims[0], t.dims[1]))
}

fn expect_rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::shape(op, format!("expected rank 3, got {:?}", t.dims)));
    }
    Ok((t.dims[0], t.dims[1], t.dims[2]))
}

/// `c[i,j] = sum_r a[i,r] * b[r,j]` for a: m x k, b: k x n.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = expect_rank2(a, "matmul")?;
    let (kb, n) = expect_rank2(b, "matmul")?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.dims, b.dims),
        ));
    }
    if n == 0 || m == 0 {
        return Tensor::new(vec![m, n], vec![]);
    }
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let ar = &a.data[i * ka..(i + 1) * ka];
        for (r, &av) in ar.iter().enumerate() {
            let br = &b.data[r * n..(r + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis`, computed with max-subtraction. Outputs are
/// positive and sum to 1 along the reduced axis.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= v.rank() {
        return Err(Error::arg(
            "softmax",
            format!("axis {} out of range for dims {:?}", axis, v.dims),
        ));
    }
    if v.dims[axis] == 0 {
        return Err(Error::arg("softmax", "reduced axis is empty".to_string()));
    }
    let lane = v.dims[axis];
    let inner: usize = v.dims[axis + 1..].iter().product();
    let chunk = lane * inner;
    let src = &v.data;
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, chunk, |o, c| {
        let base = o * chunk;
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(src[base + l * inner + i]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = (src[base + l * inner + i] - max).exp();
                c[l * inner + i] = e;
                sum += e;
            }
            for l in 0..lane {
                c[l * inner + i] /= sum;
            }
        }
    });
    Tensor::new(v.dims.clone(), out)
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element-wise sigmoid.
pub fn sigmoid_map(m: &Tensor) -> Result<Tensor> {
    Tensor::new(m.dims.clone(), par::map_unary(&m.data, sigmoid_scalar))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample of a 2-D grid of `C`-channel cells, in index space
/// (cell (y, x) sits at coordinate (y, x)); coordinates are clamped to
/// the valid range. Writes `C` channel values into `out`.
pub(crate) fn bilinear_sample(
    data: &[f64],
    h: usize,
    w: usize,
    c: usize,
    y: f64,
    x: f64,
    out: &mut [f64],
) {
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = yc - y0 as f64;
    let wx = xc - x0 as f64;
    for ch in 0..c {
        let v00 = data[(y0 * w + x0) * c + ch];
        let v01 = data[(y0 * w + x1) * c + ch];
        let v10 = data[(y1 * w + x0) * c + ch];
        let v11 = data[(y1 * w + x1) * c + ch];
        out[ch] = lerp(lerp(v00, v01, wx), lerp(v10, v11, wx), wy);
    }
}

/// Resizes an H x W x C map to `target` with the align-corners-false
/// convention; sample coordinates are clamped to the valid range.
/// Resizing to the source dims reproduces the input bit for bit.
pub fn bilinear_resize(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = expect_rank3(map, "bilinear_resize")?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::arg(
            "bilinear_resize",
            format!("zero target extent {:?}", target),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::arg("bilinear_resize", "empty source map".to_string()));
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = vec![0.0; th * tw * c];
    let src = &map.data;
    par::for_each_chunk_mut(&mut out, tw * c, |oy, row| {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..tw {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            bilinear_sample(src, h, w, c, y, x, &mut row[ox * c..(ox + 1) * c]);
        }
    });
    Tensor::new(vec![th, tw, c], out)
}

/// Per-position affine map over channels: `out[y,x,:] = map[y,x,:] W + bias`.
pub fn project_1x1(map: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = expect_rank3(map, "project_1x1")?;
    let (wc_in, c_out) = expect_rank2(weight, "project_1x1")?;
    if wc_in != cin {
        return Err(Error::shape(
            "project_1x1",
            format!("map channels {} vs weight rows {}", cin, wc_in),
        ));
    }
    if bias.rank() != 1 || bias.dims[0] != c_out {
        return Err(Error::shape(
            "project_1x1",
            format!("bias dims {:?}, expected [{}]", bias.dims, c_out),
        ));
    }
    let src = &map.data;
    let wd = &weight.data;
    let bd = &bias.data;
    let mut out = vec![0.0; h * w * c_out];
    par::for_each_chunk_mut(&mut out, w * c_out, |y, row| {
        for x in 0..w {
            let pix = &src[(y * w + x) * cin..(y * w + x + 1) * cin];
            let dst = &mut row[x * c_out..(x + 1) * c_out];
            dst.copy_from_slice(bd);
            for (r, &v) in pix.iter().enumerate() {
                let wr = &wd[r * c_out..(r + 1) * c_out];
                for (o, &wv) in dst.iter_mut().zip(wr) {
                    *o += v * wv;
                }
            }
        }
    });
    Tensor::new(vec![h, w, c_out], out)
}

/// Indices of the k largest scores, sorted by descending score with ties
/// broken toward the smaller index. `k` is clamped to the score count.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::arg("topk_indices", "empty scores".to_string()));
    }
    if k == 0 {
        return Err(Error::arg("topk_indices", "k must be at least 1".to_string()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("tensor values are finite")
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(scores.len()));
    Ok(idx)
}

// Element-wise helpers shared by the autodiff tape and the loss code.

pub(crate) fn ew_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.dims != b.dims {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims.clone(), data)
}

pub(crate) fn ew_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(a.dims.clone(), a.data.iter().map(|&x| f(x)).collect())
}

pub(crate) fn sum_all(a: &Tensor) -> f64 {
    a.data.iter().sum()
}

/// Stacks rank-2 tensors with equal column counts on top of each other.
/// Zero-row inputs are allowed.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::arg("concat_rows", "no parts".to_string()));
    }
    let cols = parts[0].dims.get(1).copied().ok_or_else(|| {
        Error::shape("concat_rows", format!("expected rank 2, got {:?}", parts[0].dims))
    })?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = expect_rank2(p, "concat_rows")?;
        if c != cols {
            return Err(Error::shape(
                "concat_rows",
                format!("column mismatch: {} vs {}", c, cols),
            ));
        }
        rows += r;
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![rows, cols], data)
}

/// Copies the listed rows of a rank-2 tensor, in order (repeats allowed).
pub fn gather_rows(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (r, c) = expect_rank2(a, "gather_rows")?;
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        if i >= r {
            return Err(Error::arg(
                "gather_rows",
                format!("row index {} out of range for {} rows", i, r),
            ));
        }
        data.extend_from_slice(a.row(i));
    }
    Tensor::new(vec![indices.len(), c], data)
}

pub(crate) fn gather_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = expect_rank2(a, "gather_cols")?;
    if start + len > c {
        return Err(Error::arg(
            "gather_cols",
            format!("columns {}..{} out of range for width {}", start, start + len, c),
        ));
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&a.data[i * c + start..i * c + start + len]);
    }
    Tensor::new(vec![r, len], data)
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::arg("concat_cols", "no parts".to_string()));
    }
    let rows = parts[0].dims[0];
    let total: usize = parts.iter().map(|p| p.dims[1]).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            let (r, _) = expect_rank2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", r, rows),
                ));
            }
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], data)
}

/// Adds a length-d bias vector to every row of an n x d matrix.
pub(crate) fn broadcast_add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = expect_rank2(a, "broadcast_add_row")?;
    if bias.rank() != 1 || bias.dims[0] != c {
        return Err(Error::shape(
            "broadcast_add_row",
            format!("bias {:?} vs width {}", bias.dims, c),
        ));
    }
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bias.data[i % c])
        .collect();
    Tensor::new(a.dims.clone(), data)
}

/// Column sums of a rank-2 tensor, as a rank-1 tensor.
pub(crate) fn col_sum(a: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_rank2(a, "col_sum")?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Tensor::new(vec![c], out)
}
