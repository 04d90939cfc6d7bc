//! Shape plumbing, linear algebra and elementwise operations.

use crate::error::{domain, Result, TensorError};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// `out[m×n] += a[m×k] · b[k×n]`
#[inline(always)]
fn gemm_nn_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Dot product with eight independent lanes so the compiler can vectorize;
/// the summation order is fixed, so results stay reproducible.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
#[inline(always)]
fn gemm_nt_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
#[inline(always)]
fn gemm_tn_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// The kernels above are compiled twice: once for the baseline target and
/// once with AVX2 enabled, picked at runtime. No FMA contraction happens in
/// either build, so both produce identical bits.
macro_rules! dispatch_kernel {
    ($name:ident, $body:ident, $wide:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $wide(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
            $body(a, b, out, m, k, n)
        }

        fn $name(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports AVX2, checked just above.
                    return unsafe { $wide(a, b, out, m, k, n) };
                }
            }
            $body(a, b, out, m, k, n)
        }
    };
}

dispatch_kernel!(gemm_nn, gemm_nn_body, gemm_nn_avx2);
dispatch_kernel!(gemm_nt, gemm_nt_body, gemm_nt_avx2);
dispatch_kernel!(gemm_tn, gemm_tn_body, gemm_tn_avx2);

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape().to_vec(), rhs: shape });
        }
        Ok(Tensor::from_op("reshape", shape, self.data().to_vec(), vec![self.clone()], |g| vec![Some(g.to_vec())]))
    }

    /// `[M×K] · [K×N] → [M×N]`
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 || self.shape().len() != 2 || rhs.shape().len() != 2 {
            return Err(mismatch("matmul", self, rhs));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(), rhs.data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("matmul", vec![m, n], out, vec![self.clone(), rhs.clone()], move |g| {
            let da = a.requires_grad().then(|| {
                let mut da = vec![0.0; m * k];
                gemm_nt(g, b.data(), &mut da, m, n, k);
                da
            });
            let db = b.requires_grad().then(|| {
                let mut db = vec![0.0; k * n];
                gemm_tn(a.data(), g, &mut db, m, k, n);
                db
            });
            vec![da, db]
        }))
    }

    /// `[M×K] · [N×K]ᵀ → [M×N]`
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 || self.shape().len() != 2 || rhs.shape().len() != 2 {
            return Err(mismatch("matmul_nt", self, rhs));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(), rhs.data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("matmul_nt", vec![m, n], out, vec![self.clone(), rhs.clone()], move |g| {
            // dA = G·B, dB = Gᵀ·A
            let da = a.requires_grad().then(|| {
                let mut da = vec![0.0; m * k];
                gemm_nn(g, b.data(), &mut da, m, n, k);
                da
            });
            let db = b.requires_grad().then(|| {
                let mut db = vec![0.0; n * k];
                gemm_tn(g, a.data(), &mut db, m, n, k);
                db
            });
            vec![da, db]
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let transpose = move |src: &[f64], r: usize, c: usize| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            out
        };
        let out = transpose(self.data(), m, n);
        Ok(Tensor::from_op("transpose", vec![n, m], out, vec![self.clone()], move |g| vec![Some(transpose(g, n, m))]))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("add", self, rhs));
        }
        let out = zip_map(self.data(), rhs.data(), |x, y| x + y);
        Ok(Tensor::from_op("add", self.shape().to_vec(), out, vec![self.clone(), rhs.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("sub", self, rhs));
        }
        let out = zip_map(self.data(), rhs.data(), |x, y| x - y);
        Ok(Tensor::from_op("sub", self.shape().to_vec(), out, vec![self.clone(), rhs.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("mul", self, rhs));
        }
        let out = zip_map(self.data(), rhs.data(), |x, y| x * y);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("mul", self.shape().to_vec(), out, vec![self.clone(), rhs.clone()], move |g| {
            vec![
                a.requires_grad().then(|| zip_map(g, b.data(), |x, y| x * y)),
                b.requires_grad().then(|| zip_map(g, a.data(), |x, y| x * y)),
            ]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), out, vec![self.clone()], |g| vec![Some(g.to_vec())])
    }

    /// Multiplies every element by the single element of `s`.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(mismatch("mul_scalar_tensor", self, s));
        }
        let c = s.item();
        let out = self.data().iter().map(|v| v * c).collect();
        let x = self.clone();
        Ok(Tensor::from_op("mul_scalar_tensor", self.shape().to_vec(), out, vec![self.clone(), s.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect()), Some(vec![g.iter().zip(x.data()).map(|(a, b)| a * b).sum()])]
        }))
    }

    /// Adds the vector `bias[N]` to every row of `self[..×N]`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if bias.numel() != n {
            return Err(mismatch("add_row", self, bias));
        }
        let b = bias.data();
        let out = self.data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        Ok(Tensor::from_op("add_row", self.shape().to_vec(), out, vec![self.clone(), bias.clone()], move |g| {
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(g.to_vec()), Some(db)]
        }))
    }

    /// Joins rank-2 tensors with equal row counts along the last axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| domain("concat_cols", "no inputs"))?;
        let (m, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != m {
                return Err(mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let parents: Vec<Tensor> = parts.iter().map(|&t| t.clone()).collect();
        Ok(Tensor::from_op("concat_cols", vec![m, total], out, parents, move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    Some(d)
                })
                .collect()
        }))
    }

    /// Stacks tensors with equal column counts along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| domain("concat_rows", "no inputs"))?;
        let cols = first.cols();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            if p.cols() != cols {
                return Err(mismatch("concat_rows", first, p));
            }
            sizes.push(p.numel());
        }
        let out: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        let rows = out.len() / cols;
        let parents: Vec<Tensor> = parts.iter().map(|&t| t.clone()).collect();
        Ok(Tensor::from_op("concat_rows", vec![rows, cols], out, parents, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let d = g[off..off + s].to_vec();
                    off += s;
                    Some(d)
                })
                .collect()
        }))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(domain("slice_cols", format!("columns {start}..{} out of {n}", start + len)));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data()[i * n + start..i * n + start + len]);
        }
        Ok(Tensor::from_op("slice_cols", vec![m, len], out, vec![self.clone()], move |g| {
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(d)]
        }))
    }

    /// Selects rows by index; repeated indices are allowed. The index list is
    /// a constant of the graph: only the gathered values are differentiated.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.rows();
        let cols = self.cols();
        if indices.is_empty() {
            return Err(domain("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(domain("gather_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let idx = indices.to_vec();
        let numel = self.numel();
        Ok(Tensor::from_op("gather_rows", vec![indices.len(), cols], out, vec![self.clone()], move |g| {
            let mut d = vec![0.0; numel];
            for (r, &i) in idx.iter().enumerate() {
                d[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
            }
            vec![Some(d)]
        }))
    }

    /// `out[i] = self.data()[indices[i]]`, laid out with `shape`.
    pub fn gather_elements(&self, indices: &[usize], shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::Shape { op: "gather_elements", lhs: shape, rhs: vec![indices.len()] });
        }
        let numel = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(domain("gather_elements", format!("index {bad} out of {numel}")));
        }
        let src = self.data();
        let out = indices.iter().map(|&i| src[i]).collect();
        let idx = indices.to_vec();
        Ok(Tensor::from_op("gather_elements", shape, out, vec![self.clone()], move |g| {
            let mut d = vec![0.0; numel];
            for (&i, &gv) in idx.iter().zip(g) {
                d[i] += gv;
            }
            vec![Some(d)]
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", vec![1], vec![s], vec![self.clone()], move |g| vec![Some(vec![g[0] / n as f64; n])])
    }

    /// `x / Σx` over all elements. The sum must be strictly positive.
    pub fn normalize_sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(domain("normalize_sum", format!("sum must be positive and finite, got {s}")));
        }
        let out: Vec<f64> = self.data().iter().map(|v| v / s).collect();
        let y = out.clone();
        Ok(Tensor::from_op("normalize_sum", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            // dy_i/dx_j = (δ_ij - y_i) / s
            let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
            vec![Some(g.iter().map(|gi| (gi - dot) / s).collect())]
        }))
    }

    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
        let x = self.clone();
        let out = self.data().iter().map(|&v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())).collect();
        Tensor::from_op("gelu", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let d = x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let u = C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(d)]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let y = out.clone();
        Tensor::from_op("sigmoid", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&y).map(|(gv, s)| gv * s * (1.0 - s)).collect())]
        })
    }
}
