//! Normalizations, lookups and losses.

use crate::error::{domain, Result, TensorError};
use crate::tensor::Tensor;

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn softmax_impl(op: &'static str, x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    ensure_finite(op, x.data())?;
    let n = x.cols();
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(TensorError::Shape { op, lhs: x.shape().to_vec(), rhs: vec![m.len()] });
        }
    }
    let mut out = vec![0.0; x.numel()];
    for (r, (row, orow)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * n + j]);
        let max = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(domain(op, format!("row {r} has every entry masked")));
        }
        let mut z = 0.0;
        for j in 0..n {
            if keep(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                z += e;
            }
        }
        orow.iter_mut().for_each(|v| *v /= z);
    }
    let y = out.clone();
    Ok(Tensor::from_op(op, x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let mut d = vec![0.0; y.len()];
        for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                dr[j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(d)]
    }))
}

impl Tensor {
    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        softmax_impl("softmax_rows", self, None)
    }

    /// Softmax where entries with `mask == false` get probability exactly 0.
    /// `mask` has one flag per element.
    pub fn softmax_rows_masked(&self, mask: &[bool]) -> Result<Tensor> {
        softmax_impl("softmax_rows_masked", self, Some(mask))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain·x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(TensorError::Shape { op: "layer_norm", lhs: self.shape().to_vec(), rhs: gain.shape().to_vec() });
        }
        if !(eps > 0.0) {
            return Err(domain("layer_norm", "eps must be positive"));
        }
        let rows = self.rows();
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (row, hr)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, v) in hr.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (gd, bd) = (gain.data(), bias.data());
        let out = xhat.chunks(d).flat_map(|hr| hr.iter().zip(gd).zip(bd).map(|((h, g), b)| h * g + b)).collect();
        let gain_t = gain.clone();
        Ok(Tensor::from_op("layer_norm", self.shape().to_vec(), out, vec![self.clone(), gain.clone(), bias.clone()], move |g| {
            let gd = gain_t.data();
            let mut dx = vec![0.0; xhat.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let hr = &xhat[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..d {
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                    let dh = gr[j] * gd[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                }
                let is = inv_std[r];
                for j in 0..d {
                    let dh = gr[j] * gd[j];
                    dx[r * d + j] = is * (dh - sum_dh / d as f64 - hr[j] * sum_dh_h / d as f64);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }))
    }

    /// Rows of the `[V×d]` table selected by `ids`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let v = self.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(domain("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        self.gather_rows(ids)
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2("cross_entropy_rows")?;
        if targets.len() != m {
            return Err(TensorError::Shape { op: "cross_entropy_rows", lhs: self.shape().to_vec(), rhs: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(domain("cross_entropy_rows", format!("target {bad} outside {n} classes")));
        }
        ensure_finite("cross_entropy_rows", self.data())?;
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (i, (row, pr)) in self.data().chunks(n).zip(probs.chunks_mut(n)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in pr.iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[targets[i]];
        }
        loss /= m as f64;
        let t = targets.to_vec();
        Ok(Tensor::from_op("cross_entropy_rows", vec![1], vec![loss], vec![self.clone()], move |g| {
            let scale = g[0] / m as f64;
            let mut d = probs.clone();
            for (i, &ti) in t.iter().enumerate() {
                d[i * n + ti] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(d)]
        }))
    }

    /// Mean binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with `p`
    /// clamped to `[eps, 1-eps]`. Clamped entries pass no gradient.
    pub fn binary_cross_entropy(&self, targets: &[f64], eps: f64) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(TensorError::Shape { op: "binary_cross_entropy", lhs: self.shape().to_vec(), rhs: vec![targets.len()] });
        }
        ensure_finite("binary_cross_entropy", self.data())?;
        let n = self.numel() as f64;
        let clamped: Vec<f64> = self.data().iter().map(|p| p.clamp(eps, 1.0 - eps)).collect();
        let loss = -clamped.iter().zip(targets).map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / n;
        let raw = self.clone();
        let y = targets.to_vec();
        Ok(Tensor::from_op("binary_cross_entropy", vec![1], vec![loss], vec![self.clone()], move |g| {
            let d = raw
                .data()
                .iter()
                .zip(&clamped)
                .zip(&y)
                .map(|((&p, &pc), &yi)| if p != pc { 0.0 } else { g[0] * (-(yi / pc) + (1.0 - yi) / (1.0 - pc)) / n })
                .collect();
            vec![Some(d)]
        }))
    }

    /// Scales each row to unit Euclidean norm (`x / max(‖x‖, eps)`).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let n = self.cols();
        let norms: Vec<f64> = self.data().chunks(n).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps)).collect();
        let out: Vec<f64> = self.data().chunks(n).zip(&norms).flat_map(|(r, &s)| r.iter().map(move |v| v / s)).collect();
        let y = out.clone();
        let x = self.clone();
        Ok(Tensor::from_op("l2_normalize_rows", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let mut d = vec![0.0; y.len()];
            for (r, &s) in norms.iter().enumerate() {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let xr = &x.data()[r * n..(r + 1) * n];
                let raw_norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if raw_norm < eps {
                    d[r * n..(r + 1) * n].iter_mut().zip(gr).for_each(|(a, b)| *a = b / s);
                    continue;
                }
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[r * n + j] = (gr[j] - yr[j] * dot) / s;
                }
            }
            vec![Some(d)]
        }))
    }

    /// Min-max normalization of all elements to `[0, 1]`. A vector with zero
    /// range (including a single element) maps to all 0.5 and passes no
    /// gradient. Ties for the extremes resolve to the lowest index.
    pub fn minmax_normalize(&self) -> Result<Tensor> {
        ensure_finite("minmax_normalize", self.data())?;
        let x = self.data();
        let (mut lo, mut hi) = (0usize, 0usize);
        for (i, &v) in x.iter().enumerate() {
            if v < x[lo] {
                lo = i;
            }
            if v > x[hi] {
                hi = i;
            }
        }
        let range = x[hi] - x[lo];
        let numel = x.len();
        if range == 0.0 {
            return Ok(Tensor::from_op(
                "minmax_normalize",
                self.shape().to_vec(),
                vec![0.5; numel],
                vec![self.clone()],
                move |_| vec![Some(vec![0.0; numel])],
            ));
        }
        let min = x[lo];
        let out: Vec<f64> = x.iter().map(|v| (v - min) / range).collect();
        let y = out.clone();
        Ok(Tensor::from_op("minmax_normalize", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            // y_i = (x_i - x_lo) / (x_hi - x_lo)
            let mut d: Vec<f64> = g.iter().map(|gv| gv / range).collect();
            let sum_g: f64 = g.iter().sum();
            let sum_gy: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
            d[lo] += (sum_gy - sum_g) / range;
            d[hi] -= sum_gy / range;
            vec![Some(d)]
        }))
    }
}
