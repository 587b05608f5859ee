//! Structural and composite tensor operations: matrix products, tempered
//! softmax, shape surgery, and the small custom kernels used by the
//! estimation pipeline (2x2 inverse, quaternion product, bilinear sampling,
//! table interpolation, per-column L2 normalization).

use super::{gemm, tape, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Matrix product of two 2-D tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || rhs.shape().len() != 2 {
            return Err(Error::invalid("matmul", "operands must be 2-D"));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        gemm::dgemm(m, k, n, 1.0, &self.data_ref(), &rhs.data_ref(), 0.0, &mut data);
        let requires = self.requires_grad() || rhs.requires_grad();
        let out = Tensor::make(data, vec![m, n], requires);
        if requires {
            let (ta, tb) = (self.clone(), rhs.clone());
            let mut ids = Vec::new();
            if ta.requires_grad() {
                ids.push(ta.id());
            }
            if tb.requires_grad() {
                ids.push(tb.id());
            }
            tape::record(
                out.clone(),
                ids,
                Box::new(move |g| {
                    if ta.requires_grad() {
                        let bd = tb.data_ref();
                        ta.accumulate_grad(|ga| {
                            // dA += G * B^T
                            gemm::dgemm_nt(m, n, k, 1.0, g, &bd, 1.0, ga);
                        });
                    }
                    if tb.requires_grad() {
                        let ad = ta.data_ref();
                        tb.accumulate_grad(|gb| {
                            // dB += A^T * G
                            gemm::dgemm_tn(k, m, n, 1.0, &ad, g, 1.0, gb);
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    /// `[m,k] x [k] -> [m]` convenience built on `matmul`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let k = v.len();
        let out = self.matmul(&v.reshape(&[k, 1])?)?;
        let m = out.shape()[0];
        out.reshape(&[m])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::invalid("transpose", "operand must be 2-D"));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data_ref();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        let out = Tensor::make(data, vec![c, r], self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    input.accumulate_grad(|gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Tempered softmax along `axis`: `softmax(x / kappa)` with per-lane
    /// max subtraction, so large logit magnitudes and small temperatures do
    /// not overflow.
    pub fn softmax(&self, axis: usize, kappa: f64) -> Result<Tensor> {
        if kappa <= 0.0 {
            return Err(Error::NonPositiveTemperature(kappa));
        }
        if axis >= self.shape().len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let shape = self.shape().to_vec();
        let lane = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data_ref();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for l in 0..lane {
                    maxv = maxv.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = ((src[base + l * inner] - maxv) / kappa).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    data[base + l * inner] /= sum;
                }
            }
        }
        drop(src);
        let out = Tensor::make(data, shape, self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            let y = out.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    let yd = y.data_ref();
                    input.accumulate_grad(|gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * lane * inner + i;
                                let mut dot = 0.0;
                                for l in 0..lane {
                                    let p = base + l * inner;
                                    dot += g[p] * yd[p];
                                }
                                for l in 0..lane {
                                    let p = base + l * inner;
                                    gx[p] += yd[p] * (g[p] - dot) / kappa;
                                }
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Copy with a new shape (same number of elements).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        let out = Tensor::make(self.to_vec(), shape.to_vec(), self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    input.accumulate_grad(|gx| {
                        for (gi, gv) in gx.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} for shape {:?}", start + len, shape),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let lane = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.data_ref();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * lane + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let out = Tensor::make(data, out_shape, self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    input.accumulate_grad(|gx| {
                        for o in 0..outer {
                            let dst = (o * lane + start) * inner;
                            let srcb = o * len * inner;
                            for i in 0..len * inner {
                                gx[dst + i] += g[srcb + i];
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Inverse of a 2x2 matrix, differentiable through the closed form.
    pub fn inv2x2(&self) -> Result<Tensor> {
        if self.shape() != [2, 2] {
            return Err(Error::invalid("inv2x2", "operand must be 2x2"));
        }
        let d = self.data_ref();
        let (a, b, c, dd) = (d[0], d[1], d[2], d[3]);
        drop(d);
        let det = a * dd - b * c;
        let scale = a.abs().max(b.abs()).max(c.abs()).max(dd.abs());
        if det.abs() <= 1e-300 || det.abs() < 1e-14 * scale * scale {
            return Err(Error::DegenerateGeometry(format!(
                "2x2 inverse with determinant {det:.3e}"
            )));
        }
        let inv = vec![dd / det, -b / det, -c / det, a / det];
        let out = Tensor::make(inv, vec![2, 2], self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            let y = out.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    // dA = -Y^T G Y^T for Y = A^{-1}
                    let yd = y.data_ref();
                    let yt = [yd[0], yd[2], yd[1], yd[3]];
                    let mut tmp = [0.0; 4];
                    for i in 0..2 {
                        for j in 0..2 {
                            tmp[i * 2 + j] = yt[i * 2] * g[j] + yt[i * 2 + 1] * g[2 + j];
                        }
                    }
                    let mut da = [0.0; 4];
                    for i in 0..2 {
                        for j in 0..2 {
                            da[i * 2 + j] =
                                -(tmp[i * 2] * yt[j] + tmp[i * 2 + 1] * yt[2 + j]);
                        }
                    }
                    drop(yd);
                    input.accumulate_grad(|gx| {
                        for i in 0..4 {
                            gx[i] += da[i];
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Hamilton quaternion product of two `[4]` tensors stored (w, x, y, z).
    pub fn quat_mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != [4] || rhs.shape() != [4] {
            return Err(Error::invalid("quat_mul", "operands must have shape [4]"));
        }
        let a = self.to_vec();
        let b = rhs.to_vec();
        let data = vec![
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ];
        let requires = self.requires_grad() || rhs.requires_grad();
        let out = Tensor::make(data, vec![4], requires);
        if requires {
            let (ta, tb) = (self.clone(), rhs.clone());
            let mut ids = Vec::new();
            if ta.requires_grad() {
                ids.push(ta.id());
            }
            if tb.requires_grad() {
                ids.push(tb.id());
            }
            tape::record(
                out.clone(),
                ids,
                Box::new(move |g| {
                    let a = ta.to_vec();
                    let b = tb.to_vec();
                    if ta.requires_grad() {
                        let da = [
                            g[0] * b[0] + g[1] * b[1] + g[2] * b[2] + g[3] * b[3],
                            -g[0] * b[1] + g[1] * b[0] - g[2] * b[3] + g[3] * b[2],
                            -g[0] * b[2] + g[1] * b[3] + g[2] * b[0] - g[3] * b[1],
                            -g[0] * b[3] - g[1] * b[2] + g[2] * b[1] + g[3] * b[0],
                        ];
                        ta.accumulate_grad(|gx| {
                            for i in 0..4 {
                                gx[i] += da[i];
                            }
                        });
                    }
                    if tb.requires_grad() {
                        let db = [
                            g[0] * a[0] + g[1] * a[1] + g[2] * a[2] + g[3] * a[3],
                            -g[0] * a[1] + g[1] * a[0] + g[2] * a[3] - g[3] * a[2],
                            -g[0] * a[2] - g[1] * a[3] + g[2] * a[0] + g[3] * a[1],
                            -g[0] * a[3] + g[1] * a[2] - g[2] * a[1] + g[3] * a[0],
                        ];
                        tb.accumulate_grad(|gx| {
                            for i in 0..4 {
                                gx[i] += db[i];
                            }
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Bilinear sample of a `[H,W]` map at fractional coordinates
    /// (`u` = row, `v` = column), differentiable with respect to the map and
    /// both coordinates. Coordinates are clamped to the map extent; the
    /// coordinate gradient is zero in the clamped regime.
    pub fn bilinear_sample(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        let s = sample_channels_impl(self, u, v, false)?;
        s.reshape(&[1])
    }

    /// Bilinear sample of a `[C,H,W]` stack at one location: returns `[C]`.
    pub fn bilinear_sample_channels(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        sample_channels_impl(self, u, v, true)
    }

    /// Bilinear sample of a `[C, H*W]` tensor (one column per pixel of an
    /// H x W grid) at one location: returns `[C]`. Equivalent to
    /// [`Tensor::bilinear_sample_channels`] without materializing the
    /// `[C,H,W]` view.
    pub fn bilinear_sample_flat(
        &self,
        h: usize,
        w: usize,
        u: &Tensor,
        v: &Tensor,
    ) -> Result<Tensor> {
        if self.shape().len() != 2 || self.shape()[1] != h * w {
            return Err(Error::invalid(
                "bilinear_sample_flat",
                format!("map {:?} does not flatten a {h}x{w} grid", self.shape()),
            ));
        }
        let c = self.shape()[0];
        sample_channels_dims(self, c, h, w, u, v)
    }

    /// Piecewise-linear interpolation of a fixed table at fractional index
    /// `x` (scalar), differentiable with respect to `x`.
    pub fn interp_table(&self, table: &[f64]) -> Result<Tensor> {
        if self.len() != 1 {
            return Err(Error::invalid("interp_table", "index must be scalar"));
        }
        if table.len() < 2 {
            return Err(Error::invalid("interp_table", "table needs >= 2 entries"));
        }
        let n = table.len();
        let x = self.item();
        let xc = x.clamp(0.0, (n - 1) as f64);
        let i0 = (xc.floor() as usize).min(n - 2);
        let f = xc - i0 as f64;
        let val = table[i0] * (1.0 - f) + table[i0 + 1] * f;
        let slope = if x < 0.0 || x > (n - 1) as f64 {
            0.0
        } else {
            table[i0 + 1] - table[i0]
        };
        let out = Tensor::make(vec![val], vec![1], self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    input.accumulate_grad(|gx| gx[0] += slope * g[0]);
                }),
            );
        }
        Ok(out)
    }

    /// L2-normalize each column of a `[C,M]` tensor (small epsilon inside the
    /// square root keeps all-zero columns finite).
    pub fn l2_normalize_cols(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::invalid("l2_normalize_cols", "operand must be 2-D"));
        }
        let (c, m) = (self.shape()[0], self.shape()[1]);
        const EPS: f64 = 1e-24;
        let src = self.data_ref();
        let mut norms = vec![0.0; m];
        for ci in 0..c {
            for j in 0..m {
                let v = src[ci * m + j];
                norms[j] += v * v;
            }
        }
        for nj in norms.iter_mut() {
            *nj = (*nj + EPS).sqrt();
        }
        let mut data = vec![0.0; c * m];
        for ci in 0..c {
            for j in 0..m {
                data[ci * m + j] = src[ci * m + j] / norms[j];
            }
        }
        drop(src);
        let out = Tensor::make(data, vec![c, m], self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    let xd = input.data_ref();
                    // dx = g / r - x * (g . x) / r^3, per column
                    let mut dots = vec![0.0; m];
                    for ci in 0..c {
                        for j in 0..m {
                            dots[j] += g[ci * m + j] * xd[ci * m + j];
                        }
                    }
                    input.accumulate_grad(|gx| {
                        for ci in 0..c {
                            for j in 0..m {
                                let r = norms[j];
                                gx[ci * m + j] +=
                                    g[ci * m + j] / r - xd[ci * m + j] * dots[j] / (r * r * r);
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }
}

fn sample_channels_impl(map: &Tensor, u: &Tensor, v: &Tensor, stacked: bool) -> Result<Tensor> {
    let (c, h, w) = if stacked {
        if map.shape().len() != 3 {
            return Err(Error::invalid("bilinear_sample", "map must be [C,H,W]"));
        }
        (map.shape()[0], map.shape()[1], map.shape()[2])
    } else {
        if map.shape().len() != 2 {
            return Err(Error::invalid("bilinear_sample", "map must be [H,W]"));
        }
        (1, map.shape()[0], map.shape()[1])
    };
    sample_channels_dims(map, c, h, w, u, v)
}

/// Core bilinear sampler over a row-major `[c,h,w]` buffer (the declared
/// tensor shape may be any flattening of it).
fn sample_channels_dims(
    map: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    u: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    if u.len() != 1 || v.len() != 1 {
        return Err(Error::invalid("bilinear_sample", "coordinates must be scalar"));
    }
    let (uv, vv) = (u.item(), v.item());
    let uc = uv.clamp(0.0, (h - 1) as f64);
    let vc = vv.clamp(0.0, (w - 1) as f64);
    let i0 = (uc.floor() as usize).min(h.saturating_sub(2));
    let j0 = (vc.floor() as usize).min(w.saturating_sub(2));
    let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
    let fu = uc - i0 as f64;
    let fv = vc - j0 as f64;
    let u_in = (0.0..=(h - 1) as f64).contains(&uv);
    let v_in = (0.0..=(w - 1) as f64).contains(&vv);

    let plane = h * w;
    let src = map.data_ref();
    let mut vals = Vec::with_capacity(c);
    for ch in 0..c {
        let base = ch * plane;
        let m00 = src[base + i0 * w + j0];
        let m10 = src[base + i1 * w + j0];
        let m01 = src[base + i0 * w + j1];
        let m11 = src[base + i1 * w + j1];
        vals.push(
            m00 * (1.0 - fu) * (1.0 - fv) + m10 * fu * (1.0 - fv) + m01 * (1.0 - fu) * fv
                + m11 * fu * fv,
        );
    }
    drop(src);
    let requires = map.requires_grad() || u.requires_grad() || v.requires_grad();
    let out = Tensor::make(vals, vec![c], requires);
    if requires {
        let (tm, tu, tv) = (map.clone(), u.clone(), v.clone());
        let mut ids = Vec::new();
        for t in [&tm, &tu, &tv] {
            if t.requires_grad() {
                ids.push(t.id());
            }
        }
        tape::record(
            out.clone(),
            ids,
            Box::new(move |g| {
                if tm.requires_grad() {
                    tm.accumulate_grad(|gm| {
                        for ch in 0..c {
                            let base = ch * plane;
                            gm[base + i0 * w + j0] += g[ch] * (1.0 - fu) * (1.0 - fv);
                            gm[base + i1 * w + j0] += g[ch] * fu * (1.0 - fv);
                            gm[base + i0 * w + j1] += g[ch] * (1.0 - fu) * fv;
                            gm[base + i1 * w + j1] += g[ch] * fu * fv;
                        }
                    });
                }
                let md = tm.data_ref();
                if tu.requires_grad() && u_in {
                    let mut du = 0.0;
                    for ch in 0..c {
                        let base = ch * plane;
                        let m00 = md[base + i0 * w + j0];
                        let m10 = md[base + i1 * w + j0];
                        let m01 = md[base + i0 * w + j1];
                        let m11 = md[base + i1 * w + j1];
                        du += g[ch] * ((m10 - m00) * (1.0 - fv) + (m11 - m01) * fv);
                    }
                    tu.accumulate_grad(|gu| gu[0] += du);
                }
                if tv.requires_grad() && v_in {
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let base = ch * plane;
                        let m00 = md[base + i0 * w + j0];
                        let m10 = md[base + i1 * w + j0];
                        let m01 = md[base + i0 * w + j1];
                        let m11 = md[base + i1 * w + j1];
                        dv += g[ch] * ((m01 - m00) * (1.0 - fu) + (m11 - m10) * fu);
                    }
                    tv.accumulate_grad(|gv| gv[0] += dv);
                }
            }),
        );
    }
    Ok(out)
}

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat", "no tensors given"));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::invalid("concat", format!("axis {axis} out of range")));
    }
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::invalid("concat", "rank mismatch"));
        }
        for (d, (a, b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = vec![0.0; out_shape.iter().product()];
    let total_lane = out_shape[axis];
    let mut offset = 0usize;
    for p in parts {
        let lane = p.shape()[axis];
        let src = p.data_ref();
        for o in 0..outer {
            let dst = (o * total_lane + offset) * inner;
            let sb = o * lane * inner;
            data[dst..dst + lane * inner].copy_from_slice(&src[sb..sb + lane * inner]);
        }
        offset += lane;
    }
    let requires = parts.iter().any(|p| p.requires_grad());
    let out = Tensor::make(data, out_shape, requires);
    if requires {
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let lanes: Vec<usize> = owned.iter().map(|p| p.shape()[axis]).collect();
        let ids: Vec<u64> = owned
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| p.id())
            .collect();
        tape::record(
            out.clone(),
            ids,
            Box::new(move |g| {
                let mut offset = 0usize;
                for (p, &lane) in owned.iter().zip(&lanes) {
                    if p.requires_grad() {
                        p.accumulate_grad(|gx| {
                            for o in 0..outer {
                                let src = (o * total_lane + offset) * inner;
                                let dst = o * lane * inner;
                                for i in 0..lane * inner {
                                    gx[dst + i] += g[src + i];
                                }
                            }
                        });
                    }
                    offset += lane;
                }
            }),
        );
    }
    Ok(out)
}

/// Stack `[k]`-shaped tensors into an `[n,k]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let k = rows
        .first()
        .ok_or_else(|| Error::invalid("stack_rows", "no rows"))?
        .len();
    let reshaped: Vec<Tensor> = rows
        .iter()
        .map(|r| r.reshape(&[1, k]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = reshaped.iter().collect();
    concat(&refs, 0)
}
