//! 2-D convolution (cross-correlation), pooling and bilinear resizing for
//! `[C,H,W]` feature stacks.

use std::rc::Rc;

use super::{gemm, tape, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Cross-correlation of a `[C,H,W]` input with `[O,C,k,k]` kernels.
    /// Kernel size must be odd; `stride = 1` with `padding = (k-1)/2`
    /// preserves the spatial extent. Lowered to GEMM via im2col, with a
    /// direct path for 1x1 kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.shape().len() != 3 || kernels.shape().len() != 4 {
            return Err(Error::invalid(
                "conv2d",
                "expected input [C,H,W] and kernels [O,C,k,k]",
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (o, kc, kh, kw) = (
            kernels.shape()[0],
            kernels.shape()[1],
            kernels.shape()[2],
            kernels.shape()[3],
        );
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", "kernel must be square with odd size"));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid("conv2d", "kernel larger than padded input"));
        }
        if (h + 2 * padding - k) % stride != 0 || (w + 2 * padding - k) % stride != 0 {
            return Err(Error::invalid(
                "conv2d",
                "padded extent minus kernel must be divisible by stride",
            ));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let requires = self.requires_grad() || kernels.requires_grad();

        if k == 1 && stride == 1 && padding == 0 {
            // 1x1 convolution is a plain channel mix: [O,C] x [C,HW].
            let hw = h * w;
            let mut data = vec![0.0; o * hw];
            gemm::dgemm(o, c, hw, 1.0, &kernels.data_ref(), &self.data_ref(), 0.0, &mut data);
            let out = Tensor::make(data, vec![o, oh, ow], requires);
            if requires {
                let (tin, tk) = (self.clone(), kernels.clone());
                let mut ids = Vec::new();
                if tin.requires_grad() {
                    ids.push(tin.id());
                }
                if tk.requires_grad() {
                    ids.push(tk.id());
                }
                tape::record(
                    out.clone(),
                    ids,
                    Box::new(move |g| {
                        if tk.requires_grad() {
                            let xd = tin.data_ref();
                            tk.accumulate_grad(|gk| {
                                gemm::dgemm_nt(o, hw, c, 1.0, g, &xd, 1.0, gk);
                            });
                        }
                        if tin.requires_grad() {
                            let kd = tk.data_ref();
                            tin.accumulate_grad(|gx| {
                                gemm::dgemm_tn(c, o, hw, 1.0, &kd, g, 1.0, gx);
                            });
                        }
                    }),
                );
            }
            return Ok(out);
        }

        let rows = c * k * k;
        let cols_n = oh * ow;
        let cols = Rc::new(im2col(
            &self.data_ref(),
            c,
            h,
            w,
            k,
            stride,
            padding,
            oh,
            ow,
        ));
        let mut data = vec![0.0; o * cols_n];
        gemm::dgemm(o, rows, cols_n, 1.0, &kernels.data_ref(), &cols, 0.0, &mut data);
        let out = Tensor::make(data, vec![o, oh, ow], requires);
        if requires {
            let (tin, tk) = (self.clone(), kernels.clone());
            let cols_saved = Rc::clone(&cols);
            let mut ids = Vec::new();
            if tin.requires_grad() {
                ids.push(tin.id());
            }
            if tk.requires_grad() {
                ids.push(tk.id());
            }
            tape::record(
                out.clone(),
                ids,
                Box::new(move |g| {
                    if tk.requires_grad() {
                        tk.accumulate_grad(|gk| {
                            // dK += G[o, cols_n] * cols^T
                            gemm::dgemm_nt(o, cols_n, rows, 1.0, g, &cols_saved, 1.0, gk);
                        });
                    }
                    if tin.requires_grad() {
                        let kd = tk.data_ref();
                        let mut dcols = vec![0.0; rows * cols_n];
                        gemm::dgemm_tn(rows, o, cols_n, 1.0, &kd, g, 0.0, &mut dcols);
                        drop(kd);
                        tin.accumulate_grad(|gx| {
                            col2im_add(&dcols, c, h, w, k, stride, padding, oh, ow, gx);
                        });
                    }
                }),
            );
        }
        Ok(out)
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(Error::invalid("avg_pool2", "expected [C,H,W]"));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("avg_pool2", "extents must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data_ref();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let b = ch * h * w + 2 * i * w + 2 * j;
                    data[ch * oh * ow + i * ow + j] =
                        0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                }
            }
        }
        drop(src);
        let out = Tensor::make(data, vec![c, oh, ow], self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    input.accumulate_grad(|gx| {
                        for ch in 0..c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = 0.25 * g[ch * oh * ow + i * ow + j];
                                    let b = ch * h * w + 2 * i * w + 2 * j;
                                    gx[b] += gv;
                                    gx[b + 1] += gv;
                                    gx[b + w] += gv;
                                    gx[b + w + 1] += gv;
                                }
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Bilinear resize of a `[C,H,W]` stack (or `[H,W]` map) to `(th, tw)`.
    /// Corner-aligned, matching [`crate::mat::Mat::resize_bilinear`].
    pub fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Tensor> {
        let (c, h, w, flat) = match self.shape() {
            [h, w] => (1usize, *h, *w, true),
            [c, h, w] => (*c, *h, *w, false),
            _ => return Err(Error::invalid("upsample_bilinear", "expected [C,H,W] or [H,W]")),
        };
        if th < 2 || tw < 2 || h < 2 || w < 2 {
            return Err(Error::invalid("upsample_bilinear", "extents must be >= 2"));
        }
        let sr = (h - 1) as f64 / (th - 1) as f64;
        let sc = (w - 1) as f64 / (tw - 1) as f64;
        // Precompute the interpolation stencil once per row/column.
        let rstencil: Vec<(usize, usize, f64)> = (0..th)
            .map(|i| {
                let f = i as f64 * sr;
                let i0 = (f.floor() as usize).min(h - 2);
                (i0, i0 + 1, f - i0 as f64)
            })
            .collect();
        let cstencil: Vec<(usize, usize, f64)> = (0..tw)
            .map(|j| {
                let f = j as f64 * sc;
                let j0 = (f.floor() as usize).min(w - 2);
                (j0, j0 + 1, f - j0 as f64)
            })
            .collect();
        let src = self.data_ref();
        let mut data = vec![0.0; c * th * tw];
        for ch in 0..c {
            let ib = ch * h * w;
            let ob = ch * th * tw;
            for (i, &(i0, i1, fi)) in rstencil.iter().enumerate() {
                for (j, &(j0, j1, fj)) in cstencil.iter().enumerate() {
                    data[ob + i * tw + j] = src[ib + i0 * w + j0] * (1.0 - fi) * (1.0 - fj)
                        + src[ib + i1 * w + j0] * fi * (1.0 - fj)
                        + src[ib + i0 * w + j1] * (1.0 - fi) * fj
                        + src[ib + i1 * w + j1] * fi * fj;
                }
            }
        }
        drop(src);
        let out_shape = if flat { vec![th, tw] } else { vec![c, th, tw] };
        let out = Tensor::make(data, out_shape, self.requires_grad());
        if out.requires_grad() {
            let input = self.clone();
            tape::record(
                out.clone(),
                vec![input.id()],
                Box::new(move |g| {
                    input.accumulate_grad(|gx| {
                        for ch in 0..c {
                            let ib = ch * h * w;
                            let ob = ch * th * tw;
                            for (i, &(i0, i1, fi)) in rstencil.iter().enumerate() {
                                for (j, &(j0, j1, fj)) in cstencil.iter().enumerate() {
                                    let gv = g[ob + i * tw + j];
                                    gx[ib + i0 * w + j0] += gv * (1.0 - fi) * (1.0 - fj);
                                    gx[ib + i1 * w + j0] += gv * fi * (1.0 - fj);
                                    gx[ib + i0 * w + j1] += gv * (1.0 - fi) * fj;
                                    gx[ib + i1 * w + j1] += gv * fi * fj;
                                }
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let cols_n = oh * ow;
    let mut cols = vec![0.0; c * k * k * cols_n];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let srow = ch * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * ow + oj] = src[srow + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let cols_n = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &dcols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let drow = ch * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out[drow + jj as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape;
    use super::super::testutil::{finite_diff, rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identity_1x1_kernel() {
        let x = Tensor::from_vec((0..12).map(f64::from).collect(), &[1, 3, 4]).unwrap();
        let k = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        let x = Tensor::filled(&[1, 6, 6], 3.0);
        let k = Tensor::from_vec(vec![1.0 / 9.0; 9], &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap();
        let yd = y.to_vec();
        // interior pixels keep the constant
        for i in 1..5 {
            for j in 1..5 {
                assert!((yd[i * 6 + j] - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(x.conv2d(&k, 1, 1).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(x.conv2d(&k, 1, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        tape::clear();
        let x = Tensor::param(
            (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[2, 8, 8],
        )
        .unwrap();
        let k = Tensor::param(
            (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[3, 2, 3, 3],
        )
        .unwrap();
        let loss = x.conv2d(&k, 1, 1).unwrap().square().sum();
        loss.backward().unwrap();
        let (gx, gk) = (x.grad().unwrap(), k.grad().unwrap());
        tape::clear();
        let eval = || {
            let v = x.conv2d(&k, 1, 1).unwrap().square().sum().item();
            tape::clear();
            v
        };
        for idx in [0, 17, 63, 127] {
            let fd = finite_diff(&x, idx, 1e-5, eval);
            assert!(rel_err(gx[idx], fd) < 1e-5, "dX[{idx}] {} vs {fd}", gx[idx]);
        }
        for idx in [0, 10, 29, 53] {
            let fd = finite_diff(&k, idx, 1e-5, eval);
            assert!(rel_err(gk[idx], fd) < 1e-5, "dK[{idx}] {} vs {fd}", gk[idx]);
        }
    }

    #[test]
    fn strided_conv_shapes_and_guards() {
        let x = Tensor::zeros(&[1, 9, 9]);
        let k = Tensor::from_vec(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&k, 2, 1).unwrap(); // (9 + 2 - 3)/2 + 1 = 5
        assert_eq!(y.shape(), &[1, 5, 5]);
        // 8 + 2 - 3 = 7 is not divisible by stride 2
        let x = Tensor::zeros(&[1, 8, 8]);
        assert!(x.conv2d(&k, 2, 1).is_err());
    }

    #[test]
    fn avg_pool_and_upsample_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        tape::clear();
        let x = Tensor::param(
            (0..1 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[1, 4, 4],
        )
        .unwrap();
        let loss = x
            .avg_pool2()
            .unwrap()
            .upsample_bilinear(4, 4)
            .unwrap()
            .square()
            .sum();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        tape::clear();
        for idx in [0, 5, 15] {
            let fd = finite_diff(&x, idx, 1e-6, || {
                let v = x
                    .avg_pool2()
                    .unwrap()
                    .upsample_bilinear(4, 4)
                    .unwrap()
                    .square()
                    .sum()
                    .item();
                tape::clear();
                v
            });
            assert!(rel_err(g[idx], fd) < 1e-6, "[{idx}] {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn upsample_matches_mat_resize() {
        let data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = Tensor::from_vec(data.clone(), &[4, 5]).unwrap();
        let m = crate::mat::Mat::from_vec(4, 5, data).unwrap();
        let a = t.upsample_bilinear(8, 10).unwrap();
        let b = m.resize_bilinear(8, 10);
        for (x, y) in a.to_vec().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
