use super::{GradFn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{matmul_into, MatRef, Scalar};

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj {
            (self.pad - kj).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.in_w + self.pad > kj {
            ((self.in_w - 1 + self.pad - kj) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one sample into a (C·k·k) × (OH·OW) column matrix.
    fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst_row.fill(T::zero());
                            continue;
                        }
                        let src = &input[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        let start = lo * self.stride + kj - self.pad;
                        for d in &mut dst_row[..lo] {
                            *d = T::zero();
                        }
                        if self.stride == 1 {
                            for (d, s) in dst_row[lo..hi].iter_mut().zip(&src[start..start + hi - lo]) {
                                *d = *s;
                            }
                        } else {
                            for (i, d) in dst_row[lo..hi].iter_mut().enumerate() {
                                *d = src[start + i * self.stride];
                            }
                        }
                        for d in &mut dst_row[hi..] {
                            *d = T::zero();
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, adding.
    fn col2im<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut grad_input[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        let src_row = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        let start = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            for (d, s) in dst[start..start + src_row.len()].iter_mut().zip(src_row) {
                                *d = *d + *s;
                            }
                        } else {
                            for (i, s) in src_row.iter().enumerate() {
                                let d = &mut dst[start + i * self.stride];
                                *d = *d + *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    geo: ConvGeometry,
}

impl<T: Scalar> GradFn<T> for Conv2dBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.input, &self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let g = self.geo;
        let plane = g.out_plane();
        let patch = g.patch_len();
        let out_sample = g.out_c * plane;

        if let Some(bias) = &self.bias {
            bias.with_grad_mut(|gb| {
                for n in 0..g.batch {
                    for (o, gb) in gb.iter_mut().enumerate() {
                        let s: T = grad[n * out_sample + o * plane..][..plane].iter().copied().sum();
                        *gb = *gb + s;
                    }
                }
            });
        }

        let need_w = self.weight.requires_grad();
        let need_x = self.input.requires_grad();
        if !need_w && !need_x {
            return;
        }
        let x = self.input.data();
        let w = self.weight.data();
        let mut cols = vec![T::zero(); patch * plane];
        let mut gw = if need_w {
            vec![T::zero(); g.out_c * patch]
        } else {
            Vec::new()
        };
        let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
        for n in 0..g.batch {
            let gy = MatRef::new(&grad[n * out_sample..(n + 1) * out_sample], g.out_c, plane);
            if need_w {
                g.im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
                matmul_into(gy, MatRef::new(&cols, patch, plane).t(), &mut gw, true);
            }
            if need_x {
                matmul_into(MatRef::new(&w, g.out_c, patch).t(), gy, &mut cols, false);
                g.col2im(&cols, &mut gx[n * g.in_sample()..(n + 1) * g.in_sample()]);
            }
        }
        drop((x, w));
        if need_w {
            self.weight.accumulate_grad(&gw);
        }
        if need_x {
            self.input.accumulate_grad(&gx);
        }
    }
}

struct LinearBackward<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Scalar> GradFn<T> for LinearBackward<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.input, &self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn backward(&self, _output: &[T], grad: &[T]) {
        let (n, f) = (self.input.shape()[0], self.input.shape()[1]);
        let o = self.weight.shape()[1];
        let gy = MatRef::new(grad, n, o);
        if let Some(bias) = &self.bias {
            bias.with_grad_mut(|gb| {
                for row in grad.chunks(o) {
                    for (b, g) in gb.iter_mut().zip(row) {
                        *b = *b + *g;
                    }
                }
            });
        }
        if self.weight.requires_grad() {
            let x = self.input.data();
            let mut gw = vec![T::zero(); f * o];
            matmul_into(MatRef::new(&x, n, f).t(), gy, &mut gw, false);
            drop(x);
            self.weight.accumulate_grad(&gw);
        }
        if self.input.requires_grad() {
            let w = self.weight.data();
            let mut gx = vec![T::zero(); n * f];
            matmul_into(gy, MatRef::new(&w, f, o).t(), &mut gx, false);
            drop(w);
            self.input.accumulate_grad(&gx);
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-d cross-correlation of an `(N, C, H, W)` input with an
    /// `(O, C, k, k)` kernel, zero padding on every side.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} and weight {ws:?} must be 4-d"),
            ));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} is not square", ws[2], ws[3]),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} filters", b.shape(), ws[0]),
                ));
            }
        }
        let k = ws[2];
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if k == 0 || k > ph || k > pw {
            return Err(Error::shape(
                "conv2d",
                format!("{k}x{k} kernel does not fit the padded {ph}x{pw} input"),
            ));
        }
        let geo = ConvGeometry {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            k,
            stride,
            pad: padding,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        };

        let plane = geo.out_plane();
        let patch = geo.patch_len();
        let out_sample = geo.out_c * plane;
        let mut out = vec![T::zero(); geo.batch * out_sample];
        {
            let x = self.data();
            let w = weight.data();
            let b = bias.map(|b| b.data());
            let mut cols = vec![T::zero(); patch * plane];
            for n in 0..geo.batch {
                let y = &mut out[n * out_sample..(n + 1) * out_sample];
                if let Some(b) = &b {
                    for (o, bv) in b.iter().enumerate() {
                        y[o * plane..(o + 1) * plane].fill(*bv);
                    }
                }
                geo.im2col(&x[n * geo.in_sample()..(n + 1) * geo.in_sample()], &mut cols);
                matmul_into(
                    MatRef::new(&w, geo.out_c, patch),
                    MatRef::new(&cols, patch, plane),
                    y,
                    true,
                );
            }
        }
        Ok(Tensor::from_op(
            vec![geo.batch, geo.out_c, geo.out_h, geo.out_w],
            out,
            Conv2dBackward {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geo,
            },
        ))
    }

    /// `(N, F) · (F, O) + (O)`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("linear", format!("input {xs:?} against weight {ws:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape("linear", format!("bias {:?} for {o} outputs", b.shape())));
            }
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            let b = b.data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(&b);
            }
        }
        matmul_into(
            MatRef::new(&self.data(), n, f),
            MatRef::new(&weight.data(), f, o),
            &mut out,
            true,
        );
        Ok(Tensor::from_op(
            vec![n, o],
            out,
            LinearBackward {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct four-loop cross-correlation, independent of im2col.
    fn conv_naive(
        x: &[f64],
        xs: [usize; 4],
        w: &[f64],
        ws: [usize; 4],
        b: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for s in 0..n {
            for f in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[f]);
                        for ch in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((s * c + ch) * h + iy as usize) * wd + ix as usize]
                                            * w[((f * c + ch) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out[((s * o + f) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn averaging_kernel_stride_two() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 0.25);
        let y = x.conv2d(&w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn hundred_filters_keep_spatial_size() {
        let x = Tensor::<f32>::zeros(&[1, 1, 28, 28]);
        let w = Tensor::zeros(&[100, 1, 3, 3]);
        let b = Tensor::zeros(&[100]);
        assert_eq!(x.conv2d(&w, Some(&b), 1, 1).unwrap().shape(), &[1, 100, 28, 28]);
    }

    #[test]
    fn matches_naive_loops() {
        let xs = [2, 3, 5, 4];
        let ws = [4, 3, 3, 3];
        let x: Vec<f64> = (0..120).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let w: Vec<f64> = (0..108).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let got = Tensor::new(&xs, x.clone())
                .unwrap()
                .conv2d(
                    &Tensor::new(&ws, w.clone()).unwrap(),
                    Some(&Tensor::new(&[4], b.clone()).unwrap()),
                    stride,
                    pad,
                )
                .unwrap()
                .to_vec();
            let want = conv_naive(&x, xs, &w, ws, Some(&b), stride, pad);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "stride {stride} pad {pad}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(x.conv2d(&w, None, 1, 0), Err(Error::Shape { .. })));
        assert!(x.conv2d(&w, None, 1, 1).is_ok());
        let wrong_c = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(x.conv2d(&wrong_c, None, 1, 0).is_err());
    }

    #[test]
    fn linear_hand_product() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(x.linear(&w, Some(&b)).unwrap().to_vec(), vec![4.0, 7.0]);

        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(x.linear(&eye, Some(&Tensor::zeros(&[2]))).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn linear_shapes() {
        let x = Tensor::<f32>::zeros(&[3, 9800]);
        let w = Tensor::zeros(&[9800, 10]);
        assert_eq!(x.linear(&w, Some(&Tensor::zeros(&[10]))).unwrap().shape(), &[3, 10]);
        assert!(x.linear(&Tensor::zeros(&[9799, 10]), None).is_err());
    }
}
