//! Dense NCHW `f32` tensors and the convolution kernels behind the autograd
//! graph (im2col + sgemm).

use crate::error::{Error, Result};
use crate::pixelops::ImageTensor;

/// `[batch, channels, height, width]`
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: Shape, v: f32) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// Stack images into a batch; all must share one shape.
    pub fn from_images(images: &[&ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::arg("cannot batch zero images"))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(Error::shape(format!(
                    "batch mixes shapes {:?} and {:?}",
                    (c, h, w),
                    img.shape()
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            shape: [images.len(), c, h, w],
            data,
        })
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        let (c, h, w) = img.shape();
        Self {
            shape: [1, c, h, w],
            data: img.data().to_vec(),
        }
    }

    /// The `i`-th batch entry as an image.
    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        let [n, c, h, w] = self.shape;
        if i >= n {
            return Err(Error::arg(format!("batch index {i} out of {n}")));
        }
        let len = c * h * w;
        ImageTensor::new(c, h, w, self.data[i * len..(i + 1) * len].to_vec())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of one batch entry.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major operands.
///
/// `op(A)` is `m x k`, `op(B)` is `k x n`. Transposition is expressed through
/// strides, so no copies are made.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertions above bound every index the kernel touches given
    // these strides; `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfold a `c x h x w` image into `(c*k*k) x (h*w)` columns for a stride-1
/// convolution with `pad` zero padding on every side and same-size output.
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f32]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let out_row = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..x_lo].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                    out_row[x_hi..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im_add(col: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let sx = kx as isize - pad as isize;
                let x_lo = (-sx).max(0) as usize;
                let x_hi = (w as isize - sx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s0 = (x_lo as isize + sx) as usize;
                    let src_row = &src[oy * w + x_lo..oy * w + x_hi];
                    for (d, s) in dst_row[s0..s0 + (x_hi - x_lo)].iter_mut().zip(src_row) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1, same-padding 2-D convolution. `w` is `[cout, cin, k, k]`,
/// `b` is `[1, cout, 1, 1]`.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    if wcin != cin || k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let pad = k / 2;
    let hw = h * wd;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        let oi = &mut out.data_mut()[i * cout * hw..(i + 1) * cout * hw];
        let cols: &[f32] = if k == 1 {
            xi
        } else {
            im2col(xi, cin, h, wd, k, pad, &mut col);
            &col
        };
        gemm(cout, kk, hw, w.data(), false, cols, false, 0.0, oi);
        if let Some(b) = b {
            for (co, plane) in oi.chunks_exact_mut(hw).enumerate() {
                let bv = b.data()[co];
                for v in plane {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub(crate) fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, need_dx: bool) -> ConvGrads {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let pad = k / 2;
    let hw = h * wd;
    let kk = cin * k * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    let mut dcol = if need_dx { vec![0.0; kk * hw] } else { Vec::new() };
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        let dyi = &dy.data()[i * cout * hw..(i + 1) * cout * hw];
        for (co, plane) in dyi.chunks_exact(hw).enumerate() {
            db.data_mut()[co] += plane.iter().sum::<f32>();
        }
        let cols: &[f32] = if k == 1 {
            xi
        } else {
            im2col(xi, cin, h, wd, k, pad, &mut col);
            &col
        };
        // dW += dY * cols^T
        gemm(cout, hw, kk, dyi, false, cols, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
            if k == 1 {
                gemm(kk, cout, hw, w.data(), true, dyi, false, 1.0, dxi);
            } else {
                gemm(kk, cout, hw, w.data(), true, dyi, false, 0.0, &mut dcol);
                col2im_add(&dcol, cin, h, wd, k, pad, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
