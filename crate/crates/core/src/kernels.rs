//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices; shape validation happens in the tape.

/// `C = alpha * A·B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// Fills `cols` (patch_len × out_plane) from one example.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (h, w) = (self.height, self.width);
        let (oh, ow) = (self.out_height, self.out_width);
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            *o = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto one example's input gradient.
    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (h, w) = (self.height, self.width);
        let (oh, ow) = (self.out_height, self.out_width);
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_len()];
    let mut cols = vec![0.0; g.patch_len() * g.out_plane()];
    let (pl, op) = (g.patch_len(), g.out_plane());
    for n in 0..g.batch {
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        gemm(
            g.out_channels,
            pl,
            op,
            1.0,
            weight,
            (pl, 1),
            &cols,
            (op, 1),
            0.0,
            &mut out[n * g.out_len()..(n + 1) * g.out_len()],
            op,
        );
    }
    out
}

/// Returns `(dx, dweight)`, each only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (pl, op) = (g.patch_len(), g.out_plane());
    let mut dx = need_dx.then(|| vec![0.0; g.batch * g.in_len()]);
    let mut dw = need_dw.then(|| vec![0.0; g.out_channels * pl]);
    let mut cols = vec![0.0; pl * op];
    for n in 0..g.batch {
        let dy_n = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            // dW += dY · colsᵀ
            gemm(g.out_channels, op, pl, 1.0, dy_n, (op, 1), &cols, (1, op), 1.0, dw, pl);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            gemm(pl, g.out_channels, op, 1.0, weight, (1, pl), dy_n, (op, 1), 0.0, &mut cols, op);
            g.col2im_add(&cols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }
}
