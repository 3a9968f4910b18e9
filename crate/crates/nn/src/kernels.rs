//! Raw numeric kernels shared by the graph ops.

use goalcast_core::Exec;

/// `c = a·b + beta·c` with explicit strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index touched by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn oh(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn ow(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.co * self.oh() * self.ow()
    }
}

fn im2col(s: &ConvShape, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (s.oh(), s.ow());
    let ohw = oh * ow;
    for c in 0..s.ci {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - s.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * s.h + iy as usize) * s.w..][..s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - s.pad as isize;
                        *v = if ix < 0 || ix >= s.w as isize {
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

fn col2im(s: &ConvShape, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (s.oh(), s.ow());
    let ohw = oh * ow;
    for c in 0..s.ci {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (c * s.k + ky) * s.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * s.h + iy as usize) * s.w..][..s.w];
                    for ox in 0..ow {
                        let ix = (ox + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(s: &ConvShape, x: &[f64], wt: &[f64], b: &[f64], exec: Exec) -> Vec<f64> {
    let (patch, ohw) = (s.patch(), s.oh() * s.ow());
    let mut out = vec![0.0; s.n * s.out_len()];
    exec.for_each_chunk_mut(&mut out, s.out_len(), |i, o| {
        let mut cols = vec![0.0; patch * ohw];
        im2col(s, &x[i * s.in_len()..(i + 1) * s.in_len()], &mut cols);
        for (c, row) in o.chunks_mut(ohw).enumerate() {
            row.fill(b[c]);
        }
        gemm(s.co, patch, ohw, wt, (patch, 1), &cols, (ohw, 1), 1.0, o);
    });
    out
}

/// Returns (dx, dw, db). Per-sample weight gradients are summed in sample
/// order so the result does not depend on the execution mode.
pub(crate) fn conv2d_backward(
    s: &ConvShape,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    exec: Exec,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (patch, ohw) = (s.patch(), s.oh() * s.ow());
    let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = exec.map_range(s.n, |i| {
        let g = &dout[i * s.out_len()..(i + 1) * s.out_len()];
        let dw = need_dw.then(|| {
            let mut cols = vec![0.0; patch * ohw];
            im2col(s, &x[i * s.in_len()..(i + 1) * s.in_len()], &mut cols);
            let mut dw = vec![0.0; s.co * patch];
            gemm(s.co, ohw, patch, g, (ohw, 1), &cols, (1, ohw), 0.0, &mut dw);
            dw
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0; patch * ohw];
            gemm(patch, s.co, ohw, wt, (1, patch), g, (ohw, 1), 0.0, &mut dcols);
            let mut dx = vec![0.0; s.in_len()];
            col2im(s, &dcols, &mut dx);
            dx
        });
        (dx, dw)
    });
    let mut db = vec![0.0; s.co];
    for i in 0..s.n {
        let g = &dout[i * s.out_len()..(i + 1) * s.out_len()];
        for (c, row) in g.chunks(ohw).enumerate() {
            db[c] += row.iter().sum::<f64>();
        }
    }
    let mut dx_all = need_dx.then(|| Vec::with_capacity(s.n * s.in_len()));
    let mut dw_all = need_dw.then(|| vec![0.0; s.co * patch]);
    for (dx, dw) in parts {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, v)| *a += v);
        }
    }
    (dx_all, dw_all, db)
}

pub(crate) fn avg_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[(p * oh + y) * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[(p * oh + y) * ow + xx];
                let base = p * h * w;
                dx[base + 2 * y * w + 2 * xx] = v;
                dx[base + 2 * y * w + 2 * xx + 1] = v;
                dx[base + (2 * y + 1) * w + 2 * xx] = v;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
            }
        }
    }
    dx
}
