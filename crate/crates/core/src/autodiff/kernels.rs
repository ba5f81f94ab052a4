//! Raw numeric kernels shared by the forward and backward rules.

/// Strided row-major matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix.
    pub fn t(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views cover the addressed ranges; every caller passes
    // slices sized from the same m, k, n used here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `c×h×w` into `cols: (c·kh·kw) × (oh·ow)`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *o = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx` (accumulating).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `w: k × (c·kh·kw)`, output `b × k × oh × ow`.
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    batch: usize,
    k: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_size = g.c * g.h * g.w;
    let out_plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![0.0; batch * k * out_plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * out_plane]
    };
    for b in 0..batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let ob = &mut out[b * k * out_plane..(b + 1) * k * out_plane];
        let colv: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(
            k,
            patch,
            out_plane,
            Mat::rows(w, patch),
            Mat::rows(colv, out_plane),
            0.0,
            ob,
        );
        if let Some(bias) = bias {
            for (ki, &bv) in bias.iter().enumerate() {
                for v in &mut ob[ki * out_plane..(ki + 1) * out_plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. Each output buffer is optional; present
/// buffers are accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    batch: usize,
    k: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let in_size = g.c * g.h * g.w;
    let out_plane = g.out_plane();
    let patch = g.patch();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; patch * out_plane]
    };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; patch * out_plane]
    };
    for b in 0..batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let gb = &gout[b * k * out_plane..(b + 1) * k * out_plane];
        if let Some(db) = dbias.as_deref_mut() {
            for (ki, d) in db.iter_mut().enumerate() {
                *d += gb[ki * out_plane..(ki + 1) * out_plane].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let colv: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dw += g_b · colsᵀ
            gemm(
                k,
                out_plane,
                patch,
                Mat::rows(gb, out_plane),
                Mat::t(colv, out_plane),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_size..(b + 1) * in_size];
            if pointwise {
                gemm(
                    patch,
                    k,
                    out_plane,
                    Mat::t(w, patch),
                    Mat::rows(gb, out_plane),
                    1.0,
                    dxb,
                );
            } else {
                gemm(
                    patch,
                    k,
                    out_plane,
                    Mat::t(w, patch),
                    Mat::rows(gb, out_plane),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
}
