//! im2col convolution kernels backed by `matrixmultiply::dgemm`.

use crate::Tensor;

/// Zero padding added on each side of the spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding::uniform(0);

    pub const fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that keeps the spatial size for a stride-1 kernel of size `k`.
    ///
    /// Even kernels pad one more row/column after the image than before it.
    pub const fn same(k: usize) -> Self {
        let before = (k - 1) / 2;
        let after = k - 1 - before;
        Self {
            top: before,
            bottom: after,
            left: before,
            right: after,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: Padding) -> Self {
        Self { stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        assert!(
            ph >= kh && pw >= kw,
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        );
        ((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1)
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == Padding::NONE
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.p();
    let Padding { top, left, .. } = g.spec.padding;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.spec.stride + ki) as isize - top as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.spec.stride + kj) as isize - left as isize;
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

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.p();
    let Padding { top, left, .. } = g.spec.padding;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.spec.stride + ki) as isize - top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.spec.stride + kj) as isize - left as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c`, with operand layouts given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the operand slices cover every index reachable from the given
    // dimensions and strides, and `c` is an exclusive borrow of an m x n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn geometry(x: &Tensor, weight: &Tensor, spec: Conv2dSpec) -> (usize, usize, Geometry) {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, kh, kw) = weight.dims4();
    assert_eq!(cin, wcin, "conv input has {cin} channels but kernel expects {wcin}");
    let (ho, wo) = spec.output_size(h, w, kh, kw);
    (
        n,
        cout,
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            spec,
        },
    )
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
    let (n, cout, g) = geometry(x, weight, spec);
    let (k, p) = (g.k(), g.p());
    let mut out = vec![0.0; n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_plane = g.cin * g.h * g.w;
    for s in 0..n {
        let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
        let b: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let os = &mut out[s * cout * p..(s + 1) * cout * p];
        gemm(cout, k, p, weight.data(), (k, 1), b, (p, 1), os, 0.0);
        if let Some(bias) = bias {
            for (co, row) in os.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: Conv2dSpec,
    grad_out: &Tensor,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_x, want_w, want_b) = want;
    let (n, cout, g) = geometry(x, weight, spec);
    let (k, p) = (g.k(), g.p());
    let in_plane = g.cin * g.h * g.w;
    let pointwise = g.is_pointwise();

    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; weight.len()]);
    let db = want_b.then(|| {
        let mut db = vec![0.0; cout];
        for s in 0..n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (s * cout + co) * p;
                *d += grad_out.data()[off..off + p].iter().sum::<f64>();
            }
        }
        db
    });

    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if want_x && !pointwise {
        vec![0.0; k * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let gs = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
        let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
        if let Some(dw) = dw.as_mut() {
            let b: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            // dW[cout, k] += G[cout, p] * cols^T[p, k]
            gemm(cout, p, k, gs, (p, 1), b, (1, p), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_plane..(s + 1) * in_plane];
            // dcols[k, p] = W^T[k, cout] * G[cout, p]
            if pointwise {
                gemm(k, cout, p, weight.data(), (1, k), gs, (p, 1), dxs, 1.0);
            } else {
                gemm(k, cout, p, weight.data(), (1, k), gs, (p, 1), &mut dcols, 0.0);
                col2im(&dcols, &g, dxs);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::new(vec![cout], d)),
    }
}
