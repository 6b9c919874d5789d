use super::{gemm, Layout, Real, Tensor};

/// Upper bound on the number of elements in one im2col buffer. Batches are
/// processed in chunks of whole samples so the buffer stays below this.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

struct Plan {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    chunk: usize,
}

fn plan<T: Real>(x: &Tensor<T>, g: &ConvGeometry) -> Plan {
    let [_, c, h, w] = x.shape;
    assert_eq!(c, g.in_ch, "conv input has {c} channels, expected {}", g.in_ch);
    assert!(
        h + 2 * g.pad >= g.kernel && w + 2 * g.pad >= g.kernel,
        "conv input {h}x{w} smaller than kernel"
    );
    let (ho, wo) = g.out_size(h, w);
    let per_sample = g.patch_len() * ho * wo;
    let chunk = (COL_BUDGET / per_sample.max(1)).clamp(1, x.batch().max(1));
    Plan {
        h,
        w,
        ho,
        wo,
        chunk,
    }
}

/// Unfold one `C x H x W` sample into columns `[col0, col0 + Ho*Wo)` of a
/// row-major `(C*k*k) x stride` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    g: &ConvGeometry,
    p: &Plan,
    dst: &mut [T],
    row_stride: usize,
    col0: usize,
) {
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut dst[row * row_stride + col0..row * row_stride + col0 + p.ho * p.wo];
                for oy in 0..p.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut out[oy * p.wo..(oy + 1) * p.wo];
                    if iy < 0 || iy >= p.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= p.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a sample gradient.
fn col2im<T: Real>(
    src: &[T],
    g: &ConvGeometry,
    p: &Plan,
    row_stride: usize,
    col0: usize,
    dx: &mut [T],
) {
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let cols = &src[row * row_stride + col0..row * row_stride + col0 + p.ho * p.wo];
                for oy in 0..p.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    for ox in 0..p.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < p.w as isize {
                            line[ix as usize] += cols[oy * p.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation). `weight` is `out x in x k x k`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Tensor<T> {
    assert_eq!(weight.len(), g.weight_len(), "conv weight length");
    let p = plan(x, g);
    let n = x.batch();
    let sp = p.ho * p.wo;
    let kk = g.patch_len();
    let mut y = Tensor::zeros([n, g.out_ch, p.ho, p.wo]);
    let mut cols = Vec::new();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let cs = p.chunk.min(n - start);
        let width = cs * sp;
        cols.resize(kk * width, T::zero());
        out.resize(g.out_ch * width, T::zero());
        for j in 0..cs {
            im2col(x.item(start + j), g, &p, &mut cols, width, j * sp);
        }
        gemm(
            g.out_ch,
            kk,
            width,
            weight,
            Layout::N,
            &cols,
            Layout::N,
            T::zero(),
            &mut out,
        );
        for j in 0..cs {
            let item = &mut y.data[(start + j) * g.out_ch * sp..(start + j + 1) * g.out_ch * sp];
            for o in 0..g.out_ch {
                let b = bias.map_or(T::zero(), |b| b[o]);
                let src = &out[o * width + j * sp..o * width + (j + 1) * sp];
                for (d, &s) in item[o * sp..(o + 1) * sp].iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        start += cs;
    }
    y
}

/// Backward pass of [`conv2d_forward`]. Parameter gradients are accumulated
/// into `dweight`/`dbias` when given; the input gradient is returned when
/// `need_dx` is set.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeometry,
    mut dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let p = plan(x, g);
    let n = x.batch();
    let sp = p.ho * p.wo;
    let kk = g.patch_len();
    assert_eq!(dy.shape, [n, g.out_ch, p.ho, p.wo], "conv output gradient shape");

    if let Some(db) = dbias {
        for (o, acc) in db.iter_mut().enumerate() {
            let mut s = T::zero();
            for b in 0..n {
                let base = (b * g.out_ch + o) * sp;
                s += dy.data[base..base + sp].iter().copied().sum::<T>();
            }
            *acc += s;
        }
    }

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
    if dweight.is_none() && dx.is_none() {
        return None;
    }
    let mut cols = Vec::new();
    let mut dyc = Vec::new();
    let mut start = 0;
    while start < n {
        let cs = p.chunk.min(n - start);
        let width = cs * sp;
        dyc.resize(g.out_ch * width, T::zero());
        for j in 0..cs {
            let item = dy.item(start + j);
            for o in 0..g.out_ch {
                dyc[o * width + j * sp..o * width + (j + 1) * sp]
                    .copy_from_slice(&item[o * sp..(o + 1) * sp]);
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            cols.resize(kk * width, T::zero());
            for j in 0..cs {
                im2col(x.item(start + j), g, &p, &mut cols, width, j * sp);
            }
            gemm(
                g.out_ch,
                width,
                kk,
                &dyc,
                Layout::N,
                &cols,
                Layout::T,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            cols.resize(kk * width, T::zero());
            gemm(
                kk,
                g.out_ch,
                width,
                weight,
                Layout::T,
                &dyc,
                Layout::N,
                T::zero(),
                &mut cols,
            );
            let il = dx.item_len();
            for j in 0..cs {
                let b = start + j;
                col2im(&cols, g, &p, width, j * sp, &mut dx.data[b * il..(b + 1) * il]);
            }
        }
        start += cs;
    }
    dx
}
