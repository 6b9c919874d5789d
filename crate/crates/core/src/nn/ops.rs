use super::{gemm, Layout, Real, Tensor};

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        flush(e / (T::one() + e))
    }
}

/// Zero for subnormal inputs. Saturated sigmoids otherwise push subnormals
/// through the GEMMs, which are orders of magnitude slower on x86.
#[inline]
pub fn flush<T: Real>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::zero()
    } else {
        x
    }
}

pub fn flush_subnormals<T: Real>(xs: &mut [T]) {
    xs.iter_mut().for_each(|v| *v = flush(*v));
}

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect(),
    }
}

/// `pre` is the activation input saved from the forward pass.
pub fn leaky_relu_backward<T: Real>(pre: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    assert_eq!(pre.shape, dy.shape);
    Tensor {
        shape: dy.shape,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
            .collect(),
    }
}

/// `y (n x out) = x (n x in) * w^T + b`, `w` stored `out x in`.
pub fn linear_forward<T: Real>(
    x: &[T],
    n: usize,
    weight: &[T],
    bias: Option<&[T]>,
    in_features: usize,
    out_features: usize,
) -> Vec<T> {
    assert_eq!(x.len(), n * in_features, "linear input length");
    assert_eq!(weight.len(), in_features * out_features, "linear weight length");
    let mut y = vec![T::zero(); n * out_features];
    gemm(
        n,
        in_features,
        out_features,
        x,
        Layout::N,
        weight,
        Layout::T,
        T::zero(),
        &mut y,
    );
    if let Some(b) = bias {
        for row in y.chunks_mut(out_features) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    weight: &[T],
    dy: &[T],
    in_features: usize,
    out_features: usize,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    assert_eq!(dy.len(), n * out_features, "linear output gradient length");
    if let Some(dw) = dweight {
        gemm(
            out_features,
            n,
            in_features,
            dy,
            Layout::T,
            x,
            Layout::N,
            T::one(),
            dw,
        );
    }
    if let Some(db) = dbias {
        for row in dy.chunks(out_features) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); n * in_features];
        gemm(
            n,
            out_features,
            in_features,
            dy,
            Layout::N,
            weight,
            Layout::N,
            T::zero(),
            &mut dx,
        );
        dx
    })
}

/// Nearest-neighbour upsampling by a factor of two.
pub fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for iy in 0..2 * h {
            for ix in 0..2 * w {
                dst[iy * 2 * w + ix] = src[(iy / 2) * w + ix / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for iy in 0..h2 {
            for ix in 0..w2 {
                dst[(iy / 2) * w + ix / 2] += src[iy * w2 + ix];
            }
        }
    }
    dx
}
