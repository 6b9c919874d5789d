use super::{order_free_sum, Real, Tensor};

/// Intermediates kept by [`batch_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    /// Standardized activations before the affine scale and shift.
    pub xhat: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance per channel.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalization with statistics of the current batch, per channel over the
/// batch and spatial dimensions. There are no running averages: this is the
/// only mode, at training and at inference.
///
/// Per-sample partial sums are combined with an order-free reduction, so a
/// permutation of the batch permutes the output exactly.
pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BatchNormCache<T>) {
    let [n, c, h, w] = x.shape;
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let sp = h * w;
    let count = T::lit((n * sp) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut partial = vec![T::zero(); n];
    for ch in 0..c {
        for (b, slot) in partial.iter_mut().enumerate() {
            let base = (b * c + ch) * sp;
            *slot = x.data[base..base + sp].iter().copied().sum();
        }
        let m = order_free_sum(&mut partial) / count;
        for (b, slot) in partial.iter_mut().enumerate() {
            let base = (b * c + ch) * sp;
            *slot = x.data[base..base + sp]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum();
        }
        let v = order_free_sum(&mut partial) / count;
        mean[ch] = m;
        var[ch] = v;
        inv_std[ch] = T::one() / (v + eps).sqrt();
    }

    let mut xhat = Tensor::zeros(x.shape);
    let mut y = Tensor::zeros(x.shape);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + sp {
                let z = (x.data[i] - m) * is;
                xhat.data[i] = z;
                y.data[i] = g * z + bt;
            }
        }
    }
    (
        y,
        BatchNormCache {
            xhat,
            mean,
            var,
            inv_std,
        },
    )
}

/// Backward pass through the batch statistics. Accumulates into
/// `dgamma`/`dbeta` when given and returns the input gradient.
pub fn batch_norm_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) -> Tensor<T> {
    let [n, c, h, w] = dy.shape;
    assert_eq!(cache.xhat.shape, dy.shape);
    let sp = h * w;
    let count = T::lit((n * sp) as f64);
    let mut dx = Tensor::zeros(dy.shape);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for i in base..base + sp {
                sum_dy += dy.data[i];
                sum_dy_xhat += dy.data[i] * cache.xhat.data[i];
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ch] += sum_dy_xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ch] += sum_dy;
        }
        // dxhat = gamma * dy; fold gamma into the scale.
        let scale = gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for i in base..base + sp {
                dx.data[i] =
                    scale * (count * dy.data[i] - sum_dy - cache.xhat.data[i] * sum_dy_xhat);
            }
        }
    }
    dx
}
