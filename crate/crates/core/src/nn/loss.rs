use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `−log softmax(logits)[label]` with max-subtraction, and its gradient
/// `softmax − onehot`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Input(format!("label {label} out of range for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - log_z).exp()).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Mean cross-entropy over a `[N, K]` batch; the gradient is already divided by N.
pub fn cross_entropy_batch<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv = T::lit(1.0 / n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let (l, g) = cross_entropy(row, label)?;
        total += l;
        grad.extend(g.into_iter().map(|v| v * inv));
    }
    Ok((total * inv, Tensor::from_parts(vec![n, k], grad)))
}

/// `(1/n)·Σ(aᵢ − bᵢ)²` over all n elements, with gradient `2(a − b)/n`
/// with respect to `a`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    a.same_shape(b)?;
    let n = a.len() as f64;
    let mut sum = 0.0f64;
    let scale = T::lit(2.0 / n);
    let grad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x - y;
            sum += d.to_f64().unwrap().powi(2);
            scale * d
        })
        .collect();
    Ok((T::lit(sum / n), Tensor::from_parts(a.shape().to_vec(), grad)))
}

/// MSE between class probabilities `[N, K]` and one-hot targets.
pub fn onehot_mse_batch<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k] = *probs.shape() else {
        return Err(Error::shape(format!("probabilities must be [N, K], got {:?}", probs.shape())));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut target = Tensor::zeros(&[n, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Input(format!("label {l} out of range for {k} classes")));
        }
        target.data_mut()[i * k + l] = T::one();
    }
    mse(probs, &target)
}
