use crate::tensor::Tensor;
use crate::Scalar;

/// Central-difference gradient of `f` at `param`, one coordinate at a time.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, param: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = param.clone();
    let mut out = Tensor::zeros(param.shape());
    let two_h = h + h;
    for i in 0..param.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / two_h;
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)` in the Euclidean norm, 0 when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
