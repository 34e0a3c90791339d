use super::{no_grad, Tensor};

/// Largest relative error between the tape gradient of `f` at `x` and
/// central finite differences with step `h`, over every coordinate of `x`.
///
/// `x` must be a trainable leaf; its values are perturbed in place and
/// restored. Relative error is `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps the
/// O(h²) truncation error on near-zero coordinates from dominating.
pub fn grad_check(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, h: f64) -> f64 {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// Like [`grad_check`] but only over the given coordinates.
pub fn grad_check_coords(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, h: f64, coords: &[usize]) -> f64 {
    x.zero_grad();
    f(x).backward();
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = no_grad(|| f(x).item());
        x.data_mut()[i] = orig - h;
        let down = no_grad(|| f(x).item());
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}
