//! Numerically stable logistic primitives.
//!
//! `loss(x) = log(1 + e^{-x})` is evaluated as `log1p(e^{-|x|}) + max(0, -x)` so
//! that large margins of either sign neither overflow nor cancel.

/// Logistic sigmoid `1 / (1 + e^{-x})` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(x)σ(-x)`, the second derivative of the loss.
pub fn sigmoid_prime(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Logistic loss `softplus(-x)`.
pub fn loss(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + (-x).max(0.0)
}

/// First derivative of the loss, `-σ(-x)`.
pub fn loss_prime(x: f64) -> f64 {
    -sigmoid(-x)
}

/// Second derivative of the loss, `σ(x)σ(-x)`.
pub fn loss_second(x: f64) -> f64 {
    sigmoid_prime(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_at_zero_is_ln2() {
        assert!((loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn large_margin_uses_stable_branch() {
        let v = loss(50.0);
        assert!(v > 0.0 && v <= 2e-22);
        assert!((v - (-50f64).exp().ln_1p()).abs() < 1e-36);
        assert!((loss(-800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_differences() {
        for &x in &[-7.0, -1.3, 0.0, 0.4, 5.5] {
            let h = 1e-6;
            let fd = (loss(x + h) - loss(x - h)) / (2.0 * h);
            assert!((fd - loss_prime(x)).abs() < 1e-8);
            let fd2 = (loss_prime(x + h) - loss_prime(x - h)) / (2.0 * h);
            assert!((fd2 - loss_second(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for &x in &[-40.0, -2.0, 0.0, 3.0, 700.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
