// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar activation functions and their derivatives.
//!
//! Derivatives at breakpoints are left-derivatives.

use crate::tensor::DenseMatrix;

const LEAK: f64 = 0.01;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with_cdf(x, normal_cdf(x))
}

#[inline]
pub(crate) fn gelu_grad_with_cdf(x: f64, cdf: f64) -> f64 {
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Plain hard sigmoid: clamp to `[0, 1]`.
#[inline]
pub fn hard_sigmoid(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[inline]
pub fn hard_sigmoid_grad(x: f64) -> f64 {
    if x > 0.0 && x <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Hard sigmoid with slope 0.01 below zero.
#[inline]
pub fn leaky_hard_sigmoid_lower(x: f64) -> f64 {
    if x <= 0.0 {
        LEAK * x
    } else if x <= 1.0 {
        x
    } else {
        1.0
    }
}

#[inline]
pub fn leaky_hard_sigmoid_lower_grad(x: f64) -> f64 {
    if x <= 0.0 {
        LEAK
    } else if x <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Hard sigmoid with slope 0.01 above one.
#[inline]
pub fn leaky_hard_sigmoid_upper(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x <= 1.0 {
        x
    } else {
        1.0 + LEAK * (x - 1.0)
    }
}

#[inline]
pub fn leaky_hard_sigmoid_upper_grad(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x <= 1.0 {
        1.0
    } else {
        LEAK
    }
}

/// `|x|^p`.
#[inline]
pub fn pow_abs(x: f64, p: f64) -> f64 {
    x.abs().powf(p)
}

/// Derivative of `|x|^p`; zero at the origin.
#[inline]
pub fn pow_abs_grad(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        p * x.abs().powf(p - 1.0) * x.signum()
    }
}

/// Elementwise lower-leaky hard sigmoid over a matrix.
pub fn leaky_hard_sigmoid_lower_array(x: &DenseMatrix) -> DenseMatrix {
    x.map(leaky_hard_sigmoid_lower)
}

/// Elementwise upper-leaky hard sigmoid over a matrix.
pub fn leaky_hard_sigmoid_upper_array(x: &DenseMatrix) -> DenseMatrix {
    x.map(leaky_hard_sigmoid_upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_leaky_values() {
        assert_eq!(leaky_hard_sigmoid_lower(0.5), 0.5);
        assert!((leaky_hard_sigmoid_lower(-1.0) - -0.01).abs() < 1e-15);
        assert_eq!(leaky_hard_sigmoid_lower(2.0), 1.0);
    }

    #[test]
    fn upper_leaky_values() {
        assert_eq!(leaky_hard_sigmoid_upper(-3.0), 0.0);
        assert_eq!(leaky_hard_sigmoid_upper(0.25), 0.25);
        assert!((leaky_hard_sigmoid_upper(2.0) - 1.01).abs() < 1e-15);
    }

    #[test]
    fn leaky_variants_match_hard_sigmoid_on_unit_interval() {
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            assert_eq!(leaky_hard_sigmoid_lower(x), hard_sigmoid(x));
            assert_eq!(leaky_hard_sigmoid_upper(x), hard_sigmoid(x));
        }
    }

    #[test]
    fn kinks_take_left_derivative() {
        assert_eq!(relu_grad(0.0), 0.0);
        assert_eq!(leaky_hard_sigmoid_lower_grad(0.0), 0.01);
        assert_eq!(leaky_hard_sigmoid_lower_grad(1.0), 1.0);
        assert_eq!(leaky_hard_sigmoid_upper_grad(0.0), 0.0);
        assert_eq!(leaky_hard_sigmoid_upper_grad(1.0), 1.0);
        assert_eq!(hard_sigmoid_grad(0.0), 0.0);
        assert_eq!(hard_sigmoid_grad(1.0), 1.0);
    }

    #[test]
    fn gelu_basics() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
