//! Scalar numeric helpers shared across the crate.

/// Logistic function, numerically stable for large |x|.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log odds of a probability in (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Bernoulli log-likelihood contribution with a fractional outcome allowed.
/// The mean is clamped away from 0/1 so boundary fits stay finite.
#[inline]
pub fn bernoulli_ll(y: f64, mu: f64) -> f64 {
    let m = mu.clamp(1e-12, 1.0 - 1e-12);
    y * m.ln() + (1.0 - y) * (1.0 - m).ln()
}

/// Type-7 quantile (linear interpolation of order statistics) of a sorted
/// slice. `p` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Sample variance with denominator n-1; zero for fewer than two values.
pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0)
}

/// Sample covariance with denominator n-1; zero for fewer than two pairs.
pub fn sample_cov(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    assert_eq!(n, ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n as f64 - 1.0)
}

pub fn is_strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Format with `digits` significant digits in the style of printf `%g`:
/// fixed notation for moderate exponents, scientific otherwise, trailing
/// zeros stripped. Parsing the output and formatting again is idempotent for
/// `digits <= 15`.
pub fn format_sig(x: f64, digits: usize) -> String {
    assert!(digits >= 1 && digits <= 17);
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    // "{:.*e}" yields e.g. "1.234567890e-3".
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    let neg = mantissa.starts_with('-');
    let digits_only: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();

    let body = if exp >= -4 && exp < digits as i32 {
        // Fixed notation.
        let point = exp + 1; // digits before the decimal point
        let mut s = String::new();
        if point <= 0 {
            s.push_str("0.");
            for _ in 0..(-point) {
                s.push('0');
            }
            s.push_str(&digits_only);
        } else if (point as usize) >= digits_only.len() {
            s.push_str(&digits_only);
            for _ in 0..(point as usize - digits_only.len()) {
                s.push('0');
            }
        } else {
            s.push_str(&digits_only[..point as usize]);
            s.push('.');
            s.push_str(&digits_only[point as usize..]);
        }
        if s.contains('.') {
            let trimmed = s.trim_end_matches('0').trim_end_matches('.');
            trimmed.to_string()
        } else {
            s
        }
    } else {
        let mut mant = digits_only;
        while mant.len() > 1 {
            match mant.pop() {
                Some('0') => continue,
                Some(c) => {
                    mant.push(c);
                    break;
                }
                None => break,
            }
        }
        let mant = if mant.len() > 1 {
            format!("{}.{}", &mant[..1], &mant[1..])
        } else {
            mant
        };
        format!("{mant}e{exp}")
    };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

/// Nearest f64 to `x` rounded to `digits` significant decimal digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format_sig(x, digits).parse().expect("format_sig output parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn expit_logit_inverse() {
        for &p in &[1e-6, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((expit(logit(p)) - p).abs() < 1e-12);
        }
        assert!((expit(0.0) - 0.5).abs() < 1e-15);
        assert!(expit(-800.0) >= 0.0 && expit(800.0) <= 1.0);
    }

    #[test]
    fn quantile_matches_interpolation_rule() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((quantile_sorted(&xs, 0.10) - 10.9).abs() < 1e-12);
        assert!((quantile_sorted(&xs, 0.50) - 50.5).abs() < 1e-12);
        assert!((quantile_sorted(&xs, 0.90) - 90.1).abs() < 1e-12);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 100.0);
    }

    #[test]
    fn format_sig_examples() {
        assert_eq!(format_sig(0.5, 10), "0.5");
        assert_eq!(format_sig(-0.5, 10), "-0.5");
        assert_eq!(format_sig(0.0, 10), "0");
        assert_eq!(format_sig(1.0 / 3.0, 10), "0.3333333333");
        assert_eq!(format_sig(1234.5, 10), "1234.5");
        assert_eq!(format_sig(1e-7, 10), "1e-7");
        assert_eq!(format_sig(1.25e12, 10), "1.25e12");
        assert_eq!(format_sig(0.0001, 10), "0.0001");
    }

    proptest! {
        #[test]
        fn format_sig_round_trips(x in prop::num::f64::NORMAL) {
            let s1 = format_sig(x, 10);
            let parsed: f64 = s1.parse().unwrap();
            let s2 = format_sig(parsed, 10);
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn round_sig_idempotent(x in prop::num::f64::NORMAL) {
            let r = round_sig(x, 10);
            prop_assert_eq!(round_sig(r, 10), r);
        }
    }
}
