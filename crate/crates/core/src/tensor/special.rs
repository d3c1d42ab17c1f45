//! Special-function kernels in `f64`: ln Γ, ψ, ψ'.
//!
//! ln Γ uses the Lanczos approximation (g = 7, 9 coefficients) with the
//! reflection formula below 0.5. ψ and ψ' use the recurrence to push the
//! argument above 6 and then the asymptotic (Bernoulli) series.

use std::f64::consts::PI;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// ln Γ(x) for x > 0. NaN for x ≤ 0.
pub fn lgamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx). For 0 < x < 0.5 the sine
        // is positive, so the log is well defined.
        return (PI / (PI * x).sin()).ln() - lgamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_2PI + (z + 0.5) * t.ln() - t + acc.ln()
}

/// ψ(x) = d/dx ln Γ(x) for x > 0. NaN for x ≤ 0.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut result = 0.0;
    let mut x = x;
    // ψ(x) = ψ(x+1) − 1/x
    while x < 6.0 {
        result -= 1.0 / x;
        x += 1.0;
    }
    // Asymptotic series with Bernoulli coefficients through x^-12.
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    result + x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                + inv2
                    * (-1.0 / 120.0
                        + inv2
                            * (1.0 / 252.0
                                + inv2
                                    * (-1.0 / 240.0
                                        + inv2 * (1.0 / 132.0 + inv2 * (-691.0 / 32760.0))))))
}

/// ψ'(x) for x > 0. NaN for x ≤ 0.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut result = 0.0;
    let mut x = x;
    // ψ'(x) = ψ'(x+1) + 1/x²
    while x < 6.0 {
        result += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    result
        + inv
            * (1.0
                + inv
                    * (0.5
                        + inv
                            * (1.0 / 6.0
                                + inv2
                                    * (-1.0 / 30.0
                                        + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0))))))
}

#[cfg(test)]
mod tests {
    use super::*;

    // References computed with 40-digit arithmetic.
    const LGAMMA_REF: [(f64, f64); 12] = [
        (0.001, 6.907178885383853),
        (0.01, 4.599479878042022),
        (0.1, 2.252712651734206),
        (0.5, 0.5723649429247001),
        (1.0, 0.0),
        (1.5, -0.12078223763524522),
        (2.0, 0.0),
        (3.7, 1.4280723266653879),
        (6.5, 5.662562059857142),
        (10.0, 12.801827480081469),
        (100.0, 359.1342053695754),
        (1000.0, 5905.220423209181),
    ];

    const DIGAMMA_REF: [(f64, f64); 12] = [
        (0.001, -1000.5755719318103),
        (0.01, -100.56088545786868),
        (0.1, -10.423754940411078),
        (0.5, -1.9635100260214235),
        (1.0, -0.5772156649015329),
        (1.5, 0.03648997397857652),
        (2.0, 0.42278433509846713),
        (3.7, 1.1671535393615113),
        (6.5, 1.792911330399933),
        (10.0, 2.251752589066721),
        (100.0, 4.600161852738087),
        (1000.0, 6.907255195648812),
    ];

    const TRIGAMMA_REF: [(f64, f64); 4] = [
        (0.5, 4.934802200544679),
        (1.0, 1.6449340668482264),
        (2.5, 0.49035775610023485),
        (7.3, 0.14679576813142708),
    ];

    fn rel_err(got: f64, want: f64) -> f64 {
        (got - want).abs() / want.abs().max(1.0)
    }

    #[test]
    fn lgamma_matches_references() {
        for &(x, want) in &LGAMMA_REF {
            let got = lgamma(x);
            assert!(
                rel_err(got, want) < 1e-10,
                "lgamma({x}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn lgamma_reproduces_factorials() {
        let mut fact = 1.0f64;
        for n in 1..=20u32 {
            // Γ(n) = (n−1)!
            let got = lgamma(n as f64).exp();
            assert!(
                (got - fact).abs() / fact < 1e-10,
                "Gamma({n}) = {got}, want {fact}"
            );
            fact *= n as f64;
        }
    }

    #[test]
    fn lgamma_half_is_half_ln_pi() {
        assert!((lgamma(0.5) - 0.5 * PI.ln()).abs() < 1e-14);
    }

    #[test]
    fn digamma_matches_references() {
        for &(x, want) in &DIGAMMA_REF {
            let got = digamma(x);
            assert!(
                rel_err(got, want) < 1e-12,
                "digamma({x}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn digamma_one_is_minus_euler_gamma() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-14);
    }

    #[test]
    fn digamma_three_matches_harmonic_identity() {
        // ψ(3) = 1 + 1/2 − γ
        assert!((digamma(3.0) - (1.5 - EULER_GAMMA)).abs() < 1e-14);
    }

    #[test]
    fn trigamma_matches_references() {
        for &(x, want) in &TRIGAMMA_REF {
            let got = trigamma(x);
            assert!(
                rel_err(got, want) < 1e-12,
                "trigamma({x}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.0, 2.7, 11.0] {
            let h = 1e-6;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!(
                (trigamma(x) - fd).abs() / fd.abs().max(1.0) < 1e-6,
                "trigamma({x}) vs finite difference"
            );
        }
    }

    #[test]
    fn nonpositive_inputs_are_nan() {
        assert!(lgamma(0.0).is_nan());
        assert!(lgamma(-1.5).is_nan());
        assert!(digamma(0.0).is_nan());
        assert!(trigamma(-2.0).is_nan());
    }
}
