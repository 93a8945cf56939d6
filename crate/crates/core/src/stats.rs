//! Small statistics toolkit used by the masking distribution tests and
//! the `mask-stats` export: chi-square goodness-of-fit and two-sample
//! homogeneity tests with exact p-values via the incomplete gamma
//! function.

/// Natural log of the gamma function (Lanczos approximation, g=7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series expansion
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction
/// (valid for x >= a + 1).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / 1e-300;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < 1e-300 {
            d = 1e-300;
        }
        c = b + an / c;
        if c.abs() < 1e-300 {
            c = 1e-300;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Survival function of the chi-square distribution: P(X > stat).
pub fn chi_square_p_value(stat: f64, df: usize) -> f64 {
    assert!(df >= 1);
    if stat <= 0.0 {
        return 1.0;
    }
    1.0 - gamma_p(df as f64 / 2.0, stat / 2.0)
}

/// Goodness-of-fit statistic against explicit expected counts.
pub fn chi_square_statistic(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    observed
        .iter()
        .zip(expected.iter())
        .map(|(&o, &e)| {
            assert!(e > 0.0, "expected count must be positive");
            let d = o as f64 - e;
            d * d / e
        })
        .sum()
}

/// Test observed counts against a uniform distribution over the bins.
/// Returns (statistic, p-value) with df = bins - 1.
pub fn chi_square_uniform(observed: &[u64]) -> (f64, f64) {
    let total: u64 = observed.iter().sum();
    let e = total as f64 / observed.len() as f64;
    let expected = vec![e; observed.len()];
    let stat = chi_square_statistic(observed, &expected);
    (stat, chi_square_p_value(stat, observed.len() - 1))
}

/// Two-sample homogeneity test: are two histograms draws from the same
/// distribution? Bins empty in both samples are dropped. df = bins - 1.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    assert!(na > 0 && nb > 0);
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&oa, &ob) in a.iter().zip(b.iter()) {
        let pooled = (oa + ob) as f64;
        if pooled == 0.0 {
            continue;
        }
        bins += 1;
        let ea = na as f64 * pooled / (na + nb) as f64;
        let eb = nb as f64 * pooled / (na + nb) as f64;
        let da = oa as f64 - ea;
        let db = ob as f64 - eb;
        stat += da * da / ea + db * db / eb;
    }
    assert!(bins >= 2, "need at least two occupied bins");
    (stat, chi_square_p_value(stat, bins - 1))
}

/// Binomial coefficient as u64 (panics on overflow, fine at desk scale).
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut num: u64 = 1;
    for i in 0..k {
        num = num * (n - i) as u64 / (i + 1) as u64;
    }
    num
}
