//! Two-sided Mann–Whitney U test: exact permutation p for small tie-free
//! samples, normal approximation with tie correction otherwise.

/// U statistic for `a` (pair count where `a_i > b_j`, ties as ½) and the
/// two-sided p-value.
///
/// When `n + m ≤ 12` and the pooled values are tie-free the p-value is the
/// exact permutation tail: the fraction of the C(n+m, n) group assignments
/// whose U deviates from nm/2 at least as much as the observed one.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty(), "mann_whitney_u requires non-empty samples");
    let n = a.len();
    let m = b.len();
    let u = u_statistic(a, b);

    let mut pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let has_ties = pooled.windows(2).any(|w| w[0] == w[1]);

    if n + m <= 12 && !has_ties {
        let p = exact_two_sided_p(&pooled, n, u);
        return (u, p);
    }

    // normal approximation with tie correction and continuity correction
    let nn = (n * m) as f64;
    let total = (n + m) as f64;
    let mu = nn / 2.0;
    let tie_term: f64 = tie_groups(&pooled)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nn / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if var <= 0.0 {
        // all pooled values identical: no evidence of separation
        return (u, 1.0);
    }
    let diff = u - mu;
    // continuity correction toward the mean; zero stays zero
    let cc = if diff > 0.0 {
        0.5
    } else if diff < 0.0 {
        -0.5
    } else {
        0.0
    };
    let z = (diff - cc) / var.sqrt();
    let p = (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0);
    (u, p)
}

fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

fn tie_groups(sorted: &[f64]) -> Vec<usize> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            groups.push(j - i);
        }
        i = j;
    }
    groups
}

/// Enumerate every assignment of `n` pooled values to group a and count
/// assignments whose U deviates from nm/2 at least as much as observed.
fn exact_two_sided_p(pooled: &[f64], n: usize, u_obs: f64) -> f64 {
    let total = pooled.len();
    let m = total - n;
    let center = (n * m) as f64 / 2.0;
    let obs_dev = (u_obs - center).abs();
    let mut count = 0usize;
    let mut all = 0usize;
    let mut chosen = Vec::with_capacity(n);
    enumerate_subsets(total, n, 0, &mut chosen, &mut |subset| {
        all += 1;
        let in_a: Vec<bool> = {
            let mut v = vec![false; total];
            for &i in subset {
                v[i] = true;
            }
            v
        };
        let a_vals: Vec<f64> = (0..total).filter(|&i| in_a[i]).map(|i| pooled[i]).collect();
        let b_vals: Vec<f64> = (0..total).filter(|&i| !in_a[i]).map(|i| pooled[i]).collect();
        let u = u_statistic(&a_vals, &b_vals);
        // epsilon guard for half-integer arithmetic
        if (u - center).abs() >= obs_dev - 1e-12 {
            count += 1;
        }
    });
    count as f64 / all as f64
}

fn enumerate_subsets(
    total: usize,
    k: usize,
    start: usize,
    chosen: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    let remaining = k - chosen.len();
    for i in start..=(total - remaining) {
        chosen.push(i);
        enumerate_subsets(total, k, i + 1, chosen, visit);
        chosen.pop();
    }
}

/// Standard normal CDF via the Abramowitz–Stegun erf approximation
/// (absolute error below 2e-7, ample for significance thresholds).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}
