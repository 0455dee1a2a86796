use proptest::prelude::*;

use realism::stats::{kendall_tau, spearman_rho};

/// tau-b by pair enumeration.
fn tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut nc, mut nd, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    let n = x.len();
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx * dy > 0.0 {
                nc += 1;
            } else if dx * dy < 0.0 {
                nd += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let den = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    (den > 0.0).then(|| (nc - nd) as f64 / den)
}

/// Rank of each value: 1 + (number smaller) + (number equal - 1) / 2.
fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|a| {
            let less = v.iter().filter(|b| *b < a).count() as f64;
            let equal = v.iter().filter(|b| *b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn rho(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-9,
        (None, None) => true,
        _ => false,
    }
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // small integer grids force ties; wide ranges mostly avoid them
    (2usize..120, prop_oneof![Just(4i32), Just(1000i32)]).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec((0..k).prop_map(f64::from), n),
            prop::collection::vec((0..k).prop_map(f64::from), n),
        )
    })
}

proptest! {
    #[test]
    fn kendall_matches_pair_enumeration((x, y) in pairs()) {
        prop_assert!(close(kendall_tau(&x, &y).unwrap(), tau_b(&x, &y)));
    }

    #[test]
    fn spearman_matches_rank_definition((x, y) in pairs()) {
        prop_assert!(close(spearman_rho(&x, &y).unwrap(), rho(&x, &y)));
    }

    #[test]
    fn symmetric_and_bounded((x, y) in pairs()) {
        let a = kendall_tau(&x, &y).unwrap();
        prop_assert_eq!(a, kendall_tau(&y, &x).unwrap());
        if let Some(t) = a {
            prop_assert!((-1.0..=1.0).contains(&t));
        }
        if let Some(r) = spearman_rho(&x, &y).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn strictly_monotone_is_exactly_one(v in prop::collection::btree_set(-1000i32..1000, 2..80)) {
        let x: Vec<f64> = v.iter().map(|&a| f64::from(a)).collect();
        let up: Vec<f64> = x.iter().map(|a| a.powi(3) + 7.0).collect();
        let down: Vec<f64> = x.iter().map(|a| -2.0 * a).collect();
        prop_assert_eq!(kendall_tau(&x, &up).unwrap(), Some(1.0));
        prop_assert_eq!(spearman_rho(&x, &up).unwrap(), Some(1.0));
        prop_assert_eq!(kendall_tau(&x, &down).unwrap(), Some(-1.0));
        prop_assert_eq!(spearman_rho(&x, &down).unwrap(), Some(-1.0));
    }
}
