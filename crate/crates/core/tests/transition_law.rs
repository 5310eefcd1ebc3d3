use bayesfusion::proposal::{propagate_factorized, propagate_joint, ParticleState, TransitionSpec};
use bayesfusion::rng::{self, Domain};
use rand::Rng;

struct Moments {
    mean: Vec<f64>,
    cov: Vec<f64>,
    n: f64,
}

fn moments(draws: &[Vec<f64>]) -> Moments {
    let p = draws[0].len();
    let n = draws.len() as f64;
    let mut mean = vec![0.0; p];
    for x in draws {
        for i in 0..p {
            mean[i] += x[i] / n;
        }
    }
    let mut cov = vec![0.0; p * p];
    for x in draws {
        for i in 0..p {
            for j in 0..p {
                cov[i * p + j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    Moments { mean, cov, n }
}

// se of a sample covariance entry under Gaussianity
fn cov_se(m: &Moments, i: usize, j: usize) -> f64 {
    let p = m.mean.len();
    ((m.cov[i * p + i] * m.cov[j * p + j] + m.cov[i * p + j].powi(2)) / m.n).sqrt()
}

fn draws(
    st: &ParticleState,
    spec: &TransitionSpec,
    count: usize,
    seed: u64,
    joint: bool,
) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, Domain::Test, 0, 0);
    (0..count)
        .map(|_| {
            if joint {
                propagate_joint(st, spec, &mut r).unwrap().positions
            } else {
                propagate_factorized(st, spec, &mut r).unwrap().positions
            }
        })
        .collect()
}

#[test]
fn factorized_and_joint_agree() {
    let st = ParticleState::new(vec![vec![0.3, -1.0], vec![1.0, 0.0], vec![-0.5, 0.4]]).unwrap();
    let spec = TransitionSpec::new(0.1, 0.4, 1.0, 3).unwrap();
    let a = moments(&draws(&st, &spec, 100_000, 1, false));
    let b = moments(&draws(&st, &spec, 100_000, 2, true));
    let p = a.mean.len();
    for i in 0..p {
        let se = (a.cov[i * p + i] / a.n + b.cov[i * p + i] / b.n).sqrt();
        assert!((a.mean[i] - b.mean[i]).abs() < 4.0 * se);
        for j in 0..p {
            let se = (cov_se(&a, i, j).powi(2) + cov_se(&b, i, j).powi(2)).sqrt();
            assert!((a.cov[i * p + j] - b.cov[i * p + j]).abs() < 4.0 * se, "({i},{j})");
        }
    }
}

#[test]
fn two_steps_equal_one_step() {
    // Chapman-Kolmogorov: s -> u -> t has the same law as s -> t
    let mut r = rng::stream(5, Domain::Test, 1, 0);
    for case in 0..4 {
        let c = r.random_range(2..=4usize);
        let horizon = r.random_range(0.5..2.0);
        let s = r.random_range(0.0..0.3) * horizon;
        let t = s + r.random_range(0.2..0.7) * (horizon - s);
        let u = s + r.random_range(0.2..0.8) * (t - s);
        let st = ParticleState::new((0..c).map(|_| vec![r.random_range(-1.0..1.0)]).collect()).unwrap();
        let direct = moments(&draws(&st, &TransitionSpec::new(s, t, horizon, c).unwrap(), 100_000, 10 + case, false));
        let first = TransitionSpec::new(s, u, horizon, c).unwrap();
        let second = TransitionSpec::new(u, t, horizon, c).unwrap();
        let mut rr = rng::stream(20 + case, Domain::Test, 0, 0);
        let two: Vec<Vec<f64>> = (0..100_000)
            .map(|_| {
                let mid = propagate_factorized(&st, &first, &mut rr).unwrap();
                propagate_factorized(&mid, &second, &mut rr).unwrap().positions
            })
            .collect();
        let two = moments(&two);
        for i in 0..c {
            let se = (direct.cov[i * c + i] / direct.n + two.cov[i * c + i] / two.n).sqrt();
            assert!((direct.mean[i] - two.mean[i]).abs() < 4.0 * se, "case {case}");
            for j in 0..c {
                let se = (cov_se(&direct, i, j).powi(2) + cov_se(&two, i, j).powi(2)).sqrt();
                assert!((direct.cov[i * c + j] - two.cov[i * c + j]).abs() < 4.0 * se, "case {case} ({i},{j})");
            }
        }
    }
}

#[test]
fn horizon_step_coalesces_at_the_mean() {
    let st = ParticleState::new(vec![vec![0.0], vec![2.0]]).unwrap();
    let spec = TransitionSpec::new(0.5, 1.0, 1.0, 2).unwrap();
    let d = draws(&st, &spec, 100_000, 3, false);
    assert!(d.iter().all(|x| x[0] == x[1]));
    let m = moments(&d);
    // N(X_bar, (T - s) / C)
    assert!((m.mean[0] - 1.0).abs() < 4.0 * (0.25f64 / m.n).sqrt());
    assert!((m.cov[0] - 0.25).abs() < 4.0 * cov_se(&m, 0, 0));
}
