use bayesfusion::bridge::Segment;
use bayesfusion::estimator::{rho_tilde_component, ControlVariates, EstimatorConfig, EstimatorKind};
use bayesfusion::model::{make_logistic_problem, GaussianSubPosterior, SubPosterior};
use bayesfusion::rng::{self, Domain};

// E exp(-beta int_0^D X^2) for a Brownian bridge x0 -> x1 over D.
fn mehler(beta: f64, x0: f64, x1: f64, dur: f64) -> f64 {
    let w = (2.0 * beta).sqrt();
    let (sh, ch) = ((w * dur).sinh(), (w * dur).cosh());
    (w * dur / sh).sqrt() * ((x0 - x1).powi(2) / (2.0 * dur) - w * ((x0 * x0 + x1 * x1) * ch - 2.0 * x0 * x1) / (2.0 * sh)).exp()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn draws(sp: &dyn SubPosterior, seg: &Segment, cfg: &EstimatorConfig, count: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, Domain::Test, 0, 0);
    (0..count)
        .map(|_| rho_tilde_component(sp, None, seg, cfg, &mut r).unwrap().log_value.exp())
        .collect()
}

#[test]
fn ue_a_and_ue_b_match_closed_form() {
    // phi = ((x - a)^2 / s^2 - 1 / s) / 2 for N(a, s)
    let s = 0.05;
    let f = GaussianSubPosterior::new(vec![0.0], s).unwrap();
    let (x0, x1, dur) = (0.1, -0.05, 0.02);
    let oracle = mehler(1.0 / (2.0 * s * s), x0, x1, dur) * (dur / (2.0 * s)).exp();
    let seg = Segment::new(vec![x0], vec![x1], dur).unwrap();
    for kind in [EstimatorKind::UeA, EstimatorKind::UeB] {
        let (m, se) = mean_se(&draws(&f, &seg, &EstimatorConfig::new(kind), 50_000, 3));
        assert!((m - oracle).abs() < 3.5 * se, "{kind:?}: {m} vs {oracle} (se {se})");
    }
}

#[test]
fn subsampled_matches_exact_integrand() {
    let prob = make_logistic_problem(400, 2, &[-1.0, 0.5], 4).unwrap();
    let sps: Vec<&dyn SubPosterior> = prob.shards.iter().map(|s| s as &dyn SubPosterior).collect();
    let cv = ControlVariates::new(&sps, None).unwrap();
    let sp = &prob.shards[0];
    let a = sp.mode().unwrap();
    let x1: Vec<f64> = a.iter().map(|v| v + 0.05).collect();
    let seg = Segment::new(a.clone(), x1, 0.002).unwrap();
    let exact = mean_se(&draws(sp, &seg, &EstimatorConfig::new(EstimatorKind::UeA), 20_000, 5));
    let cfg = EstimatorConfig::new(EstimatorKind::Subsampled);
    let mut r = rng::stream(6, Domain::Test, 0, 0);
    let sub: Vec<f64> = (0..20_000)
        .map(|_| {
            rho_tilde_component(sp, Some(&cv.anchors[0]), &seg, &cfg, &mut r).unwrap().log_value.exp()
        })
        .collect();
    let sub = mean_se(&sub);
    let se = (exact.1.powi(2) + sub.1.powi(2)).sqrt();
    assert!((exact.0 - sub.0).abs() < 4.0 * se, "{exact:?} vs {sub:?}");
}
