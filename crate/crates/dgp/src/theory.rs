//! Numeric verification of the analytical claims about dual gradient
//! pruning: the Lipschitz band of the pruning map, the error-feedback
//! residual bound, attack degradation under pruning, the first-order
//! recovery-distance bound, and the convergence-rate shape.
//!
//! Expectations in the stated bounds are replaced by empirical means or
//! maxima over users and rounds; each check states its tolerance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::defense::{dgp_prune, DgpConfig};
use crate::error::{DgpError, Result};
use crate::metrics::Metric;
use crate::model::{Batch, GradientSet, MlpModel};
use crate::numerics::{Rng, Tensor};
use crate::sim::RunRecord;

/// Outcome of one claim check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub claim: String,
    pub measured: f64,
    pub bound: f64,
    pub satisfied: bool,
    pub note: Option<String>,
    pub inputs: BTreeMap<String, f64>,
}

impl BoundReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.claim,
            self.measured,
            self.bound,
            if self.satisfied { "pass" } else { "fail" }
        )
    }
}

/// Lower edge of the admissible band for the pruning-loss ratio.
pub fn assumption1_lower_bound(k1: f64, k2: f64) -> f64 {
    let s = (1.0 - k1 * k2).sqrt();
    (1.0 - s) * (1.0 - s)
}

/// Residual-energy bound `3*g1*(2+g1) / (2*(1-g1)^2) * G^2`.
pub fn lemma1_bound(gamma1: f64, g_sq: f64) -> f64 {
    3.0 * gamma1 * (2.0 + gamma1) / (2.0 * (1.0 - gamma1) * (1.0 - gamma1)) * g_sq
}

/// Degraded attack accuracy once the defender prunes with ratio `gamma1`.
pub fn theorem1_epsilon_prime(
    epsilon: f64,
    gamma1: f64,
    grad_norm: f64,
    metric: Metric,
) -> Result<f64> {
    if epsilon < 0.0 {
        return Err(DgpError::OutOfRange(format!("epsilon {epsilon} negative")));
    }
    if !(0.0..1.0).contains(&gamma1) {
        return Err(DgpError::OutOfRange(format!("gamma1 {gamma1} outside [0,1)")));
    }
    Ok(match metric {
        Metric::Euclidean => epsilon + gamma1.sqrt() * grad_norm,
        Metric::Cosine => epsilon + (1.0 - epsilon) * gamma1.sqrt(),
    })
}

/// Right-hand side of the convergence-rate bound.
pub fn theorem2_rhs(
    gap: f64,
    eta: f64,
    rounds: usize,
    k_smooth: f64,
    g_sq: f64,
    sigma_sq: f64,
    gamma1: f64,
) -> f64 {
    4.0 * gap / (eta * rounds as f64)
        + 2.0 * k_smooth * eta * (g_sq + sigma_sq)
        + 4.0 * eta * eta * k_smooth * k_smooth * lemma1_bound(gamma1, g_sq)
}

/// Step size achieving the stated rate. The square-root form is the one
/// the proof actually uses; the main statement drops the root.
pub fn corollary2_lr(gap: f64, k_smooth: f64, rounds: usize, sigma_sq_plus_g_sq: f64) -> f64 {
    (gap / (k_smooth * rounds as f64 * sigma_sq_plus_g_sq)).sqrt()
}

/// Pruning-loss ratio `||g - DGP(g)||^2 / ||g||^2` for one sample;
/// `None` marks a degenerate (zero) gradient.
fn prune_loss_ratio(grads: &GradientSet, cfg: &DgpConfig) -> Result<Option<f64>> {
    let denom = grads.norm_sq();
    if denom == 0.0 {
        return Ok(None);
    }
    let pruned = dgp_prune(grads, cfg).densify();
    Ok(Some(grads.sub(&pruned)?.norm_sq() / denom))
}

/// Checks that every sample's pruning-loss ratio lies in the admissible
/// band `((1 - sqrt(1 - k1*k2))^2, 1)`; reports the max ratio as the
/// empirical Lipschitz constant.
pub fn check_assumption1(samples: &[GradientSet], cfg: &DgpConfig) -> Result<BoundReport> {
    let lower = assumption1_lower_bound(cfg.k1, cfg.k2);
    let mut inputs = BTreeMap::new();
    inputs.insert("k1".into(), cfg.k1);
    inputs.insert("k2".into(), cfg.k2);
    inputs.insert("lower".into(), lower);

    if cfg.k1 == 0.0 && cfg.k2 == 0.0 {
        return Ok(BoundReport {
            claim: "assumption1".into(),
            measured: 0.0,
            bound: 1.0,
            satisfied: true,
            note: Some("identity pruning: claim vacuous, all samples skipped".into()),
            inputs,
        });
    }

    let mut max_ratio = 0.0f64;
    let mut skipped = 0usize;
    let mut violations = 0usize;
    for g in samples {
        match prune_loss_ratio(g, cfg)? {
            None => skipped += 1,
            Some(r) => {
                if !(r > lower && r < 1.0) {
                    violations += 1;
                }
                max_ratio = max_ratio.max(r);
            }
        }
    }
    inputs.insert("samples".into(), samples.len() as f64);
    inputs.insert("violations".into(), violations as f64);
    Ok(BoundReport {
        claim: "assumption1".into(),
        measured: max_ratio,
        bound: 1.0,
        satisfied: violations == 0 && samples.len() > skipped,
        note: (skipped > 0).then(|| format!("{skipped} degenerate samples skipped")),
        inputs,
    })
}

/// Checks the residual-energy bound round by round on an error-feedback
/// run, with the Lipschitz constant and gradient bound taken empirically
/// from the same run.
pub fn check_lemma1(records: &[RunRecord]) -> Result<BoundReport> {
    if records.is_empty() {
        return Err(DgpError::InvalidArgument("empty record stream".into()));
    }
    let gamma1 = records.iter().map(|r| r.max_prune_ratio).fold(0.0, f64::max);
    let g_sq = records.iter().map(|r| r.max_grad_sq_norm).fold(0.0, f64::max);
    let measured = records
        .iter()
        .map(|r| r.mean_residual_sq_norm)
        .fold(0.0, f64::max);
    let mut inputs = BTreeMap::new();
    inputs.insert("gamma1".into(), gamma1);
    inputs.insert("g_sq".into(), g_sq);
    inputs.insert("rounds".into(), records.len() as f64);

    if gamma1 >= 1.0 {
        return Ok(BoundReport {
            claim: "lemma1".into(),
            measured,
            bound: f64::INFINITY,
            satisfied: false,
            note: Some(format!("invalid premise: empirical gamma1 = {gamma1} >= 1")),
            inputs,
        });
    }
    let bound = lemma1_bound(gamma1, g_sq);
    let satisfied = records.iter().all(|r| r.mean_residual_sq_norm <= bound);
    Ok(BoundReport {
        claim: "lemma1".into(),
        measured,
        bound,
        satisfied,
        note: None,
        inputs,
    })
}

/// Companion empirical check for the degradation claim: with the
/// Lipschitz constant taken as the max ratio over the same samples,
/// `||DGP(g) - g|| <= sqrt(gamma1) * ||g||` must hold on each of them.
pub fn check_theorem1_empirical(samples: &[GradientSet], cfg: &DgpConfig) -> Result<BoundReport> {
    let mut gamma1 = 0.0f64;
    let mut ratios = Vec::new();
    for g in samples {
        if let Some(r) = prune_loss_ratio(g, cfg)? {
            gamma1 = gamma1.max(r);
            ratios.push((g, r));
        }
    }
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    for (g, _) in &ratios {
        let lhs = g.sub(&dgp_prune(g, cfg).densify())?.norm();
        let rhs = gamma1.sqrt() * g.norm();
        worst = worst.max(lhs - rhs);
        if lhs > rhs + 1e-12 * rhs.max(1.0) {
            violations += 1;
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("gamma1".into(), gamma1);
    inputs.insert("samples".into(), ratios.len() as f64);
    Ok(BoundReport {
        claim: "theorem1".into(),
        measured: worst,
        bound: 0.0,
        satisfied: violations == 0,
        note: None,
        inputs,
    })
}

/// First-order lower bound on the recovery distance:
/// `||x - x'|| >= ||phi(x) - phi(x')|| / ||J||_2` with `phi` the
/// single-sample gradient map and the Jacobian norm estimated by power
/// iteration on matrix-free finite-difference products.
///
/// The underlying claim is explicitly first-order, so this is a soft
/// diagnostic: `satisfied` allows 20% slack.
pub fn check_prop1(
    model: &MlpModel,
    x: &Tensor,
    x_prime: &Tensor,
    label: usize,
) -> Result<BoundReport> {
    let d = x.len();
    if x_prime.len() != d {
        return Err(DgpError::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: x_prime.shape().to_vec(),
        });
    }
    let phi = |z: &Tensor| -> Result<Vec<f64>> {
        let (_, g) = model.loss_and_grad(&Batch::single(z.data(), label))?;
        let mut flat = Vec::new();
        for (_, t) in g.iter() {
            flat.extend_from_slice(t.data());
        }
        Ok(flat)
    };

    let h = 1e-4;
    // J v by central differences of phi
    let jv = |v: &[f64]| -> Result<Vec<f64>> {
        let mut plus = x.clone();
        let mut minus = x.clone();
        for i in 0..d {
            plus.data_mut()[i] += h * v[i];
            minus.data_mut()[i] -= h * v[i];
        }
        let (p, m) = (phi(&plus)?, phi(&minus)?);
        Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    };
    // J^T u by central differences of psi(z) = <phi(z), u>
    let jtu = |u: &[f64]| -> Result<Vec<f64>> {
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let p: f64 = phi(&plus)?.iter().zip(u).map(|(a, b)| a * b).sum();
            let m: f64 = phi(&minus)?.iter().zip(u).map(|(a, b)| a * b).sum();
            out[i] = (p - m) / (2.0 * h);
        }
        Ok(out)
    };

    // power iteration on J^T J
    let mut rng = Rng::new(0x5150, 0);
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut sigma_sq = 0.0;
    for _ in 0..20 {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for a in v.iter_mut() {
            *a /= norm;
        }
        let y = jtu(&jv(&v)?)?;
        sigma_sq = v.iter().zip(&y).map(|(a, b)| a * b).sum();
        v = y;
    }
    let op_norm = sigma_sq.max(0.0).sqrt();

    let measured = x.sub(x_prime)?.norm();
    let mut inputs = BTreeMap::new();
    inputs.insert("jacobian_norm".into(), op_norm);
    if op_norm == 0.0 {
        return Ok(BoundReport {
            claim: "prop1".into(),
            measured,
            bound: f64::NAN,
            satisfied: false,
            note: Some("zero Jacobian norm: bound undefined".into()),
            inputs,
        });
    }
    let (px, pxp) = (phi(x)?, phi(x_prime)?);
    let grad_dist = px
        .iter()
        .zip(&pxp)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let bound = grad_dist / op_norm;
    let satisfied = bound <= measured * 1.2 + 1e-12;
    Ok(BoundReport {
        claim: "prop1".into(),
        measured,
        bound,
        satisfied,
        note: (!satisfied).then(|| "first-order bound violated beyond 20% slack".into()),
        inputs,
    })
}

/// Compares full-gradient decay of a pruned run against its unpruned
/// twin: (a) prefix averages of the squared full-gradient norm fit a
/// `c/sqrt(T) + d` shape with a decreasing trend; (b) the pruned run's
/// final average is at most twice the baseline's.
pub fn check_convergence(run_dgp: &[RunRecord], run_sgd: &[RunRecord]) -> Result<BoundReport> {
    let series = |records: &[RunRecord]| -> Result<Vec<f64>> {
        records
            .iter()
            .map(|r| {
                r.full_grad_sq_norm.ok_or_else(|| {
                    DgpError::InvalidArgument(
                        "run was not recorded with full-gradient tracking".into(),
                    )
                })
            })
            .collect()
    };
    let dgp = series(run_dgp)?;
    let sgd = series(run_sgd)?;
    if dgp.len() < 8 || sgd.len() < 8 {
        return Err(DgpError::InvalidArgument("need at least 8 rounds".into()));
    }

    // prefix averages at 8 window lengths
    let prefix_avg = |xs: &[f64], t: usize| xs[..t].iter().sum::<f64>() / t as f64;
    let windows: Vec<usize> = (1..=8).map(|i| dgp.len() * i / 8).collect();
    let avgs: Vec<f64> = windows.iter().map(|&t| prefix_avg(&dgp, t)).collect();

    // least-squares fit of avg(T) = c/sqrt(T) + d
    let (mut s_xx, mut s_x, mut s_xy, mut s_y) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &a) in windows.iter().zip(&avgs) {
        let b = 1.0 / (t as f64).sqrt();
        s_xx += b * b;
        s_x += b;
        s_xy += b * a;
        s_y += a;
    }
    let n = windows.len() as f64;
    let det = n * s_xx - s_x * s_x;
    let c = (n * s_xy - s_x * s_y) / det;
    let d_fit = (s_y * s_xx - s_x * s_xy) / det;

    let first = avgs[0];
    let last = *avgs.last().unwrap();
    let spread = (first - last).abs() / first.abs().max(1e-300);
    let flat = spread < 1e-6;
    let decreasing = c > 0.0 && last < first;

    let final_dgp = last;
    let final_sgd = prefix_avg(&sgd, sgd.len());
    let bound = 2.0 * final_sgd;

    let mut inputs = BTreeMap::new();
    inputs.insert("fit_c".into(), c);
    inputs.insert("fit_d".into(), d_fit);
    inputs.insert("first_window_avg".into(), first);
    inputs.insert("baseline_final_avg".into(), final_sgd);
    Ok(BoundReport {
        claim: "theorem2".into(),
        measured: final_dgp,
        bound,
        satisfied: !flat && decreasing && final_dgp <= bound,
        note: flat.then(|| "flat trajectory: trend check reports flat, not pass".into()),
        inputs,
    })
}

/// Spearman rank correlation; ties get their average rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DgpError::InvalidArgument("need two equal-length series".into()));
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (dx * dy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;
    use crate::sim::{train, Defense, RunConfig};
    use proptest::prelude::*;
    use crate::numerics::Rng as DetRng;

    /// Minimal independent expression evaluator used to cross-check the
    /// closed-form bounds: numbers, + - * / ( ) and sqrt().
    fn eval(expr: &str) -> f64 {
        struct P<'a> {
            s: &'a [u8],
            i: usize,
        }
        impl<'a> P<'a> {
            fn peek(&mut self) -> u8 {
                while self.i < self.s.len() && self.s[self.i] == b' ' {
                    self.i += 1;
                }
                if self.i < self.s.len() {
                    self.s[self.i]
                } else {
                    0
                }
            }
            fn expr(&mut self) -> f64 {
                let mut v = self.term();
                loop {
                    match self.peek() {
                        b'+' => {
                            self.i += 1;
                            v += self.term();
                        }
                        b'-' => {
                            self.i += 1;
                            v -= self.term();
                        }
                        _ => return v,
                    }
                }
            }
            fn term(&mut self) -> f64 {
                let mut v = self.atom();
                loop {
                    match self.peek() {
                        b'*' => {
                            self.i += 1;
                            v *= self.atom();
                        }
                        b'/' => {
                            self.i += 1;
                            v /= self.atom();
                        }
                        _ => return v,
                    }
                }
            }
            fn atom(&mut self) -> f64 {
                match self.peek() {
                    b'(' => {
                        self.i += 1;
                        let v = self.expr();
                        self.i += 1; // ')'
                        v
                    }
                    b'-' => {
                        self.i += 1;
                        -self.atom()
                    }
                    b's' => {
                        self.i += 5; // "sqrt("
                        let v = self.expr();
                        self.i += 1;
                        v.sqrt()
                    }
                    _ => {
                        let start = self.i;
                        while self.i < self.s.len()
                            && (self.s[self.i].is_ascii_digit()
                                || self.s[self.i] == b'.'
                                || self.s[self.i] == b'e')
                        {
                            self.i += 1;
                        }
                        std::str::from_utf8(&self.s[start..self.i])
                            .unwrap()
                            .parse()
                            .unwrap()
                    }
                }
            }
        }
        P { s: expr.as_bytes(), i: 0 }.expr()
    }

    #[test]
    fn expression_evaluator_sanity() {
        assert_eq!(eval("2+3*4"), 14.0);
        assert_eq!(eval("(2+3)*4"), 20.0);
        assert_eq!(eval("sqrt(0.25)"), 0.5);
        assert_eq!(eval("1-sqrt(1-0.08)"), 1.0 - 0.92f64.sqrt());
    }

    #[test]
    fn lemma1_bound_matches_evaluator() {
        let got = lemma1_bound(0.5, 1.0);
        let want = eval("3*0.5*(2+0.5)/(2*(1-0.5)*(1-0.5))*1");
        assert!((got - 7.5).abs() <= 1e-12);
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn theorem1_matches_evaluator() {
        let eu = theorem1_epsilon_prime(0.1, 0.25, 2.0, Metric::Euclidean).unwrap();
        assert!((eu - eval("0.1+sqrt(0.25)*2")).abs() <= 1e-12);
        assert!((eu - 1.1).abs() <= 1e-12);

        let cos = theorem1_epsilon_prime(0.0, 0.49, 0.0, Metric::Cosine).unwrap();
        assert!((cos - eval("0+(1-0)*sqrt(0.49)")).abs() <= 1e-12);
        assert!((cos - 0.7).abs() <= 1e-12);

        let zero = theorem1_epsilon_prime(0.3, 0.0, 5.0, Metric::Euclidean).unwrap();
        assert_eq!(zero, 0.3);
        let zero = theorem1_epsilon_prime(0.3, 0.0, 5.0, Metric::Cosine).unwrap();
        assert_eq!(zero, 0.3);

        assert!(theorem1_epsilon_prime(0.1, 1.0, 1.0, Metric::Cosine).is_err());
        assert!(theorem1_epsilon_prime(-0.1, 0.5, 1.0, Metric::Cosine).is_err());
    }

    #[test]
    fn theorem2_matches_evaluator() {
        let got = theorem2_rhs(1.0, 0.01, 100, 1.0, 1.0, 1.0, 0.5);
        let want = eval(
            "4*1/(0.01*100)+2*1*0.01*(1+1)+4*0.01*0.01*1*1*(3*0.5*(2+0.5)/(2*(1-0.5)*(1-0.5))*1)",
        );
        assert!((got - 4.043).abs() <= 1e-12, "{got}");
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn corollary2_lr_matches_evaluator() {
        let got = corollary2_lr(1.0, 2.0, 100, 2.0);
        assert!((got - eval("sqrt(1/(2*100*2))")).abs() <= 1e-12);
    }

    #[test]
    fn assumption1_lower_bound_example() {
        let got = assumption1_lower_bound(0.1, 0.8);
        assert!((got - eval("(1-sqrt(1-0.1*0.8))*(1-sqrt(1-0.1*0.8))")).abs() <= 1e-12);
        assert!((got - 0.001665).abs() <= 5e-6, "{got}");
    }

    #[test]
    fn assumption1_band_on_example_vector() {
        // ratio for the worked pruning example: removed energy over total
        let mut g = GradientSet::new();
        g.insert(
            "t",
            Tensor::from_vec(vec![0.9, -0.8, 0.3, -0.2, 0.15, 0.1, -0.05, 0.02]),
        );
        let cfg = DgpConfig::new(0.125, 0.375).unwrap();
        let report = check_assumption1(std::slice::from_ref(&g), &cfg).unwrap();
        assert!(report.satisfied);
        let total = g.norm_sq();
        let removed = 0.9f64 * 0.9 + (0.1f64 * 0.1 + 0.05 * 0.05 + 0.02 * 0.02);
        assert!((report.measured - removed / total).abs() <= 1e-12);
    }

    #[test]
    fn assumption1_identity_pruning_vacuous() {
        let mut g = GradientSet::new();
        g.insert("t", Tensor::from_vec(vec![1.0, 2.0]));
        let cfg = DgpConfig::new(0.0, 0.0).unwrap();
        let report = check_assumption1(&[g], &cfg).unwrap();
        assert!(report.satisfied);
        assert!(report.note.is_some());
    }

    #[test]
    fn assumption1_gaussian_samples_in_band() {
        let mut rng = DetRng::new(80, 0);
        let cfg = DgpConfig::new(0.05, 0.75).unwrap();
        let mut samples = Vec::new();
        for _ in 0..50 {
            let mut g = GradientSet::new();
            g.insert("t", gaussian(&mut rng, &[300], 0.0, 1.0).unwrap());
            samples.push(g);
        }
        let report = check_assumption1(&samples, &cfg).unwrap();
        assert!(report.satisfied, "{report:?}");
        let lower = assumption1_lower_bound(0.05, 0.75);
        assert!(report.measured > lower && report.measured < 1.0);
    }

    #[test]
    fn theorem1_empirical_tautology_holds() {
        let mut rng = DetRng::new(81, 0);
        let cfg = DgpConfig::new(0.1, 0.5).unwrap();
        let samples: Vec<GradientSet> = (0..30)
            .map(|_| {
                let mut g = GradientSet::new();
                g.insert("t", gaussian(&mut rng, &[100], 0.0, 1.0).unwrap());
                g
            })
            .collect();
        let report = check_theorem1_empirical(&samples, &cfg).unwrap();
        assert!(report.satisfied);
    }

    #[test]
    fn lemma1_holds_on_ef_run() {
        let cfg = RunConfig {
            rounds: 50,
            users: 4,
            eval_every: 0,
            defense: Defense::Dgp { k1: 0.05, k2: 0.75 },
            error_feedback: true,
            ..RunConfig::glyphs_default()
        };
        let out = train(&cfg).unwrap();
        let report = check_lemma1(&out.records).unwrap();
        assert!(report.satisfied, "{report:?}");
        assert!(report.measured <= report.bound);
    }

    #[test]
    fn lemma1_identity_pruning_zero_residual() {
        let cfg = RunConfig {
            rounds: 10,
            users: 2,
            eval_every: 0,
            defense: Defense::Dgp { k1: 0.0, k2: 0.0 },
            error_feedback: true,
            ..RunConfig::blobs_default()
        };
        let out = train(&cfg).unwrap();
        let report = check_lemma1(&out.records).unwrap();
        assert!(report.satisfied);
        assert_eq!(report.measured, 0.0);
        assert_eq!(report.bound, 0.0);
    }

    #[test]
    fn prop1_trivial_and_taylor_regime() {
        let mut rng = DetRng::new(82, 0);
        let model = MlpModel::random(&[6, 5, 3], &mut rng).unwrap();
        let x = gaussian(&mut rng, &[6], 0.5, 0.2).unwrap();

        let same = check_prop1(&model, &x, &x, 1).unwrap();
        assert_eq!(same.measured, 0.0);
        assert!(same.bound.abs() <= 1e-7, "bound {}", same.bound);

        // tiny perturbation: first-order bound is tight to o(1)
        let u = gaussian(&mut rng, &[6], 0.0, 1.0).unwrap();
        let x_prime = x.add(&u.scale(1e-4 / u.norm())).unwrap();
        let report = check_prop1(&model, &x, &x_prime, 1).unwrap();
        assert!(
            report.bound <= report.measured * (1.0 + 1e-2),
            "bound {} vs dist {}",
            report.bound,
            report.measured
        );
    }

    #[test]
    fn convergence_check_on_blobs() {
        let base = RunConfig {
            rounds: 120,
            users: 5,
            eval_every: 0,
            learning_rate: 0.3,
            track_full_grad: true,
            ..RunConfig::blobs_default()
        };
        let sgd = train(&base).unwrap();
        let dgp = train(&RunConfig {
            defense: Defense::Dgp { k1: 0.05, k2: 0.75 },
            error_feedback: true,
            ..base
        })
        .unwrap();
        let report = check_convergence(&dgp.records, &sgd.records).unwrap();
        assert!(report.satisfied, "{report:?}");
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap() + 1.0).abs() <= 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn lemma1_bound_monotone_in_gamma(a in 0.001f64..0.98, b in 0.001f64..0.98) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9);
            prop_assert!(lemma1_bound(lo, 1.0) < lemma1_bound(hi, 1.0));
        }

        #[test]
        fn theorem1_cosine_bounded_and_increasing(eps in 0.0f64..1.0, g in 0.0f64..0.99) {
            let e = theorem1_epsilon_prime(eps, g, 0.0, Metric::Cosine).unwrap();
            prop_assert!(e >= eps - 1e-15);
            prop_assert!(e <= 1.0 + 1e-12);
        }
    }
}
