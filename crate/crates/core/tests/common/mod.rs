//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dxloop_core::backbone::loss::{diagnosis_loss_with, exam_selection_loss, HeadBalance, LossMix};
use dxloop_core::backbone::{BackboneModel, Gradients, Linear, PooledInput};
use dxloop_core::bench::{bootstrap_ci, BootstrapConfig};
use dxloop_core::domain::{
    strategies_within, CategorySet, ExamCategory, KnownClass, VisitRecord, NUM_EXAM_HEADS,
};
use dxloop_core::indicators::IndicatorTable;
use dxloop_core::labeler::StrategyPrediction;
use dxloop_core::openmax::{weibull_log_likelihood, ClassCalibration, OpenMaxModel, WeibullTail};
use dxloop_core::policy::{
    Action, DecisionThresholds, DiagnosisModel, InstitutionCapability, PolicyEngine, SessionEvent,
    SessionStart,
};
use dxloop_core::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Weibull};

// ---------------------------------------------------------------- AUC

/// O(n^2) Mann-Whitney count; ties count one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Scores on a coarse grid so ties are common; both classes present.
pub fn random_scored_labels(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
            let scores = labels
                .iter()
                .map(|l| (rng.gen::<f64>() * 20.0).floor() + if *l { 2.0 } else { 0.0 })
                .collect();
            return (scores, labels);
        }
    }
}

// ---------------------------------------------------------------- labeler

/// Pair enumeration with raw bit arithmetic on the masks.
pub fn labeler_pair_oracle(strategies: &[StrategyPrediction]) -> BTreeMap<u16, [bool; NUM_EXAM_HEADS]> {
    let mut out = BTreeMap::new();
    for i in strategies {
        let bi = i.mask.set().bits();
        let mut t = [false; NUM_EXAM_HEADS];
        for j in strategies {
            let bj = j.mask.set().bits();
            if bi == bj || bi & bj != bi {
                continue;
            }
            let truth = if i.y_true == KnownClass::AD { [1.0, 0.0] } else { [0.0, 1.0] };
            let mut gain = 0.0;
            for k in 0..2 {
                gain += truth[k] * j.y_pred[k] - truth[k] * i.y_pred[k];
                gain += (1.0 - truth[k]) * i.y_pred[k] - (1.0 - truth[k]) * j.y_pred[k];
            }
            if gain > 0.0 {
                // bit 0 is Base; head h is category bit h + 1
                for (h, slot) in t.iter_mut().enumerate() {
                    if (bj & !bi) & (1 << (h + 1)) != 0 {
                        *slot = true;
                    }
                }
            }
        }
        out.insert(bi, t);
    }
    out
}

/// A visit with up to three exams and a random subset of at most
/// `max_strategies` of its strategies, in shuffled order.
pub fn random_visit_strategies(rng: &mut ChaCha8Rng, max_strategies: usize) -> Vec<StrategyPrediction> {
    let exams: Vec<ExamCategory> = ExamCategory::exams().collect();
    let n = rng.gen_range(0..=3);
    let present: CategorySet = exams
        .choose_multiple(rng, n)
        .copied()
        .chain([ExamCategory::Base])
        .collect();
    let class = if rng.gen_bool(0.5) { KnownClass::AD } else { KnownClass::CN };
    let mut masks = strategies_within(present);
    masks.shuffle(rng);
    let keep = rng.gen_range(1..=max_strategies.min(masks.len()));
    masks
        .into_iter()
        .take(keep)
        .map(|mask| {
            let p = if rng.gen_bool(0.2) { 0.5 } else { rng.gen::<f64>() };
            StrategyPrediction { mask, y_true: class, y_pred: [p, 1.0 - p] }
        })
        .collect()
}

// ---------------------------------------------------------------- Weibull

/// Coarse-then-fine grid search over (kappa, lambda) maximizing the
/// unshifted log-likelihood.
pub fn weibull_grid_search(samples: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    let (mut k_lo, mut k_hi, mut l_lo, mut l_hi) = (0.2, 5.0, 0.2, 6.0);
    for _ in 0..4 {
        for i in 0..=40 {
            let k = k_lo + (k_hi - k_lo) * i as f64 / 40.0;
            for j in 0..=40 {
                let l = l_lo + (l_hi - l_lo) * j as f64 / 40.0;
                let ll = weibull_log_likelihood(samples, 0.0, l, k);
                if ll > best.0 {
                    best = (ll, k, l);
                }
            }
        }
        let (dk, dl) = ((k_hi - k_lo) / 20.0, (l_hi - l_lo) / 20.0);
        (k_lo, k_hi, l_lo, l_hi) = (best.1 - dk, best.1 + dk, best.2 - dl, best.2 + dl);
    }
    (best.1, best.2)
}

pub fn weibull_samples(n: usize, shape: f64, scale: f64, s: u64) -> Vec<f64> {
    let dist = Weibull::new(scale, shape).unwrap();
    let mut rng = seed::rng(s);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

// ---------------------------------------------------------------- OpenMax

pub fn random_openmax_model(rng: &mut ChaCha8Rng) -> OpenMaxModel {
    let centers = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..rng.gen_range(1..4))
            .map(|_| (0..28).map(|_| rng.gen::<f64>()).collect())
            .collect()
    };
    let calib = |rng: &mut ChaCha8Rng| ClassCalibration {
        centers: centers(rng),
        tail: WeibullTail {
            tau: rng.gen_range(0.0..1.0),
            lambda: rng.gen_range(0.01..2.0),
            kappa: rng.gen_range(0.2..8.0),
        },
        threshold: rng.gen_range(0.0..1.5),
        quantile: 0.95,
    };
    OpenMaxModel {
        ad: calib(rng),
        cn: calib(rng),
        alpha: rng.gen_range(1..=2),
        abnormal_flag: rng.gen_bool(0.5),
        seed: 0,
    }
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-4;
const FD_WIDTH: usize = 3;
const FD_HIDDEN: usize = 5;

fn random_backbone(rng: &mut ChaCha8Rng) -> BackboneModel {
    let mut m = BackboneModel::initialize(FD_WIDTH, FD_HIDDEN, rng);
    m.diagnosis = Linear::glorot(FD_HIDDEN, 2, rng);
    m.exam = Linear::glorot(FD_HIDDEN + 2, NUM_EXAM_HEADS, rng);
    for p in m.params_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    for s in m.log_sigmas.iter_mut() {
        *s = rng.gen_range(-0.5..0.5);
    }
    m
}

/// Pooled input with some category slots left empty, as in real sessions.
fn random_pooled(rng: &mut ChaCha8Rng) -> PooledInput {
    let mut x: Vec<f64> = (0..PooledInput::dim_for(FD_WIDTH)).map(|_| rng.gen()).collect();
    for slot in 0..13 {
        if rng.gen_bool(0.5) {
            x[slot * FD_WIDTH..(slot + 1) * FD_WIDTH].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    PooledInput(x)
}

fn set_param(model: &mut BackboneModel, index: usize, value: f64) {
    *model.params_mut().nth(index).unwrap() = value;
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Fourth-order central difference.
fn central_difference(model: &BackboneModel, index: usize, loss: impl Fn(&BackboneModel) -> f64) -> f64 {
    let base = *model.params().nth(index).unwrap();
    let mut m = model.clone();
    let mut at = |k: f64| {
        set_param(&mut m, index, base + k * FD_STEP);
        loss(&m)
    };
    (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * FD_STEP)
}

/// Worst relative error between the analytic stage-one gradient and finite
/// differences of the public loss, over every stage-one parameter of
/// `draws` random models. Also fails if the returned loss disagrees.
pub fn diagnosis_gradient_error(draws: u64, seed_value: u64) -> Result<f64, String> {
    let mix = LossMix::default();
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = seed::stream_rng(seed_value, draw);
        let model = random_backbone(&mut rng);
        let x = random_pooled(&mut rng);
        let class = if rng.gen_bool(0.5) { KnownClass::AD } else { KnownClass::CN };
        let target = class.one_hot();
        let loss = |m: &BackboneModel| {
            let out = m.forward_pooled(&x).unwrap();
            diagnosis_loss_with(mix, &out.class_probs, &target, &out.reconstruction, &x.0).unwrap()
        };
        let mut grad = Gradients::zeros_like(&model);
        let value = model.diagnosis_step(&x.0, &target, mix, &mut grad);
        if (value - loss(&model)).abs() > 1e-12 {
            return Err(format!("draw {draw}: step loss {value} vs {}", loss(&model)));
        }
        // stage one trains everything except the exam head and log-sigmas
        let trained = model.encoder.weight.len()
            + model.encoder.bias.len()
            + model.diagnosis.weight.len()
            + model.diagnosis.bias.len()
            + model.decoder.weight.len()
            + model.decoder.bias.len();
        let analytic: Vec<f64> = grad.params().copied().collect();
        for (index, a) in analytic.iter().enumerate().take(trained) {
            worst = worst.max(relative_error(*a, central_difference(&model, index, loss)));
        }
    }
    Ok(worst)
}

fn random_balances(rng: &mut ChaCha8Rng) -> [Option<HeadBalance>; NUM_EXAM_HEADS] {
    std::array::from_fn(|head| {
        if rng.gen_bool(0.15) {
            None
        } else {
            Some(HeadBalance::from_counts(head, rng.gen_range(1..500), rng.gen_range(1..500)).unwrap())
        }
    })
}

/// Same as [`diagnosis_gradient_error`] for the selection loss, over the
/// exam head and the log-sigmas.
pub fn selection_gradient_error(draws: u64, seed_value: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = seed::stream_rng(seed_value, draw);
        let model = random_backbone(&mut rng);
        let x = random_pooled(&mut rng);
        let targets: [bool; NUM_EXAM_HEADS] = std::array::from_fn(|_| rng.gen_bool(0.4));
        let balances = random_balances(&mut rng);
        let loss = |m: &BackboneModel| {
            let out = m.forward_pooled(&x).unwrap();
            exam_selection_loss(&out.exam_scores, &targets, &m.log_sigmas, &balances).unwrap()
        };
        let mut grad = Gradients::zeros_like(&model);
        let data = model.exam_step(&x.0, &targets, &balances, &mut grad);
        // the caller adds ln(sigma_i) per active head
        let mut analytic: Vec<f64> = grad.params().copied().collect();
        let n = analytic.len();
        let mut reg = 0.0;
        for head in 0..NUM_EXAM_HEADS {
            if balances[head].is_some() {
                analytic[n - NUM_EXAM_HEADS + head] += 1.0;
                reg += model.log_sigmas[head];
            }
        }
        if (data + reg - loss(&model)).abs() > 1e-10 {
            return Err(format!("draw {draw}: step loss {} vs {}", data + reg, loss(&model)));
        }
        let exam_params = model.exam.weight.len() + model.exam.bias.len() + NUM_EXAM_HEADS;
        for index in n - exam_params..n {
            worst = worst.max(relative_error(analytic[index], central_difference(&model, index, loss)));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- class weights

/// Checks `gamma_P |P| + gamma_N |N| = |P| + |N|` on the exact weight ratios,
/// and that the f64 weights are those ratios correctly rounded.
pub fn class_weight_identity(trials: usize, seed_value: u64) -> Result<(), String> {
    let mut rng = seed::rng(seed_value);
    for _ in 0..trials {
        let p: u64 = rng.gen_range(1..10_000_000);
        let n: u64 = rng.gen_range(1..10_000_000);
        let b = HeadBalance::from_counts(0, p, n).map_err(|e| e.to_string())?;
        let (np, dp) = b.weight_ratio(true);
        let (nn, dn) = b.weight_ratio(false);
        let lhs = u128::from(np) * u128::from(p) * u128::from(dn) + u128::from(nn) * u128::from(n) * u128::from(dp);
        let rhs = u128::from(p + n) * u128::from(dp) * u128::from(dn);
        if lhs != rhs {
            return Err(format!("|P| = {p}, |N| = {n}: {lhs} != {rhs}"));
        }
        if b.gamma_pos != np as f64 / dp as f64 || b.gamma_neg != nn as f64 / dn as f64 {
            return Err(format!("|P| = {p}, |N| = {n}: weights not correctly rounded"));
        }
        let total = (p + n) as f64;
        let float = b.gamma_pos * p as f64 + b.gamma_neg * n as f64;
        if (float - total).abs() > 4.0 * f64::EPSILON * total {
            return Err(format!("|P| = {p}, |N| = {n}: f64 sum {float}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- bootstrap

/// Meta-trials whose accuracy interval on Bernoulli(0.8) data contains 0.8.
pub fn bootstrap_coverage(meta_trials: u64, sample_size: usize, trials: usize) -> usize {
    let mut covered = 0;
    for meta in 0..meta_trials {
        let mut rng = seed::stream_rng(99, meta);
        let cases: Vec<bool> = (0..sample_size).map(|_| rng.gen_bool(0.8)).collect();
        let cfg = BootstrapConfig { sample_size, trials, seed: meta };
        let ci = bootstrap_ci(
            &cases,
            |s| Ok(s.iter().filter(|c| ***c).count() as f64 / s.len() as f64),
            &cfg,
        )
        .unwrap();
        if ci.lo <= 0.8 && 0.8 <= ci.hi {
            covered += 1;
        }
    }
    covered
}

// ---------------------------------------------------------------- sessions

fn indicators_of(visit: &VisitRecord, table: &IndicatorTable, category: ExamCategory) -> BTreeMap<String, f64> {
    table
        .for_category(category)
        .filter_map(|r| visit.indicators.get(&r.name).map(|v| (r.name.clone(), *v)))
        .collect()
}

/// Drives one session for `visit` under a capability, refusing the
/// categories in `refuse` and any category the visit did not measure.
/// Returns a description of the first violated invariant.
pub fn session_violation<M: DiagnosisModel>(
    engine: &PolicyEngine<M>,
    history: &[VisitRecord],
    visit: &VisitRecord,
    capability: CategorySet,
    refuse: CategorySet,
    table: &IndicatorTable,
    thresholds: &DecisionThresholds,
) -> Option<String> {
    let start = SessionStart {
        subject_id: Some(visit.subject_id.clone()),
        visit_index: visit.visit_index,
        history: history.to_vec(),
        base_block: visit.blocks[&ExamCategory::Base].clone(),
        indicators: indicators_of(visit, table, ExamCategory::Base),
        capability: InstitutionCapability::new(capability).ok()?,
    };
    let (mut state, mut action) = match engine.start_session("s", start) {
        Ok(x) => x,
        Err(e) => return Some(format!("start failed: {e}")),
    };
    let mut requested = CategorySet::empty();
    let mut refused = CategorySet::empty();
    let mut predictions = 1;
    while let Action::RequestExam { category, .. } = action {
        if requested.contains(category) {
            return Some(format!("{category} requested twice"));
        }
        if refused.contains(category) {
            return Some(format!("{category} requested after a refusal"));
        }
        if !capability.contains(category) {
            return Some(format!("{category} outside the capability"));
        }
        requested = requested.with(category);
        let event = match visit.blocks.get(&category) {
            Some(block) if !refuse.contains(category) => {
                predictions += 1;
                SessionEvent::ExamResult {
                    category,
                    block: block.clone(),
                    indicators: indicators_of(visit, table, category),
                }
            }
            _ => {
                refused = refused.with(category);
                SessionEvent::ExamUnavailable { category }
            }
        };
        action = match engine.step(&mut state, event) {
            Ok(a) => a,
            Err(e) => return Some(format!("step failed: {e}")),
        };
    }
    if predictions > 13 || requested.len() > 12 {
        return Some(format!("{predictions} predictions, {} requests", requested.len()));
    }
    for entry in &state.trail {
        let sum: f64 = entry.probabilities.to_array().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Some(format!("probabilities sum to {sum}"));
        }
    }
    if let Action::Diagnose { label, probabilities } = action {
        let p = probabilities.get(dxloop_core::domain::Outcome::from_known(label));
        if p < thresholds.delta(dxloop_core::domain::Outcome::from_known(label)) {
            return Some(format!("diagnosed {label:?} at {p}"));
        }
    }
    None
}
