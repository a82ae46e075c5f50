use ndarray::{array, Axis};
use rand::SeedableRng;

use super::*;
use crate::datagen::{apply_label_space_setting, generate_domain_pair, split_and_label, GroupCounts, Setting, SyntheticConfig};
use crate::model::{ce_full, RowMasks};
use crate::rng::StreamRng;

fn data(setting: Setting, counts: GroupCounts, seed: u64) -> TrainData {
    let syn = SyntheticConfig {
        num_classes_total: 6,
        feature_dim: 4,
        samples_per_class_per_domain: 30,
        seed,
        ..SyntheticConfig::default()
    };
    let (s, t) = generate_domain_pair(&syn).unwrap();
    let (s, t, ls) = apply_label_space_setting(&s, &t, setting, counts).unwrap();
    let t = split_and_label(&t, 3, seed).unwrap();
    TrainData::new(s, t, ls).unwrap()
}

fn open_partial() -> TrainData {
    data(Setting::OpenPartial, GroupCounts::new(2, 2, 2), 3)
}

fn cfg(method: Method, iterations: usize) -> TrainConfig {
    TrainConfig {
        method,
        iterations,
        log_interval: 10,
        warmup_t: 40,
        ..TrainConfig::default()
    }
}

fn rr(label: usize, confidence: f64) -> RefinementResult {
    RefinementResult {
        reweighted: Vec::new(),
        refined: Vec::new(),
        pseudo_label: label,
        confidence,
        above_threshold: None,
        uniform_filled: false,
    }
}

fn labeled_target(data: &TrainData) -> LabeledBatch {
    let idx = data.target.indices(None, Some(true));
    LabeledBatch {
        features: data.target.features.select(Axis(0), &idx),
        labels: idx.iter().map(|&i| data.target.class_ids[i]).collect(),
        domains: vec![Domain::Target; idx.len()],
    }
}

fn unlabeled_batch(data: &TrainData, n: usize) -> UnlabeledBatch {
    let pool = data.unlabeled_target();
    let idx: Vec<usize> = (0..n.min(pool.len())).collect();
    UnlabeledBatch {
        features: pool.features.select(Axis(0), &idx),
        truths: idx.iter().map(|&i| pool.class_ids[i]).collect(),
    }
}

#[test]
fn warmup_examples() {
    assert_eq!(warmup_weight(0, 100), 0.0);
    assert!((warmup_weight(50, 100) - 0.5).abs() < 1e-15);
    assert_eq!(warmup_weight(100, 100), 1.0);
    assert_eq!(warmup_weight(1000, 100), 1.0);
}

#[test]
fn augmentation_identity_and_replay() {
    let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]];
    let off = AugmentConfig {
        weak_noise_sigma: 0.0,
        strong_noise_sigma: 0.0,
        strong_dropout_rate: 0.0,
    };
    let mut r = StreamRng::seed_from_u64(1);
    assert_eq!(augment(x.view(), AugmentKind::Strong, &off, &mut r), x);
    // no draws were consumed
    assert_eq!(r, StreamRng::seed_from_u64(1));

    let on = AugmentConfig::default();
    let a = augment(x.view(), AugmentKind::Strong, &on, &mut StreamRng::seed_from_u64(9));
    let b = augment(x.view(), AugmentKind::Strong, &on, &mut StreamRng::seed_from_u64(9));
    assert_eq!(a, b);
    assert_ne!(a, x);
    let w = augment(x.view(), AugmentKind::Weak, &on, &mut StreamRng::seed_from_u64(9));
    assert!(w.iter().all(|v| *v != 0.0));

    let replay = AugmentConfig {
        weak_noise_sigma: 0.1,
        strong_noise_sigma: 0.5,
        strong_dropout_rate: 0.2,
    };
    let first = augment(x.view(), AugmentKind::Strong, &replay, &mut StreamRng::seed_from_u64(4));
    assert_eq!(first, augment(x.view(), AugmentKind::Strong, &replay, &mut StreamRng::seed_from_u64(4)));

    // no dropout and equal sigmas: strong and weak draw the same noise
    let same = AugmentConfig {
        weak_noise_sigma: 0.3,
        strong_noise_sigma: 0.3,
        strong_dropout_rate: 0.0,
    };
    assert_eq!(
        augment(x.view(), AugmentKind::Strong, &same, &mut StreamRng::seed_from_u64(5)),
        augment(x.view(), AugmentKind::Weak, &same, &mut StreamRng::seed_from_u64(5))
    );
}

#[test]
fn unlabeled_loss_examples() {
    let confident = [rr(0, 0.95), rr(1, 0.97)];
    let exact = array![[1.0, 0.0], [0.0, 1.0]];
    assert_eq!(unlabeled_loss(&confident, &exact, 0.9).unwrap().0, 0.0);

    let p = array![[0.3, 0.7]];
    let (loss, w) = unlabeled_loss(&[rr(1, 0.6)], &p, 0.9).unwrap();
    assert_eq!(w, vec![0.5]);
    assert!((loss - 0.5 * -(0.7f64).ln()).abs() < 1e-15);

    let p = array![[0.8, 0.2], [0.4, 0.6]];
    let (loss, w) = unlabeled_loss(&[rr(0, 0.9), rr(1, 0.5)], &p, 0.9).unwrap();
    assert_eq!(w, vec![1.0, 0.5]);
    let (a, b) = (-(0.8f64).ln(), -(0.6f64).ln());
    assert!((loss - (a + b / 2.0) / 2.0).abs() < 1e-15);

    assert!(unlabeled_loss(&[rr(0, 1.0)], &exact, 0.9).is_err());
}

#[test]
fn zero_iterations_keep_initial_parameters() {
    let d = open_partial();
    let c = cfg(Method::Pgpr, 0);
    let (state, history) = run_with_state(&c, &d, None).unwrap();
    let fresh = TrainState::new(&c, &d).unwrap();
    assert_eq!(state.head, fresh.head);
    assert_eq!(state.prior, fresh.prior);
    assert!(history.records.is_empty());
}

#[test]
fn runs_are_bitwise_reproducible() {
    let d = open_partial();
    for method in Method::ALL {
        let c = cfg(method, 60);
        let a = run(&c, &d).unwrap();
        let b = run(&c, &d).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let other = run(&TrainConfig { seed: 1, ..c }, &d).unwrap();
        assert_ne!(a.model, other.model);
    }
}

#[test]
fn s_plus_t_fits_separable_labeled_data() {
    let d = data(Setting::Closed, GroupCounts::default(), 5);
    let out = run(&cfg(Method::SPlusT, 400), &d).unwrap();
    let preds = head_predictions(&out.model.head, d.source.features.view(), &d.masks.source).unwrap();
    let hits = preds.iter().zip(&d.source.class_ids).filter(|(p, t)| p == t).count();
    assert!(hits as f64 / preds.len() as f64 > 0.95, "{hits}/{}", preds.len());
}

#[test]
fn history_records_warmup_weight() {
    let d = open_partial();
    let c = cfg(Method::Pgpr, 95);
    let out = run(&c, &d).unwrap();
    let its: Vec<usize> = out.history.records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 94]);
    assert!(out.history.records.windows(2).all(|w| w[1].mu >= w[0].mu));
    for r in &out.history.records {
        assert_eq!(r.mu, warmup_weight(r.iteration, c.warmup_t));
        assert!(r.c_tau.is_some() && r.pseudo_label_accuracy.is_some());
    }
    let st = run(&cfg(Method::SPlusT, 20), &d).unwrap();
    assert!(st.history.records.iter().all(|r| r.unlabeled_loss == 0.0 && r.c_tau.is_none()));
}

/// A state and frozen inputs at iteration `t`, without augmentation noise.
fn frozen(method: Method, t: usize) -> (TrainConfig, TrainData, TrainState, LabeledBatch, StepInputs) {
    let d = open_partial();
    let mut c = cfg(method, 1);
    c.augmentation = AugmentConfig {
        weak_noise_sigma: 0.0,
        strong_noise_sigma: 0.0,
        strong_dropout_rate: 0.0,
    };
    let mut state = TrainState::new(&c, &d).unwrap();
    // move off the near-zero initialization so the heads disagree
    let warm = run_with_state(&TrainConfig { iterations: 30, ..c.clone() }, &d, None).unwrap().0;
    state.head = warm.head;
    state.prior = warm.prior;
    state.iteration = t;
    let labeled = labeled_target(&d);
    let unlabeled = unlabeled_batch(&d, 16);
    let inputs = draw_inputs(&mut state, &c, &labeled, &unlabeled);
    (c, d, state, labeled, inputs)
}

#[test]
fn composite_gradient_is_linear_in_mu() {
    let (c, d, state, labeled, inputs) = frozen(Method::Pgpr, 20);
    let comp = compute_step(&state, &c, &d, &labeled, &inputs).unwrap();
    assert!(comp.mu > 0.0 && comp.mu < 1.0);

    // labeled part alone, from an S+T computation on the same inputs
    let st = compute_step(&state, &TrainConfig { method: Method::SPlusT, ..c.clone() }, &d, &labeled, &inputs).unwrap();
    assert_eq!(st.head_labeled, comp.head_labeled);
    // unlabeled part, directly from the pseudo-labels and weights
    let pseudo: Vec<usize> = comp.refinements.iter().map(|r| r.pseudo_label).collect();
    let u = ce_full(
        &state.head,
        inputs.unlabeled_strong.view(),
        &pseudo,
        Some(&comp.weights),
        RowMasks::Shared(&d.masks.target),
        0.0,
    )
    .unwrap();
    assert!((u.loss - comp.unlabeled_loss).abs() < 1e-12);
    let expect_w = &st.head_labeled.weights + &(&u.grads.weights * comp.mu);
    let expect_b = &st.head_labeled.bias + &(&u.grads.bias * comp.mu);
    assert!((&expect_w - &comp.head_total.weights).iter().all(|v| v.abs() < 1e-12));
    assert!((&expect_b - &comp.head_total.bias).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let (c, d, state, labeled, inputs) = frozen(Method::Pgpr, 20);
    let comp = compute_step(&state, &c, &d, &labeled, &inputs).unwrap();
    let wd = c.head_optimizer.weight_decay;
    let objective = |s: &TrainState| {
        let r = compute_step(s, &c, &d, &labeled, &inputs).unwrap();
        let reg = s.head.weights.iter().chain(s.head.bias.iter()).map(|v| v * v).sum::<f64>();
        r.labeled_loss + r.mu * r.unlabeled_loss + 0.5 * wd * reg
    };
    let h = 1e-6;
    let classes = d.target.classes();
    for &k in &classes {
        for j in 0..d.dim() {
            let mut plus = state.clone();
            plus.head.weights[[k, j]] += h;
            let mut minus = state.clone();
            minus.head.weights[[k, j]] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = comp.head_total.weights[[k, j]];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!((numeric - analytic).abs() / denom < 1e-5, "w[{k},{j}] {numeric} vs {analytic}");
        }
    }
}

#[test]
fn prior_head_sees_only_labeled_data() {
    let (c, d, state, labeled, inputs) = frozen(Method::Pgpr, 20);
    let comp = compute_step(&state, &c, &d, &labeled, &inputs).unwrap();
    let masks: Vec<&crate::model::LogitMask> = labeled.domains.iter().map(|&dm| d.masks.for_domain(dm)).collect();
    let direct = ce_full(
        state.prior.as_ref().unwrap(),
        inputs.labeled_weak.view(),
        &labeled.labels,
        None,
        RowMasks::PerRow(&masks),
        c.prior_optimizer.weight_decay,
    )
    .unwrap();
    assert_eq!(comp.prior_grads.as_ref().unwrap(), &direct.grads);

    let mut other = inputs.clone();
    other.unlabeled_weak.mapv_inplace(|v| v * 3.0 + 1.0);
    other.unlabeled_strong.mapv_inplace(|v| -v);
    let comp2 = compute_step(&state, &c, &d, &labeled, &other).unwrap();
    assert_eq!(comp.prior_grads, comp2.prior_grads);
    assert_eq!(comp.head_labeled, comp2.head_labeled);
    assert_ne!(comp.head_unlabeled, comp2.head_unlabeled);

    // stepping moves the prior by its own gradient only
    let mut stepped = state.clone();
    let unlabeled = unlabeled_batch(&d, 16);
    stepped.step(&c, &d, &labeled, &unlabeled).unwrap();
    let lr = c.prior_optimizer.learning_rate;
    let before = state.prior.as_ref().unwrap();
    let after = stepped.prior.as_ref().unwrap();
    let expected = &before.weights - &(&direct.grads.weights * lr);
    assert!((&expected - &after.weights).iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn zero_mu_matches_s_plus_t_step_for_step() {
    let d = open_partial();
    let mut pg = cfg(Method::Pgpr, 80);
    pg.warmup_t = 1_000_000_000_000;
    let st = TrainConfig {
        method: Method::SPlusT,
        ..pg.clone()
    };
    let (a, ha) = run_with_state(&pg, &d, None).unwrap();
    let (b, hb) = run_with_state(&st, &d, None).unwrap();
    assert_eq!(a.head, b.head);
    for (x, y) in ha.records.iter().zip(&hb.records) {
        assert_eq!(x.mu, 0.0);
        assert_eq!(x.labeled_loss, y.labeled_loss);
        assert_eq!(x.transductive, y.transductive);
    }
}

#[test]
fn interpolation_with_unit_lambda_is_the_plain_loss() {
    let (mut c, d, state, labeled, inputs) = frozen(Method::Pgpr, 20);
    let plain = compute_step(&state, &c, &d, &labeled, &inputs).unwrap();
    c.logit_interpolation = true;
    let mut mixed_inputs = inputs.clone();
    mixed_inputs.labeled_alt = Some(inputs.labeled_weak.mapv(|v| v * 0.5 - 2.0));
    mixed_inputs.lambda = Some(1.0);
    let mixed = compute_step(&state, &c, &d, &labeled, &mixed_inputs).unwrap();
    assert!((plain.labeled_loss - mixed.labeled_loss).abs() < 1e-12);
    assert!((&plain.head_labeled.weights - &mixed.head_labeled.weights).iter().all(|v| v.abs() < 1e-12));
    assert!((&plain.head_labeled.bias - &mixed.head_labeled.bias).iter().all(|v| v.abs() < 1e-12));

    mixed_inputs.lambda = Some(0.3);
    let blended = compute_step(&state, &c, &d, &labeled, &mixed_inputs).unwrap();
    assert!((blended.labeled_loss - plain.labeled_loss).abs() > 1e-9);
}

#[test]
fn interpolation_runs_end_to_end() {
    let d = open_partial();
    let mut c = cfg(Method::Pgpr, 40);
    c.logit_interpolation = true;
    c.extractor = ExtractorConfig::Tanh { width: 6 };
    let out = run(&c, &d).unwrap();
    assert!(out.history.records.iter().all(|r| r.labeled_loss.is_finite()));
}

#[test]
fn logged_pseudo_label_accuracy_matches_final_snapshot() {
    let d = open_partial();
    let c = cfg(Method::Pgpr, 45);
    let (state, history) = run_with_state(&c, &d, None).unwrap();
    let last = history.records.last().unwrap();
    let pool = d.unlabeled_target();
    let snap = pseudo_label_snapshot(&state, &c, &d, pool.features.view()).unwrap().unwrap();
    let hits = snap.iter().zip(&pool.class_ids).filter(|(r, t)| r.pseudo_label == **t).count();
    assert_eq!(last.pseudo_label_accuracy, Some(hits as f64 / pool.len() as f64));
    assert_eq!(pseudo_label_snapshot(&state, &TrainConfig { method: Method::SPlusT, ..c }, &d, pool.features.view()).unwrap(), None);
}

#[test]
fn confident_heads_produce_true_pseudo_labels() {
    let d = open_partial();
    let mut c = cfg(Method::Pgpr, 1);
    c.augmentation.weak_noise_sigma = 0.0;
    let mut state = TrainState::new(&c, &d).unwrap();
    // nearest-mean classifier on the target domain, sharpened
    let classes = d.target.classes();
    let mut head = state.head.clone();
    for &k in &classes {
        let idx: Vec<usize> = (0..d.target.len()).filter(|&i| d.target.class_ids[i] == k).collect();
        let mean = d.target.features.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap();
        head.weights.row_mut(k).assign(&(&mean * 2.0));
        head.bias[k] = -mean.dot(&mean);
    }
    state.head = head.clone();
    state.prior = Some(head);
    let labeled = labeled_target(&d);
    let unlabeled = unlabeled_batch(&d, 40);
    let inputs = draw_inputs(&mut state, &c, &labeled, &unlabeled);
    let comp = compute_step(&state, &c, &d, &labeled, &inputs).unwrap();
    let confident = comp.refinements.iter().filter(|r| r.confidence > 0.99).count();
    assert!(confident >= 36, "{confident}");
    for (r, t) in comp.refinements.iter().zip(&unlabeled.truths) {
        if r.confidence > 0.99 {
            assert_eq!(r.pseudo_label, *t);
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let d = open_partial();
    let c = cfg(Method::Pgpr, 5);
    let mut state = TrainState::new(&c, &d).unwrap();
    let mut labeled = labeled_target(&d);
    labeled.features[[0, 0]] = f64::NAN;
    let before = state.head.clone();
    let err = state.step(&c, &d, &labeled, &unlabeled_batch(&d, 8)).unwrap_err();
    match err {
        Error::Numerical { iteration, detail } => {
            assert_eq!(iteration, 0);
            assert!(detail.contains("labeled loss NaN"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(state.head, before);
}

#[test]
fn labeled_target_fraction_draws_both_domains() {
    let d = open_partial();
    let mut c = cfg(Method::SPlusT, 1);
    c.labeled_target_fraction = Some(1.0);
    let mut src = BatchSource::new(&c, &d);
    let b = src.labeled(50, &d);
    assert!(b.domains.iter().all(|&x| x == Domain::Target));
    c.labeled_target_fraction = Some(0.0);
    let b = BatchSource::new(&c, &d).labeled(50, &d);
    assert!(b.domains.iter().all(|&x| x == Domain::Source));
    c.labeled_target_fraction = None;
    let b = BatchSource::new(&c, &d).labeled(500, &d);
    assert!(b.domains.contains(&Domain::Target) && b.domains.contains(&Domain::Source));
}

#[test]
fn cycling_sampler_covers_pool_before_repeating() {
    let mut s = CyclingSampler::new((0..7).collect(), StreamRng::seed_from_u64(2));
    let mut first: Vec<usize> = s.next_batch(7);
    first.sort();
    assert_eq!(first, (0..7).collect::<Vec<_>>());
    assert_eq!(s.next_batch(20).len(), 20);
}
