use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;

use speft_core::adapter::{attach, OptimizerConfig, OptimizerState, ParamGroup};
use speft_core::autodiff::{Graph, Var};
use speft_core::data::{gen_teacher_student, in_eval_split, BatchSampler, Dataset, TeacherStudentConfig};
use speft_core::experiment::ExperimentSpec;
use speft_core::masking::{budget, build_mask, MaskSchedule, Scope, SparsityMask};
use speft_core::model::{
    apply_low_rank_adapter, build_model, Activation, AdaptFilter, Batch, MlpTask, Model, ModelConfig, ParamSet,
    TransformerConfig,
};
use speft_core::salience::{
    model_salience, score_weights, FnObjective, LayerScores, Metric, SalienceConfig, SalienceScores,
};
use speft_core::trainer::{parity_density, train, LrSchedule, Observer, StateView, TraceEvent, TraceRecorder, TrainConfig};
use speft_core::{Result, SpeftError, Tensor};

fn mlp(widths: &[usize], seed: u64) -> (Model, ParamSet) {
    build_model(&ModelConfig::mlp(widths, Activation::Tanh, MlpTask::Regression), seed).unwrap()
}

fn dataset(inputs: usize, outputs: usize, n: usize, seed: u64) -> Dataset {
    gen_teacher_student(&TeacherStudentConfig {
        widths: vec![inputs, 6, outputs],
        activation: Activation::Tanh,
        teacher_seed: seed,
        noise: 0.01,
        n,
        eval_fraction: 0.25,
        seed,
    })
    .unwrap()
}

fn small_cfg(steps: u64, interval: i64, seed: u64) -> TrainConfig {
    let mut salience = SalienceConfig::new(Metric::Gradient);
    salience.batches = 2;
    salience.batch_size = 4;
    TrainConfig {
        salience,
        density: Some(0.3),
        interval,
        steps,
        batch_size: 4,
        optimizer: OptimizerConfig {
            lr: 1e-2,
            ..Default::default()
        },
        schedule: LrSchedule::Linear,
        seed,
        check_merge: true,
        ..Default::default()
    }
}

fn loss_and_grads(model: &Model, params: &ParamSet, batch: &Batch) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.value.clone())).collect();
    let loss = model.forward(&mut g, &vars, batch).unwrap();
    let value = g.value(loss).item();
    g.backward(loss).unwrap();
    (value, vars.iter().map(|v| g.grad_or_zeros(*v)).collect())
}

fn bits(t: &[Tensor]) -> Vec<u64> {
    t.iter().flat_map(|x| x.data().iter().map(|v| v.to_bits())).collect()
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..7, 2..5)
}

fn linear(grads: Vec<Vec<f64>>) -> FnObjective<impl Fn(&mut Graph, &[Var], usize) -> Result<Var>> {
    let n = grads.len();
    FnObjective::new(n, move |g, th, b| {
        let c = g.constant(Tensor::vector(grads[b].clone()));
        let p = g.mul(th[0], c)?;
        g.sum(p)
    })
}

fn flat(s: &SalienceScores) -> Vec<f64> {
    s.layers.iter().flat_map(|l| l.values.iter().copied()).collect()
}

fn argsort(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*b].partial_cmp(&values[*a]).unwrap().then(a.cmp(b)));
    order
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_length_must_match_shape(shape in prop::collection::vec(0usize..5, 0..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.5; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(shape, vec![0.5; n + extra]).is_err());
        }
    }

    #[test]
    fn gradients_match_leaf_shapes_and_repeat_bitwise(w in widths(), seed in 0u64..1000) {
        let (model, params) = mlp(&w, seed);
        let ds = dataset(w[0], *w.last().unwrap(), 16, seed);
        let batch = ds.make_batch(&ds.train[..4]).unwrap();
        let (l1, g1) = loss_and_grads(&model, &params, &batch);
        let (l2, g2) = loss_and_grads(&model, &params, &batch);
        for (g, p) in g1.iter().zip(params.iter()) {
            prop_assert_eq!(g.shape(), p.value.shape());
            prop_assert!(g.is_finite());
        }
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn second_backward_doubles_gradients(w in widths(), seed in 0u64..1000) {
        let (model, params) = mlp(&w, seed);
        let ds = dataset(w[0], *w.last().unwrap(), 16, seed);
        let batch = ds.make_batch(&ds.train[..4]).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.value.clone())).collect();
        let loss = model.forward(&mut g, &vars, &batch).unwrap();
        g.backward_retain(loss).unwrap();
        let once: Vec<Tensor> = vars.iter().map(|v| g.grad_or_zeros(*v)).collect();
        g.backward(loss).unwrap();
        for (v, a) in vars.iter().zip(&once) {
            let twice = g.grad_or_zeros(*v);
            for (x, y) in twice.data().iter().zip(a.data()) {
                prop_assert_eq!(x.to_bits(), (2.0 * y).to_bits());
            }
        }
        prop_assert!(matches!(g.backward(loss), Err(SpeftError::GraphConsumed)));
    }

    #[test]
    fn model_config_dimensions_are_validated(d_model in 1usize..24, heads in 1usize..6, ff in 0usize..8, vocab in 0usize..8) {
        let cfg = ModelConfig::TransformerEncoder(TransformerConfig {
            vocab_size: vocab,
            d_model,
            n_heads: heads,
            n_layers: 1,
            d_ff: ff,
            max_seq_len: 4,
            n_classes: 2,
            activation: Activation::Gelu,
        });
        let valid = vocab > 0 && ff > 0 && d_model % heads == 0;
        prop_assert_eq!(cfg.validate().is_ok(), valid);
        prop_assert_eq!(build_model(&cfg, 0).is_ok(), valid);
    }

    #[test]
    fn parameter_names_unique_and_order_stable(w in widths(), seed in 0u64..1000) {
        let (_, a) = mlp(&w, seed);
        let (_, b) = mlp(&w, seed);
        let names: Vec<&str> = a.iter().map(|p| p.name.as_str()).collect();
        let unique: BTreeSet<&str> = names.iter().copied().collect();
        prop_assert_eq!(unique.len(), names.len());
        prop_assert_eq!(names, b.iter().map(|p| p.name.as_str()).collect::<Vec<_>>());
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn zero_adapters_leave_forward_unchanged(seed in 0u64..1000, rho in 0.05f64..1.0, rank in 1usize..4) {
        let (model, params) = mlp(&[4, 8, 6], seed);
        let ds = dataset(4, 6, 16, seed);
        let batch = ds.make_batch(&ds.train[..4]).unwrap();
        let base_loss = model.loss(&params, &batch).unwrap();

        let adapt = params.adaptable(&AdaptFilter::all());
        let mut cfg = SalienceConfig::new(Metric::Random);
        cfg.seed = seed;
        let scores = model_salience(&model, &params, &adapt, &cfg, None).unwrap();
        let mask = build_mask(&scores, rho, Scope::Global).unwrap();
        let delta = attach(&mask, &params).unwrap();
        let mut g = Graph::new();
        let bound = delta.bind(&mut g, &params);
        let loss = model.forward(&mut g, &bound.weights, &batch).unwrap();
        prop_assert_eq!(g.value(loss).item().to_bits(), base_loss.to_bits());

        let lora = apply_low_rank_adapter(&params, &AdaptFilter::all(), rank, 8.0, seed).unwrap();
        let mut g = Graph::new();
        let bound = lora.bind(&mut g, &params).unwrap();
        let loss = model.forward(&mut g, &bound.weights, &batch).unwrap();
        prop_assert_eq!(g.value(loss).item().to_bits(), base_loss.to_bits());
    }

    #[test]
    fn scores_align_with_adaptable_weights(seed in 0u64..1000, metric in prop::sample::select(Metric::ALL.to_vec())) {
        let (model, params) = mlp(&[3, 5, 4, 2], seed);
        let ds = dataset(3, 2, 64, seed);
        let adapt = params.adaptable(&AdaptFilter::new(&["fc[01]"]).unwrap());
        let mut cfg = SalienceConfig::new(metric);
        cfg.batches = 3;
        cfg.batch_size = 4;
        cfg.seed = seed;
        let mut sampler = BatchSampler::new(ds.train.clone(), seed).unwrap();
        let batches: Vec<Vec<usize>> = (0..3).map(|_| sampler.next_batch(4)).collect();
        let run = || model_salience(&model, &params, &adapt, &cfg, Some((&ds, &batches))).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.layers.len(), adapt.len());
        for (l, i) in a.layers.iter().zip(&adapt) {
            prop_assert_eq!(&l.name, &params.param(*i).name);
            prop_assert_eq!(&l.shape[..], params.value(*i).shape());
            prop_assert!(l.values.iter().all(|v| v.is_finite()));
        }
        prop_assert_eq!(a.batches_used, if metric.needs_data() { 3 } else { 0 });
        prop_assert_eq!(flat(&a).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), flat(&b).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn data_free_metrics_ignore_the_data(seed in 0u64..1000, other in 0u64..1000) {
        let (model, params) = mlp(&[3, 5, 2], seed);
        let adapt = params.adaptable(&AdaptFilter::all());
        let (d1, d2) = (dataset(3, 2, 32, seed), dataset(3, 2, 32, other.wrapping_add(1)));
        let b1 = vec![d1.train[..4].to_vec()];
        let b2 = vec![d2.train[4..8].to_vec(), d2.train[..4].to_vec()];
        for metric in [Metric::Magnitude, Metric::Synflow] {
            let cfg = SalienceConfig::new(metric);
            let none = flat(&model_salience(&model, &params, &adapt, &cfg, None).unwrap());
            let one = flat(&model_salience(&model, &params, &adapt, &cfg, Some((&d1, &b1))).unwrap());
            let two = flat(&model_salience(&model, &params, &adapt, &cfg, Some((&d2, &b2))).unwrap());
            prop_assert_eq!(&none, &one);
            prop_assert_eq!(&none, &two);
        }
    }

    #[test]
    fn snip_and_taylor_rank_identically(
        grads in prop::collection::vec(prop::collection::vec(-3i32..=3, 12), 1..4),
        theta in prop::collection::vec(-3i32..=3, 12),
    ) {
        let grads: Vec<Vec<f64>> = grads.into_iter().map(|g| g.into_iter().map(f64::from).collect()).collect();
        let theta = vec![Tensor::vector(theta.into_iter().map(f64::from).collect())];
        let names = vec!["w".to_string()];
        let obj = linear(grads);
        let snip = flat(&score_weights(&SalienceConfig::new(Metric::Snip), &names, &theta, Some(&obj)).unwrap());
        let taylor = flat(&score_weights(&SalienceConfig::new(Metric::TaylorFo), &names, &theta, Some(&obj)).unwrap());
        prop_assert_eq!(argsort(&snip), argsort(&taylor));
    }

    #[test]
    fn fisher_unchanged_when_gradients_negate(
        grads in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 10), 1..5),
        theta in prop::collection::vec(-2.0f64..2.0, 10),
    ) {
        let theta = vec![Tensor::vector(theta)];
        let names = vec!["w".to_string()];
        let negated: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|x| -x).collect()).collect();
        let cfg = SalienceConfig::new(Metric::Fisher);
        let a = flat(&score_weights(&cfg, &names, &theta, Some(&linear(grads))).unwrap());
        let b = flat(&score_weights(&cfg, &names, &theta, Some(&linear(negated))).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn magnitude_depends_only_on_absolute_weights(values in prop::collection::vec(-5.0f64..5.0, 1..40), flips in prop::collection::vec(any::<bool>(), 40)) {
        let flipped: Vec<f64> = values.iter().zip(&flips).map(|(v, f)| if *f { -v } else { *v }).collect();
        let names = vec!["w".to_string()];
        let cfg = SalienceConfig::new(Metric::Magnitude);
        let a = flat(&score_weights(&cfg, &names, &[Tensor::vector(values)], None).unwrap());
        let b = flat(&score_weights(&cfg, &names, &[Tensor::vector(flipped)], None).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn estimation_batches_required_only_for_data_metrics(metric in prop::sample::select(Metric::ALL.to_vec())) {
        let mut cfg = SalienceConfig::new(metric);
        cfg.batches = 0;
        prop_assert_eq!(cfg.validate().is_ok(), !metric.needs_data());
    }

    #[test]
    fn small_densities_give_exact_cardinality(sizes in prop::collection::vec(1usize..4000, 1..5), rho_i in 0usize..4, seed in any::<u64>()) {
        let rho = [0.0018, 0.0024, 0.0027, 0.0035][rho_i];
        let tenths = [18u128, 24, 27, 35][rho_i];
        let mut state = seed | 1;
        let scores = SalienceScores {
            metric: Metric::Random,
            layers: sizes
                .iter()
                .enumerate()
                .map(|(i, n)| LayerScores {
                    name: format!("l{i}"),
                    shape: vec![*n],
                    values: (0..*n)
                        .map(|_| {
                            state ^= state << 13;
                            state ^= state >> 7;
                            state ^= state << 17;
                            (state % 1000) as f64
                        })
                        .collect(),
                })
                .collect(),
            batches_used: 0,
            reduction: "average_first".into(),
            seed,
        };
        let exact = |n: usize| (tenths * n as u128 / 10_000) as usize;
        let n: usize = sizes.iter().sum();
        prop_assert_eq!(budget(rho, n), exact(n));
        let increasing = |m: &SparsityMask| m.layers.iter().all(|l| l.indices.windows(2).all(|w| w[0] < w[1]));
        match build_mask(&scores, rho, Scope::Global) {
            Ok(m) => {
                prop_assert_eq!(m.nnz(), exact(n));
                prop_assert!(increasing(&m));
            }
            Err(_) => prop_assert_eq!(exact(n), 0),
        }
        match build_mask(&scores, rho, Scope::Local) {
            Ok(m) => {
                for (l, s) in m.layers.iter().zip(&sizes) {
                    prop_assert_eq!(l.indices.len(), exact(*s));
                }
                prop_assert!(increasing(&m));
            }
            Err(_) => prop_assert!(sizes.iter().all(|s| exact(*s) == 0)),
        }
    }

    #[test]
    fn refresh_schedule_counts(total in 1u64..5000, interval in -3i64..700) {
        let s = MaskSchedule::every(interval);
        let steps = s.refresh_steps(total);
        let brute: Vec<u64> = (1..=total).filter(|t| s.should_refresh(*t)).collect();
        prop_assert_eq!(&steps, &brute);
        if interval <= 0 {
            prop_assert_eq!(steps, vec![1]);
        } else {
            let i = interval as u64;
            prop_assert_eq!(steps.len() as u64, total / i + u64::from(i > 1));
            if total % i != 0 || i == 1 {
                prop_assert_eq!(steps.len() as u64, total.div_ceil(i));
            }
        }
    }

    #[test]
    fn reset_optimizer_matches_a_fresh_one(
        sizes in prop::collection::vec(1usize..6, 1..4),
        warm in 1usize..5,
        steps in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = OptimizerConfig { lr: 0.05, weight_decay: 0.1, ..Default::default() };
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2001) as f64 / 1000.0 - 1.0
        };
        let grads: Vec<Vec<Vec<f64>>> = (0..warm + steps).map(|_| sizes.iter().map(|n| (0..*n).map(|_| next()).collect()).collect()).collect();
        let start: Vec<Vec<f64>> = sizes.iter().map(|n| (0..*n).map(|_| next()).collect()).collect();
        let names: Vec<String> = (0..sizes.len()).map(|i| format!("g{i}")).collect();
        let apply = |opt: &mut OptimizerState, values: &mut Vec<Vec<f64>>, g: &[Vec<f64>]| {
            let mut groups: Vec<ParamGroup<'_>> = values
                .iter_mut()
                .zip(g)
                .zip(&names)
                .map(|((v, g), name)| ParamGroup { name, values: v, grad: g })
                .collect();
            opt.step(&mut groups, cfg.lr).unwrap();
        };
        let mut used = OptimizerState::new(cfg, &sizes);
        let mut scratch = start.clone();
        for g in &grads[..warm] {
            apply(&mut used, &mut scratch, g);
        }
        used.reinitialize(&sizes);
        prop_assert!(used.is_reset());
        prop_assert!(used.m.iter().zip(&sizes).all(|(m, n)| m.len() == *n));
        let mut fresh = OptimizerState::new(cfg, &sizes);
        let (mut a, mut b) = (start.clone(), start);
        for g in &grads[warm..] {
            apply(&mut used, &mut a, g);
            apply(&mut fresh, &mut b, g);
        }
        prop_assert_eq!(a, b);
        prop_assert_eq!(used, fresh);
    }

    #[test]
    fn train_config_validation(steps in 0u64..3, batch in 0usize..3, lr in -1.0f64..1.0, density in prop::option::of(0.0f64..1.5), method in 0usize..3) {
        let method = [speft_core::trainer::Method::Speft, speft_core::trainer::Method::LowRank, speft_core::trainer::Method::FullFt][method];
        let cfg = TrainConfig {
            method,
            steps,
            batch_size: batch,
            density,
            optimizer: OptimizerConfig { lr, ..Default::default() },
            ..Default::default()
        };
        let density_ok = match (method, density) {
            (speft_core::trainer::Method::Speft, Some(r)) => r > 0.0 && r <= 1.0,
            (speft_core::trainer::Method::Speft, None) => false,
            (_, d) => d.is_none(),
        };
        let valid = steps >= 1 && batch >= 1 && lr > 0.0 && density_ok;
        prop_assert_eq!(cfg.validate().is_ok(), valid);
    }

    #[test]
    fn sampler_visits_every_example_once_per_epoch(pool in prop::collection::btree_set(0usize..500, 1..60), seed in any::<u64>(), epochs in 1usize..4, size in 1usize..9) {
        let pool: Vec<usize> = pool.into_iter().collect();
        let mut s = BatchSampler::new(pool.clone(), seed).unwrap();
        let total = pool.len() * epochs;
        let mut drawn = Vec::new();
        while drawn.len() < total {
            let want = size.min(total - drawn.len());
            drawn.extend(s.next_batch(want));
        }
        for e in 0..epochs {
            let mut epoch: Vec<usize> = drawn[e * pool.len()..(e + 1) * pool.len()].to_vec();
            prop_assert_eq!(&epoch, &BatchSampler::permutation(&pool, seed, e as u64));
            epoch.sort_unstable();
            prop_assert_eq!(&epoch, &pool);
        }
    }

    #[test]
    fn splits_are_pure_disjoint_and_deterministic(seed in 0u64..1000, n in 8usize..200) {
        let a = dataset(3, 2, n, seed);
        let b = dataset(3, 2, n, seed);
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.eval, &b.eval);
        prop_assert_eq!(&a.examples, &b.examples);
        let train: BTreeSet<usize> = a.train.iter().copied().collect();
        prop_assert!(a.eval.iter().all(|i| !train.contains(i)));
        prop_assert_eq!(a.train.len() + a.eval.len(), n);
        for i in &a.eval {
            prop_assert!(in_eval_split(seed, *i, 0.25));
        }
    }
}

/// Checks the per-step event pattern and the static-mask fixity.
#[derive(Default)]
struct PatternObserver {
    events: Vec<TraceEvent>,
    masks: Vec<Vec<Vec<usize>>>,
}

impl Observer for PatternObserver {
    fn on_event(&mut self, event: TraceEvent, state: &StateView<'_>) {
        self.events.push(event);
        if let (TraceEvent::Step(_), Some(m)) = (event, state.mask) {
            self.masks.push(m.layers.iter().map(|l| l.indices.clone()).collect());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trace_follows_the_refresh_loop(total in 1u64..60, interval in -2i64..25, seed in 0u64..100) {
        let (model, params) = mlp(&[3, 6, 2], seed);
        let ds = dataset(3, 2, 48, seed);
        let mut obs = PatternObserver::default();
        let out = train(&small_cfg(total, interval, seed), &model, &params, &ds, &mut obs).unwrap();
        let schedule = MaskSchedule::every(interval);
        let mut expected = vec![TraceEvent::Init];
        for t in 1..=total {
            if schedule.should_refresh(t) {
                expected.push(TraceEvent::Refresh(t));
            }
            expected.extend([TraceEvent::Sample(t), TraceEvent::Forward(t), TraceEvent::Step(t)]);
        }
        prop_assert_eq!(&obs.events, &expected);
        prop_assert_eq!(out.log.refresh_steps(), schedule.refresh_steps(total));
        if interval <= 0 {
            prop_assert!(obs.masks.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn identical_seeds_reproduce_losses(seed in 0u64..1000, interval in prop::sample::select(vec![-1i64, 5])) {
        let (model, params) = mlp(&[3, 6, 2], seed);
        let ds = dataset(3, 2, 48, seed);
        let cfg = small_cfg(20, interval, seed);
        let run = || train(&cfg, &model, &params, &ds, &mut TraceRecorder::default()).unwrap().log.losses();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn delta_stays_on_its_mask(seed in 0u64..1000, steps in 1u64..30) {
        let (model, params) = mlp(&[3, 6, 2], seed);
        let ds = dataset(3, 2, 48, seed);
        let out = train(&small_cfg(steps, 7, seed), &model, &params, &ds, &mut TraceRecorder::default()).unwrap();
        let (delta, mask) = (out.delta.unwrap(), out.mask.unwrap());
        prop_assert_eq!(delta.layers.len(), mask.layers.len());
        for (d, m) in delta.layers.iter().zip(&mask.layers) {
            prop_assert_eq!(&d.indices, &m.indices);
            prop_assert!(d.values.iter().all(|v| v.is_finite()));
        }
        prop_assert!(delta.nonzeros() <= mask.nnz());
    }

    #[test]
    fn parity_counts_match_within_one(hidden in prop::collection::vec(4usize..40, 1..4), rank in 1usize..4, local in any::<bool>()) {
        let mut w = vec![4];
        w.extend(hidden);
        w.push(4);
        let (_, params) = mlp(&w, 0);
        let scope = if local { Scope::Local } else { Scope::Global };
        if let Ok(plan) = parity_density(&params, &AdaptFilter::all(), rank, scope) {
            prop_assert!(plan.gap() <= 1, "{:?}", plan);
            let n: usize = params.adaptable(&AdaptFilter::all()).iter().map(|i| params.value(*i).numel()).sum();
            prop_assert!(plan.density > 0.0 && plan.density <= 1.0 && plan.adaptable == n);
        }
    }
}

const SPEC_LINES: [&str; 6] = [
    "density = 0.25",
    "steps = 5",
    "batch_size = 8",
    "interval = 2",
    "seed = 3",
    "scope = \"local\"",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn key_order_does_not_change_run_ids(order in Just((0..SPEC_LINES.len()).collect::<Vec<_>>()).prop_shuffle()) {
        let header = "name = \"p\"\nseeds = 2\n\n[model]\narchitecture = \"mlp\"\nwidths = [4, 8, 2]\n\n[dataset]\nkind = \"teacher_student\"\nwidths = [4, 6, 2]\nteacher_seed = 1\nnoise = 0.0\nn = 64\n";
        let canonical = format!("{header}\n[train]\n{}\n", SPEC_LINES.join("\n"));
        let shuffled = format!("{header}\n[train]\n{}\n", order.iter().map(|i| SPEC_LINES[*i]).collect::<Vec<_>>().join("\n"));
        // Tables may also move around.
        let moved = format!("[dataset]\nn = 64\nnoise = 0.0\nteacher_seed = 1\nwidths = [4, 6, 2]\nkind = \"teacher_student\"\n\n[train]\n{}\n\n[model]\nwidths = [4, 8, 2]\narchitecture = \"mlp\"\n", SPEC_LINES.join("\n"));
        let moved = format!("seeds = 2\nname = \"p\"\n{moved}");
        let ids = |text: &str| -> Vec<String> {
            ExperimentSpec::parse(text, Path::new("p.toml")).unwrap().expand().unwrap().into_iter().map(|r| r.id).collect()
        };
        let base = ids(&canonical);
        prop_assert_eq!(&base, &ids(&shuffled));
        prop_assert_eq!(&base, &ids(&moved));
        let unique: BTreeSet<&String> = base.iter().collect();
        prop_assert_eq!(unique.len(), base.len());
    }
}
