use ridnet_core::data::SigmaSpec;
use ridnet_core::optim::{AdamConfig, AdamState};
use ridnet_core::params::ParamStore;
use ridnet_core::scenes::scene;
use ridnet_core::train::{lr_schedule, LossRecord};
use ridnet_core::{
    train, Checkpoint, Graph, ImageBuffer, NetworkConfig, RidNet, Tensor, TrainConfig, TrainEvent,
};

#[test]
fn adam_matches_three_step_hand_trace() {
    let mut store = ParamStore::<f64>::new();
    store.register("p", Tensor::scalar(1.0));
    let mut adam = AdamState::new(&store);
    // (parameter, first moment, second moment) after each step, worked by hand.
    let trace = [
        (0.9900000002, 0.05, 0.00025),
        (0.9865439418116511, 0.025, 0.00028975),
        (0.9827500240835696, 0.0325, 0.00029946025),
    ];
    for (g, want) in [0.5, -0.2, 0.1].into_iter().zip(trace) {
        let grad = Tensor::scalar(g);
        adam.step(&mut store, &[Some(&grad)], 0.01, &AdamConfig::default())
            .unwrap();
        assert!((store.values()[0].data()[0] - want.0).abs() < 1e-10);
        assert!((adam.m[0].data()[0] - want.1).abs() < 1e-10);
        assert!((adam.v[0].data()[0] - want.2).abs() < 1e-10);
    }
    assert_eq!(adam.t, 3);
}

#[test]
fn adam_rejects_missing_or_misshapen_gradients() {
    let mut store = ParamStore::<f64>::new();
    store.register("p", Tensor::zeros(&[2]));
    let mut adam = AdamState::new(&store);
    let cfg = AdamConfig::default();
    assert!(adam.step(&mut store, &[None], 0.1, &cfg).is_err());
    let wrong = Tensor::zeros(&[3]);
    assert!(adam.step(&mut store, &[Some(&wrong)], 0.1, &cfg).is_err());
    assert!(adam.step(&mut store, &[], 0.1, &cfg).is_err());
    assert_eq!(adam.t, 0);
}

#[test]
fn l1_loss_and_gradient_match_loops() {
    let pred: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
    let target: Vec<f64> = (0..24).map(|i| (i as f64 * 0.11).cos() * 0.5).collect();
    let mut g = Graph::new();
    let p = g.param(Tensor::new(&[2, 1, 3, 4], pred.clone()).unwrap());
    let t = g.constant(Tensor::new(&[2, 1, 3, 4], target.clone()).unwrap());
    let loss = g.l1_loss(p, t).unwrap();
    let mut want = 0.0;
    for i in 0..24 {
        want += (pred[i] - target[i]).abs();
    }
    want /= 24.0;
    assert!((g.value(loss).data()[0] - want).abs() < 1e-15);
    g.backward(loss).unwrap();
    for (i, &d) in g.grad(p).unwrap().data().iter().enumerate() {
        assert_eq!(d, (pred[i] - target[i]).signum() / 24.0);
    }
    let other = g.constant(Tensor::zeros(&[24]));
    assert!(g.l1_loss(p, other).is_err());
}

#[test]
fn schedule_halves_on_interval() {
    assert_eq!(lr_schedule(1e-4, 100_000, 0), 1e-4);
    assert_eq!(lr_schedule(1e-4, 100_000, 99_999), 1e-4);
    assert_eq!(lr_schedule(1e-4, 100_000, 100_000), 5e-5);
    assert_eq!(lr_schedule(1e-4, 100_000, 250_000), 2.5e-5);
    assert_eq!(lr_schedule(1.0, 1, 2000), 0.0);
}

fn corpus() -> Vec<ImageBuffer> {
    (0..4).map(|i| scene(i, 1, 40, 40).unwrap()).collect()
}

fn small_cfg(max_iters: u64) -> TrainConfig {
    TrainConfig {
        batch: 2,
        patch: 16,
        max_iters,
        lr0: 1e-3,
        lr_halving_interval: 3,
        checkpoint_every: 2,
        seed: 77,
        ..Default::default()
    }
}

fn fresh() -> Checkpoint {
    Checkpoint::new(RidNet::init(NetworkConfig::small(1, 8), 5).unwrap())
}

fn run(state: &mut Checkpoint, cfg: &TrainConfig) -> (Vec<LossRecord>, Vec<u64>) {
    let (mut steps, mut ckpts) = (Vec::new(), Vec::new());
    train(state, &corpus(), cfg, |e| {
        match e {
            TrainEvent::Step(r) => steps.push(r),
            TrainEvent::Checkpoint(c) => ckpts.push(c.iteration),
        }
        Ok(())
    })
    .unwrap();
    (steps, ckpts)
}

#[test]
fn first_step_matches_manual_update() {
    let cfg = small_cfg(1);
    let mut state = fresh();
    let (steps, _) = run(&mut state, &cfg);

    let mut net = fresh().net;
    let batch = cfg.batch_at(&corpus(), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(batch.noisy);
    let t = g.constant(batch.clean);
    let out = net.forward(&mut g, x, true).unwrap();
    let loss = g.l1_loss(out.output, t).unwrap();
    assert_eq!(steps[0].loss, g.value(loss).data()[0] as f64);
    g.backward(loss).unwrap();
    let grads: Vec<_> = out.params.iter().map(|&p| g.grad(p)).collect();
    let mut adam = AdamState::new(net.params());
    adam.step(net.params_mut(), &grads, 1e-3, &AdamConfig::default())
        .unwrap();
    assert_eq!(net, state.net);
    assert_eq!(Some(adam), state.optimizer);
}

#[test]
fn logs_every_step_with_scheduled_rate_and_checkpoints() {
    let mut state = fresh();
    let (steps, ckpts) = run(&mut state, &small_cfg(7));
    assert_eq!(
        steps.iter().map(|r| r.iter).collect::<Vec<_>>(),
        (0..7).collect::<Vec<_>>()
    );
    for r in &steps {
        assert_eq!(r.lr, lr_schedule(1e-3, 3, r.iter));
        assert!(r.loss.is_finite() && r.loss > 0.0);
    }
    assert_eq!(ckpts, [2, 4, 6, 7]);
    assert_eq!(state.iteration, 7);
    assert_eq!(state.optimizer.as_ref().unwrap().t, 7);
}

#[test]
fn training_is_deterministic() {
    let (mut a, mut b) = (fresh(), fresh());
    let la = run(&mut a, &small_cfg(5)).0;
    let lb = run(&mut b, &small_cfg(5)).0;
    assert_eq!(la, lb);
    assert_eq!(a.net, b.net);
    let mut c = fresh();
    let lc = run(
        &mut c,
        &TrainConfig {
            seed: 78,
            ..small_cfg(5)
        },
    )
    .0;
    assert_ne!(la, lc);
}

#[test]
fn resume_through_bytes_matches_unbroken_run() {
    let mut whole = fresh();
    let full = run(&mut whole, &small_cfg(6)).0;

    let mut first = fresh();
    let head = run(&mut first, &small_cfg(3)).0;
    let bytes = ridnet_core::checkpoint::encode(&first);
    let mut second = ridnet_core::checkpoint::decode(&bytes).unwrap();
    let tail = run(&mut second, &small_cfg(6)).0;

    assert_eq!([head, tail].concat(), full);
    assert_eq!(second.net, whole.net);
    assert_eq!(second.optimizer, whole.optimizer);
}

#[test]
fn stays_finite_across_seeds() {
    for seed in 0..10 {
        let mut state = Checkpoint::new(RidNet::init(NetworkConfig::small(1, 8), seed).unwrap());
        let cfg = TrainConfig {
            seed,
            sigma: SigmaSpec::Range(0.0, 55.0),
            ..small_cfg(4)
        };
        let (steps, _) = run(&mut state, &cfg);
        assert!(steps.iter().all(|r| r.loss.is_finite()), "seed {seed}");
        assert!(state.net.params().values().iter().all(|t| t.all_finite()));
    }
}

#[test]
fn short_run_reduces_loss() {
    let mut state = fresh();
    let cfg = TrainConfig {
        lr_halving_interval: 1000,
        checkpoint_every: 1000,
        ..small_cfg(120)
    };
    let (steps, _) = run(&mut state, &cfg);
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    assert!(mean(&steps[100..]) < mean(&steps[..20]));
}
