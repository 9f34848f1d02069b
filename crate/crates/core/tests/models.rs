use ardistill::diffusion::StepSchedule;
use ardistill::models::*;
use ardistill::tensor::Graph;
use ardistill::worlds::{oracle_flow_map, sample_sequences, AnalyticOracle, WorldSpec};
use ardistill::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Zero(usize, usize);

impl VelocityField for Zero {
    fn unit_dim(&self) -> usize {
        self.0
    }
    fn context(&self) -> usize {
        self.1
    }
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        Ok(vec![0.0; batch.x_t.len()])
    }
}

fn small(mode: NetMode) -> NetConfig {
    NetConfig::new(2, 8, mode).with_size(16, 2).with_context(2)
}

/// A net with a random (non-zero) output layer.
fn active_net(mode: NetMode, seed: u64) -> VelocityNet {
    let mut net = VelocityNet::new(small(mode), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let id = net.params().id("w2").unwrap();
    for v in net.params_mut().get_mut(id).values_mut() {
        *v = 0.3 * normal_vec(&mut rng, 1)[0];
    }
    net
}

#[test]
fn encode_context_padding_and_window() {
    let mut cache = ContextCache::new(4, 2, 1);
    assert_eq!(encode_context(&cache, 2).unwrap().values(), &[0.0; 4]);
    cache.push(&[1.0, 2.0]).unwrap();
    assert_eq!(encode_context(&cache, 2).unwrap().values(), &[0.0, 0.0, 1.0, 2.0]);
    cache.push(&[3.0, 4.0]).unwrap();
    cache.push(&[5.0, 6.0]).unwrap();
    assert_eq!(encode_context(&cache, 2).unwrap().values(), &[3.0, 4.0, 5.0, 6.0]);
    assert_eq!(cache.index(), 3);
}

#[test]
fn cache_holds_at_most_k_units() {
    let mut cache = ContextCache::new(2, 1, 1);
    for v in 0..5 {
        cache.push(&[v as f64]).unwrap();
        assert!(cache.len() <= 2);
    }
    assert_eq!(cache.encode(), vec![3.0, 4.0]);
    assert!(cache.push(&[1.0, 2.0]).is_err());
}

#[test]
fn fresh_net_predicts_zero_and_is_deterministic() {
    let net = VelocityNet::new(small(NetMode::Causal), 3).unwrap();
    let v = predict_velocity(&net, &[0.3, -1.0], &[0.1, 0.2, 0.3, 0.4], 0.7, 2).unwrap();
    assert_eq!(v, vec![0.0, 0.0]);
    let net = active_net(NetMode::Causal, 3);
    let a = predict_velocity(&net, &[0.3, -1.0], &[0.1, 0.2, 0.3, 0.4], 0.7, 2).unwrap();
    let b = predict_velocity(&net, &[0.3, -1.0], &[0.1, 0.2, 0.3, 0.4], 0.7, 2).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().any(|v| *v != 0.0));
}

#[test]
fn predict_rejects_bad_time_and_shapes() {
    let net = VelocityNet::new(small(NetMode::Causal), 3).unwrap();
    assert!(predict_velocity(&net, &[0.3, -1.0], &[0.0; 4], 1.5, 0).is_err());
    assert!(predict_velocity(&net, &[0.3], &[0.0; 4], 0.5, 0).is_err());
    assert!(predict_velocity(&net, &[0.3, 0.1], &[0.0; 4], 0.5, 8).is_err());
}

#[test]
fn taped_forward_matches_predict() {
    let net = active_net(NetMode::Causal, 9);
    let batch = CondBatch::new(
        vec![0.1, 0.2, -0.3, 0.4],
        vec![1.0, 0.0, 0.5, 0.5, -1.0, 2.0, 0.0, 0.3],
        vec![0.25, 0.9],
        vec![1, 7],
    )
    .unwrap();
    let mut g = Graph::new();
    let out = net.forward_batch(&mut g, &batch, true).unwrap();
    let taped = g.value(out).to_vec();
    let direct = net.predict(&batch).unwrap();
    for (a, b) in taped.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn zero_field_returns_the_noise() {
    let noise = [0.4, -1.2];
    let cache = ContextCache::new(2, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = few_step_sample_unit(&Zero(2, 2), &cache, &StepSchedule::one_step(), &noise, 0, &mut rng).unwrap();
    assert_eq!(out, noise.to_vec());
}

#[test]
fn one_step_flow_map_field_reproduces_the_flow_map() {
    let world = WorldSpec::gaussian_ar_default();
    let oracle = AnalyticOracle::new(world).unwrap();
    let field = FlowMapField::new(OracleField::new(oracle.clone(), 1, 2).unwrap(), 64);
    let mut cache = ContextCache::new(2, 2, 1);
    cache.push(&[0.5, -0.5]).unwrap();
    let noise = [1.1, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = few_step_sample_unit(&field, &cache, &StepSchedule::one_step(), &noise, 1, &mut rng).unwrap();
    let expected = oracle_flow_map(&oracle, &[0.5, -0.5], &noise, 1.0).unwrap();
    for (a, b) in out.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn empty_schedule_is_rejected() {
    assert!(StepSchedule::new(vec![]).is_err());
}

#[test]
fn single_unit_rollout_equals_unit_sampler() {
    let net = active_net(NetMode::Causal, 4);
    let config = RolloutConfig::new(StepSchedule::two_step(), 1, 1);
    let roll = self_rollout(&net, 3, 17, &config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = normal_vec(&mut rng, 6);
    let cache = ContextCache::new(2, 2, 3);
    let unit = few_step_sample_unit(&net, &cache, &StepSchedule::two_step(), &noise, 0, &mut rng).unwrap();
    assert_eq!(roll.frames, unit);
}

#[test]
fn seeded_rollouts_are_bit_identical() {
    let net = active_net(NetMode::Causal, 4);
    let config = RolloutConfig::new(StepSchedule::four_step(), 1, 8);
    let a = self_rollout(&net, 5, 99, &config).unwrap();
    let b = self_rollout(&net, 5, 99, &config).unwrap();
    assert_eq!(a, b);
    let c = self_rollout(&net, 5, 100, &config).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn asd_uses_four_calls_on_the_first_unit_only() {
    let net = Counted::new(active_net(NetMode::Causal, 5));
    let config = RolloutConfig::new(StepSchedule::one_step(), 1, 8).with_asd(true);
    self_rollout(&net, 1, 0, &config).unwrap();
    assert_eq!(net.evals(), 4 + 7);
    net.reset();
    self_rollout(&net, 1, 0, &config.clone().with_asd(false)).unwrap();
    assert_eq!(net.evals(), 8);
}

#[test]
fn teacher_forcing_matches_a_prefilled_cache() {
    let net = active_net(NetMode::Causal, 6);
    let gt = sample_sequences(&WorldSpec::gaussian_ar_default(), 4, 1).unwrap();
    let schedule = StepSchedule::two_step();
    for i in [0usize, 1, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = normal_vec(&mut rng, 8);
        let tf = teacher_forced_sample(&net, &gt, 1, &schedule, i, &noise, &mut rng.clone()).unwrap();
        let mut cache = ContextCache::new(2, 2, 4);
        for u in 0..i {
            let block: Vec<f64> = (0..4).flat_map(|b| gt.frame(b, u).to_vec()).collect();
            cache.push(&block).unwrap();
        }
        let cached = few_step_sample_unit(&net, &cache, &schedule, &noise, i, &mut rng.clone()).unwrap();
        assert_eq!(tf, cached);
        if i == 0 {
            let empty = ContextCache::new(2, 2, 4);
            let uncond = few_step_sample_unit(&net, &empty, &schedule, &noise, 0, &mut rng.clone()).unwrap();
            assert_eq!(tf, uncond);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(teacher_forced_sample(&net, &gt, 1, &schedule, 8, &[0.0; 8], &mut rng).is_err());
}

#[test]
fn rollout_from_a_forced_cache_matches_teacher_forcing() {
    let net = active_net(NetMode::Causal, 8);
    let gt = sample_sequences(&WorldSpec::gaussian_ar_default(), 2, 4).unwrap();
    let config = RolloutConfig::new(StepSchedule::two_step(), 1, 4);
    let mut cache = ContextCache::new(2, 2, 2);
    for u in 0..3 {
        let block: Vec<f64> = (0..2).flat_map(|b| gt.frame(b, u).to_vec()).collect();
        cache.push(&block).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let generated = continue_rollout(&net, &mut cache, &config, &mut rng.clone()).unwrap();
    let noise = normal_vec(&mut rng, 4);
    let tf = teacher_forced_sample(&net, &gt, 1, &config.schedule, 3, &noise, &mut rng).unwrap();
    assert_eq!(generated, vec![tf]);
}

#[test]
fn causal_masking_and_window() {
    let seq: Vec<f64> = (0..16).map(|v| v as f64 * 0.1).collect();
    let i = 5;
    let causal = active_net(NetMode::Causal, 11);
    let bidir = active_net(NetMode::Bidirectional, 11);
    let eval = |net: &VelocityNet, seq: &[f64]| {
        let ctx = match net.config().mode {
            NetMode::Causal => causal_context(seq, 2, 2, i),
            NetMode::Bidirectional => bidir_context(seq, 2, 2, i),
        };
        predict_velocity(net, &seq[2 * i..2 * i + 2], &ctx, 0.6, i).unwrap()
    };
    let mut future = seq.clone();
    future[2 * 6] += 1.0;
    assert_eq!(eval(&causal, &seq), eval(&causal, &future));
    assert_ne!(eval(&bidir, &seq), eval(&bidir, &future));
    let mut stale = seq.clone();
    stale[2 * 2] += 1.0; // older than i - k
    assert_eq!(eval(&causal, &seq), eval(&causal, &stale));
    let mut recent = seq.clone();
    recent[2 * 4] += 1.0;
    assert_ne!(eval(&causal, &seq), eval(&causal, &recent));
}

#[test]
fn graph_rollout_values_match_plain_rollout() {
    let net = active_net(NetMode::Causal, 13);
    for depth in [GradDepth::PerUnit, GradDepth::LastUnit, GradDepth::Full] {
        let mut config = RolloutConfig::new(StepSchedule::two_step(), 1, 4).with_asd(true);
        config.grad_depth = depth;
        let plain = self_rollout(&net, 3, 21, &config).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let taped = rollout_graph(&net, &mut g, 3, &config, &mut rng).unwrap();
        for (a, b) in plain.frames.iter().zip(&taped.values) {
            assert!((a - b).abs() < 1e-13, "{depth:?}");
        }
        let live = taped.units.iter().filter(|u| u.is_some()).count();
        assert_eq!(live, if depth == GradDepth::LastUnit { 1 } else { 4 });
    }
}

#[test]
fn checkpoint_round_trip() {
    let net = active_net(NetMode::Bidirectional, 2);
    let bytes = net.to_checkpoint().unwrap().to_bytes();
    let back = VelocityNet::from_checkpoint(&ardistill::tensor::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.config(), net.config());
    let ctx = vec![0.2; 8];
    assert_eq!(
        predict_velocity(&net, &[0.1, 0.2], &ctx, 0.5, 1).unwrap(),
        predict_velocity(&back, &[0.1, 0.2], &ctx, 0.5, 1).unwrap()
    );
}

#[test]
fn bidir_field_covers_every_unit() {
    let net = active_net(NetMode::Bidirectional, 5);
    let field = BidirField::new(&net, 8).unwrap();
    let x: Vec<f64> = (0..32).map(|v| (v as f64 * 0.37).sin()).collect();
    let v = field.velocity_seq(&x, 0.4).unwrap();
    assert_eq!(v.len(), 32);
    let seq = &x[16..];
    let direct = predict_velocity(&net, &seq[6..8], &bidir_context(seq, 2, 2, 3), 0.4, 3).unwrap();
    assert_eq!(&v[16 + 6..16 + 8], direct.as_slice());
}
