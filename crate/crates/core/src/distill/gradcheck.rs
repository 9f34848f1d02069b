//! Finite-difference audit of every training loss on a small random network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objectives::{dmd_direction, dmd_surrogate, flow_matching_objective, generator_var, regression_objective, DmdNormalizer};
use super::{gradient_check, GradCheck};
use crate::error::Result;
use crate::models::{normal_vec, CondBatch, NetConfig, NetMode, VelocityNet};
use crate::tensor::Graph;

const UD: usize = 2;
const UNITS: usize = 4;
const ROWS: usize = 6;

/// Step used by [`loss_gradient_checks`].
pub const GRADCHECK_STEP: f64 = 1e-5;

fn random_net(rng: &mut ChaCha8Rng) -> Result<VelocityNet> {
    let cfg = NetConfig::new(UD, UNITS, NetMode::Causal).with_size(12, 2).with_context(1);
    let mut net = VelocityNet::new(cfg, rng.random())?;
    let ids: Vec<_> = net.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in net.params_mut().get_mut(id).values_mut() {
            *v += 0.3 * normal_vec(rng, 1)[0];
        }
    }
    Ok(net)
}

fn random_batch(rng: &mut ChaCha8Rng, t_one: bool) -> Result<CondBatch> {
    let t = (0..ROWS).map(|_| if t_one { 1.0 } else { rng.random_range(0.05..=1.0) }).collect();
    let unit = (0..ROWS).map(|_| rng.random_range(0..UNITS)).collect();
    CondBatch::new(normal_vec(rng, ROWS * UD), normal_vec(rng, ROWS * UD), t, unit)
}

fn generator(net: &VelocityNet, b: &CondBatch) -> Result<Vec<f64>> {
    let v = net.predict(b)?;
    Ok(b.x_t.iter().zip(&v).enumerate().map(|(j, (x, v))| x - b.t[j / UD] * v).collect())
}

/// Relative gradient errors of the flow-matching, causal ODE, causal CD, DMD
/// generator and fake-score losses, in that order.
pub fn loss_gradient_checks(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut net = random_net(&mut rng)?;
    let batch = random_batch(&mut rng, false)?;
    let target = normal_vec(&mut rng, ROWS * UD);
    let fm = |n: &VelocityNet, g: &mut Graph| flow_matching_objective(n, g, &batch, &target);
    out.push(("flow_matching", gradient_check(&mut net, fm, fm, GRADCHECK_STEP)?));

    let ode = |n: &VelocityNet, g: &mut Graph| regression_objective(n, g, &batch, &target);
    out.push(("causal_ode", gradient_check(&mut net, ode, ode, GRADCHECK_STEP)?));

    // CD: the target is the EMA generator one Euler teacher step earlier, a constant for theta.
    let teacher = random_net(&mut rng)?;
    let ema = random_net(&mut rng)?;
    let dt = 1.0 / 48.0;
    let v = teacher.predict(&batch)?;
    let s: Vec<f64> = batch.t.iter().map(|t| (t - dt).max(0.0)).collect();
    let x_hat = batch.x_t.iter().zip(&v).enumerate().map(|(j, (x, v))| x - (batch.t[j / UD] - s[j / UD]) * v).collect();
    let prev = CondBatch::new(x_hat, batch.ctx.clone(), s, batch.unit.clone())?;
    let cd_target = generator(&ema, &prev)?;
    let cd = |n: &VelocityNet, g: &mut Graph| regression_objective(n, g, &batch, &cd_target);
    out.push(("causal_cd", gradient_check(&mut net, cd, cd, GRADCHECK_STEP)?));

    // DMD generator: direction from two score nets at a re-noised one-step sample.
    let noise = random_batch(&mut rng, true)?;
    let sample = generator(&net, &noise)?;
    let probe_t: Vec<f64> = (0..ROWS).map(|_| rng.random_range(0.05..=1.0)).collect();
    let eps = normal_vec(&mut rng, ROWS * UD);
    let x_t = sample.iter().zip(&eps).enumerate().map(|(j, (x, e))| (1.0 - probe_t[j / UD]) * x + probe_t[j / UD] * e).collect();
    let probe = CondBatch::new(x_t, noise.ctx.clone(), probe_t, noise.unit.clone())?;
    let real = random_net(&mut rng)?;
    let v_real = real.predict(&probe)?;
    let v_fake = teacher.predict(&probe)?;
    let dir = dmd_direction(&v_real, &v_fake, &probe.x_t, &sample, &probe.t, UD, DmdNormalizer::Gap);
    let frozen: Vec<f64> = sample.iter().zip(&dir).map(|(x, d)| x - d).collect();
    let gen_out = |n: &VelocityNet, g: &mut Graph| {
        let x1 = g.constant(ROWS, UD, noise.x_t.clone())?;
        let ctx = g.constant(ROWS, UD, noise.ctx.clone())?;
        let v = n.forward(g, x1, ctx, &noise.t, &noise.unit, true)?;
        generator_var(g, x1, v, &noise.t)
    };
    let analytic = |n: &VelocityNet, g: &mut Graph| {
        let x = gen_out(n, g)?;
        dmd_surrogate(g, x, &dir)
    };
    let numeric = |n: &VelocityNet, g: &mut Graph| {
        let x = gen_out(n, g)?;
        let c = g.constant(ROWS, UD, frozen.clone())?;
        let se = g.squared_error(x, c)?;
        let m = g.mean(se)?;
        g.scale(m, 0.5 * UD as f64)
    };
    out.push(("dmd_generator", gradient_check(&mut net, analytic, numeric, GRADCHECK_STEP)?));

    // Fake score: flow matching on the student's samples.
    let mut fake = random_net(&mut rng)?;
    let fake_t: Vec<f64> = (0..ROWS).map(|_| rng.random_range(0.05..=1.0)).collect();
    let eps = normal_vec(&mut rng, ROWS * UD);
    let x_t = sample.iter().zip(&eps).enumerate().map(|(j, (x, e))| (1.0 - fake_t[j / UD]) * x + fake_t[j / UD] * e).collect();
    let fb = CondBatch::new(x_t, noise.ctx.clone(), fake_t, noise.unit.clone())?;
    let ft: Vec<f64> = eps.iter().zip(&sample).map(|(e, x)| e - x).collect();
    let fs = |n: &VelocityNet, g: &mut Graph| flow_matching_objective(n, g, &fb, &ft);
    out.push(("fake_score", gradient_check(&mut fake, fs, fs, GRADCHECK_STEP)?));
    Ok(out)
}
