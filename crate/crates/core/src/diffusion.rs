//! Rectified-flow diffusion: alpha(t) = 1 - t, sigma(t) = t.
//!
//! Frames are flat `f64` slices; any batch of frames laid out back to back is a
//! valid frame for the pointwise operations here.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, shape_err, Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    pub fn alpha(t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(t: f64) -> f64 {
        t
    }
}

fn check_time(op: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("{op}: t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("{} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// x_t = (1 - t) x0 + t eps
pub fn forward_diffuse(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_same_len("forward_diffuse", x0, eps)?;
    check_time("forward_diffuse", t)?;
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| NoiseSchedule::alpha(t) * x + NoiseSchedule::sigma(t) * e)
        .collect())
}

/// v = eps - x0
pub fn velocity_target(x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_same_len("velocity_target", x0, eps)?;
    Ok(eps.iter().zip(x0).map(|(e, x)| e - x).collect())
}

/// G = x_t - t v, the one-jump estimate of the clean endpoint.
pub fn generator_transform(x_t: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_same_len("generator_transform", x_t, v)?;
    check_time("generator_transform", t)?;
    Ok(x_t.iter().zip(v).map(|(x, v)| x - t * v).collect())
}

/// Mean squared error between a velocity prediction and its target.
pub fn flow_matching_loss(g: &mut Graph, prediction: Var, v_target: &[f64]) -> Result<Var> {
    let (rows, cols) = g.dims(prediction);
    if v_target.is_empty() {
        return Err(Error::InvalidArgument("flow_matching_loss: empty batch".into()));
    }
    if rows * cols != v_target.len() {
        return Err(shape_err(
            "flow_matching_loss",
            format!("prediction [{rows}, {cols}] vs {} targets", v_target.len()),
        ));
    }
    let target = g.constant(rows, cols, v_target.to_vec())?;
    let se = g.squared_error(prediction, target)?;
    g.mean(se)
}

/// Uniform grid 0 = t_0 < t_1 < ... < t_K = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    k: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { k: 48 }
    }
}

impl TimeGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("time grid needs K >= 1".into()));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.k as f64
    }

    /// t_j = j / K, with exact endpoints.
    pub fn time(&self, j: usize) -> f64 {
        assert!(j <= self.k, "grid index {j} > K = {}", self.k);
        if j == self.k {
            1.0
        } else {
            j as f64 / self.k as f64
        }
    }

    pub fn ascending(&self) -> Vec<f64> {
        (0..=self.k).map(|j| self.time(j)).collect()
    }

    /// 1 = t_K > ... > t_0 = 0, the order a PF-ODE solve walks.
    pub fn descending(&self) -> Vec<f64> {
        (0..=self.k).rev().map(|j| self.time(j)).collect()
    }
}

/// Few-step sampling times, descending from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    times: Vec<f64>,
}

impl StepSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("step schedule is empty".into()));
        }
        if times[0] != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "step schedule must start at 1.0, got {}",
                times[0]
            )));
        }
        if times.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "step schedule entries must lie in (0, 1]: {times:?}"
            )));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "step schedule must be strictly descending: {times:?}"
            )));
        }
        Ok(Self { times })
    }

    pub fn four_step() -> Self {
        Self {
            times: vec![1.0, 0.9375, 0.8333, 0.625],
        }
    }

    pub fn two_step() -> Self {
        Self {
            times: vec![1.0, 0.8333],
        }
    }

    pub fn one_step() -> Self {
        Self { times: vec![1.0] }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "four_step" | "4" => Ok(Self::four_step()),
            "two_step" | "2" => Ok(Self::two_step()),
            "one_step" | "1" => Ok(Self::one_step()),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule `{other}` (expected four_step, two_step, one_step)"
            ))),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Vec<f64>,
    pub t: f64,
}

impl DiffusionState {
    pub fn new(x: Vec<f64>, t: f64) -> Result<Self> {
        check_time("diffusion state", t)?;
        check_finite("diffusion state", &x)?;
        Ok(Self { x, t })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    #[default]
    Euler,
    Heun,
}

/// One reverse-time step of dx = v(x, t) dt from `state.t` down to `t_next`.
pub fn pf_ode_step<F>(v_fn: &mut F, state: &DiffusionState, t_next: f64, method: OdeMethod) -> Result<DiffusionState>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if !(t_next < state.t) {
        return Err(Error::InvalidArgument(format!(
            "pf_ode_step: t_next = {t_next} must be below t = {}",
            state.t
        )));
    }
    check_time("pf_ode_step", t_next)?;
    let h = t_next - state.t;
    let v0 = eval(v_fn, &state.x, state.t)?;
    let euler: Vec<f64> = state.x.iter().zip(&v0).map(|(x, v)| x + h * v).collect();
    let x = match method {
        OdeMethod::Euler => euler,
        OdeMethod::Heun => {
            let v1 = eval(v_fn, &euler, t_next)?;
            state
                .x
                .iter()
                .zip(v0.iter().zip(&v1))
                .map(|(x, (a, b))| x + 0.5 * h * (a + b))
                .collect()
        }
    };
    check_finite("pf_ode_step", &x)?;
    Ok(DiffusionState { x, t: t_next })
}

fn eval<F>(v_fn: &mut F, x: &[f64], t: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let v = v_fn(x, t)?;
    if v.len() != x.len() {
        return Err(shape_err("velocity evaluator", format!("{} vs {}", v.len(), x.len())));
    }
    check_finite("velocity evaluator", &v)?;
    Ok(v)
}

/// Integrates from t = 1 along `grid` (strictly descending, 1 -> 0) and returns every state.
pub fn pf_ode_solve<F>(v_fn: &mut F, x1: &[f64], grid: &[f64], method: OdeMethod) -> Result<Vec<DiffusionState>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    validate_descending_grid(grid, 0.0)?;
    let mut traj = Vec::with_capacity(grid.len());
    traj.push(DiffusionState::new(x1.to_vec(), 1.0)?);
    for &t in &grid[1..] {
        let next = pf_ode_step(v_fn, traj.last().expect("non-empty"), t, method)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Like [`pf_ode_solve`] but the grid may stop at any `t_end` in [0, 1).
pub fn pf_ode_solve_to<F>(v_fn: &mut F, x1: &[f64], grid: &[f64], method: OdeMethod) -> Result<Vec<DiffusionState>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let end = *grid.last().ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    validate_descending_grid(grid, end)?;
    let mut traj = vec![DiffusionState::new(x1.to_vec(), 1.0)?];
    for &t in &grid[1..] {
        let next = pf_ode_step(v_fn, traj.last().expect("non-empty"), t, method)?;
        traj.push(next);
    }
    Ok(traj)
}

fn validate_descending_grid(grid: &[f64], end: f64) -> Result<()> {
    if grid.len() < 2 || grid[0] != 1.0 || *grid.last().unwrap() != end {
        return Err(Error::InvalidArgument(format!(
            "grid must run from 1.0 to {end} with at least two points"
        )));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) || !(0.0..1.0).contains(&end) {
        return Err(Error::InvalidArgument("grid must be strictly descending within [0, 1]".into()));
    }
    Ok(())
}

/// Uniform descending grid with `steps` intervals from 1 down to `t_end`.
pub fn uniform_descending(steps: usize, t_end: f64) -> Vec<f64> {
    (0..=steps)
        .map(|j| {
            if j == steps {
                t_end
            } else {
                1.0 - (1.0 - t_end) * j as f64 / steps as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;

    #[test]
    fn forward_diffuse_examples() {
        assert_eq!(forward_diffuse(&[2.0], &[0.0], 0.25).unwrap(), vec![1.5]);
        assert_eq!(forward_diffuse(&[2.0, -1.0], &[0.3, 0.7], 0.0).unwrap(), vec![2.0, -1.0]);
        assert_eq!(forward_diffuse(&[2.0, -1.0], &[0.3, 0.7], 1.0).unwrap(), vec![0.3, 0.7]);
        assert!(forward_diffuse(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(forward_diffuse(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!((NoiseSchedule::alpha(0.0), NoiseSchedule::sigma(0.0)), (1.0, 0.0));
        assert_eq!((NoiseSchedule::alpha(1.0), NoiseSchedule::sigma(1.0)), (0.0, 1.0));
    }

    #[test]
    fn velocity_target_examples() {
        assert_eq!(velocity_target(&[1.0], &[3.0]).unwrap(), vec![2.0]);
        assert_eq!(velocity_target(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(velocity_target(&[-1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert!(velocity_target(&[1.0], &[]).is_err());
    }

    #[test]
    fn generator_transform_examples() {
        assert_eq!(generator_transform(&[0.3, -4.0], 0.0, &[9.0, 9.0]).unwrap(), vec![0.3, -4.0]);
        assert_eq!(generator_transform(&[1.0], 1.0, &[1.0]).unwrap(), vec![0.0]);
        let g = generator_transform(&[0.5], 0.5, &[-0.2]).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15);
        assert!(generator_transform(&[0.5, 1.0], 0.5, &[-0.2]).is_err());
    }

    #[test]
    fn flow_matching_loss_examples() {
        let target = vec![0.5, -1.0, 2.0, 0.0];
        let mut g = Graph::new();
        let pred = g.constant(2, 2, target.clone()).unwrap();
        let l = flow_matching_loss(&mut g, pred, &target).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);

        let delta = 0.3;
        let shifted: Vec<f64> = target.iter().map(|v| v + delta).collect();
        let mut g = Graph::new();
        let pred = g.constant(2, 2, shifted).unwrap();
        let l = flow_matching_loss(&mut g, pred, &target).unwrap();
        assert!((g.scalar(l).unwrap() - delta * delta).abs() < 1e-15);

        let mut g = Graph::new();
        let pred = g.constant(1, 1, vec![0.0]).unwrap();
        assert!(flow_matching_loss(&mut g, pred, &[]).is_err());
        let _ = ParamSet::new();
    }

    #[test]
    fn time_grid_layout() {
        let g = TimeGrid::default();
        assert_eq!(g.k(), 48);
        let ts = g.ascending();
        assert_eq!(ts.len(), 49);
        assert_eq!((ts[0], ts[48]), (0.0, 1.0));
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert!(((ts[1] - ts[0]) - 1.0 / 48.0).abs() < 1e-15);
        assert!(TimeGrid::new(0).is_err());
    }

    #[test]
    fn step_schedule_presets_and_validation() {
        assert_eq!(StepSchedule::four_step().times(), &[1.0, 0.9375, 0.8333, 0.625]);
        assert_eq!(StepSchedule::two_step().times(), &[1.0, 0.8333]);
        assert_eq!(StepSchedule::one_step().times(), &[1.0]);
        assert!(StepSchedule::new(vec![]).is_err());
        assert!(StepSchedule::new(vec![0.9]).is_err());
        assert!(StepSchedule::new(vec![1.0, 1.0]).is_err());
        assert!(StepSchedule::new(vec![1.0, 0.5, 0.0]).is_err());
    }

    #[test]
    fn zero_field_step_keeps_x() {
        let s = DiffusionState::new(vec![0.7, -0.1], 0.8).unwrap();
        for m in [OdeMethod::Euler, OdeMethod::Heun] {
            let n = pf_ode_step(&mut |x: &[f64], _| Ok(vec![0.0; x.len()]), &s, 0.3, m).unwrap();
            assert_eq!(n.x, s.x);
            assert_eq!(n.t, 0.3);
        }
    }

    #[test]
    fn constant_field_full_euler_step() {
        let s = DiffusionState::new(vec![2.0], 1.0).unwrap();
        let n = pf_ode_step(&mut |_: &[f64], _| Ok(vec![0.5]), &s, 0.0, OdeMethod::Euler).unwrap();
        assert_eq!(n.x, vec![1.5]);
    }

    #[test]
    fn step_rejects_bad_direction_and_non_finite() {
        let s = DiffusionState::new(vec![1.0], 0.5).unwrap();
        let mut zero = |x: &[f64], _| Ok(vec![0.0; x.len()]);
        assert!(pf_ode_step(&mut zero, &s, 0.5, OdeMethod::Euler).is_err());
        assert!(pf_ode_step(&mut zero, &s, 0.7, OdeMethod::Euler).is_err());
        let mut nan = |_: &[f64], _| Ok(vec![f64::NAN]);
        assert!(matches!(
            pf_ode_step(&mut nan, &s, 0.1, OdeMethod::Euler),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn solve_validates_grid_and_records_trajectory() {
        let mut zero = |x: &[f64], _| Ok(vec![0.0; x.len()]);
        assert!(pf_ode_solve(&mut zero, &[1.0], &[1.0, 0.5], OdeMethod::Euler).is_err());
        assert!(pf_ode_solve(&mut zero, &[1.0], &[0.9, 0.0], OdeMethod::Euler).is_err());
        assert!(pf_ode_solve(&mut zero, &[1.0], &[1.0, 0.5, 0.5, 0.0], OdeMethod::Euler).is_err());
        let traj = pf_ode_solve(&mut zero, &[1.0, 2.0], &TimeGrid::new(4).unwrap().descending(), OdeMethod::Euler)
            .unwrap();
        assert_eq!(traj.len(), 5);
        assert!(traj.iter().all(|s| s.x == vec![1.0, 2.0]));
        assert_eq!(traj.last().unwrap().t, 0.0);
    }
}
