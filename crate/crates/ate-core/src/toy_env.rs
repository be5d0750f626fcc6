//! Planar n-link arm environments: reach-point and push-block.
//!
//! Kinematic only — joint deltas are clamped, forward kinematics places the
//! end effector, and a sticking contact drags the block when the effector is
//! close enough. Scripted damped-least-squares experts provide demonstration
//! data; their terminal success predicate defines label quality.

use rand::Rng;

use crate::error::{AteError, Result};
use crate::rng::rng_from_seed;

/// Joint deltas are clamped to this magnitude per step (rad).
pub const ACTION_CLAMP: f64 = 0.1;
/// Sticking contact radius between effector and block (m).
pub const CONTACT_RADIUS: f64 = 0.05;
/// Workspace half-extent; positions live in [-1, 1]².
pub const WORKSPACE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Reach,
    Push,
}

impl Task {
    pub fn id(self) -> u32 {
        match self {
            Task::Reach => 0,
            Task::Push => 1,
        }
    }

    pub fn from_id(id: u32) -> Result<Task> {
        match id {
            0 => Ok(Task::Reach),
            1 => Ok(Task::Push),
            other => Err(AteError::Config(format!("unknown task id {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TaskSpec {
    pub task: Task,
    /// Success tolerance in meters.
    pub tolerance: f64,
    pub max_steps: u32,
}

impl TaskSpec {
    pub fn new(task: Task, tolerance: f64, max_steps: u32) -> Result<Self> {
        if tolerance <= 0.0 {
            return Err(AteError::Config("task tolerance must be > 0".into()));
        }
        Ok(TaskSpec { task, tolerance, max_steps })
    }

    pub fn defaults(task: Task) -> Self {
        match task {
            Task::Reach => TaskSpec { task, tolerance: 0.05, max_steps: 80 },
            Task::Push => TaskSpec { task, tolerance: 0.06, max_steps: 80 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub joint_angles: Vec<f64>,
    pub block_xy: [f64; 2],
    pub target_xy: [f64; 2],
    pub steps: u32,
}

/// A planar arm with fixed link lengths bound to one task.
#[derive(Clone, Debug)]
pub struct ArmEnv {
    pub link_lengths: Vec<f64>,
    pub spec: TaskSpec,
}

impl ArmEnv {
    pub fn new(link_lengths: Vec<f64>, spec: TaskSpec) -> Result<Self> {
        if link_lengths.is_empty() || link_lengths.iter().any(|&l| l <= 0.0) {
            return Err(AteError::Config("link lengths must all be > 0".into()));
        }
        Ok(ArmEnv { link_lengths, spec })
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// End-effector position for the given joint angles.
    pub fn fk(&self, angles: &[f64]) -> [f64; 2] {
        let mut theta = 0.0;
        let mut x = 0.0;
        let mut y = 0.0;
        for (&q, &l) in angles.iter().zip(&self.link_lengths) {
            theta += q;
            x += l * theta.cos();
            y += l * theta.sin();
        }
        [x, y]
    }

    /// 2×dof Jacobian of the end-effector position.
    fn jacobian(&self, angles: &[f64]) -> Vec<[f64; 2]> {
        let n = self.dof();
        let mut cum = vec![0.0; n];
        let mut theta = 0.0;
        for (i, &q) in angles.iter().enumerate() {
            theta += q;
            cum[i] = theta;
        }
        // column j: sum over links i >= j of l_i * (-sin, cos)
        let mut cols = vec![[0.0; 2]; n];
        let mut sx = 0.0;
        let mut sy = 0.0;
        for i in (0..n).rev() {
            sx += -self.link_lengths[i] * cum[i].sin();
            sy += self.link_lengths[i] * cum[i].cos();
            cols[i] = [sx, sy];
        }
        cols
    }

    /// Randomized episode start: random joint configuration (this seeds the
    /// clockwise/counterclockwise multimodality of the experts), target in a
    /// reachable annulus, and for push tasks a block with a nearby goal.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = rng_from_seed(seed);
        let n = self.dof();
        let mut joint_angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        // keep the base link pointed into the workspace to avoid fully folded starts
        joint_angles[0] *= 0.9;

        let reach = self.reach();
        let sample_point = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            let r = rng.gen_range(lo * reach..hi * reach);
            let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            [
                (r * a.cos()).clamp(-WORKSPACE, WORKSPACE),
                (r * a.sin()).clamp(-WORKSPACE, WORKSPACE),
            ]
        };

        match self.spec.task {
            Task::Reach => {
                let target_xy = sample_point(&mut rng, 0.25, 0.85);
                EnvState { joint_angles, block_xy: [0.0, 0.0], target_xy, steps: 0 }
            }
            Task::Push => {
                let block_xy = sample_point(&mut rng, 0.35, 0.6);
                let dir = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let dist = rng.gen_range(0.15..0.3);
                let raw = [block_xy[0] + dist * dir.cos(), block_xy[1] + dist * dir.sin()];
                // keep the goal inside the annulus so the push stays reachable
                let r = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
                let target_xy = if r > 0.85 * reach {
                    let s = 0.85 * reach / r;
                    [raw[0] * s, raw[1] * s]
                } else {
                    raw
                };
                EnvState { joint_angles, block_xy, target_xy, steps: 0 }
            }
        }
    }

    /// Applies clamped joint deltas, advances kinematics and the contact.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        if action.len() != self.dof() {
            return Err(AteError::dim(
                "env_step",
                format!("action dim {} for {}-dof arm", action.len(), self.dof()),
            ));
        }
        let ee_old = self.fk(&state.joint_angles);
        let mut next = state.clone();
        for (q, &a) in next.joint_angles.iter_mut().zip(action) {
            *q = wrap_angle(*q + a.clamp(-ACTION_CLAMP, ACTION_CLAMP));
        }
        let ee_new = self.fk(&next.joint_angles);
        if self.spec.task == Task::Push {
            let dx = ee_new[0] - next.block_xy[0];
            let dy = ee_new[1] - next.block_xy[1];
            if (dx * dx + dy * dy).sqrt() < CONTACT_RADIUS {
                next.block_xy[0] =
                    (next.block_xy[0] + ee_new[0] - ee_old[0]).clamp(-WORKSPACE, WORKSPACE);
                next.block_xy[1] =
                    (next.block_xy[1] + ee_new[1] - ee_old[1]).clamp(-WORKSPACE, WORKSPACE);
            }
        }
        next.steps += 1;
        Ok(next)
    }

    pub fn success(&self, state: &EnvState) -> bool {
        let d = match self.spec.task {
            Task::Reach => {
                let ee = self.fk(&state.joint_angles);
                dist(ee, state.target_xy)
            }
            Task::Push => dist(state.block_xy, state.target_xy),
        };
        d <= self.spec.tolerance
    }

    /// One damped-least-squares inverse-kinematics step toward the task goal.
    ///
    /// The push strategy works with the sticking contact: the effector's
    /// offset to the block is frozen while in contact, so the expert lines
    /// itself up behind the block (relative to the goal), slides in, and
    /// drags along the push line. Off-angle contact is released by backing
    /// straight out and orbiting around the block at a safe radius.
    pub fn scripted_expert(&self, state: &EnvState) -> Vec<f64> {
        let ee = self.fk(&state.joint_angles);
        let desired = match self.spec.task {
            Task::Reach => cap(
                [state.target_xy[0] - ee[0], state.target_xy[1] - ee[1]],
                0.08,
            ),
            Task::Push => {
                let to_target = [
                    state.target_xy[0] - state.block_xy[0],
                    state.target_xy[1] - state.block_xy[1],
                ];
                let dist_bt = norm2(to_target);
                if dist_bt <= self.spec.tolerance * 0.5 {
                    return vec![0.0; self.dof()];
                }
                let dhat = [to_target[0] / dist_bt, to_target[1] / dist_bt];
                let rel = [ee[0] - state.block_xy[0], ee[1] - state.block_xy[1]];
                let r = norm2(rel);
                let rhat = if r > 1e-9 {
                    [rel[0] / r, rel[1] / r]
                } else {
                    [-dhat[0], -dhat[1]]
                };
                let behind = -(rhat[0] * dhat[0] + rhat[1] * dhat[1]);

                if r < 0.055 && behind > 0.7 {
                    // in contact, lined up: drag the block toward the goal
                    cap(to_target, 0.03)
                } else if r < 0.07 && behind <= 0.7 {
                    // off-angle contact: back straight out to release the block
                    [rhat[0] * 0.05, rhat[1] * 0.05]
                } else if behind > 0.9 {
                    // slide in to a point just behind the block
                    let p = [
                        state.block_xy[0] - 0.03 * dhat[0],
                        state.block_xy[1] - 0.03 * dhat[1],
                    ];
                    cap([p[0] - ee[0], p[1] - ee[1]], if r > 0.15 { 0.07 } else { 0.02 })
                } else {
                    // orbit at a safe radius toward the line behind the block
                    let cross = rhat[0] * (-dhat[1]) - rhat[1] * (-dhat[0]);
                    let s = if cross >= 0.0 { 1.0 } else { -1.0 };
                    let perp = [-rhat[1] * s, rhat[0] * s];
                    let radial = r - 0.10;
                    cap(
                        [
                            perp[0] * 0.06 - rhat[0] * radial * 0.8,
                            perp[1] * 0.06 - rhat[1] * radial * 0.8,
                        ],
                        0.07,
                    )
                }
            }
        };

        // dq = Jᵀ (J Jᵀ + λ² I)⁻¹ err, 2×2 solve in closed form
        let j = self.jacobian(&state.joint_angles);
        let lambda2 = 0.01;
        let mut a11 = lambda2;
        let mut a12 = 0.0;
        let mut a22 = lambda2;
        for col in &j {
            a11 += col[0] * col[0];
            a12 += col[0] * col[1];
            a22 += col[1] * col[1];
        }
        let det = a11 * a22 - a12 * a12;
        let y = [
            (a22 * desired[0] - a12 * desired[1]) / det,
            (a11 * desired[1] - a12 * desired[0]) / det,
        ];
        j.iter()
            .map(|col| (col[0] * y[0] + col[1] * y[1]).clamp(-ACTION_CLAMP, ACTION_CLAMP))
            .collect()
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn cap(v: [f64; 2], limit: f64) -> [f64; 2] {
    let n = norm2(v);
    if n > limit {
        [v[0] * limit / n, v[1] * limit / n]
    } else {
        v
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a;
    while x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    while x < -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    }
    x
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Rolls the scripted expert until success or the step cap; returns the
/// visited states and executed (clamped) actions.
pub fn rollout_expert(env: &ArmEnv, seed: u64) -> (Vec<EnvState>, Vec<Vec<f64>>, bool) {
    let mut state = env.reset(seed);
    let mut states = vec![state.clone()];
    let mut actions = Vec::new();
    let mut succeeded = env.success(&state);
    // run the full horizon so trajectories are long enough to chunk
    for _ in 0..env.spec.max_steps {
        let a = env.scripted_expert(&state);
        state = env.step(&state, &a).expect("expert action has env dof");
        actions.push(a);
        states.push(state.clone());
        if env.success(&state) {
            succeeded = true;
        }
    }
    (states, actions, succeeded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_link(task: Task) -> ArmEnv {
        ArmEnv::new(vec![0.5, 0.5], TaskSpec::defaults(task)).unwrap()
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let env = two_link(Task::Reach);
        assert_eq!(env.reset(7), env.reset(7));
        assert_ne!(env.reset(7), env.reset(8));
    }

    #[test]
    fn fk_zero_angles_points_along_x() {
        let env = ArmEnv::new(vec![0.4, 0.35, 0.25], TaskSpec::defaults(Task::Reach)).unwrap();
        let ee = env.fk(&[0.0, 0.0, 0.0]);
        assert!((ee[0] - 1.0).abs() < 1e-12);
        assert!(ee[1].abs() < 1e-12);
    }

    #[test]
    fn zero_action_only_advances_counter() {
        let env = two_link(Task::Reach);
        let s0 = env.reset(3);
        let s1 = env.step(&s0, &[0.0, 0.0]).unwrap();
        assert_eq!(s1.joint_angles, s0.joint_angles);
        assert_eq!(s1.target_xy, s0.target_xy);
        assert_eq!(s1.steps, s0.steps + 1);
    }

    #[test]
    fn action_dim_mismatch_is_an_error() {
        let env = two_link(Task::Reach);
        let s0 = env.reset(3);
        assert!(env.step(&s0, &[0.1]).is_err());
    }

    #[test]
    fn deltas_are_clamped() {
        let env = two_link(Task::Reach);
        let mut s0 = env.reset(3);
        s0.joint_angles = vec![0.0, 0.0];
        let s1 = env.step(&s0, &[5.0, -5.0]).unwrap();
        assert!((s1.joint_angles[0] - ACTION_CLAMP).abs() < 1e-12);
        assert!((s1.joint_angles[1] + ACTION_CLAMP).abs() < 1e-12);
    }

    #[test]
    fn thousand_resets_stay_reachable() {
        for links in [vec![0.5, 0.5], vec![0.4, 0.35, 0.25], vec![0.35, 0.3, 0.2, 0.15]] {
            let env = ArmEnv::new(links, TaskSpec::defaults(Task::Reach)).unwrap();
            for seed in 0..1000 {
                let s = env.reset(seed);
                let r = (s.target_xy[0].powi(2) + s.target_xy[1].powi(2)).sqrt();
                assert!(r <= env.reach() + 1e-9, "target beyond reach at seed {seed}");
                assert!(r >= 0.2 * env.reach(), "degenerate target at seed {seed}");
            }
        }
    }

    #[test]
    fn success_depends_on_tolerance() {
        let env = ArmEnv::new(vec![0.5, 0.5], TaskSpec::new(Task::Reach, 0.02, 80).unwrap()).unwrap();
        let mut s = env.reset(1);
        // place target exactly at the effector
        s.target_xy = env.fk(&s.joint_angles);
        assert!(env.success(&s));
        s.target_xy[0] += 0.03;
        assert!(!env.success(&s));
    }

    #[test]
    fn expert_succeeds_on_100_reach_episodes_per_arm() {
        for links in [vec![0.5, 0.5], vec![0.4, 0.35, 0.25], vec![0.35, 0.3, 0.2, 0.15]] {
            let env = ArmEnv::new(links.clone(), TaskSpec::defaults(Task::Reach)).unwrap();
            for seed in 0..100 {
                let (_, _, ok) = rollout_expert(&env, seed);
                assert!(ok, "reach expert failed: links {links:?} seed {seed}");
            }
        }
    }

    #[test]
    fn expert_succeeds_on_100_push_episodes_per_arm() {
        for links in [vec![0.5, 0.5], vec![0.4, 0.35, 0.25], vec![0.35, 0.3, 0.2, 0.15]] {
            let env = ArmEnv::new(links.clone(), TaskSpec::defaults(Task::Push)).unwrap();
            for seed in 0..100 {
                let (_, _, ok) = rollout_expert(&env, seed);
                assert!(ok, "push expert failed: links {links:?} seed {seed}");
            }
        }
    }

    #[test]
    fn block_stays_in_workspace() {
        let env = two_link(Task::Push);
        for seed in 0..20 {
            let (states, _, _) = rollout_expert(&env, seed);
            for s in states {
                assert!(s.block_xy[0].abs() <= WORKSPACE && s.block_xy[1].abs() <= WORKSPACE);
            }
        }
    }
}
