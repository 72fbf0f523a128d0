//! Kinematic synthesis of the synthetic actions.
//!
//! Every action is a closed-form function of the normalized phase `s in [0, 1]`,
//! so the same parameters played over fewer frames cover the same path faster.

use std::f64::consts::{PI, TAU};

use rand::Rng;

use super::motion::{MotionSequence, PoseLayout, SKELETON};
use super::text::{ActionKind, MotionParams, Variant};
use crate::error::Result;

const PELVIS_HEIGHT: f64 = 0.95;
const FOOT_HEIGHT: f64 = 0.02;

/// Rest-pose offsets from the pelvis in the body frame (x left, y up, z forward).
const REST: [[f64; 3]; 7] = [
    [0.0, 0.65, 0.0],    // head
    [0.18, 0.5, 0.0],    // left shoulder
    [-0.18, 0.5, 0.0],   // right shoulder
    [0.22, -0.05, 0.0],  // left hand
    [-0.22, -0.05, 0.0], // right hand
    [0.1, -0.93, 0.0],   // left foot
    [-0.1, -0.93, 0.0],  // right foot
];

const HEAD: usize = 0;
const L_HAND: usize = 3;
const R_HAND: usize = 4;
const L_FOOT: usize = 5;
const R_FOOT: usize = 6;

/// Root placement plus body-frame joint offsets at one instant.
struct Pose {
    root: [f64; 3],
    yaw: f64,
    offsets: [[f64; 3]; 7],
}

impl Pose {
    fn rest(scale: f64) -> Self {
        let mut offsets = REST;
        for o in offsets.iter_mut() {
            o.iter_mut().for_each(|x| *x *= scale);
        }
        Self {
            root: [0.0, PELVIS_HEIGHT * scale, 0.0],
            yaw: 0.0,
            offsets,
        }
    }

    fn world_offsets(&self) -> [[f64; 3]; 7] {
        let (s, c) = self.yaw.sin_cos();
        self.offsets
            .map(|[x, y, z]| [x * c + z * s, y, -x * s + z * c])
    }

    /// Sets a joint so that it sits at a world position.
    fn place_world(&mut self, joint: usize, world: [f64; 3]) {
        let rel = [
            world[0] - self.root[0],
            world[1] - self.root[1],
            world[2] - self.root[2],
        ];
        let (s, c) = self.yaw.sin_cos();
        // inverse of the yaw rotation in world_offsets
        self.offsets[joint] = [rel[0] * c - rel[2] * s, rel[1], rel[0] * s + rel[2] * c];
    }
}

fn smoothstep(a: f64, b: f64, s: f64) -> f64 {
    let x = ((s - a) / (b - a)).clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn lerp3(a: [f64; 3], b: [f64; 3], u: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * u,
        a[1] + (b[1] - a[1]) * u,
        a[2] + (b[2] - a[2]) * u,
    ]
}

/// Leg and arm swing for a gait at phase `phi` (one step per half cycle) along body axis `axis`.
fn apply_gait(p: &mut Pose, phi: f64, stride: f64, axis: usize, scale: f64) {
    let swing = 0.5 * stride * phi.sin();
    let lift = 0.06 * scale;
    p.offsets[L_FOOT][axis] += swing;
    p.offsets[R_FOOT][axis] -= swing;
    p.offsets[L_FOOT][1] += lift * phi.cos().max(0.0);
    p.offsets[R_FOOT][1] += lift * (-phi.cos()).max(0.0);
    p.offsets[L_HAND][axis] -= 0.5 * swing;
    p.offsets[R_HAND][axis] += 0.5 * swing;
    p.root[1] += 0.02 * scale * phi.cos().abs();
}

fn pose_at(action: ActionKind, variant: Variant, m: &MotionParams, s: f64) -> Pose {
    let k = m.body_scale;
    let mut p = Pose::rest(k);
    match action {
        ActionKind::Walk => {
            let distance = m.amplitude * f64::from(m.repeats);
            let (axis, sign) = match variant {
                Variant::Backward => (2, -1.0),
                Variant::Left => (0, 1.0),
                Variant::Right => (0, -1.0),
                _ => (2, 1.0),
            };
            p.root[axis] = sign * distance * s;
            apply_gait(
                &mut p,
                PI * f64::from(m.repeats) * s,
                sign * m.amplitude,
                axis,
                k,
            );
        }
        ActionKind::WalkCircle => {
            let radius = m.amplitude;
            let theta = TAU * m.extent * s;
            let arc = radius * TAU * m.extent;
            let steps = (arc / 0.6).round().max(2.0);
            if variant == Variant::Clockwise {
                p.root[0] = -radius + radius * theta.cos();
                p.yaw = -theta;
            } else {
                p.root[0] = radius - radius * theta.cos();
                p.yaw = theta;
            }
            p.root[2] = radius * theta.sin();
            apply_gait(&mut p, PI * steps * s, arc / steps, 2, k);
        }
        ActionKind::Sit => {
            let u = smoothstep(0.15, 0.65, s);
            let depth = m.extent * k;
            let feet: Vec<[f64; 3]> = [L_FOOT, R_FOOT]
                .iter()
                .map(|&j| [p.offsets[j][0], FOOT_HEIGHT, 0.05])
                .collect();
            p.root[1] -= depth * u;
            p.root[2] = -0.25 * k * u;
            p.offsets[HEAD][2] += 0.15 * k * (PI * u).sin();
            for (j, knee_side) in [(L_HAND, 1.0), (R_HAND, -1.0)] {
                let knee = [knee_side * 0.15 * k, 0.0, 0.35 * k];
                p.offsets[j] = lerp3(p.offsets[j], knee, u);
            }
            p.place_world(L_FOOT, feet[0]);
            p.place_world(R_FOOT, feet[1]);
        }
        ActionKind::Throw => {
            let (j, side) = if variant == Variant::LeftHand {
                (L_HAND, 1.0)
            } else {
                (R_HAND, -1.0)
            };
            let reach = m.amplitude * k;
            let rest = p.offsets[j];
            let back = [side * 0.25 * k, 0.55 * k, -0.35 * reach];
            let front = [side * 0.15 * k, 0.45 * k, 0.55 * reach];
            let wind = smoothstep(0.1, 0.45, s);
            let release = smoothstep(0.45, 0.6, s);
            let recover = smoothstep(0.7, 1.0, s);
            let a = lerp3(rest, back, wind);
            let b = lerp3(a, front, release);
            p.offsets[j] = lerp3(b, rest, recover);
            p.root[2] = 0.2 * k * smoothstep(0.4, 0.6, s);
            p.offsets[HEAD][2] += 0.08 * k * (release - recover).max(0.0);
        }
        ActionKind::Jump => {
            let height = m.amplitude * k;
            let crouch = 0.2 * k * (smoothstep(0.1, 0.3, s) - smoothstep(0.3, 0.38, s))
                + 0.15 * k * (smoothstep(0.62, 0.7, s) - smoothstep(0.7, 0.9, s));
            let flight_u = ((s - 0.35) / 0.3).clamp(0.0, 1.0);
            let air = height * 4.0 * flight_u * (1.0 - flight_u);
            let advance = if variant == Variant::Forward {
                m.extent * k
            } else {
                0.0
            };
            p.root[1] += air - crouch;
            p.root[2] = advance * smoothstep(0.35, 0.65, s);
            let feet: Vec<[f64; 3]> = [L_FOOT, R_FOOT]
                .iter()
                .map(|&j| [p.offsets[j][0], FOOT_HEIGHT + air, p.root[2]])
                .collect();
            p.place_world(L_FOOT, feet[0]);
            p.place_world(R_FOOT, feet[1]);
            let arms = 0.6 * k * (PI * flight_u).sin();
            p.offsets[L_HAND][1] += arms;
            p.offsets[R_HAND][1] += arms;
        }
        ActionKind::Wave => {
            let (j, side) = if variant == Variant::LeftHand {
                (L_HAND, 1.0)
            } else {
                (R_HAND, -1.0)
            };
            let u = smoothstep(0.05, 0.2, s) * (1.0 - smoothstep(0.85, 1.0, s));
            let raised = [side * 0.3 * k, 0.75 * k, 0.1 * k];
            let mut h = lerp3(p.offsets[j], raised, u);
            h[0] += m.amplitude * k * (TAU * f64::from(m.repeats) * s).sin() * u;
            p.offsets[j] = h;
            p.root[0] += 0.03 * k * (TAU * s).sin();
        }
    }
    p
}

/// Draws per-sample parameters for an action.
pub fn draw_params<R: Rng + ?Sized>(action: ActionKind, rng: &mut R) -> MotionParams {
    let body_scale = rng.random_range(0.9..1.1);
    match action {
        ActionKind::Walk => MotionParams {
            amplitude: rng.random_range(0.5..0.75),
            repeats: rng.random_range(4..=7),
            extent: 0.0,
            body_scale,
        },
        ActionKind::WalkCircle => MotionParams {
            amplitude: rng.random_range(0.8..1.4),
            repeats: 0,
            extent: rng.random_range(0.75..1.0),
            body_scale,
        },
        ActionKind::Sit => MotionParams {
            amplitude: 0.0,
            repeats: 0,
            extent: rng.random_range(0.38..0.5),
            body_scale,
        },
        ActionKind::Throw => MotionParams {
            amplitude: rng.random_range(0.8..1.2),
            repeats: 0,
            extent: 0.0,
            body_scale,
        },
        ActionKind::Jump => MotionParams {
            amplitude: rng.random_range(0.25..0.4),
            repeats: 0,
            extent: rng.random_range(0.6..1.0),
            body_scale,
        },
        ActionKind::Wave => MotionParams {
            amplitude: rng.random_range(0.1..0.18),
            repeats: rng.random_range(3..=5),
            extent: 0.0,
            body_scale,
        },
    }
}

/// Synthesizes `frames` frames of an action on the default skeleton.
pub fn synthesize(
    action: ActionKind,
    variant: Variant,
    params: &MotionParams,
    frames: usize,
    fps: u32,
) -> Result<MotionSequence> {
    let layout: PoseLayout = SKELETON;
    let v = layout.dim();
    let mut data = vec![0.0; frames * v];
    let denom = (frames.max(2) - 1) as f64;
    for t in 0..frames {
        let pose = pose_at(action, variant, params, t as f64 / denom);
        let row = &mut data[t * v..(t + 1) * v];
        row[..3].copy_from_slice(&pose.root);
        for (j, off) in pose.world_offsets().iter().enumerate() {
            let o = layout.position(j + 1);
            row[o..o + 3].copy_from_slice(off);
        }
        row[layout.yaw()] = pose.yaw;
    }
    fill_velocities(&mut data, layout, frames, fps);
    MotionSequence::new(fps, v, data)
}

/// Writes `fps * (p[t] - p[t-1])` into the velocity channels (forward difference at frame 0).
pub fn fill_velocities(data: &mut [f64], layout: PoseLayout, frames: usize, fps: u32) {
    let v = layout.dim();
    let fps = f64::from(fps);
    if frames < 2 {
        return;
    }
    for t in 0..frames {
        let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
        for j in 0..layout.joints {
            for c in 0..3 {
                let d = data[b * v + layout.position(j) + c] - data[a * v + layout.position(j) + c];
                data[t * v + layout.velocity(j) + c] = fps * d;
            }
        }
    }
}
