use crate::error::{Error, Result};

/// Channel layout of a pose vector: `J` joint positions, `J` joint velocities, root yaw.
///
/// Joint 0 is the root and is stored in world coordinates; the other joints are
/// offsets from the root expressed on the world axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseLayout {
    pub joints: usize,
}

impl PoseLayout {
    pub const fn new(joints: usize) -> Self {
        Self { joints }
    }

    /// `V = 6 J + 1`.
    pub const fn dim(&self) -> usize {
        6 * self.joints + 1
    }

    pub const fn position(&self, joint: usize) -> usize {
        3 * joint
    }

    pub const fn velocity(&self, joint: usize) -> usize {
        3 * self.joints + 3 * joint
    }

    pub const fn yaw(&self) -> usize {
        6 * self.joints
    }

    /// Layout implied by a pose dimension, if it has the `6 J + 1` form.
    pub fn from_dim(dim: usize) -> Option<Self> {
        (dim >= 7 && (dim - 1) % 6 == 0).then(|| Self::new((dim - 1) / 6))
    }
}

/// Joint names of the default eight-joint skeleton.
pub const JOINT_NAMES: [&str; 8] = [
    "root",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
];

pub const SKELETON: PoseLayout = PoseLayout::new(JOINT_NAMES.len());

/// One pose: a borrowed row of a [`MotionSequence`].
#[derive(Debug, Clone, Copy)]
pub struct PoseVector<'a> {
    pub values: &'a [f64],
    pub layout: PoseLayout,
}

impl PoseVector<'_> {
    pub fn position(&self, joint: usize) -> [f64; 3] {
        let o = self.layout.position(joint);
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn velocity(&self, joint: usize) -> [f64; 3] {
        let o = self.layout.velocity(joint);
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn yaw(&self) -> f64 {
        self.values[self.layout.yaw()]
    }

    /// World-space position: the root as stored, other joints offset from it.
    pub fn world_position(&self, joint: usize) -> [f64; 3] {
        let p = self.position(joint);
        if joint == 0 {
            return p;
        }
        let r = self.position(0);
        [r[0] + p[0], r[1] + p[1], r[2] + p[2]]
    }
}

/// `F x V` pose trajectory sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    fps: u32,
    pose_dim: usize,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(fps: u32, pose_dim: usize, data: Vec<f64>) -> Result<Self> {
        if fps == 0 {
            return Err(Error::Domain("fps must be positive".into()));
        }
        if pose_dim == 0 || data.len() % pose_dim != 0 || data.is_empty() {
            return Err(Error::Shape(format!(
                "{} values do not form whole frames of {pose_dim} channels",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at frame {}, channel {}",
                i / pose_dim,
                i % pose_dim
            )));
        }
        Ok(Self {
            fps,
            pose_dim,
            data,
        })
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.pose_dim
    }

    pub fn layout(&self) -> Option<PoseLayout> {
        PoseLayout::from_dim(self.pose_dim)
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.pose_dim..(i + 1) * self.pose_dim]
    }

    pub fn pose(&self, i: usize) -> PoseVector<'_> {
        let layout = self.layout().expect("pose dimension has the 6J+1 form");
        PoseVector {
            values: self.frame(i),
            layout,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let d = self.pose_dim;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(i % d, x))
            .collect();
        Self {
            fps: self.fps,
            pose_dim: d,
            data,
        }
    }

    /// Frames in reverse order (channels untouched).
    pub fn reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..self.frames()).rev() {
            data.extend_from_slice(self.frame(i));
        }
        Self {
            fps: self.fps,
            pose_dim: self.pose_dim,
            data,
        }
    }

    /// Largest deviation between stored velocities and `fps` times the position differences.
    ///
    /// Frame 0 is compared with the forward difference, all later frames with the backward one.
    pub fn velocity_consistency_error(&self) -> f64 {
        let Some(layout) = self.layout() else {
            return f64::NAN;
        };
        let f = self.frames();
        if f < 2 {
            return 0.0;
        }
        let fps = f64::from(self.fps);
        let mut worst: f64 = 0.0;
        for t in 0..f {
            let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
            for j in 0..layout.joints {
                for c in 0..3 {
                    let p0 = self.frame(a)[layout.position(j) + c];
                    let p1 = self.frame(b)[layout.position(j) + c];
                    let v = self.frame(t)[layout.velocity(j) + c];
                    worst = worst.max((v - fps * (p1 - p0)).abs());
                }
            }
        }
        worst
    }

    /// Mean speed of the root over the sequence, from its position channels.
    pub fn mean_root_speed(&self) -> f64 {
        let f = self.frames();
        if f < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for t in 1..f {
            let (a, b) = (self.pose(t - 1).position(0), self.pose(t).position(0));
            total += dist3(a, b);
        }
        total * f64::from(self.fps) / (f - 1) as f64
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
