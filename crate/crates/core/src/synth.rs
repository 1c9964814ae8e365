//! Synthetic occluded articulated-motion sequences and the `RMCD` dataset format.
//!
//! A 14-joint skeleton is driven by sinusoidal joint angles, projected with a
//! weak-perspective camera and rasterised as thick anti-aliased strokes. Moving
//! rectangles occlude the figure and an optional second body acts as a
//! distractor. Everything is keyed by `(seed, sequence index)` through
//! independent ChaCha streams, so any sequence can be regenerated on its own.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_f64s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::parallel::{map_range, Execution};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 14;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "right_ankle",
    "right_knee",
    "right_hip",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_wrist",
    "right_elbow",
    "right_shoulder",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "neck",
    "head",
];

/// Joint pairs whose distance is fixed by the skeleton.
pub const RIGID_JOINT_PAIRS: [(usize, usize); 13] = [
    (2, 1),
    (1, 0),
    (3, 4),
    (4, 5),
    (8, 7),
    (7, 6),
    (9, 10),
    (10, 11),
    (12, 13),
    (12, 8),
    (12, 9),
    (2, 3),
    (2, 12),
];

/// Vertical position of the pelvis in the rest pose; centres the body on y = 0.
pub const REST_ROOT_Y: f64 = -50.0;

struct Node {
    parent: usize,
    offset: [f64; 3],
    joint: Option<usize>,
    /// Angle limits (rad) about x, y, z.
    limits: [f64; 3],
    /// Capsule radius (mm) of the bone ending at this node.
    radius: f64,
}

const ROOT: usize = usize::MAX;

#[rustfmt::skip]
const NODES: [Node; 15] = [
    Node { parent: ROOT, offset: [0.0, 0.0, 0.0], joint: None, limits: [0.10, 0.50, 0.08], radius: 0.0 },
    Node { parent: 0, offset: [-100.0, 0.0, 0.0], joint: Some(2), limits: [0.60, 0.10, 0.25], radius: 70.0 },
    Node { parent: 0, offset: [100.0, 0.0, 0.0], joint: Some(3), limits: [0.60, 0.10, 0.25], radius: 70.0 },
    Node { parent: 1, offset: [0.0, 450.0, 0.0], joint: Some(1), limits: [0.70, 0.00, 0.05], radius: 55.0 },
    Node { parent: 2, offset: [0.0, 450.0, 0.0], joint: Some(4), limits: [0.70, 0.00, 0.05], radius: 55.0 },
    Node { parent: 3, offset: [0.0, 420.0, 0.0], joint: Some(0), limits: [0.0; 3], radius: 45.0 },
    Node { parent: 4, offset: [0.0, 420.0, 0.0], joint: Some(5), limits: [0.0; 3], radius: 45.0 },
    Node { parent: 0, offset: [0.0, -520.0, 0.0], joint: Some(12), limits: [0.20, 0.20, 0.15], radius: 90.0 },
    Node { parent: 7, offset: [0.0, -250.0, 0.0], joint: Some(13), limits: [0.0; 3], radius: 60.0 },
    Node { parent: 7, offset: [-180.0, 0.0, 0.0], joint: Some(8), limits: [0.70, 0.30, 0.90], radius: 60.0 },
    Node { parent: 7, offset: [180.0, 0.0, 0.0], joint: Some(9), limits: [0.70, 0.30, 0.90], radius: 60.0 },
    Node { parent: 9, offset: [0.0, 300.0, 0.0], joint: Some(7), limits: [0.80, 0.00, 0.30], radius: 40.0 },
    Node { parent: 10, offset: [0.0, 300.0, 0.0], joint: Some(10), limits: [0.80, 0.00, 0.30], radius: 40.0 },
    Node { parent: 11, offset: [0.0, 260.0, 0.0], joint: Some(6), limits: [0.0; 3], radius: 35.0 },
    Node { parent: 12, offset: [0.0, 260.0, 0.0], joint: Some(11), limits: [0.0; 3], radius: 35.0 },
];

const HEAD_RADIUS_MM: f64 = 100.0;
const TARGET_INTENSITY: f64 = 0.8;
const DISTRACTOR_INTENSITY: f64 = 0.6;
const OCCLUDER_INTENSITY: f64 = 1.0;

const STREAM_TARGET: u64 = 0;
const STREAM_DISTRACTOR: u64 = 1;
const STREAM_OCCLUDERS: u64 = 2;
const STREAM_CAMERA: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub vertices: usize,
    pub occlusion_level: f64,
    pub distractor: bool,
    /// Scales every joint-angle amplitude and root displacement; 0 gives the rest pose.
    pub motion_scale: f64,
    /// Range of sinusoid frequencies in Hz.
    pub freq_hz: (f64, f64),
    pub fps: f64,
    /// Multiplier on all bone lengths.
    pub body_scale: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frames: 8,
            height: 64,
            width: 64,
            vertices: 32,
            occlusion_level: 0.5,
            distractor: true,
            motion_scale: 1.0,
            freq_hz: (0.4, 1.5),
            fps: 30.0,
            body_scale: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occlusion_level) {
            return Err(Error::invalid(format!(
                "occlusion_level {} outside [0, 1]",
                self.occlusion_level
            )));
        }
        if self.frames < 1 || self.height < 1 || self.width < 1 || self.vertices < 1 {
            return Err(Error::invalid("frames, image size and vertex count must be >= 1"));
        }
        if !(self.body_scale > 0.0 && self.body_scale.is_finite()) {
            return Err(Error::invalid("body_scale must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        let (lo, hi) = self.freq_hz;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::invalid(format!("bad frequency range ({lo}, {hi})")));
        }
        if !(self.motion_scale >= 0.0) {
            return Err(Error::invalid("motion_scale must be >= 0"));
        }
        Ok(())
    }

    /// Nominal weak-perspective scale in pixels per millimetre.
    pub fn nominal_scale(&self) -> f64 {
        0.8 * self.height.min(self.width) as f64 / (1700.0 * self.body_scale)
    }
}

/// Ground truth for one sequence; lengths in mm, image coordinates in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct BodySequence {
    /// `[T, K, 3]`
    pub joints3d: Tensor,
    /// `[T, V, 3]`
    pub vertices3d: Tensor,
    /// `[T, K, 2]`
    pub joints2d: Tensor,
    /// `[T, 3]` rows of `(s, tx, ty)`.
    pub camera: Tensor,
    /// `[T, K]`, 1 visible and 0 occluded.
    pub visibility: Tensor,
}

impl BodySequence {
    pub fn frames(&self) -> usize {
        self.joints3d.shape()[0]
    }
}

/// A generated sequence: ground truth plus `[T, 1, H, W]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub body: BodySequence,
    pub images: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Rect {
    /// Whether the centre of pixel `(row, col)` lies inside the rectangle.
    pub fn covers_pixel(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        (x - self.center[0]).abs() < self.half[0] && (y - self.center[1]).abs() < self.half[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccluderTrack {
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub half: [f64; 2],
}

impl OccluderTrack {
    pub fn at(&self, frame: usize) -> Rect {
        let t = frame as f64;
        Rect {
            center: [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t],
            half: self.half,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stroke {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub strokes: Vec<Stroke>,
    pub intensity: f64,
}

/// `(u, v) = s * (x, y) + (tx, ty)` for every row of a `[..., 3]` tensor.
pub fn project_joints(joints3d: &Tensor, camera: [f64; 3]) -> Result<Tensor> {
    let s = joints3d.shape();
    if s.last() != Some(&3) {
        return Err(Error::shape("project_joints", format!("expected [..., 3], got {s:?}")));
    }
    let [scale, tx, ty] = camera;
    let mut out = Vec::with_capacity(joints3d.numel() / 3 * 2);
    for p in joints3d.data().chunks_exact(3) {
        out.push(scale * p[0] + tx);
        out.push(scale * p[1] + ty);
    }
    let mut shape = s.to_vec();
    *shape.last_mut().expect("non-empty shape") = 2;
    Ok(Tensor::from_parts(shape, out))
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Paints figures in order over a black background, then fills occluders.
/// Returns a `[1, H, W]` image with values in `[0, 1]`.
pub fn rasterize_frame(height: usize, width: usize, figures: &[Figure], occluders: &[Rect]) -> Tensor {
    let mut img = vec![0.0f64; height * width];
    for fig in figures {
        for s in &fig.strokes {
            let reach = s.radius + 1.0;
            let x0 = (s.a[0].min(s.b[0]) - reach).floor().max(0.0);
            let x1 = (s.a[0].max(s.b[0]) + reach).ceil().min(width as f64);
            let y0 = (s.a[1].min(s.b[1]) - reach).floor().max(0.0);
            let y1 = (s.a[1].max(s.b[1]) + reach).ceil().min(height as f64);
            if !(x0 < x1 && y0 < y1) {
                continue;
            }
            for row in y0 as usize..y1 as usize {
                for col in x0 as usize..x1 as usize {
                    let d = segment_distance([col as f64 + 0.5, row as f64 + 0.5], s.a, s.b);
                    let c = (s.radius + 0.5 - d).clamp(0.0, 1.0);
                    if c > 0.0 {
                        let v = &mut img[row * width + col];
                        *v += c * (fig.intensity - *v);
                    }
                }
            }
        }
    }
    for r in occluders {
        for row in 0..height {
            for col in 0..width {
                if r.covers_pixel(row, col) {
                    img[row * width + col] = OCCLUDER_INTENSITY;
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_parts(vec![1, height, width], img)
}

#[derive(Clone, Debug)]
struct Channel {
    base: f64,
    waves: Vec<(f64, f64, f64)>,
}

impl Channel {
    fn zero() -> Self {
        Channel {
            base: 0.0,
            waves: Vec::new(),
        }
    }

    fn sample(rng: &mut ChaCha8Rng, limit: f64, spec: &SceneSpec) -> Self {
        let m = spec.motion_scale;
        let base = limit * 0.3 * m * (2.0 * rng.random::<f64>() - 1.0);
        let n = rng.random_range(1..=3usize);
        let (lo, hi) = spec.freq_hz;
        let waves = (0..n)
            .map(|_| {
                let amp = limit * 0.7 * m * rng.random::<f64>() / n as f64;
                let freq = lo + (hi - lo) * rng.random::<f64>();
                let phase = 2.0 * PI * rng.random::<f64>();
                (amp, freq, phase)
            })
            .collect();
        Channel { base, waves }
    }

    fn at(&self, seconds: f64) -> f64 {
        self.waves
            .iter()
            .fold(self.base, |acc, &(a, f, p)| acc + a * (2.0 * PI * f * seconds + p).sin())
    }
}

#[derive(Clone, Debug)]
struct Motion {
    root: [f64; 3],
    root_velocity: [f64; 3],
    bob: Channel,
    angles: Vec<[Channel; 3]>,
}

impl Motion {
    fn rest() -> Self {
        Motion {
            root: [0.0, REST_ROOT_Y, 0.0],
            root_velocity: [0.0; 3],
            bob: Channel::zero(),
            angles: NODES.iter().map(|_| [Channel::zero(), Channel::zero(), Channel::zero()]).collect(),
        }
    }

    fn sample(rng: &mut ChaCha8Rng, spec: &SceneSpec, root_x: f64) -> Self {
        let m = spec.motion_scale;
        let mut sym = |r: f64| m * r * (2.0 * rng.random::<f64>() - 1.0);
        // No root depth offset or drift: it would be invisible under weak perspective.
        let root = [root_x + sym(150.0), REST_ROOT_Y + sym(40.0), 0.0];
        let root_velocity = [sym(12.0), 0.0, 0.0];
        let bob = Channel::sample(rng, 15.0, spec);
        let angles = NODES
            .iter()
            .map(|n| {
                [
                    Channel::sample(rng, n.limits[0], spec),
                    Channel::sample(rng, n.limits[1], spec),
                    Channel::sample(rng, n.limits[2], spec),
                ]
            })
            .collect();
        Motion {
            root,
            root_velocity,
            bob,
            angles,
        }
    }

    /// World positions and orientations of every node at `frame`.
    fn pose(&self, frame: usize, spec: &SceneSpec) -> (Vec<Vector3<f64>>, Vec<Rotation3<f64>>) {
        let secs = frame as f64 / spec.fps;
        let t = frame as f64;
        let mut pos = Vec::with_capacity(NODES.len());
        let mut rot: Vec<Rotation3<f64>> = Vec::with_capacity(NODES.len());
        for (i, node) in NODES.iter().enumerate() {
            let [ax, ay, az] = &self.angles[i];
            let local = Rotation3::from_euler_angles(ax.at(secs), ay.at(secs), az.at(secs));
            if node.parent == ROOT {
                pos.push(Vector3::new(
                    self.root[0] + self.root_velocity[0] * t,
                    self.root[1] + self.root_velocity[1] * t + self.bob.at(secs),
                    self.root[2] + self.root_velocity[2] * t,
                ));
                rot.push(local);
            } else {
                let off = Vector3::from(node.offset) * spec.body_scale;
                let p = pos[node.parent] + rot[node.parent] * off;
                let r = rot[node.parent] * local;
                pos.push(p);
                rot.push(r);
            }
        }
        (pos, rot)
    }
}

fn joints_from_nodes(pos: &[Vector3<f64>]) -> [[f64; 3]; NUM_JOINTS] {
    let mut out = [[0.0; 3]; NUM_JOINTS];
    for (node, p) in NODES.iter().zip(pos) {
        if let Some(j) = node.joint {
            out[j] = [p.x, p.y, p.z];
        }
    }
    out
}

fn perpendicular_basis(dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    if dir.y.abs() >= dir.x.abs() {
        (Vector3::x(), Vector3::z())
    } else {
        (Vector3::y(), Vector3::z())
    }
}

/// Vertex `i` sits on bone `i % 14` at a fixed station, offset radially on the capsule.
fn vertices_from_pose(pos: &[Vector3<f64>], rot: &[Rotation3<f64>], count: usize, body_scale: f64) -> Vec<[f64; 3]> {
    const STATIONS: [f64; 3] = [0.3, 0.7, 0.5];
    let bones = NODES.len() - 1;
    (0..count)
        .map(|i| {
            let child = 1 + i % bones;
            let round = i / bones;
            let node = &NODES[child];
            let off = Vector3::from(node.offset) * body_scale;
            let (e1, e2) = perpendicular_basis(&off);
            let angle = round as f64 * 2.0 * PI / 3.0 + child as f64 * 0.9;
            let radial = (e1 * angle.cos() + e2 * angle.sin()) * node.radius * body_scale;
            let local = off * STATIONS[round % STATIONS.len()] + radial;
            let v = pos[node.parent] + rot[node.parent] * local;
            [v.x, v.y, v.z]
        })
        .collect()
}

/// Rest-pose joints `[K, 3]` and vertices `[V, 3]`.
pub fn template(vertices: usize, body_scale: f64) -> (Tensor, Tensor) {
    let spec = SceneSpec {
        vertices,
        body_scale,
        ..SceneSpec::default()
    };
    let (pos, rot) = Motion::rest().pose(0, &spec);
    let j = joints_from_nodes(&pos);
    let v = vertices_from_pose(&pos, &rot, vertices, body_scale);
    (
        Tensor::from_parts(vec![NUM_JOINTS, 3], j.iter().flatten().copied().collect()),
        Tensor::from_parts(vec![vertices, 3], v.iter().flatten().copied().collect()),
    )
}

fn stream(spec: &SceneSpec, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(purpose));
    rng
}

struct Trajectory {
    nodes: Vec<Vec<Vector3<f64>>>,
    joints: Vec<[[f64; 3]; NUM_JOINTS]>,
    vertices: Vec<Vec<[f64; 3]>>,
}

fn trajectory(motion: &Motion, spec: &SceneSpec) -> Trajectory {
    let mut tr = Trajectory {
        nodes: Vec::with_capacity(spec.frames),
        joints: Vec::with_capacity(spec.frames),
        vertices: Vec::with_capacity(spec.frames),
    };
    for f in 0..spec.frames {
        let (pos, rot) = motion.pose(f, spec);
        tr.joints.push(joints_from_nodes(&pos));
        tr.vertices.push(vertices_from_pose(&pos, &rot, spec.vertices, spec.body_scale));
        tr.nodes.push(pos);
    }
    tr
}

/// One generated scene before rendering.
#[derive(Clone, Debug)]
pub struct Scene {
    pub target: BodySequence,
    pub distractor: Option<BodySequence>,
    pub occluders: Vec<OccluderTrack>,
    camera: [f64; 3],
    target_nodes: Vec<Vec<Vector3<f64>>>,
    distractor_nodes: Option<Vec<Vec<Vector3<f64>>>>,
    height: usize,
    width: usize,
}

fn figure(nodes: &[Vector3<f64>], camera: [f64; 3], body_scale: f64, intensity: f64) -> Figure {
    let [s, tx, ty] = camera;
    let px = |p: &Vector3<f64>| [s * p.x + tx, s * p.y + ty];
    let mut strokes: Vec<Stroke> = NODES
        .iter()
        .enumerate()
        .filter(|(_, n)| n.parent != ROOT)
        .map(|(i, n)| Stroke {
            a: px(&nodes[n.parent]),
            b: px(&nodes[i]),
            radius: s * n.radius * body_scale,
        })
        .collect();
    let head = px(&nodes[8]);
    strokes.push(Stroke {
        a: head,
        b: head,
        radius: s * HEAD_RADIUS_MM * body_scale,
    });
    Figure { strokes, intensity }
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.target.frames()
    }

    pub fn camera(&self) -> [f64; 3] {
        self.camera
    }

    /// Figures and occluder rectangles present at `frame`.
    pub fn layers(&self, frame: usize, body_scale: f64) -> (Vec<Figure>, Vec<Rect>) {
        let mut figs = Vec::with_capacity(2);
        if let Some(d) = &self.distractor_nodes {
            figs.push(figure(&d[frame], self.camera, body_scale, DISTRACTOR_INTENSITY));
        }
        figs.push(figure(&self.target_nodes[frame], self.camera, body_scale, TARGET_INTENSITY));
        let rects = self.occluders.iter().map(|o| o.at(frame)).collect();
        (figs, rects)
    }

    /// `[T, 1, H, W]` frames.
    pub fn render(&self, body_scale: f64) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.frames() * h * w);
        for f in 0..self.frames() {
            let (figs, rects) = self.layers(f, body_scale);
            data.extend_from_slice(rasterize_frame(h, w, &figs, &rects).data());
        }
        Tensor::from_parts(vec![self.frames(), 1, h, w], data)
    }
}

fn body_sequence(tr: &Trajectory, camera: [f64; 3], occluders: &[OccluderTrack], spec: &SceneSpec) -> BodySequence {
    let t = spec.frames;
    let joints3d = Tensor::from_parts(
        vec![t, NUM_JOINTS, 3],
        tr.joints.iter().flatten().flatten().copied().collect(),
    );
    let vertices3d = Tensor::from_parts(
        vec![t, spec.vertices, 3],
        tr.vertices.iter().flatten().flatten().copied().collect(),
    );
    let joints2d = project_joints(&joints3d, camera).expect("joints3d has a trailing axis of 3");
    let mut vis = vec![1.0; t * NUM_JOINTS];
    for f in 0..t {
        let rects: Vec<Rect> = occluders.iter().map(|o| o.at(f)).collect();
        for k in 0..NUM_JOINTS {
            let u = joints2d.data()[(f * NUM_JOINTS + k) * 2];
            let v = joints2d.data()[(f * NUM_JOINTS + k) * 2 + 1];
            let (col, row) = (u.floor(), v.floor());
            let inside = col >= 0.0 && row >= 0.0 && col < spec.width as f64 && row < spec.height as f64;
            if inside && rects.iter().any(|r| r.covers_pixel(row as usize, col as usize)) {
                vis[f * NUM_JOINTS + k] = 0.0;
            }
        }
    }
    BodySequence {
        joints3d,
        vertices3d,
        joints2d,
        camera: Tensor::from_parts(vec![t, 3], (0..t).flat_map(|_| camera).collect()),
        visibility: Tensor::from_parts(vec![t, NUM_JOINTS], vis),
    }
}

/// Samples the target, optional distractor and occluders for sequence `index`.
pub fn sample_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height as f64, spec.width as f64);

    let mut cam_rng = stream(spec, index, STREAM_CAMERA);
    let s = spec.nominal_scale() * (1.0 + 0.1 * (cam_rng.random::<f64>() - 0.5));
    let camera = [
        s,
        w / 2.0 + 0.04 * w * (cam_rng.random::<f64>() - 0.5),
        h / 2.0 + 0.04 * h * (cam_rng.random::<f64>() - 0.5),
    ];

    let target_motion = Motion::sample(&mut stream(spec, index, STREAM_TARGET), spec, 0.0);
    let target = trajectory(&target_motion, spec);

    let distractor = spec.distractor.then(|| {
        let mut rng = stream(spec, index, STREAM_DISTRACTOR);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x = side * (500.0 + 250.0 * rng.random::<f64>()) * spec.body_scale;
        trajectory(&Motion::sample(&mut rng, spec, x), spec)
    });

    let mut occ_rng = stream(spec, index, STREAM_OCCLUDERS);
    let count = (4.0 * spec.occlusion_level).round() as usize;
    let grow = 0.5 + spec.occlusion_level;
    let occluders: Vec<OccluderTrack> = (0..count)
        .map(|_| OccluderTrack {
            start: [
                w * (0.3 + 0.4 * occ_rng.random::<f64>()),
                h * (0.2 + 0.6 * occ_rng.random::<f64>()),
            ],
            velocity: [
                1.5 * (2.0 * occ_rng.random::<f64>() - 1.0),
                1.5 * (2.0 * occ_rng.random::<f64>() - 1.0),
            ],
            half: [
                w * (0.06 + 0.08 * occ_rng.random::<f64>()) * grow,
                h * (0.06 + 0.08 * occ_rng.random::<f64>()) * grow,
            ],
        })
        .collect();

    Ok(Scene {
        target: body_sequence(&target, camera, &occluders, spec),
        distractor: distractor.as_ref().map(|d| body_sequence(d, camera, &occluders, spec)),
        occluders,
        camera,
        target_nodes: target.nodes,
        distractor_nodes: distractor.map(|d| d.nodes),
        height: spec.height,
        width: spec.width,
    })
}

/// Generates and renders sequence `index`.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Result<Sample> {
    let scene = sample_scene(spec, index)?;
    let images = scene.render(spec.body_scale);
    Ok(Sample {
        body: scene.target,
        images,
    })
}

/// Generates sequences `first..first + count`, in index order.
pub fn generate_dataset(spec: &SceneSpec, first: u64, count: usize, exec: Execution) -> Result<Vec<Sample>> {
    spec.validate()?;
    map_range(exec, count, |i| generate_sample(spec, first + i as u64))
        .into_iter()
        .collect()
}

const DATASET_MAGIC: [u8; 4] = *b"RMCD";
pub const DATASET_VERSION: u32 = 1;

fn sample_dims(s: &Sample) -> Result<[usize; 5]> {
    let j = s.body.joints3d.shape();
    let v = s.body.vertices3d.shape();
    let im = s.images.shape();
    if j.len() != 3 || v.len() != 3 || im.len() != 4 || im[1] != 1 {
        return Err(Error::shape(
            "write_dataset",
            format!("joints {j:?}, vertices {v:?}, images {im:?}"),
        ));
    }
    let dims = [j[0], j[1], v[1], im[2], im[3]];
    let [t, k, nv, h, w] = dims;
    let expect: [(&Tensor, Vec<usize>); 6] = [
        (&s.body.joints3d, vec![t, k, 3]),
        (&s.body.vertices3d, vec![t, nv, 3]),
        (&s.body.joints2d, vec![t, k, 2]),
        (&s.body.camera, vec![t, 3]),
        (&s.body.visibility, vec![t, k]),
        (&s.images, vec![t, 1, h, w]),
    ];
    for (tensor, shape) in &expect {
        if tensor.shape() != shape.as_slice() {
            return Err(Error::shape(
                "write_dataset",
                format!("expected {shape:?}, found {:?}", tensor.shape()),
            ));
        }
    }
    Ok(dims)
}

pub fn write_dataset_to(w: &mut impl Write, samples: &[Sample]) -> Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    put_u32(w, DATASET_VERSION)?;
    put_u32(w, dim_u32("sequence count", samples.len())?)?;
    for s in samples {
        for d in sample_dims(s)? {
            put_u32(w, dim_u32("dimension", d)?)?;
        }
        for t in [
            &s.body.joints3d,
            &s.body.vertices3d,
            &s.body.joints2d,
            &s.body.camera,
            &s.body.visibility,
            &s.images,
        ] {
            put_f64s(w, t.data())?;
        }
    }
    Ok(())
}

pub fn read_dataset_from(r: impl Read) -> Result<Vec<Sample>> {
    let mut r = Reader::new(r, "dataset");
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut d = [0usize; 5];
        for x in &mut d {
            *x = r.u32()? as usize;
        }
        let [t, k, v, h, w] = d;
        let mut read = |shape: Vec<usize>| -> Result<Tensor> {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or(Error::Truncated("dataset"))?;
            Ok(Tensor::from_parts(shape, r.f64s(n)?))
        };
        let body = BodySequence {
            joints3d: read(vec![t, k, 3])?,
            vertices3d: read(vec![t, v, 3])?,
            joints2d: read(vec![t, k, 2])?,
            camera: read(vec![t, 3])?,
            visibility: read(vec![t, k])?,
        };
        let images = read(vec![t, 1, h, w])?;
        out.push(Sample { body, images });
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset_from(BufReader::new(file))
}
