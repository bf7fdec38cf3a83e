//! Deterministic synthetic radar world: rigid actors on smooth trajectories,
//! a moving ego vehicle, a radar sensor model with radial-velocity
//! measurement, exact ground-truth flow and masks, pseudo-labels, and the
//! on-disk dataset format.
//!
//! Points are measured in the sensor frame of their own scan. Ground-truth
//! flow for a point in frame t is the displacement to the same physical
//! point expressed in frame t+1's sensor coordinates, so it folds in the
//! apparent motion induced by ego movement.

use crate::error::{CoreError, Result};
use crate::geometry::{FlowField, PointCloud, SE3Transform};
use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CLASS_CLUTTER: u8 = 0;
pub const CLASS_CAR: u8 = 1;
pub const CLASS_PEDESTRIAN: u8 = 2;
pub const CLASS_CYCLIST: u8 = 3;
pub const CLASS_TRUCK: u8 = 4;

pub fn class_name(id: u8) -> &'static str {
    match id {
        CLASS_CAR => "car",
        CLASS_PEDESTRIAN => "pedestrian",
        CLASS_CYCLIST => "cyclist",
        CLASS_TRUCK => "truck",
        _ => "clutter",
    }
}

/// One radar scan with ground truth attached.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarFrame {
    pub cloud: PointCloud,
    pub gt_flow: FlowField,
    pub moving_mask: Vec<bool>,
    pub class_id: Vec<u8>,
    /// sensor-to-world pose at scan time
    pub ego_pose: SE3Transform,
    pub dt: f64,
    pub frame_index: u32,
}

impl RadarFrame {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// A rigid box actor following a smooth unicycle trajectory.
#[derive(Clone, Debug)]
pub struct RigidActor {
    pub extent: [f64; 3],
    pub class_id: u8,
    /// actor-to-world pose per timestep, one longer than the clip so the last
    /// frame still has a flow target
    pub trajectory: Vec<SE3Transform>,
    pub speed: f64,
    pub yaw_rate: f64,
    pub reflectivity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    pub n_actors: [usize; 2],
    pub actor_speed: [f64; 2],
    pub actor_yaw_rate: [f64; 2],
    pub ego_speed: [f64; 2],
    pub ego_yaw_rate: [f64; 2],
    /// radar sees only a few reflections per object
    pub points_per_actor: [usize; 2],
    pub n_clutter: [usize; 2],
    pub max_range: f64,
    pub azimuth_fov_deg: f64,
    pub pos_noise: f64,
    pub rrv_noise: f64,
    pub rcs_noise: f64,
    /// mini-clip length T
    pub clip_len: usize,
    pub dt: f64,
    /// world displacement per frame above which a point counts as moving
    pub moving_threshold: f64,
    /// RRV residual above which a point is pseudo-labeled moving
    pub seg_rrv_threshold: f64,
    /// when set, every frame is padded/truncated to exactly this many points
    pub target_points: Option<usize>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_actors: [2, 4],
            actor_speed: [0.5, 8.0],
            actor_yaw_rate: [0.0, 0.15],
            ego_speed: [0.0, 5.0],
            ego_yaw_rate: [0.0, 0.1],
            points_per_actor: [2, 40],
            n_clutter: [24, 48],
            max_range: 40.0,
            azimuth_fov_deg: 120.0,
            pos_noise: 0.05,
            rrv_noise: 0.1,
            rcs_noise: 0.5,
            clip_len: 5,
            dt: 0.1,
            moving_threshold: 0.05,
            seg_rrv_threshold: 0.35,
            target_points: None,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 2 {
            return Err(CoreError::Config("clip_len must be at least 2".into()));
        }
        if self.dt <= 0.0 {
            return Err(CoreError::Config("dt must be positive".into()));
        }
        if self.n_actors[0] > self.n_actors[1] || self.points_per_actor[0] > self.points_per_actor[1]
        {
            return Err(CoreError::Config("range fields must be [lo, hi]".into()));
        }
        Ok(())
    }
}

/// Where each measured point came from, for oracle checks of the ground
/// truth against an independent pose-based route.
#[derive(Clone, Debug)]
pub struct PointOrigin {
    pub world: Vector3<f64>,
    /// None for static clutter
    pub actor: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SimTruth {
    pub ego_poses: Vec<SE3Transform>,
    pub actors: Vec<RigidActor>,
    pub origins: Vec<Vec<PointOrigin>>,
}

/// Radial component of the velocity of a target relative to the sensor, in
/// sensor coordinates. Positive means receding. `None` for the origin,
/// where the radial direction is undefined.
pub fn measure_rrv(
    position: &Vector3<f64>,
    v_point: &Vector3<f64>,
    v_ego: &Vector3<f64>,
) -> Option<f64> {
    let norm = position.norm();
    if norm == 0.0 {
        return None;
    }
    let radial = position / norm;
    Some((v_point - v_ego).dot(&radial))
}

fn unicycle_pose(x: f64, y: f64, yaw: f64) -> SE3Transform {
    SE3Transform::yaw_translation(yaw, Vector3::new(x, y, 0.0))
}

/// Advance a unicycle state by one step of constant speed and yaw rate.
fn advance(x: &mut f64, y: &mut f64, yaw: &mut f64, speed: f64, yaw_rate: f64, dt: f64) {
    *x += speed * yaw.cos() * dt;
    *y += speed * yaw.sin() * dt;
    *yaw += yaw_rate * dt;
}

fn class_extent(class_id: u8) -> [f64; 3] {
    match class_id {
        CLASS_CAR => [4.5, 1.8, 1.5],
        CLASS_PEDESTRIAN => [0.5, 0.5, 1.7],
        CLASS_CYCLIST => [1.8, 0.6, 1.6],
        CLASS_TRUCK => [8.0, 2.5, 3.2],
        _ => [1.0, 1.0, 1.0],
    }
}

fn class_speed_scale(class_id: u8) -> f64 {
    match class_id {
        CLASS_PEDESTRIAN => 0.25,
        CLASS_CYCLIST => 0.6,
        _ => 1.0,
    }
}

struct Candidate {
    sensor_pos: Vector3<f64>,
    world_pos: Vector3<f64>,
    world_vel: Vector3<f64>,
    actor: Option<usize>,
    class_id: u8,
    rcs: f64,
}

/// Velocity of a material point on a rigid body with planar motion:
/// linear velocity of the center plus yaw-rate cross term.
fn rigid_point_velocity(
    center: &Vector3<f64>,
    heading: f64,
    speed: f64,
    yaw_rate: f64,
    point_world: &Vector3<f64>,
) -> Vector3<f64> {
    let v_lin = Vector3::new(speed * heading.cos(), speed * heading.sin(), 0.0);
    let r = point_world - center;
    let omega = Vector3::new(0.0, 0.0, yaw_rate);
    v_lin + omega.cross(&r)
}

/// Generate one mini-clip of `clip_len` frames; deterministic per seed.
pub fn simulate_sequence(cfg: &ScenarioConfig) -> Result<Vec<RadarFrame>> {
    simulate_sequence_full(cfg).map(|(frames, _)| frames)
}

pub fn simulate_sequence_full(cfg: &ScenarioConfig) -> Result<(Vec<RadarFrame>, SimTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let t_total = cfg.clip_len + 1;

    // ego trajectory
    let ego_speed = sample_range(&mut rng, cfg.ego_speed);
    let ego_yaw_rate = sample_signed(&mut rng, cfg.ego_yaw_rate);
    let mut ego_poses = Vec::with_capacity(t_total);
    let (mut ex, mut ey, mut eyaw) = (0.0, 0.0, 0.0);
    for _ in 0..t_total {
        ego_poses.push(unicycle_pose(ex, ey, eyaw));
        advance(&mut ex, &mut ey, &mut eyaw, ego_speed, ego_yaw_rate, cfg.dt);
    }

    // actors spawned inside the field of view ahead of the ego start pose
    let n_actors = rng.gen_range(cfg.n_actors[0]..=cfg.n_actors[1]);
    let half_fov = cfg.azimuth_fov_deg.to_radians() / 2.0;
    let classes = [CLASS_CAR, CLASS_PEDESTRIAN, CLASS_CYCLIST, CLASS_TRUCK];
    let mut actors = Vec::with_capacity(n_actors);
    for _ in 0..n_actors {
        let class_id = classes[rng.gen_range(0..classes.len())];
        let range = rng.gen_range(5.0..cfg.max_range * 0.7);
        let azimuth = rng.gen_range(-half_fov * 0.8..half_fov * 0.8);
        let (mut ax, mut ay) = (range * azimuth.cos(), range * azimuth.sin());
        let mut heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = sample_range(&mut rng, cfg.actor_speed) * class_speed_scale(class_id);
        let yaw_rate = sample_signed(&mut rng, cfg.actor_yaw_rate);
        let mut trajectory = Vec::with_capacity(t_total);
        for _ in 0..t_total {
            trajectory.push(unicycle_pose(ax, ay, heading));
            advance(&mut ax, &mut ay, &mut heading, speed, yaw_rate, cfg.dt);
        }
        actors.push(RigidActor {
            extent: class_extent(class_id),
            class_id,
            trajectory,
            speed,
            yaw_rate,
            reflectivity: rng.gen_range(2.0..20.0),
        });
    }

    let mut frames = Vec::with_capacity(cfg.clip_len);
    let mut origins = Vec::with_capacity(cfg.clip_len);
    for t in 0..cfg.clip_len {
        let (frame, origin) = sample_frame(cfg, &mut rng, t, &ego_poses, &actors)?;
        frames.push(frame);
        origins.push(origin);
    }
    Ok((frames, SimTruth { ego_poses, actors, origins }))
}

fn sample_range(rng: &mut ChaCha12Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn sample_signed(rng: &mut ChaCha12Rng, r: [f64; 2]) -> f64 {
    let mag = sample_range(rng, r);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn gaussian(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_frame(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha12Rng,
    t: usize,
    ego_poses: &[SE3Transform],
    actors: &[RigidActor],
) -> Result<(RadarFrame, Vec<PointOrigin>)> {
    let half_fov = cfg.azimuth_fov_deg.to_radians() / 2.0;
    let ego_t = &ego_poses[t];
    let ego_inv = ego_t.inverse();
    let ego_center = ego_t.translation();
    // ego velocity from its own unicycle parameters is awkward to thread
    // through; finite difference of poses over dt is exact for the sampler's
    // constant-step advance
    let ego_vel = (ego_poses[t + 1].translation() - ego_center) / cfg.dt;

    for attempt in 0..32 {
        let mut cands: Vec<Candidate> = Vec::new();

        for (ai, actor) in actors.iter().enumerate() {
            let n_pts = rng.gen_range(cfg.points_per_actor[0]..=cfg.points_per_actor[1]);
            let pose = &actor.trajectory[t];
            let center = pose.translation();
            let heading = yaw_of(pose);
            for _ in 0..n_pts {
                let local = sample_box_surface(rng, actor.extent);
                let mut world = pose.apply_point(&local);
                world.x += gaussian(rng, cfg.pos_noise);
                world.y += gaussian(rng, cfg.pos_noise);
                world.z += gaussian(rng, cfg.pos_noise);
                let sensor = ego_inv.apply_point(&world);
                if !in_fov(&sensor, cfg.max_range, half_fov) {
                    continue;
                }
                let vel =
                    rigid_point_velocity(&center, heading, actor.speed, actor.yaw_rate, &world);
                cands.push(Candidate {
                    sensor_pos: sensor,
                    world_pos: world,
                    world_vel: vel,
                    actor: Some(ai),
                    class_id: actor.class_id,
                    rcs: actor.reflectivity + gaussian(rng, cfg.rcs_noise),
                });
            }
        }

        let mut n_clutter = rng.gen_range(cfg.n_clutter[0]..=cfg.n_clutter[1]);
        if let Some(target) = cfg.target_points {
            n_clutter = n_clutter.max(target.saturating_sub(cands.len()));
        }
        for _ in 0..n_clutter {
            let range = rng.gen_range(2.0..cfg.max_range);
            let azimuth = rng.gen_range(-half_fov..half_fov);
            let z = rng.gen_range(0.0..2.5);
            let sensor = Vector3::new(range * azimuth.cos(), range * azimuth.sin(), z);
            let world = ego_t.apply_point(&sensor);
            cands.push(Candidate {
                sensor_pos: sensor,
                world_pos: world,
                world_vel: Vector3::zeros(),
                actor: None,
                class_id: CLASS_CLUTTER,
                rcs: rng.gen_range(0.5..5.0),
            });
        }

        if let Some(target) = cfg.target_points {
            cands.truncate(target);
        }
        if cands.is_empty() {
            // zero-point frame: a different surface draw next attempt
            if attempt == 31 {
                return Err(CoreError::Invariant(
                    "frame sampling kept producing zero points".into(),
                ));
            }
            continue;
        }

        let n = cands.len();
        let mut positions = Array2::zeros((n, 3));
        let mut rrv = Array1::zeros(n);
        let mut rcs = Array1::zeros(n);
        let mut flow = Array2::zeros((n, 3));
        let mut moving = Vec::with_capacity(n);
        let mut class_id = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let ego_rot_inv = ego_t.rotation().transpose();
        let ego_next_inv = ego_poses[t + 1].inverse();

        for (i, c) in cands.into_iter().enumerate() {
            positions[[i, 0]] = c.sensor_pos.x;
            positions[[i, 1]] = c.sensor_pos.y;
            positions[[i, 2]] = c.sensor_pos.z;

            let v_point_sensor = ego_rot_inv * c.world_vel;
            let v_ego_sensor = ego_rot_inv * ego_vel;
            let base_rrv = measure_rrv(&c.sensor_pos, &v_point_sensor, &v_ego_sensor)
                .expect("origin points are never sampled");
            rrv[i] = base_rrv + gaussian(rng, cfg.rrv_noise);
            rcs[i] = c.rcs;

            // world position of the same material point one frame later
            let world_next = match c.actor {
                Some(ai) => {
                    let a = &actors[ai];
                    a.trajectory[t + 1].apply_point(&a.trajectory[t].inverse().apply_point(&c.world_pos))
                }
                None => c.world_pos,
            };
            let target_sensor = ego_next_inv.apply_point(&world_next);
            flow[[i, 0]] = target_sensor.x - c.sensor_pos.x;
            flow[[i, 1]] = target_sensor.y - c.sensor_pos.y;
            flow[[i, 2]] = target_sensor.z - c.sensor_pos.z;

            moving.push((world_next - c.world_pos).norm() > cfg.moving_threshold);
            class_id.push(c.class_id);
            origins.push(PointOrigin { world: c.world_pos, actor: c.actor });
        }

        let cloud = PointCloud::new(positions, rrv, rcs)?;
        let frame = RadarFrame {
            cloud,
            gt_flow: FlowField::new(flow)?,
            moving_mask: moving,
            class_id,
            ego_pose: ego_t.clone(),
            dt: cfg.dt,
            frame_index: t as u32,
        };
        return Ok((frame, origins));
    }
    unreachable!()
}

fn yaw_of(pose: &SE3Transform) -> f64 {
    let r = pose.rotation();
    r[(1, 0)].atan2(r[(0, 0)])
}

fn in_fov(sensor: &Vector3<f64>, max_range: f64, half_fov: f64) -> bool {
    let range = sensor.norm();
    if range < 1e-6 || range > max_range {
        return false;
    }
    sensor.y.atan2(sensor.x).abs() <= half_fov
}

fn sample_box_surface(rng: &mut ChaCha12Rng, extent: [f64; 3]) -> Vector3<f64> {
    let (ex, ey) = (extent[0] / 2.0, extent[1] / 2.0);
    // faces weighted by area; z spans [0, extent_z] so boxes sit on the ground
    let areas = [
        extent[1] * extent[2], // +x
        extent[1] * extent[2], // -x
        extent[0] * extent[2], // +y
        extent[0] * extent[2], // -y
        extent[0] * extent[1], // top
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(0.0..1.0);
    match face {
        0 => Vector3::new(ex, u * ey, v * extent[2]),
        1 => Vector3::new(-ex, u * ey, v * extent[2]),
        2 => Vector3::new(u * ex, ey, v * extent[2]),
        3 => Vector3::new(u * ex, -ey, v * extent[2]),
        _ => Vector3::new(u * ex, (2.0 * v - 1.0) * ey, extent[2]),
    }
}

/// The ego-motion transform mapping frame-P sensor coordinates into frame-Q
/// sensor coordinates: Q_pose^-1 * P_pose.
pub fn relative_ego_motion(p_frame: &RadarFrame, q_frame: &RadarFrame) -> SE3Transform {
    q_frame.ego_pose.inverse().compose(&p_frame.ego_pose)
}

/// Transform a frame by the known ego motion so it lives in the next scan's
/// coordinates. Ground-truth flow of static points becomes exactly zero;
/// moving points keep their (unchanged) target position.
pub fn ego_compensate(frame: &RadarFrame, omega: &SE3Transform) -> RadarFrame {
    let mut out = frame.clone();
    let new_positions = crate::geometry::transform_positions(omega, &frame.cloud.positions);
    for i in 0..frame.len() {
        if frame.moving_mask[i] {
            for c in 0..3 {
                let target = frame.cloud.positions[[i, c]] + frame.gt_flow.vectors[[i, c]];
                out.gt_flow.vectors[[i, c]] = target - new_positions[[i, c]];
            }
        } else {
            for c in 0..3 {
                out.gt_flow.vectors[[i, c]] = 0.0;
            }
        }
    }
    out.cloud.positions = new_positions;
    out
}

/// Pseudo-labels derived from odometry and the RRV channel.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    pub seg_mask: Vec<bool>,
    pub fg_flow: FlowField,
    pub bg_flow: FlowField,
}

/// seg mask: points whose RRV deviates from the static-world radial rate
/// implied by odometry; fg flow: the simulator ground truth (standing in for
/// an upstream tracker); bg flow: odometry displacement, or zero when the
/// frame is already compensated.
pub fn derive_pseudo_labels(
    frame: &RadarFrame,
    omega: &SE3Transform,
    compensated: bool,
    rrv_threshold: f64,
) -> PseudoLabels {
    let n = frame.len();
    let mut seg = Vec::with_capacity(n);
    let mut bg = Array2::zeros((n, 3));
    for i in 0..n {
        let p = Vector3::new(
            frame.cloud.positions[[i, 0]],
            frame.cloud.positions[[i, 1]],
            frame.cloud.positions[[i, 2]],
        );
        let moved = omega.apply_point(&p);
        let disp = moved - p;
        let norm = p.norm();
        let static_rate = if norm > 0.0 { disp.dot(&(p / norm)) / frame.dt } else { 0.0 };
        seg.push((frame.cloud.rrv[i] - static_rate).abs() > rrv_threshold);
        if !compensated {
            bg[[i, 0]] = disp.x;
            bg[[i, 1]] = disp.y;
            bg[[i, 2]] = disp.z;
        }
    }
    PseudoLabels {
        seg_mask: seg,
        fg_flow: frame.gt_flow.clone(),
        bg_flow: FlowField { vectors: bg },
    }
}

// --- dataset serialization -------------------------------------------------

const FRAME_MAGIC: &[u8; 4] = b"RFRM";
const FRAME_VERSION: u32 = 1;

/// Header: magic, version, point count, frame index, dt. Payload: f32 LE
/// positions Nx3, rrv N, rcs N, gt_flow Nx3, mask N bytes, class N bytes,
/// ego pose 16 f32.
pub fn frame_to_bytes(frame: &RadarFrame) -> Vec<u8> {
    let n = frame.len();
    let mut buf = Vec::with_capacity(frame_byte_len(n));
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&frame.frame_index.to_le_bytes());
    buf.extend_from_slice(&frame.dt.to_le_bytes());
    let push_f32 = |v: f64, buf: &mut Vec<u8>| buf.extend_from_slice(&(v as f32).to_le_bytes());
    for v in frame.cloud.positions.iter() {
        push_f32(*v, &mut buf);
    }
    for v in frame.cloud.rrv.iter() {
        push_f32(*v, &mut buf);
    }
    for v in frame.cloud.rcs.iter() {
        push_f32(*v, &mut buf);
    }
    for v in frame.gt_flow.vectors.iter() {
        push_f32(*v, &mut buf);
    }
    for m in &frame.moving_mask {
        buf.push(*m as u8);
    }
    buf.extend_from_slice(&frame.class_id);
    for r in 0..4 {
        for c in 0..4 {
            push_f32(frame.ego_pose.matrix[(r, c)], &mut buf);
        }
    }
    buf
}

pub fn frame_byte_len(n: usize) -> usize {
    4 + 4 + 4 + 4 + 8 + 4 * (n * 3 + n + n + n * 3) + n + n + 4 * 16
}

pub fn frame_from_bytes(bytes: &[u8]) -> Result<RadarFrame> {
    fn take<'a>(bytes: &'a [u8], cur: &mut usize, n: usize) -> Result<&'a [u8]> {
        if *cur + n > bytes.len() {
            return Err(CoreError::Format("frame record truncated".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    }
    let mut cur = 0usize;
    if take(bytes, &mut cur, 4)? != FRAME_MAGIC {
        return Err(CoreError::Format("bad frame magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut cur, 4)?.try_into().unwrap());
    if version != FRAME_VERSION {
        return Err(CoreError::Format(format!("unsupported frame version {version}")));
    }
    let n = u32::from_le_bytes(take(bytes, &mut cur, 4)?.try_into().unwrap()) as usize;
    let frame_index = u32::from_le_bytes(take(bytes, &mut cur, 4)?.try_into().unwrap());
    let dt = f64::from_le_bytes(take(bytes, &mut cur, 8)?.try_into().unwrap());
    if bytes.len() != frame_byte_len(n) {
        return Err(CoreError::Format(format!(
            "frame size {} does not match header-declared payload {}",
            bytes.len(),
            frame_byte_len(n)
        )));
    }
    let read_f32s = |count: usize, cur: &mut usize| -> Result<Vec<f64>> {
        let raw = take(bytes, cur, 4 * count)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let positions = Array2::from_shape_vec((n, 3), read_f32s(n * 3, &mut cur)?).unwrap();
    let rrv = Array1::from_vec(read_f32s(n, &mut cur)?);
    let rcs = Array1::from_vec(read_f32s(n, &mut cur)?);
    let flow = Array2::from_shape_vec((n, 3), read_f32s(n * 3, &mut cur)?).unwrap();
    let mask: Vec<bool> = take(bytes, &mut cur, n)?.iter().map(|b| *b != 0).collect();
    let class_id = take(bytes, &mut cur, n)?.to_vec();
    let pose_vals = read_f32s(16, &mut cur)?;
    let mut m = nalgebra::Matrix4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = pose_vals[r * 4 + c];
        }
    }
    // f32 rounding can nudge the rotation block off orthonormality at the
    // validation tolerance, so build without revalidating
    let ego_pose = SE3Transform { matrix: m };
    Ok(RadarFrame {
        cloud: PointCloud::new(positions, rrv, rcs)?,
        gt_flow: FlowField::new(flow)?,
        moving_mask: mask,
        class_id,
        ego_pose,
        dt,
        frame_index,
    })
}

pub fn save_sequence(dir: &Path, frames: &[RadarFrame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:04}.bin"));
        let mut f = std::fs::File::create(path)?;
        f.write_all(&frame_to_bytes(frame))?;
    }
    Ok(())
}

pub fn load_sequence(dir: &Path, n_frames: usize) -> Result<Vec<RadarFrame>> {
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let path = dir.join(format!("frame_{i:04}.bin"));
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        frames.push(frame_from_bytes(&bytes)?);
    }
    Ok(frames)
}

/// Dataset manifest: sequence directories with their split assignment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dt: f64,
    pub sequences: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub frames: usize,
    pub split: String,
}

impl Manifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(root.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(root.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.sequences.iter().filter(|s| s.split == name).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet_cfg(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            pos_noise: 0.0,
            rrv_noise: 0.0,
            rcs_noise: 0.0,
            seed,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn static_world_has_zero_flow() {
        let cfg = ScenarioConfig {
            n_actors: [0, 0],
            ego_speed: [0.0, 0.0],
            ego_yaw_rate: [0.0, 0.0],
            ..quiet_cfg(3)
        };
        let frames = simulate_sequence(&cfg).unwrap();
        for f in &frames {
            assert!(f.gt_flow.vectors.iter().all(|v| v.abs() < 1e-12));
            assert!(f.moving_mask.iter().all(|m| !m));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = quiet_cfg(11);
        let a = simulate_sequence(&cfg).unwrap();
        let b = simulate_sequence(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translating_actor_flow_is_velocity_times_dt() {
        // static ego, one non-rotating actor
        let cfg = ScenarioConfig {
            n_actors: [1, 1],
            actor_yaw_rate: [0.0, 0.0],
            ego_speed: [0.0, 0.0],
            ego_yaw_rate: [0.0, 0.0],
            n_clutter: [4, 4],
            ..quiet_cfg(17)
        };
        let (frames, truth) = simulate_sequence_full(&cfg).unwrap();
        let actor = &truth.actors[0];
        let v = actor.trajectory[1].translation() - actor.trajectory[0].translation();
        for (i, origin) in truth.origins[0].iter().enumerate() {
            if origin.actor.is_some() {
                // sensor frame == world frame here (identity ego pose)
                assert_abs_diff_eq!(frames[0].gt_flow.vectors[[i, 0]], v.x, epsilon = 1e-9);
                assert_abs_diff_eq!(frames[0].gt_flow.vectors[[i, 1]], v.y, epsilon = 1e-9);
                assert_abs_diff_eq!(frames[0].gt_flow.vectors[[i, 2]], v.z, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn warp_by_gt_flow_matches_pose_oracle() {
        let (frames, truth) = simulate_sequence_full(&quiet_cfg(23)).unwrap();
        for t in 0..frames.len() {
            let f = &frames[t];
            let next_inv = truth.ego_poses[t + 1].inverse();
            for i in 0..f.len() {
                let origin = &truth.origins[t][i];
                // independent route: world point advanced by poses
                let world_next = match origin.actor {
                    Some(ai) => {
                        let a = &truth.actors[ai];
                        a.trajectory[t + 1]
                            .apply_point(&a.trajectory[t].inverse().apply_point(&origin.world))
                    }
                    None => origin.world,
                };
                let expect = next_inv.apply_point(&world_next);
                for c in 0..3 {
                    let warped = f.cloud.positions[[i, c]] + f.gt_flow.vectors[[i, c]];
                    assert!((warped - expect[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rrv_sensor_model() {
        // receding straight along boresight
        let rrv = measure_rrv(
            &Vector3::new(10.0, 0.0, 0.0),
            &Vector3::new(3.0, 0.0, 0.0),
            &Vector3::zeros(),
        )
        .unwrap();
        assert_abs_diff_eq!(rrv, 3.0);

        // purely tangential motion measures zero
        let rrv = measure_rrv(
            &Vector3::new(10.0, 0.0, 0.0),
            &Vector3::new(0.0, 4.0, 0.0),
            &Vector3::zeros(),
        )
        .unwrap();
        assert_abs_diff_eq!(rrv, 0.0);

        // oblique case against the dot-product oracle
        let p = Vector3::new(3.0, 4.0, 1.0);
        let vp = Vector3::new(1.0, -2.0, 0.5);
        let ve = Vector3::new(0.3, 0.1, 0.0);
        let rrv = measure_rrv(&p, &vp, &ve).unwrap();
        assert_abs_diff_eq!(rrv, (vp - ve).dot(&p.normalize()), epsilon = 1e-12);

        assert!(measure_rrv(&Vector3::zeros(), &vp, &ve).is_none());
    }

    #[test]
    fn static_point_rrv_is_negative_ego_radial_component() {
        let cfg = ScenarioConfig {
            n_actors: [0, 0],
            ego_speed: [3.0, 3.0],
            ego_yaw_rate: [0.0, 0.0],
            ..quiet_cfg(29)
        };
        let (frames, truth) = simulate_sequence_full(&cfg).unwrap();
        let f = &frames[0];
        let ego_vel = (truth.ego_poses[1].translation() - truth.ego_poses[0].translation())
            / cfg.dt;
        let rot_inv = truth.ego_poses[0].rotation().transpose();
        let v_ego_sensor = rot_inv * ego_vel;
        for i in 0..f.len() {
            let p = Vector3::new(
                f.cloud.positions[[i, 0]],
                f.cloud.positions[[i, 1]],
                f.cloud.positions[[i, 2]],
            );
            let expect = -v_ego_sensor.dot(&p.normalize());
            assert_abs_diff_eq!(f.cloud.rrv[i], expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn ego_compensation_zeroes_static_flow() {
        let frames = simulate_sequence(&quiet_cfg(31)).unwrap();
        let omega = relative_ego_motion(&frames[0], &frames[1]);
        let comp = ego_compensate(&frames[0], &omega);
        for i in 0..comp.len() {
            if !comp.moving_mask[i] {
                for c in 0..3 {
                    assert_eq!(comp.gt_flow.vectors[[i, c]], 0.0);
                }
            } else {
                // moving points keep their target position
                for c in 0..3 {
                    let before =
                        frames[0].cloud.positions[[i, c]] + frames[0].gt_flow.vectors[[i, c]];
                    let after = comp.cloud.positions[[i, c]] + comp.gt_flow.vectors[[i, c]];
                    assert_abs_diff_eq!(before, after, epsilon = 1e-9);
                }
            }
        }

        // identity omega leaves positions unchanged
        let id = SE3Transform::identity();
        let same = ego_compensate(&frames[0], &id);
        assert_eq!(same.cloud.positions, frames[0].cloud.positions);
    }

    #[test]
    fn pseudo_labels_static_world_and_fast_movers() {
        let cfg = ScenarioConfig {
            n_actors: [0, 0],
            ..quiet_cfg(37)
        };
        let frames = simulate_sequence(&cfg).unwrap();
        let omega = relative_ego_motion(&frames[0], &frames[1]);
        let labels = derive_pseudo_labels(&frames[0], &omega, false, 0.35);
        assert!(labels.seg_mask.iter().all(|m| !m), "static world must pseudo-label static");

        // a fast radial mover gets flagged
        let cfg = ScenarioConfig {
            n_actors: [3, 3],
            actor_speed: [6.0, 9.0],
            actor_yaw_rate: [0.0, 0.0],
            ..quiet_cfg(41)
        };
        let frames = simulate_sequence(&cfg).unwrap();
        let omega = relative_ego_motion(&frames[0], &frames[1]);
        let labels = derive_pseudo_labels(&frames[0], &omega, false, 0.35);
        let flagged = frames[0]
            .class_id
            .iter()
            .zip(labels.seg_mask.iter())
            .filter(|(c, m)| **c != CLASS_CLUTTER && **m)
            .count();
        assert!(flagged > 0, "fast movers should be pseudo-labeled moving");
    }

    #[test]
    fn pseudo_label_radial_rate_matches_hand_oracle_under_bad_odometry() {
        let frames = simulate_sequence(&quiet_cfg(43)).unwrap();
        // corrupted odometry: an extra yaw and lateral shift
        let bad = SE3Transform::yaw_translation(0.02, Vector3::new(0.3, -0.2, 0.0))
            .compose(&relative_ego_motion(&frames[0], &frames[1]));
        let labels = derive_pseudo_labels(&frames[0], &bad, false, 0.35);
        let f = &frames[0];
        for i in 0..f.len() {
            let p = Vector3::new(
                f.cloud.positions[[i, 0]],
                f.cloud.positions[[i, 1]],
                f.cloud.positions[[i, 2]],
            );
            let rate = (bad.apply_point(&p) - p).dot(&p.normalize()) / f.dt;
            let expect = (f.cloud.rrv[i] - rate).abs() > 0.35;
            assert_eq!(labels.seg_mask[i], expect);
        }
    }

    #[test]
    fn serialization_roundtrip() {
        let frames = simulate_sequence(&ScenarioConfig {
            clip_len: 3,
            ..quiet_cfg(47)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(dir.path(), &frames).unwrap();
        let loaded = load_sequence(dir.path(), 3).unwrap();
        // a second write-read cycle is bit-identical
        let dir2 = tempfile::tempdir().unwrap();
        save_sequence(dir2.path(), &loaded).unwrap();
        let reloaded = load_sequence(dir2.path(), 3).unwrap();
        assert_eq!(loaded, reloaded);
        for i in 0..3 {
            let a = std::fs::read(dir.path().join(format!("frame_{i:04}.bin"))).unwrap();
            let b = std::fs::read(dir2.path().join(format!("frame_{i:04}.bin"))).unwrap();
            assert_eq!(a, b);
        }
        // loaded values are the f32-quantized originals
        for (orig, back) in frames.iter().zip(loaded.iter()) {
            for (a, b) in orig.cloud.positions.iter().zip(back.cloud.positions.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
            assert_eq!(orig.moving_mask, back.moving_mask);
            assert_eq!(orig.class_id, back.class_id);
        }
    }

    #[test]
    fn corrupted_and_truncated_frames_are_format_errors() {
        let frames = simulate_sequence(&quiet_cfg(53)).unwrap();
        let mut bytes = frame_to_bytes(&frames[0]);
        assert_eq!(bytes.len(), frame_byte_len(frames[0].len()));
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(matches!(frame_from_bytes(&corrupted), Err(CoreError::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(frame_from_bytes(&bytes), Err(CoreError::Format(_))));
    }

    #[test]
    fn target_points_pins_frame_size() {
        let cfg = ScenarioConfig {
            target_points: Some(12),
            n_clutter: [4, 6],
            ..quiet_cfg(59)
        };
        let frames = simulate_sequence(&cfg).unwrap();
        for f in &frames {
            assert_eq!(f.len(), 12);
        }
    }

    #[test]
    fn moving_mask_consistent_with_flow_magnitude() {
        let (frames, truth) = simulate_sequence_full(&quiet_cfg(61)).unwrap();
        for (t, f) in frames.iter().enumerate() {
            for i in 0..f.len() {
                let origin = &truth.origins[t][i];
                let world_next = match origin.actor {
                    Some(ai) => {
                        let a = &truth.actors[ai];
                        a.trajectory[t + 1]
                            .apply_point(&a.trajectory[t].inverse().apply_point(&origin.world))
                    }
                    None => origin.world,
                };
                let disp = (world_next - origin.world).norm();
                assert_eq!(f.moving_mask[i], disp > 0.05);
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            version: 1,
            dt: 0.1,
            sequences: vec![
                ManifestEntry { dir: "seq_00000".into(), frames: 5, split: "train".into() },
                ManifestEntry { dir: "seq_00001".into(), frames: 5, split: "test".into() },
            ],
        };
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back.split("train").len(), 1);
        assert_eq!(back.split("test")[0].dir, "seq_00001");
    }
}
