//! Deterministic 2D rigid-body scene generator.
//!
//! Scenes are geometric primitives launched toward the scene center,
//! falling under gravity and colliding, on a flat-shaded background. One
//! scene fixes geometry, colors, and masks; each of its K futures redraws
//! only the initial linear and angular velocities from a per-future seed.
//! The whole dataset is a pure function of (config, master seed).

mod body;
mod engine;

pub use body::{RigidBody, Shape};
pub use engine::{step, total_kinetic_energy, CollisionEvent, StepReport};

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::{write_scene, DatasetManifest, SceneEntry};
use crate::error::{Error, Result};
use crate::grid::{anchor, GridGeometry, ImageRaster, ObjectMaskGrid, SceneRecord, TrajectoryGrid};
use crate::rng::{derive_seed, stream, uniform};

pub const BACKGROUND: [u8; 3] = [24, 28, 36];
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub geometry: GridGeometry,
    /// px per frame^2, downward.
    pub gravity: f64,
    /// Bodies per scene, inclusive range.
    pub n_bodies: (usize, usize),
    /// Circumradius range, px.
    pub radius: (f64, f64),
    /// Launch speed range, px per frame.
    pub speed: (f64, f64),
    /// Maximum |angular velocity|, rad per frame.
    pub angular_speed_max: f64,
    /// Restitution range.
    pub restitution: (f64, f64),
    /// Probability that a body is a polygon rather than a disc.
    pub polygon_prob: f64,
    /// Polygon vertex count, inclusive range.
    pub polygon_sides: (usize, usize),
    /// Physics substeps per frame.
    pub substeps: usize,
    /// Futures per scene (K).
    pub futures_per_scene: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            geometry: GridGeometry {
                height: 64,
                width: 64,
                stride: 2,
                frames: 24,
            },
            gravity: 0.12,
            n_bodies: (1, 3),
            radius: (6.0, 11.0),
            speed: (0.6, 2.2),
            angular_speed_max: 0.12,
            restitution: (0.55, 0.95),
            polygon_prob: 0.5,
            polygon_sides: (3, 6),
            substeps: 4,
            futures_per_scene: 8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.futures_per_scene == 0 {
            return Err(Error::Validation("need K >= 1 futures per scene".into()));
        }
        if self.n_bodies.0 > self.n_bodies.1 {
            return Err(Error::Validation("empty body-count range".into()));
        }
        let max_extent = self.geometry.width.min(self.geometry.height) as f64;
        if self.radius.1 * 2.0 >= max_extent {
            return Err(Error::Validation("bodies larger than the scene".into()));
        }
        Ok(())
    }
}

/// Scene geometry at t = 0 (bodies carry zero velocities until a future's
/// velocity seed fills them in).
#[derive(Debug, Clone)]
pub struct Scene {
    pub bodies: Vec<RigidBody>,
    pub image: ImageRaster,
    pub masks: ObjectMaskGrid,
    pub seed: u64,
}

/// Samples scene geometry, renders the initial image, and computes masks.
/// Deterministic in `seed`.
pub fn sample_scene(seed: u64, config: &WorldConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = stream(seed, 0);
    let g = &config.geometry;
    let n = rng.gen_range(config.n_bodies.0..=config.n_bodies.1);
    let mut bodies: Vec<RigidBody> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let radius = uniform(&mut rng, config.radius.0, config.radius.1);
            let shape = if rng.gen_range(0.0..1.0) < config.polygon_prob {
                Shape::Polygon {
                    sides: rng.gen_range(config.polygon_sides.0..=config.polygon_sides.1),
                    circumradius: radius,
                }
            } else {
                Shape::Disc { radius }
            };
            let margin = radius + 1.0;
            if 2.0 * margin >= g.width as f64 || 2.0 * margin >= g.height as f64 {
                continue;
            }
            let pos = (
                uniform(&mut rng, margin, g.width as f64 - margin),
                uniform(&mut rng, margin, g.height as f64 - margin),
            );
            let angle = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let color = [
                rng.gen_range(70..=255u8),
                rng.gen_range(70..=255u8),
                rng.gen_range(70..=255u8),
            ];
            let overlaps = bodies.iter().any(|other| {
                let (dx, dy) = (other.pos.0 - pos.0, other.pos.1 - pos.1);
                let min_dist = other.shape.circumradius() + radius + 1.0;
                dx * dx + dy * dy < min_dist * min_dist
            });
            if overlaps {
                continue;
            }
            bodies.push(RigidBody {
                shape,
                mass: shape.area(), // unit density
                pos,
                vel: (0.0, 0.0),
                angle,
                angular_vel: 0.0,
                restitution: uniform(&mut rng, config.restitution.0, config.restitution.1),
                color,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    let image = render(&bodies, g)?;
    let masks = masks_at_anchors(&bodies, g)?;
    Ok(Scene {
        bodies,
        image,
        masks,
        seed,
    })
}

/// Flat-shaded render of the bodies over the uniform background.
pub fn render(bodies: &[RigidBody], g: &GridGeometry) -> Result<ImageRaster> {
    let mut pixels = Array3::zeros((g.height, g.width, 3));
    for y in 0..g.height {
        for x in 0..g.width {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let color = bodies
                .iter()
                .find(|b| b.contains(p))
                .map(|b| b.color)
                .unwrap_or(BACKGROUND);
            for c in 0..3 {
                pixels[[y, x, c]] = color[c] as f64 / 255.0;
            }
        }
    }
    ImageRaster::new(pixels)
}

/// Mask ids from point-in-shape tests at the grid anchors (0 = background,
/// body k gets id k + 1; bodies never overlap at t = 0).
pub fn masks_at_anchors(bodies: &[RigidBody], g: &GridGeometry) -> Result<ObjectMaskGrid> {
    let (gh, gw) = (g.grid_h(), g.grid_w());
    let mut ids = Array2::zeros((gh, gw));
    for i in 0..gh {
        for j in 0..gw {
            let a = anchor(i, j, g.stride);
            if let Some(k) = bodies.iter().position(|b| b.contains(a)) {
                ids[[i, j]] = (k + 1) as u16;
            }
        }
    }
    ObjectMaskGrid::new(ids)
}

/// Draws initial velocities for one future: launch toward a jittered scene
/// center, plus a random spin.
fn assign_velocities(bodies: &mut [RigidBody], velocity_seed: u64, config: &WorldConfig) {
    let mut rng = stream(velocity_seed, 1);
    let g = &config.geometry;
    let center = (g.width as f64 / 2.0, g.height as f64 / 2.0);
    for b in bodies.iter_mut() {
        let speed = uniform(&mut rng, config.speed.0, config.speed.1);
        let jitter = uniform(&mut rng, -0.7, 0.7);
        let base = (center.1 - b.pos.1).atan2(center.0 - b.pos.0);
        let dir = base + jitter;
        b.vel = (speed * dir.cos(), speed * dir.sin());
        b.angular_vel = uniform(
            &mut rng,
            -config.angular_speed_max,
            config.angular_speed_max,
        );
    }
}

/// Rolls one future out of a scene. Grid anchors on a body follow it
/// rigidly (attached in its local frame); background anchors stay put.
/// Coordinates may leave the image (no clamping) and are quantized to f32
/// so the on-disk roundtrip is bit-exact.
pub fn rollout(scene: &Scene, velocity_seed: u64, config: &WorldConfig) -> Result<TrajectoryGrid> {
    let g = &config.geometry;
    let (gh, gw, t_len) = (g.grid_h(), g.grid_w(), g.frames);
    let mut bodies = scene.bodies.clone();
    assign_velocities(&mut bodies, velocity_seed, config);

    // attach each foreground anchor in its body's local frame
    let ids = scene.masks.ids();
    let mut attachments: Vec<Option<(usize, (f64, f64))>> = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let id = ids[[i, j]];
            if id == 0 {
                attachments.push(None);
            } else {
                let body = &bodies[(id - 1) as usize];
                attachments.push(Some(((id - 1) as usize, body.to_local(anchor(i, j, g.stride)))));
            }
        }
    }

    let mut data = Array4::zeros((t_len, gh, gw, 2));
    for t in 0..t_len {
        if t > 0 {
            step(&mut bodies, config);
        }
        for i in 0..gh {
            for j in 0..gw {
                let world = match attachments[i * gw + j] {
                    None => anchor(i, j, g.stride),
                    Some((k, local)) => bodies[k].to_world(local),
                };
                data[[t, i, j, 0]] = world.0;
                data[[t, i, j, 1]] = world.1;
            }
        }
    }
    let mut grid = TrajectoryGrid::new(data, g.stride)?;
    grid.quantize_f32();
    Ok(grid)
}

/// Builds the full scene record: K futures sharing the frame-0 anchors.
pub fn build_record(seed: u64, scene_id: &str, config: &WorldConfig) -> Result<SceneRecord> {
    let scene = sample_scene(seed, config)?;
    let mut futures = Vec::with_capacity(config.futures_per_scene);
    for k in 0..config.futures_per_scene {
        let velocity_seed = derive_seed(seed, (k + 1) as u64);
        futures.push(rollout(&scene, velocity_seed, config)?);
    }
    let record = SceneRecord {
        image: scene.image,
        futures,
        masks: scene.masks,
        seed,
        scene_id: scene_id.to_string(),
    };
    record.validate()?;
    Ok(record)
}

/// Generates `n_scenes` scene records under `out_dir` and writes the
/// manifest. `out_dir` must be empty or absent.
pub fn generate_dataset(
    config: &WorldConfig,
    n_scenes: usize,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if out_dir.exists() {
        let occupied = std::fs::read_dir(out_dir)?.next().is_some();
        if occupied {
            return Err(Error::Validation(format!(
                "output directory {} is not empty",
                out_dir.display()
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let g = &config.geometry;
    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let seed = derive_seed(master_seed, i as u64);
        let id = format!("scene_{i:05}");
        let record = build_record(seed, &id, config)?;
        write_scene(&record, &out_dir.join(&id))?;
        scenes.push(SceneEntry { id, seed });
    }
    let manifest = DatasetManifest {
        format_version: crate::dataset::FORMAT_VERSION,
        height: g.height,
        width: g.width,
        stride: g.stride,
        frames: g.frames,
        grid_height: g.grid_h(),
        grid_width: g.grid_w(),
        futures_per_scene: config.futures_per_scene,
        scenes,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}
