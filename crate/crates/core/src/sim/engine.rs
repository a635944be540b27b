//! Impulse-based time stepping.
//!
//! Semi-implicit Euler per substep: velocities first (gravity), then
//! positions, then collision resolution. Wall contacts use exact polygon
//! vertices (which couples linear and angular motion); body-body contacts
//! use the circumscribed circles with the impulse along the center line.
//! Positional de-penetration moves bodies without touching velocities, so
//! it never changes kinetic energy.

use super::body::{RigidBody, Shape};
use super::WorldConfig;

/// One resolved impulse, with the system kinetic energy on both sides.
#[derive(Debug, Clone, Copy)]
pub struct CollisionEvent {
    pub ke_before: f64,
    pub ke_after: f64,
}

#[derive(Debug, Default)]
pub struct StepReport {
    pub events: Vec<CollisionEvent>,
}

pub fn total_kinetic_energy(bodies: &[RigidBody]) -> f64 {
    bodies.iter().map(RigidBody::kinetic_energy).sum()
}

/// Advances the world by one frame (dt = 1) using the configured substeps.
pub fn step(bodies: &mut [RigidBody], config: &WorldConfig) -> StepReport {
    let mut report = StepReport::default();
    let substeps = config.substeps.max(1);
    let h = 1.0 / substeps as f64;
    for _ in 0..substeps {
        for b in bodies.iter_mut() {
            b.vel.1 += config.gravity * h;
            b.pos.0 += b.vel.0 * h;
            b.pos.1 += b.vel.1 * h;
            b.angle += b.angular_vel * h;
        }
        resolve_walls(bodies, config, &mut report);
        resolve_pairs(bodies, &mut report);
    }
    report
}

/// Applies an impulse of magnitude `j` along `n` at offset `r` from the
/// center of mass.
fn apply_impulse(b: &mut RigidBody, j: f64, n: (f64, f64), r: (f64, f64)) {
    let inv_m = 1.0 / b.mass;
    b.vel.0 += j * n.0 * inv_m;
    b.vel.1 += j * n.1 * inv_m;
    let r_cross_n = r.0 * n.1 - r.1 * n.0;
    b.angular_vel += j * r_cross_n / b.inertia();
}

/// Velocity of the body at a world contact point (linear + rotational part).
fn point_velocity(b: &RigidBody, r: (f64, f64)) -> (f64, f64) {
    (b.vel.0 - b.angular_vel * r.1, b.vel.1 + b.angular_vel * r.0)
}

fn resolve_walls(bodies: &mut [RigidBody], config: &WorldConfig, report: &mut StepReport) {
    let w = config.geometry.width as f64;
    let h = config.geometry.height as f64;
    // inward normals of the four walls and their offsets: n . p >= offset
    let walls = [
        ((1.0, 0.0), 0.0),
        ((-1.0, 0.0), -w),
        ((0.0, 1.0), 0.0),
        ((0.0, -1.0), -h),
    ];
    for idx in 0..bodies.len() {
        for (n, offset) in walls {
            let b = &bodies[idx];
            match b.shape {
                Shape::Disc { radius } => {
                    let dist = n.0 * b.pos.0 + n.1 * b.pos.1 - offset;
                    let pen = radius - dist;
                    if pen <= 0.0 {
                        continue;
                    }
                    let v_n = b.vel.0 * n.0 + b.vel.1 * n.1;
                    if v_n < 0.0 {
                        let e = b.restitution;
                        let ke_before = total_kinetic_energy(bodies);
                        let b = &mut bodies[idx];
                        let j = -(1.0 + e) * v_n * b.mass;
                        apply_impulse(b, j, n, (0.0, 0.0));
                        report.events.push(CollisionEvent {
                            ke_before,
                            ke_after: total_kinetic_energy(bodies),
                        });
                    }
                    let b = &mut bodies[idx];
                    b.pos.0 += n.0 * pen;
                    b.pos.1 += n.1 * pen;
                }
                Shape::Polygon { .. } => {
                    // deepest vertex is the contact point
                    let (mut worst_pen, mut contact) = (0.0f64, None);
                    for v in b.vertices() {
                        let pen = -(n.0 * v.0 + n.1 * v.1 - offset);
                        if pen > worst_pen {
                            worst_pen = pen;
                            contact = Some(v);
                        }
                    }
                    let Some(c) = contact else { continue };
                    let r = (c.0 - b.pos.0, c.1 - b.pos.1);
                    let v_c = point_velocity(b, r);
                    let v_n = v_c.0 * n.0 + v_c.1 * n.1;
                    if v_n < 0.0 {
                        let e = b.restitution;
                        let ke_before = total_kinetic_energy(bodies);
                        let (inv_m, inv_i) = (1.0 / b.mass, 1.0 / b.inertia());
                        let r_cross_n = r.0 * n.1 - r.1 * n.0;
                        let denom = inv_m + r_cross_n * r_cross_n * inv_i;
                        let j = -(1.0 + e) * v_n / denom;
                        let b = &mut bodies[idx];
                        apply_impulse(b, j, n, r);
                        report.events.push(CollisionEvent {
                            ke_before,
                            ke_after: total_kinetic_energy(bodies),
                        });
                    }
                    let b = &mut bodies[idx];
                    b.pos.0 += n.0 * worst_pen;
                    b.pos.1 += n.1 * worst_pen;
                }
            }
        }
    }
}

fn resolve_pairs(bodies: &mut [RigidBody], report: &mut StepReport) {
    let n_bodies = bodies.len();
    for i in 0..n_bodies {
        for j in (i + 1)..n_bodies {
            let (pi, pj) = (bodies[i].pos, bodies[j].pos);
            let (ri, rj) = (
                bodies[i].shape.circumradius(),
                bodies[j].shape.circumradius(),
            );
            let (dx, dy) = (pj.0 - pi.0, pj.1 - pi.1);
            let dist = (dx * dx + dy * dy).sqrt();
            let pen = ri + rj - dist;
            if pen <= 0.0 || dist < 1e-9 {
                continue;
            }
            let n = (dx / dist, dy / dist);
            let v_rel = (
                bodies[j].vel.0 - bodies[i].vel.0,
                bodies[j].vel.1 - bodies[i].vel.1,
            );
            let v_n = v_rel.0 * n.0 + v_rel.1 * n.1;
            if v_n < 0.0 {
                let e = bodies[i].restitution.min(bodies[j].restitution);
                let ke_before = total_kinetic_energy(bodies);
                let inv_m = 1.0 / bodies[i].mass + 1.0 / bodies[j].mass;
                let jmag = -(1.0 + e) * v_n / inv_m;
                // impulse along the center line: no torque on either body
                apply_impulse(&mut bodies[i], -jmag, n, (0.0, 0.0));
                apply_impulse(&mut bodies[j], jmag, n, (0.0, 0.0));
                report.events.push(CollisionEvent {
                    ke_before,
                    ke_after: total_kinetic_energy(bodies),
                });
            }
            // split the correction by inverse mass
            let (mi, mj) = (bodies[i].mass, bodies[j].mass);
            let share_i = (1.0 / mi) / (1.0 / mi + 1.0 / mj);
            bodies[i].pos.0 -= n.0 * pen * share_i;
            bodies[i].pos.1 -= n.1 * pen * share_i;
            bodies[j].pos.0 += n.0 * pen * (1.0 - share_i);
            bodies[j].pos.1 += n.1 * pen * (1.0 - share_i);
        }
    }
}
