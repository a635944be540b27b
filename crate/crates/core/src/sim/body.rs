//! Rigid-body state and shape geometry.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Disc { radius: f64 },
    /// Regular polygon described by vertex count and circumradius.
    Polygon { sides: usize, circumradius: f64 },
}

impl Shape {
    /// Radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        match self {
            Shape::Disc { radius } => *radius,
            Shape::Polygon { circumradius, .. } => *circumradius,
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Shape::Disc { radius } => std::f64::consts::PI * radius * radius,
            Shape::Polygon { sides, circumradius } => {
                let n = *sides as f64;
                0.5 * n * circumradius * circumradius * (std::f64::consts::TAU / n).sin()
            }
        }
    }

    /// Moment of inertia about the centroid for unit mass; multiply by mass.
    /// For a regular n-gon: (R^2 / 2) (1 - (2/3) sin^2(pi/n)), which recovers
    /// the disc value R^2 / 2 as n grows.
    pub fn unit_inertia(&self) -> f64 {
        match self {
            Shape::Disc { radius } => 0.5 * radius * radius,
            Shape::Polygon { sides, circumradius } => {
                let s = (std::f64::consts::PI / *sides as f64).sin();
                0.5 * circumradius * circumradius * (1.0 - (2.0 / 3.0) * s * s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    pub shape: Shape,
    pub mass: f64,
    /// Center of mass, px.
    pub pos: (f64, f64),
    /// px per frame.
    pub vel: (f64, f64),
    /// Radians.
    pub angle: f64,
    /// Radians per frame.
    pub angular_vel: f64,
    /// Bounciness in [0, 1].
    pub restitution: f64,
    pub color: [u8; 3],
}

impl RigidBody {
    pub fn inertia(&self) -> f64 {
        self.mass * self.shape.unit_inertia()
    }

    pub fn kinetic_energy(&self) -> f64 {
        let (vx, vy) = self.vel;
        0.5 * self.mass * (vx * vx + vy * vy)
            + 0.5 * self.inertia() * self.angular_vel * self.angular_vel
    }

    /// World-space vertices of a polygon body (empty for discs).
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        match self.shape {
            Shape::Disc { .. } => Vec::new(),
            Shape::Polygon { sides, circumradius } => (0..sides)
                .map(|k| {
                    let phi = self.angle + std::f64::consts::TAU * k as f64 / sides as f64;
                    (
                        self.pos.0 + circumradius * phi.cos(),
                        self.pos.1 + circumradius * phi.sin(),
                    )
                })
                .collect(),
        }
    }

    /// Whether a world point lies inside the body.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (p.0 - self.pos.0, p.1 - self.pos.1);
        match self.shape {
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Polygon { .. } => {
                let vs = self.vertices();
                let n = vs.len();
                for i in 0..n {
                    let (ax, ay) = vs[i];
                    let (bx, by) = vs[(i + 1) % n];
                    // inside means left of every edge (counter-clockwise)
                    let cross = (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Maps a world point into body-local coordinates at the current pose.
    pub fn to_local(&self, p: (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (p.0 - self.pos.0, p.1 - self.pos.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a body-local point back to world coordinates.
    pub fn to_world(&self, local: (f64, f64)) -> (f64, f64) {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (
            self.pos.0 + c * local.0 - s * local.1,
            self.pos.1 + s * local.0 + c * local.1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(shape: Shape) -> RigidBody {
        RigidBody {
            shape,
            mass: 2.0,
            pos: (10.0, 20.0),
            vel: (0.0, 0.0),
            angle: 0.3,
            angular_vel: 0.0,
            restitution: 1.0,
            color: [200, 10, 10],
        }
    }

    #[test]
    fn polygon_inertia_limits() {
        let square = Shape::Polygon {
            sides: 4,
            circumradius: 2.0,
        };
        // square of circumradius R: I = m R^2 / 3
        assert!((square.unit_inertia() - 4.0 / 3.0).abs() < 1e-12);
        let many = Shape::Polygon {
            sides: 4096,
            circumradius: 2.0,
        };
        let disc = Shape::Disc { radius: 2.0 };
        assert!((many.unit_inertia() - disc.unit_inertia()).abs() < 1e-5);
    }

    #[test]
    fn local_world_roundtrip() {
        let b = body(Shape::Polygon {
            sides: 5,
            circumradius: 3.0,
        });
        let p = (12.3, 18.9);
        let back = b.to_world(b.to_local(p));
        assert!((back.0 - p.0).abs() < 1e-12);
        assert!((back.1 - p.1).abs() < 1e-12);
    }

    #[test]
    fn containment_disc_and_polygon() {
        let d = body(Shape::Disc { radius: 3.0 });
        assert!(d.contains((12.9, 20.0)));
        assert!(!d.contains((13.1, 20.0)));

        let p = body(Shape::Polygon {
            sides: 4,
            circumradius: 3.0,
        });
        assert!(p.contains(p.pos));
        // circumradius point in a vertex direction is on the boundary;
        // a point past it is out
        assert!(!p.contains((14.0, 20.0)));
    }
}
