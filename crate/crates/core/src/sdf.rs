//! Signed-distance queries shared by analytic scenes and neural fields.

use serde::{Deserialize, Serialize};

use crate::camera::Vec3;

/// Value and spatial gradient of a scalar field at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: Vec3,
}

pub trait SignedDistance: Send + Sync {
    fn distance(&self, p: &Vec3) -> f64;

    /// Defaults to central differences; analytic and neural fields override.
    fn jet(&self, p: &Vec3) -> Jet {
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for i in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[i] += h;
            b[i] -= h;
            g[i] = (self.distance(&a) - self.distance(&b)) / (2.0 * h);
        }
        Jet {
            value: self.distance(p),
            gradient: g,
        }
    }

    fn distances(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(|p| self.distance(p)).collect()
    }

    fn jets(&self, points: &[Vec3]) -> Vec<Jet> {
        points.iter().map(|p| self.jet(p)).collect()
    }
}

/// Analytic primitives. Smooth unions use the polynomial smooth minimum,
/// which is a lower bound on the true distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Torus around the world `y` axis.
    Torus {
        center: [f64; 3],
        major: f64,
        minor: f64,
    },
    SmoothUnion {
        children: Vec<Shape>,
        k: f64,
    },
    /// Scales another shape's distance by a constant (not a true SDF).
    Scaled {
        inner: Box<Shape>,
        factor: f64,
    },
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn eval(&self, p: &Vec3) -> Jet {
        match self {
            Shape::Sphere { center, radius } => {
                let d = p - Vec3::from(*center);
                let n = d.norm();
                let gradient = if n > 0.0 { d / n } else { Vec3::y() };
                Jet {
                    value: n - radius,
                    gradient,
                }
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let d = p - Vec3::from(*center);
                let ring = (d.x * d.x + d.z * d.z).sqrt();
                let q_x = ring - major;
                let q = (q_x * q_x + d.y * d.y).sqrt();
                let gradient = if q > 0.0 && ring > 0.0 {
                    Vec3::new(q_x / q * d.x / ring, d.y / q, q_x / q * d.z / ring)
                } else {
                    Vec3::y()
                };
                Jet {
                    value: q - minor,
                    gradient,
                }
            }
            Shape::SmoothUnion { children, k } => {
                let mut it = children.iter().map(|c| c.eval(p));
                let first = it.next().expect("smooth union needs at least one child");
                it.fold(first, |a, b| smooth_min(a, b, *k))
            }
            Shape::Scaled { inner, factor } => {
                let j = inner.eval(p);
                Jet {
                    value: j.value * factor,
                    gradient: j.gradient * *factor,
                }
            }
        }
    }
}

/// Polynomial smooth minimum; its gradient is the `h`-blend of the inputs'.
pub fn smooth_min(a: Jet, b: Jet, k: f64) -> Jet {
    if k <= 0.0 {
        return if a.value <= b.value { a } else { b };
    }
    let h = (0.5 + 0.5 * (b.value - a.value) / k).clamp(0.0, 1.0);
    Jet {
        value: b.value * (1.0 - h) + a.value * h - k * h * (1.0 - h),
        gradient: b.gradient * (1.0 - h) + a.gradient * h,
    }
}

impl SignedDistance for Shape {
    fn distance(&self, p: &Vec3) -> f64 {
        self.eval(p).value
    }

    fn jet(&self, p: &Vec3) -> Jet {
        self.eval(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceParams {
    pub max_steps: usize,
    pub epsilon: f64,
    /// Step = relaxation * f; below 1 for fields that are not exact SDFs.
    pub relaxation: f64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            max_steps: 256,
            epsilon: 1e-7,
            relaxation: 1.0,
        }
    }
}

/// One ray to trace between `t_near` and `t_far`.
#[derive(Debug, Clone, Copy)]
pub struct TraceQuery {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceOutcome {
    Hit(f64),
    Miss,
    /// Step budget exhausted before convergence.
    NoConvergence,
}

impl TraceOutcome {
    pub fn hit(&self) -> Option<f64> {
        match self {
            TraceOutcome::Hit(t) => Some(*t),
            _ => None,
        }
    }
}

/// Lock-step sphere tracing of many rays with batched field queries.
///
/// An overshoot past the zero level set (sign flip) is refined by bisection
/// against the last positive sample.
pub fn sphere_trace_batch(
    sdf: &dyn SignedDistance,
    queries: &[TraceQuery],
    params: &TraceParams,
) -> Vec<TraceOutcome> {
    let n = queries.len();
    let mut t: Vec<f64> = queries.iter().map(|q| q.t_near).collect();
    let mut last_pos: Vec<f64> = t.clone();
    let mut out = vec![TraceOutcome::NoConvergence; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut bracket: Vec<usize> = Vec::new();
    for _ in 0..params.max_steps {
        if active.is_empty() {
            break;
        }
        let pts: Vec<Vec3> = active
            .iter()
            .map(|&i| queries[i].origin + queries[i].direction * t[i])
            .collect();
        let d = sdf.distances(&pts);
        let mut next = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let f = d[k];
            if f.abs() < params.epsilon {
                out[i] = TraceOutcome::Hit(t[i]);
            } else if f < 0.0 {
                bracket.push(i);
            } else {
                last_pos[i] = t[i];
                t[i] += f * params.relaxation;
                if t[i] > queries[i].t_far {
                    out[i] = TraceOutcome::Miss;
                } else {
                    next.push(i);
                }
            }
        }
        active = next;
    }
    if !bracket.is_empty() {
        let mut lo: Vec<f64> = bracket.iter().map(|&i| last_pos[i]).collect();
        let mut hi: Vec<f64> = bracket.iter().map(|&i| t[i]).collect();
        for _ in 0..60 {
            let pts: Vec<Vec3> = bracket
                .iter()
                .enumerate()
                .map(|(k, &i)| queries[i].origin + queries[i].direction * (0.5 * (lo[k] + hi[k])))
                .collect();
            let d = sdf.distances(&pts);
            for k in 0..bracket.len() {
                let mid = 0.5 * (lo[k] + hi[k]);
                if d[k] < 0.0 {
                    hi[k] = mid;
                } else {
                    lo[k] = mid;
                }
            }
        }
        for (k, &i) in bracket.iter().enumerate() {
            out[i] = TraceOutcome::Hit(0.5 * (lo[k] + hi[k]));
        }
    }
    out
}

pub fn sphere_trace(
    sdf: &dyn SignedDistance,
    query: &TraceQuery,
    params: &TraceParams,
) -> TraceOutcome {
    sphere_trace_batch(sdf, std::slice::from_ref(query), params)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_gradient(s: &Shape, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        Vec3::from_fn(|i, _| {
            let mut a = *p;
            let mut b = *p;
            a[i] += h;
            b[i] -= h;
            (s.distance(&a) - s.distance(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let shapes = [
            Shape::sphere(0.5),
            Shape::Torus {
                center: [0.1, 0.0, 0.0],
                major: 0.4,
                minor: 0.15,
            },
            Shape::SmoothUnion {
                children: vec![
                    Shape::Sphere {
                        center: [-0.2, 0.0, 0.0],
                        radius: 0.3,
                    },
                    Shape::Sphere {
                        center: [0.2, 0.05, 0.0],
                        radius: 0.25,
                    },
                ],
                k: 0.05,
            },
        ];
        let pts = [
            Vec3::new(0.3, 0.2, -0.1),
            Vec3::new(-0.01, 0.02, 0.4),
            Vec3::new(0.0, 0.3, 0.05),
        ];
        for s in &shapes {
            for p in &pts {
                assert!((s.eval(p).gradient - fd_gradient(s, p)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn sphere_trace_hits_sphere() {
        let s = Shape::sphere(0.5);
        let q = TraceQuery {
            origin: Vec3::new(0.0, 0.0, -3.0),
            direction: Vec3::z(),
            t_near: 2.0,
            t_far: 4.0,
        };
        let t = sphere_trace(&s, &q, &TraceParams::default()).hit().unwrap();
        assert_relative_eq!(t, 2.5, epsilon = 1e-6);
        let miss = TraceQuery {
            origin: Vec3::new(0.9, 0.0, -3.0),
            ..q
        };
        assert_eq!(sphere_trace(&s, &miss, &TraceParams::default()), TraceOutcome::Miss);
    }

    #[test]
    fn overshoot_is_refined_by_bisection() {
        // Scaled distances make the first step land inside the sphere.
        let s = Shape::Scaled {
            inner: Box::new(Shape::sphere(0.5)),
            factor: 2.5,
        };
        let q = TraceQuery {
            origin: Vec3::new(0.0, 0.0, -3.0),
            direction: Vec3::z(),
            t_near: 2.0,
            t_far: 4.0,
        };
        let t = sphere_trace(&s, &q, &TraceParams::default()).hit().unwrap();
        assert_relative_eq!(t, 2.5, epsilon = 1e-9);
    }
}
