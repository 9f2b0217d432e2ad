//! Points, point clouds, and yaw-rotated 3D boxes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A LiDAR return: position in meters plus intensity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Point4 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point4 {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && (0.0..=1.0).contains(&self.intensity)
    }
}

impl From<[f64; 4]> for Point4 {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Point4> for [f64; 4] {
    fn from(p: Point4) -> Self {
        [p.x, p.y, p.z, p.intensity]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    pub points: Vec<Point4>,
}

impl PointCloud {
    pub fn new(points: Vec<Point4>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut r = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented box with 7 degrees of freedom. `l` runs along the local x axis,
/// `w` along local y, `h` along z; `yaw` rotates local x toward world y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl From<[f64; 7]> for Box3D {
    fn from(v: [f64; 7]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            cz: v[2],
            l: v[3],
            w: v[4],
            h: v[5],
            yaw: v[6],
        }
    }
}

impl From<Box3D> for [f64; 7] {
    fn from(b: Box3D) -> Self {
        b.to_array()
    }
}

impl Box3D {
    /// Builds a box, normalizing `yaw`. Dimensions must be positive and finite.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "box dimensions must be positive, got {dims:?}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidArgument("non-finite box parameter".into()));
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: dims[0],
            w: dims[1],
            h: dims[2],
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Radius of the BEV footprint's circumscribed circle.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * self.l.hypot(self.w)
    }

    /// World -> box frame: `R(-yaw) (p - c)`.
    pub fn to_box_frame(&self, p: &Point4) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p.z - self.cz]
    }

    /// Box frame -> world, inverse of [`Box3D::to_box_frame`].
    pub fn from_box_frame(&self, local: [f64; 3], intensity: f64) -> Point4 {
        let (s, c) = self.yaw.sin_cos();
        let [u, v, t] = local;
        Point4::new(
            self.cx + c * u - s * v,
            self.cy + s * u + c * v,
            self.cz + t,
            intensity,
        )
    }

    /// Closed-box membership.
    pub fn contains(&self, p: &Point4) -> bool {
        let [u, v, t] = self.to_box_frame(p);
        u.abs() <= 0.5 * self.l && v.abs() <= 0.5 * self.w && t.abs() <= 0.5 * self.h
    }
}

pub fn to_box_frame(point: &Point4, b: &Box3D) -> [f64; 3] {
    b.to_box_frame(point)
}

pub fn from_box_frame(local: [f64; 3], intensity: f64, b: &Box3D) -> Point4 {
    b.from_box_frame(local, intensity)
}

/// Indices of the points inside `b` (faces included).
pub fn points_in_box(cloud: &PointCloud, b: &Box3D) -> Vec<usize> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p))
        .map(|(i, _)| i)
        .collect()
}

pub fn count_points_in_box(cloud: &PointCloud, b: &Box3D) -> usize {
    cloud.points.iter().filter(|p| b.contains(p)).count()
}

/// Euclidean distance between the box centers projected onto the ground plane.
pub fn bev_center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Stretches `b` by `factors` along its own axes and drags the points inside it
/// along. Points outside the box are untouched.
pub fn scale_box_and_points(
    cloud: &PointCloud,
    b: &Box3D,
    factors: [f64; 3],
) -> Result<(PointCloud, Box3D)> {
    if factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "scale factors must be positive, got {factors:?}"
        )));
    }
    if factors == [1.0; 3] {
        return Ok((cloud.clone(), *b));
    }
    let points = cloud
        .points
        .iter()
        .map(|p| {
            if b.contains(p) {
                let local = b.to_box_frame(p);
                let scaled = [
                    local[0] * factors[0],
                    local[1] * factors[1],
                    local[2] * factors[2],
                ];
                b.from_box_frame(scaled, p.intensity)
            } else {
                *p
            }
        })
        .collect();
    let scaled = Box3D {
        l: b.l * factors[0],
        w: b.w * factors[1],
        h: b.h * factors[2],
        ..*b
    };
    Ok((PointCloud::new(points), scaled))
}
