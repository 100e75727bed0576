//! Planar and spherical primitives: disks, triangles, generalized circles,
//! classification against separators, stereographic lifting and circumcircles.
//!
//! All classification runs under a single absolute tolerance. Anything within
//! `tol` of a separator boundary, including exact tangency, is `Intersecting`.

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Circles on the sphere closer than this to the north pole unproject to lines.
const POLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A closed ball of a neighborhood system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub id: u64,
    pub center: Point2,
    pub radius: f64,
}

impl Disk {
    pub fn new(id: u64, center: Point2, radius: f64) -> Self {
        Disk { id, center, radius }
    }

    /// Closed disks intersect.
    pub fn intersects(&self, o: &Disk) -> bool {
        self.center.dist(o.center) <= self.radius + o.radius
    }
}

/// A separator in the plane: the image of a sphere circle under
/// stereographic projection. Halfplanes arise when that circle runs through
/// the projection pole. For a halfplane the "inside" is `normal·p < offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenCircle {
    Circle { center: Point2, radius: f64 },
    Halfplane { normal: Point2, offset: f64 },
}

impl GenCircle {
    /// Negative inside, positive outside, zero on the boundary. For circles
    /// this is the Euclidean distance to the boundary circle.
    pub fn signed_distance(&self, p: Point2) -> f64 {
        match *self {
            GenCircle::Circle { center, radius } => p.dist(center) - radius,
            GenCircle::Halfplane { normal, offset } => normal.dot(p) - offset,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            GenCircle::Circle { center, radius } => {
                center.is_finite() && radius.is_finite() && radius > 0.0
            }
            GenCircle::Halfplane { normal, offset } => {
                normal.is_finite() && offset.is_finite() && (normal.norm() - 1.0).abs() <= 1e-12
            }
        }
    }

    /// Maps a separator expressed in normalized coordinates `q = (p - shift) / scale`
    /// back to original coordinates `p`.
    pub fn unnormalize(&self, shift: Point2, scale: f64) -> GenCircle {
        match *self {
            GenCircle::Circle { center, radius } => GenCircle::Circle {
                center: center * scale + shift,
                radius: radius * scale,
            },
            GenCircle::Halfplane { normal, offset } => GenCircle::Halfplane {
                normal,
                offset: offset * scale + normal.dot(shift),
            },
        }
    }

    /// Whether the point satisfies the boundary equation within `eps`.
    pub fn on_boundary(&self, p: Point2, eps: f64) -> bool {
        self.signed_distance(p).abs() <= eps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    Inside,
    Outside,
    Intersecting,
}

impl Classification {
    /// The classification against the complementary region.
    pub fn flipped(self) -> Self {
        match self {
            Classification::Inside => Classification::Outside,
            Classification::Outside => Classification::Inside,
            Classification::Intersecting => Classification::Intersecting,
        }
    }
}

/// Classifies a ball of radius `radius` whose center has signed distance `sd`
/// to a separator boundary.
pub fn classify_signed(sd: f64, radius: f64, tol: f64) -> Classification {
    if sd + radius < -tol {
        Classification::Inside
    } else if sd - radius > tol {
        Classification::Outside
    } else {
        Classification::Intersecting
    }
}

pub fn classify_disk(d: &Disk, s: &GenCircle, tol: f64) -> Classification {
    classify_signed(s.signed_distance(d.center), d.radius, tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub ids: [u64; 3],
    pub pts: [Point2; 3],
}

impl Triangle {
    pub fn new(ids: [u64; 3], pts: [Point2; 3]) -> Self {
        Triangle { ids, pts }
    }

    /// Twice the signed area (positive for counter-clockwise order).
    pub fn signed_area2(&self) -> f64 {
        orient(self.pts[0], self.pts[1], self.pts[2])
    }

    pub fn is_degenerate(&self) -> bool {
        self.signed_area2() == 0.0
    }

    pub fn centroid(&self) -> Point2 {
        let [a, b, c] = self.pts;
        Point2::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
    }

    /// Closed containment test under an absolute tolerance on the barycentric
    /// orientation values.
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let [a, b, c] = self.pts;
        let sign = self.signed_area2().signum();
        let d0 = orient(a, b, p) * sign;
        let d1 = orient(b, c, p) * sign;
        let d2 = orient(c, a, p) * sign;
        d0 >= -tol && d1 >= -tol && d2 >= -tol
    }
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm2();
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

pub fn classify_triangle(t: &Triangle, s: &GenCircle, tol: f64) -> Result<Classification> {
    if t.is_degenerate() {
        return Err(Error::DegenerateTriangle);
    }
    let mut inside = 0;
    let mut outside = 0;
    for &p in &t.pts {
        match classify_signed(s.signed_distance(p), 0.0, tol) {
            Classification::Inside => inside += 1,
            Classification::Outside => outside += 1,
            Classification::Intersecting => {}
        }
    }
    if inside == 3 {
        return Ok(Classification::Inside);
    }
    if outside < 3 {
        return Ok(Classification::Intersecting);
    }
    // All vertices outside. A halfplane cannot separate a convex triangle's
    // vertices from its interior, but a circle can sit inside the triangle or
    // cut across one edge.
    match *s {
        GenCircle::Halfplane { .. } => Ok(Classification::Outside),
        GenCircle::Circle { center, radius } => {
            if t.contains(center, 0.0) {
                return Ok(Classification::Intersecting);
            }
            let [a, b, c] = t.pts;
            let touches = [(a, b), (b, c), (c, a)]
                .iter()
                .any(|&(u, v)| point_segment_distance(center, u, v) <= radius + tol);
            Ok(if touches {
                Classification::Intersecting
            } else {
                Classification::Outside
            })
        }
    }
}

/// Projects from the north pole `(0,0,1)` onto the unit sphere; the origin
/// lands on the south pole.
pub fn stereo_lift(p: Point2) -> Point3 {
    let s = p.norm2();
    let d = s + 1.0;
    Point3::new(2.0 * p.x / d, 2.0 * p.y / d, (s - 1.0) / d)
}

pub fn stereo_unlift(q: Point3) -> Result<Point2> {
    if 1.0 - q.z < 1e-12 {
        return Err(Error::PoleSingularity);
    }
    // Near the north pole 1 - z cancels; on the unit sphere it equals
    // (x² + y²) / (1 + z).
    let d = if q.z > 0.0 {
        (q.x * q.x + q.y * q.y) / (1.0 + q.z)
    } else {
        1.0 - q.z
    };
    Ok(Point2::new(q.x / d, q.y / d))
}

/// Rotation followed by a plane dilation, acting on the unit sphere through
/// stereographic projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalMap {
    pub rotation: [[f64; 3]; 3],
    pub dilation: f64,
}

impl Default for ConformalMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl ConformalMap {
    pub fn identity() -> Self {
        ConformalMap {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            dilation: 1.0,
        }
    }

    /// The map that rotates `center` onto the positive z-axis and then dilates
    /// the plane by `sqrt((1 - z) / (1 + z))`, pulling `center` toward the
    /// sphere's center.
    pub fn normalizing(center: Point3) -> Result<Self> {
        let rho = center.norm();
        if !rho.is_finite() {
            return Err(Error::NumericalDegeneracy("non-finite centerpoint".into()));
        }
        if rho >= 1.0 - 1e-12 {
            return Err(Error::NumericalDegeneracy(format!(
                "centerpoint on the sphere surface (|c| = {rho})"
            )));
        }
        let rotation = if rho < 1e-15 {
            Self::identity().rotation
        } else {
            rotation_to_z(center.scale(1.0 / rho))
        };
        let dilation = ((1.0 - rho) / (1.0 + rho)).sqrt();
        Ok(ConformalMap { rotation, dilation })
    }

    pub fn is_valid(&self) -> bool {
        if !(self.dilation.is_finite() && self.dilation > 0.0) {
            return false;
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-10 {
                    return false;
                }
            }
        }
        true
    }

    fn rotate(&self, q: Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * q.x + r[0][1] * q.y + r[0][2] * q.z,
            r[1][0] * q.x + r[1][1] * q.y + r[1][2] * q.z,
            r[2][0] * q.x + r[2][1] * q.y + r[2][2] * q.z,
        )
    }

    fn rotate_inverse(&self, q: Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * q.x + r[1][0] * q.y + r[2][0] * q.z,
            r[0][1] * q.x + r[1][1] * q.y + r[2][1] * q.z,
            r[0][2] * q.x + r[1][2] * q.y + r[2][2] * q.z,
        )
    }

    /// Applies the map to a point on the unit sphere.
    pub fn apply(&self, q: Point3) -> Result<Point3> {
        let p = stereo_unlift(self.rotate(q))?;
        Ok(stereo_lift(p * self.dilation))
    }
}

/// Rodrigues rotation taking the unit vector `u` to `(0, 0, 1)`.
fn rotation_to_z(u: Point3) -> [[f64; 3]; 3] {
    let ez = Point3::new(0.0, 0.0, 1.0);
    let c = u.dot(ez);
    if c > 1.0 - 1e-15 {
        return ConformalMap::identity().rotation;
    }
    if c < -1.0 + 1e-15 {
        // half turn about the x-axis
        return [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    }
    let axis = u.cross(ez);
    let s = axis.norm();
    let k = axis.scale(1.0 / s);
    let kx = [[0.0, -k.z, k.y], [k.z, 0.0, -k.x], [-k.y, k.x, 0.0]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: f64 = (0..3).map(|m| kx[i][m] * kx[m][j]).sum();
            let id = if i == j { 1.0 } else { 0.0 };
            r[i][j] = id + s * kx[i][j] + (1.0 - c) * k2;
        }
    }
    r
}

/// A generalized plane circle `a·|p|² + 2·b·p + c = 0`. The sphere circle
/// `{q : m·q = d}` unprojects to `a = m.z - d`, `b = (m.x, m.y)`, `c = -(m.z + d)`.
#[derive(Debug, Clone, Copy)]
struct PlaneQuadric {
    a: f64,
    b: Point2,
    c: f64,
}

impl PlaneQuadric {
    fn from_sphere_circle(m: Point3, d: f64) -> Self {
        PlaneQuadric {
            a: m.z - d,
            b: Point2::new(m.x, m.y),
            c: -(m.z + d),
        }
    }

    fn to_sphere_circle(self) -> (Point3, f64) {
        (
            Point3::new(self.b.x, self.b.y, (self.a - self.c) / 2.0),
            -(self.a + self.c) / 2.0,
        )
    }

    /// The image of the curve under `p ↦ p / alpha`.
    fn shrink(self, alpha: f64) -> Self {
        PlaneQuadric {
            a: self.a * alpha * alpha,
            b: self.b * alpha,
            c: self.c,
        }
    }
}

/// Maps the great circle `{q : q·normal = 0}` from the normalized sphere of
/// `cm` back through `cm`'s inverse and stereographic projection.
pub fn gencircle_from_greatcircle(normal: Point3, cm: &ConformalMap) -> Result<GenCircle> {
    let quad = PlaneQuadric::from_sphere_circle(normal, 0.0).shrink(cm.dilation);
    let (m, d) = quad.to_sphere_circle();
    let m = cm.rotate_inverse(m);
    let scale = m.norm();
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::NumericalDegeneracy("degenerate sphere circle".into()));
    }
    let (m, d) = (m.scale(1.0 / scale), d / scale);
    let q = PlaneQuadric::from_sphere_circle(m, d);
    if q.a.abs() < POLE_TOL {
        let bn = q.b.norm();
        if bn == 0.0 {
            return Err(Error::NumericalDegeneracy("circle collapsed to the pole".into()));
        }
        return Ok(GenCircle::Halfplane {
            normal: q.b * (1.0 / bn),
            offset: -q.c / (2.0 * bn),
        });
    }
    let center = q.b * (-1.0 / q.a);
    let r2 = center.norm2() - q.c / q.a;
    if !(r2 > 0.0 && r2.is_finite()) {
        return Err(Error::NumericalDegeneracy(format!(
            "mapped circle has radius² = {r2}"
        )));
    }
    Ok(GenCircle::Circle {
        center,
        radius: r2.sqrt(),
    })
}

pub fn circumcircle(t: &Triangle) -> Result<Disk> {
    let [a, b, c] = t.pts;
    let (bx, by) = (b.x - a.x, b.y - a.y);
    let (cx, cy) = (c.x - a.x, c.y - a.y);
    let d = 2.0 * (bx * cy - by * cx);
    if d == 0.0 || !d.is_finite() {
        return Err(Error::DegenerateTriangle);
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    let center = Point2::new(a.x + ux, a.y + uy);
    Ok(Disk::new(t.ids[0], center, (ux * ux + uy * uy).sqrt()))
}

/// An element of a system being divided.
pub trait Item {
    /// Identity of an item; equal keys denote the same item.
    type Key: Ord + Copy + std::hash::Hash + std::fmt::Debug;
    fn key(&self) -> Self::Key;
    /// A representative point used when sampling separators.
    fn anchor(&self) -> Point2;
    fn classify(&self, s: &GenCircle, tol: f64) -> Result<Classification>;
    /// Whether two items have nonempty intersection (disks) or are adjacent
    /// (triangles of one triangulation).
    fn touches(&self, other: &Self) -> bool;
}

impl Item for Disk {
    type Key = u64;
    fn key(&self) -> u64 {
        self.id
    }

    fn anchor(&self) -> Point2 {
        self.center
    }

    fn classify(&self, s: &GenCircle, tol: f64) -> Result<Classification> {
        Ok(classify_disk(self, s, tol))
    }

    fn touches(&self, other: &Self) -> bool {
        self.intersects(other)
    }
}

impl Item for Triangle {
    type Key = [u64; 3];
    /// The sorted vertex ids.
    fn key(&self) -> [u64; 3] {
        let mut k = self.ids;
        k.sort_unstable();
        k
    }

    fn anchor(&self) -> Point2 {
        self.centroid()
    }

    fn classify(&self, s: &GenCircle, tol: f64) -> Result<Classification> {
        classify_triangle(self, s, tol)
    }

    /// Triangles of one triangulation touch when they share a vertex.
    fn touches(&self, other: &Self) -> bool {
        self.ids.iter().any(|v| other.ids.contains(v))
    }
}
