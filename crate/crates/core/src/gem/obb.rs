//! Minimum-area oriented bounding boxes from a projection axis.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{canonical_frame, Mat3, Vec3};

pub type Vec2 = Vector2<f64>;

/// Oriented bounding box. Column `i` of `orientation` is the axis of
/// `extents[i]`; extents are full side lengths, descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec3,
    pub orientation: Mat3,
    pub extents: Vec3,
}

impl Obb {
    /// Largest distance by which `p` lies outside the box (0 inside).
    pub fn excess(&self, p: &Vec3) -> f64 {
        let local = self.orientation.transpose() * (p - self.center);
        (0..3)
            .map(|i| local[i].abs() - 0.5 * self.extents[i])
            .fold(0.0, f64::max)
    }
}

fn cross2(o: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, without
/// collinear vertices.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Minimum-area rectangle enclosing a convex polygon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2 {
    pub center: Vec2,
    /// Unit direction of the first side.
    pub direction: Vec2,
    /// Side lengths along `direction` and its left normal.
    pub sides: Vec2,
}

impl Rect2 {
    pub fn area(&self) -> f64 {
        self.sides.x * self.sides.y
    }
}

/// Rotating calipers over a counter-clockwise hull: for every hull edge the
/// flush rectangle is measured with three antipodal pointers that only move
/// forward, giving the minimum in O(h).
pub fn min_area_rect(hull: &[Vec2]) -> Rect2 {
    match hull.len() {
        0 => Rect2 {
            center: Vec2::zeros(),
            direction: Vec2::x(),
            sides: Vec2::zeros(),
        },
        1 => Rect2 {
            center: hull[0],
            direction: Vec2::x(),
            sides: Vec2::zeros(),
        },
        2 => {
            let d = hull[1] - hull[0];
            let len = d.norm();
            Rect2 {
                center: (hull[0] + hull[1]) * 0.5,
                direction: if len > 0.0 { d / len } else { Vec2::x() },
                sides: Vec2::new(len, 0.0),
            }
        }
        h => {
            let at = |i: usize| hull[i % h];
            // Pointers to the extreme vertices in +d, +n and -d; they only
            // advance, each at most one full turn.
            let (mut right, mut top, mut left) = (1usize, 1usize, 1usize);
            let mut best: Option<Rect2> = None;
            for i in 0..h {
                let e = at(i + 1) - at(i);
                let d = e / e.norm();
                let n = Vec2::new(-d.y, d.x);
                right = right.max(i + 1);
                while right < i + h && d.dot(&at(right + 1)) >= d.dot(&at(right)) {
                    right += 1;
                }
                top = top.max(right);
                while top < i + h && n.dot(&at(top + 1)) >= n.dot(&at(top)) {
                    top += 1;
                }
                left = left.max(top);
                while left < i + h && d.dot(&at(left + 1)) <= d.dot(&at(left)) {
                    left += 1;
                }
                let rect = flush_rect(d, [at(i), at(i + 1)], at(right), at(top), at(left));
                if best.as_ref().map_or(true, |b| rect.area() < b.area()) {
                    best = Some(rect);
                }
            }
            best.unwrap()
        }
    }
}

/// Rectangle with one side along unit `d`, bounded by the given support
/// points: the `base` edge on the flush side, `top` opposite it, and
/// `right`/`left` extreme along `±d`.
pub fn flush_rect(d: Vec2, base: [Vec2; 2], right: Vec2, top: Vec2, left: Vec2) -> Rect2 {
    let n = Vec2::new(-d.y, d.x);
    let (dmin, dmax) = (d.dot(&left), d.dot(&right));
    // Both endpoints, since rounding can put either one lower.
    let (nmin, nmax) = (n.dot(&base[0]).min(n.dot(&base[1])), n.dot(&top));
    Rect2 {
        center: d * (0.5 * (dmin + dmax)) + n * (0.5 * (nmin + nmax)),
        direction: d,
        sides: Vec2::new(dmax - dmin, nmax - nmin),
    }
}

/// Orthonormal basis `(u, v)` of the plane orthogonal to `axis`.
pub fn plane_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let a = axis.normalize();
    let helper = if a.x.abs() <= a.y.abs() && a.x.abs() <= a.z.abs() {
        Vec3::x()
    } else if a.y.abs() <= a.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let u = a.cross(&helper).normalize();
    (u, a.cross(&u))
}

/// Fits the 3D box whose cross-section orthogonal to `axis` is the
/// minimum-area rectangle of the projected points.
pub fn fit_obb(points: &[Vec3], axis: &Vec3) -> Result<Obb> {
    if points.is_empty() {
        return Err(Error::Empty("oriented bounding box needs at least one point"));
    }
    let a = axis.normalize();
    let (u, v) = plane_basis(&a);
    let projected: Vec<Vec2> = points.iter().map(|p| Vec2::new(u.dot(p), v.dot(p))).collect();
    let rect = min_area_rect(&convex_hull(&projected));
    let (hmin, hmax) = points
        .iter()
        .map(|p| a.dot(p))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| (lo.min(h), hi.max(h)));

    let d3 = u * rect.direction.x + v * rect.direction.y;
    let n3 = a.cross(&d3);
    let center = u * rect.center.x + v * rect.center.y + a * (0.5 * (hmin + hmax));

    let mut axes = [(rect.sides.x, d3), (rect.sides.y, n3), (hmax - hmin, a)];
    axes.sort_by(|x, y| y.0.total_cmp(&x.0));
    let orientation = canonical_frame(axes[0].1, axes[1].1);
    Ok(Obb {
        center,
        orientation,
        extents: Vec3::new(axes[0].0, axes[1].0, axes[2].0),
    })
}
