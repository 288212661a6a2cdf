//! Oriented-rectangle geometry: separating-axis overlap/penetration and exact
//! separation distance.

use serde::{Deserialize, Serialize};

use crate::scene::AgentState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentDims {
    pub length: f64,
    pub width: f64,
}

impl AgentDims {
    pub fn new(length: f64, width: f64) -> Self {
        Self { length, width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 2], heading: f64, dims: AgentDims) -> Self {
        Self { center, heading, half_length: dims.length / 2.0, half_width: dims.width / 2.0 }
    }

    pub fn from_state(s: &AgentState, dims: AgentDims) -> Self {
        Self::new([s.x, s.y], s.heading, dims)
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let (l, w) = (self.half_length, self.half_width);
        let at = |a: f64, b: f64| [self.center[0] + u[0] * a + v[0] * b, self.center[1] + u[1] * a + v[1] * b];
        [at(l, w), at(-l, w), at(-l, -w), at(l, -w)]
    }

    fn radius_on(&self, axis: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        self.half_length * (u[0] * axis[0] + u[1] * axis[1]).abs() + self.half_width * (v[0] * axis[0] + v[1] * axis[1]).abs()
    }
}

/// Largest projected gap over the four candidate separating axes. Negative
/// means every axis overlaps and the magnitude is the smallest penetration.
pub fn sat_gap(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d = [b.center[0] - a.center[0], b.center[1] - a.center[1]];
    let mut best = f64::NEG_INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let dist = (d[0] * axis[0] + d[1] * axis[1]).abs();
        best = best.max(dist - a.radius_on(axis) - b.radius_on(axis));
    }
    best
}

pub fn overlaps(a: &OrientedBox, b: &OrientedBox) -> bool {
    sat_gap(a, b) < 0.0
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

/// Signed distance between two rectangles: exact Euclidean separation when
/// disjoint, minus the smallest separating-axis penetration when overlapping.
pub fn signed_distance(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let gap = sat_gap(a, b);
    if gap < 0.0 {
        return gap;
    }
    let (ca, cb) = (a.corners(), b.corners());
    let mut best = f64::INFINITY;
    for (p, poly) in ca.iter().map(|p| (p, &cb)).chain(cb.iter().map(|p| (p, &ca))) {
        for k in 0..4 {
            best = best.min(point_segment_distance(*p, poly[k], poly[(k + 1) % 4]));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, h: f64) -> OrientedBox {
        OrientedBox::new([x, y], h, AgentDims::new(4.0, 2.0))
    }

    #[test]
    fn lateral_separation() {
        assert!((signed_distance(&bx(0.0, 0.0, 0.0), &bx(0.0, 10.0, 0.0)) - 8.0).abs() < 1e-12);
        assert!((signed_distance(&bx(0.0, 0.0, 0.0), &bx(10.0, 0.0, 0.0)) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_boxes_penetrate() {
        let d = signed_distance(&bx(1.0, 1.0, 0.3), &bx(1.0, 1.0, 0.3));
        assert!(d < 0.0);
        assert!((d + 2.0).abs() < 1e-12);
        assert!(overlaps(&bx(1.0, 1.0, 0.3), &bx(1.0, 1.0, 0.3)));
    }

    #[test]
    fn corner_to_corner_is_euclidean() {
        // offset diagonally so the nearest features are two corners
        let d = signed_distance(&bx(0.0, 0.0, 0.0), &bx(7.0, 5.0, 0.0));
        assert!((d - (3.0f64).hypot(3.0)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_translation_invariant() {
        let a = bx(0.3, -1.0, 0.4);
        let b = bx(3.5, 2.0, -1.1);
        let d = signed_distance(&a, &b);
        assert!((d - signed_distance(&b, &a)).abs() < 1e-12);
        let shift = |o: &OrientedBox| OrientedBox { center: [o.center[0] + 50.0, o.center[1] - 20.0], ..*o };
        assert!((d - signed_distance(&shift(&a), &shift(&b))).abs() < 1e-9);
    }
}
