//! Synthetic road maps: lane centerlines with topology links and oriented road
//! edges (drivable region on the left of travel direction).

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Closest-point query result against a polyline.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub segment: usize,
    pub point: Point,
    pub distance: f64,
    /// Arc length from the polyline start to `point`.
    pub s: f64,
    /// Positive when the query lies left of the segment direction.
    pub side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParam("polyline needs at least two points".into()));
        }
        if points.windows(2).any(|w| norm(sub(w[1], w[0])) == 0.0) {
            return Err(Error::InvalidParam("polyline has repeated consecutive points".into()));
        }
        Ok(Self { points })
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| norm(sub(w[1], w[0]))).sum()
    }

    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection { segment: 0, point: self.points[0], distance: f64::INFINITY, s: 0.0, side: 0.0 };
        let mut s_acc = 0.0;
        for (i, w) in self.points.windows(2).enumerate() {
            let d = sub(w[1], w[0]);
            let len = norm(d);
            let t = (((p[0] - w[0][0]) * d[0] + (p[1] - w[0][1]) * d[1]) / (len * len)).clamp(0.0, 1.0);
            let q = lerp(w[0], w[1], t);
            let dist = norm(sub(p, q));
            if dist < best.distance {
                let cross = d[0] * (p[1] - w[0][1]) - d[1] * (p[0] - w[0][0]);
                best = Projection { segment: i, point: q, distance: dist, s: s_acc + t * len, side: cross.signum() };
            }
            s_acc += len;
        }
        best
    }

    /// Point and tangent heading at arc length `s`, extrapolating linearly past
    /// either end.
    pub fn sample(&self, s: f64) -> (Point, f64) {
        let n = self.points.len();
        let mut acc = 0.0;
        for (i, w) in self.points.windows(2).enumerate() {
            let d = sub(w[1], w[0]);
            let len = norm(d);
            if s <= acc + len || i == n - 2 {
                let t = if s < 0.0 && i == 0 { s / len } else { (s - acc) / len };
                return (lerp(w[0], w[1], t), d[1].atan2(d[0]));
            }
            acc += len;
        }
        unreachable!("polyline has at least one segment")
    }

    /// Resamples at (approximately) uniform spacing, endpoints included.
    pub fn resample(&self, spacing: f64) -> Vec<(Point, f64)> {
        let len = self.length();
        let n = ((len / spacing).ceil() as usize).max(1);
        (0..=n).map(|i| self.sample(len * i as f64 / n as f64)).collect()
    }

    /// Offset by `d` along the left normal of each vertex (averaged at joints).
    pub fn offset(&self, d: f64) -> Polyline {
        let n = self.points.len();
        let pts = (0..n)
            .map(|i| {
                let a = self.points[i.saturating_sub(1)];
                let b = self.points[(i + 1).min(n - 1)];
                let t = sub(b, a);
                let l = norm(t);
                [self.points[i][0] - t[1] / l * d, self.points[i][1] + t[0] / l * d]
            })
            .collect();
        Polyline { points: pts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: usize,
    pub centerline: Polyline,
    pub width: f64,
    pub successors: Vec<usize>,
    /// Same-direction adjacent lanes.
    pub neighbors: Vec<usize>,
    pub kind: LaneKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Through,
    /// Turn/straight connector inside an intersection box.
    Connector,
    OnRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGraph {
    pub lanes: Vec<Lane>,
    pub road_edges: Vec<Polyline>,
    /// Axis-aligned intersection box `[min_x, min_y, max_x, max_y]`, if any.
    #[serde(default)]
    pub intersection: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum Layout {
    Straight { length: f64, lanes: usize, width: f64 },
    TwoLane { length: f64, width: f64 },
    CrossIntersection { arm: f64, width: f64 },
    MergeRamp { length: f64, width: f64, merge_x: f64 },
}

impl MapGraph {
    pub fn lane(&self, id: usize) -> &Lane {
        &self.lanes[id]
    }

    /// Signed distance from `p` to the nearest road edge; positive on the
    /// drivable side. `+∞` when the map has no edges.
    pub fn edge_signed_distance(&self, p: Point) -> f64 {
        let mut best: Option<Projection> = None;
        for e in &self.road_edges {
            let pr = e.project(p);
            // equidistant edges (shared corners) resolve towards the drivable side
            let better = best.is_none_or(|b| {
                pr.distance < b.distance - 1e-12 || (pr.distance <= b.distance + 1e-12 && pr.side > b.side)
            });
            if better {
                best = Some(pr);
            }
        }
        match best {
            None => f64::INFINITY,
            Some(b) if b.side < 0.0 => -b.distance,
            Some(b) => b.distance,
        }
    }

    /// Lane whose centerline is closest to `p` and whose direction agrees with
    /// `heading` (within 90°). Returns (lane id, lateral distance).
    pub fn nearest_lane(&self, p: Point, heading: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for lane in &self.lanes {
            let pr = lane.centerline.project(p);
            let (_, h) = lane.centerline.sample(pr.s);
            if crate::scene::wrap_angle(h - heading).abs() > FRAC_PI_2 {
                continue;
            }
            if best.is_none_or(|(_, d)| pr.distance < d) {
                best = Some((lane.id, pr.distance));
            }
        }
        best
    }

    pub fn in_intersection(&self, p: Point) -> bool {
        self.intersection
            .is_some_and(|[x0, y0, x1, y1]| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1)
    }

    /// Lane centerline samples `(point, heading)` used as map features.
    pub fn lane_points(&self, spacing: f64) -> Vec<(Point, f64)> {
        self.lanes.iter().flat_map(|l| l.centerline.resample(spacing)).collect()
    }

    /// Applies a rigid transform to every coordinate.
    pub fn transformed(&self, f: impl Fn(Point) -> Point) -> MapGraph {
        let tf = |pl: &Polyline| Polyline { points: pl.points.iter().map(|&p| f(p)).collect() };
        MapGraph {
            lanes: self.lanes.iter().map(|l| Lane { centerline: tf(&l.centerline), ..l.clone() }).collect(),
            road_edges: self.road_edges.iter().map(tf).collect(),
            intersection: None,
        }
    }
}

fn line(a: Point, b: Point) -> Polyline {
    Polyline { points: vec![a, b] }
}

fn bezier(p0: Point, c: Point, p1: Point, n: usize) -> Polyline {
    let pts = (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            [
                u * u * p0[0] + 2.0 * u * t * c[0] + t * t * p1[0],
                u * u * p0[1] + 2.0 * u * t * c[1] + t * t * p1[1],
            ]
        })
        .collect();
    Polyline { points: pts }
}

fn check_positive(vals: &[(&str, f64)]) -> Result<()> {
    for (name, v) in vals {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Deterministic map construction for each layout.
pub fn build_map(layout: &Layout) -> Result<MapGraph> {
    match *layout {
        Layout::Straight { length, lanes, width } => {
            check_positive(&[("length", length), ("width", width)])?;
            if lanes == 0 {
                return Err(Error::InvalidParam("lanes must be at least 1".into()));
            }
            let lane_list = (0..lanes)
                .map(|i| {
                    let y = i as f64 * width;
                    let mut neighbors = Vec::new();
                    if i > 0 {
                        neighbors.push(i - 1);
                    }
                    if i + 1 < lanes {
                        neighbors.push(i + 1);
                    }
                    Lane {
                        id: i,
                        centerline: line([0.0, y], [length, y]),
                        width,
                        successors: vec![],
                        neighbors,
                        kind: LaneKind::Through,
                    }
                })
                .collect();
            let top = (lanes as f64 - 0.5) * width;
            Ok(MapGraph {
                lanes: lane_list,
                road_edges: vec![line([0.0, -width / 2.0], [length, -width / 2.0]), line([length, top], [0.0, top])],
                intersection: None,
            })
        }
        Layout::TwoLane { length, width } => {
            check_positive(&[("length", length), ("width", width)])?;
            let h = width / 2.0;
            Ok(MapGraph {
                lanes: vec![
                    Lane { id: 0, centerline: line([0.0, -h], [length, -h]), width, successors: vec![], neighbors: vec![], kind: LaneKind::Through },
                    Lane { id: 1, centerline: line([length, h], [0.0, h]), width, successors: vec![], neighbors: vec![], kind: LaneKind::Through },
                ],
                road_edges: vec![line([0.0, -width], [length, -width]), line([length, width], [0.0, width])],
                intersection: None,
            })
        }
        Layout::CrossIntersection { arm, width } => {
            check_positive(&[("arm", arm), ("width", width)])?;
            build_cross(arm, width)
        }
        Layout::MergeRamp { length, width, merge_x } => {
            check_positive(&[("length", length), ("width", width), ("merge_x", merge_x)])?;
            if merge_x <= 80.0 || merge_x >= length {
                return Err(Error::InvalidParam("merge_x must lie in (80, length)".into()));
            }
            build_merge(length, width, merge_x)
        }
    }
}

/// Arm order: east, north, west, south. Lane ids: incoming `0..4`, outgoing
/// `4..8`, then connectors `8..20` (three per incoming arm: right, straight,
/// left).
fn build_cross(arm: f64, w: f64) -> Result<MapGraph> {
    let dirs: [(Point, Point); 4] = [
        ([1.0, 0.0], [0.0, 1.0]),
        ([0.0, 1.0], [-1.0, 0.0]),
        ([-1.0, 0.0], [0.0, -1.0]),
        ([0.0, -1.0], [1.0, 0.0]),
    ];
    let at = |u: Point, n: Point, along: f64, lat: f64| [u[0] * along + n[0] * lat, u[1] * along + n[1] * lat];
    let mut lanes = Vec::new();
    for (k, &(u, n)) in dirs.iter().enumerate() {
        lanes.push(Lane {
            id: k,
            centerline: line(at(u, n, w + arm, w / 2.0), at(u, n, w, w / 2.0)),
            width: w,
            successors: vec![],
            neighbors: vec![],
            kind: LaneKind::Through,
        });
    }
    for (k, &(u, n)) in dirs.iter().enumerate() {
        lanes.push(Lane {
            id: 4 + k,
            centerline: line(at(u, n, w, -w / 2.0), at(u, n, w + arm, -w / 2.0)),
            width: w,
            successors: vec![],
            neighbors: vec![],
            kind: LaneKind::Through,
        });
    }
    for a in 0..4 {
        let (ua, na) = dirs[a];
        let start = at(ua, na, w, w / 2.0);
        // right turn exits on arm a+1, straight on a+2, left on a+3 (counter-clockwise arm order)
        for turn in [1usize, 2, 3] {
            let b = (a + turn) % 4;
            let (ub, nb) = dirs[b];
            let end = at(ub, nb, w, -w / 2.0);
            let centerline = if turn == 2 {
                line(start, end)
            } else {
                // intersection of the incoming ray (direction -ua) and outgoing ray (direction ub)
                let d0 = [-ua[0], -ua[1]];
                let cross = d0[0] * ub[1] - d0[1] * ub[0];
                let diff = sub(end, start);
                let t = (diff[0] * ub[1] - diff[1] * ub[0]) / cross;
                bezier(start, [start[0] + d0[0] * t, start[1] + d0[1] * t], end, 12)
            };
            let id = lanes.len();
            lanes.push(Lane { id, centerline, width: w, successors: vec![4 + b], neighbors: vec![], kind: LaneKind::Connector });
            lanes[a].successors.push(id);
        }
    }
    let mut edges = Vec::new();
    for &(u, n) in &dirs {
        edges.push(line(at(u, n, w + arm, w), at(u, n, w, w)));
        edges.push(line(at(u, n, w, -w), at(u, n, w + arm, -w)));
    }
    Ok(MapGraph { lanes, road_edges: edges, intersection: Some([-w, -w, w, w]) })
}

/// Lane ids: 0 main upstream, 1 main downstream, 2 on-ramp.
fn build_merge(length: f64, w: f64, merge_x: f64) -> Result<MapGraph> {
    let ramp_start = [merge_x - 70.0, -20.0];
    let ramp = bezier(ramp_start, [merge_x - 30.0, 0.0], [merge_x, 0.0], 16);
    let lanes = vec![
        Lane { id: 0, centerline: line([0.0, 0.0], [merge_x, 0.0]), width: w, successors: vec![1], neighbors: vec![], kind: LaneKind::Through },
        Lane { id: 1, centerline: line([merge_x, 0.0], [length, 0.0]), width: w, successors: vec![], neighbors: vec![], kind: LaneKind::Through },
        Lane { id: 2, centerline: ramp.clone(), width: w, successors: vec![1], neighbors: vec![], kind: LaneKind::OnRamp },
    ];
    let h = w / 2.0;
    // ramp's left boundary runs until it meets the main road's south edge (the gore)
    let left = ramp.offset(h);
    let mut gore_pts: Vec<Point> = Vec::new();
    let mut gore_x = merge_x;
    for wpair in left.points.windows(2) {
        gore_pts.push(wpair[0]);
        if wpair[1][1] >= -h {
            let t = (-h - wpair[0][1]) / (wpair[1][1] - wpair[0][1]);
            let g = lerp(wpair[0], wpair[1], t);
            gore_x = g[0];
            gore_pts.push(g);
            break;
        }
    }
    gore_pts.reverse();
    gore_pts.dedup();
    let mut outer: Vec<Point> = ramp.offset(-h).points;
    outer.push([length, -h]);
    outer.dedup();
    Ok(MapGraph {
        lanes,
        road_edges: vec![
            line([length, h], [0.0, h]),
            line([0.0, -h], [gore_x, -h]),
            Polyline::new(gore_pts)?,
            Polyline::new(outer)?,
        ],
        intersection: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_layout() {
        let m = build_map(&Layout::Straight { length: 200.0, lanes: 2, width: 3.5 }).unwrap();
        assert_eq!(m.lanes.len(), 2);
        assert_eq!(m.road_edges.len(), 2);
        let y0 = m.lanes[0].centerline.points[0][1];
        let y1 = m.lanes[1].centerline.points[0][1];
        assert!(((y1 - y0) - 3.5).abs() < 1e-12);
        // on the centerline adjacent to the right edge
        assert!((m.edge_signed_distance([50.0, 0.0]) - 1.75).abs() < 1e-12);
        assert!((m.edge_signed_distance([50.0, -3.75]) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_layout() {
        let m = build_map(&Layout::CrossIntersection { arm: 80.0, width: 3.5 }).unwrap();
        assert_eq!(m.road_edges.len(), 8);
        assert_eq!(m.lanes.len(), 20);
        for a in 0..4 {
            assert_eq!(m.lanes[a].successors.len(), 3);
        }
        assert!(m.edge_signed_distance([0.0, 0.0]) > 0.0);
        assert!(m.edge_signed_distance([10.0, 10.0]) < 0.0);
        assert!(m.edge_signed_distance([40.0, 1.75]) > 0.0);
        // connectors must stay on the road
        for lane in &m.lanes {
            for (p, _) in lane.centerline.resample(0.5) {
                assert!(m.edge_signed_distance(p) > 1.0, "lane {} leaves road at {p:?}: {}", lane.id, m.edge_signed_distance(p));
            }
        }
    }

    #[test]
    fn merge_layout() {
        let m = build_map(&Layout::MergeRamp { length: 300.0, width: 3.5, merge_x: 150.0 }).unwrap();
        assert_eq!(m.lanes[2].successors, vec![1]);
        assert_eq!(m.lanes[0].successors, vec![1]);
        for lane in &m.lanes {
            for (p, _) in lane.centerline.resample(1.0) {
                assert!(m.edge_signed_distance(p) > 0.5, "lane {} at {p:?}", lane.id);
            }
        }
    }

    #[test]
    fn invalid_params() {
        assert!(build_map(&Layout::Straight { length: -1.0, lanes: 2, width: 3.5 }).is_err());
        assert!(build_map(&Layout::Straight { length: 10.0, lanes: 0, width: 3.5 }).is_err());
        assert!(build_map(&Layout::CrossIntersection { arm: 80.0, width: 0.0 }).is_err());
    }

    #[test]
    fn edge_sign_flips_when_crossing() {
        let m = build_map(&Layout::TwoLane { length: 100.0, width: 3.5 }).unwrap();
        let mut prev = m.edge_signed_distance([30.0, 0.0]);
        for i in 1..=2000 {
            let y = -(i as f64) * 0.005;
            let d = m.edge_signed_distance([30.0, y]);
            assert!((d - (y + 3.5)).abs() < 1e-12);
            if prev > 0.0 && d <= 0.0 {
                assert!((y + 3.5).abs() <= 0.005 + 1e-12);
            }
            prev = d;
        }
    }
}
