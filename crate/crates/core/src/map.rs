//! Vector semantic map and its agent-centric raster.
//!
//! Raster layout: `[channel][row][col]`, 100x100 cells of 0.5 m. Columns run
//! along the agent heading (column 0 is 25 m behind), rows run across it
//! (row 0 is 25 m to the left). Channels:
//!
//! 0. drivable area mask
//! 1. lane occupancy mask, cells within [`LANE_HALF_WIDTH`] of a centerline
//! 2. cosine of the nearest lane's heading relative to the agent, 0 off-lane

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Pose2;

pub const RASTER_SIZE: usize = 100;
pub const RASTER_RESOLUTION: f64 = 0.5;
pub const RASTER_CHANNELS: usize = 3;
pub const LANE_HALF_WIDTH: f64 = 1.75;

const HALF_EXTENT: f64 = RASTER_SIZE as f64 * RASTER_RESOLUTION / 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("lane {0} has fewer than 2 points")]
    ShortLane(usize),
    #[error("lane {lane} repeats point {point}")]
    DegenerateSegment { lane: usize, point: usize },
    #[error("polygon {0} has fewer than 3 vertices")]
    ShortPolygon(usize),
    #[error("non-finite coordinate in map")]
    NonFinite,
}

/// Directed lane centerline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lane {
    pub points: Vec<[f64; 2]>,
}

impl Lane {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    /// Heading at each point: the direction of the outgoing segment, or of
    /// the incoming one at the last point.
    pub fn headings(&self) -> Vec<f64> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
                let [x0, y0] = self.points[a];
                let [x1, y1] = self.points[b];
                (y1 - y0).atan2(x1 - x0)
            })
            .collect()
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

/// Drivable polygons plus lane centerlines, in global coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticMap {
    pub drivable: Vec<Vec<[f64; 2]>>,
    pub lanes: Vec<Lane>,
}

impl SemanticMap {
    pub fn validate(&self) -> Result<(), MapError> {
        for (i, poly) in self.drivable.iter().enumerate() {
            if poly.len() < 3 {
                return Err(MapError::ShortPolygon(i));
            }
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.points.len() < 2 {
                return Err(MapError::ShortLane(i));
            }
            for (j, w) in lane.points.windows(2).enumerate() {
                if w[0] == w[1] {
                    return Err(MapError::DegenerateSegment { lane: i, point: j + 1 });
                }
            }
        }
        let finite = self
            .drivable
            .iter()
            .flatten()
            .chain(self.lanes.iter().flat_map(|l| l.points.iter()))
            .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return Err(MapError::NonFinite);
        }
        Ok(())
    }

    /// The same map under a rigid transform.
    pub fn transformed(&self, t: &Pose2) -> SemanticMap {
        SemanticMap {
            drivable: self
                .drivable
                .iter()
                .map(|p| p.iter().map(|&q| t.point_from_frame(q)).collect())
                .collect(),
            lanes: self
                .lanes
                .iter()
                .map(|l| Lane::new(l.points.iter().map(|&q| t.point_from_frame(q)).collect()))
                .collect(),
        }
    }
}

/// Agent-centric map raster; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MapRaster {
    data: Vec<f64>,
}

impl MapRaster {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; RASTER_CHANNELS * RASTER_SIZE * RASTER_SIZE],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * RASTER_SIZE + row) * RASTER_SIZE + col]
    }

    fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        self.data[(channel * RASTER_SIZE + row) * RASTER_SIZE + col] = v;
    }

    /// Center of a cell in the agent frame.
    pub fn cell_center(row: usize, col: usize) -> [f64; 2] {
        [
            -HALF_EXTENT + (col as f64 + 0.5) * RASTER_RESOLUTION,
            HALF_EXTENT - (row as f64 + 0.5) * RASTER_RESOLUTION,
        ]
    }
}

/// Inclusive range of cell indices whose centers may lie in `[lo, hi]`
/// along the column (x) axis.
fn col_range(lo: f64, hi: f64) -> Option<(usize, usize)> {
    let first = ((lo + HALF_EXTENT) / RASTER_RESOLUTION - 0.5).ceil().max(0.0);
    let last = ((hi + HALF_EXTENT) / RASTER_RESOLUTION - 0.5)
        .floor()
        .min(RASTER_SIZE as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

/// Same as [`col_range`] along the row (y) axis, where rows grow toward -y.
fn row_range(lo: f64, hi: f64) -> Option<(usize, usize)> {
    let first = ((HALF_EXTENT - hi) / RASTER_RESOLUTION - 0.5).ceil().max(0.0);
    let last = ((HALF_EXTENT - lo) / RASTER_RESOLUTION - 0.5)
        .floor()
        .min(RASTER_SIZE as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

fn bbox(points: &[[f64; 2]], pad: f64) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        b.0 = b.0.min(p[0]);
        b.1 = b.1.min(p[1]);
        b.2 = b.2.max(p[0]);
        b.3 = b.3.max(p[1]);
    }
    (b.0 - pad, b.1 - pad, b.2 + pad, b.3 + pad)
}

/// Even-odd point-in-polygon test.
fn inside(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut odd = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                odd = !odd;
            }
        }
        j = i;
    }
    odd
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    ex * ex + ey * ey
}

/// Renders `map` around `pose` (the agent's frame).
pub fn rasterize_map(map: &SemanticMap, pose: &Pose2) -> MapRaster {
    let mut raster = MapRaster::zeros();
    for poly in &map.drivable {
        if poly.len() < 3 {
            continue;
        }
        let local: Vec<[f64; 2]> = poly.iter().map(|&p| pose.point_to_frame(p)).collect();
        let (x0, y0, x1, y1) = bbox(&local, 0.0);
        let (Some((c0, c1)), Some((r0, r1))) = (col_range(x0, x1), row_range(y0, y1)) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                if inside(&local, MapRaster::cell_center(row, col)) {
                    raster.set(0, row, col, 1.0);
                }
            }
        }
    }

    let mut best = vec![f64::INFINITY; RASTER_SIZE * RASTER_SIZE];
    let hw2 = LANE_HALF_WIDTH * LANE_HALF_WIDTH;
    for lane in &map.lanes {
        let headings = lane.headings();
        let local: Vec<[f64; 2]> = lane.points.iter().map(|&p| pose.point_to_frame(p)).collect();
        for (s, seg) in local.windows(2).enumerate() {
            let (x0, y0, x1, y1) = bbox(seg, LANE_HALF_WIDTH);
            let (Some((c0, c1)), Some((r0, r1))) = (col_range(x0, x1), row_range(y0, y1)) else {
                continue;
            };
            let rel_cos = (headings[s] - pose.theta).cos();
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let d2 = segment_distance_sq(MapRaster::cell_center(row, col), seg[0], seg[1]);
                    let cell = row * RASTER_SIZE + col;
                    if d2 <= hw2 && d2 < best[cell] {
                        best[cell] = d2;
                        raster.set(1, row, col, 1.0);
                        raster.set(2, row, col, rel_cos);
                    }
                }
            }
        }
    }
    raster
}
