//! Closed-track centerline geometry: cumulative arclength, cubic
//! (Catmull-Rom) interpolation, and warm-started projection.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct Track {
    points: Vec<TrackPoint>,
    /// Cumulative chord arclength; s[0] = 0.
    s: Vec<f64>,
    pub half_width: f64,
    pub closed: bool,
    total_len: f64,
    /// Uniform-arclength cache of `(x, y, tan_x, tan_y)` used by the
    /// solver's hot path; see [`Track::center_tangent_fast`].
    grid: Vec<[f64; 4]>,
    grid_step: f64,
}

impl Track {
    pub fn from_waypoints(points: Vec<TrackPoint>, half_width: f64, closed: bool) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Config("track needs at least 4 waypoints".into()));
        }
        let mut s = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            if d <= 0.0 {
                return Err(Error::Config("track arclength must be strictly increasing".into()));
            }
            if d > half_width {
                return Err(Error::Config(format!(
                    "waypoint spacing {d:.4} exceeds half width {half_width:.4}"
                )));
            }
            s.push(s.last().unwrap() + d);
        }
        let mut total_len = *s.last().unwrap();
        if closed {
            let first = points[0];
            let last = *points.last().unwrap();
            let d = ((first.x - last.x).powi(2) + (first.y - last.y).powi(2)).sqrt();
            if d > half_width {
                return Err(Error::Config("closing segment longer than half width".into()));
            }
            total_len += d;
        }
        let mut track = Self {
            points,
            s,
            half_width,
            closed,
            total_len,
            grid: Vec::new(),
            grid_step: 0.0,
        };
        let n_grid = 4096;
        track.grid_step = total_len / n_grid as f64;
        track.grid = (0..=n_grid)
            .map(|i| {
                let sv = (i as f64 * track.grid_step).min(total_len);
                let p = track.position(sv);
                let (tx, ty) = track.tangent(sv);
                [p.x, p.y, tx, ty]
            })
            .collect();
        Ok(track)
    }

    /// Load a centerline CSV with header `x,y`.
    pub fn load_csv(path: &Path, half_width: f64, closed: bool) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?, half_width, closed)
    }

    pub fn parse_csv(text: &str, half_width: f64, closed: bool) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let x: f64 = rec[0].parse().map_err(|e| Error::Config(format!("track csv: {e}")))?;
            let y: f64 = rec[1].parse().map_err(|e| Error::Config(format!("track csv: {e}")))?;
            points.push(TrackPoint { x, y });
        }
        Self::from_waypoints(points, half_width, closed)
    }

    /// Circle of radius `r` with `n` waypoints; test geometry.
    pub fn circle(r: f64, n: usize, half_width: f64) -> Result<Self> {
        let pts = (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                TrackPoint {
                    x: r * t.cos(),
                    y: r * t.sin(),
                }
            })
            .collect();
        Self::from_waypoints(pts, half_width, true)
    }

    pub fn total_length(&self) -> f64 {
        self.total_len
    }

    pub fn num_waypoints(&self) -> usize {
        self.points.len()
    }

    fn wrap(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_len)
        } else {
            s.clamp(0.0, self.total_len)
        }
    }

    fn point(&self, i: isize) -> TrackPoint {
        let n = self.points.len() as isize;
        if self.closed {
            self.points[i.rem_euclid(n) as usize]
        } else {
            self.points[i.clamp(0, n - 1) as usize]
        }
    }

    /// Segment index and local parameter for an arclength value.
    fn locate(&self, s: f64) -> (usize, f64, f64) {
        let s = self.wrap(s);
        let n = self.points.len();
        // Past the stored cumulative values only on the closing segment.
        if s >= *self.s.last().unwrap() {
            let seg_len = self.total_len - self.s.last().unwrap();
            let u = if seg_len > 0.0 { (s - self.s.last().unwrap()) / seg_len } else { 0.0 };
            return (n - 1, u, seg_len.max(1e-12));
        }
        let idx = match self.s.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let idx = idx.min(n - 2);
        let seg_len = self.s[idx + 1] - self.s[idx];
        ((idx), (s - self.s[idx]) / seg_len, seg_len)
    }

    /// Centerline position at arclength `s` (Catmull-Rom).
    pub fn position(&self, s: f64) -> TrackPoint {
        let (i, u, _) = self.locate(s);
        let (p0, p1, p2, p3) = self.segment_points(i);
        TrackPoint {
            x: catmull_rom(p0.x, p1.x, p2.x, p3.x, u),
            y: catmull_rom(p0.y, p1.y, p2.y, p3.y, u),
        }
    }

    fn segment_points(&self, i: usize) -> (TrackPoint, TrackPoint, TrackPoint, TrackPoint) {
        let i = i as isize;
        (
            self.point(i - 1),
            self.point(i),
            self.point(i + 1),
            self.point(i + 2),
        )
    }

    /// Unit tangent of the centerline at arclength `s`.
    pub fn tangent(&self, s: f64) -> (f64, f64) {
        let (i, u, _) = self.locate(s);
        let (p0, p1, p2, p3) = self.segment_points(i);
        let dx = catmull_rom_d(p0.x, p1.x, p2.x, p3.x, u);
        let dy = catmull_rom_d(p0.y, p1.y, p2.y, p3.y, u);
        let n = (dx * dx + dy * dy).sqrt().max(1e-12);
        (dx / n, dy / n)
    }

    /// Heading angle of the tangent at `s`.
    pub fn tangent_angle(&self, s: f64) -> f64 {
        let (tx, ty) = self.tangent(s);
        ty.atan2(tx)
    }

    /// Centerline point and unit tangent `(x, y, tan_x, tan_y)` at `s`,
    /// linearly interpolated from the uniform-arclength cache. Sub-millimeter
    /// accuracy at a fraction of the exact lookup's cost; intended for the
    /// solver's inner loops.
    pub fn center_tangent_fast(&self, s: f64) -> [f64; 4] {
        let s = self.wrap(s);
        let t = s / self.grid_step;
        let i = (t as usize).min(self.grid.len() - 2);
        let frac = t - i as f64;
        let a = &self.grid[i];
        let b = &self.grid[i + 1];
        [
            a[0] + frac * (b[0] - a[0]),
            a[1] + frac * (b[1] - a[1]),
            a[2] + frac * (b[2] - a[2]),
            a[3] + frac * (b[3] - a[3]),
        ]
    }

    /// Signed lateral offset of `point` from the centerline at arclength `s`;
    /// positive to the left of the travel direction.
    pub fn lateral_error(&self, s: f64, x: f64, y: f64) -> f64 {
        let c = self.position(s);
        let (tx, ty) = self.tangent(s);
        -(x - c.x) * ty + (y - c.y) * tx
    }

    /// Project a point onto the centerline, warm-started from `s_hint`:
    /// coarse scan over a +-20% arclength window, then Newton refinement.
    pub fn project(&self, x: f64, y: f64, s_hint: f64) -> Result<(f64, f64)> {
        let window = 0.2 * self.total_len;
        let scan = 64;
        let mut best_s = self.wrap(s_hint);
        let mut best_d = f64::INFINITY;
        for k in 0..=scan {
            let s = self.wrap(s_hint - window + 2.0 * window * k as f64 / scan as f64);
            let p = self.position(s);
            let d = (p.x - x).powi(2) + (p.y - y).powi(2);
            if d < best_d {
                best_d = d;
                best_s = s;
            }
        }
        // Newton on g(s) = (r(s) - p) . r'(s).
        let mut s = best_s;
        let fd = 1e-5 * self.total_len.max(1.0);
        for iter in 0..50 {
            let g = self.proj_residual(s, x, y);
            let gp = (self.proj_residual(s + fd, x, y) - self.proj_residual(s - fd, x, y)) / (2.0 * fd);
            if gp.abs() < 1e-12 {
                break;
            }
            let step = (g / gp).clamp(-window / 2.0, window / 2.0);
            s = self.wrap(s - step);
            if step.abs() < 1e-10 {
                let e = self.lateral_error(s, x, y);
                return Ok((s, e));
            }
            if iter == 49 {
                return Err(Error::ProjectionDiverged { iters: 50 });
            }
        }
        Ok((s, self.lateral_error(s, x, y)))
    }

    fn proj_residual(&self, s: f64, x: f64, y: f64) -> f64 {
        let p = self.position(s);
        let (tx, ty) = self.tangent(s);
        (p.x - x) * tx + (p.y - y) * ty
    }
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, u: f64) -> f64 {
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
}

fn catmull_rom_d(p0: f64, p1: f64, p2: f64, p3: f64, u: f64) -> f64 {
    0.5 * ((-p0 + p2)
        + 2.0 * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u
        + 3.0 * (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u)
}

/// Default closed course: an oval with two chicanes, length about 11 m,
/// half width 0.2 m. Shipped as a waypoint CSV in the crate.
pub fn default_track() -> Track {
    Track::parse_csv(include_str!("../../data/default_track.csv"), 0.2, true)
        .expect("bundled track is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn circle_arclength() {
        let r = 2.0;
        let t = Track::circle(r, 1000, 0.2).unwrap();
        let expect = 2.0 * std::f64::consts::PI * r;
        assert!((t.total_length() - expect).abs() / expect <= 1e-3);
    }

    #[test]
    fn position_on_circle() {
        let t = Track::circle(1.0, 1000, 0.2).unwrap();
        let p = t.position(0.0);
        assert_relative_eq!(p.x, 1.0, epsilon = 1e-4);
        let quarter = t.total_length() / 4.0;
        let p = t.position(quarter);
        assert!(p.y > 0.99 && p.x.abs() < 0.01);
    }

    #[test]
    fn project_point_on_centerline() {
        let t = Track::circle(2.0, 800, 0.2).unwrap();
        let s_true = 3.0;
        let p = t.position(s_true);
        let (s, e) = t.project(p.x, p.y, s_true + 0.3).unwrap();
        assert!((s - s_true).abs() <= 1e-4);
        assert!(e.abs() <= 1e-6);
    }

    #[test]
    fn project_offset_along_normal() {
        let t = Track::circle(2.0, 800, 0.2).unwrap();
        let s0 = 5.0;
        let c = t.position(s0);
        let (tx, ty) = t.tangent(s0);
        // 0.1 m to the left of travel.
        let (px, py) = (c.x - 0.1 * ty, c.y + 0.1 * tx);
        let (_, e) = t.project(px, py, s0).unwrap();
        assert!((e - 0.1).abs() <= 1e-4, "e {e}");
        let (px, py) = (c.x + 0.1 * ty, c.y - 0.1 * tx);
        let (_, e) = t.project(px, py, s0).unwrap();
        assert!((e + 0.1).abs() <= 1e-4, "e {e}");
    }

    #[test]
    fn project_matches_dense_scan() {
        let t = default_track();
        for k in 0..10 {
            let s_true = t.total_length() * k as f64 / 10.0;
            let c = t.position(s_true);
            let (tx, ty) = t.tangent(s_true);
            let (px, py) = (c.x - 0.12 * ty, c.y + 0.12 * tx);

            // Brute-force nearest point over 10^4 arclength samples.
            let n = 10_000;
            let mut best = (0.0, f64::INFINITY);
            for i in 0..n {
                let s = t.total_length() * i as f64 / n as f64;
                let p = t.position(s);
                let d = (p.x - px).powi(2) + (p.y - py).powi(2);
                if d < best.1 {
                    best = (s, d);
                }
            }
            let (s, _) = t.project(px, py, s_true + 0.05 * t.total_length()).unwrap();
            let spacing = t.total_length() / n as f64;
            let mut diff = (s - best.0).abs();
            diff = diff.min(t.total_length() - diff);
            assert!(diff <= spacing, "diff {diff} spacing {spacing}");
        }
    }

    #[test]
    fn default_track_properties() {
        let t = default_track();
        assert!(t.closed);
        assert!((t.total_length() - 11.0).abs() < 1.5, "len {}", t.total_length());
        assert_eq!(t.half_width, 0.2);
    }

    #[test]
    fn rejects_sparse_waypoints() {
        let pts = vec![
            TrackPoint { x: 0.0, y: 0.0 },
            TrackPoint { x: 1.0, y: 0.0 },
            TrackPoint { x: 1.0, y: 1.0 },
            TrackPoint { x: 0.0, y: 1.0 },
        ];
        assert!(Track::from_waypoints(pts, 0.2, true).is_err());
    }
}
