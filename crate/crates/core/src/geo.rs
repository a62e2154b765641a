//! Spherical and local-planar geometry helpers.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LngLat {
    pub lng: f64,
    pub lat: f64,
}

impl LngLat {
    pub fn new(lng: f64, lat: f64) -> Self {
        Self { lng, lat }
    }

    pub fn is_valid(&self) -> bool {
        (-180.0..=180.0).contains(&self.lng) && (-90.0..=90.0).contains(&self.lat)
    }

    pub fn lerp(self, other: LngLat, t: f64) -> LngLat {
        LngLat::new(self.lng + (other.lng - self.lng) * t, self.lat + (other.lat - self.lat) * t)
    }
}

/// Great-circle distance in meters.
pub fn haversine(a: LngLat, b: LngLat) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lng - a.lng).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection to meters around a reference point.
#[derive(Clone, Copy, Debug)]
pub struct LocalFrame {
    origin: LngLat,
    m_per_deg_lng: f64,
    m_per_deg_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: LngLat) -> Self {
        let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self { origin, m_per_deg_lng: m_per_deg_lat * origin.lat.to_radians().cos(), m_per_deg_lat }
    }

    pub fn to_xy(&self, p: LngLat) -> (f64, f64) {
        ((p.lng - self.origin.lng) * self.m_per_deg_lng, (p.lat - self.origin.lat) * self.m_per_deg_lat)
    }

    pub fn to_lnglat(&self, x: f64, y: f64) -> LngLat {
        LngLat::new(self.origin.lng + x / self.m_per_deg_lng, self.origin.lat + y / self.m_per_deg_lat)
    }
}

/// Closest point of segment `a`–`b` to `p` in planar coordinates, as
/// (distance, parameter t ∈ [0, 1]).
pub fn point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt(), t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_degree_of_latitude() {
        let d = haversine(LngLat::new(0.0, 0.0), LngLat::new(0.0, 1.0));
        let closed_form = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((d - closed_form).abs() < 1e-6);
        assert!((d - 111_195.0).abs() < 1.0);
    }

    #[test]
    fn haversine_is_symmetric_and_zero_on_diagonal() {
        let a = LngLat::new(104.07, 30.66);
        let b = LngLat::new(104.09, 30.61);
        assert_eq!(haversine(a, a), 0.0);
        assert_eq!(haversine(a, b), haversine(b, a));
    }

    #[test]
    fn local_frame_round_trips() {
        let f = LocalFrame::new(LngLat::new(104.0, 30.0));
        let p = LngLat::new(104.013, 29.991);
        let (x, y) = f.to_xy(p);
        let q = f.to_lnglat(x, y);
        assert!((p.lng - q.lng).abs() < 1e-12 && (p.lat - q.lat).abs() < 1e-12);
        assert!((x.hypot(y) - haversine(f.to_lnglat(0.0, 0.0), p)).abs() < 0.5);
    }
}
