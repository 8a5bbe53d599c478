//! Great-circle distance and idealized fiber propagation delay.
//!
//! Distances use the haversine formula on a spherical Earth. Delays are
//! one-way; callers that need a round-trip bound double them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, km/s.
pub const LIGHT_SPEED_KM_S: f64 = 299_792.458;
/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;
/// Signal speed in optical fiber relative to vacuum.
pub const FIBER_FACTOR: f64 = 2.0 / 3.0;

/// A point on the globe in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoord {
    pub lat: f64,
    pub lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let c = GeoCoord { lat, lon };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinate ({}, {})",
                self.lat, self.lon
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::invalid(format!("latitude {} out of range", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!("longitude {} out of range", self.lon)));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConstants {
    pub light_speed_km_s: f64,
    pub fiber_factor: f64,
    pub earth_radius_km: f64,
}

impl Default for PropagationConstants {
    fn default() -> Self {
        PropagationConstants {
            light_speed_km_s: LIGHT_SPEED_KM_S,
            fiber_factor: FIBER_FACTOR,
            earth_radius_km: EARTH_RADIUS_KM,
        }
    }
}

impl PropagationConstants {
    /// Signal speed in fiber, km per millisecond.
    fn fiber_km_per_ms(&self) -> f64 {
        self.light_speed_km_s * self.fiber_factor / 1000.0
    }

    pub fn distance_km(&self, a: &GeoCoord, b: &GeoCoord) -> Result<f64> {
        a.validate()?;
        b.validate()?;
        let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
        let dlat = lat2 - lat1;
        let dlon = (b.lon - a.lon).to_radians();
        let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
        // rounding can push h a hair past 1 for antipodal points
        let central = 2.0 * h.clamp(0.0, 1.0).sqrt().asin();
        Ok(central * self.earth_radius_km)
    }

    /// One-way fiber delay in ms for a path of `distance_km`.
    pub fn delay_for_distance_ms(&self, distance_km: f64) -> f64 {
        distance_km / self.fiber_km_per_ms()
    }

    pub fn delay_ms(&self, a: &GeoCoord, b: &GeoCoord) -> Result<f64> {
        Ok(self.delay_for_distance_ms(self.distance_km(a, b)?))
    }
}

/// Great-circle distance in km with the default constants.
pub fn geo_distance(a: &GeoCoord, b: &GeoCoord) -> Result<f64> {
    PropagationConstants::default().distance_km(a, b)
}

/// One-way propagation delay in ms with the default constants.
pub fn propagation_delay(a: &GeoCoord, b: &GeoCoord) -> Result<f64> {
    PropagationConstants::default().delay_ms(a, b)
}
