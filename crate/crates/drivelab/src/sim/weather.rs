//! Photometric weather nuisances.
//!
//! Weather affects only the rendered image, never the segmentation mask or
//! the stop intentions. The four training presets reuse the classic CARLA
//! training-weather names; the two held-out test presets sit outside the
//! convex hull of the training parameters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherParams {
    pub name: String,
    /// Per-channel RGB multiplier in [0, 2].
    pub tint: [f64; 3],
    /// Pixel noise standard deviation in [0, 0.3].
    pub noise_sigma: f64,
    /// Rain streak count per frame.
    pub rain_density: u32,
    /// Additive brightness offset in [-0.3, 0.3].
    pub brightness: f64,
}

impl WeatherParams {
    pub fn new(name: &str, tint: [f64; 3], noise_sigma: f64, rain_density: u32, brightness: f64) -> Self {
        assert!(tint.iter().all(|t| (0.0..=2.0).contains(t)), "tint out of range");
        assert!((0.0..=0.3).contains(&noise_sigma), "noise sigma out of range");
        assert!((-0.3..=0.3).contains(&brightness), "brightness out of range");
        WeatherParams { name: name.to_string(), tint, noise_sigma, rain_density, brightness }
    }

    /// Identity weather: rendering becomes a pure function of geometry.
    pub fn identity() -> Self {
        WeatherParams::new("Identity", [1.0, 1.0, 1.0], 0.0, 0, 0.0)
    }

    pub fn train_set() -> Vec<WeatherParams> {
        vec![
            WeatherParams::new("Clear Noon", [1.05, 1.02, 0.98], 0.01, 0, 0.05),
            WeatherParams::new("Heavy Rain Noon", [0.72, 0.78, 0.90], 0.05, 60, -0.10),
            WeatherParams::new("Clear Noon After Rain", [0.88, 0.92, 1.02], 0.03, 0, -0.04),
            WeatherParams::new("Clear Sunset", [1.30, 1.00, 0.74], 0.02, 0, 0.00),
        ]
    }

    /// Held-out weathers; every parameter ventures outside the training hull.
    pub fn test_set() -> Vec<WeatherParams> {
        vec![
            WeatherParams::new("After Rain Sunset", [1.45, 0.90, 0.62], 0.07, 25, -0.16),
            WeatherParams::new("Soft Rain Noon", [0.58, 0.68, 0.82], 0.09, 90, -0.22),
        ]
    }

    pub fn by_name(name: &str) -> Option<WeatherParams> {
        WeatherParams::train_set()
            .into_iter()
            .chain(WeatherParams::test_set())
            .chain(std::iter::once(WeatherParams::identity()))
            .find(|w| w.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_by_name() {
        for w in WeatherParams::train_set().iter().chain(WeatherParams::test_set().iter()) {
            let got = WeatherParams::by_name(&w.name).unwrap();
            assert_eq!(&got, w);
        }
        assert!(WeatherParams::by_name("Plasma Storm").is_none());
    }

    #[test]
    fn test_weathers_leave_training_hull() {
        let train = WeatherParams::train_set();
        for t in WeatherParams::test_set() {
            let outside = t.noise_sigma > train.iter().map(|w| w.noise_sigma).fold(0.0, f64::max)
                || t.brightness < train.iter().map(|w| w.brightness).fold(0.0, f64::min);
            assert!(outside, "{} inside training hull", t.name);
        }
    }
}
