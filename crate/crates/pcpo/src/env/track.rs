//! Closed-loop track geometry for the lane-keeping task.
//!
//! The track is a rounded rectangle: two straights joined by two semicircular
//! arcs, resampled at 0.015 m arc length. The seed perturbs the straight
//! length by up to ±20 m (both straights stay equal so the loop closes
//! exactly); seed 0 is the canonical geometry with 100 m straights and 30 m
//! arc radius.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Arc-length spacing between consecutive centerline samples, in meters.
pub const SAMPLE_SPACING: f64 = 0.015;

const BASE_STRAIGHT: f64 = 100.0;
const ARC_RADIUS: f64 = 30.0;
const LANE_WIDTH: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    /// Arc-length position of the sample, m.
    pub s: f64,
    pub x: f64,
    pub y: f64,
    /// Tangent heading, rad.
    pub heading: f64,
    /// Signed curvature, 1/m.
    pub kappa: f64,
}

#[derive(Debug, Clone)]
pub struct TrackGeometry {
    samples: Vec<TrackSample>,
    spacing: f64,
    total_length: f64,
    lane_width: f64,
}

/// Generates the closed loop. Seed 0 keeps the 100 m straights; any other
/// seed perturbs the straight length uniformly in ±20 m.
pub fn generate_track(seed: u64) -> TrackGeometry {
    let straight = if seed == 0 {
        BASE_STRAIGHT
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BASE_STRAIGHT + rng.random_range(-20.0..20.0)
    };
    build_rounded_rectangle(straight, ARC_RADIUS)
}

pub(crate) fn build_rounded_rectangle(straight: f64, radius: f64) -> TrackGeometry {
    let perimeter = 2.0 * straight + 2.0 * std::f64::consts::PI * radius;
    // floor + 1 keeps the actual spacing strictly below the nominal value, so
    // the closure gap (= one spacing) stays below 0.015 m.
    let n = (perimeter / SAMPLE_SPACING).floor() as usize + 1;
    let spacing = perimeter / n as f64;

    let arc_len = std::f64::consts::PI * radius;
    // Segment boundaries along arc length: straight east, arc, straight west, arc.
    let b1 = straight;
    let b2 = straight + arc_len;
    let b3 = 2.0 * straight + arc_len;

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 * spacing;
        let (x, y, heading, kappa) = if s < b1 {
            (s, 0.0, 0.0, 0.0)
        } else if s < b2 {
            // Left semicircle centered at (straight, radius).
            let phi = -std::f64::consts::FRAC_PI_2 + (s - b1) / radius;
            (
                straight + radius * phi.cos(),
                radius + radius * phi.sin(),
                phi + std::f64::consts::FRAC_PI_2,
                1.0 / radius,
            )
        } else if s < b3 {
            (
                straight - (s - b2),
                2.0 * radius,
                std::f64::consts::PI,
                0.0,
            )
        } else {
            // Left semicircle centered at (0, radius).
            let phi = std::f64::consts::FRAC_PI_2 + (s - b3) / radius;
            (
                radius * phi.cos(),
                radius + radius * phi.sin(),
                phi + std::f64::consts::FRAC_PI_2,
                1.0 / radius,
            )
        };
        samples.push(TrackSample {
            s,
            x,
            y,
            heading,
            kappa,
        });
    }
    TrackGeometry {
        samples,
        spacing,
        total_length: perimeter,
        lane_width: LANE_WIDTH,
    }
}

impl TrackGeometry {
    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn samples(&self) -> &[TrackSample] {
        &self.samples
    }

    /// Curvature at arc-length position `s` (wrapped around the loop),
    /// looked up at the enclosing sample.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let wrapped = s.rem_euclid(self.total_length);
        let idx = (wrapped / self.spacing) as usize % self.samples.len();
        self.samples[idx].kappa
    }

    /// Gap between the last sample and the loop start.
    pub fn closure_gap(&self) -> f64 {
        let last = self.samples.last().unwrap();
        let first = self.samples.first().unwrap();
        ((last.x - first.x).powi(2) + (last.y - first.y).powi(2)).sqrt()
    }

    /// Writes the sample table, one `s x y heading kappa` line per sample
    /// with 9 significant digits.
    pub fn export<W: Write>(&self, mut w: W) -> Result<()> {
        for smp in &self.samples {
            writeln!(
                w,
                "{:.8e} {:.8e} {:.8e} {:.8e} {:.8e}",
                smp.s, smp.x, smp.y, smp.heading, smp.kappa
            )?;
        }
        Ok(())
    }

    /// Parses a table produced by [`TrackGeometry::export`].
    pub fn import<R: BufRead>(r: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| {
                    Error::InvalidConfig(format!("track line {}: {e}", lineno + 1))
                })?;
            if fields.len() != 5 {
                return Err(Error::InvalidConfig(format!(
                    "track line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            samples.push(TrackSample {
                s: fields[0],
                x: fields[1],
                y: fields[2],
                heading: fields[3],
                kappa: fields[4],
            });
        }
        if samples.len() < 2 {
            return Err(Error::InvalidConfig("track table too short".into()));
        }
        let spacing = samples[1].s - samples[0].s;
        let total_length = samples.len() as f64 * spacing;
        Ok(Self {
            samples,
            spacing,
            total_length,
            lane_width: LANE_WIDTH,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_track_length_matches_perimeter_formula() {
        let track = generate_track(0);
        let expected = 2.0 * 100.0 + 2.0 * std::f64::consts::PI * 30.0;
        assert!((track.total_length() - expected).abs() < 1e-9);
        assert!((expected - 388.50).abs() < 0.01);
    }

    #[test]
    fn any_seed_closes_and_spacing_is_uniform() {
        for seed in [0, 1, 2, 77, 123456] {
            let track = generate_track(seed);
            assert!(
                track.closure_gap() < SAMPLE_SPACING,
                "seed {seed}: gap {}",
                track.closure_gap()
            );
            assert!((track.spacing() - SAMPLE_SPACING).abs() < 1e-6);
            // Consecutive sample distances are uniform within 1e-6.
            let pts = track.samples();
            for w in pts.windows(2).take(500) {
                let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
                assert!((d - track.spacing()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn curvature_is_zero_on_straights_and_inverse_radius_on_arcs() {
        let track = generate_track(0);
        assert_eq!(track.curvature_at(10.0), 0.0);
        assert_eq!(track.curvature_at(50.0), 0.0);
        let on_arc = 100.0 + 10.0;
        assert!((track.curvature_at(on_arc) - 1.0 / 30.0).abs() < 1e-12);
        for smp in track.samples() {
            assert!(smp.kappa.abs() <= 0.05);
        }
    }

    #[test]
    fn seed_perturbs_straights_within_bounds() {
        for seed in 1..20u64 {
            let track = generate_track(seed);
            let straight = (track.total_length() - 2.0 * std::f64::consts::PI * 30.0) / 2.0;
            assert!((80.0..120.0).contains(&straight), "straight {straight}");
        }
        // Same seed, same geometry.
        assert_eq!(
            generate_track(7).samples()[1000],
            generate_track(7).samples()[1000]
        );
    }

    #[test]
    fn export_import_roundtrip() {
        let track = generate_track(3);
        let mut buf = Vec::new();
        track.export(&mut buf).unwrap();
        let back = TrackGeometry::import(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.samples().len(), track.samples().len());
        let a = &track.samples()[123];
        let b = &back.samples()[123];
        assert!((a.x - b.x).abs() < 1e-6);
        assert!((a.kappa - b.kappa).abs() < 1e-9);
        assert!((back.total_length() - track.total_length()).abs() < 1e-3);
    }
}
