//! Height fields with analytic gradients.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in the world xy-plane with a smooth edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Width of the smoothstep ramp outside the rectangle, metres.
    #[serde(default)]
    pub blend: f64,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Mask value in [0, 1] and its gradient.
    pub fn mask(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mx, dmx) = ramp(x, self.x_min, self.x_max, self.blend);
        let (my, dmy) = ramp(y, self.y_min, self.y_max, self.blend);
        (mx * my, dmx * my, mx * dmy)
    }
}

/// Smoothstep in, flat top, smoothstep out. C1 everywhere.
fn ramp(v: f64, lo: f64, hi: f64, blend: f64) -> (f64, f64) {
    if v >= lo && v <= hi {
        return (1.0, 0.0);
    }
    if blend <= 0.0 {
        return (0.0, 0.0);
    }
    let (d, sign) = if v < lo { (lo - v, 1.0) } else { (v - hi, -1.0) };
    if d >= blend {
        return (0.0, 0.0);
    }
    let s = 1.0 - d / blend;
    let value = s * s * (3.0 - 2.0 * s);
    let dvalue_ds = 6.0 * s * (1.0 - s);
    // ds/dv = sign / blend
    (value, dvalue_ds * sign / blend)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Terrain {
    #[default]
    Plane,
    /// `a sin(2 pi x / l) cos(2 pi y / l)`, optionally confined to a region.
    Bumps {
        amplitude: f64,
        wavelength: f64,
        #[serde(default)]
        region: Option<Region>,
    },
    /// Gaussian mound; a negative height makes a valley.
    Hill {
        x: f64,
        y: f64,
        height: f64,
        radius: f64,
    },
    /// Constant grade along a direction, `slope * (cos(a) x + sin(a) y)`.
    Slope {
        slope: f64,
        #[serde(default)]
        direction: f64,
        #[serde(default)]
        region: Option<Region>,
    },
    /// Sum of the parts.
    Composite { parts: Vec<Terrain> },
}

impl Terrain {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.height_and_gradient(x, y).0
    }

    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let (_, gx, gy) = self.height_and_gradient(x, y);
        (gx, gy)
    }

    /// Unit upward surface normal.
    pub fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let (gx, gy) = self.gradient(x, y);
        Vector3::new(-gx, -gy, 1.0).normalize()
    }

    pub fn height_and_gradient(&self, x: f64, y: f64) -> (f64, f64, f64) {
        match self {
            Terrain::Plane => (0.0, 0.0, 0.0),
            Terrain::Bumps {
                amplitude,
                wavelength,
                region,
            } => {
                let k = TAU / wavelength;
                let (sx, cx) = (k * x).sin_cos();
                let (sy, cy) = (k * y).sin_cos();
                let h = amplitude * sx * cy;
                let hx = amplitude * k * cx * cy;
                let hy = -amplitude * k * sx * sy;
                masked(region.as_ref(), x, y, (h, hx, hy))
            }
            Terrain::Hill {
                x: cx,
                y: cy,
                height,
                radius,
            } => {
                let dx = x - cx;
                let dy = y - cy;
                let s2 = radius * radius;
                let h = height * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
                (h, -h * dx / s2, -h * dy / s2)
            }
            Terrain::Slope {
                slope,
                direction,
                region,
            } => {
                let (s, c) = direction.sin_cos();
                let h = slope * (c * x + s * y);
                masked(region.as_ref(), x, y, (h, slope * c, slope * s))
            }
            Terrain::Composite { parts } => parts.iter().fold((0.0, 0.0, 0.0), |acc, p| {
                let (h, gx, gy) = p.height_and_gradient(x, y);
                (acc.0 + h, acc.1 + gx, acc.2 + gy)
            }),
        }
    }

    /// Rolling terrain in the spirit of an indoor test dome: bumps of the
    /// given amplitude, a hill and a valley laid along the x axis.
    pub fn dome(amplitude: f64, length: f64) -> Terrain {
        Terrain::Composite {
            parts: vec![
                Terrain::Bumps {
                    amplitude,
                    wavelength: 4.0,
                    region: Some(Region {
                        x_min: 0.15 * length,
                        x_max: 0.4 * length,
                        y_min: -4.0,
                        y_max: 4.0,
                        blend: 2.0,
                    }),
                },
                Terrain::Hill {
                    x: 0.6 * length,
                    y: 0.0,
                    height: 0.8,
                    radius: 3.0,
                },
                Terrain::Hill {
                    x: 0.85 * length,
                    y: 0.0,
                    height: -0.5,
                    radius: 2.5,
                },
            ],
        }
    }
}

fn masked(region: Option<&Region>, x: f64, y: f64, (h, hx, hy): (f64, f64, f64)) -> (f64, f64, f64) {
    match region {
        None => (h, hx, hy),
        Some(r) => {
            let (m, mx, my) = r.mask(x, y);
            (m * h, m * hx + mx * h, m * hy + my * h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_gradient(t: &Terrain) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let x = rng.random_range(-5.0..60.0);
            let y = rng.random_range(-6.0..6.0);
            let h = 1e-6;
            let fx = (t.height(x + h, y) - t.height(x - h, y)) / (2.0 * h);
            let fy = (t.height(x, y + h) - t.height(x, y - h)) / (2.0 * h);
            let (gx, gy) = t.gradient(x, y);
            assert!((fx - gx).abs() < 1e-6, "{fx} vs {gx} at ({x}, {y})");
            assert!((fy - gy).abs() < 1e-6, "{fy} vs {gy} at ({x}, {y})");
        }
    }

    #[test]
    fn plane_is_flat() {
        let t = Terrain::Plane;
        assert_eq!(t.height_and_gradient(3.0, -7.0), (0.0, 0.0, 0.0));
        assert_eq!(t.normal(1.0, 1.0), Vector3::z());
    }

    #[test]
    fn analytic_gradients() {
        check_gradient(&Terrain::Bumps {
            amplitude: 0.15,
            wavelength: 3.0,
            region: None,
        });
        check_gradient(&Terrain::Hill {
            x: 10.0,
            y: 1.0,
            height: 1.0,
            radius: 2.0,
        });
        check_gradient(&Terrain::dome(0.15, 50.0));
        check_gradient(&Terrain::Slope {
            slope: 0.1,
            direction: 0.3,
            region: Some(Region {
                x_min: 5.0,
                x_max: 20.0,
                y_min: -2.0,
                y_max: 2.0,
                blend: 3.0,
            }),
        });
    }

    #[test]
    fn mask_is_continuous_at_edges() {
        let r = Region {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            blend: 0.5,
        };
        for &x in &[0.0, 1.0, -0.5, 1.5] {
            let a = r.mask(x - 1e-9, 0.5).0;
            let b = r.mask(x + 1e-9, 0.5).0;
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(r.mask(-0.6, 0.5).0, 0.0);
        assert_eq!(r.mask(0.5, 0.5).0, 1.0);
    }
}
