use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PhantomKind {
    /// Single 2-D image `[H, W]`.
    Static2d,
    /// Frame series `[T, H, W]`; one ellipse's radii are modulated by
    /// `1 + amplitude·sin(2πt/T)`.
    Cine { amplitude: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / (self.rx * scale)).powi(2) + (v / (self.ry * scale)).powi(2) <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, amount: f64) -> f64 {
    v + rng.random_range(-amount..amount)
}

/// Shepp-Logan-style ellipse superposition with randomized geometry, smooth
/// texture and smooth phase. Magnitudes lie in `[0, 1]`.
pub fn make_phantom(shape: &[usize], kind: PhantomKind, seed: u64) -> Result<ComplexTensor> {
    let (frames, ny, nx) = match (kind, shape) {
        (PhantomKind::Static2d, &[ny, nx]) => (1, ny, nx),
        (PhantomKind::Cine { .. }, &[t, ny, nx]) => (t, ny, nx),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "phantom shape {shape:?} does not match {kind:?}"
            )))
        }
    };
    if ny < 16 || nx < 16 {
        return Err(Error::InvalidParameter("phantom extents must be >= 16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = vec![
        Ellipse {
            cy: 0.0,
            cx: 0.0,
            ry: jitter(&mut rng, 0.88, 0.04),
            rx: jitter(&mut rng, 0.70, 0.05),
            angle: jitter(&mut rng, 0.0, 0.15),
            value: 0.85,
        },
        Ellipse {
            cy: jitter(&mut rng, -0.02, 0.02),
            cx: 0.0,
            ry: jitter(&mut rng, 0.80, 0.03),
            rx: jitter(&mut rng, 0.62, 0.03),
            angle: jitter(&mut rng, 0.0, 0.1),
            value: -0.45,
        },
    ];
    // The moving structure in cine mode.
    let heart = Ellipse {
        cy: jitter(&mut rng, 0.0, 0.1),
        cx: jitter(&mut rng, 0.0, 0.1),
        ry: jitter(&mut rng, 0.22, 0.04),
        rx: jitter(&mut rng, 0.18, 0.04),
        angle: rng.random_range(-PI..PI),
        value: 0.5,
    };
    let n_small = rng.random_range(4..8);
    for _ in 0..n_small {
        let r = rng.random_range(0.0..0.5);
        let t = rng.random_range(-PI..PI);
        ellipses.push(Ellipse {
            cy: r * t.sin(),
            cx: r * t.cos(),
            ry: rng.random_range(0.04..0.2),
            rx: rng.random_range(0.04..0.2),
            angle: rng.random_range(-PI..PI),
            value: rng.random_range(-0.2..0.35),
        });
    }
    let tex = (
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(-PI..PI),
    );
    let phase = (
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.3..0.3),
    );
    let amplitude = match kind {
        PhantomKind::Cine { amplitude } => amplitude,
        PhantomKind::Static2d => 0.0,
    };

    ComplexTensor::from_fn(shape, |i| {
        let t = i / (ny * nx);
        let p = i % (ny * nx);
        let y = 2.0 * (p / nx) as f64 / ny as f64 - 1.0;
        let x = 2.0 * (p % nx) as f64 / nx as f64 - 1.0;
        let mut v: f64 = ellipses.iter().filter(|e| e.contains(y, x, 1.0)).map(|e| e.value).sum();
        let scale = 1.0 + amplitude * (2.0 * PI * t as f64 / frames as f64).sin();
        if heart.contains(y, x, scale) {
            v += heart.value;
        }
        if v > 0.0 {
            v *= 1.0 + 0.08 * (PI * (tex.0 * x + tex.1 * y) + tex.2).sin();
        }
        let mag = v.clamp(0.0, 1.0);
        let phi = phase.0 * x + phase.1 * y + phase.2 * (x * x + y * y);
        C64::from_polar(mag, phi)
    })
}
