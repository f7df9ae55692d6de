//! Deterministic synthetic test images.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

pub const MIN_PHANTOM_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Flat,
    Gradient,
    #[serde(rename = "shepp_like")]
    Shepp,
    Layers,
}

impl PhantomKind {
    pub const NAMES: [&'static str; 4] = ["flat", "gradient", "shepp_like", "layers"];
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(PhantomKind::Flat),
            "gradient" => Ok(PhantomKind::Gradient),
            "shepp_like" | "shepp" => Ok(PhantomKind::Shepp),
            "layers" => Ok(PhantomKind::Layers),
            _ => Err(Error::Unknown {
                kind: "phantom",
                name: s.to_string(),
                known: PhantomKind::NAMES.join(", "),
            }),
        }
    }
}

/// Builds an `h` x `w` phantom. The same `seed` always gives the same image.
pub fn make_phantom(kind: PhantomKind, h: usize, w: usize, seed: u64) -> Result<Image> {
    if h < MIN_PHANTOM_SIZE || w < MIN_PHANTOM_SIZE {
        return Err(Error::InvalidArgument(format!(
            "phantom must be at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match kind {
        PhantomKind::Flat => vec![0.5; h * w],
        PhantomKind::Gradient => gradient(h, w, &mut rng),
        PhantomKind::Shepp => shepp(h, w, &mut rng),
        PhantomKind::Layers => layers(h, w, &mut rng),
    };
    Image::new(w, h, data)
}

fn gradient(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let angle = rng.random_range(0.0..PI / 2.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let u = c as f64 / (w - 1) as f64;
            let v = r as f64 / (h - 1) as f64;
            let t = (u * ca + v * sa) / (ca + sa);
            out.push(0.1 + 0.8 * t);
        }
    }
    out
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    delta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn shepp(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut shapes = vec![
        Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: 0.69,
            b: 0.92,
            cos: 1.0,
            sin: 0.0,
            delta: 0.8,
        },
        Ellipse {
            cx: 0.0,
            cy: -0.0184,
            a: 0.6624,
            b: 0.874,
            cos: 1.0,
            sin: 0.0,
            delta: -0.5,
        },
    ];
    for _ in 0..5 {
        let theta: f64 = rng.random_range(0.0..PI);
        shapes.push(Ellipse {
            cx: rng.random_range(-0.35..0.35),
            cy: rng.random_range(-0.45..0.45),
            a: rng.random_range(0.06..0.22),
            b: rng.random_range(0.06..0.3),
            cos: theta.cos(),
            sin: theta.sin(),
            delta: rng.random_range(-0.15..0.35),
        });
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
            let y = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
            let v: f64 = shapes
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.delta)
                .sum();
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Wavy horizontal tissue layers with a bright circular inclusion and a
/// faint smooth texture.
fn layers(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const LEVELS: [f64; 5] = [0.1, 0.35, 0.6, 0.85, 0.45];
    let n = LEVELS.len();
    let bounds: Vec<(f64, f64, f64, f64)> = (1..n)
        .map(|k| {
            let base = k as f64 / n as f64 + rng.random_range(-0.04..0.04);
            let amp = rng.random_range(0.01..0.05);
            let freq = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            (base, amp, freq, phase)
        })
        .collect();
    let (icx, icy) = (rng.random_range(0.25..0.75), rng.random_range(0.3..0.7));
    let irad = rng.random_range(0.08..0.14);
    let (tfx, tfy, tphase) = (
        rng.random_range(2.0..4.0),
        rng.random_range(2.0..4.0),
        rng.random_range(0.0..2.0 * PI),
    );
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let y = (r as f64 + 0.5) / h as f64;
            let layer = bounds
                .iter()
                .filter(|&&(base, amp, freq, phase)| {
                    y > base + amp * (2.0 * PI * freq * x + phase).sin()
                })
                .count();
            let mut v = LEVELS[layer];
            if (x - icx).powi(2) + (y - icy).powi(2) <= irad * irad {
                v = 0.95;
            }
            v += 0.015 * (2.0 * PI * (tfx * x) + tphase).sin() * (2.0 * PI * tfy * y).cos();
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}
