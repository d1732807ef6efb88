//! Seeded synthetic source/guide pairs.
//!
//! The source is piecewise smooth: a tilted background plane with a few
//! convex polygons in front of it, each carrying its own plane. The guide
//! recolors the same regions with random RGB albedos and a nonlinear shading
//! of the source, then adds structure the source does not have: striped
//! texture and flat painted patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{degrade_pool, Image};

/// Ground-truth HR source, HR guide and the pooled LR source.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub gt: Image,
    pub guide: Image,
    pub lr: Image,
}

struct Plane {
    base: f64,
    gx: f64,
    gy: f64,
}

impl Plane {
    fn at(&self, u: f64, v: f64) -> f64 {
        self.base + self.gx * (u - 0.5) + self.gy * (v - 0.5)
    }
}

/// Convex polygon with counter-clockwise vertices in pixel units.
struct Polygon {
    verts: Vec<(f64, f64)>,
}

impl Polygon {
    fn random(rng: &mut ChaCha8Rng, size: f64, radius: (f64, f64)) -> Self {
        let cx = rng.random_range(0.15..0.85) * size;
        let cy = rng.random_range(0.15..0.85) * size;
        let r = rng.random_range(radius.0..radius.1) * size;
        let n = rng.random_range(3..=6);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let verts = angles
            .iter()
            .map(|&a| {
                let rr = r * rng.random_range(0.75..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        Polygon { verts }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.verts.len();
        (0..n).all(|i| {
            let (x0, y0) = self.verts[i];
            let (x1, y1) = self.verts[(i + 1) % n];
            (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
        })
    }
}

/// Generates one pair. `size` is the HR edge length and must be divisible by `scale`.
pub fn synth_pair(seed: u64, size: usize, scale: usize) -> Result<SynthPair> {
    if scale == 0 || size == 0 || !size.is_multiple_of(scale) {
        return Err(Error::arg(format!("size {size} is not divisible by scale {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;

    let bg = rng.random_range(0.1..0.35);
    let mut planes = vec![Plane { base: bg, gx: rng.random_range(-0.15..0.15), gy: rng.random_range(-0.15..0.15) }];
    let n_poly = rng.random_range(3..=5);
    let polys: Vec<Polygon> = (0..n_poly).map(|_| Polygon::random(&mut rng, sz, (0.15, 0.32))).collect();
    // every object stands at least 0.2 in front of the background
    for _ in 0..n_poly {
        planes.push(Plane {
            base: rng.random_range(bg + 0.2..0.92),
            gx: rng.random_range(-0.2..0.2),
            gy: rng.random_range(-0.2..0.2),
        });
    }
    let albedo: Vec<[f64; 3]> =
        (0..=n_poly).map(|_| [0; 3].map(|_: u8| rng.random_range(0.1..0.85))).collect();
    let shade_freq = rng.random_range(2.0..4.0);

    // guide-only structure
    let stripes = Polygon::random(&mut rng, sz, (0.2, 0.35));
    let stripe_period = rng.random_range(3.0..7.0);
    let stripe_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let stripe_amp = rng.random_range(0.12..0.22);
    let n_patch = rng.random_range(1..=2);
    let patches: Vec<(Polygon, [f64; 3])> = (0..n_patch)
        .map(|_| {
            let p = Polygon::random(&mut rng, sz, (0.07, 0.14));
            (p, [0; 3].map(|_: u8| rng.random_range(0.05..0.95)))
        })
        .collect();

    let mut gt = Vec::with_capacity(size * size);
    let mut guide = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / sz, py / sz);
            let region = polys.iter().rposition(|p| p.contains(px, py)).map_or(0, |k| k + 1);
            let depth = planes[region].at(u, v).clamp(0.0, 1.0);
            gt.push(depth as f32);

            let shade = 0.12 * (shade_freq * std::f64::consts::PI * depth).sin();
            let mut rgb = albedo[region].map(|a| a + shade);
            if stripes.contains(px, py) {
                let t = (px * stripe_angle.cos() + py * stripe_angle.sin()) / stripe_period;
                let s = if t.rem_euclid(1.0) < 0.5 { stripe_amp } else { -stripe_amp };
                rgb = rgb.map(|c| c + s);
            }
            if let Some((_, color)) = patches.iter().rev().find(|(p, _)| p.contains(px, py)) {
                rgb = *color;
            }
            // gamma-style nonlinearity per channel, then 8-bit quantization
            for (ch, c) in rgb.iter().enumerate() {
                let g = c.clamp(0.0, 1.0).powf([0.8, 1.0, 1.25][ch]);
                guide.push(((g * 255.0).round() / 255.0) as f32);
            }
        }
    }
    let gt = Image::new(size, size, 1, gt, 1.0)?;
    let guide = Image::new(size, size, 3, guide, 255.0)?;
    let lr = degrade_pool(&gt, scale)?;
    Ok(SynthPair { gt, guide, lr })
}

/// `count` pairs with consecutive seeds starting at `seed`.
pub fn synth_suite(seed: u64, count: usize, size: usize, scale: usize) -> Result<Vec<SynthPair>> {
    (0..count as u64).map(|i| synth_pair(seed + i, size, scale)).collect()
}
