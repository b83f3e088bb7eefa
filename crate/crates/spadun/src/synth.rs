//! Synthetic video clips with piecewise-rigid motion: a desk-scale
//! stand-in for natural training footage.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sampling::VideoCube;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    MovingSquares,
    MovingBars,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moving_squares" => Ok(SynthKind::MovingSquares),
            "moving_bars" => Ok(SynthKind::MovingBars),
            other => Err(format!(
                "unknown synthetic kind {other:?} (moving_squares | moving_bars)"
            )),
        }
    }
}

struct Object {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    vx: i64,
    vy: i64,
    intensity: f32,
}

fn nonzero_velocity(rng: &mut ChaCha8Rng, max: i64) -> (i64, i64) {
    loop {
        let vx = rng.random_range(-max..=max);
        let vy = rng.random_range(-max..=max);
        if vx != 0 || vy != 0 {
            return (vx, vy);
        }
    }
}

/// Deterministic clip set. Each clip draws its own object sizes,
/// intensities, and integer per-frame velocities; motion wraps around the
/// frame border so displacement per frame is exact.
pub fn synth_dataset(
    kind: SynthKind,
    clips: usize,
    frames: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<VideoCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clips)
        .map(|_| synth_clip(kind, frames, h, w, &mut rng))
        .collect()
}

fn render_clip(objects: &[Object], frames: usize, h: usize, w: usize) -> VideoCube {
    let (hi, wi) = (h as i64, w as i64);
    let background = 0.05f32;
    let mut data = vec![background; frames * h * w];
    for t in 0..frames {
        let frame = &mut data[t * h * w..(t + 1) * h * w];
        for o in objects {
            let ox = o.x0 + o.vx * t as i64;
            let oy = o.y0 + o.vy * t as i64;
            for dy in 0..o.h {
                let y = (oy + dy).rem_euclid(hi) as usize;
                for dx in 0..o.w {
                    let x = (ox + dx).rem_euclid(wi) as usize;
                    let px = &mut frame[y * w + x];
                    *px = px.max(o.intensity);
                }
            }
        }
    }
    VideoCube::new(Tensor::from_f32(data, &[frames, h, w])).expect("synthetic clip is valid")
}

fn synth_clip(
    kind: SynthKind,
    frames: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> VideoCube {
    let (hi, wi) = (h as i64, w as i64);
    let objects: Vec<Object> = match kind {
        SynthKind::MovingSquares => {
            let count = rng.random_range(2..=4);
            (0..count)
                .map(|_| {
                    let side = rng.random_range((hi / 8).max(2)..=(hi / 3).max(3));
                    let (vx, vy) = nonzero_velocity(rng, 2);
                    Object {
                        x0: rng.random_range(0..wi),
                        y0: rng.random_range(0..hi),
                        w: side,
                        h: side,
                        vx,
                        vy,
                        intensity: rng.random_range(0.35..1.0),
                    }
                })
                .collect()
        }
        SynthKind::MovingBars => {
            let count = rng.random_range(1..=3);
            (0..count)
                .map(|_| {
                    let horizontal = rng.random::<bool>();
                    let thickness = rng.random_range((hi / 10).max(2)..=(hi / 4).max(3));
                    let (bw, bh) = if horizontal {
                        (wi, thickness)
                    } else {
                        (thickness, hi)
                    };
                    let v = if rng.random::<bool>() { 1 } else { 2 };
                    let (vx, vy) = if horizontal { (0, v) } else { (v, 0) };
                    Object {
                        x0: rng.random_range(0..wi),
                        y0: rng.random_range(0..hi),
                        w: bw,
                        h: bh,
                        vx,
                        vy,
                        intensity: rng.random_range(0.4..1.0),
                    }
                })
                .collect()
        }
    };
    render_clip(&objects, frames, h, w)
}

/// The fixed reconstruction phantom used throughout tests and examples:
/// one seeded moving-squares clip.
pub fn phantom(frames: usize, h: usize, w: usize) -> VideoCube {
    synth_dataset(SynthKind::MovingSquares, 1, frames, h, w, 0xC0FFEE)
        .pop()
        .expect("one clip requested")
}
