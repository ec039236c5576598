//! Deterministic synthetic videos: textured objects moving at constant
//! velocity over a static textured background, plus Gaussian noise.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::write_pgm;
use crate::scalar::Scalar;
use crate::tensor::{Shape5, Tensor5};

/// Sub-pixel samples per axis used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectShape {
    /// Axis-aligned rectangle with the given half extents.
    Rect {
        half_height: f64,
        half_width: f64,
    },
    Disc {
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Alternating cells of `cell` pixels.
    Checker { cell: f64 },
    /// Oriented sinusoid; `frequency` in cycles per pixel.
    Sinusoid { frequency: f64 },
    /// Constant intensity on every channel.
    Flat { level: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub texture: Texture,
    /// Pixels per frame, (row, col).
    pub velocity: (f64, f64),
    /// Centre at frame 0, (row, col).
    pub start: (f64, f64),
}

impl SceneObject {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        let t = frame as f64;
        (self.start.0 + t * self.velocity.0, self.start.1 + t * self.velocity.1)
    }

    fn contains(&self, dr: f64, dc: f64) -> bool {
        match self.shape {
            ObjectShape::Rect {
                half_height,
                half_width,
            } => dr.abs() <= half_height && dc.abs() <= half_width,
            ObjectShape::Disc { radius } => dr * dr + dc * dc <= radius * radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub objects: Vec<SceneObject>,
    /// Background sinusoid frequency in cycles per pixel (0 = flat).
    pub background_frequency: f64,
    /// Drives per-channel colours, phases and orientations.
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.num_frames == 0 {
            return Err(Error::Config(format!(
                "degenerate clip size {}x{} with {} frames",
                self.height, self.width, self.num_frames
            )));
        }
        let bound = self.height.min(self.width) as f64 / self.num_frames as f64;
        for (i, o) in self.objects.iter().enumerate() {
            let (vr, vc) = o.velocity;
            let speed = vr.hypot(vc);
            if !speed.is_finite() || !o.start.0.is_finite() || !o.start.1.is_finite() {
                return Err(Error::Config(format!("object {i} has a non-finite velocity or start")));
            }
            if speed > bound + 1e-9 {
                return Err(Error::Config(format!(
                    "object {i} speed {speed:.3} px/frame exceeds {bound:.3} (size / frames)"
                )));
            }
        }
        Ok(())
    }

    /// A random scene of `objects` objects, each moving at a speed drawn from
    /// `speed` (px/frame) in a random direction, with the trajectory midpoint
    /// in the central half of the frame.
    pub fn random(
        rng: &mut impl Rng,
        size: (usize, usize),
        num_frames: usize,
        speed: (f64, f64),
        objects: usize,
    ) -> Self {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let span = (num_frames.max(1) - 1) as f64;
        let extent = h.min(w);
        let objects = (0..objects)
            .map(|_| {
                let s = if speed.1 > speed.0 {
                    rng.random_range(speed.0..=speed.1)
                } else {
                    speed.0
                };
                let angle = rng.random_range(0.0..TAU);
                let velocity = (s * angle.sin(), s * angle.cos());
                let mid = (rng.random_range(0.3 * h..0.7 * h), rng.random_range(0.3 * w..0.7 * w));
                let shape = if rng.random_bool(0.5) {
                    ObjectShape::Rect {
                        half_height: rng.random_range(0.12 * extent..0.25 * extent),
                        half_width: rng.random_range(0.12 * extent..0.25 * extent),
                    }
                } else {
                    ObjectShape::Disc {
                        radius: rng.random_range(0.15 * extent..0.28 * extent),
                    }
                };
                let texture = if rng.random_bool(0.5) {
                    Texture::Checker {
                        cell: rng.random_range(4.0..8.0),
                    }
                } else {
                    Texture::Sinusoid {
                        frequency: rng.random_range(0.04..0.1),
                    }
                };
                SceneObject {
                    shape,
                    texture,
                    velocity,
                    start: (mid.0 - velocity.0 * span / 2.0, mid.1 - velocity.1 * span / 2.0),
                }
            })
            .collect();
        ClipSpec {
            height: size.0,
            width: size.1,
            num_frames,
            objects,
            background_frequency: rng.random_range(0.02..0.05),
            seed: rng.random(),
        }
    }
}

/// Per-channel colouring derived from the clip seed.
struct Palette {
    bg_angle: [f64; 3],
    bg_phase: [f64; 3],
    obj: Vec<[(f64, f64, f64, f64); 3]>,
}

impl Palette {
    fn new(spec: &ClipSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut bg_angle = [0.0; 3];
        let mut bg_phase = [0.0; 3];
        for c in 0..3 {
            bg_angle[c] = rng.random_range(0.0..TAU);
            bg_phase[c] = rng.random_range(0.0..TAU);
        }
        // (angle, phase, level_a, level_b) per channel and object
        let obj = spec
            .objects
            .iter()
            .map(|_| {
                let mut ch = [(0.0, 0.0, 0.0, 0.0); 3];
                for v in &mut ch {
                    *v = (
                        rng.random_range(0.0..TAU),
                        rng.random_range(0.0..TAU),
                        rng.random_range(0.05..0.45),
                        rng.random_range(0.55..0.95),
                    );
                }
                ch
            })
            .collect();
        Palette {
            bg_angle,
            bg_phase,
            obj,
        }
    }

    fn background(&self, spec: &ClipSpec, c: usize, r: f64, col: f64) -> f64 {
        let (a, p) = (self.bg_angle[c], self.bg_phase[c]);
        let u = r * a.sin() + col * a.cos();
        0.5 + 0.3 * (TAU * spec.background_frequency * u + p).sin()
    }

    fn object(&self, o: &SceneObject, idx: usize, c: usize, dr: f64, dc: f64) -> f64 {
        let (angle, phase, lo, hi) = self.obj[idx][c];
        match o.texture {
            Texture::Flat { level } => level,
            Texture::Checker { cell } => {
                let parity = ((dr / cell).floor() + (dc / cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    lo
                } else {
                    hi
                }
            }
            Texture::Sinusoid { frequency } => {
                let u = dr * angle.sin() + dc * angle.cos();
                lo + (hi - lo) * 0.5 * (1.0 + (TAU * frequency * u + phase).sin())
            }
        }
    }
}

/// Renders `(1, 3, num_frames, H, W)` frames with values in `[0, 1]`.
pub fn gen_clip<T: Scalar>(spec: &ClipSpec) -> Result<Tensor5<T>> {
    spec.validate()?;
    let shape = Shape5::new(1, 3, spec.num_frames, spec.height, spec.width)?;
    let palette = Palette::new(spec);
    let mut out = Tensor5::zeros(shape);
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for t in 0..spec.num_frames {
        let centers: Vec<(f64, f64)> = spec.objects.iter().map(|o| o.center(t)).collect();
        for r in 0..spec.height {
            for col in 0..spec.width {
                let mut acc = [0.0f64; 3];
                for sy in 0..SUPERSAMPLE {
                    let pr = r as f64 - 0.5 + (sy as f64 + 0.5) * step;
                    for sx in 0..SUPERSAMPLE {
                        let pc = col as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        // topmost (last) object covering the point wins
                        let hit = spec
                            .objects
                            .iter()
                            .enumerate()
                            .rev()
                            .find(|(i, o)| o.contains(pr - centers[*i].0, pc - centers[*i].1));
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += match hit {
                                Some((i, o)) => palette.object(o, i, c, pr - centers[i].0, pc - centers[i].1),
                                None => palette.background(spec, c, pr, pc),
                            };
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out.set(0, c, t, r, col, T::from_f64((a * norm).clamp(0.0, 1.0)));
                }
            }
        }
    }
    Ok(out)
}

/// Interpolation sample: two key frames and the three frames between them.
#[derive(Debug, Clone)]
pub struct ClipPair<T> {
    /// `(1, 3, 2, H, W)`: frames 0 and 4.
    pub inputs: Tensor5<T>,
    /// `(1, 3, 3, H, W)`: frames 1, 2, 3.
    pub targets: Tensor5<T>,
}

impl<T: Scalar> ClipPair<T> {
    /// All five frames in time order (inputs at both ends).
    pub fn full_sequence(&self) -> Result<Tensor5<T>> {
        let first = self.inputs.slice_time(0, 1)?;
        let last = self.inputs.slice_time(1, 1)?;
        Tensor5::concat_time(&[&first, &self.targets, &last])
    }
}

/// Renders a 5-frame clip and splits it into key frames and in-betweens.
pub fn gen_pair<T: Scalar>(spec: &ClipSpec) -> Result<ClipPair<T>> {
    if spec.num_frames != 5 {
        return Err(Error::Config(format!(
            "interpolation pairs need 5 frames, spec has {}",
            spec.num_frames
        )));
    }
    let clip = gen_clip(spec)?;
    let inputs = Tensor5::concat_time(&[&clip.slice_time(0, 1)?, &clip.slice_time(4, 1)?])?;
    Ok(ClipPair {
        inputs,
        targets: clip.slice_time(1, 3)?,
    })
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma_8bit / 255`
/// and clamps to `[0, 1]`.
pub fn add_gaussian_noise<T: Scalar>(frames: &Tensor5<T>, sigma_8bit: f64, seed: u64) -> Result<Tensor5<T>> {
    if !(sigma_8bit >= 0.0 && sigma_8bit.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma must be finite and >= 0, got {sigma_8bit}"
        )));
    }
    if sigma_8bit == 0.0 {
        return Ok(frames.clone());
    }
    let normal = Normal::new(0.0, sigma_8bit / 255.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frames.clone();
    for v in out.data_mut() {
        *v = T::from_f64((v.as_f64() + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Writes one channel-averaged greyscale PGM per (batch item, frame).
pub fn export_pgm_frames<T: Scalar>(frames: &Tensor5<T>, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let s = frames.shape();
    let mut paths = Vec::new();
    for n in 0..s.n {
        for t in 0..s.t {
            let mut pixels = vec![0u8; s.plane()];
            for (i, px) in pixels.iter_mut().enumerate() {
                let mean = (0..s.c).map(|c| frames.frame(n, c, t)[i].as_f64()).sum::<f64>() / s.c as f64;
                *px = (mean.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            let path = dir.join(format!("{prefix}_n{n}_t{t}.pgm"));
            write_pgm(&path, s.w, s.h, &pixels)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn flat_rect_spec(velocity: (f64, f64)) -> ClipSpec {
        ClipSpec {
            height: 24,
            width: 24,
            num_frames: 5,
            objects: vec![SceneObject {
                shape: ObjectShape::Rect {
                    half_height: 2.0,
                    half_width: 3.0,
                },
                texture: Texture::Flat { level: 1.0 },
                velocity,
                start: (4.0, 12.0),
            }],
            background_frequency: 0.0,
            seed: 3,
        }
    }

    /// Row centroid of |frame - background| in channel 0.
    fn row_centroid(clip: &Tensor5<f64>, t: usize) -> f64 {
        let bg = clip.get(0, 0, 0, 23, 0);
        let (mut m, mut mr) = (0.0, 0.0);
        for r in 0..24 {
            for c in 0..24 {
                let d = (clip.get(0, 0, t, r, c) - bg).abs();
                m += d;
                mr += d * r as f64;
            }
        }
        mr / m
    }

    #[test]
    fn constant_velocity_kinematics() {
        let spec = flat_rect_spec((2.0, 0.0));
        let clip: Tensor5<f64> = gen_clip(&spec).unwrap();
        assert_eq!(spec.objects[0].center(3), (10.0, 12.0));
        assert!((row_centroid(&clip, 3) - 10.0).abs() < 1e-9);
        assert!((row_centroid(&clip, 0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = ClipSpec::random(&mut rng, (32, 32), 5, (0.0, 0.0), 2);
        for o in &mut spec.objects {
            o.velocity = (0.0, 0.0);
        }
        let clip: Tensor5<f32> = gen_clip(&spec).unwrap();
        for t in 1..5 {
            assert_eq!(clip.slice_time(t, 1).unwrap(), clip.slice_time(0, 1).unwrap());
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ClipSpec::random(&mut rng, (32, 32), 5, (4.0, 4.0), 2);
        let a: Tensor5<f32> = gen_clip(&spec).unwrap();
        let b: Tensor5<f32> = gen_clip(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // channels are not copies of each other
        assert_ne!(a.volume(0, 0), a.volume(0, 1));
    }

    #[test]
    fn pair_targets_are_exact_clip_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ClipSpec::random(&mut rng, (32, 32), 5, (4.0, 4.0), 1);
        let clip: Tensor5<f64> = gen_clip(&spec).unwrap();
        let pair: ClipPair<f64> = gen_pair(&spec).unwrap();
        assert_eq!(pair.targets, clip.slice_time(1, 3).unwrap());
        assert_eq!(pair.inputs.slice_time(1, 1).unwrap(), clip.slice_time(4, 1).unwrap());
        assert_eq!(pair.full_sequence().unwrap(), clip);
    }

    #[test]
    fn rejects_degenerate_and_fast_specs() {
        let mut spec = flat_rect_spec((0.0, 0.0));
        spec.height = 0;
        assert!(gen_clip::<f32>(&spec).is_err());
        let fast = flat_rect_spec((6.0, 0.0));
        assert!(gen_clip::<f32>(&fast).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ClipSpec::random(&mut rng, (16, 16), 3, (1.0, 2.0), 1);
        let clip: Tensor5<f32> = gen_clip(&spec).unwrap();
        assert_eq!(add_gaussian_noise(&clip, 0.0, 9).unwrap(), clip);
    }

    #[test]
    fn noise_statistics_on_mid_gray() {
        let clean = Tensor5::<f64>::filled(Shape5::new(1, 3, 1, 64, 64).unwrap(), 0.5);
        let noisy = add_gaussian_noise(&clean, 25.0, 17).unwrap();
        let n = noisy.len() as f64;
        let diffs: Vec<f64> = noisy.data().iter().map(|v| v - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / (25.0 / 255.0) - 1.0).abs() < 0.05, "sd {sd}");
        let p = psnr(&noisy, &clean, 1.0).unwrap();
        assert!((p - 20.0 * (255.0f64 / 25.0).log10()).abs() < 0.3, "psnr {p}");
        assert_eq!(add_gaussian_noise(&clean, 25.0, 17).unwrap(), noisy);
    }

    #[test]
    fn pgm_export_names_every_frame() {
        let dir = tempfile::tempdir().unwrap();
        let clip = Tensor5::<f32>::filled(Shape5::new(1, 3, 2, 4, 4).unwrap(), 1.0);
        let paths = export_pgm_frames(&clip, dir.path(), "clip").unwrap();
        assert_eq!(paths.len(), 2);
        let (w, h, px) = crate::io::read_pgm(&std::fs::read(&paths[1]).unwrap()).unwrap();
        assert_eq!((w, h), (4, 4));
        assert!(px.iter().all(|&p| p == 255));
    }
}
