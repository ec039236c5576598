//! Sampling maps: back-propagate from one output pixel and record, for each
//! input frame, how strongly every input position influences it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_pgm;
use crate::module::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor5;

/// Output position a map is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputCoord {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Channel-summed `|d output / d input|` for each input frame of batch item 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMap {
    pub coord: OutputCoord,
    pub height: usize,
    pub width: usize,
    /// One row-major `height * width` map per input frame.
    pub frames: Vec<Vec<f64>>,
    /// Largest entry over all frames.
    pub max: f64,
}

/// Input position with its magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntry {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub magnitude: f64,
}

impl SamplingMap {
    /// An all-zero map: the output pixel does not depend on the input.
    pub fn is_disconnected(&self) -> bool {
        self.max == 0.0
    }

    pub fn get(&self, frame: usize, row: usize, col: usize) -> f64 {
        self.frames[frame][row * self.width + col]
    }

    /// Positive entries.
    pub fn support(&self) -> Vec<MapEntry> {
        let mut out = Vec::new();
        for (frame, map) in self.frames.iter().enumerate() {
            for (i, &magnitude) in map.iter().enumerate() {
                if magnitude > 0.0 {
                    out.push(MapEntry {
                        frame,
                        row: i / self.width,
                        col: i % self.width,
                        magnitude,
                    });
                }
            }
        }
        out
    }

    /// Magnitude-weighted (row, col) centroid over all frames.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
        for e in self.support() {
            m += e.magnitude;
            r += e.magnitude * e.row as f64;
            c += e.magnitude * e.col as f64;
        }
        (m > 0.0).then(|| (r / m, c / m))
    }

    /// The `k` largest entries, ties broken by (frame, row, col).
    pub fn top(&self, k: usize) -> Vec<MapEntry> {
        let mut all = self.support();
        all.sort_by(|a, b| {
            b.magnitude
                .total_cmp(&a.magnitude)
                .then((a.frame, a.row, a.col).cmp(&(b.frame, b.row, b.col)))
        });
        all.truncate(k);
        all
    }

    /// 8-bit greyscale of one frame, scaled so the global maximum is 255.
    pub fn to_gray(&self, frame: usize) -> Vec<u8> {
        let scale = if self.max > 0.0 { 255.0 / self.max } else { 0.0 };
        self.frames[frame]
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn top_csv(&self, k: usize) -> String {
        let mut out = String::from("rank,frame,row,col,magnitude\n");
        for (i, e) in self.top(k).iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{:e}", i + 1, e.frame, e.row, e.col, e.magnitude);
        }
        out
    }
}

/// Runs `net` on `input`, seeds a unit gradient at `coord` on every output
/// channel of batch item 0, and collects the input-gradient magnitudes.
pub fn sampling_map<T: Scalar, M: Module<T> + ?Sized>(
    net: &mut M,
    input: &Tensor5<T>,
    coord: OutputCoord,
) -> Result<SamplingMap> {
    let out = net.forward(input, true)?;
    let s = out.shape();
    if coord.frame >= s.t || coord.row >= s.h || coord.col >= s.w {
        net.clear_state();
        return Err(Error::OutOfRange {
            what: "output coordinate",
            detail: format!(
                "(frame {}, row {}, col {}) outside output {}x{}x{}",
                coord.frame, coord.row, coord.col, s.t, s.h, s.w
            ),
        });
    }
    let mut seed = Tensor5::zeros(s);
    for c in 0..s.c {
        seed.set(0, c, coord.frame, coord.row, coord.col, T::one());
    }
    let grad = net.backward(&seed);
    net.clear_state();
    let grad = grad?;
    let g = grad.shape();
    let mut frames = vec![vec![0.0; g.plane()]; g.t];
    for c in 0..g.c {
        for (t, map) in frames.iter_mut().enumerate() {
            for (m, v) in map.iter_mut().zip(grad.frame(0, c, t)) {
                *m += v.as_f64().abs();
            }
        }
    }
    let max = frames.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    Ok(SamplingMap {
        coord,
        height: g.h,
        width: g.w,
        frames,
        max,
    })
}

/// Writes `{prefix}_frame{t}.pgm` for every input frame and `{prefix}_top50.csv`.
pub fn emit_map_image(map: &SamplingMap, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for t in 0..map.frames.len() {
        let path = dir.join(format!("{prefix}_frame{t}.pgm"));
        write_pgm(&path, map.width, map.height, &map.to_gray(t))?;
        paths.push(path);
    }
    let csv = dir.join(format!("{prefix}_top50.csv"));
    std::fs::write(&csv, map.top_csv(50))?;
    paths.push(csv);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{Conv3d, Conv3dParams};
    use crate::io::read_pgm;
    use crate::tensor::Shape5;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from(frames: Vec<Vec<f64>>, height: usize, width: usize) -> SamplingMap {
        let max = frames.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        SamplingMap {
            coord: OutputCoord {
                frame: 0,
                row: 0,
                col: 0,
            },
            height,
            width,
            frames,
            max,
        }
    }

    #[test]
    fn plain_conv_footprint_is_three_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Conv3dParams::<f64>::zeros(2, 2, [3; 3], [1; 3], [1; 3]).unwrap();
        p.weight = p.weight.map(|_| 1.0);
        let mut conv = Conv3d::new(p);
        let x = Tensor5::uniform(Shape5::new(1, 2, 3, 9, 9).unwrap(), 1.0, &mut rng);
        let coord = OutputCoord {
            frame: 1,
            row: 4,
            col: 6,
        };
        let map = sampling_map(&mut conv, &x, coord).unwrap();
        let support = map.support();
        assert_eq!(support.len(), 3 * 9);
        assert!(support.iter().all(|e| e.row.abs_diff(4) <= 1 && e.col.abs_diff(6) <= 1));
        assert!(!map.is_disconnected());
    }

    #[test]
    fn zero_network_is_disconnected() {
        let mut conv = Conv3d::new(Conv3dParams::<f64>::zeros(1, 1, [3; 3], [1; 3], [1; 3]).unwrap());
        let x = Tensor5::filled(Shape5::new(1, 1, 2, 5, 5).unwrap(), 1.0);
        let map = sampling_map(
            &mut conv,
            &x,
            OutputCoord {
                frame: 0,
                row: 2,
                col: 2,
            },
        )
        .unwrap();
        assert!(map.is_disconnected());
        assert!(map.centroid().is_none());
        assert!(map.to_gray(0).iter().all(|&p| p == 0));
    }

    #[test]
    fn out_of_range_coordinate() {
        let mut conv = Conv3d::new(Conv3dParams::<f64>::zeros(1, 1, [3; 3], [1; 3], [1; 3]).unwrap());
        let x = Tensor5::filled(Shape5::new(1, 1, 2, 5, 5).unwrap(), 1.0);
        let err = sampling_map(
            &mut conv,
            &x,
            OutputCoord {
                frame: 0,
                row: 5,
                col: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
    }

    #[test]
    fn normalisation_examples() {
        let constant = map_from(vec![vec![0.3; 6]], 2, 3);
        assert!(constant.to_gray(0).iter().all(|&p| p == 255));
        let mut peak = vec![0.0; 6];
        peak[4] = 2.0;
        let single = map_from(vec![peak], 2, 3);
        assert_eq!(single.to_gray(0), vec![0, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn csv_top_entry_is_argmax_and_files_are_written() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = (0..2)
            .map(|_| (0..20).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect())
            .collect();
        let map = map_from(frames, 4, 5);
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_map_image(&map, dir.path(), "map").unwrap();
        assert_eq!(paths.len(), 3);
        let csv = std::fs::read_to_string(&paths[2]).unwrap();
        let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        let best = map.top(1)[0];
        assert_eq!(
            first[..4],
            [
                "1",
                &best.frame.to_string(),
                &best.row.to_string(),
                &best.col.to_string()
            ]
        );
        assert_eq!(best.magnitude, map.max);
        assert_eq!(csv.lines().count(), 1 + 40);
        let (w, h, px) = read_pgm(&std::fs::read(&paths[best.frame]).unwrap()).unwrap();
        assert_eq!((w, h), (5, 4));
        assert_eq!(px[best.row * 5 + best.col], 255);
    }
}
