//! Synthetic RGB-D saliency data.
//!
//! Every sample has one salient shape nearest to the camera and one to three
//! distractors behind it. The first distractor always copies the object's
//! colour, so colour alone cannot find the object while depth can. All pixel
//! values are multiples of 1/255, so a sample written to disk and read back is
//! bit-identical to the in-memory one.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image_io;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W` in `[0,1]`.
    pub rgb: Tensor<f32>,
    /// `1×H×W` in `[0,1]`, larger is nearer.
    pub depth: Tensor<f32>,
    /// `1×H×W` binary mask of the salient object.
    pub gt: Tensor<f32>,
    pub seed: u64,
    pub index: usize,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.gt.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    /// Random shape covering about `area` of a `size×size` image.
    fn random(rng: &mut ChaCha8Rng, size: usize, area: f64) -> Self {
        let s = size as f64;
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let ellipse = rng.gen_bool(0.5);
        // bounding-box extents in pixels
        let box_area = if ellipse {
            area * 4.0 / std::f64::consts::PI
        } else {
            area
        } * s
            * s;
        let h = (box_area * aspect).sqrt().min(s - 2.0);
        let w = (box_area / aspect).sqrt().min(s - 2.0);
        let y0 = rng.gen_range(0.0..=(s - h));
        let x0 = rng.gen_range(0.0..=(s - w));
        if ellipse {
            Shape::Ellipse {
                cy: y0 + h / 2.0,
                cx: x0 + w / 2.0,
                ry: h / 2.0,
                rx: w / 2.0,
            }
        } else {
            Shape::Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
            }
        }
    }

    /// Membership of the pixel centre `(r + 0.5, c + 0.5)`.
    fn contains(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn q(v: f64) -> f32 {
    image_io::quantize(v as f32) as f32 / 255.0
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
    ]
}

/// Salient-object area as a fraction of the image.
pub const OBJECT_AREA: (f64, f64) = (0.15, 0.40);
const DISTRACTOR_AREA: (f64, f64) = (0.04, 0.12);
const MIN_FG_RATIO: f64 = 0.02;
const MAX_FG_RATIO: f64 = 0.5;

fn sample_with(rng: &mut ChaCha8Rng, size: usize, seed: u64, index: usize) -> Sample {
    let n = size * size;
    let s = size as f64;

    let background = random_color(rng);
    let object_color = loop {
        let c = random_color(rng);
        if color_distance(c, background) > 0.45 {
            break c;
        }
    };
    // texture: two random gratings plus per-pixel noise
    let (f1, f2): (f64, f64) = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0));
    let (p1, p2): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));

    let mut rgb = vec![[0.0f64; 3]; n];
    let mut depth = vec![0.0f64; n];
    let (d0, gy, gx) = (
        rng.gen_range(0.1..0.25),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
    );
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 / s, c as f64 / s);
            let tex = 0.06 * ((f1 * y * 6.3 + p1).sin() + (f2 * x * 6.3 + p2).sin());
            let i = r * size + c;
            for ch in 0..3 {
                rgb[i][ch] = background[ch] + tex + rng.gen_range(-0.04..0.04);
            }
            depth[i] = d0 + 0.1 + gy * y + gx * x + rng.gen_range(-0.03..0.03);
        }
    }

    let distractors = rng.gen_range(1..=3);
    for k in 0..distractors {
        let area = rng.gen_range(DISTRACTOR_AREA.0..DISTRACTOR_AREA.1);
        let shape = Shape::random(rng, size, area);
        let color = if k == 0 { object_color } else { random_color(rng) };
        let d = rng.gen_range(0.4..0.55);
        for r in 0..size {
            for c in 0..size {
                if shape.contains(r, c) {
                    let i = r * size + c;
                    for ch in 0..3 {
                        rgb[i][ch] = color[ch] + rng.gen_range(-0.04..0.04);
                    }
                    depth[i] = d + rng.gen_range(-0.02..0.02);
                }
            }
        }
    }

    let mut gt = vec![0.0f32; n];
    loop {
        let area = rng.gen_range(OBJECT_AREA.0..OBJECT_AREA.1);
        let shape = Shape::random(rng, size, area);
        let mask: Vec<bool> = (0..n).map(|i| shape.contains(i / size, i % size)).collect();
        let ratio = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        if !(MIN_FG_RATIO..=MAX_FG_RATIO).contains(&ratio) {
            continue;
        }
        let d = rng.gen_range(0.75..0.9);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for ch in 0..3 {
                rgb[i][ch] = object_color[ch] + rng.gen_range(-0.04..0.04);
            }
            depth[i] = d + rng.gen_range(-0.02..0.02);
            gt[i] = 1.0;
        }
        break;
    }

    let mut planar = vec![0.0f32; 3 * n];
    for (i, px) in rgb.iter().enumerate() {
        for ch in 0..3 {
            planar[ch * n + i] = q(px[ch]);
        }
    }
    Sample {
        rgb: Tensor::new(&[3, size, size], planar).expect("rgb shape"),
        depth: Tensor::new(&[1, size, size], depth.iter().map(|&d| q(d)).collect()).expect("depth shape"),
        gt: Tensor::new(&[1, size, size], gt).expect("gt shape"),
        seed,
        index,
    }
}

/// Sample `index` of the dataset identified by `seed`; independent of `n`.
pub fn generate_sample(size: usize, seed: u64, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_with(&mut rng, size, seed, index)
}

pub fn generate_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if size < 16 {
        return Err(Error::Config(format!(
            "synthetic images must be at least 16 pixels, got {size}"
        )));
    }
    Ok((0..n).map(|i| generate_sample(size, seed, i)).collect())
}

fn file_stem(index: usize) -> String {
    format!("{index:04}")
}

/// Write `NNNN_rgb.ppm`, `NNNN_depth.pgm`, `NNNN_gt.pgm` per sample into `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in samples {
        let stem = file_stem(s.index);
        image_io::write(&dir.join(format!("{stem}_rgb.ppm")), &s.rgb)?;
        image_io::write(&dir.join(format!("{stem}_depth.pgm")), &s.depth)?;
        image_io::write(&dir.join(format!("{stem}_gt.pgm")), &s.gt)?;
    }
    Ok(())
}

/// Read every `NNNN_rgb.ppm` triple in `dir`, ordered by index.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix("_rgb.ppm") {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no *_rgb.ppm samples in {}", dir.display()),
        )));
    }
    indices.sort_unstable();
    indices
        .into_iter()
        .map(|i| {
            let stem = file_stem(i);
            let rgb = image_io::read_rgb(&dir.join(format!("{stem}_rgb.ppm")))?;
            let depth = image_io::read_gray(&dir.join(format!("{stem}_depth.pgm")))?;
            let gt = image_io::read_mask(&dir.join(format!("{stem}_gt.pgm")))?;
            let (_, h, w) = rgb.dims3("sample")?;
            if depth.shape() != [1, h, w] || gt.shape() != [1, h, w] {
                return Err(Error::Format(format!("sample {stem}: rgb, depth and gt sizes differ")));
            }
            Ok(Sample {
                rgb,
                depth,
                gt,
                seed: 0,
                index: i,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(s: &Sample) -> (f64, f64, f64) {
        let gt = s.gt.data();
        let d = s.depth.data();
        let fg = gt.iter().filter(|&&g| g == 1.0).count();
        let inside: f64 = d
            .iter()
            .zip(gt)
            .filter(|(_, &g)| g == 1.0)
            .map(|(&v, _)| v as f64)
            .sum();
        let outside: f64 = d
            .iter()
            .zip(gt)
            .filter(|(_, &g)| g == 0.0)
            .map(|(&v, _)| v as f64)
            .sum();
        let n = gt.len();
        (fg as f64 / n as f64, inside / fg as f64, outside / (n - fg) as f64)
    }

    #[test]
    fn generator_contract() {
        for s in generate_dataset(40, 64, 3).unwrap() {
            let (ratio, din, dout) = stats(&s);
            assert!((MIN_FG_RATIO..=MAX_FG_RATIO).contains(&ratio), "ratio {ratio}");
            assert!(din > dout, "depth inside {din} outside {dout}");
            assert!(s.gt.data().iter().all(|&g| g == 0.0 || g == 1.0));
            assert!(s
                .rgb
                .data()
                .iter()
                .chain(s.depth.data())
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_dataset(4, 32, 9).unwrap(), generate_dataset(4, 32, 9).unwrap());
        assert_ne!(
            generate_dataset(1, 32, 9).unwrap(),
            generate_dataset(1, 32, 10).unwrap()
        );
        // sample i does not depend on the dataset length
        assert_eq!(generate_dataset(6, 32, 9).unwrap()[3], generate_sample(32, 9, 3));
    }

    #[test]
    fn colour_alone_is_ambiguous() {
        // the first distractor shares the object colour: some non-salient
        // pixels sit close to the mean object colour
        let s = generate_sample(64, 5, 0);
        let n = 64 * 64;
        let gt = s.gt.data();
        let px = |i: usize| [0, 1, 2].map(|ch| s.rgb.data()[ch * n + i] as f64);
        let fg: Vec<usize> = (0..n).filter(|&i| gt[i] == 1.0).collect();
        let mean = [0, 1, 2].map(|ch| fg.iter().map(|&i| px(i)[ch]).sum::<f64>() / fg.len() as f64);
        let lookalikes = (0..n)
            .filter(|&i| gt[i] == 0.0 && color_distance(px(i), mean) < 0.08)
            .count();
        assert!(lookalikes > 0);
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(3, 32, 1).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.rgb, b.rgb);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.gt, b.gt);
        }
    }
}
