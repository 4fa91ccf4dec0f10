use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::{description, normal_text, task_texts, TaskKind, CLASS_NAMES, DEFECT_NAMES, PATTERNS};
use crate::error::{Error, Result};
use crate::numcore::{named_rng, Real, Tensor};

pub const ANNOTATIONS: &str = "annotations.json";

/// Defect area bounds as fractions of the image.
pub const MIN_DEFECT_FRAC: f64 = 0.005;
pub const MAX_DEFECT_FRAC: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: usize,
    /// Images per class, split evenly between `train` and `test`.
    pub per_class: usize,
    pub abnormal_fraction: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            per_class: 80,
            abnormal_fraction: 0.5,
            image_size: 64,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "need between 2 and {} classes, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if self.per_class < 4 {
            return Err(Error::Config("need at least 4 images per class".into()));
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Config("abnormal_fraction must be in [0, 1]".into()));
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::Config(
                "image_size must be a multiple of 4 and at least 16".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub class: String,
    pub class_id: usize,
    pub split: String,
    /// `-1` for normal images.
    pub defect_type: i32,
    pub normal_text: String,
    pub instruction: String,
    pub answer: String,
    pub image: String,
    pub mask: String,
}

impl Record {
    pub fn is_abnormal(&self) -> bool {
        self.defect_type >= 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub config: GeneratorConfig,
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

/// One generated image with its mask, before quantisation.
#[derive(Clone, Debug)]
pub struct AnomalySample {
    pub class_id: usize,
    pub defect_type: i32,
    /// `[H, W, 3]` row-major in `[0, 1]`.
    pub image: Vec<f64>,
    /// `[H, W]`, true on defect pixels.
    pub mask: Vec<bool>,
    pub size: usize,
}

/// Per-class texture parameters.
#[derive(Clone, Debug)]
struct Texture {
    family: usize,
    c0: [f64; 3],
    c1: [f64; 3],
    period: f64,
    angle: f64,
    lattice: usize,
}

fn texture(seed: u64, class: usize) -> Texture {
    let mut rng = named_rng(seed, &format!("data.class{class}"));
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [0; 3].map(|_: i32| rng.gen_range(0.33..0.67)) };
    let c0 = color(&mut rng);
    let mut c1 = color(&mut rng);
    // Keep the two colours apart so the pattern is visible.
    if (0..3).map(|i| (c0[i] - c1[i]).abs()).sum::<f64>() < 0.25 {
        for i in 0..3 {
            c1[i] = if c0[i] < 0.5 {
                0.67 - 0.1 * i as f64
            } else {
                0.33 + 0.1 * i as f64
            };
        }
    }
    Texture {
        family: class % PATTERNS.len(),
        c0,
        c1,
        period: rng.gen_range(6.0..14.0),
        angle: rng.gen_range(0.0..PI),
        lattice: rng.gen_range(2..5),
    }
}

fn render_texture(t: &Texture, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ox, oy) = (rng.gen_range(0.0..t.period), rng.gen_range(0.0..t.period));
    let (ca, sa) = (t.angle.cos(), t.angle.sin());
    let n = t.lattice + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut img = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let v: f64 = match t.family {
                0 => 0.5 + 0.5 * (2.0 * PI * (xf * ca + yf * sa) / t.period + phase).sin(),
                1 => {
                    let cx = ((xf + ox) / t.period).floor() as i64;
                    let cy = ((yf + oy) / t.period).floor() as i64;
                    ((cx + cy).rem_euclid(2)) as f64
                }
                2 => {
                    let gx = xf / size as f64 * (n - 1) as f64;
                    let gy = yf / size as f64 * (n - 1) as f64;
                    let (i0, j0) = (gy.floor() as usize, gx.floor() as usize);
                    let (i1, j1) = ((i0 + 1).min(n - 1), (j0 + 1).min(n - 1));
                    let (fy, fx) = (gy - i0 as f64, gx - j0 as f64);
                    let at = |i: usize, j: usize| lattice[i * n + j];
                    let top = at(i0, j0) * (1.0 - fx) + at(i0, j1) * fx;
                    let bot = at(i1, j0) * (1.0 - fx) + at(i1, j1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
                _ => {
                    let u = (xf * ca + yf * sa) / (size as f64 * 1.5) + 0.5;
                    (0.7 * u + 0.3 * (0.5 + 0.5 * (2.0 * PI * yf / (2.0 * t.period) + phase).sin())).clamp(0.0, 1.0)
                }
            };
            for c in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                img[(y * size + x) * 3 + c] = (t.c0[c] + (t.c1[c] - t.c0[c]) * v + noise).clamp(0.3, 0.7);
            }
        }
    }
    img
}

/// Pixels of one defect instance.
fn defect_shape(kind: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut m = vec![false; size * size];
    let s = size as f64;
    if kind == 0 {
        let len = rng.gen_range(0.2 * s..0.45 * s);
        let ang = rng.gen_range(0.0..PI);
        let (cx, cy) = (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s));
        let (dx, dy) = (ang.cos() * len / 2.0, ang.sin() * len / 2.0);
        let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
        let half = rng.gen_range(0.8..1.4);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (vx, vy) = (bx - ax, by - ay);
                let t = (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                let d = ((px - ax - t * vx).powi(2) + (py - ay - t * vy).powi(2)).sqrt();
                m[y * size + x] = d <= half;
            }
        }
    } else {
        let rx = rng.gen_range(0.05 * s..0.14 * s);
        let ry = rng.gen_range(0.05 * s..0.14 * s);
        let rot = rng.gen_range(0.0..PI);
        let (cx, cy) = (rng.gen_range(0.15 * s..0.85 * s), rng.gen_range(0.15 * s..0.85 * s));
        let (c, sn) = (rot.cos(), rot.sin());
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (px * c + py * sn, -px * sn + py * c);
                m[y * size + x] = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
            }
        }
    }
    m
}

fn paint_defect(img: &mut [f64], mask: &[bool], kind: usize, size: usize, rng: &mut ChaCha8Rng) {
    let bright = rng.gen_bool(0.5);
    let tint = [0; 3].map(|_: i32| rng.gen_range(0.0..0.08));
    let cell = rng.gen_range(1..3);
    let hi = [0; 3].map(|_: i32| rng.gen_range(0.85..1.0));
    for y in 0..size {
        for x in 0..size {
            if !mask[y * size + x] {
                continue;
            }
            for c in 0..3 {
                let p = &mut img[(y * size + x) * 3 + c];
                *p = match kind {
                    0 => {
                        if bright {
                            0.95 - tint[c]
                        } else {
                            0.05 + tint[c]
                        }
                    }
                    1 => {
                        if bright {
                            *p * 0.25 + 0.75
                        } else {
                            *p * 0.25
                        }
                    }
                    2 => {
                        if ((x / cell) + (y / cell)) % 2 == 0 {
                            hi[c]
                        } else {
                            0.05 + tint[c]
                        }
                    }
                    _ => 0.02 + tint[c] * 0.5 * (y as f64 / size as f64),
                };
            }
        }
    }
}

/// Renders one sample. Abnormal samples carry 1 to 3 instances of a single
/// defect type covering between 0.5% and 10% of the image.
pub fn render_sample(seed: u64, class: usize, index: usize, defect_type: i32, size: usize) -> AnomalySample {
    let tex = texture(seed, class);
    let mut rng = named_rng(seed, &format!("data.sample{class}.{index}"));
    let mut image = render_texture(&tex, size, &mut rng);
    let mut mask = vec![false; size * size];
    if defect_type >= 0 {
        let kind = defect_type as usize;
        let area = (size * size) as f64;
        loop {
            let count = rng.gen_range(1..=3);
            let mut m = vec![false; size * size];
            for _ in 0..count {
                for (a, b) in m.iter_mut().zip(defect_shape(kind, size, &mut rng)) {
                    *a |= b;
                }
            }
            let frac = m.iter().filter(|&&b| b).count() as f64 / area;
            if (MIN_DEFECT_FRAC..=MAX_DEFECT_FRAC).contains(&frac) {
                mask = m;
                break;
            }
        }
        paint_defect(&mut image, &mask, kind, size, &mut rng);
    }
    AnomalySample {
        class_id: class,
        defect_type,
        image,
        mask,
        size,
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png_rgb(path: &Path, size: usize, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    let img = RgbImage::from_raw(size as u32, size as u32, bytes).expect("rgb buffer");
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn save_png_gray(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, data.to_vec()).expect("gray buffer");
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Writes a dataset under `root`. A non-empty `root` is refused unless
/// `overwrite` is set, in which case it is removed first.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path, overwrite: bool) -> Result<Annotations> {
    cfg.validate()?;
    if root.exists() {
        let nonempty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if nonempty {
            if !overwrite {
                return Err(Error::Dataset(format!(
                    "{} is not empty; pass the overwrite flag to replace it",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    let mut records = Vec::new();
    let classes: Vec<String> = CLASS_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect();
    for (c, name) in classes.iter().enumerate() {
        let normal = normal_text(name, PATTERNS[c % PATTERNS.len()]);
        let mut rng = named_rng(cfg.seed, &format!("data.labels{c}"));
        let abnormal = (cfg.per_class as f64 * cfg.abnormal_fraction).round() as usize;
        let half = cfg.per_class / 2;
        for split in ["train", "test"] {
            fs::create_dir_all(root.join(name).join(split).join("masks")).map_err(|e| Error::io(root, e))?;
        }
        for i in 0..cfg.per_class {
            let split = if i < half { "train" } else { "test" };
            // Alternate labels within each split so both halves are balanced.
            let local = if i < half { i } else { i - half };
            let n_split = if i < half { half } else { cfg.per_class - half };
            let abn_split = if i < half {
                abnormal / 2
            } else {
                abnormal - abnormal / 2
            };
            let is_abnormal = local * abn_split / n_split.max(1) != (local + 1) * abn_split / n_split.max(1);
            let defect_type = if is_abnormal {
                rng.gen_range(0..DEFECT_NAMES.len()) as i32
            } else {
                -1
            };
            let sample = render_sample(cfg.seed, c, i, defect_type, cfg.image_size);
            let id = format!("{name}_{split}_{i:03}");
            let image = format!("{name}/{split}/{id}.png");
            let mask = format!("{name}/{split}/masks/{id}.png");
            save_png_rgb(&root.join(&image), cfg.image_size, &sample.image)?;
            let mbytes: Vec<u8> = sample.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
            save_png_gray(&root.join(&mask), cfg.image_size, cfg.image_size, &mbytes)?;
            let (instruction, answer) = task_texts(TaskKind::SegAnswer, name, &normal, defect_type);
            debug_assert!(answer.starts_with(&description(name, defect_type)));
            records.push(Record {
                id,
                class: name.clone(),
                class_id: c,
                split: split.into(),
                defect_type,
                normal_text: normal.clone(),
                instruction,
                answer,
                image,
                mask,
            });
        }
    }
    let ann = Annotations {
        config: cfg.clone(),
        classes,
        records,
    };
    let path = root.join(ANNOTATIONS);
    fs::write(&path, serde_json::to_string_pretty(&ann)?).map_err(|e| Error::io(&path, e))?;
    Ok(ann)
}

/// An on-disk dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub annotations: Annotations,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(ANNOTATIONS);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let annotations: Annotations = serde_json::from_str(&text)?;
        for r in &annotations.records {
            if r.class_id >= annotations.classes.len() || annotations.classes[r.class_id] != r.class {
                return Err(Error::Dataset(format!("record {} names an unknown class", r.id)));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            annotations,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.annotations.records
    }

    pub fn image_size(&self) -> usize {
        self.annotations.config.image_size
    }

    pub fn load_image<R: Real>(&self, r: &Record) -> Result<Tensor<R>> {
        read_rgb(&self.root.join(&r.image))
    }

    /// `[H, W]` with values in {0, 1}.
    pub fn load_mask<R: Real>(&self, r: &Record) -> Result<Tensor<R>> {
        let path = self.root.join(&r.mask);
        let img = image::open(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| if p.0[0] >= 128 { R::one() } else { R::zero() })
            .collect();
        Tensor::new(&[h as usize, w as usize], data)
    }
}

/// Reads any image file as `[H, W, 3]` in `[0, 1]`.
pub fn read_rgb<R: Real>(path: &Path) -> Result<Tensor<R>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| R::lit(b as f64 / 255.0)).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}
