//! Synthetic stereo waterdrop samples with exact ground truth.
//!
//! Backgrounds are stacks of fronto-parallel layers, each carrying a smooth
//! procedural texture and one integer disparity. The right view samples every
//! layer `d` columns further right than the left view, so a left pixel `x`
//! corresponds to right pixel `x - d`. Drops are blended in with
//! `I = (1 - T) * O + T * R`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{format_kv, read_array, read_kv, write_array};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropMode {
    Drops,
    Mist,
    Mixed,
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropMode::Drops => "drops",
            DropMode::Mist => "mist",
            DropMode::Mixed => "mixed",
        })
    }
}

impl FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "drops" => Ok(DropMode::Drops),
            "mist" => Ok(DropMode::Mist),
            "mixed" => Ok(DropMode::Mixed),
            other => Err(Error::Config(format!("unknown drop mode `{other}` (drops|mist|mixed)"))),
        }
    }
}

/// Blob population parameters: count range, radius range (pixels), peak
/// transparency range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobStats {
    pub count: (usize, usize),
    pub radius: (f64, f64),
    pub peak: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub layers: usize,
    /// Inclusive integer disparity range in pixels.
    pub disparity: (usize, usize),
    pub mode: DropMode,
    pub drops: BlobStats,
    pub mist: BlobStats,
    /// Scales T independently per colour channel.
    pub per_channel_t: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 96,
            height: 48,
            layers: 3,
            disparity: (2, 10),
            mode: DropMode::Mixed,
            drops: BlobStats {
                count: (8, 14),
                radius: (4.0, 11.0),
                peak: (0.6, 0.95),
            },
            mist: BlobStats {
                count: (350, 600),
                radius: (1.0, 2.5),
                peak: (0.3, 0.6),
            },
            per_channel_t: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::Config(format!(
                "image dims {}x{} must be positive multiples of 16",
                self.width, self.height
            )));
        }
        let (lo, hi) = self.disparity;
        if lo > hi || hi > self.width / 4 {
            return Err(Error::Config(format!(
                "disparity range {lo}..={hi} must lie within [0, {}]",
                self.width / 4
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("scene needs at least one layer".into()));
        }
        for s in [self.drops, self.mist] {
            if s.peak.0 < 0.0 || s.peak.1 > 0.95 || s.peak.0 > s.peak.1 || s.count.0 > s.count.1 {
                return Err(Error::Config(format!("invalid blob statistics {s:?}")));
            }
        }
        Ok(())
    }
}

/// Smooth procedural texture: base colour plus a few oriented sinusoids.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    fn random(rng: &mut impl Rng, width: usize) -> Self {
        let base = [(); 3].map(|_| rng.random_range(0.25..0.75));
        let waves = (0..5)
            .map(|_| {
                let period = rng.random_range(12.0..(width as f64 / 2.0));
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                let amp = [(); 3].map(|_| rng.random_range(-0.15..0.15));
                ([k * angle.cos(), k * angle.sin()], rng.random_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        Texture { base, waves }
    }

    fn sample(&self, x: i64, y: i64) -> [f32; 3] {
        let mut c = self.base;
        for (k, phase, amp) in &self.waves {
            let s = (k[0] * x as f64 + k[1] * y as f64 + phase).sin();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0) as f32)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    disparity: usize,
    texture: Texture,
    /// Ellipse (cx, cy, rx, ry) in left-image coordinates; `None` = full plane.
    support: Option<(f64, f64, f64, f64)>,
}

impl Layer {
    fn covers(&self, x: i64, y: i64) -> bool {
        match self.support {
            None => true,
            Some((cx, cy, rx, ry)) => {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn scene_layers(spec: &SceneSpec) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut disps: Vec<usize> = (0..spec.layers)
        .map(|_| rng.random_range(spec.disparity.0..=spec.disparity.1))
        .collect();
    disps.sort_unstable();
    disps
        .into_iter()
        .enumerate()
        .map(|(i, disparity)| {
            let texture = Texture::random(&mut rng, spec.width);
            let support = (i > 0).then(|| {
                (
                    rng.random_range(0.0..w),
                    rng.random_range(0.0..h),
                    rng.random_range(w / 8.0..w / 3.0),
                    rng.random_range(h / 5.0..h / 2.0),
                )
            });
            Layer {
                disparity,
                texture,
                support,
            }
        })
        .collect()
}

/// Index of the frontmost layer seen at left pixel `(x, y)`.
fn front_left(layers: &[Layer], x: i64, y: i64) -> usize {
    (0..layers.len()).rev().find(|&k| layers[k].covers(x, y)).unwrap_or(0)
}

/// Index of the frontmost layer seen at right pixel `(x, y)`.
fn front_right(layers: &[Layer], x: i64, y: i64) -> usize {
    (0..layers.len())
        .rev()
        .find(|&k| layers[k].covers(x + layers[k].disparity as i64, y))
        .unwrap_or(0)
}

/// Clean stereo pair with per-pixel disparity and validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub clean_l: Tensor<f32>,
    pub clean_r: Tensor<f32>,
    pub disp_l: Tensor<f32>,
    pub disp_r: Tensor<f32>,
    pub mask_l: Tensor<f32>,
    pub mask_r: Tensor<f32>,
}

pub fn gen_background_pair(spec: &SceneSpec) -> Result<Background> {
    spec.validate()?;
    let layers = scene_layers(spec);
    let (w, h) = (spec.width, spec.height);
    let mut bg = Background {
        clean_l: Tensor::zeros(&[1, 3, h, w]),
        clean_r: Tensor::zeros(&[1, 3, h, w]),
        disp_l: Tensor::zeros(&[1, 1, h, w]),
        disp_r: Tensor::zeros(&[1, 1, h, w]),
        mask_l: Tensor::zeros(&[1, 1, h, w]),
        mask_r: Tensor::zeros(&[1, 1, h, w]),
    };
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as i64, y as i64);

            let kl = front_left(&layers, xi, yi);
            let dl = layers[kl].disparity as i64;
            let cl = layers[kl].texture.sample(xi, yi);
            let xr = xi - dl;
            let valid_l = xr >= 0 && front_right(&layers, xr, yi) == kl;

            let kr = front_right(&layers, xi, yi);
            let dr = layers[kr].disparity as i64;
            let cr = layers[kr].texture.sample(xi + dr, yi);
            let xl = xi + dr;
            let valid_r = xl < w as i64 && front_left(&layers, xl, yi) == kr;

            for c in 0..3 {
                bg.clean_l.set4(0, c, y, x, cl[c]);
                bg.clean_r.set4(0, c, y, x, cr[c]);
            }
            bg.disp_l.set4(0, 0, y, x, dl as f32);
            bg.disp_r.set4(0, 0, y, x, dr as f32);
            bg.mask_l.set4(0, 0, y, x, if valid_l { 1.0 } else { 0.0 });
            bg.mask_r.set4(0, 0, y, x, if valid_r { 1.0 } else { 0.0 });
        }
    }
    Ok(bg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

/// Resolves the drop type of one sample; `Mixed` picks either with equal
/// probability from the sample's drop seed.
pub fn resolve_mode(mode: DropMode, drop_seed: u64) -> DropMode {
    match mode {
        DropMode::Mixed => {
            let mut rng = ChaCha8Rng::seed_from_u64(drop_seed ^ 0x6d69_7865_6421);
            if rng.random_bool(0.5) {
                DropMode::Drops
            } else {
                DropMode::Mist
            }
        }
        m => m,
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    peak: f64,
}

impl Blob {
    /// Squared ellipse-normalised distance of `(x, y)` from the centre.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v
    }

    fn transparency(&self, x: f64, y: f64) -> f64 {
        let r2 = self.rho2(x, y);
        if r2 > 2.25 {
            0.0
        } else {
            self.peak * (-2.0 * r2).exp()
        }
    }
}

fn box_blur(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, c, h, w) = img.dims4().expect("image");
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                let mut n = 0.0f32;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += img.at4(0, ch, yy, xx);
                        n += 1.0;
                    }
                }
                out.set4(0, ch, y, x, acc / n);
            }
        }
    }
    out
}

fn bilinear(img: &Tensor<f32>, ch: usize, x: f64, y: f64) -> f32 {
    let (_, _, h, w) = img.dims4().expect("image");
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img.at4(0, ch, y0, x0) * (1.0 - fx) + img.at4(0, ch, y0, x1) * fx;
    let bottom = img.at4(0, ch, y1, x0) * (1.0 - fx) + img.at4(0, ch, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Transparency `T` and drop appearance `R` for one view. Both are
/// `1 x 3 x H x W`; `T` stays within `[0, 0.95]`.
pub fn gen_waterdrops(spec: &SceneSpec, mode: DropMode, drop_seed: u64, view: View, clean: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let stream = match view {
        View::Left => 0x4c45_4654u64,
        View::Right => 0x5249_4748u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(drop_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream);
    let (w, h) = (spec.width, spec.height);
    let stats = match resolve_mode(mode, drop_seed) {
        DropMode::Mist => spec.mist,
        _ => spec.drops,
    };
    let count = rng.random_range(stats.count.0..=stats.count.1);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let r = rng.random_range(stats.radius.0..=stats.radius.1);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Blob {
                cx: rng.random_range(0.0..w as f64),
                cy: rng.random_range(0.0..h as f64),
                rx: r,
                ry: r * rng.random_range(0.6..1.4),
                cos: angle.cos(),
                sin: angle.sin(),
                peak: rng.random_range(stats.peak.0..=stats.peak.1),
            }
        })
        .collect();
    let channel_gain: [f64; 3] = if spec.per_channel_t {
        [(); 3].map(|_| rng.random_range(0.85..=1.0))
    } else {
        [1.0; 3]
    };
    let offset = rng.random_range(0.15..0.3) as f32;
    let blurred = box_blur(&box_blur(clean));

    let mut t = Tensor::zeros(&[1, 3, h, w]);
    let mut r = Tensor::zeros(&[1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let mut best: Option<(f64, &Blob)> = None;
            for b in &blobs {
                let tv = b.transparency(px, py);
                if tv > best.map_or(0.0, |(v, _)| v) {
                    best = Some((tv, b));
                }
            }
            // inside a drop the scene appears shrunk and inverted about its centre
            let (sx, sy) = match best {
                Some((_, b)) => (b.cx - 0.8 * (px - b.cx), b.cy - 0.8 * (py - b.cy)),
                None => (px, py),
            };
            let tv = best.map_or(0.0, |(v, _)| v);
            for c in 0..3 {
                t.set4(0, c, y, x, (tv * channel_gain[c]).clamp(0.0, 1.0) as f32);
                r.set4(0, c, y, x, (bilinear(&blurred, c, sx, sy) + offset).clamp(0.0, 1.0));
            }
        }
    }
    (t, r)
}

/// `I = (1 - T) * O + T * R`, elementwise, clamped to `[0, 1]`.
pub fn compose(clean: &Tensor<f32>, t: &Tensor<f32>, r: &Tensor<f32>) -> Result<Tensor<f32>> {
    if clean.shape() != t.shape() || clean.shape() != r.shape() {
        return Err(Error::shape("compose", clean.shape(), t.shape()));
    }
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("compose", "transparency outside [0, 1]"));
    }
    let data = clean
        .data()
        .iter()
        .zip(t.data())
        .zip(r.data())
        .map(|((&o, &tv), &rv)| blend(o, tv, rv).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(clean.shape(), data)
}

/// The unclamped formation model for one element.
#[inline]
pub fn blend(o: f32, t: f32, r: f32) -> f32 {
    (1.0 - t) * o + t * r
}

/// One corrupted stereo pair with every ground-truth layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub seed: u64,
    pub drop_mode: DropMode,
    pub input_l: Tensor<f32>,
    pub input_r: Tensor<f32>,
    pub clean_l: Tensor<f32>,
    pub clean_r: Tensor<f32>,
    pub trans_l: Tensor<f32>,
    pub trans_r: Tensor<f32>,
    pub drop_l: Tensor<f32>,
    pub drop_r: Tensor<f32>,
    pub disp_l: Tensor<f32>,
    pub disp_r: Tensor<f32>,
    pub mask_l: Tensor<f32>,
    pub mask_r: Tensor<f32>,
}

pub const ARRAY_NAMES: [&str; 12] = [
    "input_l", "input_r", "clean_l", "clean_r", "trans_l", "trans_r", "drop_l", "drop_r", "disp_l",
    "disp_r", "mask_l", "mask_r",
];

impl StereoSample {
    pub fn width(&self) -> usize {
        self.input_l.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.input_l.shape()[2]
    }

    pub fn arrays(&self) -> [(&'static str, &Tensor<f32>); 12] {
        [
            ("input_l", &self.input_l),
            ("input_r", &self.input_r),
            ("clean_l", &self.clean_l),
            ("clean_r", &self.clean_r),
            ("trans_l", &self.trans_l),
            ("trans_r", &self.trans_r),
            ("drop_l", &self.drop_l),
            ("drop_r", &self.drop_r),
            ("disp_l", &self.disp_l),
            ("disp_r", &self.disp_r),
            ("mask_l", &self.mask_l),
            ("mask_r", &self.mask_r),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Tensor<f32>; 12] {
        [
            &mut self.input_l,
            &mut self.input_r,
            &mut self.clean_l,
            &mut self.clean_r,
            &mut self.trans_l,
            &mut self.trans_r,
            &mut self.drop_l,
            &mut self.drop_r,
            &mut self.disp_l,
            &mut self.disp_r,
            &mut self.mask_l,
            &mut self.mask_r,
        ]
    }

    /// Mirrors every array top-to-bottom. Disparities are unchanged.
    pub fn flip_vertical(&self) -> StereoSample {
        let mut out = self.clone();
        for a in out.arrays_mut() {
            *a = flip(a, true);
        }
        out
    }

    /// Mirrors every array left-to-right and swaps the views, so the new left
    /// view is the mirrored old right view and disparities stay non-negative.
    pub fn flip_horizontal(&self) -> StereoSample {
        let f = |t: &Tensor<f32>| flip(t, false);
        StereoSample {
            seed: self.seed,
            drop_mode: self.drop_mode,
            input_l: f(&self.input_r),
            input_r: f(&self.input_l),
            clean_l: f(&self.clean_r),
            clean_r: f(&self.clean_l),
            trans_l: f(&self.trans_r),
            trans_r: f(&self.trans_l),
            drop_l: f(&self.drop_r),
            drop_r: f(&self.drop_l),
            disp_l: f(&self.disp_r),
            disp_r: f(&self.disp_l),
            mask_l: f(&self.mask_r),
            mask_r: f(&self.mask_l),
        }
    }
}

fn flip(t: &Tensor<f32>, vertical: bool) -> Tensor<f32> {
    let (n, c, h, w) = t.dims4().expect("image array");
    let mut out = Tensor::zeros(t.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
                    out.set4(b, ch, y, x, t.at4(b, ch, sy, sx));
                }
            }
        }
    }
    out
}

/// Generates one sample: background from `spec.seed`, drops from `drop_seed`.
pub fn generate(spec: &SceneSpec, drop_seed: u64) -> Result<StereoSample> {
    let bg = gen_background_pair(spec)?;
    let mode = resolve_mode(spec.mode, drop_seed);
    let (trans_l, drop_l) = gen_waterdrops(spec, mode, drop_seed, View::Left, &bg.clean_l);
    let (trans_r, drop_r) = gen_waterdrops(spec, mode, drop_seed, View::Right, &bg.clean_r);
    Ok(StereoSample {
        seed: drop_seed,
        drop_mode: mode,
        input_l: compose(&bg.clean_l, &trans_l, &drop_l)?,
        input_r: compose(&bg.clean_r, &trans_r, &drop_r)?,
        clean_l: bg.clean_l,
        clean_r: bg.clean_r,
        trans_l,
        trans_r,
        drop_l,
        drop_r,
        disp_l: bg.disp_l,
        disp_r: bg.disp_r,
        mask_l: bg.mask_l,
        mask_r: bg.mask_r,
    })
}

/// Scene and drop seeds for sample `k` of scene `s` in a dataset seeded by
/// `seed`.
pub fn dataset_seeds(seed: u64, scene: usize, sample: usize) -> (u64, u64) {
    let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(scene as u64);
    let drop_seed = scene_seed.wrapping_mul(7919).wrapping_add(sample as u64 + 1);
    (scene_seed, drop_seed)
}

pub fn sample_dir_name(scene: usize, sample: usize) -> String {
    format!("scene{scene:04}_s{sample:02}")
}

/// Writes `scenes * per_scene` samples under `out`, one directory each.
pub fn generate_dataset(base: &SceneSpec, scenes: usize, per_scene: usize, seed: u64, out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut names = Vec::with_capacity(scenes * per_scene);
    for s in 0..scenes {
        let (scene_seed, _) = dataset_seeds(seed, s, 0);
        let spec = SceneSpec {
            seed: scene_seed,
            ..base.clone()
        };
        for k in 0..per_scene {
            let (_, drop_seed) = dataset_seeds(seed, s, k);
            let sample = generate(&spec, drop_seed)?;
            let name = sample_dir_name(s, k);
            write_sample(&sample, &out.join(&name))?;
            names.push(name);
        }
    }
    Ok(names)
}

pub fn write_sample(sample: &StereoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = format_kv([
        ("format_version", FORMAT_VERSION.to_string()),
        ("width", sample.width().to_string()),
        ("height", sample.height().to_string()),
        ("seed", sample.seed.to_string()),
        ("drop_mode", sample.drop_mode.to_string()),
        ("arrays", ARRAY_NAMES.join(",")),
    ]);
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    for (name, t) in sample.arrays() {
        write_array(&dir.join(format!("{name}.bin")), t)?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<StereoSample> {
    let mpath = dir.join("manifest.txt");
    let kv = read_kv(&mpath)?;
    let field = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Manifest {
            path: mpath.clone(),
            msg: format!("missing `{k}`"),
        })
    };
    let num = |k: &str| -> Result<u64> {
        field(k)?.parse().map_err(|_| Error::Manifest {
            path: mpath.clone(),
            msg: format!("`{k}` is not an integer"),
        })
    };
    let version = num("format_version")?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Manifest {
            path: mpath.clone(),
            msg: format!("unsupported format_version {version}"),
        });
    }
    let (w, h) = (num("width")? as usize, num("height")? as usize);
    let seed = num("seed")?;
    let drop_mode: DropMode = field("drop_mode")?.parse().map_err(|e: Error| Error::Manifest {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    let listed: Vec<&str> = field("arrays")?.split(',').map(str::trim).collect();
    let load = |name: &str| -> Result<Tensor<f32>> {
        if !listed.contains(&name) {
            return Err(Error::Manifest {
                path: mpath.clone(),
                msg: format!("array `{name}` not listed"),
            });
        }
        let path = dir.join(format!("{name}.bin"));
        let t = read_array(&path)?;
        let (_, _, th, tw) = t.dims4()?;
        if (tw, th) != (w, h) {
            return Err(Error::DimMismatch {
                path,
                manifest: (w, h),
                payload: (tw, th),
            });
        }
        Ok(t)
    };
    Ok(StereoSample {
        seed,
        drop_mode,
        input_l: load("input_l")?,
        input_r: load("input_r")?,
        clean_l: load("clean_l")?,
        clean_r: load("clean_r")?,
        trans_l: load("trans_l")?,
        trans_r: load("trans_r")?,
        drop_l: load("drop_l")?,
        drop_r: load("drop_r")?,
        disp_l: load("disp_l")?,
        disp_r: load("disp_r")?,
        mask_l: load("mask_l")?,
        mask_r: load("mask_r")?,
    })
}

/// Sample directories (those holding a manifest) directly under `dir`,
/// sorted by name; `dir` itself if it is a sample.
pub fn list_samples(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if dir.join("manifest.txt").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<StereoSample>> {
    let dirs = list_samples(dir)?;
    if dirs.is_empty() {
        return Err(Error::Manifest {
            path: dir.to_path_buf(),
            msg: "no sample directories found".into(),
        });
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}
