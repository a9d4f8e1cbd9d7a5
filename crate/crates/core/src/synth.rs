//! Analytic Lambertian scenes and the on-disk dataset format.
//!
//! Image frame: x to the right, y down, z toward the viewer. Object geometry
//! is given in normalized image coordinates, `(0, 0)` top left and `(1, 1)`
//! bottom right.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::pipeline::{tokens_from_words, Token};
use crate::pnm;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Object {
    Sphere { center: [f64; 2], radius: f64 },
    /// Rounded box: flat outline, cushion-shaped normals.
    Box { center: [f64; 2], half: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    GradientSky,
    Flat,
    TwoTone,
}

impl BackgroundStyle {
    pub const ALL: [BackgroundStyle; 3] = [BackgroundStyle::GradientSky, BackgroundStyle::Flat, BackgroundStyle::TwoTone];

    pub fn word(self) -> &'static str {
        match self {
            BackgroundStyle::GradientSky => "gradient_sky",
            BackgroundStyle::Flat => "flat",
            BackgroundStyle::TwoTone => "two_tone",
        }
    }

    fn base(self, y: f64) -> [f64; 3] {
        match self {
            BackgroundStyle::GradientSky => {
                let top = [0.45, 0.6, 0.9];
                let bottom = [0.85, 0.8, 0.7];
                std::array::from_fn(|c| top[c] + (bottom[c] - top[c]) * y)
            }
            BackgroundStyle::Flat => [0.6, 0.6, 0.6],
            BackgroundStyle::TwoTone => {
                if y < 0.55 {
                    [0.7, 0.66, 0.6]
                } else {
                    [0.35, 0.3, 0.28]
                }
            }
        }
    }
}

/// The 8 stratification buckets as `(word, planar direction)`.
pub const DIRECTIONS: [(&str, [f64; 2]); 8] = [
    ("left", [-1.0, 0.0]),
    ("right", [1.0, 0.0]),
    ("top", [0.0, -1.0]),
    ("down", [0.0, 1.0]),
    ("top_left", [-1.0, -1.0]),
    ("top_right", [1.0, -1.0]),
    ("down_left", [-1.0, 1.0]),
    ("down_right", [1.0, 1.0]),
];

pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("white", [1.0, 1.0, 1.0]),
    ("warm", [1.0, 0.8, 0.55]),
    ("cool", [0.6, 0.75, 1.0]),
    ("red", [1.0, 0.45, 0.4]),
    ("green", [0.5, 1.0, 0.5]),
    ("purple", [0.75, 0.5, 1.0]),
];

/// Out-of-plane component given to every bucket direction before normalizing.
pub const LIGHT_ELEVATION: f64 = 0.4;

pub fn bucket_light_dir(bucket: usize) -> [f64; 3] {
    let [x, y] = DIRECTIONS[bucket % 8].1;
    normalize([x, y, LIGHT_ELEVATION])
}

/// Whether a bucket is one of left/right/top/down.
pub fn is_cardinal(word: &str) -> bool {
    matches!(word, "left" | "right" | "top" | "down")
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object: Object,
    pub albedo: [f64; 3],
    pub light_dir: [f64; 3],
    pub light_color: [f64; 3],
    pub ambient: f64,
    pub background: BackgroundStyle,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        match self.object {
            Object::Sphere { radius, .. } if !(radius > 0.0) => {
                return Err(Error::param("sphere radius must be positive"))
            }
            Object::Box { half, .. } if !(half[0] > 0.0 && half[1] > 0.0) => {
                return Err(Error::param("box half-extents must be positive"))
            }
            _ => {}
        }
        let n = dot(self.light_dir, self.light_dir).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::param(format!("light direction has norm {n}")));
        }
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.albedo) || !unit(&self.light_color) {
            return Err(Error::param("colors must lie in [0, 1]"));
        }
        if !(0.0..=0.4).contains(&self.ambient) {
            return Err(Error::param("ambient must lie in [0, 0.4]"));
        }
        Ok(())
    }

    /// Seeded scene for dataset item `index`: the light comes from bucket
    /// `index % 8`.
    pub fn sampled(seed: u64, index: u64) -> Self {
        let mut r = rng::stream(seed, "scene", index);
        let center = [r.random_range(0.38..0.62), r.random_range(0.38..0.62)];
        let object = if r.random::<f64>() < 0.6 {
            Object::Sphere {
                center,
                radius: r.random_range(0.2..0.3),
            }
        } else {
            Object::Box {
                center,
                half: [r.random_range(0.16..0.27), r.random_range(0.16..0.27)],
            }
        };
        let albedo = std::array::from_fn(|_| r.random_range(0.55..0.95));
        let light_color = PALETTE[r.random_range(0..PALETTE.len())].1;
        let ambient = r.random_range(0.05..0.25);
        let background = BackgroundStyle::ALL[r.random_range(0..3)];
        SceneSpec {
            object,
            albedo,
            light_dir: bucket_light_dir(index as usize % 8),
            light_color,
            ambient,
            background,
            seed: r.random(),
        }
    }

    pub fn direction_word(&self) -> &'static str {
        let (lx, ly) = (self.light_dir[0], self.light_dir[1]);
        DIRECTIONS
            .iter()
            .max_by(|a, b| {
                let s = |d: [f64; 2]| (d[0] * lx + d[1] * ly) / d[0].hypot(d[1]);
                s(a.1).total_cmp(&s(b.1))
            })
            .map(|d| d.0)
            .unwrap()
    }

    pub fn color_word(&self) -> &'static str {
        PALETTE
            .iter()
            .min_by(|a, b| {
                let d = |c: [f64; 3]| (0..3).map(|i| (c[i] - self.light_color[i]).powi(2)).sum::<f64>();
                d(a.1).total_cmp(&d(b.1))
            })
            .map(|p| p.0)
            .unwrap()
    }

    pub fn prompt_words(&self) -> [&'static str; 3] {
        [self.direction_word(), self.color_word(), self.background.word()]
    }

    /// Normal at normalized image point `(px, py)`, or `None` off the object.
    fn normal(&self, px: f64, py: f64) -> Option<[f64; 3]> {
        match self.object {
            Object::Sphere { center, radius } => {
                let dx = (px - center[0]) / radius;
                let dy = (py - center[1]) / radius;
                let r2 = dx * dx + dy * dy;
                (r2 <= 1.0).then(|| [dx, dy, (1.0 - r2).sqrt()])
            }
            Object::Box { center, half } => {
                let u = (px - center[0]) / half[0];
                let v = (py - center[1]) / half[1];
                (u.abs() <= 1.0 && v.abs() <= 1.0).then(|| normalize([0.9 * u, 0.9 * v, 1.0]))
            }
        }
    }
}

/// Light metadata as stored per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightMeta {
    pub light_dir: [f64; 3],
    pub light_color: [f64; 3],
    pub ambient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelightSample {
    pub id: String,
    /// Object under white frontal light, black elsewhere.
    pub fg: ImageBuffer,
    pub fg_mask: Mask,
    pub bg: ImageBuffer,
    /// Object lit by the scene light, composited over `bg`.
    pub target: ImageBuffer,
    pub prompt_tokens: Vec<Token>,
    pub light: LightMeta,
}

impl RelightSample {
    pub fn prompt_words(&self) -> Vec<&'static str> {
        self.prompt_tokens.iter().map(|t| t.word()).collect()
    }
}

pub fn render_scene(spec: &SceneSpec, height: usize, width: usize) -> Result<RelightSample> {
    spec.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::dim("render size must be nonzero"));
    }
    let (plx, ply) = {
        let (x, y) = (spec.light_dir[0], spec.light_dir[1]);
        let n = x.hypot(y);
        if n > 1e-9 {
            (x / n, y / n)
        } else {
            (0.0, 0.0)
        }
    };
    let mut fg = ImageBuffer::black(height, width);
    let mut bg = ImageBuffer::black(height, width);
    let mut target = ImageBuffer::black(height, width);
    let mut mask = vec![false; height * width];
    for y in 0..height {
        let py = (y as f64 + 0.5) / height as f64;
        let base = spec.background.base(py);
        for x in 0..width {
            let px = (x as f64 + 0.5) / width as f64;
            let fall = (0.55 + 0.9 * ((px - 0.5) * plx + (py - 0.5) * ply)).clamp(0.1, 1.0);
            for c in 0..3 {
                bg.set(y, x, c, (base[c] * spec.light_color[c] * fall).clamp(0.0, 1.0));
            }
            match spec.normal(px, py) {
                Some(n) => {
                    mask[y * width + x] = true;
                    let lambert = dot(n, spec.light_dir).max(0.0);
                    for c in 0..3 {
                        let a = spec.albedo[c];
                        target.set(y, x, c, (a * spec.light_color[c] * lambert + a * spec.ambient).clamp(0.0, 1.0));
                        fg.set(y, x, c, (a * n[2].max(0.0) + a * 0.2).clamp(0.0, 1.0));
                    }
                }
                None => {
                    for c in 0..3 {
                        target.set(y, x, c, bg.get(y, x, c));
                    }
                }
            }
        }
    }
    Ok(RelightSample {
        id: String::new(),
        fg,
        fg_mask: Mask::new(height, width, mask)?,
        bg,
        target,
        prompt_tokens: tokens_from_words(&spec.prompt_words())?,
        light: LightMeta {
            light_dir: spec.light_dir,
            light_color: spec.light_color,
            ambient: spec.ambient,
        },
    })
}

/// Item `index` of the seeded corpus.
pub fn generate_sample(seed: u64, index: u64, resolution: usize) -> Result<RelightSample> {
    let spec = SceneSpec::sampled(seed, index);
    let mut s = render_scene(&spec, resolution, resolution)?;
    s.id = format!("{index:05}");
    Ok(s)
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Item counts per split for fractions `(train, val)`; test gets the rest.
pub fn split_sizes(n: usize, ratio: (f64, f64)) -> Result<[usize; 3]> {
    let (a, b) = ratio;
    if !(a >= 0.0 && b >= 0.0 && a + b <= 1.0) {
        return Err(Error::param("split fractions must be non-negative and sum to at most 1"));
    }
    let train = (n as f64 * a).round() as usize;
    let val = ((n as f64 * b).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileSet {
    pub fg: String,
    pub mask: String,
    pub bg: String,
    pub target: String,
}

/// One line of `samples.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub light_dir: [f64; 3],
    pub light_color: [f64; 3],
    pub ambient: f64,
    pub prompt_tokens: Vec<String>,
    pub files: FileSet,
}

pub fn parse_record(line: &str) -> Result<SampleRecord> {
    let rec: SampleRecord = serde_json::from_str(line).map_err(|e| Error::format(format!("bad metadata line: {e}")))?;
    let safe = |f: &str| !f.is_empty() && !f.contains(['/', '\\']) && f != ".." && f != ".";
    let f = &rec.files;
    if ![&f.fg, &f.mask, &f.bg, &f.target].iter().all(|s| safe(s)) {
        return Err(Error::format("metadata file names must be plain names inside the split"));
    }
    if rec.light_dir.iter().chain(&rec.light_color).chain([&rec.ambient]).any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite light metadata"));
    }
    tokens_from_words(&rec.prompt_tokens).map_err(|e| Error::format(e.to_string()))?;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub counts: BTreeMap<String, usize>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_sample(dir: &Path, s: &RelightSample) -> Result<String> {
    let files = FileSet {
        fg: format!("{}_fg.ppm", s.id),
        mask: format!("{}_mask.pgm", s.id),
        bg: format!("{}_bg.ppm", s.id),
        target: format!("{}_target.ppm", s.id),
    };
    pnm::write_ppm(&dir.join(&files.fg), &s.fg)?;
    pnm::write_mask(&dir.join(&files.mask), &s.fg_mask)?;
    pnm::write_ppm(&dir.join(&files.bg), &s.bg)?;
    pnm::write_ppm(&dir.join(&files.target), &s.target)?;
    let rec = SampleRecord {
        id: s.id.clone(),
        light_dir: s.light.light_dir,
        light_color: s.light.light_color,
        ambient: s.light.ambient,
        prompt_tokens: s.prompt_words().iter().map(|w| w.to_string()).collect(),
        files,
    };
    Ok(serde_json::to_string(&rec).expect("record serializes"))
}

/// Render `n` seeded samples into `dir/{train,val,test}` in index blocks.
pub fn sample_dataset(dir: &Path, n: usize, seed: u64, resolution: usize, ratio: (f64, f64)) -> Result<DatasetSummary> {
    if n == 0 {
        return Err(Error::param("dataset needs at least one sample"));
    }
    if resolution == 0 {
        return Err(Error::param("resolution must be positive"));
    }
    let sizes = split_sizes(n, ratio)?;
    let mut counts = BTreeMap::new();
    let mut index = 0u64;
    for (name, &size) in SPLITS.iter().zip(&sizes) {
        let sub = dir.join(name);
        io(&sub, std::fs::create_dir_all(&sub))?;
        let mut lines = String::new();
        for _ in 0..size {
            let s = generate_sample(seed, index, resolution)?;
            lines.push_str(&write_sample(&sub, &s)?);
            lines.push('\n');
            index += 1;
        }
        let meta = sub.join("samples.jsonl");
        io(&meta, std::fs::write(&meta, lines))?;
        counts.insert(name.to_string(), size);
    }
    Ok(DatasetSummary { counts })
}

/// Load one split written by [`sample_dataset`] (or any directory in the
/// same format).
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<RelightSample>> {
    let sub: PathBuf = dir.join(split);
    let meta = sub.join("samples.jsonl");
    let text = match std::fs::read_to_string(&meta) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::State(format!("no dataset split at {}", sub.display())))
        }
        Err(e) => return Err(Error::io(&meta, e)),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec = parse_record(line).map_err(|e| Error::format(format!("{}:{}: {e}", meta.display(), i + 1)))?;
        let fg = pnm::read_ppm(&sub.join(&rec.files.fg))?;
        let fg_mask = pnm::read_mask(&sub.join(&rec.files.mask))?;
        let bg = pnm::read_ppm(&sub.join(&rec.files.bg))?;
        let target = pnm::read_ppm(&sub.join(&rec.files.target))?;
        fg.same_dims(&bg)?;
        fg.same_dims(&target)?;
        fg_mask.check_dims(fg.height(), fg.width())?;
        out.push(RelightSample {
            id: rec.id,
            fg,
            fg_mask,
            bg,
            target,
            prompt_tokens: tokens_from_words(&rec.prompt_tokens)?,
            light: LightMeta {
                light_dir: rec.light_dir,
                light_color: rec.light_color,
                ambient: rec.ambient,
            },
        });
    }
    Ok(out)
}

/// Rendered composites used as the "natural image" pool of the fixer.
pub fn image_pool(n: usize, seed: u64, resolution: usize) -> Result<Vec<ImageBuffer>> {
    (0..n as u64)
        .map(|i| {
            let spec = SceneSpec::sampled(seed, i);
            Ok(render_scene(&spec, resolution, resolution)?.target)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::directional_consistency;

    fn half_means(s: &RelightSample, img: &ImageBuffer, left: bool) -> (f64, f64) {
        let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
        let w = img.width();
        let (xs, n): (f64, usize) = (0..img.height())
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| s.fg_mask.get(y, x))
            .fold((0.0, 0), |(sx, n), (_, x)| (sx + x as f64, n + 1));
        let cx = xs / n as f64;
        for y in 0..img.height() {
            for x in 0..w {
                if !s.fg_mask.get(y, x) {
                    continue;
                }
                let first = if left { (x as f64) < cx } else { (x as f64) > cx };
                if first {
                    a += img.luminance(y, x);
                    na += 1;
                } else {
                    b += img.luminance(y, x);
                    nb += 1;
                }
            }
        }
        (a / na as f64, b / nb as f64)
    }

    fn sphere(light_dir: [f64; 3], ambient: f64) -> SceneSpec {
        SceneSpec {
            object: Object::Sphere {
                center: [0.5, 0.5],
                radius: 0.3,
            },
            albedo: [0.8, 0.7, 0.6],
            light_dir,
            light_color: [1.0, 1.0, 1.0],
            ambient,
            background: BackgroundStyle::Flat,
            seed: 0,
        }
    }

    #[test]
    fn left_light_brightens_left_half() {
        let s = render_scene(&sphere([-1.0, 0.0, 0.0], 0.1), 32, 32).unwrap();
        let (l, r) = half_means(&s, &s.target, true);
        assert!(l > r, "{l} vs {r}");
    }

    #[test]
    fn back_light_without_ambient_is_black() {
        let s = render_scene(&sphere([0.0, 0.0, -1.0], 0.0), 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if s.fg_mask.get(y, x) {
                    assert!(s.target.pixel(y, x).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn degenerate_and_unnormalized_specs_fail() {
        let mut s = sphere([1.0, 0.0, 0.0], 0.1);
        s.object = Object::Sphere {
            center: [0.5, 0.5],
            radius: 0.0,
        };
        assert!(matches!(render_scene(&s, 8, 8), Err(Error::Parameter(_))));
        let s = sphere([1.0, 1.0, 0.0], 0.1);
        assert!(render_scene(&s, 8, 8).is_err());
    }

    #[test]
    fn target_is_background_outside_mask() {
        for i in 0..16 {
            let s = generate_sample(7, i, 24).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    if !s.fg_mask.get(y, x) {
                        assert_eq!(s.target.pixel(y, x), s.bg.pixel(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn stratified_buckets_and_prompts() {
        let words: Vec<&str> = (0..8).map(|i| SceneSpec::sampled(3, i).direction_word()).collect();
        assert_eq!(words, DIRECTIONS.iter().map(|d| d.0).collect::<Vec<_>>());
        let s = generate_sample(3, 2, 16).unwrap();
        assert_eq!(s.prompt_words()[0], "top");
    }

    #[test]
    fn cardinal_ground_truth_is_consistent() {
        for i in 0..64 {
            let s = generate_sample(11, i, 32).unwrap();
            let spec = SceneSpec::sampled(11, i);
            if is_cardinal(spec.direction_word()) {
                let d = directional_consistency(&s.target, &s.fg_mask, s.light.light_dir).unwrap();
                assert!(d > 0.0, "sample {i}: {d}");
            }
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(800, (0.8, 0.1)).unwrap(), [640, 80, 80]);
        assert_eq!(split_sizes(1, (0.8, 0.1)).unwrap(), [1, 0, 0]);
    }

    #[test]
    fn record_parsing() {
        let line = r#"{"id":"00001","light_dir":[1,0,0],"light_color":[1,1,1],"ambient":0.1,"prompt_tokens":["left","warm","flat"],"files":{"fg":"a","mask":"b","bg":"c","target":"d"}}"#;
        assert_eq!(parse_record(line).unwrap().id, "00001");
        assert!(parse_record(&line.replace("\"a\"", "\"../a\"")).is_err());
        assert!(parse_record(&line.replace("warm", "sunset")).is_err());
        assert!(parse_record("{}").is_err());
    }
}
