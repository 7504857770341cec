//! Procedural multi-domain synthetic detection data: scene sampling, domain
//! rendering (lighting, color gain, noise, blur, background), and the
//! on-disk dataset format with CRC validation.
//!
//! The domain factors are deliberately amplitude-dominant (gains, offsets,
//! noise, background) and exclude geometric warps, so phase spectra of the
//! same scene stay comparable across domains.

use crate::error::{Error, Result};
use crate::losses::GtBox;
use crate::models::IMAGE_SIZE;
use crate::tensor::Tensor;
use crate::util::{child_seed, crc32, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use std::path::{Path, PathBuf};

pub const NUM_CLASSES: usize = 3;
const CHANNELS: usize = 3;
const NPIX: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Photometric and background parameters describing one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Multiplicative lighting change, [0.4, 1.6].
    pub brightness_gain: f32,
    /// Additive lighting change, [-0.2, 0.2].
    pub brightness_offset: f32,
    /// Per-channel color gains, each in [0.6, 1.4].
    pub channel_gains: [f32; 3],
    /// Additive Gaussian pixel noise, [0, 0.08].
    pub noise_sigma: f32,
    /// Box blur radius, 0..=2.
    pub blur_radius: u8,
    /// Seeds the domain's background texture family.
    pub background_seed: u64,
}

impl DomainSpec {
    pub fn identity(background_seed: u64) -> Self {
        DomainSpec {
            brightness_gain: 1.0,
            brightness_offset: 0.0,
            channel_gains: [1.0; 3],
            noise_sigma: 0.0,
            blur_radius: 0,
            background_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.4..=1.6).contains(&self.brightness_gain)
            && (-0.2..=0.2).contains(&self.brightness_offset)
            && self.channel_gains.iter().all(|g| (0.6..=1.4).contains(g))
            && (0.0..=0.08).contains(&self.noise_sigma)
            && self.blur_radius <= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("domain parameters out of range: {self:?}")))
        }
    }

    /// Normalized distance between two domains: largest per-parameter gap
    /// relative to that parameter's legal range.
    pub fn distance(&self, other: &DomainSpec) -> f32 {
        let gain_gap = self
            .channel_gains
            .iter()
            .zip(&other.channel_gains)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        [
            (self.brightness_gain - other.brightness_gain).abs() / 1.2,
            (self.brightness_offset - other.brightness_offset).abs() / 0.4,
            gain_gap / 0.8,
            (self.noise_sigma - other.noise_sigma).abs() / 0.08,
            (self.blur_radius as f32 - other.blur_radius as f32).abs() / 2.0,
        ]
        .into_iter()
        .fold(0.0, f32::max)
    }
}

/// Minimum normalized distance required between every train and test domain.
pub const DOMAIN_MARGIN: f32 = 0.1;

/// Default training domains: mild photometric variation around identity.
pub fn default_train_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            brightness_gain: 1.0,
            brightness_offset: 0.0,
            channel_gains: [1.0, 1.0, 1.0],
            noise_sigma: 0.01,
            blur_radius: 0,
            background_seed: 11,
        },
        DomainSpec {
            brightness_gain: 0.85,
            brightness_offset: 0.03,
            channel_gains: [1.05, 0.95, 1.0],
            noise_sigma: 0.02,
            blur_radius: 0,
            background_seed: 12,
        },
        DomainSpec {
            brightness_gain: 1.15,
            brightness_offset: -0.04,
            channel_gains: [0.9, 1.05, 1.1],
            noise_sigma: 0.0,
            blur_radius: 1,
            background_seed: 13,
        },
        DomainSpec {
            brightness_gain: 1.25,
            brightness_offset: 0.05,
            channel_gains: [1.1, 0.9, 0.95],
            noise_sigma: 0.03,
            blur_radius: 0,
            background_seed: 14,
        },
    ]
}

/// Default held-out domains: strong lighting and color shifts with noise
/// and blur the training domains never reach.
pub fn default_test_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            brightness_gain: 0.55,
            brightness_offset: -0.12,
            channel_gains: [0.75, 1.0, 1.3],
            noise_sigma: 0.025,
            blur_radius: 1,
            background_seed: 21,
        },
        DomainSpec {
            brightness_gain: 1.5,
            brightness_offset: 0.1,
            channel_gains: [1.35, 0.8, 0.7],
            noise_sigma: 0.02,
            blur_radius: 1,
            background_seed: 22,
        },
    ]
}

/// Object class; the shape is the only class cue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn id(&self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        }
    }

    fn from_index(i: usize) -> Self {
        [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle][i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
    pub fill: f32,
}

impl SceneObject {
    pub fn bbox(&self) -> GtBox {
        GtBox {
            x_min: self.cx - self.size / 2.0,
            y_min: self.cy - self.size / 2.0,
            x_max: self.cx + self.size / 2.0,
            y_max: self.cy + self.size / 2.0,
            class: self.class.id(),
        }
    }
}

/// An object layout, independent of any domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// A rendered, annotated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// 3 x 64 x 64, CHW, values in [0, 1].
    pub image: Vec<f32>,
    pub boxes: Vec<GtBox>,
    pub domain_id: usize,
}

pub const MAX_OBJECTS: usize = 8;
const MAX_PAIR_IOU: f32 = 0.3;
const SIZE_RANGE: (f32, f32) = (6.0, 24.0);
const FILL_RANGE: (f32, f32) = (0.65, 0.95);

/// Draws a scene: up to eight well-separated shapes fully inside the image.
pub fn sample_scene(seed: u64) -> Scene {
    let mut rng = rng(seed);
    let count = rng.gen_range(0..=MAX_OBJECTS);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let size = rng.gen_range(SIZE_RANGE.0..SIZE_RANGE.1);
            let half = size / 2.0;
            let cx = rng.gen_range(half..(IMAGE_SIZE as f32 - half));
            let cy = rng.gen_range(half..(IMAGE_SIZE as f32 - half));
            let class = ShapeClass::from_index(rng.gen_range(0..NUM_CLASSES));
            let fill = rng.gen_range(FILL_RANGE.0..FILL_RANGE.1);
            let candidate = SceneObject { class, cx, cy, size, fill };
            let bb = candidate.bbox();
            if objects.iter().all(|o| o.bbox().iou(&bb) <= MAX_PAIR_IOU) {
                objects.push(candidate);
                break;
            }
        }
    }
    Scene { objects }
}

/// Smooth low-frequency background: a coarse value-noise grid, bilinearly
/// upsampled. The grid size, base level and contrast are fixed per domain
/// (derived from `background_seed`); the instance varies per sample.
fn render_background(domain: &DomainSpec, sample_seed: u64, img: &mut [f32]) {
    let mut style = rng(child_seed(domain.background_seed, "bg-style", 0));
    let grid: usize = style.gen_range(3..=5);
    let base: f32 = style.gen_range(0.12..0.28);
    let contrast: f32 = style.gen_range(0.04..0.12);
    let mut inst = rng(child_seed(domain.background_seed, "bg-instance", sample_seed));
    // One coarse grid per channel, correlated through a shared component.
    let shared: Vec<f32> = (0..grid * grid).map(|_| inst.gen_range(-1.0..1.0)).collect();
    for ch in 0..CHANNELS {
        let own: Vec<f32> = (0..grid * grid).map(|_| inst.gen_range(-1.0..1.0)).collect();
        let plane = &mut img[ch * NPIX..(ch + 1) * NPIX];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                // Sample the coarse grid with bilinear interpolation.
                let gx = x as f32 / (IMAGE_SIZE - 1) as f32 * (grid - 1) as f32;
                let gy = y as f32 / (IMAGE_SIZE - 1) as f32 * (grid - 1) as f32;
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(grid - 1), (y0 + 1).min(grid - 1));
                let (fx, fy) = (gx - x0 as f32, gy - y0 as f32);
                let sample = |g: &[f32]| {
                    let a = g[y0 * grid + x0] * (1.0 - fx) + g[y0 * grid + x1] * fx;
                    let b = g[y1 * grid + x0] * (1.0 - fx) + g[y1 * grid + x1] * fx;
                    a * (1.0 - fy) + b * fy
                };
                let v = 0.7 * sample(&shared) + 0.3 * sample(&own);
                plane[y * IMAGE_SIZE + x] = base + contrast * v;
            }
        }
    }
}

fn draw_objects(scene: &Scene, img: &mut [f32]) {
    for o in &scene.objects {
        let bb = o.bbox();
        let (x0, x1) = (bb.x_min.floor().max(0.0) as usize, bb.x_max.ceil().min(64.0) as usize);
        let (y0, y1) = (bb.y_min.floor().max(0.0) as usize, bb.y_max.ceil().min(64.0) as usize);
        let half = o.size / 2.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let inside = match o.class {
                    ShapeClass::Circle => {
                        let (dx, dy) = (px - o.cx, py - o.cy);
                        dx * dx + dy * dy <= half * half
                    }
                    ShapeClass::Square => {
                        px >= bb.x_min && px < bb.x_max && py >= bb.y_min && py < bb.y_max
                    }
                    ShapeClass::Triangle => {
                        // Up-pointing isoceles triangle inscribed in the box.
                        if py < bb.y_min || py >= bb.y_max {
                            false
                        } else {
                            let t = (py - bb.y_min) / o.size; // 0 at apex row
                            let spread = half * t;
                            (px - o.cx).abs() <= spread
                        }
                    }
                };
                if inside {
                    for ch in 0..CHANNELS {
                        img[ch * NPIX + y * IMAGE_SIZE + x] = o.fill;
                    }
                }
            }
        }
    }
}

fn box_blur(img: &mut [f32], radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let n = IMAGE_SIZE as isize;
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; NPIX];
    for ch in 0..CHANNELS {
        let plane = &mut img[ch * NPIX..(ch + 1) * NPIX];
        // Horizontal pass with edge clamping.
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for d in -r..=r {
                    let xs = (x + d).clamp(0, n - 1);
                    acc += plane[(y * n + xs) as usize];
                }
                tmp[(y * n + x) as usize] = acc * norm;
            }
        }
        // Vertical pass.
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for d in -r..=r {
                    let ys = (y + d).clamp(0, n - 1);
                    acc += tmp[(ys * n + x) as usize];
                }
                plane[(y * n + x) as usize] = acc * norm;
            }
        }
    }
}

fn render_impl(scene: &Scene, domain: &DomainSpec, sample_seed: u64, clamp: bool) -> ImageSample {
    let mut img = vec![0.0f32; CHANNELS * NPIX];
    render_background(domain, sample_seed, &mut img);
    draw_objects(scene, &mut img);

    // Photometric pipeline: gain_c * (alpha * p + offset) + noise.
    for ch in 0..CHANNELS {
        let gain = domain.channel_gains[ch];
        let plane = &mut img[ch * NPIX..(ch + 1) * NPIX];
        for v in plane.iter_mut() {
            *v = gain * (domain.brightness_gain * *v + domain.brightness_offset);
        }
    }
    if domain.noise_sigma > 0.0 {
        let dist = Normal::new(0.0f64, domain.noise_sigma as f64).expect("valid sigma");
        let mut nrng = rng(child_seed(domain.background_seed, "noise", sample_seed));
        for v in img.iter_mut() {
            *v += dist.sample(&mut nrng) as f32;
        }
    }
    box_blur(&mut img, domain.blur_radius as usize);
    if clamp {
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let boxes = scene.objects.iter().map(|o| o.bbox()).collect();
    ImageSample { image: img, boxes, domain_id: 0 }
}

/// Renders a scene under a domain. Photometric operations never move the
/// annotations. `sample_seed` drives the per-sample background instance and
/// noise draw.
pub fn render(scene: &Scene, domain: &DomainSpec, sample_seed: u64) -> ImageSample {
    render_impl(scene, domain, sample_seed, true)
}

/// [`render`] without the final clamp; used by spectral analyses where
/// clamping would break the linear relation between domains.
pub fn render_unclamped(scene: &Scene, domain: &DomainSpec, sample_seed: u64) -> ImageSample {
    render_impl(scene, domain, sample_seed, false)
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

const IMAGE_MAGIC: &[u8; 4] = b"DFIM";
const IMAGE_VERSION: u16 = 1;

/// Little-endian byte image payload; the unit the embedded and manifest
/// CRCs cover. (A whole-file CRC would be constant across images because
/// the file ends with its own payload CRC.)
pub fn pixel_payload(image: &[f32]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(image.len() * 4);
    for v in image {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    payload
}

/// Writes one image file: magic, version, C/H/W, f32 LE pixels, CRC32.
pub fn write_image(path: &Path, image: &[f32]) -> Result<()> {
    assert_eq!(image.len(), CHANNELS * NPIX);
    let payload = pixel_payload(image);
    let mut buf = Vec::with_capacity(payload.len() + 16);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(CHANNELS as u16).to_le_bytes());
    buf.extend_from_slice(&(IMAGE_SIZE as u16).to_le_bytes());
    buf.extend_from_slice(&(IMAGE_SIZE as u16).to_le_bytes());
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&crc32(&payload).to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::integrity(path, "file shorter than header"));
    }
    if &bytes[0..4] != IMAGE_MAGIC {
        return Err(Error::integrity(path, "bad magic, expected DFIM"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != IMAGE_VERSION {
        return Err(Error::integrity(path, format!("unsupported version {version}")));
    }
    let c = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[10..12].try_into().unwrap()) as usize;
    let expect = 12 + c * h * w * 4 + 4;
    if bytes.len() != expect {
        return Err(Error::integrity(
            path,
            format!("expected {expect} bytes for {c}x{h}x{w}, found {}", bytes.len()),
        ));
    }
    let payload = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(payload);
    if stored != actual {
        return Err(Error::integrity(
            path,
            format!("pixel checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Writes one annotation file: `class x_min y_min x_max y_max` per object,
/// two-decimal fixed point.
pub fn write_annotations(path: &Path, boxes: &[GtBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {:.2} {:.2} {:.2} {:.2}\n",
            b.class, b.x_min, b.y_min, b.x_max, b.y_max
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<GtBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(path, format!("line {}: expected 5 fields", ln + 1)));
        }
        let parse_f = |s: &str| -> Result<f32> {
            s.parse::<f32>()
                .map_err(|_| Error::parse(path, format!("line {}: bad number {s:?}", ln + 1)))
        };
        let class: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad class {:?}", ln + 1, fields[0])))?;
        boxes.push(GtBox {
            class,
            x_min: parse_f(fields[1])?,
            y_min: parse_f(fields[2])?,
            x_max: parse_f(fields[3])?,
            y_max: parse_f(fields[4])?,
        });
    }
    Ok(boxes)
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: String,
    pub image_path: String,
    pub ann_path: String,
    pub domain_id: usize,
    pub image_crc: u32,
    pub ann_crc: u32,
}

/// Dataset manifest: header plus one line per sample.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub seed: u64,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: &str) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut out = String::new();
    out.push_str("# synthetic detection dataset manifest\n");
    out.push_str("version 1\n");
    out.push_str(&format!("seed {}\n", m.seed));
    out.push_str(&format!("classes {}\n", m.num_classes));
    out.push_str(&format!("image_size {IMAGE_SIZE}\n"));
    for e in &m.entries {
        out.push_str(&format!(
            "sample {} {} {} {} {:08x} {:08x}\n",
            e.split, e.image_path, e.ann_path, e.domain_id, e.image_crc, e.ann_crc
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut seed = None;
    let mut classes = None;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::parse(&path, format!("line {}: {what}", ln + 1));
        match fields[0] {
            "version" => {
                if fields.get(1) != Some(&"1") {
                    return Err(bad("unsupported manifest version"));
                }
            }
            "seed" => {
                seed = Some(
                    fields.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad seed"))?,
                )
            }
            "classes" => {
                classes = Some(
                    fields.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad classes"))?,
                )
            }
            "image_size" => {
                let sz: usize =
                    fields.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad size"))?;
                if sz != IMAGE_SIZE {
                    return Err(bad("unsupported image size"));
                }
            }
            "sample" => {
                if fields.len() != 7 {
                    return Err(bad("sample line needs 7 fields"));
                }
                entries.push(ManifestEntry {
                    split: fields[1].to_string(),
                    image_path: fields[2].to_string(),
                    ann_path: fields[3].to_string(),
                    domain_id: fields[4].parse().map_err(|_| bad("bad domain id"))?,
                    image_crc: u32::from_str_radix(fields[5], 16)
                        .map_err(|_| bad("bad image crc"))?,
                    ann_crc: u32::from_str_radix(fields[6], 16).map_err(|_| bad("bad ann crc"))?,
                });
            }
            other => return Err(bad(&format!("unknown directive {other:?}"))),
        }
    }
    Ok(Manifest {
        seed: seed.ok_or_else(|| Error::parse(&path, "missing seed"))?,
        num_classes: classes.ok_or_else(|| Error::parse(&path, "missing classes"))?,
        entries,
    })
}

/// Generates a dataset on disk: i.i.d. scenes, round-robin domains within
/// each split, everything a pure function of (seed, domain lists, counts).
/// Train and test domains must be separated by [`DOMAIN_MARGIN`].
pub fn generate_dataset(
    n_train: usize,
    n_test: usize,
    train_domains: &[DomainSpec],
    test_domains: &[DomainSpec],
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    if train_domains.is_empty() || test_domains.is_empty() {
        return Err(Error::Config("domain lists must be non-empty".into()));
    }
    for d in train_domains.iter().chain(test_domains) {
        d.validate()?;
    }
    for (ti, t) in test_domains.iter().enumerate() {
        for (ri, r) in train_domains.iter().enumerate() {
            let dist = t.distance(r);
            if dist <= DOMAIN_MARGIN {
                return Err(Error::Config(format!(
                    "test domain {ti} is within margin of train domain {ri} (distance {dist:.3} <= {DOMAIN_MARGIN})"
                )));
            }
        }
    }
    let images = out_dir.join("images");
    let annotations = out_dir.join("annotations");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&annotations).map_err(|e| Error::io(&annotations, e))?;

    let mut entries = Vec::with_capacity(n_train + n_test);
    for (split, count, domains) in
        [("train", n_train, train_domains), ("test", n_test, test_domains)]
    {
        for i in 0..count {
            let scene = sample_scene(child_seed(seed, &format!("{split}-scene"), i as u64));
            let domain_id = i % domains.len();
            let sample_seed = child_seed(seed, &format!("{split}-render"), i as u64);
            let mut sample = render(&scene, &domains[domain_id], sample_seed);
            sample.domain_id = domain_id;

            let image_rel = format!("images/{split}_{i:05}.dfim");
            let ann_rel = format!("annotations/{split}_{i:05}.ann");
            write_image(&out_dir.join(&image_rel), &sample.image)?;
            write_annotations(&out_dir.join(&ann_rel), &sample.boxes)?;
            let image_crc = crc32(&pixel_payload(&sample.image));
            let ann_crc = crc32(&std::fs::read(out_dir.join(&ann_rel)).map_err(|e| Error::io(out_dir.join(&ann_rel), e))?);
            entries.push(ManifestEntry {
                split: split.to_string(),
                image_path: image_rel,
                ann_path: ann_rel,
                domain_id,
                image_crc,
                ann_crc,
            });
        }
    }
    let manifest = Manifest { seed, num_classes: NUM_CLASSES, entries };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// An in-memory dataset split into train and test samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub num_classes: usize,
    /// CRC of the manifest file, used to fingerprint runs.
    pub manifest_crc: u32,
}

/// Loads a generated dataset, validating every file against its manifest
/// CRC before trusting it.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let manifest_bytes =
        std::fs::read(dir.join(MANIFEST_NAME)).map_err(|e| Error::io(dir.join(MANIFEST_NAME), e))?;
    let mut dataset = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        num_classes: manifest.num_classes,
        manifest_crc: crc32(&manifest_bytes),
    };
    for e in &manifest.entries {
        let img_path = dir.join(&e.image_path);
        let image = read_image(&img_path)?;
        if crc32(&pixel_payload(&image)) != e.image_crc {
            return Err(Error::integrity(&img_path, "pixels do not match manifest CRC"));
        }
        let ann_path = dir.join(&e.ann_path);
        let raw = std::fs::read(&ann_path).map_err(|er| Error::io(&ann_path, er))?;
        if crc32(&raw) != e.ann_crc {
            return Err(Error::integrity(&ann_path, "file does not match manifest CRC"));
        }
        let boxes = read_annotations(&ann_path)?;
        let sample = ImageSample { image, boxes, domain_id: e.domain_id };
        match e.split.as_str() {
            "train" => dataset.train.push(sample),
            "test" => dataset.test.push(sample),
            other => {
                return Err(Error::parse(
                    dir.join(MANIFEST_NAME),
                    format!("unknown split {other:?}"),
                ))
            }
        }
    }
    Ok(dataset)
}

/// Deterministic shuffled index order for an epoch.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    idx
}

/// Stacks samples into an NCHW batch tensor plus per-image target lists.
pub fn batch_tensor(samples: &[&ImageSample]) -> (Tensor, Vec<Vec<GtBox>>) {
    let n = samples.len();
    let mut data = Vec::with_capacity(n * CHANNELS * NPIX);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    let images = Tensor::new(&[n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch shape");
    let targets = samples.iter().map(|s| s.boxes.clone()).collect();
    (images, targets)
}

/// Directory fingerprint: CRC of every file's relative path and content,
/// visited in sorted order.
pub fn dir_crc(dir: &Path) -> Result<u32> {
    fn walk(dir: &Path, base: &Path, acc: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, base, acc)?;
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                acc.push((rel, bytes));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    let mut all = Vec::new();
    for (name, bytes) in files {
        all.extend_from_slice(name.as_bytes());
        all.push(0);
        all.extend_from_slice(&bytes);
    }
    Ok(crc32(&all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_within_contract() {
        assert_eq!(sample_scene(42), sample_scene(42));
        let mut counts = [0usize; NUM_CLASSES];
        for seed in 0..1000u64 {
            let scene = sample_scene(seed);
            assert!(scene.objects.len() <= MAX_OBJECTS);
            for o in &scene.objects {
                counts[o.class.id()] += 1;
                let bb = o.bbox();
                assert!(bb.x_min >= 0.0 && bb.y_min >= 0.0);
                assert!(bb.x_max <= 64.0 && bb.y_max <= 64.0);
                assert!(bb.area() > 0.0);
                assert!((SIZE_RANGE.0..=SIZE_RANGE.1).contains(&o.size));
            }
            for (i, a) in scene.objects.iter().enumerate() {
                for b in scene.objects.iter().skip(i + 1) {
                    assert!(a.bbox().iou(&b.bbox()) <= MAX_PAIR_IOU + 1e-6);
                }
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "class ids not exercised: {counts:?}");
    }

    #[test]
    fn identity_render_is_deterministic_and_in_range() {
        let scene = sample_scene(7);
        let d = DomainSpec::identity(3);
        let a = render(&scene, &d, 5);
        let b = render(&scene, &d, 5);
        assert_eq!(a, b);
        assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Identity photometrics never reach the clamp.
        let raw = render_unclamped(&scene, &d, 5);
        assert_eq!(a.image, raw.image);
    }

    #[test]
    fn annotations_ignore_photometrics() {
        let scene = sample_scene(9);
        let domains = [default_train_domains(), default_test_domains()].concat();
        let reference = render(&scene, &domains[0], 1).boxes;
        for d in &domains {
            assert_eq!(render(&scene, d, 1).boxes, reference);
        }
    }

    #[test]
    fn pure_gain_domains_share_phase_spectra() {
        use crate::spectral::{amplitude, fft2, phase, RealMap};
        let scene = sample_scene(11);
        let mut a = DomainSpec::identity(5);
        let mut b = DomainSpec::identity(5);
        a.brightness_gain = 0.8;
        b.brightness_gain = 1.4;
        let sa = render_unclamped(&scene, &a, 2);
        let sb = render_unclamped(&scene, &b, 2);
        for ch in 0..3 {
            let widen = |img: &[f32]| {
                RealMap::new(
                    IMAGE_SIZE,
                    IMAGE_SIZE,
                    img[ch * NPIX..(ch + 1) * NPIX].iter().map(|&v| v as f64).collect(),
                )
            };
            let fa = fft2(&widen(&sa.image));
            let fb = fft2(&widen(&sb.image));
            let (pa, pb) = (phase(&fa), phase(&fb));
            let amp = amplitude(&fa);
            for k in 1..NPIX {
                if amp.data[k] > 1e-4 {
                    let mut d = (pa.data[k] - pb.data[k]).abs();
                    d = d.min(std::f64::consts::TAU - d);
                    assert!(d < 1e-3, "phase moved at bin {k}: {d}");
                }
            }
        }
    }

    #[test]
    fn generation_round_robins_domains_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(
            8,
            4,
            &default_train_domains()[..2],
            &default_test_domains(),
            dir.path(),
            3,
        )
        .unwrap();
        assert_eq!(m.count("train"), 8);
        assert_eq!(m.count("test"), 4);
        let per0 = m.entries.iter().filter(|e| e.split == "train" && e.domain_id == 0).count();
        let per1 = m.entries.iter().filter(|e| e.split == "train" && e.domain_id == 1).count();
        assert_eq!((per0, per1), (4, 4));

        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.test.len(), 4);
    }

    #[test]
    fn generation_is_bit_identical_per_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let tr = &default_train_domains()[..2];
        let te = default_test_domains();
        generate_dataset(6, 2, tr, &te, d1.path(), 9).unwrap();
        generate_dataset(6, 2, tr, &te, d2.path(), 9).unwrap();
        assert_eq!(dir_crc(d1.path()).unwrap(), dir_crc(d2.path()).unwrap());

        let d3 = tempfile::tempdir().unwrap();
        generate_dataset(6, 2, tr, &te, d3.path(), 10).unwrap();
        assert_ne!(dir_crc(d1.path()).unwrap(), dir_crc(d3.path()).unwrap());
    }

    #[test]
    fn load_round_trips_pixels_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let scene = sample_scene(20);
        let sample = render(&scene, &default_test_domains()[0], 17);
        let path = dir.path().join("x.dfim");
        write_image(&path, &sample.image).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.len(), sample.image.len());
        for (a, b) in sample.image.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_or_corrupt_image_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let scene = sample_scene(21);
        let sample = render(&scene, &DomainSpec::identity(1), 3);
        let path = dir.path().join("x.dfim");
        write_image(&path, &sample.image).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.dfim");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_image(&cut), Err(Error::Integrity { .. })));

        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        let bad = dir.path().join("bad.dfim");
        std::fs::write(&bad, &flipped).unwrap();
        assert!(matches!(read_image(&bad), Err(Error::Integrity { .. })));
    }

    #[test]
    fn manifest_crc_validation_catches_swapped_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(2, 1, &default_train_domains()[..1], &default_test_domains(), dir.path(), 5)
            .unwrap();
        // Overwrite one image with another valid image: per-file CRC in the
        // manifest must catch it.
        let a = dir.path().join("images/train_00000.dfim");
        let b = dir.path().join("images/train_00001.dfim");
        std::fs::copy(&b, &a).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn domain_margin_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let train = default_train_domains();
        let near = vec![train[0].clone()];
        let err = generate_dataset(2, 1, &train, &near, dir.path(), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("margin"));
    }

    #[test]
    fn default_domains_validate_and_are_separated() {
        for d in default_train_domains().iter().chain(&default_test_domains()) {
            d.validate().unwrap();
        }
        for t in &default_test_domains() {
            for r in &default_train_domains() {
                assert!(t.distance(r) > DOMAIN_MARGIN, "{t:?} too close to {r:?}");
            }
        }
    }

    #[test]
    fn shuffle_is_deterministic() {
        assert_eq!(shuffled_indices(100, 4), shuffled_indices(100, 4));
        assert_ne!(shuffled_indices(100, 4), shuffled_indices(100, 5));
    }

    #[test]
    fn batches_stack_in_order() {
        let scene = sample_scene(31);
        let s1 = render(&scene, &DomainSpec::identity(1), 0);
        let s2 = render(&scene, &DomainSpec::identity(2), 1);
        let (t, boxes) = batch_tensor(&[&s1, &s2]);
        assert_eq!(t.shape(), &[2, 3, 64, 64]);
        assert_eq!(&t.data()[..NPIX * 3], &s1.image[..]);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0], s1.boxes);
    }
}
