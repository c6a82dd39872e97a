//! Synthetic detection scenes: circles, squares, triangles and crosses on a
//! noisy background, with exact boxes.
//!
//! Every random quantity comes from a counter-based hash keyed by
//! `(seed, index, field, k)`, so any sample can be regenerated on its own,
//! in any order, on any platform.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// First index of the validation split; training uses `0..VAL_OFFSET`.
pub const VAL_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Feature stride, used to build the padding mask.
    pub patch: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side length range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Amplitude of the additive uniform background noise.
    pub noise: f64,
    pub occlusion: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 4,
            height: 64,
            width: 64,
            patch: 8,
            min_objects: 1,
            max_objects: 4,
            min_size: 18,
            max_size: 30,
            noise: 0.1,
            occlusion: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPE_NAMES.len() {
            return Err(Error::config(format!("classes must be in 1..={}, got {}", SHAPE_NAMES.len(), self.classes)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range must satisfy 1 <= min_objects <= max_objects"));
        }
        // a 4 px triangle loses its apex row and ends up 3 px tall
        if self.min_size < 5 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return Err(Error::config("shape size range must satisfy 5 <= min_size <= max_size <= image extent"));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config("image extents must be divisible by the patch size"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    /// Global sample index of the `i`-th element of this split.
    pub fn index(self, i: usize) -> u64 {
        match self {
            Split::Train => i as u64,
            Split::Val => VAL_OFFSET + i as u64,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub targets: Vec<Target>,
    /// Row-major over the feature grid; `true` marks a cell that is entirely padding.
    pub pad_mask: Vec<bool>,
    pub grid: (usize, usize),
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|p| !p).collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy)]
enum Field {
    Count = 1,
    Class,
    Size,
    PosX,
    PosY,
    Color,
    Noise,
    Background,
}

struct Draws {
    key: u64,
}

impl Draws {
    fn new(seed: u64, index: u64) -> Self {
        Draws {
            key: splitmix64(splitmix64(seed) ^ index.rotate_left(17)),
        }
    }

    fn u64(&self, field: Field, k: u64) -> u64 {
        splitmix64(splitmix64(self.key ^ (field as u64).wrapping_mul(0xA24B_AED4_963E_E407)) ^ k)
    }

    /// Uniform in `[0, 1)` with 53 bits.
    fn unit(&self, field: Field, k: u64) -> f64 {
        (self.u64(field, k) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `lo..=hi`.
    fn range(&self, field: Field, k: u64, lo: usize, hi: usize) -> usize {
        lo + (self.u64(field, k) % (hi - lo + 1) as u64) as usize
    }
}

/// Whether pixel center `(x, y)` lies in a shape of side `s` centered at `(cx, cy)`.
fn inside(class: usize, x: f64, y: f64, cx: f64, cy: f64, s: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let r = s / 2.0;
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => {
            // apex up, base at the bottom
            let t = (dy + r) / s;
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        _ => {
            let arm = s / 6.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

/// Generates sample `index` of the dataset identified by `seed`.
pub fn generate(seed: u64, index: u64, spec: &DatasetSpec) -> Result<SceneSample> {
    spec.validate()?;
    let d = Draws::new(seed, index);
    let (h, w) = (spec.height, spec.width);
    let mut image = vec![0.0f64; 3 * h * w];
    let bg: Vec<f64> = (0..3).map(|c| 0.05 + 0.2 * d.unit(Field::Background, c)).collect();
    for c in 0..3 {
        for px in 0..h * w {
            let n = if spec.noise > 0.0 {
                spec.noise * d.unit(Field::Noise, (c * h * w + px) as u64)
            } else {
                0.0
            };
            image[c * h * w + px] = bg[c] + n;
        }
    }

    let count = d.range(Field::Count, 0, spec.min_objects, spec.max_objects);
    let mut targets = Vec::with_capacity(count);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut painted = vec![false; h * w];
    for obj in 0..count as u64 {
        let class = d.range(Field::Class, obj, 0, spec.classes - 1);
        let s = d.range(Field::Size, obj, spec.min_size, spec.max_size);
        // Placement retries draw fresh positions; the attempt index is part of the key.
        let mut spot = None;
        for attempt in 0..32u64 {
            let k = obj * 64 + attempt;
            let x0 = d.range(Field::PosX, k, 0, w - s);
            let y0 = d.range(Field::PosY, k, 0, h - s);
            let rect = (x0, y0, x0 + s, y0 + s);
            if spec.occlusion || placed.iter().all(|&r| !overlaps(r, rect)) {
                spot = Some(rect);
                break;
            }
        }
        let Some(rect) = spot else { continue };
        let color: Vec<f64> = (0..3).map(|c| 0.45 + 0.55 * d.unit(Field::Color, obj * 3 + c)).collect();
        let (cx, cy) = (rect.0 as f64 + s as f64 / 2.0, rect.1 as f64 + s as f64 / 2.0);
        let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (usize::MAX, usize::MAX, 0, 0);
        for y in rect.1..rect.3 {
            for x in rect.0..rect.2 {
                if inside(class, x as f64 + 0.5, y as f64 + 0.5, cx, cy, s as f64) {
                    for c in 0..3 {
                        image[c * h * w + y * w + x] = color[c];
                    }
                    painted[y * w + x] = true;
                    x_lo = x_lo.min(x);
                    y_lo = y_lo.min(y);
                    x_hi = x_hi.max(x + 1);
                    y_hi = y_hi.max(y + 1);
                }
            }
        }
        placed.push(rect);
        let bbox = BBox::new(
            (x_lo + x_hi) as f64 / 2.0 / w as f64,
            (y_lo + y_hi) as f64 / 2.0 / h as f64,
            (x_hi - x_lo) as f64 / w as f64,
            (y_hi - y_lo) as f64 / h as f64,
        );
        targets.push(Target { class, bbox });
    }
    debug_assert!(!targets.is_empty(), "first object always fits");
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    let grid = (h / spec.patch, w / spec.patch);
    Ok(SceneSample {
        image: Tensor::new([3, h, w], image)?,
        targets,
        pad_mask: vec![false; grid.0 * grid.1],
        grid,
    })
}

/// Zero-pads right and bottom to `size × size`. Boxes are re-normalized to
/// the padded frame and feature cells made entirely of padding are masked.
pub fn pad_to_square(sample: &SceneSample, size: usize, patch: usize) -> Result<SceneSample> {
    let (h, w) = (sample.height(), sample.width());
    if size < h || size < w {
        return Err(Error::contract(format!("cannot pad {h}x{w} down to {size}x{size}")));
    }
    if patch == 0 || size % patch != 0 {
        return Err(Error::config(format!("padded size {size} is not divisible by patch {patch}")));
    }
    let src = sample.image.data();
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..h {
            let from = &src[(c * h + y) * w..][..w];
            out[(c * size + y) * size..][..w].copy_from_slice(from);
        }
    }
    let g = size / patch;
    let mut pad_mask = vec![false; g * g];
    for gi in 0..g {
        for gj in 0..g {
            pad_mask[gi * g + gj] = gi * patch >= h || gj * patch >= w;
        }
    }
    let (sx, sy) = (w as f64 / size as f64, h as f64 / size as f64);
    let targets = sample
        .targets
        .iter()
        .map(|t| Target {
            class: t.class,
            bbox: BBox::new(t.bbox.cx * sx, t.bbox.cy * sy, t.bbox.w * sx, t.bbox.h * sy),
        })
        .collect();
    Ok(SceneSample {
        image: Tensor::new([3, size, size], out)?,
        targets,
        pad_mask,
        grid: (g, g),
    })
}

/// Generates and pads sample `i` of `split`, ready for the model.
pub fn load(seed: u64, split: Split, i: usize, spec: &DatasetSpec) -> Result<SceneSample> {
    let s = generate(seed, split.index(i), spec)?;
    if spec.height == spec.width {
        Ok(s)
    } else {
        pad_to_square(&s, spec.height.max(spec.width), spec.patch)
    }
}

const EXPORT_MAGIC: &[u8; 4] = b"PNKD";
const EXPORT_VERSION: u32 = 1;

/// Writes samples in the export format documented in the README.
pub fn write_export(mut out: impl Write, samples: &[SceneSample]) -> Result<()> {
    let u32le = |v: usize| (v as u32).to_le_bytes();
    out.write_all(EXPORT_MAGIC)?;
    out.write_all(&EXPORT_VERSION.to_le_bytes())?;
    out.write_all(&u32le(samples.len()))?;
    for s in samples {
        out.write_all(&u32le(s.height()))?;
        out.write_all(&u32le(s.width()))?;
        let mut buf = Vec::with_capacity(s.image.numel() * 4);
        for &v in s.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        out.write_all(&u32le(s.targets.len()))?;
        for t in &s.targets {
            out.write_all(&u32le(t.class))?;
            for v in t.bbox.to_array() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// An exported record: extents, pixels and targets, at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportRecord {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub targets: Vec<(u32, [f32; 4])>,
}

pub fn read_export(mut input: impl Read) -> Result<Vec<ExportRecord>> {
    fn u32_at(r: &mut impl Read) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::Data(format!("truncated export: {e}")))?;
        Ok(u32::from_le_bytes(b))
    }
    fn f32_at(r: &mut impl Read) -> Result<f32> {
        u32_at(r).map(f32::from_bits)
    }
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("truncated export: {e}")))?;
    if &magic != EXPORT_MAGIC {
        return Err(Error::Data("not a dataset export (bad magic)".into()));
    }
    let version = u32_at(&mut input)?;
    if version != EXPORT_VERSION {
        return Err(Error::Data(format!("unsupported export version {version}")));
    }
    let n = u32_at(&mut input)? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let height = u32_at(&mut input)? as usize;
        let width = u32_at(&mut input)? as usize;
        let pixels = (0..3 * height * width).map(|_| f32_at(&mut input)).collect::<Result<_>>()?;
        let nt = u32_at(&mut input)? as usize;
        let mut targets = Vec::with_capacity(nt);
        for _ in 0..nt {
            let class = u32_at(&mut input)?;
            let mut b = [0f32; 4];
            for v in &mut b {
                *v = f32_at(&mut input)?;
            }
            targets.push((class, b));
        }
        records.push(ExportRecord {
            height,
            width,
            pixels,
            targets,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bitwise_identical() {
        let spec = DatasetSpec::default();
        let a = generate(7, 123, &spec).unwrap();
        let b = generate(7, 123, &spec).unwrap();
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.targets, b.targets);
        assert_ne!(generate(8, 123, &spec).unwrap().image, a.image);
    }

    #[test]
    fn noiseless_circle_lies_inside_its_box() {
        let spec = DatasetSpec {
            classes: 1,
            max_objects: 1,
            noise: 0.0,
            ..DatasetSpec::default()
        };
        for index in 0..20 {
            let s = generate(1, index, &spec).unwrap();
            assert_eq!(s.targets.len(), 1);
            let c = s.targets[0].bbox.corners();
            let (h, w) = (s.height(), s.width());
            let bg: Vec<f64> = (0..3).map(|ch| s.image.data()[ch * h * w]).collect();
            let mut seen = 0;
            for y in 0..h {
                for x in 0..w {
                    let differs = (0..3).any(|ch| s.image.data()[ch * h * w + y * w + x] != bg[ch]);
                    if differs {
                        seen += 1;
                        let (px, py) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                        assert!(px > c.x0 && px < c.x1 && py > c.y0 && py < c.y1);
                    }
                }
            }
            assert!(seen > 0);
        }
    }

    #[test]
    fn targets_are_valid() {
        let spec = DatasetSpec::default();
        for index in 0..300 {
            let s = generate(3, index, &spec).unwrap();
            assert!(!s.targets.is_empty() && s.targets.len() <= spec.max_objects);
            for t in &s.targets {
                assert!(t.class < spec.classes);
                let c = t.bbox.corners();
                assert!(c.x0 >= 0.0 && c.y0 >= 0.0 && c.x1 <= 1.0 && c.y1 <= 1.0);
                assert!(t.bbox.w * 64.0 >= 4.0 && t.bbox.h * 64.0 >= 4.0);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let spec = DatasetSpec {
            noise: 0.0,
            ..DatasetSpec::default()
        };
        let mut counts = [0usize; 4];
        for index in 0..10_000 {
            for t in generate(11, index, &spec).unwrap().targets {
                counts[t.class] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn square_input_pads_to_identity() {
        let spec = DatasetSpec::default();
        let s = generate(1, 0, &spec).unwrap();
        let p = pad_to_square(&s, 64, 8).unwrap();
        assert_eq!(p, s);
        assert!(p.pad_mask.iter().all(|m| !m));
    }

    #[test]
    fn pad_mask_covers_bottom_band() {
        let spec = DatasetSpec {
            height: 48,
            ..DatasetSpec::default()
        };
        let s = generate(1, 0, &spec).unwrap();
        let p = pad_to_square(&s, 64, 8).unwrap();
        for gi in 0..8 {
            for gj in 0..8 {
                assert_eq!(p.pad_mask[gi * 8 + gj], gi >= 6);
            }
        }
        // content unchanged, padding zero
        assert_eq!(p.image.data()[64 + 3], s.image.data()[64 + 3]);
        assert_eq!(p.image.data()[50 * 64 + 3], 0.0);
        let (a, b) = (s.targets[0].bbox, p.targets[0].bbox);
        assert!((b.cy * 64.0 - a.cy * 48.0).abs() < 1e-12 && (b.h * 64.0 - a.h * 48.0).abs() < 1e-12);
        assert!(pad_to_square(&p, 32, 8).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        assert!(Split::Train.index(usize::MAX >> 30) < Split::Val.index(0));
    }

    #[test]
    fn export_roundtrip() {
        let spec = DatasetSpec::default();
        let samples: Vec<_> = (0..3).map(|i| generate(2, i, &spec).unwrap()).collect();
        let mut buf = Vec::new();
        write_export(&mut buf, &samples).unwrap();
        let back = read_export(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (r, s) in back.iter().zip(&samples) {
            assert_eq!((r.height, r.width), (64, 64));
            assert_eq!(r.pixels[5], s.image.data()[5] as f32);
            assert_eq!(r.targets.len(), s.targets.len());
            assert_eq!(r.targets[0].1[2], s.targets[0].bbox.w as f32);
        }
        assert!(read_export(&b"XXXX"[..]).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn boxes_are_at_least_four_pixels(seed in 0u64..1000, index in 0u64..1_000_000, lo in 5usize..20, extra in 0usize..12, occlusion: bool) {
            let spec = DatasetSpec {
                min_size: lo,
                max_size: lo + extra,
                occlusion,
                ..DatasetSpec::default()
            };
            let s = generate(seed, index, &spec).unwrap();
            for t in &s.targets {
                prop_assert!(t.bbox.w * 64.0 >= 4.0 - 1e-9 && t.bbox.h * 64.0 >= 4.0 - 1e-9, "{:?}", t.bbox);
            }
        }
    }
}

