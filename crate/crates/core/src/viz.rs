//! Map renderers: single-prototype overlays, multi-prototype maps and
//! attention × prototype product maps, written as binary PPM (P6).

use std::path::Path;

use crate::detr::AttentionMap;
use crate::error::{Error, Result};
use crate::losses::PrototypeAssignment;
use crate::neck::PrototypeMap;
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

pub const YELLOW: Rgb = [255, 255, 0];
pub const CYAN: Rgb = [0, 255, 255];

/// Output pixels per input pixel.
pub const PANEL_SCALE: usize = 4;

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(x, y, c);
            }
        }
    }

    fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Distinct colors for the most active prototypes plus a catch-all color for
/// everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub colors: Vec<Rgb>,
    pub catch_all: Rgb,
}

impl Palette {
    pub fn new(colors: Vec<Rgb>, catch_all: Rgb) -> Result<Self> {
        for (i, c) in colors.iter().enumerate() {
            if *c == catch_all || colors[..i].contains(c) {
                return Err(Error::contract(format!("palette color {c:?} is repeated or equals the catch-all")));
            }
        }
        Ok(Palette { colors, catch_all })
    }
}

impl Default for Palette {
    fn default() -> Self {
        Palette::new(
            vec![
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 90, 200],
                [245, 130, 48],
                [145, 30, 180],
                [240, 50, 230],
                [128, 128, 0],
                [250, 190, 212],
                [170, 110, 40],
            ],
            CYAN,
        )
        .expect("default palette is distinct")
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Luminance of a `[3, H, W]` image in `[0, 255]`.
fn grayscale(image: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "render",
            lhs: s.to_vec(),
            rhs: vec![3],
        });
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let g = (0..h * w)
        .map(|i| 255.0 * (0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i]))
        .collect();
    Ok((g, h, w))
}

/// The image itself as 8-bit RGB, at its own resolution.
pub fn photo(image: &Tensor) -> Image {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.set(x, y, [to_u8(255.0 * d[i]), to_u8(255.0 * d[h * w + i]), to_u8(255.0 * d[2 * h * w + i])]);
        }
    }
    out
}

/// Nearest-neighbor upscale by an integer factor.
fn upscale(img: &Image, k: usize) -> Image {
    let mut out = Image::new(img.width * k, img.height * k);
    for y in 0..out.height {
        for x in 0..out.width {
            out.set(x, y, img.get(x / k, y / k));
        }
    }
    out
}

/// Feature cell covering pixel `(x, y)`.
fn cell_of(x: usize, y: usize, w: usize, h: usize, gw: usize, gh: usize) -> usize {
    (y * gh / h) * gw + x * gw / w
}

/// Prototype `p` as a yellow overlay of opacity `m_p(p)` over the grayscale image.
pub fn render_single(m: &PrototypeMap, p: usize, image: &Tensor) -> Result<Image> {
    if p >= m.num_prototypes {
        return Err(Error::contract(format!("prototype {p} out of range (P = {})", m.num_prototypes)));
    }
    let (gray, h, w) = grayscale(image)?;
    let ch = m.channel(p);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let a = ch[cell_of(x, y, w, h, m.width, m.height)];
            let g = gray[y * w + x];
            let px: Rgb = std::array::from_fn(|c| to_u8((1.0 - a) * g + a * YELLOW[c] as f64));
            out.set(x, y, px);
        }
    }
    Ok(upscale(&out, PANEL_SCALE))
}

/// Prototype indices by decreasing score, ties by index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Blend weights of one cell: one per entry of `shown`, then the catch-all
/// weight for the rest of `activations`. Nonnegative and summing to
/// `Σ activations`.
pub fn cell_weights(activations: &[f64], shown: &[usize]) -> Vec<f64> {
    let mut w: Vec<f64> = shown.iter().map(|&p| activations[p]).collect();
    let total: f64 = activations.iter().sum();
    let rest = (total - w.iter().sum::<f64>()).max(0.0);
    w.push(rest);
    w
}

fn blend(weights: &[f64], colors: &[Rgb], base: (f64, [f64; 3])) -> Rgb {
    std::array::from_fn(|c| {
        let mut v = base.0 * base.1[c];
        for (w, col) in weights.iter().zip(colors) {
            v += w * col[c] as f64;
        }
        to_u8(v)
    })
}

/// Legend rows: color swatch followed by text.
fn legend(rows: &[(Rgb, String)], width: usize) -> Image {
    let row_h = 11;
    let mut img = Image::new(width, rows.len() * row_h + 4);
    img.fill_rect(0, 0, img.width, img.height, [255, 255, 255]);
    for (r, (color, text)) in rows.iter().enumerate() {
        let y = 2 + r * row_h;
        img.fill_rect(2, y, 9, 9, *color);
        draw_text(&mut img, 14, y + 1, text, [0, 0, 0]);
    }
    img
}

fn stack_with_legend(panels: &[Image], rows: &[(Rgb, String)]) -> Image {
    let w: usize = panels.iter().map(|p| p.width).sum::<usize>() + 4 * (panels.len() - 1);
    let h = panels.iter().map(|p| p.height).max().unwrap_or(0);
    let leg = legend(rows, w);
    let mut out = Image::new(w, h + leg.height);
    out.fill_rect(0, 0, w, h, [255, 255, 255]);
    let mut x = 0;
    for p in panels {
        out.blit(p, x, 0);
        x += p.width + 4;
    }
    out.blit(&leg, 0, h);
    out
}

fn legend_rows(shown: &[usize], palette: &Palette, assign: Option<&PrototypeAssignment>) -> Vec<(Rgb, String)> {
    let mut rows: Vec<(Rgb, String)> = shown
        .iter()
        .zip(&palette.colors)
        .map(|(&p, &c)| {
            let class = assign.map_or(String::new(), |a| format!(" C{}", a.class_of[p]));
            (c, format!("P{p}{class}"))
        })
        .collect();
    rows.push((palette.catch_all, "REST".to_string()));
    rows
}

/// Map panel for the given per-cell weights (`[cells][k+1]`), upscaled to
/// the image size, with `base` filling whatever weight is left.
fn map_panel(weights: &[Vec<f64>], colors: &[Rgb], gh: usize, gw: usize, h: usize, w: usize, base: Option<&[f64]>) -> Image {
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let cw = &weights[cell_of(x, y, w, h, gw, gh)];
            let left = (1.0 - cw.iter().sum::<f64>()).max(0.0);
            let b = base.map_or(0.0, |g| g[y * w + x]);
            out.set(x, y, blend(cw, colors, (left, [b; 3])));
        }
    }
    upscale(&out, PANEL_SCALE)
}

/// The `top_k` prototypes by total activation get palette colors, the rest
/// share the catch-all color; each cell is the activation-weighted blend.
/// Output: image panel, opaque map panel, legend below.
pub fn render_multi(m: &PrototypeMap, top_k: usize, palette: &Palette, image: &Tensor, assign: Option<&PrototypeAssignment>) -> Result<Image> {
    if top_k > palette.colors.len() {
        return Err(Error::contract(format!("top_k {top_k} exceeds the palette size {}", palette.colors.len())));
    }
    grayscale(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let shown: Vec<usize> = rank(&m.totals()).into_iter().take(top_k.min(m.num_prototypes)).collect();
    let weights: Vec<Vec<f64>> = (0..m.cells())
        .map(|cell| {
            let act: Vec<f64> = (0..m.num_prototypes).map(|p| m.channel(p)[cell]).collect();
            cell_weights(&act, &shown)
        })
        .collect();
    let mut colors: Vec<Rgb> = palette.colors[..shown.len()].to_vec();
    colors.push(palette.catch_all);
    let panel = map_panel(&weights, &colors, m.height, m.width, h, w, None);
    let picture = upscale(&photo(image), PANEL_SCALE);
    Ok(stack_with_legend(&[picture, panel], &legend_rows(&shown, palette, assign)))
}

/// Gaussian blur (σ in cells, zero outside the grid) renormalized to sum 1.
/// σ = 0 returns the map unchanged.
pub fn blur_attention(a: &AttentionMap, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return a.values.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let (h, w) = (a.height as isize, a.width as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (ii, jj) = if horizontal { (i, j + d) } else { (i + d, j) };
                    if (0..h).contains(&ii) && (0..w).contains(&jj) {
                        acc += kv * src[(ii * w + jj) as usize];
                    }
                }
                out[(i * w + j) as usize] = acc;
            }
        }
        out
    };
    let blurred = pass(&pass(&a.values, true), false);
    let total: f64 = blurred.iter().sum();
    blurred.into_iter().map(|v| v / total).collect()
}

/// Per-prototype intensity `blur(m_a)_{ij} · m_p(p, i, j)`, as `[P][cells]`.
pub fn product_intensities(blurred: &[f64], m: &PrototypeMap) -> Vec<Vec<f64>> {
    (0..m.num_prototypes)
        .map(|p| m.channel(p).iter().zip(blurred).map(|(a, b)| a * b).collect())
        .collect()
}

/// Product map for one detection: the blurred attention times each
/// prototype map, colored like [`render_multi`] with prototypes ranked by
/// attended mass, scaled so the most attended cell is fully opaque, over the
/// grayscale image.
pub fn render_product(
    att: &AttentionMap,
    m: &PrototypeMap,
    top_k: usize,
    palette: &Palette,
    image: &Tensor,
    blur_sigma: f64,
    assign: Option<&PrototypeAssignment>,
) -> Result<Image> {
    if (att.height, att.width) != (m.height, m.width) {
        return Err(Error::Shape {
            op: "render_product",
            lhs: vec![att.height, att.width],
            rhs: vec![m.height, m.width],
        });
    }
    if top_k > palette.colors.len() {
        return Err(Error::contract(format!("top_k {top_k} exceeds the palette size {}", palette.colors.len())));
    }
    let (gray, h, w) = grayscale(image)?;
    let blurred = blur_attention(att, blur_sigma);
    let peak = blurred.iter().cloned().fold(0.0, f64::max);
    let inten = product_intensities(&blurred, m);
    let mass: Vec<f64> = inten.iter().map(|v| v.iter().sum()).collect();
    let shown: Vec<usize> = rank(&mass).into_iter().take(top_k.min(m.num_prototypes)).collect();
    let weights: Vec<Vec<f64>> = (0..m.cells())
        .map(|cell| {
            let act: Vec<f64> = inten.iter().map(|v| if peak > 0.0 { v[cell] / peak } else { 0.0 }).collect();
            cell_weights(&act, &shown)
        })
        .collect();
    let mut colors: Vec<Rgb> = palette.colors[..shown.len()].to_vec();
    colors.push(palette.catch_all);
    let panel = map_panel(&weights, &colors, m.height, m.width, h, w, Some(&gray));
    Ok(stack_with_legend(&[panel], &legend_rows(&shown, palette, assign)))
}

/// `{split}_{index}_{mode}[_{q|p}N].ppm`
pub fn map_file_name(split: &str, index: usize, mode: &str, suffix: Option<(char, usize)>) -> String {
    match suffix {
        Some((c, n)) => format!("{split}_{index}_{mode}_{c}{n}.ppm"),
        None => format!("{split}_{index}_{mode}.ppm"),
    }
}

// 5×7 glyphs, one byte per row, low 5 bits used (bit 4 = leftmost column).
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut Image, x0: usize, y0: usize, text: &str, color: Rgb) {
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (dy, row) in g.iter().enumerate() {
            for dx in 0..5 {
                if row & (0x10 >> dx) != 0 {
                    let (x, y) = (x0 + i * 6 + dx, y0 + dy);
                    if x < img.width && y < img.height {
                        img.set(x, y, color);
                    }
                }
            }
        }
    }
}
