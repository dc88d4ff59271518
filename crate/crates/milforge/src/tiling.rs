//! Tissue segmentation and non-overlapping 256x256 patch grids at
//! 10x/20x/40x for pyramidal slides. Test-scale slides arrive as single
//! level PNG/TIFF images treated as a one-level pyramid; lower
//! magnifications are synthesized by box downsampling.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PATCH_SIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "40x")]
    X40,
}

impl Magnification {
    /// Downsample relative to a 40x-native (0.25 mpp) level 0.
    pub fn downsample(self) -> u32 {
        match self {
            Magnification::X40 => 1,
            Magnification::X20 => 2,
            Magnification::X10 => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Magnification::X10 => "10x",
            Magnification::X20 => "20x",
            Magnification::X40 => "40x",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "10x" => Ok(Magnification::X10),
            "20x" => Ok(Magnification::X20),
            "40x" => Ok(Magnification::X40),
            other => Err(Error::Config(format!(
                "unknown magnification '{other}' (expected 10x|20x|40x)"
            ))),
        }
    }

    pub fn tag_byte(self) -> u8 {
        match self {
            Magnification::X10 => 0,
            Magnification::X20 => 1,
            Magnification::X40 => 2,
        }
    }

    pub fn from_tag_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Magnification::X10),
            1 => Ok(Magnification::X20),
            2 => Ok(Magnification::X40),
            other => Err(Error::Format(format!("unknown magnification tag {other}"))),
        }
    }

    pub fn all() -> [Magnification; 3] {
        [Magnification::X10, Magnification::X20, Magnification::X40]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelInfo {
    pub width: u32,
    pub height: u32,
    pub downsample: u32,
}

/// Pyramid metadata for one slide.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub levels: Vec<LevelInfo>,
    /// Microns per pixel at level 0; 0.25 for 40x-native scans.
    pub mpp: f64,
}

/// A slide opened for pixel access: pyramid metadata plus level-0 pixels.
pub struct Slide {
    pub meta: SlidePyramid,
    level0: image::RgbImage,
}

impl Slide {
    pub fn open(path: &Path, slide_id: &str) -> Result<Slide> {
        let img = image::open(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?
            .to_rgb8();
        Ok(Slide::from_image(img, slide_id))
    }

    pub fn from_image(level0: image::RgbImage, slide_id: &str) -> Slide {
        let meta = SlidePyramid {
            slide_id: slide_id.to_string(),
            levels: vec![LevelInfo {
                width: level0.width(),
                height: level0.height(),
                downsample: 1,
            }],
            mpp: 0.25,
        };
        Slide { meta, level0 }
    }

    pub fn width(&self) -> u32 {
        self.level0.width()
    }

    pub fn height(&self) -> u32 {
        self.level0.height()
    }

    /// Level-0 region read; the caller guarantees bounds.
    pub fn read_region(&self, x: u32, y: u32, w: u32, h: u32) -> Result<image::RgbImage> {
        if x + w > self.width() || y + h > self.height() {
            return Err(Error::Bounds(format!(
                "region ({x},{y}) {w}x{h} outside slide {}x{}",
                self.width(),
                self.height()
            )));
        }
        let mut out = image::RgbImage::new(w, h);
        for yy in 0..h {
            for xx in 0..w {
                out.put_pixel(xx, yy, *self.level0.get_pixel(x + xx, y + yy));
            }
        }
        Ok(out)
    }

    /// Box-averaged downsample by an integer factor. Partial border blocks
    /// average whatever pixels they cover.
    pub fn downsampled(&self, factor: u32) -> image::RgbImage {
        box_downsample(&self.level0, factor)
    }
}

pub fn box_downsample(img: &image::RgbImage, factor: u32) -> image::RgbImage {
    assert!(factor >= 1);
    if factor == 1 {
        return img.clone();
    }
    let w = (img.width() + factor - 1) / factor;
    let h = (img.height() + factor - 1) / factor;
    let mut out = image::RgbImage::new(w.max(1), h.max(1));
    for oy in 0..out.height() {
        for ox in 0..out.width() {
            let x0 = ox * factor;
            let y0 = oy * factor;
            let x1 = (x0 + factor).min(img.width());
            let y1 = (y0 + factor).min(img.height());
            let mut acc = [0u64; 3];
            let mut cnt = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p.0[c] as u64;
                    }
                    cnt += 1;
                }
            }
            out.put_pixel(
                ox,
                oy,
                image::Rgb([
                    (acc[0] / cnt) as u8,
                    (acc[1] / cnt) as u8,
                    (acc[2] / cnt) as u8,
                ]),
            );
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentationConfig {
    /// Downsample factor for the working-resolution mask.
    pub working_downsample: u32,
    /// Median blur kernel (odd) applied to the saturation channel.
    pub median_kernel: u32,
    /// Saturation threshold in [0,255]; ignored when `use_otsu` is set.
    pub sat_threshold: u8,
    pub use_otsu: bool,
    /// Morphological closing kernel (square).
    pub close_kernel: u32,
    /// Minimum tissue contour area, in working pixels.
    pub area_threshold: u32,
    /// Holes smaller than this (working pixels) are filled.
    pub hole_threshold: u32,
    /// Minimum mask-overlap fraction for a patch to be kept.
    pub min_tissue_fraction: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            working_downsample: 64,
            median_kernel: 7,
            sat_threshold: 8,
            use_otsu: false,
            close_kernel: 4,
            area_threshold: 100,
            hole_threshold: 16,
            min_tissue_fraction: 0.5,
        }
    }
}

impl SegmentationConfig {
    /// Stable hash of the configuration, recorded in manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:08x}", crc32fast::hash(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contour {
    pub id: usize,
    /// Component area in working pixels.
    pub area: u32,
}

/// Binary tissue raster at working resolution.
#[derive(Debug, Clone)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    /// Downsample factor from mask pixels to level-0 pixels.
    pub downsample: u32,
    pub mask: Vec<bool>,
    pub contours: Vec<Contour>,
}

impl TissueMask {
    pub fn at(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width + x) as usize]
    }

    pub fn tissue_area(&self) -> u32 {
        self.mask.iter().filter(|&&b| b).count() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }
}

fn median_blur(img: &[u8], w: usize, h: usize, kernel: u32) -> Vec<u8> {
    if kernel <= 1 {
        return img.to_vec();
    }
    let r = (kernel / 2) as isize;
    let mut out = vec![0u8; w * h];
    let mut window = Vec::with_capacity((kernel * kernel) as usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    window.push(img[yy * w + xx]);
                }
            }
            window.sort_unstable();
            out[y as usize * w + x as usize] = window[window.len() / 2];
        }
    }
    out
}

fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut sum_b = 0.0;
    let mut w_b = 0.0;
    let mut best = (0.0, 0u8);
    for t in 0..256 {
        w_b += hist[t] as f64;
        if w_b == 0.0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0.0 {
            break;
        }
        sum_b += t as f64 * hist[t] as f64;
        let m_b = sum_b / w_b;
        let m_f = (sum_all - sum_b) / w_f;
        let between = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    best.1
}

fn dilate(mask: &[bool], w: usize, h: usize, k: u32) -> Vec<bool> {
    let r = (k / 2) as isize;
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y + dy;
                    let xx = x + dx;
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize
                        && mask[yy as usize * w + xx as usize]
                    {
                        out[y as usize * w + x as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn erode(mask: &[bool], w: usize, h: usize, k: u32) -> Vec<bool> {
    let r = (k / 2) as isize;
    let mut out = vec![true; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y + dy;
                    let xx = x + dx;
                    let filled = yy >= 0
                        && yy < h as isize
                        && xx >= 0
                        && xx < w as isize
                        && mask[yy as usize * w + xx as usize];
                    if !filled {
                        out[y as usize * w + x as usize] = false;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// 8-connected component labeling; returns (labels, component sizes).
fn components(mask: &[bool], w: usize, h: usize, eight: bool) -> (Vec<i32>, Vec<u32>) {
    let mut labels = vec![-1i32; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let neigh: &[(isize, isize)] = if eight {
        &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    } else {
        &[(0, -1), (-1, 0), (1, 0), (0, 1)]
    };
    for start in 0..w * h {
        if !mask[start] || labels[start] >= 0 {
            continue;
        }
        let id = sizes.len() as i32;
        sizes.push(0);
        stack.push(start);
        labels[start] = id;
        while let Some(p) = stack.pop() {
            sizes[id as usize] += 1;
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            for &(dx, dy) in neigh {
                let (nx, ny) = (px + dx, py + dy);
                if nx >= 0 && nx < w as isize && ny >= 0 && ny < h as isize {
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] < 0 {
                        labels[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Segment tissue from background: downsample to the working level, take
/// HSV saturation, median blur, threshold (fixed or Otsu), morphological
/// closing, component filtering by area, small-hole filling.
///
/// Zero tissue is not an error: the result has an empty contour list.
pub fn segment_tissue(slide: &Slide, cfg: &SegmentationConfig) -> Result<TissueMask> {
    let work = slide.downsampled(cfg.working_downsample);
    let (w, h) = (work.width() as usize, work.height() as usize);

    let sat: Vec<u8> = work
        .pixels()
        .map(|p| (crate::features::saturation(p.0[0], p.0[1], p.0[2]) * 255.0).round() as u8)
        .collect();
    let blurred = median_blur(&sat, w, h, cfg.median_kernel);
    let threshold = if cfg.use_otsu {
        otsu_threshold(&blurred)
    } else {
        cfg.sat_threshold
    };
    let mut mask: Vec<bool> = blurred.iter().map(|&v| v > threshold).collect();

    if cfg.close_kernel > 1 {
        mask = erode(&dilate(&mask, w, h, cfg.close_kernel), w, h, cfg.close_kernel);
    }

    // drop small tissue components
    let (labels, sizes) = components(&mask, w, h, true);
    let keep: Vec<bool> = sizes.iter().map(|&s| s >= cfg.area_threshold).collect();
    for i in 0..mask.len() {
        if mask[i] && !keep[labels[i] as usize] {
            mask[i] = false;
        }
    }

    // fill enclosed background holes below the hole threshold
    let bg: Vec<bool> = mask.iter().map(|b| !b).collect();
    let (bg_labels, bg_sizes) = components(&bg, w, h, false);
    let mut touches_border = vec![false; bg_sizes.len()];
    for x in 0..w {
        for &y in &[0, h - 1] {
            let l = bg_labels[y * w + x];
            if l >= 0 {
                touches_border[l as usize] = true;
            }
        }
    }
    for y in 0..h {
        for &x in &[0, w - 1] {
            let l = bg_labels[y * w + x];
            if l >= 0 {
                touches_border[l as usize] = true;
            }
        }
    }
    for i in 0..mask.len() {
        if !mask[i] {
            let l = bg_labels[i] as usize;
            if !touches_border[l] && bg_sizes[l] < cfg.hole_threshold {
                mask[i] = true;
            }
        }
    }

    let (_, final_sizes) = components(&mask, w, h, true);
    let contours = final_sizes
        .iter()
        .enumerate()
        .map(|(id, &area)| Contour { id, area })
        .collect();

    Ok(TissueMask {
        width: w as u32,
        height: h as u32,
        downsample: cfg.working_downsample,
        mask,
        contours,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatchRef {
    /// Level-0 anchor coordinates.
    pub x: u32,
    pub y: u32,
    pub tissue_fraction: f64,
}

/// Non-overlapping patch lattice for one slide at one magnification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchGrid {
    pub slide_id: String,
    pub mag: Magnification,
    pub patch_size: u32,
    pub patches: Vec<PatchRef>,
}

impl PatchGrid {
    /// Level-0 footprint edge of one patch.
    pub fn footprint(&self) -> u32 {
        self.patch_size * self.mag.downsample()
    }
}

/// Tile the slide with the 256 x downsample lattice and keep patches whose
/// mask-overlap fraction reaches `min_tissue_fraction`.
pub fn build_patch_grid(
    mask: &TissueMask,
    slide: &SlidePyramid,
    mag: Magnification,
    min_tissue_fraction: f64,
) -> Result<PatchGrid> {
    let level0 = slide
        .levels
        .first()
        .ok_or_else(|| Error::Config("slide has no levels".into()))?;
    if level0.downsample != 1 {
        return Err(Error::Config("level 0 downsample must be 1".into()));
    }
    let fs = PATCH_SIZE * mag.downsample();
    let mut patches = Vec::new();
    let mut y = 0u32;
    while y + fs <= level0.height {
        let mut x = 0u32;
        while x + fs <= level0.width {
            let frac = tissue_fraction(mask, x, y, fs);
            if frac >= min_tissue_fraction {
                patches.push(PatchRef {
                    x,
                    y,
                    tissue_fraction: frac,
                });
            }
            x += fs;
        }
        y += fs;
    }
    Ok(PatchGrid {
        slide_id: slide.slide_id.clone(),
        mag,
        patch_size: PATCH_SIZE,
        patches,
    })
}

fn tissue_fraction(mask: &TissueMask, x: u32, y: u32, fs: u32) -> f64 {
    let ds = mask.downsample;
    // mask pixels whose footprint intersects [x, x+fs)
    let x0 = x / ds;
    let y0 = y / ds;
    let x1 = ((x + fs + ds - 1) / ds).min(mask.width);
    let y1 = ((y + fs + ds - 1) / ds).min(mask.height);
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let mut hit = 0u64;
    let mut total = 0u64;
    for my in y0..y1 {
        for mx in x0..x1 {
            total += 1;
            if mask.at(mx, my) {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

/// Exact 256x256 crop at the magnification's downsample, anchored at
/// level-0 coordinates.
pub fn extract_patch_pixels(
    slide: &Slide,
    x: u32,
    y: u32,
    mag: Magnification,
) -> Result<image::RgbImage> {
    let fs = PATCH_SIZE * mag.downsample();
    let region = slide.read_region(x, y, fs, fs)?;
    Ok(box_downsample(&region, mag.downsample()))
}

// ---- patch manifest (JSON lines) ----

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    slide_id: String,
    mag: Magnification,
    x: u32,
    y: u32,
    size: u32,
    tissue_fraction: f64,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn encode_manifest(grid: &PatchGrid, config_hash: &str) -> String {
    let mut out = String::new();
    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for p in &grid.patches {
        let rec = ManifestRecord {
            slide_id: grid.slide_id.clone(),
            mag: grid.mag,
            x: p.x,
            y: p.y,
            size: grid.patch_size,
            tissue_fraction: p.tissue_fraction,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_manifest(text: &str) -> Result<PatchGrid> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty manifest".into()))?;
    let header: ManifestHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest schema version {}",
            header.schema_version
        )));
    }
    let mut slide_id: Option<String> = None;
    let mut mag: Option<Magnification> = None;
    let mut size = PATCH_SIZE;
    let mut patches = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 2)))?;
        if let Some(ref sid) = slide_id {
            if *sid != rec.slide_id {
                return Err(Error::Format("manifest mixes slide ids".into()));
            }
        } else {
            slide_id = Some(rec.slide_id.clone());
        }
        match mag {
            Some(m) if m != rec.mag => {
                return Err(Error::Format("manifest mixes magnifications".into()))
            }
            None => mag = Some(rec.mag),
            _ => {}
        }
        size = rec.size;
        patches.push(PatchRef {
            x: rec.x,
            y: rec.y,
            tissue_fraction: rec.tissue_fraction,
        });
    }
    Ok(PatchGrid {
        slide_id: slide_id.unwrap_or_default(),
        mag: mag.unwrap_or(Magnification::X40),
        patch_size: size,
        patches,
    })
}

pub fn write_manifest(grid: &PatchGrid, config_hash: &str, path: &Path) -> Result<()> {
    std::fs::write(path, encode_manifest(grid, config_hash))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<PatchGrid> {
    decode_manifest(&std::fs::read_to_string(path)?)
}
