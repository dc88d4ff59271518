//! Attention heatmaps: percent-rank score normalization, a diverging
//! blue-to-red colormap, tile overlays on a downsampled slide, and
//! top-patch export.

use crate::error::{Error, Result};
use crate::tiling::{extract_patch_pixels, PatchGrid, Slide};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSpec {
    /// Level-0 downsample factor of the rendered overlay.
    pub downsample: u32,
    /// Blend weight of the heatmap color over the tissue.
    pub opacity: f64,
    /// Patches exported by `export_top_patches`.
    pub top_k: usize,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec {
            downsample: 32,
            opacity: 0.5,
            top_k: 5,
        }
    }
}

impl HeatmapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::Param("heatmap downsample must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Param(format!("opacity {} outside [0,1]", self.opacity)));
        }
        Ok(())
    }
}

/// Percent-rank normalization to [0,1]. Tied scores share the average of
/// their ranks; a constant vector maps to 0.5 and a singleton to 1.0.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![1.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // average 0-based rank of the tie group
        let avg = (i + j - 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            out[idx] = avg / (n - 1) as f64;
        }
        i = j;
    }
    out
}

/// 256-entry diverging colormap: blue through light gray to red.
pub fn colormap_table() -> [[u8; 3]; 256] {
    const LO: [f64; 3] = [59.0, 76.0, 192.0];
    const MID: [f64; 3] = [221.0, 221.0, 221.0];
    const HI: [f64; 3] = [180.0, 4.0, 38.0];
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        for c in 0..3 {
            let v = if t < 0.5 {
                LO[c] + (MID[c] - LO[c]) * (t / 0.5)
            } else {
                MID[c] + (HI[c] - MID[c]) * ((t - 0.5) / 0.5)
            };
            entry[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    table
}

pub fn color_for(t: f64) -> [u8; 3] {
    let idx = (t.clamp(0.0, 1.0) * 255.0).round() as usize;
    colormap_table()[idx]
}

fn blend(base: [u8; 3], color: [u8; 3], alpha: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = (1.0 - alpha) * base[c] as f64 + alpha * color[c] as f64;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn paint_tile(img: &mut RgbImage, grid: &PatchGrid, p_idx: usize, ds: u32, color: [u8; 3], alpha: f64) {
    let p = &grid.patches[p_idx];
    let fs = grid.footprint();
    let x0 = p.x / ds;
    let y0 = p.y / ds;
    let x1 = ((p.x + fs).div_ceil(ds)).min(img.width());
    let y1 = ((p.y + fs).div_ceil(ds)).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let px = img.get_pixel_mut(x, y);
            px.0 = blend(px.0, color, alpha);
        }
    }
}

/// Blend per-patch scores over a downsampled rendering of the slide.
/// `scores` must align one-to-one with `grid.patches`.
pub fn render_overlay(
    slide: &Slide,
    grid: &PatchGrid,
    scores: &[f64],
    spec: &HeatmapSpec,
) -> Result<RgbImage> {
    spec.validate()?;
    if scores.len() != grid.patches.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} patches",
            scores.len(),
            grid.patches.len()
        )));
    }
    let mut img = slide.downsampled(spec.downsample);
    let normalized = normalize_scores(scores);
    for (i, &t) in normalized.iter().enumerate() {
        paint_tile(&mut img, grid, i, spec.downsample, color_for(t), spec.opacity);
    }
    Ok(img)
}

/// Single-tile marker for heads without attention: fills one patch with
/// the top colormap entry.
pub fn render_marker(
    slide: &Slide,
    grid: &PatchGrid,
    patch_index: usize,
    spec: &HeatmapSpec,
) -> Result<RgbImage> {
    spec.validate()?;
    if patch_index >= grid.patches.len() {
        return Err(Error::Bounds(format!(
            "patch index {patch_index} out of {}",
            grid.patches.len()
        )));
    }
    let mut img = slide.downsampled(spec.downsample);
    paint_tile(&mut img, grid, patch_index, spec.downsample, color_for(1.0), spec.opacity);
    Ok(img)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopPatch {
    pub rank: usize,
    pub x: u32,
    pub y: u32,
    pub score: f64,
    pub file: String,
}

/// Write the k highest-scoring patches as PNGs plus a JSON sidecar.
/// Ties break on (x, y) so the export is deterministic.
pub fn export_top_patches(
    slide: &Slide,
    grid: &PatchGrid,
    scores: &[f64],
    k: usize,
    out_dir: &Path,
) -> Result<Vec<TopPatch>> {
    if scores.len() != grid.patches.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} patches",
            scores.len(),
            grid.patches.len()
        )));
    }
    if grid.patches.is_empty() {
        return Err(Error::MissingData("grid has no patches".into()));
    }
    let k_eff = k.min(grid.patches.len());
    if k_eff < k {
        log::warn!("requested top {k} patches but only {} exist", grid.patches.len());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(grid.patches[i].x.cmp(&grid.patches[j].x))
            .then(grid.patches[i].y.cmp(&grid.patches[j].y))
    });
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::with_capacity(k_eff);
    for (rank, &i) in order[..k_eff].iter().enumerate() {
        let p = &grid.patches[i];
        let pixels = extract_patch_pixels(slide, p.x, p.y, grid.mag)?;
        let file = format!(
            "{}_rank{}_x{}_y{}_s{:.4}.png",
            grid.slide_id, rank, p.x, p.y, scores[i]
        );
        pixels
            .save(out_dir.join(&file))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        out.push(TopPatch {
            rank,
            x: p.x,
            y: p.y,
            score: scores[i],
            file,
        });
    }
    let sidecar: PathBuf = out_dir.join(format!("{}_top_patches.json", grid.slide_id));
    std::fs::write(sidecar, serde_json::to_string_pretty(&out).unwrap())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{Magnification, PatchRef};
    use image::Rgb;

    fn checker_slide(w: u32, h: u32) -> Slide {
        let img = RgbImage::from_fn(w, h, |x, y| {
            if (x / 8 + y / 8) % 2 == 0 {
                Rgb([200, 200, 200])
            } else {
                Rgb([40, 40, 40])
            }
        });
        Slide::from_image(img, "checker")
    }

    fn grid_2x2(mag: Magnification) -> PatchGrid {
        let fs = 256 * mag.downsample();
        PatchGrid {
            slide_id: "checker".into(),
            mag,
            patch_size: 256,
            patches: vec![
                PatchRef { x: 0, y: 0, tissue_fraction: 1.0 },
                PatchRef { x: fs, y: 0, tissue_fraction: 1.0 },
                PatchRef { x: 0, y: fs, tissue_fraction: 1.0 },
                PatchRef { x: fs, y: fs, tissue_fraction: 1.0 },
            ],
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_scores(&[0.1, 0.4, 0.2]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_scores(&[3.0, 3.0, 3.0]), vec![0.5, 0.5, 0.5]);
        assert_eq!(normalize_scores(&[7.0]), vec![1.0]);
        assert!(normalize_scores(&[]).is_empty());
        // tie group shares the averaged rank
        assert_eq!(normalize_scores(&[1.0, 2.0, 2.0, 3.0]), vec![0.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn normalization_is_monotone_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            assert_eq!(normalize_scores(&scores), normalize_scores(&warped));
        }
    }

    #[test]
    fn colormap_endpoints_and_midpoint() {
        let t = colormap_table();
        assert_eq!(t[0], [59, 76, 192]);
        assert_eq!(t[255], [180, 4, 38]);
        // near-middle entries approach light gray
        let mid = t[128];
        for c in mid {
            assert!((c as i32 - 221).abs() <= 3, "{mid:?}");
        }
        // channels rise toward the gray midpoint and fall after it
        for w in t[..128].windows(2) {
            for c in 0..3 {
                assert!(w[1][c] >= w[0][c]);
            }
        }
        for w in t[129..].windows(2) {
            for c in 0..3 {
                assert!(w[1][c] <= w[0][c]);
            }
        }
    }

    #[test]
    fn zero_opacity_reproduces_the_base_image() {
        let slide = checker_slide(1024, 1024);
        let grid = grid_2x2(Magnification::X20);
        let spec = HeatmapSpec { opacity: 0.0, ..HeatmapSpec::default() };
        let overlay = render_overlay(&slide, &grid, &[0.1, 0.2, 0.3, 0.4], &spec).unwrap();
        let base = slide.downsampled(spec.downsample);
        assert_eq!(overlay.as_raw(), base.as_raw());
    }

    #[test]
    fn tiles_change_and_do_not_bleed() {
        let slide = checker_slide(2048, 1024);
        // grid covering only the left half at 20x
        let grid = PatchGrid {
            slide_id: "checker".into(),
            mag: Magnification::X20,
            patch_size: 256,
            patches: vec![
                PatchRef { x: 0, y: 0, tissue_fraction: 1.0 },
                PatchRef { x: 512, y: 0, tissue_fraction: 1.0 },
            ],
        };
        let spec = HeatmapSpec { downsample: 32, opacity: 0.6, top_k: 5 };
        let overlay = render_overlay(&slide, &grid, &[0.0, 1.0], &spec).unwrap();
        let base = slide.downsampled(32);
        let mut changed = 0usize;
        for y in 0..base.height() {
            for x in 0..base.width() {
                let same = overlay.get_pixel(x, y) == base.get_pixel(x, y);
                if x < 1024 / 32 {
                    if !same {
                        changed += 1;
                    }
                } else {
                    assert!(same, "bleed at ({x},{y})");
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let slide = checker_slide(1024, 1024);
        let grid = grid_2x2(Magnification::X20);
        let spec = HeatmapSpec::default();
        let a = render_overlay(&slide, &grid, &[0.4, 0.1, 0.9, 0.9], &spec).unwrap();
        let b = render_overlay(&slide, &grid, &[0.4, 0.1, 0.9, 0.9], &spec).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn score_patch_mismatch_is_rejected() {
        let slide = checker_slide(1024, 1024);
        let grid = grid_2x2(Magnification::X20);
        let err = render_overlay(&slide, &grid, &[0.5; 3], &HeatmapSpec::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn marker_touches_exactly_one_tile() {
        let slide = checker_slide(1024, 1024);
        let grid = grid_2x2(Magnification::X20);
        let spec = HeatmapSpec { opacity: 1.0, ..HeatmapSpec::default() };
        let marked = render_marker(&slide, &grid, 3, &spec).unwrap();
        let base = slide.downsampled(spec.downsample);
        for y in 0..base.height() {
            for x in 0..base.width() {
                let inside = x >= 512 / 32 && y >= 512 / 32;
                let same = marked.get_pixel(x, y) == base.get_pixel(x, y);
                if !inside {
                    assert!(same, "bleed at ({x},{y})");
                }
            }
        }
        assert!(render_marker(&slide, &grid, 9, &spec).is_err());
    }

    #[test]
    fn top_patch_export_selects_the_right_set() {
        let dir = tempfile::tempdir().unwrap();
        let slide = checker_slide(1024, 1024);
        let grid = grid_2x2(Magnification::X20);
        let scores = [0.2, 0.9, 0.9, 0.1];
        let out = export_top_patches(&slide, &grid, &scores, 2, dir.path()).unwrap();
        assert_eq!(out.len(), 2);
        // the two 0.9 patches, tie broken by (x, y)
        assert_eq!((out[0].x, out[0].y), (0, 512));
        assert_eq!((out[1].x, out[1].y), (512, 0));
        for (rank, p) in out.iter().enumerate() {
            assert_eq!(p.rank, rank);
            assert!(dir.path().join(&p.file).exists());
            assert!(p.file.contains(&format!("rank{rank}")));
        }
        let sidecar = dir.path().join("checker_top_patches.json");
        let parsed: Vec<TopPatch> =
            serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(parsed.len(), 2);
        // k larger than the grid clamps
        let all = export_top_patches(&slide, &grid, &scores, 10, dir.path()).unwrap();
        assert_eq!(all.len(), 4);
    }
}
