//! The feature-grid data model.
//!
//! A slide is an H x W grid of D-dimensional patch features with a tissue
//! mask; cell (row, col) corresponds to a `patch_size_px` square of pixels.
//! Training consumes crops of the grid: a 16x16 region crop per slide, from
//! which two 14x14 global and ten 6x6 local views are cut. Crops copy
//! features, mask, and source coordinates together, so every token keeps the
//! (feature, coordinate) pair it had in the slide.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::{arg_err, shape_err, Error, Result};

pub const REGION_SIDE: usize = 16;
pub const GLOBAL_SIDE: usize = 14;
pub const LOCAL_SIDE: usize = 6;
pub const N_GLOBAL_VIEWS: usize = 2;
pub const N_LOCAL_VIEWS: usize = 10;
/// Tissue components smaller than this many cells are dropped.
pub const MIN_GROUP_CELLS: usize = 16;
/// Reference patch edge in pixels; coordinates are expressed in units of it.
pub const REF_PATCH_PX: u32 = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub patch_size_px: u32,
    pub magnification: String,
    mask: Vec<bool>,
    features: Vec<f32>,
}

impl FeatureGrid {
    /// All-background grid; fill cells with [`FeatureGrid::set_cell`].
    pub fn new(height: usize, width: usize, dim: usize, patch_size_px: u32) -> Result<FeatureGrid> {
        if height == 0 || width == 0 || dim == 0 || patch_size_px == 0 {
            return Err(arg_err!("grid dims must be positive"));
        }
        Ok(FeatureGrid {
            height,
            width,
            dim,
            patch_size_px,
            magnification: String::from("20x"),
            mask: vec![false; height * width],
            features: vec![0.0; height * width * dim],
        })
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        dim: usize,
        patch_size_px: u32,
        mask: Vec<bool>,
        features: Vec<f32>,
    ) -> Result<FeatureGrid> {
        if mask.len() != height * width {
            return Err(shape_err!("mask len {} vs {}x{}", mask.len(), height, width));
        }
        if features.len() != height * width * dim {
            return Err(shape_err!(
                "features len {} vs {}x{}x{}",
                features.len(),
                height,
                width,
                dim
            ));
        }
        let mut grid = FeatureGrid {
            height,
            width,
            dim,
            patch_size_px,
            magnification: String::from("20x"),
            mask,
            features,
        };
        // keep the masked-out-cells-are-zero invariant
        for idx in 0..grid.height * grid.width {
            if !grid.mask[idx] {
                grid.features[idx * dim..(idx + 1) * dim].fill(0.0);
            }
        }
        if grid.tissue_count() == 0 {
            return Err(Error::Empty(String::from("grid has no tissue cells")));
        }
        Ok(grid)
    }

    pub fn set_cell(&mut self, row: usize, col: usize, feature: &[f32]) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(arg_err!("cell ({row},{col}) out of {}x{}", self.height, self.width));
        }
        if feature.len() != self.dim {
            return Err(shape_err!("feature len {} vs dim {}", feature.len(), self.dim));
        }
        let idx = row * self.width + col;
        self.mask[idx] = true;
        self.features[idx * self.dim..(idx + 1) * self.dim].copy_from_slice(feature);
        Ok(())
    }

    pub fn is_tissue(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let idx = row * self.width + col;
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn tissue_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn tissue_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.is_tissue(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Coordinate unit: one cell counts as patch_size_px / 512 coordinate
    /// steps, so models trained at one patch size transfer to another.
    pub fn coord_scale(&self) -> f64 {
        self.patch_size_px as f64 / REF_PATCH_PX as f64
    }

    /// Restrict the tissue mask to the given groups (zeroing everything
    /// else), the preprocessing step that discards sub-threshold specks.
    pub fn retain_groups(&self, groups: &[TissueGroup]) -> Result<FeatureGrid> {
        let mut keep = vec![false; self.height * self.width];
        for g in groups {
            for &(r, c) in &g.members {
                keep[r * self.width + c] = true;
            }
        }
        let mut out = self.clone();
        for idx in 0..keep.len() {
            if !keep[idx] {
                out.mask[idx] = false;
                out.features[idx * self.dim..(idx + 1) * self.dim].fill(0.0);
            }
        }
        if out.tissue_count() == 0 {
            return Err(Error::Empty(String::from("no tissue groups survive filtering")));
        }
        Ok(out)
    }
}

/// Arrange loose (pixel_x, pixel_y, feature) patches into the tight bounding
/// grid. Coordinates must be multiples of `patch_size_px` and unique.
pub fn build_grid(
    items: &[(u64, u64, Vec<f32>)],
    patch_size_px: u32,
) -> Result<FeatureGrid> {
    if items.is_empty() {
        return Err(Error::Empty(String::from("build_grid with no patches")));
    }
    if patch_size_px == 0 {
        return Err(arg_err!("patch_size_px must be positive"));
    }
    let p = patch_size_px as u64;
    let dim = items[0].2.len();
    let mut cells = Vec::with_capacity(items.len());
    for (px, py, feat) in items {
        if px % p != 0 || py % p != 0 {
            return Err(arg_err!("pixel ({px},{py}) not a multiple of {p}"));
        }
        if feat.len() != dim {
            return Err(shape_err!("feature dim {} vs {}", feat.len(), dim));
        }
        cells.push((px / p, py / p, feat));
    }
    let min_cx = cells.iter().map(|c| c.0).min().unwrap();
    let max_cx = cells.iter().map(|c| c.0).max().unwrap();
    let min_cy = cells.iter().map(|c| c.1).min().unwrap();
    let max_cy = cells.iter().map(|c| c.1).max().unwrap();
    let width = (max_cx - min_cx + 1) as usize;
    let height = (max_cy - min_cy + 1) as usize;
    let mut grid = FeatureGrid::new(height, width, dim, patch_size_px)?;
    for (cx, cy, feat) in cells {
        let row = (cy - min_cy) as usize;
        let col = (cx - min_cx) as usize;
        if grid.is_tissue(row, col) {
            return Err(arg_err!("duplicate patch at cell ({row},{col})"));
        }
        grid.set_cell(row, col, feat)?;
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueGroup {
    pub members: Vec<(usize, usize)>,
    /// (min_row, min_col, max_row, max_col), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

/// 8-connected components of the tissue mask, dropping components with fewer
/// than `min_patches` cells. Groups are ordered by (min row, min col).
pub fn group_tissue(grid: &FeatureGrid, min_patches: usize) -> Vec<TissueGroup> {
    let (h, w) = (grid.height, grid.width);
    let mut seen = vec![false; h * w];
    let mut groups = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if seen[r0 * w + c0] || !grid.is_tissue(r0, c0) {
                continue;
            }
            let mut members = Vec::new();
            let mut stack = vec![(r0, c0)];
            seen[r0 * w + c0] = true;
            while let Some((r, c)) = stack.pop() {
                members.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[nr * w + nc] && grid.is_tissue(nr, nc) {
                            seen[nr * w + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            if members.len() < min_patches {
                continue;
            }
            members.sort_unstable();
            let bbox = (
                members.iter().map(|m| m.0).min().unwrap(),
                members.iter().map(|m| m.1).min().unwrap(),
                members.iter().map(|m| m.0).max().unwrap(),
                members.iter().map(|m| m.1).max().unwrap(),
            );
            groups.push(TissueGroup { members, bbox });
        }
    }
    groups.sort_by_key(|g| (g.bbox.0, g.bbox.1));
    groups
}

/// An axis-aligned window of a grid: features, mask, and per-cell source
/// coordinates travel together. Cells outside the source grid (padding) have
/// mask false, zero features, and virtually extended coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CropView {
    pub side: usize,
    pub dim: usize,
    pub coord_scale: f64,
    pub features: Vec<f32>,
    pub mask: Vec<bool>,
    pub coords: Vec<(i64, i64)>,
}

impl CropView {
    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let idx = r * self.side + c;
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn is_tissue(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.side + c]
    }

    pub fn tissue_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Sub-window copy (pure crop, no resampling).
    pub fn crop(&self, row_off: usize, col_off: usize, side: usize) -> Result<CropView> {
        if row_off + side > self.side || col_off + side > self.side {
            return Err(arg_err!(
                "crop {side} at ({row_off},{col_off}) out of {}",
                self.side
            ));
        }
        let mut features = Vec::with_capacity(side * side * self.dim);
        let mut mask = Vec::with_capacity(side * side);
        let mut coords = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let src = (row_off + r) * self.side + (col_off + c);
                features.extend_from_slice(&self.features[src * self.dim..(src + 1) * self.dim]);
                mask.push(self.mask[src]);
                coords.push(self.coords[src]);
            }
        }
        Ok(CropView {
            side,
            dim: self.dim,
            coord_scale: self.coord_scale,
            features,
            mask,
            coords,
        })
    }
}

/// Uniformly sample a `size` x `size` window containing at least one tissue
/// cell. Grids smaller than `size` are padded (mask false, coordinates
/// extended past the grid edge).
pub fn sample_region_crop(
    grid: &FeatureGrid,
    size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<CropView> {
    if grid.tissue_count() == 0 {
        return Err(Error::Empty(String::from("region crop of an empty grid")));
    }
    // prefix sums for O(1) window tissue counts
    let (h, w) = (grid.height, grid.width);
    let mut pre = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            pre[(r + 1) * (w + 1) + c + 1] = pre[r * (w + 1) + c + 1] + pre[(r + 1) * (w + 1) + c]
                - pre[r * (w + 1) + c]
                + grid.is_tissue(r, c) as u32;
        }
    }
    let window_tissue = |r0: usize, c0: usize| -> u32 {
        let r1 = (r0 + size).min(h);
        let c1 = (c0 + size).min(w);
        pre[r1 * (w + 1) + c1] - pre[r0 * (w + 1) + c1] - pre[r1 * (w + 1) + c0]
            + pre[r0 * (w + 1) + c0]
    };
    let row_offs = if h > size { h - size + 1 } else { 1 };
    let col_offs = if w > size { w - size + 1 } else { 1 };
    let mut candidates = Vec::new();
    for r0 in 0..row_offs {
        for c0 in 0..col_offs {
            if window_tissue(r0, c0) > 0 {
                candidates.push((r0, c0));
            }
        }
    }
    let (r0, c0) = candidates[rng.random_range(0..candidates.len())];

    let mut features = vec![0.0f32; size * size * grid.dim];
    let mut mask = vec![false; size * size];
    let mut coords = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (sr, sc) = (r0 + r, c0 + c);
            coords.push((sr as i64, sc as i64));
            if sr < h && sc < w && grid.is_tissue(sr, sc) {
                let dst = (r * size + c) * grid.dim;
                features[dst..dst + grid.dim].copy_from_slice(grid.cell(sr, sc));
                mask[r * size + c] = true;
            }
        }
    }
    Ok(CropView {
        side: size,
        dim: grid.dim,
        coord_scale: grid.coord_scale(),
        features,
        mask,
        coords,
    })
}

#[derive(Clone, Debug)]
pub struct ViewSet {
    pub region: CropView,
    pub globals: Vec<CropView>,
    pub locals: Vec<CropView>,
}

/// Cut 2 global (14x14) and 10 local (6x6) views out of a 16x16 region,
/// offsets uniform. Draw order: global offsets first, then locals, each as
/// (row, col).
pub fn sample_views(region: &CropView, rng: &mut ChaCha20Rng) -> Result<ViewSet> {
    if region.side != REGION_SIDE {
        return Err(arg_err!("views need a {REGION_SIDE}x{REGION_SIDE} region, got {}", region.side));
    }
    let mut globals = Vec::with_capacity(N_GLOBAL_VIEWS);
    for _ in 0..N_GLOBAL_VIEWS {
        let max = REGION_SIDE - GLOBAL_SIDE;
        let r = rng.random_range(0..=max);
        let c = rng.random_range(0..=max);
        globals.push(region.crop(r, c, GLOBAL_SIDE)?);
    }
    let mut locals = Vec::with_capacity(N_LOCAL_VIEWS);
    for _ in 0..N_LOCAL_VIEWS {
        let max = REGION_SIDE - LOCAL_SIDE;
        let r = rng.random_range(0..=max);
        let c = rng.random_range(0..=max);
        locals.push(region.crop(r, c, LOCAL_SIDE)?);
    }
    Ok(ViewSet {
        region: region.clone(),
        globals,
        locals,
    })
}

/// Augmentation plan for one view.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    pub posterize_bits: Option<u8>,
}

/// Draw an augmentation plan: flips with probability `flip_prob` each,
/// posterization with probability `posterize_prob` at `posterize_bits` bits.
pub fn sample_augment(
    rng: &mut ChaCha20Rng,
    flip_prob: f64,
    posterize_prob: f64,
    posterize_bits: u8,
) -> AugmentSpec {
    let flip_h = rng.random::<f64>() < flip_prob;
    let flip_v = rng.random::<f64>() < flip_prob;
    let posterize = rng.random::<f64>() < posterize_prob;
    AugmentSpec {
        flip_h,
        flip_v,
        posterize_bits: if posterize { Some(posterize_bits) } else { None },
    }
}

/// Apply flips (reversing features, mask, and coords together) and optional
/// posterization (quantizing tissue features to 2^bits levels over the
/// view's own value range).
pub fn augment(view: &CropView, spec: AugmentSpec) -> Result<CropView> {
    if let Some(bits) = spec.posterize_bits {
        if bits < 1 {
            return Err(arg_err!("posterize bits must be >= 1"));
        }
    }
    let s = view.side;
    let mut out = view.clone();
    let map = |r: usize, c: usize| -> usize {
        let rr = if spec.flip_v { s - 1 - r } else { r };
        let cc = if spec.flip_h { s - 1 - c } else { c };
        rr * s + cc
    };
    for r in 0..s {
        for c in 0..s {
            let src = map(r, c);
            let dst = r * s + c;
            out.mask[dst] = view.mask[src];
            out.coords[dst] = view.coords[src];
            out.features[dst * view.dim..(dst + 1) * view.dim]
                .copy_from_slice(&view.features[src * view.dim..(src + 1) * view.dim]);
        }
    }
    if let Some(bits) = spec.posterize_bits {
        posterize(&mut out, bits);
    }
    Ok(out)
}

fn posterize(view: &mut CropView, bits: u8) {
    let levels = (1u32 << bits.min(24)) - 1;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for idx in 0..view.side * view.side {
        if view.mask[idx] {
            for &v in &view.features[idx * view.dim..(idx + 1) * view.dim] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return;
    }
    let span = (hi - lo) as f64;
    let l = levels as f64;
    for idx in 0..view.side * view.side {
        if view.mask[idx] {
            for v in &mut view.features[idx * view.dim..(idx + 1) * view.dim] {
                let q = crate::fm::round((*v as f64 - lo as f64) / span * l);
                *v = (lo as f64 + q * span / l) as f32;
            }
        }
    }
}

/// Mean of tissue-cell features, the no-encoder baseline representation.
pub fn mean_pool_baseline(grid: &FeatureGrid) -> Result<Vec<f64>> {
    let n = grid.tissue_count();
    if n == 0 {
        return Err(Error::Empty(String::from("mean pool of an empty grid")));
    }
    let mut acc = vec![0.0f64; grid.dim];
    for r in 0..grid.height {
        for c in 0..grid.width {
            if grid.is_tissue(r, c) {
                for (a, &v) in acc.iter_mut().zip(grid.cell(r, c)) {
                    *a += v as f64;
                }
            }
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn solid_grid(h: usize, w: usize, dim: usize) -> FeatureGrid {
        let mut g = FeatureGrid::new(h, w, dim, 512).unwrap();
        for r in 0..h {
            for c in 0..w {
                let feat: Vec<f32> = (0..dim).map(|d| (r * w + c) as f32 + d as f32 * 0.1).collect();
                g.set_cell(r, c, &feat).unwrap();
            }
        }
        g
    }

    #[test]
    fn build_grid_single_and_gap() {
        let g = build_grid(&[(1024, 512, vec![1.0, 2.0])], 512).unwrap();
        assert_eq!((g.height, g.width), (1, 1));
        assert!(g.is_tissue(0, 0));

        let g2 = build_grid(&[(0, 0, vec![1.0]), (1024, 0, vec![2.0])], 512).unwrap();
        assert_eq!((g2.height, g2.width), (1, 3));
        assert!(g2.is_tissue(0, 0));
        assert!(!g2.is_tissue(0, 1));
        assert!(g2.is_tissue(0, 2));
    }

    #[test]
    fn build_grid_rejects_duplicates_and_misaligned() {
        assert!(build_grid(&[(0, 0, vec![1.0]), (0, 0, vec![2.0])], 512).is_err());
        assert!(build_grid(&[(100, 0, vec![1.0])], 512).is_err());
        assert!(build_grid(&[], 512).is_err());
    }

    #[test]
    fn group_tissue_thresholds() {
        let g = solid_grid(4, 4, 1);
        let groups = group_tissue(&g, 16);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 16);

        // two 3x3 blocks split by a background row
        let mut g2 = FeatureGrid::new(7, 3, 1, 512).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                g2.set_cell(r, c, &[1.0]).unwrap();
                g2.set_cell(r + 4, c, &[1.0]).unwrap();
            }
        }
        assert_eq!(group_tissue(&g2, 16).len(), 0);
        assert_eq!(group_tissue(&g2, 9).len(), 2);
    }

    #[test]
    fn group_tissue_matches_flood_fill_oracle() {
        let s = Streams::new(21);
        let mut rng = s.stream("mask");
        for trial in 0..20 {
            let (h, w) = (10 + trial % 5, 8 + trial % 7);
            let mut g = FeatureGrid::new(h, w, 1, 512).unwrap();
            for r in 0..h {
                for c in 0..w {
                    if rng.random::<f64>() < 0.55 {
                        g.set_cell(r, c, &[1.0]).unwrap();
                    }
                }
            }
            if g.tissue_count() == 0 {
                continue;
            }
            let groups = group_tissue(&g, 1);
            // oracle: naive repeated BFS with set semantics
            let mut labels = vec![usize::MAX; h * w];
            let mut next = 0;
            for r in 0..h {
                for c in 0..w {
                    if !g.is_tissue(r, c) || labels[r * w + c] != usize::MAX {
                        continue;
                    }
                    let mut queue = vec![(r, c)];
                    labels[r * w + c] = next;
                    while let Some((qr, qc)) = queue.pop() {
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                let (nr, nc) = (qr as i64 + dr, qc as i64 + dc);
                                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                                    continue;
                                }
                                let (nr, nc) = (nr as usize, nc as usize);
                                if g.is_tissue(nr, nc) && labels[nr * w + nc] == usize::MAX {
                                    labels[nr * w + nc] = next;
                                    queue.push((nr, nc));
                                }
                            }
                        }
                    }
                    next += 1;
                }
            }
            assert_eq!(groups.len(), next);
            let total: usize = groups.iter().map(|g| g.members.len()).sum();
            assert_eq!(total, g.tissue_count());
            // partition: no cell in two groups
            let mut seen = alloc::collections::BTreeSet::new();
            for grp in &groups {
                for m in &grp.members {
                    assert!(seen.insert(*m));
                }
            }
        }
    }

    #[test]
    fn region_crop_unique_window_and_padding() {
        let g = solid_grid(16, 16, 2);
        let s = Streams::new(3);
        let mut rng = s.stream("crop");
        let crop = sample_region_crop(&g, 16, &mut rng).unwrap();
        assert_eq!(crop.coords[0], (0, 0));
        assert_eq!(crop.coords[255], (15, 15));
        assert_eq!(crop.tissue_count(), 256);

        let small = solid_grid(8, 8, 2);
        let crop2 = sample_region_crop(&small, 16, &mut rng).unwrap();
        assert_eq!(crop2.tissue_count(), 64);
        assert_eq!(crop2.mask.iter().filter(|&&m| !m).count(), 192);
        assert_eq!(crop2.coords[255], (15, 15));
    }

    #[test]
    fn region_crop_offsets_are_uniform() {
        let g = solid_grid(16, 20, 1);
        let s = Streams::new(7);
        let mut rng = s.stream("crop");
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            let crop = sample_region_crop(&g, 16, &mut rng).unwrap();
            let col0 = crop.coords[0].1 as usize;
            counts[col0] += 1;
        }
        let expect = n as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        // chi-square, 4 dof, p = 0.01 cutoff
        assert!(chi2 < 13.277, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn views_counts_offsets_and_bit_identity() {
        let g = solid_grid(16, 16, 3);
        let s = Streams::new(9);
        let mut rng = s.stream("views");
        let region = sample_region_crop(&g, 16, &mut rng).unwrap();

        let mut seen = alloc::collections::BTreeSet::new();
        for _ in 0..10_000 {
            let vs = sample_views(&region, &mut rng).unwrap();
            assert_eq!(vs.globals.len(), 2);
            assert_eq!(vs.locals.len(), 10);
            for gview in &vs.globals {
                assert_eq!(gview.side, 14);
                seen.insert((gview.coords[0].0, gview.coords[0].1));
            }
            for l in &vs.locals {
                assert_eq!(l.side, 6);
                // crop = copy: features bit-identical to the region sub-block
                let (r0, c0) = (l.coords[0].0 as usize, l.coords[0].1 as usize);
                for r in 0..6 {
                    for c in 0..6 {
                        assert_eq!(l.cell(r, c), region.cell(r0 + r, c0 + c));
                    }
                }
            }
            if seen.len() == 9 {
                break;
            }
        }
        assert_eq!(seen.len(), 9, "all 9 global offsets observed");
    }

    #[test]
    fn flips_are_involutions_and_preserve_distances() {
        let g = solid_grid(16, 16, 2);
        let s = Streams::new(11);
        let mut rng = s.stream("crop");
        let region = sample_region_crop(&g, 16, &mut rng).unwrap();
        for &(fh, fv) in &[(true, false), (false, true), (true, true)] {
            let spec = AugmentSpec {
                flip_h: fh,
                flip_v: fv,
                posterize_bits: None,
            };
            let once = augment(&region, spec).unwrap();
            let twice = augment(&once, spec).unwrap();
            assert_eq!(twice, region);
            // pairwise coord distances preserved
            for (a, b) in [(0usize, 17usize), (5, 250), (30, 31)] {
                let d = |v: &CropView, i: usize, j: usize| {
                    let (r1, c1) = v.coords[i];
                    let (r2, c2) = v.coords[j];
                    ((r1 - r2) * (r1 - r2) + (c1 - c2) * (c1 - c2)) as f64
                };
                assert_eq!(d(&region, a, b), d(&once, a, b));
            }
        }
        let one = region.crop(0, 0, 1).unwrap();
        let flipped = augment(
            &one,
            AugmentSpec {
                flip_h: true,
                flip_v: true,
                posterize_bits: None,
            },
        )
        .unwrap();
        assert_eq!(flipped, one);
    }

    #[test]
    fn posterize_two_level_quantizer() {
        let mut g = FeatureGrid::new(1, 4, 1, 512).unwrap();
        for (c, v) in [-1.0f32, -0.4, 0.3, 1.0].iter().enumerate() {
            g.set_cell(0, c, &[*v]).unwrap();
        }
        let s = Streams::new(2);
        let mut rng = s.stream("crop");
        let crop = sample_region_crop(&g, 16, &mut rng).unwrap();
        let out = augment(
            &crop,
            AugmentSpec {
                flip_h: false,
                flip_v: false,
                posterize_bits: Some(1),
            },
        )
        .unwrap();
        let got: Vec<f32> = (0..4).map(|c| out.cell(0, c)[0]).collect();
        assert_eq!(got, vec![-1.0, -1.0, 1.0, 1.0]);
        assert!(augment(
            &crop,
            AugmentSpec {
                flip_h: false,
                flip_v: false,
                posterize_bits: Some(0)
            }
        )
        .is_err());
    }

    #[test]
    fn mean_pool_matches_loop_oracle() {
        let s = Streams::new(13);
        let mut rng = s.stream("g");
        let mut g = FeatureGrid::new(5, 4, 3, 512).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                if rng.random::<f64>() < 0.6 {
                    let feat: Vec<f32> =
                        (0..3).map(|_| rng.random::<f64>() as f32 - 0.5).collect();
                    g.set_cell(r, c, &feat).unwrap();
                }
            }
        }
        if g.tissue_count() == 0 {
            g.set_cell(0, 0, &[1.0, 2.0, 3.0]).unwrap();
        }
        let got = mean_pool_baseline(&g).unwrap();
        let mut want = vec![0.0f64; 3];
        let mut n = 0.0;
        for (r, c) in g.tissue_cells() {
            for d in 0..3 {
                want[d] += g.cell(r, c)[d] as f64;
            }
            n += 1.0;
        }
        for d in 0..3 {
            assert!((got[d] - want[d] / n).abs() < 1e-12);
        }

        // antipodal pair averages to zero
        let mut g2 = FeatureGrid::new(1, 2, 2, 512).unwrap();
        g2.set_cell(0, 0, &[1.5, -2.0]).unwrap();
        g2.set_cell(0, 1, &[-1.5, 2.0]).unwrap();
        let z = mean_pool_baseline(&g2).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn same_seed_same_viewset() {
        let g = solid_grid(20, 24, 2);
        let s = Streams::new(77);
        let run = || {
            let mut rng = s.stream("crop");
            let region = sample_region_crop(&g, 16, &mut rng).unwrap();
            sample_views(&region, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.region, b.region);
        for (x, y) in a.globals.iter().zip(b.globals.iter()) {
            assert_eq!(x, y);
        }
        for (x, y) in a.locals.iter().zip(b.locals.iter()) {
            assert_eq!(x, y);
        }
    }
}
