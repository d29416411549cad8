//! Data plumbing: manifest handling, the 1:1:2 split, six-fold dihedral
//! augmentation, tiling/stitching and patch labeling with positive-patch
//! balancing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HcrfError, Result};
use crate::imagedata::{ImageGrid, LabelMask, Raster};

/// Default tile edge used for pixel-level processing.
pub const DEFAULT_TILE_SIZE: usize = 256;
/// Default patch edge for patch-level labels.
pub const DEFAULT_PATCH_SIZE: usize = 64;
/// A 64x64 patch is positive when strictly more than this many pixels are foreground.
pub const DEFAULT_PATCH_THRESHOLD: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Ordered list of (image, ground-truth mask) pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `image<TAB>mask` lines. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (image, mask) = match (parts.next(), parts.next(), parts.next()) {
                (Some(i), Some(m), None) if !i.is_empty() && !m.is_empty() => (i, m),
                _ => {
                    return Err(HcrfError::format(format!(
                        "manifest line {}: expected `image<TAB>mask`",
                        lineno + 1
                    )))
                }
            };
            let resolve = |p: &str| match base {
                Some(b) if Path::new(p).is_relative() => b.join(p),
                _ => PathBuf::from(p),
            };
            entries.push(ManifestEntry {
                image: resolve(image),
                mask: resolve(mask),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HcrfError::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        Manifest::parse(&text, base).map_err(|e| e.context(format!("reading manifest {}", path.display())))
    }

    /// Serializes entries; paths under `base` are written relative to it.
    pub fn render(&self, base: Option<&Path>) -> String {
        let rel = |p: &Path| -> String {
            base.and_then(|b| p.strip_prefix(b).ok())
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&rel(&e.image));
            out.push('\t');
            out.push_str(&rel(&e.mask));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        fs::write(path, self.render(base)).map_err(|e| HcrfError::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Random 1:1:2 partition. Train and validation each get `n / 4` entries and
/// the test set takes the remainder. Entries keep their manifest order
/// inside each partition.
pub fn split_dataset(manifest: &Manifest, seed: u64) -> Result<DatasetSplit> {
    if manifest.is_empty() {
        return Err(HcrfError::parameter("cannot split an empty manifest"));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let quarter = n / 4;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Manifest::new(idx.into_iter().map(|i| manifest.entries[i].clone()).collect())
    };
    Ok(DatasetSplit {
        train: pick(&order[..quarter]),
        val: pick(&order[quarter..2 * quarter]),
        test: pick(&order[2 * quarter..]),
    })
}

/// The six augmentation transforms. Rotations are clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Dihedral {
    /// Fixed output order of [`augment_pair`].
    pub const ALL: [Dihedral; 6] = [
        Dihedral::Identity,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
        Dihedral::Rotate90,
        Dihedral::Rotate180,
        Dihedral::Rotate270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "id",
            Dihedral::FlipHorizontal => "hflip",
            Dihedral::FlipVertical => "vflip",
            Dihedral::Rotate90 => "rot90",
            Dihedral::Rotate180 => "rot180",
            Dihedral::Rotate270 => "rot270",
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Dihedral::Rotate90 | Dihedral::Rotate270)
    }

    pub fn apply<R: Raster>(self, raster: &R) -> R {
        let (w, h, ch) = (raster.width(), raster.height(), raster.channels());
        let src = raster.samples();
        let (nw, nh) = if self.swaps_axes() { (h, w) } else { (w, h) };
        let mut out = Vec::with_capacity(src.len());
        for ny in 0..nh {
            for nx in 0..nw {
                // Source coordinate feeding output pixel (nx, ny).
                let (sx, sy) = match self {
                    Dihedral::Identity => (nx, ny),
                    Dihedral::FlipHorizontal => (w - 1 - nx, ny),
                    Dihedral::FlipVertical => (nx, h - 1 - ny),
                    Dihedral::Rotate90 => (ny, h - 1 - nx),
                    Dihedral::Rotate180 => (w - 1 - nx, h - 1 - ny),
                    Dihedral::Rotate270 => (w - 1 - ny, nx),
                };
                let start = (sy * w + sx) * ch;
                out.extend_from_slice(&src[start..start + ch]);
            }
        }
        raster.rebuild(nw, nh, out)
    }
}

/// Applies all six transforms identically to an image and its mask.
pub fn augment_pair(image: &ImageGrid, mask: &LabelMask) -> Result<Vec<(ImageGrid, LabelMask)>> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(HcrfError::parameter(format!(
            "image {}x{} and mask {}x{} differ in size",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(Dihedral::ALL.iter().map(|t| (t.apply(image), t.apply(mask))).collect())
}

/// Crops `raster` into `tile_size` squares, row-major.
pub fn tile<R: Raster>(raster: &R, tile_size: usize) -> Result<Vec<R>> {
    if tile_size == 0 {
        return Err(HcrfError::parameter("tile size must be positive"));
    }
    let (w, h, ch) = (raster.width(), raster.height(), raster.channels());
    if w % tile_size != 0 || h % tile_size != 0 {
        return Err(HcrfError::parameter(format!(
            "{w}x{h} raster is not divisible into {tile_size}x{tile_size} tiles"
        )));
    }
    let src = raster.samples();
    let mut tiles = Vec::with_capacity((w / tile_size) * (h / tile_size));
    for ty in 0..h / tile_size {
        for tx in 0..w / tile_size {
            let mut buf = Vec::with_capacity(tile_size * tile_size * ch);
            for y in ty * tile_size..(ty + 1) * tile_size {
                let row = (y * w + tx * tile_size) * ch;
                buf.extend_from_slice(&src[row..row + tile_size * ch]);
            }
            tiles.push(raster.rebuild(tile_size, tile_size, buf));
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile`]: `grid_dims` is (columns, rows).
pub fn stitch<R: Raster>(tiles: &[R], grid_dims: (usize, usize)) -> Result<R> {
    let (cols, rows) = grid_dims;
    if cols == 0 || rows == 0 || tiles.len() != cols * rows {
        return Err(HcrfError::parameter(format!(
            "{} tiles cannot fill a {cols}x{rows} grid",
            tiles.len()
        )));
    }
    let (tw, th, ch) = (tiles[0].width(), tiles[0].height(), tiles[0].channels());
    if tiles
        .iter()
        .any(|t| t.width() != tw || t.height() != th || t.channels() != ch)
    {
        return Err(HcrfError::parameter("tiles differ in size or channel count"));
    }
    let (w, h) = (tw * cols, th * rows);
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        let (ty, iy) = (y / th, y % th);
        for tx in 0..cols {
            let t = tiles[ty * cols + tx].samples();
            out.extend_from_slice(&t[iy * tw * ch..(iy + 1) * tw * ch]);
        }
    }
    Ok(tiles[0].rebuild(w, h, out))
}

/// Binary label per patch, sized so that `grid * patch_size` equals the mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabelGrid {
    pub grid_width: usize,
    pub grid_height: usize,
    pub patch_size: usize,
    pub labels: Vec<u8>,
}

impl PatchLabelGrid {
    pub fn get(&self, gx: usize, gy: usize) -> bool {
        self.labels[gy * self.grid_width + gx] == 1
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// The grid as a mask with one pixel per patch.
    pub fn to_mask(&self) -> LabelMask {
        LabelMask::new(self.grid_width, self.grid_height, self.labels.clone()).expect("patch grid is a valid mask")
    }
}

/// Labels each patch positive iff its foreground count is strictly greater
/// than `threshold_pixels`.
pub fn patch_labels(mask: &LabelMask, patch_size: usize, threshold_pixels: usize) -> Result<PatchLabelGrid> {
    if patch_size == 0 {
        return Err(HcrfError::parameter("patch size must be positive"));
    }
    if threshold_pixels > patch_size * patch_size {
        return Err(HcrfError::parameter(format!(
            "threshold {threshold_pixels} exceeds patch area {}",
            patch_size * patch_size
        )));
    }
    let (w, h) = (mask.width(), mask.height());
    if w % patch_size != 0 || h % patch_size != 0 {
        return Err(HcrfError::parameter(format!(
            "{w}x{h} mask is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let (gw, gh) = (w / patch_size, h / patch_size);
    let mut counts = vec![0usize; gw * gh];
    let labels = mask.labels();
    for y in 0..h {
        let row = &labels[y * w..(y + 1) * w];
        let gy = y / patch_size;
        for (x, &l) in row.iter().enumerate() {
            counts[gy * gw + x / patch_size] += l as usize;
        }
    }
    Ok(PatchLabelGrid {
        grid_width: gw,
        grid_height: gh,
        patch_size,
        labels: counts.iter().map(|&c| (c > threshold_pixels) as u8).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTile<R> {
    pub tile: R,
    pub positive: bool,
}

/// Equalizes class counts by expanding positives.
///
/// Each positive yields six variants (identity plus the five non-identity
/// transforms). The pool is ordered transform-major over a seeded shuffle of
/// the positives, then truncated or cycled to the negative count. Negatives
/// are returned first, in input order, followed by the selected positives.
pub fn balance_patches<R: Raster>(patches: Vec<LabeledTile<R>>, seed: u64) -> Result<Vec<LabeledTile<R>>> {
    let (positives, negatives): (Vec<_>, Vec<_>) = patches.into_iter().partition(|p| p.positive);
    if positives.is_empty() || negatives.is_empty() {
        return Err(HcrfError::Balance(format!(
            "need both classes, got {} positive and {} negative patches",
            positives.len(),
            negatives.len()
        )));
    }
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let target = negatives.len();
    let pool_len = positives.len() * Dihedral::ALL.len();
    let mut out = negatives;
    out.reserve(target);
    for k in 0..target {
        let slot = k % pool_len;
        let transform = Dihedral::ALL[slot / positives.len()];
        let src = &positives[order[slot % positives.len()]];
        out.push(LabeledTile {
            tile: transform.apply(&src.tile),
            positive: true,
        });
    }
    Ok(out)
}
