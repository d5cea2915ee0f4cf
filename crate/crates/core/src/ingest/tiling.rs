use image::RgbImage;

use super::IngestError;

/// Square tiling of a survey image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilingConfig {
    pub tile_size: u32,
    pub stride: u32,
    /// Drop edge tiles that would extend past the image. When false, such
    /// tiles are kept and zero-padded to full size.
    pub drop_partial: bool,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile_size: 512,
            stride: 512,
            drop_partial: true,
        }
    }
}

impl TilingConfig {
    pub fn new(tile_size: u32, stride: u32, drop_partial: bool) -> Result<Self, IngestError> {
        let cfg = Self {
            tile_size,
            stride,
            drop_partial,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.tile_size == 0 || self.stride == 0 {
            return Err(IngestError::InvalidTiling(
                "tile size and stride must be positive".into(),
            ));
        }
        if self.stride > self.tile_size {
            return Err(IngestError::InvalidTiling(format!(
                "stride {} exceeds tile size {} (gaps between tiles)",
                self.stride, self.tile_size
            )));
        }
        Ok(())
    }

    fn positions(&self, extent: u32) -> u32 {
        if extent >= self.tile_size {
            let span = extent - self.tile_size;
            if self.drop_partial {
                span / self.stride + 1
            } else {
                span.div_ceil(self.stride) + 1
            }
        } else if self.drop_partial {
            0
        } else {
            1
        }
    }
}

/// Grid position and pixel offset of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileSlot {
    pub row: u32,
    pub col: u32,
    pub x: u32,
    pub y: u32,
}

/// Row-major tile layout for a `width × height` image. Offsets are
/// `x = col·stride`, `y = row·stride`.
pub fn tile_grid(width: u32, height: u32, cfg: &TilingConfig) -> Result<Vec<TileSlot>, IngestError> {
    cfg.validate()?;
    let cols = cfg.positions(width);
    let rows = cfg.positions(height);
    let mut out = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        for col in 0..cols {
            out.push(TileSlot {
                row,
                col,
                x: col * cfg.stride,
                y: row * cfg.stride,
            });
        }
    }
    Ok(out)
}

/// Cuts `image` into tiles in [`tile_grid`] order. Pixels are copied
/// verbatim; out-of-bounds pixels of kept partial tiles are black.
pub fn crop_patches(image: &RgbImage, cfg: &TilingConfig) -> Result<Vec<(TileSlot, RgbImage)>, IngestError> {
    let (w, h) = image.dimensions();
    let t = cfg.tile_size;
    let slots = tile_grid(w, h, cfg)?;
    Ok(slots
        .into_iter()
        .map(|slot| {
            let mut tile = RgbImage::new(t, t);
            let cw = t.min(w.saturating_sub(slot.x));
            let ch = t.min(h.saturating_sub(slot.y));
            for dy in 0..ch {
                for dx in 0..cw {
                    tile.put_pixel(dx, dy, *image.get_pixel(slot.x + dx, slot.y + dy));
                }
            }
            (slot, tile)
        })
        .collect())
}
