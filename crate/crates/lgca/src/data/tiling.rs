//! Regular-grid tiling with edge anchoring: the final row/column of tiles is
//! shifted back onto the image border so no pixel is dropped and every tile
//! has the full requested size.

use ndarray::{s, Array2, Array3};

use super::{invalid, DataError, SegSample};

/// Tile start offsets covering `extent` with `tile`-sized windows every
/// `stride` pixels; the last offset is clamped to `extent - tile`.
pub fn tile_offsets(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    assert!(tile > 0 && stride > 0 && tile <= extent);
    let mut offsets = Vec::new();
    let mut pos = 0;
    while pos + tile <= extent {
        offsets.push(pos);
        pos += stride;
    }
    let last = extent - tile;
    if *offsets.last().unwrap() != last {
        offsets.push(last);
    }
    offsets
}

/// Cuts an image/mask pair into `tile x tile` patches on a regular grid.
pub fn tile_image(
    image: &Array3<f64>,
    mask: &Array2<i64>,
    tile: usize,
    stride: usize,
) -> Result<Vec<SegSample>, DataError> {
    let (_, h, w) = image.dim();
    if tile == 0 || stride == 0 {
        return Err(invalid("tile and stride must be positive"));
    }
    if mask.dim() != (h, w) {
        return Err(invalid(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    if tile > h || tile > w {
        return Err(invalid(format!("tile {tile} exceeds image {h}x{w}")));
    }
    let mut out = Vec::new();
    for &oy in &tile_offsets(h, tile, stride) {
        for &ox in &tile_offsets(w, tile, stride) {
            out.push(SegSample {
                image: image.slice(s![.., oy..oy + tile, ox..ox + tile]).to_owned(),
                mask: mask.slice(s![oy..oy + tile, ox..ox + tile]).to_owned(),
            });
        }
    }
    Ok(out)
}

/// Reassembles tiled masks; later tiles overwrite overlap regions, so with
/// `stride == tile` this is the exact inverse of [`tile_image`].
pub fn stitch_masks(
    tiles: &[Array2<i64>],
    h: usize,
    w: usize,
    tile: usize,
    stride: usize,
) -> Array2<i64> {
    let mut out = Array2::<i64>::zeros((h, w));
    let mut it = tiles.iter();
    for &oy in &tile_offsets(h, tile, stride) {
        for &ox in &tile_offsets(w, tile, stride) {
            let t = it.next().expect("missing tile");
            out.slice_mut(s![oy..oy + tile, ox..ox + tile]).assign(t);
        }
    }
    out
}
