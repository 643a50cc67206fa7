use std::fmt;
use std::ops::Range;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A `rows × cols` grid of non-overlapping tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PartitionGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PartitionGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid", format!("{rows}x{cols} must have positive dimensions")));
        }
        Ok(Self { rows, cols })
    }

    pub const fn square(side: usize) -> Self {
        Self { rows: side, cols: side }
    }

    /// Number of tiles n.
    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }

    /// Half-open row interval `[⌊r·H/rows⌋, ⌊(r+1)·H/rows⌋)` of tile row `r`.
    pub fn row_range(&self, r: usize, height: usize) -> Range<usize> {
        (r * height / self.rows)..((r + 1) * height / self.rows)
    }

    pub fn col_range(&self, c: usize, width: usize) -> Range<usize> {
        (c * width / self.cols)..((c + 1) * width / self.cols)
    }

    /// Tile index (row-major) that owns the continuous point `(y, x)`.
    pub fn tile_of(&self, y: f64, x: f64, height: usize, width: usize) -> Option<usize> {
        let r = (0..self.rows).find(|&r| {
            let rr = self.row_range(r, height);
            y >= rr.start as f64 && y < rr.end as f64
        })?;
        let c = (0..self.cols).find(|&c| {
            let cr = self.col_range(c, width);
            x >= cr.start as f64 && x < cr.end as f64
        })?;
        Some(r * self.cols + c)
    }
}

impl fmt::Display for PartitionGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

fn chw(op: &'static str, image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(op, format!("expected [C, H, W], got {:?}", image.shape()))),
    }
}

/// Splits a `[C, H, W]` image into `grid.tiles()` tiles in row-major order.
pub fn partition_image(image: &Tensor, grid: PartitionGrid) -> Result<Vec<Tensor>> {
    let (ch, h, w) = chw("partition_image", image)?;
    if grid.rows > h || grid.cols > w {
        return Err(Error::invalid(
            "partition_image",
            format!("grid {grid} larger than image {h}x{w}"),
        ));
    }
    let src = image.data();
    let mut tiles = Vec::with_capacity(grid.tiles());
    for r in 0..grid.rows {
        let rows = grid.row_range(r, h);
        for c in 0..grid.cols {
            let cols = grid.col_range(c, w);
            let mut data = Vec::with_capacity(ch * rows.len() * cols.len());
            for k in 0..ch {
                for y in rows.clone() {
                    let base = (k * h + y) * w;
                    data.extend_from_slice(&src[base + cols.start..base + cols.end]);
                }
            }
            tiles.push(Tensor::new(vec![ch, rows.len(), cols.len()], data)?);
        }
    }
    Ok(tiles)
}

/// Inverse of [`partition_image`].
pub fn reassemble(tiles: &[Tensor], grid: PartitionGrid) -> Result<Tensor> {
    if tiles.len() != grid.tiles() {
        return Err(Error::invalid(
            "reassemble",
            format!("expected {} tiles, got {}", grid.tiles(), tiles.len()),
        ));
    }
    let (ch, _, _) = chw("reassemble", &tiles[0])?;
    let h: usize = (0..grid.rows).map(|r| tiles[r * grid.cols].shape()[1]).sum();
    let w: usize = (0..grid.cols).map(|c| tiles[c].shape()[2]).sum();
    let mut out = Tensor::zeros(&[ch, h, w]);
    for r in 0..grid.rows {
        let rows = grid.row_range(r, h);
        for c in 0..grid.cols {
            let cols = grid.col_range(c, w);
            let tile = &tiles[r * grid.cols + c];
            if tile.shape() != [ch, rows.len(), cols.len()] {
                return Err(Error::shape("reassemble", tile.shape(), &[ch, rows.len(), cols.len()]));
            }
            for k in 0..ch {
                for (ty, y) in rows.clone().enumerate() {
                    let dst = (k * h + y) * w + cols.start;
                    let srcb = (k * rows.len() + ty) * cols.len();
                    out.data_mut()[dst..dst + cols.len()].copy_from_slice(&tile.data()[srcb..srcb + cols.len()]);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling with corner-aligned sample positions: output index
/// `i` reads source coordinate `i·(in−1)/(out−1)`.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (ch, h, w) = chw("resize_bilinear", image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "target dimensions must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let pos = if n_out == 1 || n_in == 1 {
                    0.0
                } else {
                    (i * (n_in - 1)) as f64 / (n_out - 1) as f64
                };
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(ch * out_h * out_w);
    for k in 0..ch {
        let plane = &src[k * h * w..(k + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![ch, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn quarters_of_256() {
        let tiles = partition_image(&Tensor::zeros(&[1, 256, 256]), PartitionGrid::square(2)).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.shape() == [1, 128, 128]));
    }

    #[test]
    fn odd_sizes_partition_exactly() {
        let img = ramp(65, 65);
        let tiles = partition_image(&img, PartitionGrid::square(2)).unwrap();
        let heights: Vec<usize> = tiles.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(heights, [32, 32, 33, 33]);
        // every pixel value (unique) appears exactly once across tiles
        let mut seen = vec![0u8; 65 * 65];
        for t in &tiles {
            for &v in t.data() {
                seen[v as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(reassemble(&tiles, PartitionGrid::square(2)).unwrap(), img);
    }

    #[test]
    fn grid_larger_than_image_rejected() {
        assert!(partition_image(&Tensor::zeros(&[1, 3, 3]), PartitionGrid::square(4)).is_err());
    }

    #[test]
    fn boundary_point_has_one_owner() {
        let g = PartitionGrid::square(2);
        assert_eq!(g.tile_of(32.0, 10.0, 64, 64), Some(2));
        assert_eq!(g.tile_of(31.999, 10.0, 64, 64), Some(0));
        assert_eq!(g.tile_of(64.0, 10.0, 64, 64), None);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(5, 7);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
        let c = Tensor::full(&[1, 4, 4], 0.625);
        let up = resize_bilinear(&c, 9, 3).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn resize_linear_ramp_closed_form() {
        let n = 8;
        let img = Tensor::new(vec![1, 1, n], (0..n).map(|v| v as f64).collect()).unwrap();
        let up = resize_bilinear(&img, 1, 2 * n).unwrap();
        for (i, &v) in up.data().iter().enumerate() {
            let expected = i as f64 * (n - 1) as f64 / (2 * n - 1) as f64;
            assert!((v - expected).abs() <= 1e-12, "{i}: {v} vs {expected}");
        }
    }
}
