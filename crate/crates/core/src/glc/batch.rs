use super::partition::{partition_image, resize_bilinear, PartitionGrid};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Global images interleaved with their resized subimages:
/// `(I_1, I_1^1, …, I_1^n, I_2, …, I_b^n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<Tensor>,
    pub global_counts: Vec<f64>,
    /// Number of global images b.
    pub images: usize,
    /// Subimages per global image n.
    pub tiles: usize,
}

impl TrainingBatch {
    pub fn global(&self, i: usize) -> &Tensor {
        &self.items[i * (self.tiles + 1)]
    }

    pub fn locals(&self, i: usize) -> &[Tensor] {
        let start = i * (self.tiles + 1) + 1;
        &self.items[start..start + self.tiles]
    }
}

fn fit(image: &Tensor, size: usize) -> Result<Tensor> {
    resize_bilinear(image, size, size)
}

/// Builds a batch from `(image, count)` samples. Every item, global or
/// local, is resized to `input_size × input_size`.
pub fn assemble_batch(samples: &[(&Tensor, f64)], grid: PartitionGrid, input_size: usize) -> Result<TrainingBatch> {
    if samples.is_empty() {
        return Err(Error::invalid("assemble_batch", "no samples"));
    }
    let n = grid.tiles();
    let mut items = Vec::with_capacity(samples.len() * (n + 1));
    let mut global_counts = Vec::with_capacity(samples.len());
    for &(image, count) in samples {
        items.push(fit(image, input_size)?);
        for tile in partition_image(image, grid)? {
            items.push(fit(&tile, input_size)?);
        }
        global_counts.push(count);
    }
    Ok(TrainingBatch {
        items,
        global_counts,
        images: samples.len(),
        tiles: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> Tensor {
        Tensor::full(&[1, 16, 16], v)
    }

    #[test]
    fn six_images_four_tiles_make_thirty_items() {
        let imgs: Vec<Tensor> = (0..6).map(|i| img(i as f64)).collect();
        let samples: Vec<(&Tensor, f64)> = imgs.iter().map(|t| (t, 1.0)).collect();
        let b = assemble_batch(&samples, PartitionGrid::square(2), 16).unwrap();
        assert_eq!(b.items.len(), 30);
        assert_eq!(b.items[5], imgs[1]);
        assert!(b.items.iter().all(|t| t.shape() == [1, 16, 16]));
    }

    #[test]
    fn single_image_batch() {
        let i = img(3.0);
        let b = assemble_batch(&[(&i, 4.0)], PartitionGrid::square(2), 16).unwrap();
        assert_eq!(b.items.len(), 5);
        assert_eq!(b.global(0), &i);
        assert_eq!(b.locals(0).len(), 4);
    }

    #[test]
    fn empty_rejected() {
        assert!(assemble_batch(&[], PartitionGrid::square(2), 16).is_err());
    }
}
