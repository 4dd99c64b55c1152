//! Procedural class-conditional images for desk-scale training.
//!
//! Class `k` is a filled shape in one of the eight RGB cube-corner colors
//! (`k mod 8`) on a mid-gray background, with the shape family chosen by
//! `k div 8`. Position and size are jittered per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Image;

const SHAPES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticDataset {
    num_classes: usize,
    seed: u64,
    size: usize,
}

/// The dataset with `num_classes` classes of 16×16 RGB images.
pub fn make_synthetic_dataset(num_classes: usize, seed: u64) -> Result<SyntheticDataset> {
    SyntheticDataset::new(num_classes, 16, seed)
}

impl SyntheticDataset {
    pub fn new(num_classes: usize, size: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || num_classes > 8 * SHAPES {
            return Err(Error::Domain(format!("num_classes {num_classes} outside [1, {}]", 8 * SHAPES)));
        }
        if size < 4 {
            return Err(Error::Domain(format!("image size {size} is below 4")));
        }
        Ok(Self { num_classes, seed, size })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    /// Sample `index` of class `class`; a pure function of
    /// `(class, index, seed)`.
    pub fn sample<T: Real>(&self, class: usize, index: u32) -> Result<Image<T>> {
        if class >= self.num_classes {
            return Err(Error::Domain(format!("class {class} outside [0, {})", self.num_classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((class as u64) << 32) | u64::from(index));

        let n = self.size as f64;
        let color = [(class & 1) as f64, ((class >> 1) & 1) as f64, ((class >> 2) & 1) as f64].map(|b| 2.0 * b - 1.0);
        let shape = (class / 8) % SHAPES;
        let radius = n * rng.random_range(0.22..0.34);
        let cx = rng.random_range(radius..n - radius);
        let cy = rng.random_range(radius..n - radius);

        let mut img = Image::zeros(3, self.size, self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
                let inside = match shape {
                    0 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                    1 => dx * dx + dy * dy <= 1.0,
                    2 => dx.abs() + dy.abs() <= 1.0,
                    _ => (dx.abs() <= 1.0 && dy.abs() <= 0.35) || (dy.abs() <= 1.0 && dx.abs() <= 0.35),
                };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        img.set(c, y, x, T::from_f64_lossy(v));
                    }
                }
            }
        }
        Ok(img)
    }

    /// `n` samples with uniformly drawn classes and indices.
    pub fn draw_batch<T: Real, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<Image<T>>, Vec<usize>)> {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..self.num_classes);
            let index = rng.random::<u32>();
            images.push(self.sample(class, index)?);
            labels.push(class);
        }
        Ok((images, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let ds = make_synthetic_dataset(8, 11).unwrap();
        for class in 0..8 {
            for index in 0..4 {
                let a: Image<f32> = ds.sample(class, index).unwrap();
                assert_eq!(a, ds.sample(class, index).unwrap());
                assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
                assert!(a.data.iter().any(|&v| v != 0.0), "class {class} drew an empty shape");
            }
        }
        let a: Image<f32> = ds.sample(3, 0).unwrap();
        assert_ne!(a, ds.sample(3, 1).unwrap());
        assert_ne!(a, make_synthetic_dataset(8, 12).unwrap().sample(3, 0).unwrap());
        assert!(ds.sample::<f32>(8, 0).is_err());
        assert!(make_synthetic_dataset(0, 1).is_err());
    }
}
