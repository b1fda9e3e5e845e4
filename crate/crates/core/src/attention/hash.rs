//! Angular locality-sensitive hashing by random rotation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::{gemm, Tensor};

/// A `D_h x n_buckets/2` Gaussian projection.
#[derive(Clone, Debug, PartialEq)]
pub struct HashRotation<T: Real = f64> {
    pub n_buckets: usize,
    pub matrix: Tensor<T>,
}

impl<T: Real> HashRotation<T> {
    pub fn draw(dim: usize, n_buckets: usize, rng: &mut RngStream) -> Result<Self> {
        if n_buckets < 2 || !n_buckets.is_multiple_of(2) {
            bail!(Config, "bucket count must be even and at least 2, got {}", n_buckets);
        }
        Ok(Self { n_buckets, matrix: rng.normal_tensor(&[dim, n_buckets / 2], 1.0) })
    }

    /// Bucket of each row: argmax over `[xR, -xR]`, lowest index on ties.
    pub fn hash(&self, vectors: &Tensor<T>) -> Result<Vec<usize>> {
        let (n, d) = vectors.dims2()?;
        let (rd, half) = self.matrix.dims2()?;
        if rd != d {
            bail!(Dimension, "rotation expects {}-dim vectors, got {}", rd, d);
        }
        let mut proj = vec![T::zero(); n * half];
        gemm(vectors.data(), false, self.matrix.data(), false, n, d, half, &mut proj, false);
        Ok(proj
            .chunks_exact(half)
            .map(|row| {
                let mut best = 0;
                let mut best_val = row[0];
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best_val {
                        best = j;
                        best_val = v;
                    }
                }
                for (j, &v) in row.iter().enumerate() {
                    if -v > best_val {
                        best = half + j;
                        best_val = -v;
                    }
                }
                best
            })
            .collect())
    }
}

/// Hashes `vectors: [n, D_h]` into `n_buckets` angular buckets with a rotation drawn from `rng`.
pub fn lsh_hash<T: Real>(vectors: &Tensor<T>, n_buckets: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let (_, d) = vectors.dims2()?;
    HashRotation::draw(d, n_buckets, rng)?.hash(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn identical_vectors_share_a_bucket() {
        let mut rng = RngStream::new(1);
        let v = rng.normal_tensor::<f64>(&[1, 6], 1.0);
        let rows = Tensor::new(&[2, 6], v.data().repeat(2)).unwrap();
        let ids = lsh_hash(&rows, 8, &mut RngStream::new(5)).unwrap();
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids, lsh_hash(&rows, 8, &mut RngStream::new(5)).unwrap());
    }

    #[test]
    fn antipodal_vectors_split_with_two_buckets() {
        let mut rng = RngStream::new(2);
        for _ in 0..20 {
            let x = rng.normal_tensor::<f64>(&[1, 4], 1.0);
            let both = Tensor::new(&[2, 4], x.data().iter().chain(x.data()).enumerate()
                .map(|(i, &v)| if i < 4 { v } else { -v }).collect()).unwrap();
            let ids = lsh_hash(&both, 2, &mut rng).unwrap();
            assert_ne!(ids[0], ids[1]);
        }
    }

    #[test]
    fn odd_bucket_count_rejected() {
        let v = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(lsh_hash(&v, 3, &mut RngStream::new(0)), Err(Error::Config(_))));
        assert!(matches!(lsh_hash(&v, 0, &mut RngStream::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_vector_ties_resolve_to_lowest_index() {
        let v = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(lsh_hash(&v, 6, &mut RngStream::new(4)).unwrap(), vec![0]);
    }

    fn unit(rng: &mut RngStream, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn near_duplicates_collide_more_than_random_pairs() {
        let (d, n) = (16, 64);
        let mut near = (0usize, 0usize);
        let mut far = (0usize, 0usize);
        for seed in 0..32u64 {
            let mut rng = RngStream::new(1000 + seed);
            let mut rows = Vec::new();
            // 32 anchors each paired with a perturbed copy (cosine > 0.99).
            for _ in 0..n / 2 {
                let a = unit(&mut rng, d);
                let noise = unit(&mut rng, d);
                let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + 0.05 * e).collect();
                let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
                    / b.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(cos > 0.99);
                rows.extend(a);
                rows.extend(b);
            }
            let t = Tensor::new(&[n, d], rows).unwrap();
            let ids = lsh_hash(&t, 8, &mut RngStream::derive(seed, &[7])).unwrap();
            for p in 0..n / 2 {
                near.1 += 1;
                near.0 += (ids[2 * p] == ids[2 * p + 1]) as usize;
                for q in p + 1..n / 2 {
                    far.1 += 1;
                    far.0 += (ids[2 * p] == ids[2 * q]) as usize;
                }
            }
        }
        let near_rate = near.0 as f64 / near.1 as f64;
        let far_rate = far.0 as f64 / far.1 as f64;
        assert!(near_rate > far_rate, "near {near_rate} vs random {far_rate}");
        assert!(near_rate > 0.8);
    }
}
