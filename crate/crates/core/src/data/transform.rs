use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GridSample, PixelSetSample};
use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;
use crate::tensor::Tensor;

fn majority<T: Ord + Copy>(items: impl Iterator<Item = T>) -> Option<T> {
    let mut counts = BTreeMap::new();
    for x in items {
        *counts.entry(x).or_insert(0usize) += 1;
    }
    // ties go to the smallest key
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(k, _)| k)
}

/// Samples `n_pix` pixels of the parcel selected by `parcel_mask` (row-major
/// `H * W`). Without replacement when the parcel is large enough, with
/// replacement otherwise. The label is the majority non-ignored label under
/// the mask.
pub fn grid_to_pixelset(g: &GridSample, parcel_mask: &[bool], n_pix: usize, seed: u64) -> Result<PixelSetSample> {
    let hw = g.height() * g.width();
    if parcel_mask.len() != hw {
        return Err(Error::Data(format!("parcel mask has {} entries for a {hw}-pixel grid", parcel_mask.len())));
    }
    if n_pix == 0 {
        return Err(Error::Data("n_pix must be positive".into()));
    }
    let members: Vec<usize> = (0..hw).filter(|&i| parcel_mask[i]).collect();
    if members.is_empty() {
        return Err(Error::Data("parcel mask selects no pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if members.len() >= n_pix {
        index::sample(&mut rng, members.len(), n_pix).into_iter().map(|i| members[i]).collect()
    } else {
        (0..n_pix).map(|_| members[rng.random_range(0..members.len())]).collect()
    };

    let (t, c) = (g.len(), g.channels());
    let src = g.values.data();
    let mut data = Vec::with_capacity(t * c * n_pix);
    for plane in 0..t * c {
        let base = plane * hw;
        data.extend(chosen.iter().map(|&p| src[base + p]));
    }
    let label = majority(members.iter().map(|&i| g.semantic_labels[i]).filter(|&l| l != IGNORE_INDEX)).unwrap_or(IGNORE_INDEX);
    let parcel_id = majority(members.iter().map(|&i| g.parcel_ids[i])).unwrap_or(0);
    PixelSetSample::new(Tensor::new(&[t, c, n_pix], data)?, g.time.clone(), label, parcel_id)
}

/// Drops a random fraction `r ~ U[rate_low, rate_high]` of the valid time
/// steps, keeping `ceil((1 - r) * T_valid)` of them (at least one). Masked
/// steps are kept and the original step order is preserved.
pub fn temporal_dropout(s: &PixelSetSample, rate_low: f64, rate_high: f64, seed: u64) -> Result<PixelSetSample> {
    if !(0.0 <= rate_low && rate_low <= rate_high && rate_high < 1.0) {
        return Err(Error::Config(format!("dropout rates must satisfy 0 <= {rate_low} <= {rate_high} < 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = if rate_high > rate_low { rng.random_range(rate_low..=rate_high) } else { rate_low };
    let valid: Vec<usize> = (0..s.len()).filter(|&i| s.time.valid[i]).collect();
    let n_keep = (((1.0 - r) * valid.len() as f64 - 1e-9).ceil() as usize).clamp(1.min(valid.len()), valid.len());
    if n_keep == valid.len() {
        return Ok(s.clone());
    }
    let mut keep = vec![false; s.len()];
    for i in index::sample(&mut rng, valid.len(), n_keep) {
        keep[valid[i]] = true;
    }
    for (k, &v) in keep.iter_mut().zip(&s.time.valid) {
        *k |= !v;
    }
    let steps: Vec<usize> = (0..s.len()).filter(|&i| keep[i]).collect();
    let row = s.channels() * s.n_pix();
    let mut data = Vec::with_capacity(steps.len() * row);
    for &i in &steps {
        data.extend_from_slice(&s.values.data()[i * row..(i + 1) * row]);
    }
    PixelSetSample::new(
        Tensor::new(&[steps.len(), s.channels(), s.n_pix()], data)?,
        s.time.select(&steps),
        s.label,
        s.parcel_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::TimeAxis;

    fn grid_2x2() -> GridSample {
        // T=1, C=1: pixel values 10, 20, 30, 40
        GridSample::new(
            Tensor::new(&[1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
            TimeAxis::all_valid(vec![5.0]).unwrap(),
            vec![1, 1, 2, 0],
            vec![3, 3, 3, 0],
        )
        .unwrap()
    }

    #[test]
    fn exact_parcel_without_replacement() {
        let s = grid_to_pixelset(&grid_2x2(), &[true, true, true, false], 3, 4).unwrap();
        let mut v = s.values.data().to_vec();
        v.sort_by(f32::total_cmp);
        assert_eq!(v, vec![10.0, 20.0, 30.0]);
        assert_eq!(s.label, 1);
        assert_eq!(s.parcel_id, 3);
    }

    #[test]
    fn single_pixel_is_repeated() {
        let s = grid_to_pixelset(&grid_2x2(), &[false, false, false, true], 4, 0).unwrap();
        assert_eq!(s.values.data(), &[40.0; 4]);
    }

    #[test]
    fn empty_mask_is_a_data_error() {
        assert!(matches!(grid_to_pixelset(&grid_2x2(), &[false; 4], 2, 0), Err(Error::Data(_))));
    }

    fn series(t: usize) -> PixelSetSample {
        let values = Tensor::new(&[t, 1, 1], (0..t).map(|i| i as f32).collect()).unwrap();
        let time = TimeAxis::all_valid((0..t).map(|i| 10.0 * i as f32).collect()).unwrap();
        PixelSetSample::new(values, time, 2, 7).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let s = series(10);
        assert_eq!(temporal_dropout(&s, 0.0, 0.0, 1).unwrap(), s);
    }

    #[test]
    fn half_rate_keeps_half() {
        let d = temporal_dropout(&series(10), 0.5, 0.5, 3).unwrap();
        assert_eq!(d.len(), 5);
        for (v, t) in d.values.data().iter().zip(&d.time.timestamps) {
            assert_eq!(*t, 10.0 * v);
        }
        assert_eq!((d.label, d.parcel_id), (2, 7));
    }

    #[test]
    fn ceiling_is_not_fooled_by_rounding() {
        // 0.7 * 10 is 7.000000000000001 in binary floating point
        assert_eq!(temporal_dropout(&series(10), 0.3, 0.3, 0).unwrap().len(), 7);
    }

    #[test]
    fn at_least_one_step_survives() {
        assert_eq!(temporal_dropout(&series(1), 0.99, 0.99, 0).unwrap().len(), 1);
    }
}
