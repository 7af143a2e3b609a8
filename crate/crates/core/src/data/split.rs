//! Image-level dataset splits and nested subsampling.
//!
//! All selection happens at the image level so that no image leaks across
//! parts and caption pairs stay together.

use super::record::DatapointRecord;
use super::DataError;
use crate::math::SeedStream;
use rand::seq::SliceRandom;
use std::collections::HashMap;

/// Train/validation/test partition; parts beyond the given fractions stay
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<DatapointRecord>,
    pub validation: Vec<DatapointRecord>,
    pub test: Vec<DatapointRecord>,
    pub seed: u64,
}

fn unique_images(records: &[DatapointRecord]) -> Vec<&str> {
    let mut seen = HashMap::new();
    let mut images = Vec::new();
    for r in records {
        if seen.insert(r.image_id.as_str(), ()).is_none() {
            images.push(r.image_id.as_str());
        }
    }
    images
}

/// Splits records by image into up to three parts.
///
/// Fractions must be positive and sum to one. Image counts per part come
/// from cumulative rounding, so they are exact for whole-number products and
/// always sum to the total.
pub fn split_by_image(
    records: &[DatapointRecord],
    fractions: &[f64],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if fractions.is_empty() || fractions.len() > 3 {
        return Err(DataError::BadFractions {
            detail: format!("need 1 to 3 fractions, got {}", fractions.len()),
        });
    }
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(DataError::BadFractions { detail: format!("{fractions:?} not all positive") });
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions { detail: format!("{fractions:?} sum to {sum}") });
    }

    let mut images = unique_images(records);
    let mut rng = SeedStream::new(seed).substream("split").rng();
    images.shuffle(&mut rng);

    let n = images.len();
    let mut assignment: HashMap<&str, usize> = HashMap::with_capacity(n);
    let mut cumulative = 0.0;
    let mut start = 0usize;
    for (part, &fraction) in fractions.iter().enumerate() {
        cumulative += fraction;
        let end = if part + 1 == fractions.len() {
            n
        } else {
            (cumulative * n as f64).round() as usize
        };
        for &image in &images[start..end.min(n)] {
            assignment.insert(image, part);
        }
        start = end.min(n);
    }

    let mut split =
        DatasetSplit { train: Vec::new(), validation: Vec::new(), test: Vec::new(), seed };
    for r in records {
        match assignment[r.image_id.as_str()] {
            0 => split.train.push(r.clone()),
            1 => split.validation.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}

/// Keeps a seeded fraction of images (and all their records).
///
/// For a fixed seed the kept image sets are nested across fractions:
/// `subset(0.1)` is contained in `subset(0.5)`.
pub fn subset_fraction(
    records: &[DatapointRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<DatapointRecord>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::BadFraction { fraction });
    }
    let mut images = unique_images(records);
    let mut rng = SeedStream::new(seed).substream("subset").rng();
    images.shuffle(&mut rng);
    let keep_count = ((fraction * images.len() as f64).ceil() as usize).min(images.len());
    let keep: HashMap<&str, ()> = images[..keep_count].iter().map(|&s| (s, ())).collect();
    Ok(records.iter().filter(|r| keep.contains_key(r.image_id.as_str())).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::{FoilLabel, Task};
    use std::collections::{BTreeMap, HashSet};

    fn foil_pair(image: usize) -> Vec<DatapointRecord> {
        [(FoilLabel::Original, "orig"), (FoilLabel::Foiled, "foil")]
            .into_iter()
            .map(|(label, tag)| DatapointRecord {
                task: Task::Foil,
                image_id: format!("img{image:05}"),
                language_id: format!("cap{image:05}-{tag}"),
                candidate_ids: vec![],
                gt_index: 0,
                label,
                target_object: None,
                meta: BTreeMap::new(),
            })
            .collect()
    }

    fn corpus(n_images: usize) -> Vec<DatapointRecord> {
        (0..n_images).flat_map(foil_pair).collect()
    }

    fn images_of(records: &[DatapointRecord]) -> HashSet<&str> {
        records.iter().map(|r| r.image_id.as_str()).collect()
    }

    #[test]
    fn split_partitions_records_by_image() {
        let records = corpus(50);
        let split = split_by_image(&records, &[0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!(
            split.train.len() + split.validation.len() + split.test.len(),
            records.len()
        );
        let train = images_of(&split.train);
        let val = images_of(&split.validation);
        let test = images_of(&split.test);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
        assert_eq!(train.len(), 30);
        assert_eq!(val.len(), 10);
        assert_eq!(test.len(), 10);
        // same seed reproduces, different seed moves images
        assert_eq!(split, split_by_image(&records, &[0.6, 0.2, 0.2], 7).unwrap());
        assert_ne!(split, split_by_image(&records, &[0.6, 0.2, 0.2], 8).unwrap());
    }

    #[test]
    fn single_fraction_keeps_everything_in_train() {
        let records = corpus(5);
        let split = split_by_image(&records, &[1.0], 0).unwrap();
        assert_eq!(split.train, records);
        assert!(split.validation.is_empty());
        assert!(split.test.is_empty());
    }

    #[test]
    fn rounding_matches_published_counts() {
        // 14458 images at (0.9032, 0.0968) must land on 13058 / 1400
        let records: Vec<DatapointRecord> = (0..14458).flat_map(foil_pair).collect();
        let records: Vec<DatapointRecord> =
            records.into_iter().filter(|r| r.label == FoilLabel::Original).collect();
        let split = split_by_image(&records, &[0.9032, 0.0968], 1).unwrap();
        assert_eq!(images_of(&split.train).len(), 13058);
        assert_eq!(images_of(&split.validation).len(), 1400);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let records = corpus(4);
        assert!(split_by_image(&records, &[], 0).is_err());
        assert!(split_by_image(&records, &[0.5, 0.2], 0).is_err());
        assert!(split_by_image(&records, &[0.5, -0.5, 1.0], 0).is_err());
        assert!(split_by_image(&records, &[0.3, 0.3, 0.3, 0.1], 0).is_err());
    }

    #[test]
    fn subsets_are_nested_and_keep_pairs() {
        let records = corpus(40);
        let small = subset_fraction(&records, 0.1, 3).unwrap();
        let large = subset_fraction(&records, 0.5, 3).unwrap();
        assert_eq!(images_of(&small).len(), 4);
        assert_eq!(images_of(&large).len(), 20);
        assert!(images_of(&small).is_subset(&images_of(&large)));
        // both members of every kept pair survive
        assert_eq!(small.len(), 8);
        for pair in small.chunks(2) {
            assert_eq!(pair[0].image_id, pair[1].image_id);
            assert_ne!(pair[0].label, pair[1].label);
        }
        let all = subset_fraction(&records, 1.0, 3).unwrap();
        assert_eq!(all, records);
    }

    #[test]
    fn subset_fraction_bounds() {
        let records = corpus(4);
        assert!(matches!(
            subset_fraction(&records, 0.0, 0),
            Err(DataError::BadFraction { .. })
        ));
        assert!(matches!(
            subset_fraction(&records, 1.5, 0),
            Err(DataError::BadFraction { .. })
        ));
        // tiny fractions still keep at least one image
        assert_eq!(images_of(&subset_fraction(&records, 1e-6, 0).unwrap()).len(), 1);
    }
}
