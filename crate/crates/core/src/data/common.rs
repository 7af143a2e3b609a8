//! Balancing the three retrieval datasets onto a shared image set.
//!
//! For every image that appears in all three datasets, the same number of
//! datapoints (the per-image minimum) is kept per task. Selection prefers
//! coherent items: ReferIt/GuessWhat items are paired by equal target
//! object, then VQA items mentioning one of those targets are taken, and
//! any remaining quota is filled by a seeded uniform draw.

use super::record::{DatapointRecord, Task};
use super::DataError;
use crate::math::SeedStream;
use std::collections::{BTreeMap, BTreeSet, HashSet};

/// Equal-sized per-task datasets over the shared images.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonDatasets {
    pub vqa: Vec<DatapointRecord>,
    pub referit: Vec<DatapointRecord>,
    pub guesswhat: Vec<DatapointRecord>,
}

fn group_by_image<'a>(
    records: &'a [DatapointRecord],
    expect: Task,
) -> Result<BTreeMap<&'a str, Vec<usize>>, DataError> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.task != expect {
            return Err(DataError::BadRecord {
                detail: format!("expected {expect} record, found {}", r.task),
            });
        }
        map.entry(&r.image_id).or_default().push(i);
    }
    Ok(map)
}

/// Draws `amount` values from `items` without replacement, returning them in
/// their original order.
fn seeded_subset(items: &[usize], amount: usize, seeds: &SeedStream) -> Vec<usize> {
    if amount >= items.len() {
        return items.to_vec();
    }
    let mut rng = seeds.rng();
    let mut picked: Vec<usize> =
        rand::seq::index::sample(&mut rng, items.len(), amount).into_iter().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

pub fn build_common_dataset(
    vqa: &[DatapointRecord],
    referit: &[DatapointRecord],
    guesswhat: &[DatapointRecord],
    seed: u64,
) -> Result<CommonDatasets, DataError> {
    let vqa_by_image = group_by_image(vqa, Task::Vqa)?;
    let ref_by_image = group_by_image(referit, Task::Referit)?;
    let gw_by_image = group_by_image(guesswhat, Task::Guesswhat)?;
    let seeds = SeedStream::new(seed);

    let mut out = CommonDatasets { vqa: Vec::new(), referit: Vec::new(), guesswhat: Vec::new() };
    let mut any_common = false;
    for (&image, vqa_items) in &vqa_by_image {
        let (ref_items, gw_items) = match (ref_by_image.get(image), gw_by_image.get(image)) {
            (Some(r), Some(g)) => (r, g),
            _ => continue,
        };
        any_common = true;
        let k = vqa_items.len().min(ref_items.len()).min(gw_items.len());

        // pair ReferIt and GuessWhat items describing the same target object
        let mut gw_used = vec![false; gw_items.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &ri in ref_items {
            let target = match &referit[ri].target_object {
                Some(t) => t,
                None => continue,
            };
            let hit = gw_items.iter().enumerate().find(|(slot, &gi)| {
                !gw_used[*slot] && guesswhat[gi].target_object.as_ref() == Some(target)
            });
            if let Some((slot, &gi)) = hit {
                gw_used[slot] = true;
                pairs.push((ri, gi));
            }
        }
        let n = pairs.len().min(k);
        let pair_pick: Vec<usize> = seeded_subset(
            &(0..pairs.len()).collect::<Vec<_>>(),
            n,
            &seeds.substream(&format!("common/pairs/{image}")),
        );
        let mut ref_selected: Vec<usize> = Vec::with_capacity(k);
        let mut gw_selected: Vec<usize> = Vec::with_capacity(k);
        let mut pair_targets: BTreeSet<&str> = BTreeSet::new();
        for &p in &pair_pick {
            let (ri, gi) = pairs[p];
            ref_selected.push(ri);
            gw_selected.push(gi);
            if let Some(t) = &referit[ri].target_object {
                pair_targets.insert(t);
            }
        }

        // VQA items mentioning one of the paired targets, at most n of them
        let matching_vqa: Vec<usize> = vqa_items
            .iter()
            .copied()
            .filter(|&vi| {
                vqa[vi]
                    .target_object
                    .as_ref()
                    .is_some_and(|t| pair_targets.contains(t.as_str()))
            })
            .collect();
        let mut vqa_selected = seeded_subset(
            &matching_vqa,
            n,
            &seeds.substream(&format!("common/vqa/{image}")),
        );

        // top up every task to exactly k with a seeded uniform draw
        let top_up = |selected: &mut Vec<usize>, items: &[usize], task: &str| {
            let taken: HashSet<usize> = selected.iter().copied().collect();
            let remaining: Vec<usize> =
                items.iter().copied().filter(|i| !taken.contains(i)).collect();
            let extra = seeded_subset(
                &remaining,
                k - selected.len(),
                &seeds.substream(&format!("common/topup/{task}/{image}")),
            );
            selected.extend(extra);
            selected.sort_unstable();
        };
        top_up(&mut vqa_selected, vqa_items, "vqa");
        top_up(&mut ref_selected, ref_items, "referit");
        top_up(&mut gw_selected, gw_items, "guesswhat");

        out.vqa.extend(vqa_selected.into_iter().map(|i| vqa[i].clone()));
        out.referit.extend(ref_selected.into_iter().map(|i| referit[i].clone()));
        out.guesswhat.extend(gw_selected.into_iter().map(|i| guesswhat[i].clone()));
    }
    if !any_common {
        return Err(DataError::EmptyIntersection);
    }
    debug_assert_eq!(out.vqa.len(), out.referit.len());
    debug_assert_eq!(out.vqa.len(), out.guesswhat.len());
    Ok(CommonDatasets { ..out })
}
