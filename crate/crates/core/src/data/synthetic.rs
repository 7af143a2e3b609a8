//! Synthetic multimodal corpus with a controllable cross-modal signal.
//!
//! Each image is a random unit vector `v` in visual space. A fixed random
//! projection `P` maps visual space into language space; every piece of
//! language attached to an image is a unit mix
//! `normalize(s * normalize(P v) + (1 - s) * noise)`, so `s` (the signal
//! strength) controls how much of the language embedding is predictable from
//! the image. VQA answers reuse part of their question's noise, so answer
//! retrieval genuinely needs the language input. Foiled captions add a fixed
//! language-space offset `normalize(P d)` scaled by
//! `s * foil_perturbation_scale`, which keeps the foil cue inside the
//! cross-modal subspace and makes it vanish at `s = 0` (foiled captions then
//! equal their originals, so no classifier can beat chance).
//!
//! Ids follow fixed conventions that the rest of the pipeline relies on:
//! images `img000000`, questions `vqaQ-<img>-<j>`, answers `vqaA-<img>-<j>`,
//! descriptions `ref-...`/`gw-...`, captions `foil-<img>-<p>-orig|foil`,
//! scrambled variants `<language_id>#scrambled`, categories `cat00` with
//! visual samples `cat00/<k>`.

use super::bank::EmbeddingBank;
use super::record::{DatapointRecord, FoilLabel, Task};
use super::DataError;
use crate::math::linalg::{normalized, Matrix};
use crate::math::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// How strongly a scrambled caption still resembles its source.
const SCRAMBLE_MIX: f64 = 0.4;
/// Share of a VQA answer's unpredictable part that echoes its question's.
/// Without this, answers depend on the image alone and retrieval training
/// is free to discard the language pathway entirely.
const ANSWER_ECHO: f64 = 0.7;
/// Visual spread of per-category sample clouds.
const CATEGORY_SPREAD: f64 = 0.35;
/// Size of the shared object vocabulary.
const OBJECT_VOCAB: usize = 24;

/// Settings for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub visual_dim: usize,
    pub language_dim: usize,
    /// Signal strength `s` in `[0, 1]`: share of each language embedding
    /// that is predictable from its image.
    pub cross_modal_signal: f64,
    /// Scale of the foil offset (multiplied by `s`).
    pub foil_perturbation_scale: f64,
    pub vqa_per_image: usize,
    pub referit_per_image: usize,
    pub guesswhat_per_image: usize,
    pub foil_pairs_per_image: usize,
    /// Candidate list length for answer retrieval.
    pub vqa_candidates: usize,
    /// Candidate list length for image retrieval.
    pub visual_candidates: usize,
    pub n_categories: usize,
    pub samples_per_category: usize,
    /// Also emit a `#scrambled` language variant for every language item.
    pub with_scrambled: bool,
    pub caption_length_range: (u32, u32),
    pub num_objects_range: (u32, u32),
    pub target_area_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 100,
            visual_dim: 64,
            language_dim: 32,
            cross_modal_signal: 0.7,
            foil_perturbation_scale: 0.5,
            vqa_per_image: 2,
            referit_per_image: 2,
            guesswhat_per_image: 2,
            foil_pairs_per_image: 1,
            vqa_candidates: 18,
            visual_candidates: 20,
            n_categories: 12,
            samples_per_category: 8,
            with_scrambled: true,
            caption_length_range: (5, 20),
            num_objects_range: (1, 3),
            target_area_range: (0.05, 0.6),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |detail: String| Err(DataError::BadSpec { detail });
        if self.n_images == 0 {
            return fail("n_images must be positive".into());
        }
        if self.visual_dim < 2 || self.language_dim < 2 {
            return fail("embedding dims must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.cross_modal_signal) {
            return fail(format!("cross_modal_signal {} outside [0, 1]", self.cross_modal_signal));
        }
        if self.foil_perturbation_scale < 0.0 || !self.foil_perturbation_scale.is_finite() {
            return fail(format!("bad foil_perturbation_scale {}", self.foil_perturbation_scale));
        }
        if self.vqa_per_image > 0 {
            let pool = self.n_images * self.vqa_per_image;
            if self.vqa_candidates < 2 || self.vqa_candidates > pool {
                return fail(format!(
                    "vqa_candidates {} needs 2..={pool} (answer pool)",
                    self.vqa_candidates
                ));
            }
        }
        if self.referit_per_image > 0 || self.guesswhat_per_image > 0 {
            if self.visual_candidates < 2 || self.visual_candidates > self.n_images {
                return fail(format!(
                    "visual_candidates {} needs 2..={} (image pool)",
                    self.visual_candidates, self.n_images
                ));
            }
        }
        if self.n_categories > 0 && self.samples_per_category == 0 {
            return fail("samples_per_category must be positive".into());
        }
        let (cl, ch) = self.caption_length_range;
        if cl < 1 || cl > ch {
            return fail(format!("bad caption_length_range ({cl}, {ch})"));
        }
        let (ol, oh) = self.num_objects_range;
        if ol < 1 || ol > oh || oh as usize > OBJECT_VOCAB {
            return fail(format!("bad num_objects_range ({ol}, {oh})"));
        }
        let (al, ah) = self.target_area_range;
        if !(al > 0.0 && al <= ah && ah <= 1.0) {
            return fail(format!("bad target_area_range ({al}, {ah})"));
        }
        Ok(())
    }
}

/// Generated banks and per-task datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub visual_bank: EmbeddingBank,
    pub language_bank: EmbeddingBank,
    pub vqa: Vec<DatapointRecord>,
    pub referit: Vec<DatapointRecord>,
    pub guesswhat: Vec<DatapointRecord>,
    pub foil: Vec<DatapointRecord>,
    /// One language embedding per category (empty when `n_categories == 0`).
    pub category_language_bank: EmbeddingBank,
    /// `samples_per_category` visual embeddings per category.
    pub category_visual_bank: EmbeddingBank,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Some(u) = normalized(&gaussian(rng, dim)) {
            return u;
        }
    }
}

/// `normalize(s * signal + (1 - s) * noise)`.
fn blend_language(signal: &[f64], noise: &[f64], s: f64) -> Vec<f64> {
    let blend: Vec<f64> =
        signal.iter().zip(noise.iter()).map(|(a, b)| s * a + (1.0 - s) * b).collect();
    // signal and noise cancelling exactly has measure zero
    normalized(&blend).unwrap_or_else(|| noise.to_vec())
}

/// [`blend_language`] with fresh unit noise.
fn mix_language(signal: &[f64], s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = unit_gaussian(rng, signal.len());
    blend_language(signal, &noise, s)
}

struct ImageProfile {
    objects: Vec<String>,
    target_area: f64,
}

/// Samples `amount` distinct indices from `0..n` excluding `skip`.
fn sample_excluding(rng: &mut ChaCha8Rng, n: usize, skip: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n - 1, amount)
        .into_iter()
        .map(|i| if i >= skip { i + 1 } else { i })
        .collect()
}

fn candidate_list(
    rng: &mut ChaCha8Rng,
    pool: &[String],
    gt_pool_index: usize,
    count: usize,
) -> (Vec<String>, usize) {
    let mut ids: Vec<String> = vec![pool[gt_pool_index].clone()];
    ids.extend(
        sample_excluding(rng, pool.len(), gt_pool_index, count - 1)
            .into_iter()
            .map(|i| pool[i].clone()),
    );
    ids.shuffle(rng);
    let gt_index = ids.iter().position(|id| id == &pool[gt_pool_index]).unwrap();
    (ids, gt_index)
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed);
    let s = spec.cross_modal_signal;

    // image latents
    let image_ids: Vec<String> = (0..spec.n_images).map(|i| format!("img{i:06}")).collect();
    let mut visual_bank = EmbeddingBank::new(spec.visual_dim);
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(spec.n_images);
    {
        let mut rng = root.substream("images").rng();
        for id in &image_ids {
            let v = unit_gaussian(&mut rng, spec.visual_dim);
            visual_bank.push(id, &v)?;
            latents.push(v);
        }
    }

    // fixed cross-modal projection
    let projection = {
        let mut rng = root.substream("projection").rng();
        let mut m = Matrix::zeros(spec.language_dim, spec.visual_dim);
        let scale = 1.0 / (spec.visual_dim as f64).sqrt();
        for v in m.as_mut_slice().iter_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        m
    };
    let signal_of = |v: &[f64]| -> Vec<f64> {
        normalized(projection.matvec(v).expect("projection dims fixed").as_slice())
            .expect("projection of a unit vector is nonzero")
    };

    // fixed foil offset direction, inside the cross-modal subspace
    let foil_offset: Vec<f64> = {
        let mut rng = root.substream("foil-direction").rng();
        let delta_v = unit_gaussian(&mut rng, spec.visual_dim);
        signal_of(&delta_v)
    };

    // per-image objects and covariates
    let object_vocab: Vec<String> = (0..OBJECT_VOCAB).map(|i| format!("obj{i:02}")).collect();
    let profiles: Vec<ImageProfile> = (0..spec.n_images)
        .map(|i| {
            let mut rng = root.substream_indexed("objects", i as u64).rng();
            let count = rng.random_range(spec.num_objects_range.0..=spec.num_objects_range.1);
            let objects = rand::seq::index::sample(&mut rng, object_vocab.len(), count as usize)
                .into_iter()
                .map(|k| object_vocab[k].clone())
                .collect();
            let target_area =
                rng.random_range(spec.target_area_range.0..=spec.target_area_range.1);
            ImageProfile { objects, target_area }
        })
        .collect();

    let mut language_bank = EmbeddingBank::new(spec.language_dim);
    let push_language =
        |bank: &mut EmbeddingBank, id: &str, values: &[f64]| -> Result<(), DataError> {
            bank.push(id, values)?;
            if spec.with_scrambled {
                let mut rng = root.substream(&format!("scramble/{id}")).rng();
                let noise = unit_gaussian(&mut rng, spec.language_dim);
                let cross = (1.0 - SCRAMBLE_MIX * SCRAMBLE_MIX).sqrt();
                let blend: Vec<f64> = values
                    .iter()
                    .zip(noise.iter())
                    .map(|(a, b)| SCRAMBLE_MIX * a + cross * b)
                    .collect();
                let scrambled = normalized(&blend).expect("scramble blend is nonzero");
                bank.push(&format!("{id}#scrambled"), &scrambled)?;
            }
            Ok(())
        };

    let base_meta = |i: usize, rng: &mut ChaCha8Rng| -> BTreeMap<String, f64> {
        let mut meta = BTreeMap::new();
        let len = rng.random_range(spec.caption_length_range.0..=spec.caption_length_range.1);
        meta.insert("caption_length".into(), len as f64);
        meta.insert("num_objects".into(), profiles[i].objects.len() as f64);
        meta.insert("target_area".into(), profiles[i].target_area);
        if spec.with_scrambled {
            meta.insert("has_scrambled".into(), 1.0);
        }
        meta
    };

    // language items; answers first so the VQA candidate pool is addressable
    let mut vqa_answers: Vec<String> = Vec::with_capacity(spec.n_images * spec.vqa_per_image);
    let mut vqa = Vec::new();
    for (i, v) in latents.iter().enumerate() {
        let signal = signal_of(v);
        for j in 0..spec.vqa_per_image {
            let sub = root.substream(&format!("language/vqa/{i}/{j}"));
            let mut rng = sub.rng();
            let question_noise = unit_gaussian(&mut rng, spec.language_dim);
            let question = blend_language(&signal, &question_noise, s);
            // the answer echoes part of the question's noise, so retrieval
            // cannot be solved from the image pathway alone
            let fresh = unit_gaussian(&mut rng, spec.language_dim);
            let tail = (1.0 - ANSWER_ECHO * ANSWER_ECHO).sqrt();
            let answer_noise: Vec<f64> = question_noise
                .iter()
                .zip(fresh.iter())
                .map(|(q, e)| ANSWER_ECHO * q + tail * e)
                .collect();
            let answer = blend_language(&signal, &answer_noise, s);
            let q_id = format!("vqaQ-{i:06}-{j}");
            let a_id = format!("vqaA-{i:06}-{j}");
            push_language(&mut language_bank, &q_id, &question)?;
            push_language(&mut language_bank, &a_id, &answer)?;
            vqa_answers.push(a_id);
            let mut meta = base_meta(i, &mut rng);
            meta.insert("answer_pool_index".into(), (vqa_answers.len() - 1) as f64);
            let target = profiles[i].objects[rng.random_range(0..profiles[i].objects.len())].clone();
            vqa.push(DatapointRecord {
                task: Task::Vqa,
                image_id: image_ids[i].clone(),
                language_id: q_id,
                candidate_ids: Vec::new(),
                gt_index: 0,
                label: FoilLabel::NotApplicable,
                target_object: Some(target),
                meta,
            });
        }
    }
    // fill VQA candidates now that the answer pool is complete
    for record in vqa.iter_mut() {
        let pool_index = record.meta.remove("answer_pool_index").unwrap() as usize;
        let mut rng = root.substream(&format!("candidates/vqa/{}", record.language_id)).rng();
        let (ids, gt_index) =
            candidate_list(&mut rng, &vqa_answers, pool_index, spec.vqa_candidates);
        record.candidate_ids = ids;
        record.gt_index = gt_index;
    }

    let mut image_retrieval = |task: Task, tag: &str, per_image: usize| -> Result<Vec<DatapointRecord>, DataError> {
        let mut records = Vec::with_capacity(spec.n_images * per_image);
        for (i, v) in latents.iter().enumerate() {
            let signal = signal_of(v);
            for j in 0..per_image {
                let sub = root.substream(&format!("language/{}/{i}/{j}", task.name()));
                let mut rng = sub.rng();
                let description = mix_language(&signal, s, &mut rng);
                let l_id = format!("{tag}-{i:06}-{j}");
                push_language(&mut language_bank, &l_id, &description)?;
                let meta = base_meta(i, &mut rng);
                let target =
                    profiles[i].objects[rng.random_range(0..profiles[i].objects.len())].clone();
                let mut cand_rng = root.substream(&format!("candidates/{}/{l_id}", task.name())).rng();
                let (ids, gt_index) =
                    candidate_list(&mut cand_rng, &image_ids, i, spec.visual_candidates);
                records.push(DatapointRecord {
                    task,
                    image_id: image_ids[i].clone(),
                    language_id: l_id,
                    candidate_ids: ids,
                    gt_index,
                    label: FoilLabel::NotApplicable,
                    target_object: Some(target),
                    meta,
                });
            }
        }
        Ok(records)
    };
    let referit = image_retrieval(Task::Referit, "ref", spec.referit_per_image)?;
    let guesswhat = image_retrieval(Task::Guesswhat, "gw", spec.guesswhat_per_image)?;

    // classification pairs
    let mut foil = Vec::with_capacity(spec.n_images * spec.foil_pairs_per_image * 2);
    let mut pair_id = 0u64;
    for (i, v) in latents.iter().enumerate() {
        let signal = signal_of(v);
        for p in 0..spec.foil_pairs_per_image {
            let sub = root.substream(&format!("language/foil/{i}/{p}"));
            let mut rng = sub.rng();
            let original = mix_language(&signal, s, &mut rng);
            let offset = s * spec.foil_perturbation_scale;
            let foiled_raw: Vec<f64> = original
                .iter()
                .zip(foil_offset.iter())
                .map(|(o, d)| o + offset * d)
                .collect();
            let foiled = normalized(&foiled_raw).expect("foiled caption is nonzero");
            let orig_id = format!("foil-{i:06}-{p}-orig");
            let foil_id = format!("foil-{i:06}-{p}-foil");
            push_language(&mut language_bank, &orig_id, &original)?;
            push_language(&mut language_bank, &foil_id, &foiled)?;
            let mut meta = base_meta(i, &mut rng);
            meta.insert("pair_id".into(), pair_id as f64);
            let caption_length = meta["caption_length"];
            meta.insert("foil_position".into(), rng.random_range(1..=caption_length as u32) as f64);
            let target = profiles[i].objects[rng.random_range(0..profiles[i].objects.len())].clone();
            for (lang_id, label) in [(orig_id, FoilLabel::Original), (foil_id, FoilLabel::Foiled)] {
                foil.push(DatapointRecord {
                    task: Task::Foil,
                    image_id: image_ids[i].clone(),
                    language_id: lang_id,
                    candidate_ids: Vec::new(),
                    gt_index: 0,
                    label,
                    target_object: Some(target.clone()),
                    meta: meta.clone(),
                });
            }
            pair_id += 1;
        }
    }

    // category prototypes for the nearest-neighbour protocol
    let mut category_language_bank = EmbeddingBank::new(spec.language_dim);
    let mut category_visual_bank = EmbeddingBank::new(spec.visual_dim);
    for c in 0..spec.n_categories {
        let mut rng = root.substream_indexed("category", c as u64).rng();
        let w = unit_gaussian(&mut rng, spec.visual_dim);
        let name = format!("cat{c:02}");
        let lang = mix_language(&signal_of(&w), s, &mut rng);
        category_language_bank.push(&name, &lang)?;
        for k in 0..spec.samples_per_category {
            let jitter = gaussian(&mut rng, spec.visual_dim);
            let sample: Vec<f64> =
                w.iter().zip(jitter.iter()).map(|(a, b)| a + CATEGORY_SPREAD * b).collect();
            let sample = normalized(&sample).expect("category sample is nonzero");
            category_visual_bank.push(&format!("{name}/{k}"), &sample)?;
        }
    }

    Ok(SyntheticCorpus {
        visual_bank,
        language_bank,
        vqa,
        referit,
        guesswhat,
        foil,
        category_language_bank,
        category_visual_bank,
    })
}
