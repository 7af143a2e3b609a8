//! Representation-space comparison: similarity-structure correlation between
//! spaces, nearest-neighbour overlap, space density, mean paired cosine, and
//! input perturbations that produce contrast datasets for those measures.

use crate::data::record::{DatapointRecord, FoilLabel};
use crate::data::{DataError, EmbeddingBank};
use crate::encoder::{EncoderParams, ModelError};
use crate::math::linalg::Vector;
use crate::math::stats::{cosine_similarity, spearman};
use crate::math::{SeedStream, StatsError};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum AnalysisError {
    Stats(StatsError),
    Data(DataError),
    Model(ModelError),
    /// Paired operations need sets of equal size.
    SizeMismatch { left: usize, right: usize },
    BadK { k: usize, n: usize },
    /// A representation set needs at least two rows (or a sample at least
    /// two points).
    TooSmall { n: usize },
    ZeroNormRow { label: String, index: usize },
    RaggedRows { label: String },
    /// A perturbation needs a variant (foiled twin, scrambled caption) the
    /// record does not provide.
    MissingVariant { id: String },
    TooSmallForDerangement { n: usize },
    EmptyCategory { name: String },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::Stats(e) => write!(f, "{e}"),
            AnalysisError::Data(e) => write!(f, "{e}"),
            AnalysisError::Model(e) => write!(f, "{e}"),
            AnalysisError::SizeMismatch { left, right } => {
                write!(f, "paired sets differ in size: {left} vs {right}")
            }
            AnalysisError::BadK { k, n } => {
                write!(f, "k = {k} outside 1..{n} for {n} points")
            }
            AnalysisError::TooSmall { n } => write!(f, "need at least 2 points, got {n}"),
            AnalysisError::ZeroNormRow { label, index } => {
                write!(f, "set {label:?} row {index} has zero norm")
            }
            AnalysisError::RaggedRows { label } => {
                write!(f, "set {label:?} mixes vector dimensions")
            }
            AnalysisError::MissingVariant { id } => {
                write!(f, "no perturbation variant available for {id:?}")
            }
            AnalysisError::TooSmallForDerangement { n } => {
                write!(f, "cannot mismatch {n} item(s); need at least 2 distinct partners")
            }
            AnalysisError::EmptyCategory { name } => {
                write!(f, "category {name:?} has no visual samples")
            }
        }
    }
}

impl std::error::Error for AnalysisError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            AnalysisError::Stats(e) => Some(e),
            AnalysisError::Data(e) => Some(e),
            AnalysisError::Model(e) => Some(e),
            _ => None,
        }
    }
}

impl From<StatsError> for AnalysisError {
    fn from(e: StatsError) -> Self {
        AnalysisError::Stats(e)
    }
}

impl From<DataError> for AnalysisError {
    fn from(e: DataError) -> Self {
        AnalysisError::Data(e)
    }
}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        AnalysisError::Model(e)
    }
}

// ── Representation sets ──────────────────────────────────────────────────────

/// A labelled collection of N same-dimension vectors produced by one encoder
/// under one input condition; the unit every comparison here operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    label: String,
    provenance: String,
    rows: Vec<Vector>,
}

impl RepresentationSet {
    /// Requires at least two rows, a uniform dimension, and no zero-norm row.
    pub fn new(
        label: &str,
        provenance: &str,
        rows: Vec<Vector>,
    ) -> Result<Self, AnalysisError> {
        if rows.len() < 2 {
            return Err(AnalysisError::TooSmall { n: rows.len() });
        }
        let dim = rows[0].dim();
        if rows.iter().any(|r| r.dim() != dim) {
            return Err(AnalysisError::RaggedRows { label: label.to_string() });
        }
        for (index, row) in rows.iter().enumerate() {
            if row.norm() == 0.0 {
                return Err(AnalysisError::ZeroNormRow {
                    label: label.to_string(),
                    index,
                });
            }
        }
        Ok(RepresentationSet { label: label.to_string(), provenance: provenance.to_string(), rows })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].dim()
    }

    pub fn row(&self, i: usize) -> &Vector {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vector] {
        &self.rows
    }
}

/// The flattened upper triangle of a set's pairwise cosine matrix, in
/// (i, j) i < j lexicographic order: exactly N(N−1)/2 values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimVector {
    n: usize,
    values: Vec<f64>,
}

impl SimVector {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn pairwise_sim_vector(set: &RepresentationSet) -> Result<SimVector, AnalysisError> {
    let n = set.len();
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            values.push(cosine_similarity(set.row(i), set.row(j))?);
        }
    }
    Ok(SimVector { n, values })
}

// ── Similarity-structure correlation ─────────────────────────────────────────

/// Rank correlation between two spaces' internal similarity structures: the
/// spearman of their pairwise cosine vectors. The sets must contain paired
/// inputs in the same order. Degenerate sets whose similarities are all
/// equal have no rank structure and error with zero variance.
pub fn rsa(set_a: &RepresentationSet, set_b: &RepresentationSet) -> Result<f64, AnalysisError> {
    if set_a.len() != set_b.len() {
        return Err(AnalysisError::SizeMismatch { left: set_a.len(), right: set_b.len() });
    }
    let sims_a = pairwise_sim_vector(set_a)?;
    let sims_b = pairwise_sim_vector(set_b)?;
    Ok(spearman(sims_a.values(), sims_b.values())?)
}

/// All-pairs rsa over a list of sets, with the diagonal pinned at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RsaMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn rsa_matrix(sets: &[&RepresentationSet]) -> Result<RsaMatrix, AnalysisError> {
    let sims: Vec<SimVector> =
        sets.iter().map(|s| pairwise_sim_vector(s)).collect::<Result<_, _>>()?;
    let mut values = vec![vec![1.0; sets.len()]; sets.len()];
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i].len() != sets[j].len() {
                return Err(AnalysisError::SizeMismatch {
                    left: sets[i].len(),
                    right: sets[j].len(),
                });
            }
            let rho = spearman(sims[i].values(), sims[j].values())?;
            values[i][j] = rho;
            values[j][i] = rho;
        }
    }
    Ok(RsaMatrix { labels: sets.iter().map(|s| s.label().to_string()).collect(), values })
}

// ── Nearest-neighbour overlap ────────────────────────────────────────────────

/// Indices of the k cosine-nearest neighbours of `rows[i]`, self excluded,
/// ties broken by ascending index.
fn k_nearest(rows: &[Vector], i: usize, k: usize) -> Result<Vec<usize>, AnalysisError> {
    let mut scored = Vec::with_capacity(rows.len() - 1);
    for (j, row) in rows.iter().enumerate() {
        if j != i {
            scored.push((j, cosine_similarity(rows[i].as_slice(), row)?));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored[..k].iter().map(|&(j, _)| j).collect())
}

/// Raw per-item counts |kNN_a(i) ∩ kNN_b(i)|, aligned with the sets.
pub fn nn_overlap_counts(
    space_a: &RepresentationSet,
    space_b: &RepresentationSet,
    k: usize,
) -> Result<Vec<usize>, AnalysisError> {
    let n = space_a.len();
    if n != space_b.len() {
        return Err(AnalysisError::SizeMismatch { left: n, right: space_b.len() });
    }
    if k < 1 || k >= n {
        return Err(AnalysisError::BadK { k, n });
    }
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let nn_a = k_nearest(space_a.rows(), i, k)?;
        let nn_b = k_nearest(space_b.rows(), i, k)?;
        counts.push(nn_a.iter().filter(|j| nn_b.contains(j)).count());
    }
    Ok(counts)
}

/// How consistently two paired spaces agree on local neighbourhoods: shared
/// k-nearest-neighbour counts summed over items and normalized by N·k, so
/// identical spaces score 1 and disjoint neighbourhood structures score 0.
pub fn nn_overlap(
    space_a: &RepresentationSet,
    space_b: &RepresentationSet,
    k: usize,
) -> Result<f64, AnalysisError> {
    let counts = nn_overlap_counts(space_a, space_b, k)?;
    let n = space_a.len();
    Ok(counts.iter().sum::<usize>() as f64 / (n * k) as f64)
}

// ── Density ──────────────────────────────────────────────────────────────────

pub const DENSITY_SAMPLE: usize = 5000;

/// Mean pairwise cosine of a set: how tightly the space packs together.
pub fn density_of_set(set: &RepresentationSet) -> Result<f64, AnalysisError> {
    Ok(pairwise_sim_vector(set)?.mean())
}

/// Density of a seeded without-replacement sample of `sample_size` rows from
/// a bank (the whole bank when it is smaller). The mean accumulates
/// streaming in (i, j) i < j order rather than materializing the pair list.
pub fn density(
    bank: &EmbeddingBank,
    sample_size: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if sample_size < 2 {
        return Err(AnalysisError::TooSmall { n: sample_size });
    }
    if bank.len() < 2 {
        return Err(AnalysisError::TooSmall { n: bank.len() });
    }
    let take = sample_size.min(bank.len());
    let mut rng = SeedStream::new(seed).substream("density").rng();
    let picked = rand::seq::index::sample(&mut rng, bank.len(), take);
    let rows: Vec<Vector> = picked
        .into_iter()
        .map(|r| Vector::from_vec(bank.row(r).iter().map(|&v| v as f64).collect()))
        .collect();
    let mut sum = 0.0;
    let mut count = 0u64;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += cosine_similarity(&rows[i], &rows[j])?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Mean over i of cos(a_i, b_i) for paired sets.
pub fn mean_paired_cosine(
    set_a: &RepresentationSet,
    set_b: &RepresentationSet,
) -> Result<f64, AnalysisError> {
    if set_a.len() != set_b.len() {
        return Err(AnalysisError::SizeMismatch { left: set_a.len(), right: set_b.len() });
    }
    let mut sum = 0.0;
    for (a, b) in set_a.rows().iter().zip(set_b.rows()) {
        sum += cosine_similarity(a, b)?;
    }
    Ok(sum / set_a.len() as f64)
}

// ── Input perturbations ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// Swap each record's caption for its foiled twin (and vice versa).
    FoilPair,
    /// Substitute the precomputed scrambled-caption variant.
    ScrambledLanguage,
    /// Re-pair captions with images via a seeded derangement.
    MismatchedImage,
    /// Re-pair images with captions via a seeded derangement.
    MismatchedLanguage,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 4] = [
        PerturbMode::FoilPair,
        PerturbMode::ScrambledLanguage,
        PerturbMode::MismatchedImage,
        PerturbMode::MismatchedLanguage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbMode::FoilPair => "foil-pair",
            PerturbMode::ScrambledLanguage => "scrambled-language",
            PerturbMode::MismatchedImage => "mismatched-image",
            PerturbMode::MismatchedLanguage => "mismatched-language",
        }
    }

    pub fn parse(name: &str) -> Option<PerturbMode> {
        PerturbMode::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The suffix a precomputed scrambled-caption variant carries in the
/// language bank; records advertise its existence via the `has_scrambled`
/// metadata flag.
pub const SCRAMBLED_SUFFIX: &str = "#scrambled";

const DERANGEMENT_ATTEMPTS: usize = 10_000;

/// A seeded permutation of 0..n in which `perm[i]` never maps an item back
/// to its own partner value. Rejection-sampled, so duplicated values that
/// make full mismatching impossible surface as an error instead of a hang.
fn derangement(values: &[&str], seed_stream: &SeedStream) -> Result<Vec<usize>, AnalysisError> {
    let n = values.len();
    if n < 2 {
        return Err(AnalysisError::TooSmallForDerangement { n });
    }
    let mut rng = seed_stream.substream("derangement").rng();
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..DERANGEMENT_ATTEMPTS {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| values[p] != values[i]) {
            return Ok(perm);
        }
    }
    Err(AnalysisError::TooSmallForDerangement { n })
}

/// Builds the contrast dataset for a perturbation probe: same records, same
/// order, with one input stream substituted according to `mode`. Pair the
/// result with the source dataset by index when comparing representations.
pub fn perturb_inputs(
    records: &[DatapointRecord],
    mode: PerturbMode,
    seed: u64,
) -> Result<Vec<DatapointRecord>, AnalysisError> {
    let root = SeedStream::new(seed);
    let mut out = records.to_vec();
    match mode {
        PerturbMode::FoilPair => {
            // twins share a pair_id and carry opposite labels
            let mut by_pair: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (i, record) in records.iter().enumerate() {
                let pair = record
                    .meta_value("pair_id")
                    .ok_or_else(|| AnalysisError::MissingVariant {
                        id: record.language_id.clone(),
                    })?;
                by_pair.entry(pair.to_bits()).or_default().push(i);
            }
            for indices in by_pair.values() {
                let twins_ok = indices.len() == 2
                    && records[indices[0]].label != records[indices[1]].label
                    && records[indices[0]].label != FoilLabel::NotApplicable
                    && records[indices[1]].label != FoilLabel::NotApplicable;
                if !twins_ok {
                    return Err(AnalysisError::MissingVariant {
                        id: records[indices[0]].language_id.clone(),
                    });
                }
                out[indices[0]].language_id = records[indices[1]].language_id.clone();
                out[indices[1]].language_id = records[indices[0]].language_id.clone();
            }
        }
        PerturbMode::ScrambledLanguage => {
            for record in out.iter_mut() {
                if record.meta_value("has_scrambled") != Some(1.0) {
                    return Err(AnalysisError::MissingVariant {
                        id: record.language_id.clone(),
                    });
                }
                record.language_id = format!("{}{SCRAMBLED_SUFFIX}", record.language_id);
            }
        }
        PerturbMode::MismatchedImage => {
            let values: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
            let perm = derangement(&values, &root)?;
            for (record, &p) in out.iter_mut().zip(&perm) {
                record.image_id = records[p].image_id.clone();
            }
        }
        PerturbMode::MismatchedLanguage => {
            let values: Vec<&str> = records.iter().map(|r| r.language_id.as_str()).collect();
            let perm = derangement(&values, &root)?;
            for (record, &p) in out.iter_mut().zip(&perm) {
                record.language_id = records[p].language_id.clone();
            }
        }
    }
    Ok(out)
}

// ── Encoding datasets into sets ──────────────────────────────────────────────

/// Runs every record's (image, caption) pair through the encoder and
/// collects the hub vectors as a representation set.
pub fn encode_dataset(
    encoder: &EncoderParams,
    records: &[DatapointRecord],
    visual_bank: &EmbeddingBank,
    language_bank: &EmbeddingBank,
    label: &str,
    provenance: &str,
) -> Result<RepresentationSet, AnalysisError> {
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        let visual = visual_bank.vector(&record.image_id)?;
        let language = language_bank.vector(&record.language_id)?;
        rows.push(encoder.encode_hub(&visual, &language)?);
    }
    RepresentationSet::new(label, provenance, rows)
}

// ── Category-level nearest-neighbour protocol ────────────────────────────────

/// Paired category-level sets ready for [`nn_overlap`]: hub representations
/// against the raw visual and language prototypes they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPairing {
    pub categories: Vec<String>,
    pub hub: RepresentationSet,
    pub visual: RepresentationSet,
    pub language: RepresentationSet,
}

/// Averages each category's visual samples into a prototype, encodes every
/// (visual prototype, category language) pair, and returns the three
/// aligned spaces. Visual samples belong to the category whose id prefixes
/// theirs as `<category>/<sample>`.
pub fn nn_category_protocol(
    encoder: &EncoderParams,
    category_language: &EmbeddingBank,
    category_visual: &EmbeddingBank,
) -> Result<CategoryPairing, AnalysisError> {
    let categories: Vec<String> = category_language.ids().map(str::to_string).collect();
    let mut visual_rows = Vec::with_capacity(categories.len());
    let mut language_rows = Vec::with_capacity(categories.len());
    let mut hub_rows = Vec::with_capacity(categories.len());
    for name in &categories {
        let prefix = format!("{name}/");
        let mut sum = vec![0.0f64; category_visual.dim()];
        let mut count = 0usize;
        for (row, id) in (0..category_visual.len()).map(|r| (r, category_visual.id_at(r))) {
            if id == name || id.starts_with(&prefix) {
                for (s, &v) in sum.iter_mut().zip(category_visual.row(row)) {
                    *s += v as f64;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(AnalysisError::EmptyCategory { name: name.clone() });
        }
        let prototype: Vec<f64> = sum.into_iter().map(|v| v / count as f64).collect();
        let language = category_language.vector(name)?;
        hub_rows.push(encoder.encode_hub(&prototype, &language)?);
        visual_rows.push(Vector::from_vec(prototype));
        language_rows.push(language);
    }
    Ok(CategoryPairing {
        categories,
        hub: RepresentationSet::new("hub", "category prototypes", hub_rows)?,
        visual: RepresentationSet::new("visual", "category prototypes", visual_rows)?,
        language: RepresentationSet::new("language", "category prototypes", language_rows)?,
    })
}

// ── CSV emission ─────────────────────────────────────────────────────────────

/// Square labelled matrix: a header of set labels, then one row per set.
pub fn write_rsa_matrix_csv(path: &Path, matrix: &RsaMatrix) -> Result<(), DataError> {
    let mut out = String::from("space");
    for label in &matrix.labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (label, row) in matrix.labels.iter().zip(&matrix.values) {
        out.push_str(label);
        for value in row {
            out.push_str(&format!(",{value}"));
        }
        out.push('\n');
    }
    crate::data::atomic_write(path, out.as_bytes())
}

/// One row per compared pair and k.
pub fn write_nn_overlap_csv(
    path: &Path,
    rows: &[(String, String, usize, f64)],
) -> Result<(), DataError> {
    let mut out = String::from("space_a,space_b,k,overlap\n");
    for (a, b, k, overlap) in rows {
        out.push_str(&format!("{a},{b},{k},{overlap}\n"));
    }
    crate::data::atomic_write(path, out.as_bytes())
}

/// One row per measured space.
pub fn write_density_csv(path: &Path, rows: &[(String, f64)]) -> Result<(), DataError> {
    let mut out = String::from("space,density\n");
    for (space, value) in rows {
        out.push_str(&format!("{space},{value}\n"));
    }
    crate::data::atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SyntheticSpec};
    use crate::encoder::EncoderDims;
    use crate::math::stats::average_ranks;
    use crate::training::{initial_encoder, TrainConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn set_from(rows: Vec<Vec<f64>>) -> RepresentationSet {
        RepresentationSet::new(
            "test",
            "hand",
            rows.into_iter().map(Vector::from_vec).collect(),
        )
        .unwrap()
    }

    fn random_set(label: &str, n: usize, dim: usize, seed: u64) -> RepresentationSet {
        let mut rng = SeedStream::new(seed).substream(label).rng();
        let rows = (0..n)
            .map(|_| {
                Vector::from_vec((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            })
            .collect();
        RepresentationSet::new(label, "random", rows).unwrap()
    }

    fn unit_circle(degrees: &[f64]) -> RepresentationSet {
        set_from(
            degrees
                .iter()
                .map(|d| {
                    let r = d.to_radians();
                    vec![r.cos(), r.sin()]
                })
                .collect(),
        )
    }

    #[test]
    fn set_construction_enforces_invariants() {
        let one = vec![vec![1.0, 0.0]];
        assert!(matches!(
            RepresentationSet::new("x", "t", one.into_iter().map(Vector::from_vec).collect()),
            Err(AnalysisError::TooSmall { n: 1 })
        ));
        let zero_row = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(matches!(
            RepresentationSet::new("x", "t", zero_row.into_iter().map(Vector::from_vec).collect()),
            Err(AnalysisError::ZeroNormRow { index: 1, .. })
        ));
        let ragged = vec![vec![1.0, 0.0], vec![1.0]];
        assert!(matches!(
            RepresentationSet::new("x", "t", ragged.into_iter().map(Vector::from_vec).collect()),
            Err(AnalysisError::RaggedRows { .. })
        ));
    }

    #[test]
    fn sim_vector_length_law_and_constant_case() {
        for n in 2..=12 {
            let set = random_set("law", n, 6, n as u64);
            assert_eq!(pairwise_sim_vector(&set).unwrap().len(), n * (n - 1) / 2);
        }
        let clones = set_from(vec![vec![0.3, -0.7, 0.1]; 5]);
        let sims = pairwise_sim_vector(&clones).unwrap();
        assert_eq!(sims.len(), 10);
        assert!(sims.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sim_vector_matches_hand_cosines() {
        let set = set_from(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]);
        let sims = pairwise_sim_vector(&set).unwrap();
        let rt2 = std::f64::consts::FRAC_1_SQRT_2;
        // order (0,1), (0,2), (1,2)
        assert!((sims.values()[0] - rt2).abs() < 1e-12);
        assert!(sims.values()[1].abs() < 1e-12);
        assert!((sims.values()[2] - rt2).abs() < 1e-12);
    }

    #[test]
    fn rsa_self_is_one_and_rsa_is_symmetric() {
        let a = random_set("a", 9, 5, 1);
        let b = random_set("b", 9, 5, 2);
        assert!((rsa(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((rsa(&a, &b).unwrap() - rsa(&b, &a).unwrap()).abs() < 1e-12);
        let small = random_set("c", 4, 5, 3);
        assert!(matches!(
            rsa(&a, &small),
            Err(AnalysisError::SizeMismatch { left: 9, right: 4 })
        ));
    }

    #[test]
    fn rsa_survives_cosine_isometries() {
        let a = random_set("iso", 8, 4, 7);
        let b = random_set("other", 8, 4, 8);
        let reference = rsa(&a, &b).unwrap();

        // doubling is exact in floating point, so ranks cannot move at all
        let doubled = RepresentationSet::new(
            "2a",
            "scaled",
            a.rows().iter().map(|r| Vector::from_vec(r.iter().map(|v| v * 2.0).collect())).collect(),
        )
        .unwrap();
        assert_eq!(rsa(&doubled, &b).unwrap(), reference);

        // Householder reflection: Q = I - 2uu^T for unit u
        let mut u = vec![0.5f64; 4];
        let norm = (u.iter().map(|v| v * v).sum::<f64>()).sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let reflected = RepresentationSet::new(
            "qa",
            "reflected",
            a.rows()
                .iter()
                .map(|r| {
                    let proj: f64 = r.iter().zip(&u).map(|(x, y)| x * y).sum();
                    Vector::from_vec(
                        r.iter().zip(&u).map(|(x, y)| x - 2.0 * proj * y).collect(),
                    )
                })
                .collect(),
        )
        .unwrap();
        assert!((rsa(&reflected, &b).unwrap() - reference).abs() < 1e-9);
    }

    #[test]
    fn rsa_matches_a_brute_force_oracle_at_n4() {
        let a = random_set("bf-a", 4, 3, 11);
        let b = random_set("bf-b", 4, 3, 12);

        // independent oracle: explicit double loop, then pearson on ranks
        let mut sims_a = Vec::new();
        let mut sims_b = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let cos = |x: &Vector, y: &Vector| {
                    let dot: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
                    let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    dot / (nx * ny)
                };
                sims_a.push(cos(a.row(i), a.row(j)));
                sims_b.push(cos(b.row(i), b.row(j)));
            }
        }
        let ranks_a = average_ranks(&sims_a);
        let ranks_b = average_ranks(&sims_b);
        let n = ranks_a.len() as f64;
        let mean_a = ranks_a.iter().sum::<f64>() / n;
        let mean_b = ranks_b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        for (ra, rb) in ranks_a.iter().zip(&ranks_b) {
            cov += (ra - mean_a) * (rb - mean_b);
            var_a += (ra - mean_a) * (ra - mean_a);
            var_b += (rb - mean_b) * (rb - mean_b);
        }
        let oracle = cov / (var_a.sqrt() * var_b.sqrt());
        assert!((rsa(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn rsa_rejects_degenerate_similarity_structure() {
        let constant = set_from(vec![vec![2.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]);
        let other = random_set("ok", 3, 2, 5);
        assert!(matches!(
            rsa(&constant, &other),
            Err(AnalysisError::Stats(StatsError::ZeroVariance))
        ));
    }

    #[test]
    fn nn_overlap_reproduces_the_category_example() {
        // item 0 is the probe; neighbours at 5..15 degrees, distractor at 80
        let space_a = unit_circle(&[0.0, 5.0, 10.0, 15.0, 80.0]); // dog, tiger, lion near
        let space_b = unit_circle(&[0.0, 80.0, 10.0, 15.0, 5.0]); // mouse, tiger, lion near
        let counts = nn_overlap_counts(&space_a, &space_b, 3).unwrap();
        assert_eq!(counts[0], 2);
        assert!(((counts[0] as f64 / 3.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nn_overlap_extremes_and_errors() {
        let a = random_set("nna", 8, 4, 21);
        assert_eq!(nn_overlap(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(nn_overlap(&a, &a, 3).unwrap(), 1.0);

        // disjoint neighbourhood structure at N=6, k=1: pairs (0,1),(2,3),(4,5)
        // in a; pairs (0,2),(1,4),(3,5) in b
        let space_a = unit_circle(&[0.0, 1.0, 90.0, 91.0, 180.0, 181.0]);
        let space_b = unit_circle(&[0.0, 90.0, 1.0, 180.0, 91.0, 181.0]);
        assert_eq!(nn_overlap(&space_a, &space_b, 1).unwrap(), 0.0);

        assert!(matches!(nn_overlap(&a, &a, 0), Err(AnalysisError::BadK { k: 0, n: 8 })));
        assert!(matches!(nn_overlap(&a, &a, 8), Err(AnalysisError::BadK { k: 8, n: 8 })));
        let b = random_set("nnb", 5, 4, 22);
        assert!(matches!(
            nn_overlap(&a, &b, 1),
            Err(AnalysisError::SizeMismatch { left: 8, right: 5 })
        ));
    }

    #[test]
    fn nn_overlap_breaks_ties_by_ascending_index() {
        // three identical candidates: every pairwise cosine ties at 1
        let rows = vec![vec![1.0, 0.0]; 4];
        let set = set_from(rows);
        let nn = k_nearest(set.rows(), 0, 2).unwrap();
        assert_eq!(nn, vec![1, 2]);
        let nn = k_nearest(set.rows(), 2, 2).unwrap();
        assert_eq!(nn, vec![0, 1]);
    }

    #[test]
    fn density_cases() {
        // positively collinear rows pack at exactly 1
        let collinear = set_from(vec![vec![0.3, 0.4], vec![0.6, 0.8], vec![1.2, 1.6]]);
        assert!((density_of_set(&collinear).unwrap() - 1.0).abs() < 1e-12);

        // orthonormal rows do not pack at all
        let ortho = set_from(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(density_of_set(&ortho).unwrap(), 0.0);

        // random unit vectors in high dimension concentrate near zero
        let mut bank = EmbeddingBank::new(512);
        let mut rng = SeedStream::new(31).substream("density-bank").rng();
        for i in 0..300 {
            let row: Vec<f64> = (0..512).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let row: Vec<f64> = row.iter().map(|v| v / norm).collect();
            bank.push(&format!("v{i}"), &row).unwrap();
        }
        let d = density(&bank, 200, 7).unwrap();
        assert!(d.abs() < 0.02, "density {d}");
        assert_eq!(d, density(&bank, 200, 7).unwrap());
        // a sample larger than the bank covers the whole bank
        assert_eq!(density(&bank, 5000, 7).unwrap(), density(&bank, 300, 7).unwrap());
        assert!(matches!(density(&bank, 1, 7), Err(AnalysisError::TooSmall { n: 1 })));
    }

    #[test]
    fn mean_paired_cosine_cases() {
        let a = random_set("mpc", 6, 4, 41);
        assert!((mean_paired_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let negated = RepresentationSet::new(
            "neg",
            "negated",
            a.rows().iter().map(|r| Vector::from_vec(r.iter().map(|v| -v).collect())).collect(),
        )
        .unwrap();
        assert!((mean_paired_cosine(&a, &negated).unwrap() + 1.0).abs() < 1e-12);

        // hand instance: cos pairs 1/sqrt(2) and 0
        let left = set_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let right = set_from(vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
        let expected = std::f64::consts::FRAC_1_SQRT_2 / 2.0;
        assert!((mean_paired_cosine(&left, &right).unwrap() - expected).abs() < 1e-12);

        let b = random_set("mpc-b", 4, 4, 42);
        assert!(matches!(
            mean_paired_cosine(&a, &b),
            Err(AnalysisError::SizeMismatch { left: 6, right: 4 })
        ));
    }

    fn corpus_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_images: 20,
            visual_dim: 12,
            language_dim: 8,
            foil_pairs_per_image: 1,
            vqa_per_image: 1,
            referit_per_image: 1,
            guesswhat_per_image: 1,
            vqa_candidates: 4,
            visual_candidates: 4,
            n_categories: 6,
            samples_per_category: 3,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn foil_pair_perturbation_swaps_twins() {
        let corpus = generate_corpus(&corpus_spec(3)).unwrap();
        let swapped = perturb_inputs(&corpus.foil, PerturbMode::FoilPair, 1).unwrap();
        assert_eq!(swapped.len(), corpus.foil.len());
        for (before, after) in corpus.foil.iter().zip(&swapped) {
            assert_ne!(before.language_id, after.language_id);
            assert_eq!(before.image_id, after.image_id);
            assert_eq!(before.meta_value("pair_id"), after.meta_value("pair_id"));
        }
        // swapping twice restores the original captions
        let restored = perturb_inputs(&swapped, PerturbMode::FoilPair, 1).unwrap();
        for (before, after) in corpus.foil.iter().zip(&restored) {
            assert_eq!(before.language_id, after.language_id);
        }
        // retrieval records carry no pair metadata
        assert!(matches!(
            perturb_inputs(&corpus.vqa, PerturbMode::FoilPair, 1),
            Err(AnalysisError::MissingVariant { .. })
        ));
    }

    #[test]
    fn scrambled_perturbation_needs_the_variant() {
        let corpus = generate_corpus(&corpus_spec(4)).unwrap();
        let scrambled =
            perturb_inputs(&corpus.vqa, PerturbMode::ScrambledLanguage, 1).unwrap();
        for (before, after) in corpus.vqa.iter().zip(&scrambled) {
            assert_eq!(after.language_id, format!("{}#scrambled", before.language_id));
            assert!(corpus.language_bank.contains(&after.language_id));
        }
        let without = generate_corpus(&SyntheticSpec {
            with_scrambled: false,
            ..corpus_spec(4)
        })
        .unwrap();
        assert!(matches!(
            perturb_inputs(&without.vqa, PerturbMode::ScrambledLanguage, 1),
            Err(AnalysisError::MissingVariant { .. })
        ));
    }

    #[test]
    fn mismatch_perturbations_are_derangements() {
        let corpus = generate_corpus(&corpus_spec(5)).unwrap();
        for (mode, keeps_language) in
            [(PerturbMode::MismatchedImage, true), (PerturbMode::MismatchedLanguage, false)]
        {
            let moved = perturb_inputs(&corpus.vqa, mode, 9).unwrap();
            assert_eq!(moved.len(), corpus.vqa.len());
            let mut changed = false;
            for (before, after) in corpus.vqa.iter().zip(&moved) {
                if keeps_language {
                    assert_eq!(before.language_id, after.language_id);
                    assert_ne!(before.image_id, after.image_id);
                } else {
                    assert_eq!(before.image_id, after.image_id);
                    assert_ne!(before.language_id, after.language_id);
                }
                changed = true;
            }
            assert!(changed);
            assert_eq!(moved, perturb_inputs(&corpus.vqa, mode, 9).unwrap());
        }
    }

    #[test]
    fn two_records_mismatch_by_the_unique_swap() {
        let corpus = generate_corpus(&corpus_spec(6)).unwrap();
        let two = &corpus.vqa[..2];
        let moved = perturb_inputs(two, PerturbMode::MismatchedImage, 3).unwrap();
        assert_eq!(moved[0].image_id, two[1].image_id);
        assert_eq!(moved[1].image_id, two[0].image_id);
        assert!(matches!(
            perturb_inputs(&two[..1], PerturbMode::MismatchedImage, 3),
            Err(AnalysisError::TooSmallForDerangement { n: 1 })
        ));
    }

    #[test]
    fn tiny_foil_offsets_barely_move_the_similarity_structure() {
        let corpus = generate_corpus(&SyntheticSpec {
            foil_perturbation_scale: 0.02,
            ..corpus_spec(7)
        })
        .unwrap();
        let dims = EncoderDims { visual: 12, language: 8, projected: 8, hidden: 10 };
        let encoder = initial_encoder(dims, &TrainConfig::with_seed(17)).unwrap();
        let originals: Vec<DatapointRecord> = corpus
            .foil
            .iter()
            .filter(|r| r.label == FoilLabel::Original)
            .cloned()
            .collect();
        let foiled = perturb_inputs(&originals, PerturbMode::FoilPair, 1);
        // originals alone lack their twins, so pair from the full dataset
        assert!(foiled.is_err());
        let swapped = perturb_inputs(&corpus.foil, PerturbMode::FoilPair, 1).unwrap();
        let base = encode_dataset(
            &encoder,
            &corpus.foil,
            &corpus.visual_bank,
            &corpus.language_bank,
            "original",
            "untrained encoder",
        )
        .unwrap();
        let variant = encode_dataset(
            &encoder,
            &swapped,
            &corpus.visual_bank,
            &corpus.language_bank,
            "foiled",
            "untrained encoder",
        )
        .unwrap();
        let rho = rsa(&base, &variant).unwrap();
        assert!(rho > 0.95, "rho {rho}");
    }

    #[test]
    fn category_protocol_builds_aligned_spaces() {
        let corpus = generate_corpus(&corpus_spec(8)).unwrap();
        let dims = EncoderDims { visual: 12, language: 8, projected: 8, hidden: 10 };
        let encoder = initial_encoder(dims, &TrainConfig::with_seed(23)).unwrap();
        let pairing = nn_category_protocol(
            &encoder,
            &corpus.category_language_bank,
            &corpus.category_visual_bank,
        )
        .unwrap();
        assert_eq!(pairing.categories.len(), 6);
        assert_eq!(pairing.hub.len(), 6);
        assert_eq!(pairing.visual.len(), 6);
        assert_eq!(pairing.language.len(), 6);
        assert_eq!(pairing.hub.dim(), 10);
        for k in [1, 2] {
            let overlap = nn_overlap(&pairing.hub, &pairing.visual, k).unwrap();
            assert!((0.0..=1.0).contains(&overlap));
            let overlap = nn_overlap(&pairing.hub, &pairing.language, k).unwrap();
            assert!((0.0..=1.0).contains(&overlap));
        }
    }

    #[test]
    fn single_sample_categories_average_to_the_sample() {
        let corpus = generate_corpus(&SyntheticSpec {
            samples_per_category: 1,
            ..corpus_spec(9)
        })
        .unwrap();
        let dims = EncoderDims { visual: 12, language: 8, projected: 8, hidden: 10 };
        let encoder = initial_encoder(dims, &TrainConfig::with_seed(29)).unwrap();
        let pairing = nn_category_protocol(
            &encoder,
            &corpus.category_language_bank,
            &corpus.category_visual_bank,
        )
        .unwrap();
        for (c, name) in pairing.categories.iter().enumerate() {
            let sample = corpus.category_visual_bank.vector(&format!("{name}/0")).unwrap();
            for (a, b) in pairing.visual.row(c).iter().zip(sample.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn category_protocol_rejects_missing_samples() {
        let mut language = EmbeddingBank::new(3);
        language.push("a", &[1.0, 0.0, 0.0]).unwrap();
        language.push("b", &[0.0, 1.0, 0.0]).unwrap();
        let mut visual = EmbeddingBank::new(4);
        visual.push("a/0", &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let dims = EncoderDims { visual: 4, language: 3, projected: 3, hidden: 5 };
        let encoder = initial_encoder(dims, &TrainConfig::with_seed(1)).unwrap();
        assert!(matches!(
            nn_category_protocol(&encoder, &language, &visual),
            Err(AnalysisError::EmptyCategory { name }) if name == "b"
        ));
    }

    #[test]
    fn csv_emitters_write_labelled_tables() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = RsaMatrix {
            labels: vec!["hub".into(), "visual".into()],
            values: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        };
        let path = dir.path().join("rsa_matrix.csv");
        write_rsa_matrix_csv(&path, &matrix).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "space,hub,visual\nhub,1,0.5\nvisual,0.5,1\n"
        );

        let path = dir.path().join("nn_overlap.csv");
        write_nn_overlap_csv(&path, &[("hub".into(), "visual".into(), 1, 0.25)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "space_a,space_b,k,overlap\nhub,visual,1,0.25\n"
        );

        let path = dir.path().join("density.csv");
        write_density_csv(&path, &[("hub".into(), 0.57)]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "space,density\nhub,0.57\n");
    }

    #[test]
    fn rsa_matrix_is_symmetric_with_unit_diagonal() {
        let a = random_set("ma", 7, 4, 51);
        let b = random_set("mb", 7, 4, 52);
        let c = random_set("mc", 7, 4, 53);
        let matrix = rsa_matrix(&[&a, &b, &c]).unwrap();
        assert_eq!(matrix.labels, vec!["ma", "mb", "mc"]);
        for i in 0..3 {
            assert_eq!(matrix.values[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(matrix.values[i][j], matrix.values[j][i]);
            }
        }
        assert_eq!(matrix.values[0][1], rsa(&a, &b).unwrap());
    }
}
