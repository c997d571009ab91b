//! Triplet synthesis: resolve visual and audio annotations to canonical
//! classes, pair every mask instance with a same-class audio clip, and split
//! the result into a persisted manifest.

pub mod adapters;
pub mod manifest;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapters::{
    read_audio_annotations, read_coco_instances, read_openimages_masks, read_visual_annotations,
    AnnotationSource,
};
pub use manifest::{read_manifest, write_manifest, ManifestHeader, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ontology::AliasTable;
use crate::types::MaskRLE;

/// One object instance from a segmentation corpus, before label resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVisual {
    pub source_dataset: String,
    pub image_uri: String,
    pub image_size: (usize, usize),
    pub label: String,
    pub mask: MaskRLE,
}

/// One labeled clip from an audio corpus, before label resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAudio {
    pub source_dataset: String,
    pub audio_uri: String,
    pub label: String,
    pub duration_s: f64,
}

/// A malformed source annotation; skipped and counted, never fatal.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationError {
    pub origin: String,
    pub msg: String,
}

impl std::fmt::Display for AnnotationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.origin, self.msg)
    }
}

pub type RawItem<T> = std::result::Result<T, AnnotationError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMaskRecord {
    pub image_uri: String,
    pub mask: MaskRLE,
    pub source_dataset: String,
    pub source_label: String,
    pub canonical_class: String,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClipRecord {
    pub audio_uri: String,
    pub source_dataset: String,
    pub source_label: String,
    pub canonical_class: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSample {
    pub id: String,
    pub image_uri: String,
    pub mask: MaskRLE,
    pub audio_uri: String,
    #[serde(rename = "class")]
    pub canonical_class: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<TripletSample>,
    pub class_counts: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Outcome of a collection pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collected<T> {
    pub records: Vec<T>,
    pub unresolved: usize,
    pub malformed: Vec<AnnotationError>,
}

enum Verdict<T> {
    Keep(T),
    Unresolved,
    Malformed(AnnotationError),
}

fn tally<T>(verdicts: Vec<Verdict<T>>) -> Collected<T> {
    let mut out = Collected {
        records: Vec::new(),
        unresolved: 0,
        malformed: Vec::new(),
    };
    for v in verdicts {
        match v {
            Verdict::Keep(r) => out.records.push(r),
            Verdict::Unresolved => out.unresolved += 1,
            Verdict::Malformed(e) => out.malformed.push(e),
        }
    }
    out
}

/// Keep the instances whose label resolves; one record per instance.
pub fn collect_visual(
    raw: Vec<RawItem<RawVisual>>,
    table: &AliasTable,
    exec: Execution,
) -> Collected<ImageMaskRecord> {
    let verdicts = exec.map(&raw, |item| {
        let r = match item {
            Ok(r) => r,
            Err(e) => return Verdict::Malformed(e.clone()),
        };
        let origin = format!("{}:{}", r.source_dataset, r.image_uri);
        if r.mask.size != [r.image_size.0, r.image_size.1] {
            return Verdict::Malformed(AnnotationError {
                origin,
                msg: format!("mask size {:?} != image size {:?}", r.mask.size, r.image_size),
            });
        }
        let total: usize = r.mask.counts.iter().map(|&c| c as usize).sum();
        if total != r.image_size.0 * r.image_size.1 {
            return Verdict::Malformed(AnnotationError {
                origin,
                msg: format!("run lengths sum to {total}"),
            });
        }
        match table.resolve(&r.source_dataset, &r.label).class() {
            Some(c) => Verdict::Keep(ImageMaskRecord {
                image_uri: r.image_uri.clone(),
                mask: r.mask.clone(),
                source_dataset: r.source_dataset.clone(),
                source_label: r.label.clone(),
                canonical_class: c.to_string(),
                image_size: r.image_size,
            }),
            None => Verdict::Unresolved,
        }
    });
    tally(verdicts)
}

pub fn collect_audio(
    raw: Vec<RawItem<RawAudio>>,
    table: &AliasTable,
    exec: Execution,
) -> Collected<AudioClipRecord> {
    let verdicts = exec.map(&raw, |item| {
        let r = match item {
            Ok(r) => r,
            Err(e) => return Verdict::Malformed(e.clone()),
        };
        if !(r.duration_s.is_finite() && r.duration_s > 0.0) {
            return Verdict::Malformed(AnnotationError {
                origin: format!("{}:{}", r.source_dataset, r.audio_uri),
                msg: format!("non-positive duration {}", r.duration_s),
            });
        }
        match table.resolve(&r.source_dataset, &r.label).class() {
            Some(c) => Verdict::Keep(AudioClipRecord {
                audio_uri: r.audio_uri.clone(),
                source_dataset: r.source_dataset.clone(),
                source_label: r.label.clone(),
                canonical_class: c.to_string(),
                duration_s: r.duration_s,
            }),
            None => Verdict::Unresolved,
        }
    });
    tally(verdicts)
}

/// Pair every visual instance of a class that has audio with one audio clip
/// drawn uniformly (with replacement) from that class.
///
/// Inputs are sorted before sampling, so the result depends only on the
/// record sets and the seed, not on collection order.
pub fn compose_triplets(
    visual: &[ImageMaskRecord],
    audio: &[AudioClipRecord],
    seed: u64,
) -> Result<Vec<TripletSample>> {
    let mut pools: BTreeMap<&str, Vec<&AudioClipRecord>> = BTreeMap::new();
    for a in audio {
        pools.entry(a.canonical_class.as_str()).or_default().push(a);
    }
    for pool in pools.values_mut() {
        pool.sort_by(|x, y| {
            (&x.audio_uri, &x.source_dataset, &x.source_label)
                .cmp(&(&y.audio_uri, &y.source_dataset, &y.source_label))
        });
    }

    let mut vis: Vec<&ImageMaskRecord> = visual
        .iter()
        .filter(|v| pools.contains_key(v.canonical_class.as_str()))
        .collect();
    if vis.is_empty() {
        return Err(Error::EmptyJoin);
    }
    vis.sort_by(|x, y| {
        (&x.image_uri, &x.canonical_class, &x.source_dataset, &x.source_label, &x.mask.counts).cmp(&(
            &y.image_uri,
            &y.canonical_class,
            &y.source_dataset,
            &y.source_label,
            &y.mask.counts,
        ))
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = digits(vis.len());
    Ok(vis
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let pool = &pools[v.canonical_class.as_str()];
            let partner = pool[rng.random_range(0..pool.len())];
            TripletSample {
                id: format!("s{i:0width$}"),
                image_uri: v.image_uri.clone(),
                mask: v.mask.clone(),
                audio_uri: partner.audio_uri.clone(),
                canonical_class: v.canonical_class.clone(),
                split: Split::Train,
            }
        })
        .collect())
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len().max(6)
}

pub fn class_counts(samples: &[TripletSample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.canonical_class.clone()).or_insert(0) += 1;
    }
    counts
}

/// Per-class seeded choice of `round(fraction * n_class)` items, capped so
/// that at least one item of each class stays unchosen. Returns chosen flags.
pub(crate) fn stratified_choice(samples: &[TripletSample], fraction: f64, seed: u64) -> Vec<bool> {
    // A split never empties the training side of a class.
    stratified_pick(samples, seed, |n| ((fraction * n as f64).round() as usize).min(n.saturating_sub(1)))
}

fn stratified_pick(samples: &[TripletSample], seed: u64, quota: impl Fn(usize) -> usize) -> Vec<bool> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.canonical_class.as_str()).or_default().push(i);
    }
    let mut chosen = vec![false; samples.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_class.values_mut() {
        idx.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
        let n = idx.len();
        let k = quota(n).min(n);
        // partial Fisher-Yates
        for j in 0..k {
            let pick = rng.random_range(j..n);
            idx.swap(j, pick);
            chosen[idx[j]] = true;
        }
    }
    chosen
}

/// Per-class random subsample of `round(fraction * n_class)` samples, in
/// manifest order.
pub fn stratified_subsample(samples: &[TripletSample], fraction: f64, seed: u64) -> Vec<TripletSample> {
    let f = fraction.clamp(0.0, 1.0);
    let chosen = stratified_pick(samples, seed, |n| (f * n as f64).round() as usize);
    samples
        .iter()
        .zip(chosen)
        .filter(|(_, c)| *c)
        .map(|(s, _)| s.clone())
        .collect()
}

/// Stratified train/test split.
pub fn split_manifest(samples: Vec<TripletSample>, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let chosen = stratified_choice(&samples, test_fraction, seed);
    let mut samples: Vec<TripletSample> = samples
        .into_iter()
        .zip(chosen)
        .map(|(mut s, test)| {
            s.split = if test { Split::Test } else { Split::Train };
            s
        })
        .collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest::new(samples, seed))
}

impl DatasetManifest {
    pub fn new(samples: Vec<TripletSample>, seed: u64) -> Self {
        let class_counts = class_counts(&samples);
        Self {
            samples,
            class_counts,
            seed,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&TripletSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// A new manifest holding only the samples of one split.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest::new(
            self.samples.iter().filter(|s| s.split == split).cloned().collect(),
            self.seed,
        )
    }

    pub fn filter_classes(&self, keep: impl Fn(&str) -> bool) -> DatasetManifest {
        DatasetManifest::new(
            self.samples
                .iter()
                .filter(|s| keep(&s.canonical_class))
                .cloned()
                .collect(),
            self.seed,
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> Vec<String> {
        self.class_counts.keys().cloned().collect()
    }
}

/// End-to-end: collect both sides, compose, and split.
pub struct SynthesisReport {
    pub manifest: DatasetManifest,
    pub visual_kept: usize,
    pub visual_unresolved: usize,
    pub visual_malformed: usize,
    pub audio_kept: usize,
    pub audio_unresolved: usize,
    pub audio_malformed: usize,
    pub images: usize,
}

pub fn synthesize(
    visual: Vec<RawItem<RawVisual>>,
    audio: Vec<RawItem<RawAudio>>,
    table: &AliasTable,
    test_fraction: f64,
    seed: u64,
    exec: Execution,
) -> Result<SynthesisReport> {
    let v = collect_visual(visual, table, exec);
    let a = collect_audio(audio, table, exec);
    let triplets = compose_triplets(&v.records, &a.records, seed)?;
    let images = triplets
        .iter()
        .map(|t| t.image_uri.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let manifest = split_manifest(triplets, test_fraction, seed)?;
    Ok(SynthesisReport {
        manifest,
        visual_kept: v.records.len(),
        visual_unresolved: v.unresolved,
        visual_malformed: v.malformed.len(),
        audio_kept: a.records.len(),
        audio_unresolved: a.unresolved,
        audio_malformed: a.malformed.len(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{rle_encode, BinaryMask};

    fn table() -> AliasTable {
        AliasTable::parse(
            "dog\tlvis\tdog\n\
             cat\tlvis\tcat\n\
             dog\tvggsound\tdog barking\n\
             dog\tvggsound\tdog baying\n\
             cat\tvggsound\tcat meowing\n",
            "t",
        )
        .unwrap()
    }

    fn raw_vis(img: &str, label: &str, k: usize) -> RawItem<RawVisual> {
        let m = BinaryMask::from_fn(4, 4, |y, x| y * 4 + x == k);
        Ok(RawVisual {
            source_dataset: "lvis".into(),
            image_uri: img.into(),
            image_size: (4, 4),
            label: label.into(),
            mask: rle_encode(&m),
        })
    }

    fn raw_audio(uri: &str, label: &str, dur: f64) -> RawItem<RawAudio> {
        Ok(RawAudio {
            source_dataset: "vggsound".into(),
            audio_uri: uri.into(),
            label: label.into(),
            duration_s: dur,
        })
    }

    fn dog_fixture() -> Vec<RawItem<RawVisual>> {
        vec![
            raw_vis("a.png", "dog", 0),
            raw_vis("a.png", "dog", 1),
            raw_vis("b.png", "dog", 2),
            raw_vis("b.png", "zebra", 3),
            raw_vis("c.png", "dog", 4),
            raw_vis("c.png", "dog", 5),
            raw_vis("c.png", "unicorn", 6),
        ]
    }

    #[test]
    fn collect_visual_counts() {
        let c = collect_visual(dog_fixture(), &table(), Execution::Sequential);
        assert_eq!(c.records.len(), 5);
        assert_eq!(c.unresolved, 2);
        assert!(c.malformed.is_empty());
        assert!(collect_visual(vec![], &table(), Execution::Sequential).records.is_empty());
    }

    #[test]
    fn collect_visual_skips_malformed() {
        let mut bad = match raw_vis("d.png", "dog", 0) {
            Ok(r) => r,
            Err(_) => unreachable!(),
        };
        bad.mask.counts.push(3);
        let mut items = dog_fixture();
        items.push(Ok(bad));
        items.push(Err(AnnotationError {
            origin: "x".into(),
            msg: "polygon".into(),
        }));
        let c = collect_visual(items, &table(), Execution::Parallel);
        assert_eq!(c.records.len(), 5);
        assert_eq!(c.malformed.len(), 2);
    }

    fn audio_fixture() -> Vec<RawItem<RawAudio>> {
        vec![
            raw_audio("d1.wav", "dog barking", 1.0),
            raw_audio("d2.wav", "dog barking", 1.0),
            raw_audio("d3.wav", "Dog_Barking", 2.0),
            raw_audio("d4.wav", "dog baying", 1.0),
            raw_audio("c1.wav", "cat meowing", 1.0),
            raw_audio("c2.wav", "cat meowing", 1.0),
            raw_audio("r1.wav", "rain", 1.0),
        ]
    }

    #[test]
    fn collect_audio_counts() {
        let c = collect_audio(audio_fixture(), &table(), Execution::Sequential);
        assert_eq!(c.records.len(), 6);
        let counts = c.records.iter().fold(BTreeMap::new(), |mut m, r| {
            *m.entry(r.canonical_class.clone()).or_insert(0) += 1;
            m
        });
        assert_eq!(counts, BTreeMap::from([("cat".to_string(), 2), ("dog".to_string(), 4)]));
        assert!(collect_audio(vec![], &table(), Execution::Sequential).records.is_empty());

        let zero = collect_audio(vec![raw_audio("z.wav", "dog barking", 0.0)], &table(), Execution::Sequential);
        assert!(zero.records.is_empty());
        assert_eq!(zero.malformed.len(), 1);
    }

    #[test]
    fn compose_pairs_within_class() {
        let t = table();
        let v = collect_visual(dog_fixture(), &t, Execution::Sequential).records;
        let a = collect_audio(audio_fixture(), &t, Execution::Sequential).records;
        let dog_audio: Vec<&str> = a
            .iter()
            .filter(|r| r.canonical_class == "dog")
            .map(|r| r.audio_uri.as_str())
            .collect();
        let trip = compose_triplets(&v, &a, 7).unwrap();
        assert_eq!(trip.len(), 5);
        for s in &trip {
            assert_eq!(s.canonical_class, "dog");
            assert!(dog_audio.contains(&s.audio_uri.as_str()));
        }
        let ids: std::collections::BTreeSet<_> = trip.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 5);

        // determinism, including under shuffled input order
        let mut v_rev = v.clone();
        v_rev.reverse();
        let mut a_rev = a.clone();
        a_rev.reverse();
        assert_eq!(compose_triplets(&v_rev, &a_rev, 7).unwrap(), trip);
    }

    #[test]
    fn compose_disjoint_classes_is_empty_join() {
        let t = table();
        let v = collect_visual(vec![raw_vis("a.png", "cat", 0)], &t, Execution::Sequential).records;
        let a = collect_audio(vec![raw_audio("d.wav", "dog barking", 1.0)], &t, Execution::Sequential).records;
        assert!(matches!(compose_triplets(&v, &a, 0), Err(Error::EmptyJoin)));
    }

    fn balanced(n_per: usize, classes: &[&str]) -> Vec<TripletSample> {
        let mut out = Vec::new();
        for c in classes {
            for i in 0..n_per {
                out.push(TripletSample {
                    id: format!("{c}{i:04}"),
                    image_uri: format!("{c}{i}.png"),
                    mask: MaskRLE { size: [1, 1], counts: vec![0, 1] },
                    audio_uri: format!("{c}.wav"),
                    canonical_class: c.to_string(),
                    split: Split::Train,
                });
            }
        }
        out
    }

    #[test]
    fn stratified_split_arithmetic() {
        let m = split_manifest(balanced(50, &["cat", "dog"]), 0.1, 3).unwrap();
        let test = m.split(Split::Test);
        assert_eq!(test.len(), 10);
        assert_eq!(m.split(Split::Train).len(), 90);
        assert_eq!(test.iter().filter(|s| s.canonical_class == "cat").count(), 5);
        assert_eq!(m.class_counts.values().sum::<usize>(), m.len());

        let one = split_manifest(balanced(1, &["cat"]), 0.1, 3).unwrap();
        assert_eq!(one.split(Split::Train).len(), 1);
        assert_eq!(one.split(Split::Test).len(), 0);

        assert!(split_manifest(balanced(2, &["cat"]), 0.0, 3).is_err());
        assert!(split_manifest(balanced(2, &["cat"]), 1.0, 3).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_manifest(balanced(30, &["a", "b", "c"]), 0.25, 11).unwrap();
        let b = split_manifest(balanced(30, &["a", "b", "c"]), 0.25, 11).unwrap();
        assert_eq!(a, b);
        let train: std::collections::BTreeSet<_> = a.split(Split::Train).iter().map(|s| s.id.clone()).collect();
        let test: std::collections::BTreeSet<_> = a.split(Split::Test).iter().map(|s| s.id.clone()).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 90);
    }

    #[test]
    fn paper_scale_test_ratio() {
        // 5,000 held out of 60,000 composed triplets.
        let ratio: f64 = 5_000.0 / 60_000.0;
        assert!((ratio - 0.0833).abs() < 1e-4);
    }
}
