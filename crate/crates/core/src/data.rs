//! Synthetic cross-modal datasets with planted semantic duplicates.
//!
//! Each item belongs to a concept with latent `z ~ N(0, I_m)`. Video frames
//! are `A_v z + noise_video·ε`, text features `A_t z + noise_text·ε`, with
//! fixed random observation maps. A fraction `duplicate_rate` of items
//! shares its concept with at least one other item, so random in-batch
//! negatives are sometimes semantically equivalent to the anchor.
//!
//! On disk a dataset is a directory of FRM1/EMB1 files, a label file and a
//! `MANIFEST1` listing each file's role and FNV-1a checksum.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::experts::StaticEmbeddingTable;
use crate::formats::{self, content_lines, decode_emb1, decode_frm1, encode_emb1, encode_frm1, fnv1a64_hex, parse_num};
use crate::math::{mean_pool, Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_concepts: usize,
    pub latent_dim: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub frames_per_video: usize,
    pub noise_video: f64,
    pub noise_text: f64,
    /// Extra noise on the static text table, standing in for an imperfect
    /// external sentence encoder.
    pub sse_text_noise: f64,
    pub duplicate_rate: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 512,
            n_concepts: 384,
            latent_dim: 8,
            video_dim: 16,
            text_dim: 12,
            frames_per_video: 4,
            noise_video: 1.0,
            noise_text: 1.0,
            sse_text_noise: 0.2,
            duplicate_rate: 0.5,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_items < 3 {
            return bad(format!("n_items must be >= 3, got {}", self.n_items));
        }
        if self.n_concepts == 0 || self.n_concepts > self.n_items {
            return bad(format!(
                "n_concepts must be in [1, n_items={}], got {}",
                self.n_items, self.n_concepts
            ));
        }
        for (name, d) in [
            ("latent_dim", self.latent_dim),
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("frames_per_video", self.frames_per_video),
        ] {
            if d == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("noise_video", self.noise_video),
            ("noise_text", self.noise_text),
            ("sse_text_noise", self.sse_text_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return bad(format!("duplicate_rate must be in [0, 1], got {}", self.duplicate_rate));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        let (train, val) = self.split_sizes();
        if train < 2 || val < 1 {
            return bad(format!("split leaves {train} train / {val} val items"));
        }
        self.concept_plan().map(|_| ())
    }

    fn split_sizes(&self) -> (usize, usize) {
        let val = (self.val_fraction * self.n_items as f64).round() as usize;
        (self.n_items - val, val)
    }

    /// (number of items in shared concepts, number of shared concepts).
    fn concept_plan(&self) -> Result<(usize, usize)> {
        let n = self.n_items;
        let target = self.duplicate_rate * n as f64;
        let mut n_dup = target.round() as usize;
        if n_dup == 1 {
            n_dup = if target >= 1.0 { 2 } else { 0 };
        }
        let n_single = n - n_dup;
        if self.n_concepts < n_single + usize::from(n_dup > 0) {
            return Err(Error::Config(format!(
                "{} concepts cannot give {n_single} singleton items plus {n_dup} duplicated items",
                self.n_concepts
            )));
        }
        let groups = (self.n_concepts - n_single).min(n_dup / 2);
        Ok((n_dup, groups))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub concept: usize,
    /// `T × D_v` frame-level video features.
    pub frames: Matrix,
    pub text: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    /// Mean-pooled frames per item.
    pub sse_video: StaticEmbeddingTable,
    pub sse_text: StaticEmbeddingTable,
    /// Indices into `items`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn video_dim(&self) -> usize {
        self.items[0].frames.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.items[0].text.dim()
    }

    pub fn ids(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&k| self.items[k].id.clone()).collect()
    }

    pub fn pooled_video(&self) -> Result<Vec<Vec<f64>>> {
        self.items
            .iter()
            .map(|it| mean_pool(&it.frames).map(Vector::into_inner))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (k, it) in self.items.iter().enumerate() {
            if seen.insert(it.id.as_str(), k).is_some() {
                return Err(Error::DuplicateId(it.id.clone()));
            }
            if self.sse_video.get(&it.id).is_none() || self.sse_text.get(&it.id).is_none() {
                return Err(Error::UnknownId(it.id.clone()));
            }
        }
        let mut split = vec![0u8; self.items.len()];
        for &k in self.train.iter().chain(&self.val) {
            match split.get_mut(k) {
                Some(c) => *c += 1,
                None => return Err(Error::IndexOutOfRange { index: k, len: self.items.len() }),
            }
        }
        if let Some(k) = split.iter().position(|&c| c != 1) {
            return Err(Error::Config(format!(
                "item `{}` must be in exactly one split",
                self.items[k].id
            )));
        }
        Ok(())
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = scale * rng.sample::<f64, _>(StandardNormal);
    }
    m
}

/// Draws a dataset from the `data` sub-stream of `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = crate::rng::substream(cfg.seed, "data");
    let m = cfg.latent_dim;
    let scale = 1.0 / (m as f64).sqrt();
    // m × D so that an observation is z · A.
    let a_video = gaussian_matrix(m, cfg.video_dim, scale, &mut rng);
    let a_text = gaussian_matrix(m, cfg.text_dim, scale, &mut rng);
    let latents: Vec<Vec<f64>> = (0..cfg.n_concepts)
        .map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let (n_dup, groups) = cfg.concept_plan()?;
    let n_single = cfg.n_items - n_dup;
    let mut labels: Vec<usize> = (0..n_single).collect();
    labels.extend((0..n_dup).map(|k| n_single + k % groups.max(1)));
    labels.shuffle(&mut rng);

    let mut items = Vec::with_capacity(cfg.n_items);
    for (k, &concept) in labels.iter().enumerate() {
        let clean_v = a_video.vec_mul(&latents[concept]);
        let clean_t = a_text.vec_mul(&latents[concept]);
        let mut frames = Matrix::zeros(cfg.frames_per_video, cfg.video_dim);
        for f in 0..cfg.frames_per_video {
            for (o, c) in frames.row_mut(f).iter_mut().zip(&clean_v) {
                *o = c + cfg.noise_video * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let text: Vec<f64> = clean_t
            .iter()
            .map(|c| c + cfg.noise_text * rng.sample::<f64, _>(StandardNormal))
            .collect();
        items.push(Item {
            id: format!("item{k:05}"),
            concept,
            frames,
            text: Vector::new(text)?,
        });
    }

    let ids: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
    let pooled = items
        .iter()
        .map(|it| mean_pool(&it.frames))
        .collect::<Result<Vec<_>>>()?;
    let sse_video = StaticEmbeddingTable::new(ids.clone(), pooled, "sse_video")?;
    let sse_text_rows = items
        .iter()
        .map(|it| {
            Vector::new(
                it.text
                    .iter()
                    .map(|v| v + cfg.sse_text_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let sse_text = StaticEmbeddingTable::new(ids, sse_text_rows, "sse_text")?;

    let (n_train, _) = cfg.split_sizes();
    let ds = Dataset {
        items,
        sse_video,
        sse_text,
        train: (0..n_train).collect(),
        val: (n_train..cfg.n_items).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// For every item id, the other ids sharing its concept.
pub fn ground_truth_equivalents(ds: &Dataset) -> BTreeMap<String, BTreeSet<String>> {
    let mut by_concept: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for it in &ds.items {
        by_concept.entry(it.concept).or_default().push(&it.id);
    }
    ds.items
        .iter()
        .map(|it| {
            let others = by_concept[&it.concept]
                .iter()
                .filter(|&&id| id != it.id)
                .map(|id| id.to_string())
                .collect();
            (it.id.clone(), others)
        })
        .collect()
}

/// Fraction of items sharing their concept with another item.
pub fn realized_duplicate_rate(ds: &Dataset) -> f64 {
    let eq = ground_truth_equivalents(ds);
    eq.values().filter(|s| !s.is_empty()).count() as f64 / ds.items.len() as f64
}

pub const MANIFEST_FILE: &str = "manifest.txt";

const FILES: [(&str, &str); 5] = [
    ("frames", "frames.frm1"),
    ("text", "text.emb1"),
    ("sse_video", "sse_video.emb1"),
    ("sse_text", "sse_text.emb1"),
    ("labels", "labels.txt"),
];

fn encode_labels(ds: &Dataset) -> String {
    let mut split = vec!["train"; ds.items.len()];
    for &k in &ds.val {
        split[k] = "val";
    }
    let mut out = format!("LBL1 {}\n", ds.items.len());
    for (it, s) in ds.items.iter().zip(split) {
        let _ = writeln!(out, "{} {} {}", it.id, it.concept, s);
    }
    out
}

fn decode_labels(file: &str, text: &str) -> Result<Vec<(String, usize, bool)>> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(file, 1, "missing LBL1 header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("LBL1") {
        return Err(Error::parse(file, hl, "expected `LBL1 <N>` header"));
    }
    let n: usize = parse_num(file, hl, toks.next(), "count")?;
    let mut out = Vec::with_capacity(n);
    let mut last = hl;
    for (ln, line) in lines {
        last = ln;
        let mut toks = line.split_whitespace();
        let id = toks.next().unwrap_or_default().to_string();
        let concept: usize = parse_num(file, ln, toks.next(), "concept")?;
        let is_val = match toks.next() {
            Some("train") => false,
            Some("val") => true,
            other => {
                return Err(Error::parse(file, ln, format!("bad split `{}`", other.unwrap_or(""))))
            }
        };
        out.push((id, concept, is_val));
    }
    if out.len() != n {
        return Err(Error::parse(file, last, format!("header declares {n} rows, found {}", out.len())));
    }
    Ok(out)
}

/// Writes all data files and a checksummed manifest into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<String> = ds.items.iter().map(|it| it.id.clone()).collect();
    let frames: Vec<Matrix> = ds.items.iter().map(|it| it.frames.clone()).collect();
    let text: Vec<Vec<f64>> = ds.items.iter().map(|it| it.text.to_vec()).collect();
    let contents = [
        encode_frm1(&ids, &frames),
        encode_emb1(&ids, &text),
        ds.sse_video.to_emb1(),
        ds.sse_text.to_emb1(),
        encode_labels(ds),
    ];
    let mut manifest = String::from("MANIFEST1\n");
    for ((role, name), body) in FILES.iter().zip(&contents) {
        formats::write_text(&dir.join(name), body)?;
        let _ = writeln!(manifest, "{role} {name} {}", fnv1a64_hex(body.as_bytes()));
    }
    formats::write_text(&dir.join(MANIFEST_FILE), &manifest)
}

fn read_manifest(dir: &Path) -> Result<HashMap<String, (String, String)>> {
    let path = dir.join(MANIFEST_FILE);
    let label = path.display().to_string();
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::parse(&label, 0, format!("cannot read manifest: {e}")))?;
    let mut lines = content_lines(&text);
    match lines.next() {
        Some((_, "MANIFEST1")) => {}
        Some((ln, _)) => return Err(Error::parse(&label, ln, "expected MANIFEST1 header")),
        None => return Err(Error::parse(&label, 1, "empty manifest")),
    }
    let mut entries = HashMap::new();
    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [role, name, sum] = toks[..] else {
            return Err(Error::parse(&label, ln, "expected `<role> <file> <checksum>`"));
        };
        if name.contains('/') || name.contains('\\') {
            return Err(Error::parse(&label, ln, "file names must be relative to the dataset directory"));
        }
        entries.insert(role.to_string(), (name.to_string(), sum.to_string()));
    }
    Ok(entries)
}

/// Reads a dataset written by [`write_dataset`], verifying every checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut bodies = HashMap::new();
    for (role, _) in FILES {
        let (name, sum) = manifest.get(role).ok_or_else(|| {
            Error::parse(MANIFEST_FILE, 0, format!("manifest lacks role `{role}`"))
        })?;
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = fnv1a64_hex(&bytes);
        if &actual != sum {
            return Err(Error::Checksum {
                file: name.clone(),
                expected: sum.clone(),
                actual,
            });
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::parse(name.as_str(), 0, "file is not UTF-8"))?;
        bodies.insert(role, (name.clone(), text));
    }
    let body = |role: &str| &bodies[role];

    let (name, text) = body("labels");
    let labels = decode_labels(name, text)?;
    let (name, text) = body("frames");
    let frames = decode_frm1(name, text)?;
    let (name, text) = body("text");
    let texts = decode_emb1(name, text)?;
    let (name, text) = body("sse_video");
    let sse_video = StaticEmbeddingTable::from_emb1(name, text, "sse_video")?;
    let (name, text) = body("sse_text");
    let sse_text = StaticEmbeddingTable::from_emb1(name, text, "sse_text")?;

    let frame_index: HashMap<&str, usize> =
        frames.ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let text_index: HashMap<&str, usize> =
        texts.ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut items = Vec::with_capacity(labels.len());
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, (id, concept, is_val)) in labels.into_iter().enumerate() {
        let f = *frame_index.get(id.as_str()).ok_or_else(|| Error::UnknownId(id.clone()))?;
        let t = *text_index.get(id.as_str()).ok_or_else(|| Error::UnknownId(id.clone()))?;
        if is_val {
            val.push(k);
        } else {
            train.push(k);
        }
        items.push(Item {
            frames: frames.frames[f].clone(),
            text: Vector::new(texts.rows[t].clone())?,
            id,
            concept,
        });
    }
    if items.len() != frames.ids.len() || items.len() != texts.ids.len() {
        return Err(Error::Config("label, frame and text files list different items".into()));
    }
    let ds = Dataset {
        items,
        sse_video,
        sse_text,
        train,
        val,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::pairwise_cosine_distances;
    use crate::experts::ExpertKind;

    fn small(rho: f64, n_items: usize, n_concepts: usize) -> SynthConfig {
        SynthConfig {
            n_items,
            n_concepts,
            latent_dim: 4,
            video_dim: 6,
            text_dim: 5,
            frames_per_video: 3,
            duplicate_rate: rho,
            val_fraction: 0.25,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn no_duplicates_means_empty_equivalents() {
        let ds = generate(&small(0.0, 20, 20)).unwrap();
        assert!(ground_truth_equivalents(&ds).values().all(BTreeSet::is_empty));
    }

    #[test]
    fn full_duplication_pairs_every_item() {
        let ds = generate(&small(1.0, 20, 10)).unwrap();
        let eq = ground_truth_equivalents(&ds);
        assert!(eq.values().all(|s| s.len() == 1));
        for (id, others) in &eq {
            let other = others.iter().next().unwrap();
            assert!(eq[other].contains(id));
        }
    }

    #[test]
    fn two_items_one_concept() {
        let mut ds = generate(&small(0.0, 3, 3)).unwrap();
        ds.items.truncate(2);
        ds.items[1].concept = ds.items[0].concept;
        let eq = ground_truth_equivalents(&ds);
        assert_eq!(eq["item00000"], BTreeSet::from(["item00001".to_string()]));
        assert_eq!(eq["item00001"], BTreeSet::from(["item00000".to_string()]));
    }

    #[test]
    fn equivalents_match_brute_force() {
        let ds = generate(&small(0.6, 40, 30)).unwrap();
        let eq = ground_truth_equivalents(&ds);
        for a in &ds.items {
            let want: BTreeSet<String> = ds
                .items
                .iter()
                .filter(|b| b.id != a.id && b.concept == a.concept)
                .map(|b| b.id.clone())
                .collect();
            assert_eq!(eq[&a.id], want);
        }
    }

    #[test]
    fn realized_rate_within_one_item() {
        for (rho, n, c) in [(0.5, 512, 384), (0.3, 50, 45), (0.03, 40, 40), (0.9, 31, 20), (0.02, 40, 40)] {
            let ds = generate(&small(rho, n, c)).unwrap();
            let r = realized_duplicate_rate(&ds);
            assert!((r - rho).abs() <= 1.0 / n as f64 + 1e-12, "rho={rho} got {r}");
        }
    }

    #[test]
    fn noiseless_separation() {
        let mut cfg = small(0.5, 24, 18);
        cfg.noise_video = 0.0;
        cfg.noise_text = 0.0;
        let ds = generate(&cfg).unwrap();
        let pooled = ds.pooled_video().unwrap();
        let d = pairwise_cosine_distances(&pooled, ExpertKind::SseVideo).unwrap();
        let mut min_cross = f64::INFINITY;
        for i in 0..ds.items.len() {
            for j in 0..ds.items.len() {
                if i == j {
                    continue;
                }
                if ds.items[i].concept == ds.items[j].concept {
                    assert!(d.get(i, j).abs() < 1e-12);
                } else {
                    min_cross = min_cross.min(d.get(i, j));
                }
            }
        }
        assert!(min_cross > 1e-3, "{min_cross}");
    }

    #[test]
    fn config_errors() {
        assert!(matches!(generate(&small(0.0, 20, 10)), Err(Error::Config(_))));
        assert!(matches!(generate(&small(1.5, 20, 10)), Err(Error::Config(_))));
        assert!(matches!(generate(&small(0.5, 20, 30)), Err(Error::Config(_))));
        let mut cfg = small(0.5, 20, 15);
        cfg.noise_text = -1.0;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(0.5, 16, 12)).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);

        let other = tempfile::tempdir().unwrap();
        write_dataset(&generate(&small(0.5, 16, 12)).unwrap(), other.path()).unwrap();
        for (_, name) in FILES.iter().chain([&("m", MANIFEST_FILE)]) {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(other.path().join(name)).unwrap();
            assert_eq!(fnv1a64_hex(&a), fnv1a64_hex(&b), "{name}");
        }
    }

    #[test]
    fn missing_manifest_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { .. })));

        let ds = generate(&small(0.5, 16, 12)).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("text.emb1");
        let mut bytes = fs::read(&path).unwrap();
        let k = bytes.len() / 2;
        bytes[k] = if bytes[k] == b'1' { b'2' } else { b'1' };
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
    }
}
