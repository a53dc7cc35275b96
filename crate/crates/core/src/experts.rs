//! Single-modal supervision experts.
//!
//! Each expert turns per-item representations into a B×B matrix of
//! distances `1 − cos(x_i, x_j)`. Dynamic experts read the live encoder
//! outputs; static experts read frozen embeddings ingested from files.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::formats::{self, decode_emb1, encode_emb1};
use crate::math::{dot, mean_pool, Matrix, Vector, ZERO_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpertKind {
    DseText,
    DseVideo,
    SseText,
    SseVideo,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::DseText,
        ExpertKind::DseVideo,
        ExpertKind::SseText,
        ExpertKind::SseVideo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::DseText => "dse_text",
            ExpertKind::DseVideo => "dse_video",
            ExpertKind::SseText => "sse_text",
            ExpertKind::SseVideo => "sse_video",
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, ExpertKind::DseText | ExpertKind::DseVideo)
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExpertKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown expert `{s}`")))
    }
}

/// Pairwise single-modal distances for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub values: Matrix,
    pub kind: ExpertKind,
}

impl DistanceMatrix {
    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }
}

/// `1 − cos` over every pair; the diagonal is exactly zero.
pub fn pairwise_cosine_distances<R: AsRef<[f64]>>(
    reprs: &[R],
    kind: ExpertKind,
) -> Result<DistanceMatrix> {
    let b = reprs.len();
    if b < 2 {
        return Err(Error::EmptyInput("distance matrix needs at least two items"));
    }
    let dim = reprs[0].as_ref().len();
    let mut norms = Vec::with_capacity(b);
    for r in reprs {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        let n = dot(r, r).sqrt();
        if n < ZERO_NORM_EPS {
            return Err(Error::ZeroNorm);
        }
        norms.push(n);
    }
    let mut values = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i + 1..b {
            let cos = dot(reprs[i].as_ref(), reprs[j].as_ref()) / (norms[i] * norms[j]);
            let d = 1.0 - cos;
            values.set(i, j, d);
            values.set(j, i, d);
        }
    }
    Ok(DistanceMatrix { values, kind })
}

/// Distances between current text-encoder outputs.
pub fn dse_text_distances<R: AsRef<[f64]>>(text_reprs: &[R]) -> Result<DistanceMatrix> {
    pairwise_cosine_distances(text_reprs, ExpertKind::DseText)
}

/// Distances between current video-encoder outputs.
pub fn dse_video_distances<R: AsRef<[f64]>>(video_reprs: &[R]) -> Result<DistanceMatrix> {
    pairwise_cosine_distances(video_reprs, ExpertKind::DseVideo)
}

/// Mean-pools each item's frames, then takes pairwise distances.
pub fn sse_video_distances(frames_per_item: &[Matrix]) -> Result<DistanceMatrix> {
    let pooled = frames_per_item
        .iter()
        .map(mean_pool)
        .collect::<Result<Vec<_>>>()?;
    pairwise_cosine_distances(&pooled, ExpertKind::SseVideo)
}

/// Distances between precomputed text embeddings looked up by id.
pub fn sse_text_distances<S: AsRef<str>>(
    table: &StaticEmbeddingTable,
    batch_ids: &[S],
) -> Result<DistanceMatrix> {
    table.distances(batch_ids, ExpertKind::SseText)
}

/// Frozen per-item embeddings keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticEmbeddingTable {
    ids: Vec<String>,
    embeddings: Vec<Vector>,
    index: HashMap<String, usize>,
    pub source_label: String,
}

impl StaticEmbeddingTable {
    pub fn new(
        ids: Vec<String>,
        embeddings: Vec<Vector>,
        source_label: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        let dim = embeddings.first().map_or(0, Vector::dim);
        let mut index = HashMap::with_capacity(ids.len());
        for (k, (id, e)) in ids.iter().zip(&embeddings).enumerate() {
            if e.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: e.dim(),
                });
            }
            if dot(e, e).sqrt() < ZERO_NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            if index.insert(id.clone(), k).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            embeddings,
            index,
            source_label: source_label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vector::dim)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&Vector> {
        self.index.get(id).map(|&k| &self.embeddings[k])
    }

    pub fn lookup<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<&Vector>> {
        ids.iter()
            .map(|id| {
                let id = id.as_ref();
                self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
            })
            .collect()
    }

    pub fn distances<S: AsRef<str>>(&self, ids: &[S], kind: ExpertKind) -> Result<DistanceMatrix> {
        let vecs = self.lookup(ids)?;
        let slices: Vec<&[f64]> = vecs.iter().map(|v| &v[..]).collect();
        pairwise_cosine_distances(&slices, kind)
    }

    pub fn to_emb1(&self) -> String {
        let rows: Vec<Vec<f64>> = self.embeddings.iter().map(|v| v.to_vec()).collect();
        encode_emb1(&self.ids, &rows)
    }

    pub fn from_emb1(file: &str, text: &str, source_label: impl Into<String>) -> Result<Self> {
        let parsed = decode_emb1(file, text)?;
        let embeddings = parsed
            .rows
            .into_iter()
            .map(Vector::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(parsed.ids, embeddings, source_label)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_text(path, &self.to_emb1())
    }
}

/// Reads an EMB1 file; the file name becomes the source label.
pub fn load_static_embeddings(path: &Path) -> Result<StaticEmbeddingTable> {
    let text = formats::read_text(path)?;
    let label = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    StaticEmbeddingTable::from_emb1(&path.display().to_string(), &text, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HALF_SQRT: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;

    fn assert_valid(d: &DistanceMatrix) {
        let b = d.batch_size();
        for i in 0..b {
            assert!(d.get(i, i).abs() <= 1e-12);
            for j in 0..b {
                let v = d.get(i, j);
                assert!((-1e-12..=2.0 + 1e-12).contains(&v));
                assert!((v - d.get(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dse_examples() {
        for f in [dse_text_distances::<Vec<f64>>, dse_video_distances::<Vec<f64>>] {
            let d = f(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
            assert!(d.values.as_slice().iter().all(|v| v.abs() < 1e-15));
            let d = f(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
            assert_eq!(d.get(0, 1), 1.0);
            assert_eq!(d.get(1, 0), 1.0);
            let d = f(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
            assert!((d.get(0, 1) - HALF_SQRT).abs() < 1e-15);
            assert!((d.get(0, 1) - 0.2928932).abs() < 1e-7);
            assert_valid(&d);
        }
        assert_eq!(
            dse_text_distances(&[vec![1.0, 0.0]]).unwrap_err().to_string(),
            "empty input: distance matrix needs at least two items"
        );
        assert!(matches!(
            dse_text_distances(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn sse_video_examples() {
        let same = Matrix::from_rows(&[[0.3, 0.7], [0.1, 0.2]]).unwrap();
        let d = sse_video_distances(&[same.clone(), same]).unwrap();
        assert!(d.get(0, 1).abs() < 1e-15);

        let a = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let d = sse_video_distances(&[a, b]).unwrap();
        assert_eq!(d.get(0, 1), 1.0);

        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let d = sse_video_distances(&[a, b]).unwrap();
        assert!((d.get(1, 0) - HALF_SQRT).abs() < 1e-15);
        assert_eq!(d.kind, ExpertKind::SseVideo);

        let zero = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let other = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            sse_video_distances(&[zero, other]),
            Err(Error::ZeroNorm)
        ));
    }

    fn table(rows: &[(&str, &[f64])]) -> StaticEmbeddingTable {
        StaticEmbeddingTable::new(
            rows.iter().map(|(id, _)| id.to_string()).collect(),
            rows.iter().map(|(_, v)| Vector::new(v.to_vec()).unwrap()).collect(),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn sse_text_examples() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[1.0, 0.0]), ("c", &[1.0, 1.0])]);
        let d = sse_text_distances(&t, &["a", "b"]).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        let d = sse_text_distances(&t, &["a", "c"]).unwrap();
        assert!((d.get(0, 1) - HALF_SQRT).abs() < 1e-15);
        match sse_text_distances(&t, &["a", "zz"]) {
            Err(Error::UnknownId(id)) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_invariants() {
        let v = |x: &[f64]| Vector::new(x.to_vec()).unwrap();
        assert!(matches!(
            StaticEmbeddingTable::new(vec!["a".into(), "a".into()], vec![v(&[1.0]), v(&[2.0])], ""),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            StaticEmbeddingTable::new(vec!["a".into(), "b".into()], vec![v(&[1.0]), v(&[2.0, 1.0])], ""),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            StaticEmbeddingTable::new(vec!["a".into()], vec![v(&[0.0])], ""),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.emb1");
        std::fs::write(&path, "EMB1 2 3\nx 1 2 3\ny 0.5 0.25 1e-9\n").unwrap();
        let t = load_static_embeddings(&path).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.source_label, "text.emb1");

        std::fs::write(&path, "EMB1 3 3\nx 1 2 3\ny 0.5 0.25 1e-9\n").unwrap();
        assert!(matches!(load_static_embeddings(&path), Err(Error::Parse { .. })));

        let t2 = table(&[("p", &[0.1, 1.0 / 3.0, -7.25e-5]), ("q", &[std::f64::consts::PI, 2.0, 1e300])]);
        t2.save(&path).unwrap();
        let back = load_static_embeddings(&path).unwrap();
        for id in ["p", "q"] {
            let (a, b) = (t2.get(id).unwrap(), back.get(id).unwrap());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    fn batch(b: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), b)
            .prop_filter("nonzero", |rows| rows.iter().all(|r| dot(r, r) > 1e-4))
    }

    proptest! {
        #[test]
        fn distance_matrix_invariants(reprs in batch(5, 3), c in 0.01f64..50.0) {
            let d = dse_video_distances(&reprs).unwrap();
            assert_valid(&d);
            let scaled: Vec<Vec<f64>> = reprs.iter().map(|r| r.iter().map(|x| c * x).collect()).collect();
            let e = dse_video_distances(&scaled).unwrap();
            for (x, y) in d.values.as_slice().iter().zip(e.values.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn single_frame_pooling_identity(reprs in batch(4, 3)) {
            let frames: Vec<Matrix> = reprs.iter().map(|r| Matrix::from_rows(std::slice::from_ref(r)).unwrap()).collect();
            let a = sse_video_distances(&frames).unwrap();
            let b = dse_video_distances(&reprs).unwrap();
            prop_assert_eq!(a.values, b.values);
        }
    }
}
