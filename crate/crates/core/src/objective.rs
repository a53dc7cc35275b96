//! Triplet ranking objectives over a batch similarity matrix.
//!
//! `S[i][j] = cos(r_v^i, r_t^j)`. For anchor `i` the video-direction
//! negatives are `(v_j, t_i)`, read from column `i`; the text-direction
//! negatives are `(v_i, t_j)`, read from row `i`. Every per-negative term is
//! a function of `x = s_neg − s_pos` alone.
//!
//! The combined per-negative term is
//! `[x + α]_+ + λ·soft(x; DSE margins) + (1 − λ)·soft(x; SSE margins)`,
//! where `soft` sums one hinge per expert domain (video, text). Margins are
//! constants here: no gradient flows through expert distances.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::margin::MarginMatrix;
use crate::math::{cosine_similarity_with_grad, dot, Matrix, ZERO_NORM_EPS};
use crate::model::{ForwardState, TwoTowerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
}

impl SimilarityMatrix {
    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn transpose(&self) -> Self {
        Self {
            values: self.values.transpose(),
        }
    }
}

/// Pairwise cosine between every video and every text representation.
pub fn similarity_matrix<V: AsRef<[f64]>, T: AsRef<[f64]>>(
    video_reprs: &[V],
    text_reprs: &[T],
) -> Result<SimilarityMatrix> {
    if video_reprs.len() != text_reprs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} video and {} text representations",
            video_reprs.len(),
            text_reprs.len()
        )));
    }
    if video_reprs.is_empty() {
        return Err(Error::EmptyInput("similarity matrix"));
    }
    let b = video_reprs.len();
    let dim = video_reprs[0].as_ref().len();
    let norms = |reprs: &[&[f64]]| -> Result<Vec<f64>> {
        reprs
            .iter()
            .map(|r| {
                if r.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        got: r.len(),
                    });
                }
                let n = dot(r, r).sqrt();
                if n < ZERO_NORM_EPS {
                    Err(Error::ZeroNorm)
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let vs: Vec<&[f64]> = video_reprs.iter().map(AsRef::as_ref).collect();
    let ts: Vec<&[f64]> = text_reprs.iter().map(AsRef::as_ref).collect();
    let (nv, nt) = (norms(&vs)?, norms(&ts)?);
    let mut values = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            values.set(i, j, dot(vs[i], ts[j]) / (nv[i] * nt[j]));
        }
    }
    Ok(SimilarityMatrix { values })
}

/// `max(0, s_neg − s_pos + margin)`.
#[inline]
pub fn hinge(s_neg: f64, s_pos: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mining {
    /// Largest term over the in-batch negatives.
    Hardest,
    /// Average over all in-batch negatives; used for warm-up.
    Mean,
}

/// What the hardest-negative search maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MiningCriterion {
    /// The full weighted per-negative term.
    #[default]
    Combined,
    /// The hard-margin term only; soft terms are then read at that negative.
    HardOnly,
}

impl MiningCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            MiningCriterion::Combined => "combined",
            MiningCriterion::HardOnly => "hard_only",
        }
    }
}

impl FromStr for MiningCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "hard_only" => Ok(Self::HardOnly),
            _ => Err(Error::Config(format!(
                "mining criterion must be `combined` or `hard_only`, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Negative pair `(v_j, t_i)`.
    Video,
    /// Negative pair `(v_i, t_j)`.
    Text,
}

impl Direction {
    #[inline]
    fn negative(self, i: usize, j: usize) -> (usize, usize) {
        match self {
            Direction::Video => (j, i),
            Direction::Text => (i, j),
        }
    }
}

/// Margin matrices feeding one soft-loss slot (dynamic or static experts).
///
/// Several video experts are averaged into one video hinge. When only one
/// domain is present its hinge is doubled, keeping the slot on the same
/// scale as the two-domain sum. An empty slot contributes zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertMargins {
    pub video: Vec<MarginMatrix>,
    pub text: Option<MarginMatrix>,
}

impl ExpertMargins {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn pair(video: MarginMatrix, text: MarginMatrix) -> Self {
        Self {
            video: vec![video],
            text: Some(text),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty() && self.text.is_none()
    }

    fn domains(&self) -> usize {
        usize::from(!self.video.is_empty()) + usize::from(self.text.is_some())
    }

    fn check(&self, b: usize) -> Result<()> {
        for m in self.video.iter().chain(&self.text) {
            if m.batch_size() != b || m.values.cols() != b {
                return Err(Error::ShapeMismatch(format!(
                    "margin matrix is {}x{}, batch size {b}",
                    m.values.rows(),
                    m.values.cols()
                )));
            }
        }
        Ok(())
    }

    /// Slot value and its derivative in `x`.
    fn eval(&self, x: f64, i: usize, j: usize) -> (f64, f64) {
        let domains = self.domains();
        if domains == 0 {
            return (0.0, 0.0);
        }
        let mut value = 0.0;
        let mut slope = 0.0;
        if !self.video.is_empty() {
            let n = self.video.len() as f64;
            for m in &self.video {
                let arg = x + m.get(i, j);
                if arg > 0.0 {
                    value += arg / n;
                    slope += 1.0 / n;
                }
            }
        }
        if let Some(m) = &self.text {
            let arg = x + m.get(i, j);
            if arg > 0.0 {
                value += arg;
                slope += 1.0;
            }
        }
        let w = 2.0 / domains as f64;
        (w * value, w * slope)
    }
}

/// Soft-margin term for negative `j` of anchor `i`: one hinge with the
/// video-domain margin plus one with the text-domain margin.
pub fn soft_triplet_loss(
    s: &SimilarityMatrix,
    m_video: &MarginMatrix,
    m_text: &MarginMatrix,
    i: usize,
    j: usize,
    direction: Direction,
) -> Result<f64> {
    let b = s.batch_size();
    for idx in [i, j] {
        if idx >= b || idx >= m_video.batch_size() || idx >= m_text.batch_size() {
            return Err(Error::IndexOutOfRange { index: idx, len: b });
        }
    }
    if i == j {
        return Err(Error::InvalidArgument(format!(
            "anchor {i} cannot be its own negative"
        )));
    }
    let (r, c) = direction.negative(i, j);
    let (s_neg, s_pos) = (s.get(r, c), s.get(i, i));
    Ok(hinge(s_neg, s_pos, m_video.get(i, j)) + hinge(s_neg, s_pos, m_text.get(i, j)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub alpha: f64,
    pub lambda: f64,
    pub mining: Mining,
    pub criterion: MiningCriterion,
}

impl LossParams {
    pub fn new(alpha: f64, lambda: f64, mining: Mining) -> Self {
        Self {
            alpha,
            lambda,
            mining,
            criterion: MiningCriterion::Combined,
        }
    }
}

/// Batch loss with its weighted components.
///
/// `total = hard_term + dse_term + sse_term`, each already averaged over
/// anchors and summed over both directions. The hardest-index vectors are
/// empty under [`Mining::Mean`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub hard_term: f64,
    pub dse_term: f64,
    pub sse_term: f64,
    pub lambda_used: f64,
    pub hardest_video: Vec<usize>,
    pub hardest_text: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Term {
    hard: f64,
    dse: f64,
    sse: f64,
    slope: f64,
}

impl Term {
    fn combined(&self) -> f64 {
        self.hard + self.dse + self.sse
    }
}

#[derive(Clone, Copy)]
enum Selection<'a> {
    Mine(Mining, MiningCriterion),
    Fixed { video: &'a [usize], text: &'a [usize] },
}

struct Objective<'a> {
    s: &'a SimilarityMatrix,
    dse: &'a ExpertMargins,
    sse: &'a ExpertMargins,
    alpha: f64,
    lambda: f64,
}

impl Objective<'_> {
    fn new<'a>(
        s: &'a SimilarityMatrix,
        dse: &'a ExpertMargins,
        sse: &'a ExpertMargins,
        alpha: f64,
        lambda: f64,
    ) -> Result<Objective<'a>> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::LambdaOutOfRange(lambda));
        }
        let b = s.batch_size();
        if !s.values.is_square() {
            return Err(Error::NonSquare {
                rows: b,
                cols: s.values.cols(),
            });
        }
        if b < 2 {
            return Err(Error::EmptyInput("triplet loss needs at least two items"));
        }
        dse.check(b)?;
        sse.check(b)?;
        Ok(Objective {
            s,
            dse,
            sse,
            alpha,
            lambda,
        })
    }

    fn term(&self, i: usize, j: usize, dir: Direction) -> Term {
        let (r, c) = dir.negative(i, j);
        let x = self.s.get(r, c) - self.s.get(i, i);
        let hard = relu(x + self.alpha);
        let (dse, dse_slope) = self.dse.eval(x, i, j);
        let (sse, sse_slope) = self.sse.eval(x, i, j);
        let hard_slope = if x + self.alpha > 0.0 { 1.0 } else { 0.0 };
        Term {
            hard,
            dse: self.lambda * dse,
            sse: (1.0 - self.lambda) * sse,
            slope: hard_slope + self.lambda * dse_slope + (1.0 - self.lambda) * sse_slope,
        }
    }

    fn hardest(&self, i: usize, dir: Direction, criterion: MiningCriterion) -> usize {
        let b = self.s.batch_size();
        let mut best: Option<(usize, f64)> = None;
        for j in (0..b).filter(|&j| j != i) {
            let t = self.term(i, j, dir);
            let key = match criterion {
                MiningCriterion::Combined => t.combined(),
                MiningCriterion::HardOnly => t.hard,
            };
            if best.is_none_or(|(_, k)| key > k) {
                best = Some((j, key));
            }
        }
        best.map(|(j, _)| j).unwrap_or(0)
    }

    fn evaluate(&self, selection: Selection<'_>, mut grad: Option<&mut Matrix>) -> Result<LossBreakdown> {
        let b = self.s.batch_size();
        let inv_b = 1.0 / b as f64;
        let (mut hard, mut dse, mut sse, mut total) = (0.0, 0.0, 0.0, 0.0);
        let mut hardest_video = Vec::new();
        let mut hardest_text = Vec::new();
        if let Selection::Fixed { video, text } = selection {
            if video.len() != b || text.len() != b {
                return Err(Error::ShapeMismatch("fixed selection length".into()));
            }
            for (i, &j) in video.iter().chain(text).enumerate() {
                if j >= b || j == i % b {
                    return Err(Error::IndexOutOfRange { index: j, len: b });
                }
            }
        }

        for i in 0..b {
            for dir in [Direction::Video, Direction::Text] {
                let chosen: Vec<(usize, f64)> = match selection {
                    Selection::Mine(Mining::Mean, _) => {
                        let w = 1.0 / (b - 1) as f64;
                        (0..b).filter(|&j| j != i).map(|j| (j, w)).collect()
                    }
                    Selection::Mine(Mining::Hardest, criterion) => {
                        let j = self.hardest(i, dir, criterion);
                        vec![(j, 1.0)]
                    }
                    Selection::Fixed { video, text } => {
                        let j = match dir {
                            Direction::Video => video[i],
                            Direction::Text => text[i],
                        };
                        vec![(j, 1.0)]
                    }
                };
                if !matches!(selection, Selection::Mine(Mining::Mean, _)) {
                    let j = chosen[0].0;
                    match dir {
                        Direction::Video => hardest_video.push(j),
                        Direction::Text => hardest_text.push(j),
                    }
                }
                let mut item = Term::default();
                for &(j, w) in &chosen {
                    let t = self.term(i, j, dir);
                    item.hard += w * t.hard;
                    item.dse += w * t.dse;
                    item.sse += w * t.sse;
                    if let Some(g) = grad.as_deref_mut() {
                        let d = w * inv_b * t.slope;
                        if d != 0.0 {
                            let (r, c) = dir.negative(i, j);
                            g.add_at(r, c, d);
                            g.add_at(i, i, -d);
                        }
                    }
                }
                hard += item.hard;
                dse += item.dse;
                sse += item.sse;
                total += item.combined();
            }
        }
        Ok(LossBreakdown {
            total: total * inv_b,
            hard_term: hard * inv_b,
            dse_term: dse * inv_b,
            sse_term: sse * inv_b,
            lambda_used: self.lambda,
            hardest_video,
            hardest_text,
        })
    }
}

/// Hard-margin triplet loss `(1/B) Σ_i [agg_j l_v(i,j) + agg_j l_t(i,j)]`.
pub fn hard_triplet_loss(s: &SimilarityMatrix, alpha: f64, mining: Mining) -> Result<LossBreakdown> {
    let b = s.batch_size();
    if !s.values.is_square() {
        return Err(Error::NonSquare {
            rows: b,
            cols: s.values.cols(),
        });
    }
    if b < 2 {
        return Err(Error::EmptyInput("triplet loss needs at least two items"));
    }
    let mut total = 0.0;
    let mut hardest_video = Vec::new();
    let mut hardest_text = Vec::new();
    for i in 0..b {
        let pos = s.get(i, i);
        for dir in [Direction::Video, Direction::Text] {
            let losses = (0..b).filter(|&j| j != i).map(|j| {
                let (r, c) = dir.negative(i, j);
                (j, hinge(s.get(r, c), pos, alpha))
            });
            let term = match mining {
                Mining::Mean => losses.map(|(_, l)| l).sum::<f64>() / (b - 1) as f64,
                Mining::Hardest => {
                    let (j, l) = losses.fold((usize::MAX, f64::NEG_INFINITY), |best, cand| {
                        if cand.1 > best.1 {
                            cand
                        } else {
                            best
                        }
                    });
                    match dir {
                        Direction::Video => hardest_video.push(j),
                        Direction::Text => hardest_text.push(j),
                    }
                    l
                }
            };
            total += term;
        }
    }
    let total = total / b as f64;
    Ok(LossBreakdown {
        total,
        hard_term: total,
        dse_term: 0.0,
        sse_term: 0.0,
        lambda_used: 0.0,
        hardest_video,
        hardest_text,
    })
}

/// The full objective with dynamic- and static-expert soft terms.
pub fn full_loss(
    s: &SimilarityMatrix,
    dse: &ExpertMargins,
    sse: &ExpertMargins,
    params: &LossParams,
) -> Result<LossBreakdown> {
    Objective::new(s, dse, sse, params.alpha, params.lambda)?
        .evaluate(Selection::Mine(params.mining, params.criterion), None)
}

/// The full objective evaluated at fixed negatives per anchor and direction.
pub fn full_loss_at(
    s: &SimilarityMatrix,
    dse: &ExpertMargins,
    sse: &ExpertMargins,
    alpha: f64,
    lambda: f64,
    hardest_video: &[usize],
    hardest_text: &[usize],
) -> Result<LossBreakdown> {
    Objective::new(s, dse, sse, alpha, lambda)?.evaluate(
        Selection::Fixed {
            video: hardest_video,
            text: hardest_text,
        },
        None,
    )
}

/// Loss together with `∂L/∂S`.
pub fn full_loss_with_similarity_grad(
    s: &SimilarityMatrix,
    dse: &ExpertMargins,
    sse: &ExpertMargins,
    params: &LossParams,
) -> Result<(LossBreakdown, Matrix)> {
    let b = s.batch_size();
    let mut grad = Matrix::zeros(b, s.values.cols());
    let loss = Objective::new(s, dse, sse, params.alpha, params.lambda)?
        .evaluate(Selection::Mine(params.mining, params.criterion), Some(&mut grad))?;
    Ok((loss, grad))
}

/// Gradient of the full objective w.r.t. every model parameter, holding the
/// margin matrices and the mined negatives fixed.
pub fn full_loss_grad(
    model: &TwoTowerModel,
    fwd: &ForwardState,
    dse: &ExpertMargins,
    sse: &ExpertMargins,
    params: &LossParams,
) -> Result<(LossBreakdown, TwoTowerModel)> {
    let s = similarity_matrix(fwd.video_reprs(), fwd.text_reprs())?;
    let (loss, ds) = full_loss_with_similarity_grad(&s, dse, sse, params)?;
    let grad = backprop_similarity(model, fwd, &ds)?;
    Ok((loss, grad))
}

/// Pushes `∂L/∂S` through the cosine similarities and both towers.
pub fn backprop_similarity(
    model: &TwoTowerModel,
    fwd: &ForwardState,
    ds: &Matrix,
) -> Result<TwoTowerModel> {
    let rv = fwd.video_reprs();
    let rt = fwd.text_reprs();
    let b = rv.len();
    if ds.rows() != b || ds.cols() != rt.len() {
        return Err(Error::ShapeMismatch("similarity gradient does not match batch".into()));
    }
    let dim = rv.first().map_or(0, Vec::len);
    let mut gv = vec![vec![0.0; dim]; b];
    let mut gt = vec![vec![0.0; dim]; b];
    for i in 0..b {
        for j in 0..b {
            let w = ds.get(i, j);
            if w == 0.0 {
                continue;
            }
            let g = cosine_similarity_with_grad(&rv[i], &rt[j])?;
            for (acc, v) in gv[i].iter_mut().zip(&g.grad_a) {
                *acc += w * v;
            }
            for (acc, v) in gt[j].iter_mut().zip(&g.grad_b) {
                *acc += w * v;
            }
        }
    }
    model.backward(fwd, &gv, &gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::cosine_similarity;
    use proptest::prelude::*;

    fn sim(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix {
            values: Matrix::from_rows(rows).unwrap(),
        }
    }

    fn margins(b: usize, vals: impl Fn(usize, usize) -> f64) -> MarginMatrix {
        let mut m = MarginMatrix::constant(b, 0.0);
        for i in 0..b {
            for j in 0..b {
                m.values.set(i, j, vals(i, j));
            }
        }
        m
    }

    #[test]
    fn similarity_examples() {
        let v = [vec![1.0, 2.0], vec![-3.0, 0.5]];
        let s = similarity_matrix(&v, &v).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15 && (s.get(1, 1) - 1.0).abs() < 1e-15);

        let basis = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let s = similarity_matrix(&basis, &basis).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }

        let vids = [vec![0.1, 0.9, -0.3, 0.4], vec![1.0, 0.2, 0.2, -0.8], vec![-0.5, 0.5, 0.7, 0.1]];
        let txts = [vec![0.6, -0.2, 0.3, 0.3], vec![0.0, 1.0, 0.4, -0.4], vec![0.9, 0.9, -0.1, 0.2]];
        let s = similarity_matrix(&vids, &txts).unwrap();
        for (i, v) in vids.iter().enumerate() {
            for (j, t) in txts.iter().enumerate() {
                assert_eq!(s.get(i, j), cosine_similarity(v, t).unwrap());
            }
        }
        assert!(matches!(
            similarity_matrix(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            similarity_matrix(&[vec![1.0, 0.0]], &[vec![1.0, 0.0, 1.0]]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.3, 0.8, 0.05), 0.0);
        assert!((hinge(0.4, 0.3, 0.05) - 0.15).abs() < 1e-15);
        assert_eq!(hinge(0.5, 0.4, -0.2), 0.0);
    }

    /// Enumerates all four hinges of a 2x2 instance by hand.
    #[test]
    fn hard_loss_two_by_two() {
        let s = sim(&[&[0.9, 0.5], &[0.6, 0.8]]);
        let a = 0.05;
        // i=0: v-neg S[1][0]=0.6 vs 0.9; t-neg S[0][1]=0.5 vs 0.9
        // i=1: v-neg S[0][1]=0.5 vs 0.8; t-neg S[1][0]=0.6 vs 0.8
        let expect = (hinge(0.6, 0.9, a) + hinge(0.5, 0.9, a) + hinge(0.5, 0.8, a) + hinge(0.6, 0.8, a)) / 2.0;
        assert_eq!(expect, 0.0);
        for mining in [Mining::Hardest, Mining::Mean] {
            assert_eq!(hard_triplet_loss(&s, a, mining).unwrap().total, expect);
        }
        let a = 0.35;
        let expect = (hinge(0.6, 0.9, a) + hinge(0.5, 0.9, a) + hinge(0.5, 0.8, a) + hinge(0.6, 0.8, a)) / 2.0;
        assert!((expect - 0.125).abs() < 1e-12);
        let h = hard_triplet_loss(&s, a, Mining::Hardest).unwrap().total;
        let m = hard_triplet_loss(&s, a, Mining::Mean).unwrap().total;
        assert!((h - expect).abs() < 1e-15 && (m - expect).abs() < 1e-15);
    }

    #[test]
    fn hard_loss_zero_when_separated() {
        let s = sim(&[&[0.9, 0.1, 0.0], &[0.2, 0.95, 0.3], &[0.1, 0.0, 0.8]]);
        assert_eq!(hard_triplet_loss(&s, 0.05, Mining::Hardest).unwrap().total, 0.0);
    }

    #[test]
    fn soft_examples() {
        let s = sim(&[&[0.7, 0.3, 0.1], &[0.5, 0.6, 0.2], &[0.2, 0.4, 0.9]]);
        let a = 0.25;
        let cm = MarginMatrix::constant(3, a);
        let soft = soft_triplet_loss(&s, &cm, &cm, 0, 1, Direction::Video).unwrap();
        assert!((soft - 2.0 * hinge(0.5, 0.7, a)).abs() < 1e-15);

        // s_neg − s_pos = 0.3 − 0.35 = −0.05 at (i=0, j=1, text direction)
        let s = sim(&[&[0.35, 0.3], &[0.0, 1.0]]);
        let mv = margins(2, |_, _| 0.02);
        let mt = margins(2, |_, _| 0.08);
        let v = soft_triplet_loss(&s, &mv, &mt, 0, 1, Direction::Text).unwrap();
        assert!((v - 0.03).abs() < 1e-12);

        let mlow = margins(2, |_, _| 0.04);
        assert_eq!(soft_triplet_loss(&s, &mlow, &mlow, 0, 1, Direction::Text).unwrap(), 0.0);

        assert!(matches!(
            soft_triplet_loss(&s, &mv, &mt, 0, 5, Direction::Text),
            Err(Error::IndexOutOfRange { index: 5, .. })
        ));
        assert!(soft_triplet_loss(&s, &mv, &mt, 1, 1, Direction::Text).is_err());
    }

    #[test]
    fn lambda_validation() {
        let s = sim(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let e = ExpertMargins::none();
        let p = LossParams::new(0.1, 1.5, Mining::Hardest);
        assert!(matches!(full_loss(&s, &e, &e, &p), Err(Error::LambdaOutOfRange(_))));
    }

    // ---- brute-force oracle -------------------------------------------------

    fn oracle_soft(x: f64, slot: &[&MarginMatrix], i: usize, j: usize) -> f64 {
        slot.iter().map(|m| (x + m.get(i, j)).max(0.0)).sum()
    }

    /// Direct transcription of the combined objective: every (i, j) term is
    /// enumerated, then max or mean is taken per anchor and direction.
    fn oracle_full(
        s: &SimilarityMatrix,
        dse: &[&MarginMatrix],
        sse: &[&MarginMatrix],
        alpha: f64,
        lambda: f64,
        mining: Mining,
    ) -> f64 {
        let b = s.batch_size();
        let mut total = 0.0;
        for i in 0..b {
            let mut v_terms = Vec::new();
            let mut t_terms = Vec::new();
            for j in 0..b {
                if j == i {
                    continue;
                }
                let xv = s.get(j, i) - s.get(i, i);
                let xt = s.get(i, j) - s.get(i, i);
                let f = |x: f64| {
                    (x + alpha).max(0.0) + lambda * oracle_soft(x, dse, i, j) + (1.0 - lambda) * oracle_soft(x, sse, i, j)
                };
                v_terms.push(f(xv));
                t_terms.push(f(xt));
            }
            for terms in [v_terms, t_terms] {
                total += match mining {
                    Mining::Hardest => terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    Mining::Mean => terms.iter().sum::<f64>() / terms.len() as f64,
                };
            }
        }
        total / b as f64
    }

    fn instance(b: usize) -> impl Strategy<Value = (SimilarityMatrix, [MarginMatrix; 4])> {
        let sims = prop::collection::vec(-1.0f64..1.0, b * b);
        let ms = prop::collection::vec(prop::collection::vec(-0.1f64..0.3, b * b), 4);
        (sims, ms).prop_map(move |(sv, ms)| {
            let s = SimilarityMatrix {
                values: Matrix::new(b, b, sv).unwrap(),
            };
            let mk = |v: &Vec<f64>| MarginMatrix {
                values: Matrix::new(b, b, v.clone()).unwrap(),
                mu: 0.05,
                beta: 0.04,
            };
            (s, [mk(&ms[0]), mk(&ms[1]), mk(&ms[2]), mk(&ms[3])])
        })
    }

    #[test]
    fn b3_instance_matches_oracle() {
        let s = sim(&[&[0.7, 0.65, 0.1], &[0.72, 0.6, 0.2], &[0.2, 0.4, 0.5]]);
        let m = |off: f64| margins(3, move |i, j| 0.05 + off * (i as f64 - j as f64));
        let (dv, dt, sv, st) = (m(0.01), m(-0.02), m(0.03), m(0.0));
        let dse = ExpertMargins::pair(dv.clone(), dt.clone());
        let sse = ExpertMargins::pair(sv.clone(), st.clone());
        let got = full_loss(&s, &dse, &sse, &LossParams::new(0.05, 0.3, Mining::Hardest)).unwrap();
        let want = oracle_full(&s, &[&dv, &dt], &[&sv, &st], 0.05, 0.3, Mining::Hardest);
        assert!((got.total - want).abs() < 1e-12, "{} vs {want}", got.total);
        assert!((got.total - (got.hard_term + got.dse_term + got.sse_term)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_oracle_up_to_b6(
            (s, [dv, dt, sv, st]) in (2usize..=6).prop_flat_map(instance),
            lambda in 0.0f64..=1.0,
            alpha in 0.0f64..0.3,
            hardest in any::<bool>(),
        ) {
            let mining = if hardest { Mining::Hardest } else { Mining::Mean };
            let dse = ExpertMargins::pair(dv.clone(), dt.clone());
            let sse = ExpertMargins::pair(sv.clone(), st.clone());
            let got = full_loss(&s, &dse, &sse, &LossParams::new(alpha, lambda, mining)).unwrap();
            let want = oracle_full(&s, &[&dv, &dt], &[&sv, &st], alpha, lambda, mining);
            prop_assert!((got.total - want).abs() < 1e-12);
            prop_assert!(got.total >= 0.0 && got.hard_term >= 0.0 && got.dse_term >= 0.0 && got.sse_term >= 0.0);
        }

        #[test]
        fn lambda_endpoints_ignore_other_slot(
            (s, [dv, dt, sv, st]) in (2usize..=5).prop_flat_map(instance),
            (_, [pv, pt, _, _]) in (2usize..=5).prop_flat_map(instance),
        ) {
            prop_assume!(pv.batch_size() == s.batch_size());
            let base_d = ExpertMargins::pair(dv, dt);
            let base_s = ExpertMargins::pair(sv, st);
            let pert = ExpertMargins::pair(pv, pt);
            for mining in [Mining::Hardest, Mining::Mean] {
                let one = LossParams::new(0.05, 1.0, mining);
                let zero = LossParams::new(0.05, 0.0, mining);
                prop_assert_eq!(
                    full_loss(&s, &base_d, &base_s, &one).unwrap().total,
                    full_loss(&s, &base_d, &pert, &one).unwrap().total
                );
                prop_assert_eq!(
                    full_loss(&s, &base_d, &base_s, &zero).unwrap().total,
                    full_loss(&s, &pert, &base_s, &zero).unwrap().total
                );
            }
        }

        #[test]
        fn constant_margins_collapse_to_three_hard(
            (s, _) in (2usize..=8).prop_flat_map(instance),
            alpha in 0.0f64..0.3,
            lambda in 0.0f64..=1.0,
        ) {
            let b = s.batch_size();
            let c = || ExpertMargins::pair(MarginMatrix::constant(b, alpha), MarginMatrix::constant(b, alpha));
            for mining in [Mining::Hardest, Mining::Mean] {
                let full = full_loss(&s, &c(), &c(), &LossParams::new(alpha, lambda, mining)).unwrap().total;
                let hard = hard_triplet_loss(&s, alpha, mining).unwrap().total;
                prop_assert!((full - 3.0 * hard).abs() < 1e-9);
            }
        }

        #[test]
        fn hardest_dominates_mean(
            (s, [dv, dt, sv, st]) in (2usize..=6).prop_flat_map(instance),
            lambda in 0.0f64..=1.0,
        ) {
            let dse = ExpertMargins::pair(dv, dt);
            let sse = ExpertMargins::pair(sv, st);
            let h = full_loss(&s, &dse, &sse, &LossParams::new(0.05, lambda, Mining::Hardest)).unwrap();
            let m = full_loss(&s, &dse, &sse, &LossParams::new(0.05, lambda, Mining::Mean)).unwrap();
            prop_assert!(h.total >= m.total - 1e-15);
        }

        #[test]
        fn similarity_grad_matches_finite_differences(
            (s, [dv, dt, sv, st]) in (2usize..=4).prop_flat_map(instance),
            lambda in 0.0f64..=1.0,
        ) {
            let dse = ExpertMargins::pair(dv, dt);
            let sse = ExpertMargins::pair(sv, st);
            let p = LossParams::new(0.05, lambda, Mining::Hardest);
            let (loss, ds) = full_loss_with_similarity_grad(&s, &dse, &sse, &p).unwrap();
            let b = s.batch_size();
            let f = |x: &[f64]| {
                let sm = SimilarityMatrix { values: Matrix::new(b, b, x.to_vec()).unwrap() };
                full_loss_at(&sm, &dse, &sse, 0.05, lambda, &loss.hardest_video, &loss.hardest_text).unwrap().total
            };
            prop_assume!(!near_kink(&s, &[&dse, &sse], 0.05, 1e-6));
            // Piecewise linear in S, so central differences are exact away from kinks.
            let fd = crate::math::finite_diff_grad(f, s.values.as_slice(), 1e-7);
            for (a, g) in fd.iter().zip(ds.as_slice()) {
                prop_assert!((a - g).abs() < 1e-6, "fd {a} vs analytic {g}");
            }
        }
    }

    /// True when some hinge argument lies within `eps` of its kink.
    fn near_kink(s: &SimilarityMatrix, slots: &[&ExpertMargins], alpha: f64, eps: f64) -> bool {
        let b = s.batch_size();
        (0..b).any(|i| {
            (0..b).filter(|&j| j != i).any(|j| {
                [s.get(j, i), s.get(i, j)].iter().any(|&neg| {
                    let x = neg - s.get(i, i);
                    std::iter::once(alpha)
                        .chain(slots.iter().flat_map(|e| e.video.iter().chain(&e.text).map(|m| m.get(i, j))))
                        .any(|m| (x + m).abs() < eps)
                })
            })
        })
    }

    #[test]
    fn hard_only_criterion_reads_soft_terms_at_hard_argmax() {
        // Hard term picks j=1 (0.6 > 0.5); soft margins make j=2 larger overall.
        let s = sim(&[&[0.7, 0.6, 0.5], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let big = margins(3, |i, j| if (i, j) == (0, 2) { 0.9 } else { 0.0 });
        let dse = ExpertMargins::pair(big.clone(), big);
        let mut p = LossParams::new(0.2, 1.0, Mining::Hardest);
        let combined = full_loss(&s, &dse, &ExpertMargins::none(), &p).unwrap();
        p.criterion = MiningCriterion::HardOnly;
        let hard_only = full_loss(&s, &dse, &ExpertMargins::none(), &p).unwrap();
        assert_eq!(combined.hardest_text[0], 2);
        assert_eq!(hard_only.hardest_text[0], 1);
        assert!(combined.total > hard_only.total);
    }

    #[test]
    fn ties_pick_smallest_index() {
        let s = sim(&[&[0.5, 0.4, 0.4], &[0.4, 0.5, 0.4], &[0.4, 0.4, 0.5]]);
        let l = hard_triplet_loss(&s, 0.2, Mining::Hardest).unwrap();
        assert_eq!(l.hardest_video, vec![1, 0, 0]);
        let f = full_loss(&s, &ExpertMargins::none(), &ExpertMargins::none(), &LossParams::new(0.2, 0.5, Mining::Hardest)).unwrap();
        assert_eq!(f.hardest_text, vec![1, 0, 0]);
    }

    #[test]
    fn partial_slots_rescale_to_two_domains() {
        let s = sim(&[&[0.5, 0.45], &[0.1, 0.9]]);
        let c = MarginMatrix::constant(2, 0.1);
        let only_video = ExpertMargins { video: vec![c.clone()], text: None };
        let two_video = ExpertMargins { video: vec![c.clone(), c.clone()], text: None };
        let both = ExpertMargins::pair(c.clone(), c);
        let p = LossParams::new(0.1, 1.0, Mining::Hardest);
        let e = ExpertMargins::none();
        let a = full_loss(&s, &only_video, &e, &p).unwrap().total;
        let b = full_loss(&s, &two_video, &e, &p).unwrap().total;
        let c = full_loss(&s, &both, &e, &p).unwrap().total;
        assert!((a - b).abs() < 1e-15 && (a - c).abs() < 1e-15);
    }
}
