//! Training loop: Adam, the λ schedule, warm-up without mining, per-epoch
//! validation, JSON-lines reports and checkpoints.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{evaluate_bidirectional, recall_at_k, BidirectionalReport};
use crate::experts::{pairwise_cosine_distances, DistanceMatrix, ExpertKind};
use crate::formats::{self, content_lines, fmt_f64, fnv1a64_hex, parse_num};
use crate::margin::{rescale_margins, MarginMatrix, RescaleConfig};
use crate::model::{ForwardState, ModelDims, TwoTowerModel};
use crate::objective::{
    backprop_similarity, full_loss, full_loss_with_similarity_grad, similarity_matrix, ExpertMargins, LossBreakdown,
    LossParams, Mining, MiningCriterion, SimilarityMatrix,
};
use crate::data::Dataset;
use crate::rng::{substream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertToggles {
    pub dse_text: bool,
    pub dse_video: bool,
    pub sse_text: bool,
    pub sse_video: bool,
}

impl ExpertToggles {
    pub const ALL: Self = Self {
        dse_text: true,
        dse_video: true,
        sse_text: true,
        sse_video: true,
    };
    pub const NONE: Self = Self {
        dse_text: false,
        dse_video: false,
        sse_text: false,
        sse_video: false,
    };

    pub fn enabled(&self, kind: ExpertKind) -> bool {
        match kind {
            ExpertKind::DseText => self.dse_text,
            ExpertKind::DseVideo => self.dse_video,
            ExpertKind::SseText => self.sse_text,
            ExpertKind::SseVideo => self.sse_video,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_start_epoch: usize,
    pub lambda_start_value: f64,
    pub lambda_end_epoch: usize,
    pub lambda_end_value: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mining_criterion: MiningCriterion,
    pub experts: ExpertToggles,
    /// Width of the tanh layer in both towers; 0 for linear towers.
    pub hidden_dim: usize,
    pub joint_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.04,
            lambda_start_epoch: 20,
            lambda_start_value: 0.1,
            lambda_end_epoch: 50,
            lambda_end_value: 1.0,
            warmup_epochs: 1,
            epochs: 60,
            batch_size: 64,
            learning_rate: 5e-4,
            seed: 0,
            mining_criterion: MiningCriterion::Combined,
            experts: ExpertToggles::ALL,
            hidden_dim: 16,
            joint_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_train_size: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.alpha.is_finite() {
            return bad(format!("alpha must be finite, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if let Some(n) = dataset_train_size {
            if self.batch_size > n {
                return bad(format!("batch_size {} exceeds {n} training items", self.batch_size));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.lambda_start_epoch == 0 || self.lambda_end_epoch <= self.lambda_start_epoch {
            return bad("need 1 <= lambda_start_epoch < lambda_end_epoch".into());
        }
        for v in [self.lambda_start_value, self.lambda_end_value] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("lambda schedule values must be in (0, 1], got {v}"));
            }
        }
        if self.joint_dim == 0 {
            return bad("joint_dim must be positive".into());
        }
        Ok(())
    }

    /// `train.*` keys and values in a fixed order. The seed is kept out;
    /// it is shared with the data generator.
    pub fn canonical_lines(&self) -> Vec<(String, String)> {
        let e = &self.experts;
        [
            ("alpha", fmt_f64(self.alpha)),
            ("beta", fmt_f64(self.beta)),
            ("lambda_start_epoch", self.lambda_start_epoch.to_string()),
            ("lambda_start_value", fmt_f64(self.lambda_start_value)),
            ("lambda_end_epoch", self.lambda_end_epoch.to_string()),
            ("lambda_end_value", fmt_f64(self.lambda_end_value)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("mining_criterion", self.mining_criterion.as_str().to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("joint_dim", self.joint_dim.to_string()),
            ("experts.dse_text", e.dse_text.to_string()),
            ("experts.dse_video", e.dse_video.to_string()),
            ("experts.sse_text", e.sse_text.to_string()),
            ("experts.sse_video", e.sse_video.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }

    pub fn config_hash(&self) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        for (k, v) in self.canonical_lines() {
            let _ = writeln!(s, "{k} = {v}");
        }
        fnv1a64_hex(s.as_bytes())
    }
}

/// λ for a 1-indexed epoch: 0 before the start epoch, then exponential
/// growth from the start value to the end value, then constant.
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (start, end) = (cfg.lambda_start_epoch, cfg.lambda_end_epoch);
    if epoch < start {
        0.0
    } else if epoch >= end {
        cfg.lambda_end_value
    } else {
        let frac = (epoch - start) as f64 / (end - start) as f64;
        cfg.lambda_start_value * (cfg.lambda_end_value / cfg.lambda_start_value).powf(frac)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam: {n} params, {} grads, state {}",
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(state.t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(state.t as f64);
    for k in 0..n {
        let g = grads[k];
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g;
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// One expert's distances and margins for a batch.
#[derive(Clone, Debug)]
pub struct ExpertBatch {
    pub distances: DistanceMatrix,
    pub margins: MarginMatrix,
}

/// Loss components averaged over an epoch's batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub hard: f64,
    pub dse: f64,
    pub sse: f64,
    pub lambda: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_hard: f64,
    pub loss_dse: f64,
    pub loss_sse: f64,
    #[serde(rename = "t2v_R1")]
    pub t2v_r1: f64,
    #[serde(rename = "t2v_R5")]
    pub t2v_r5: f64,
    #[serde(rename = "t2v_R10")]
    pub t2v_r10: f64,
    #[serde(rename = "t2v_MdR")]
    pub t2v_mdr: f64,
    #[serde(rename = "v2t_R1")]
    pub v2t_r1: f64,
    #[serde(rename = "v2t_R5")]
    pub v2t_r5: f64,
    #[serde(rename = "v2t_R10")]
    pub v2t_r10: f64,
    #[serde(rename = "v2t_MdR")]
    pub v2t_mdr: f64,
    pub rsum: f64,
}

impl EpochReport {
    pub fn new(epoch: usize, loss: &EpochLoss, eval: &BidirectionalReport) -> Result<Self> {
        let r = |ranks: &[usize], k| recall_at_k(ranks, k);
        Ok(Self {
            epoch,
            lambda: loss.lambda,
            loss_total: loss.total,
            loss_hard: loss.hard,
            loss_dse: loss.dse,
            loss_sse: loss.sse,
            t2v_r1: r(&eval.t2v.ranks, 1)?,
            t2v_r5: r(&eval.t2v.ranks, 5)?,
            t2v_r10: r(&eval.t2v.ranks, 10)?,
            t2v_mdr: eval.t2v.mdr,
            v2t_r1: r(&eval.v2t.ranks, 1)?,
            v2t_r5: r(&eval.v2t.ranks, 5)?,
            v2t_r10: r(&eval.v2t.ranks, 10)?,
            v2t_mdr: eval.v2t.mdr,
            rsum: eval.rsum,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields are finite")
    }
}

/// Model, optimizer state and bookkeeping needed to resume or inspect a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TwoTowerModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    /// `CKPT1` text: header fields, then `params`, `adam_m` and `adam_v`
    /// blocks. Each block lists layers in flat-parameter order, one line per
    /// weight row followed by one line for the bias.
    pub fn to_text(&self) -> String {
        let d = self.model.dims();
        let mut out = String::from("CKPT1\n");
        let _ = writeln!(out, "dims {} {} {} {}", d.video_in, d.text_in, d.hidden, d.joint);
        let _ = writeln!(out, "epoch {}", self.epoch);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "config_hash {}", self.config_hash);
        let _ = writeln!(out, "adam_step {}", self.adam.t);
        let shapes = layer_shapes(d);
        for (name, flat) in [
            ("params", self.model.params()),
            ("adam_m", self.adam.m.clone()),
            ("adam_v", self.adam.v.clone()),
        ] {
            out.push_str(name);
            out.push('\n');
            let mut rest = &flat[..];
            for &(fan_in, fan_out) in &shapes {
                for _ in 0..=fan_in {
                    let (row, tail) = rest.split_at(fan_out);
                    let mut line = String::new();
                    formats::push_row(&mut line, row);
                    out.push_str(line.trim_start());
                    out.push('\n');
                    rest = tail;
                }
            }
        }
        out
    }

    pub fn from_text(file: &str, text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(file, 0, format!("unexpected end of file, expected {what}")))
        };
        let (ln, magic) = next("CKPT1 header")?;
        if magic != "CKPT1" {
            return Err(Error::parse(file, ln, "expected CKPT1 header"));
        }
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (ln, line) = next(key)?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(key) {
                return Err(Error::parse(file, ln, format!("expected `{key}`")));
            }
            Ok((ln, toks.map(str::to_string).collect()))
        };
        let (ln, dims) = field("dims")?;
        let dim = |k: usize| parse_num::<usize>(file, ln, dims.get(k).map(String::as_str), "dimension");
        let dims = ModelDims {
            video_in: dim(0)?,
            text_in: dim(1)?,
            hidden: dim(2)?,
            joint: dim(3)?,
        };
        let (ln, v) = field("epoch")?;
        let epoch = parse_num(file, ln, v.first().map(String::as_str), "epoch")?;
        let (ln, v) = field("seed")?;
        let seed = parse_num(file, ln, v.first().map(String::as_str), "seed")?;
        let (ln, v) = field("config_hash")?;
        let config_hash = v
            .first()
            .cloned()
            .ok_or_else(|| Error::parse(file, ln, "missing config hash"))?;
        let (ln, v) = field("adam_step")?;
        let adam_t = parse_num(file, ln, v.first().map(String::as_str), "adam step")?;

        let shapes = layer_shapes(dims);
        let mut blocks = Vec::with_capacity(3);
        for name in ["params", "adam_m", "adam_v"] {
            let (ln, line) = next(name)?;
            if line != name {
                return Err(Error::parse(file, ln, format!("expected `{name}`")));
            }
            let mut flat = Vec::new();
            for &(fan_in, fan_out) in &shapes {
                for _ in 0..=fan_in {
                    let (ln, line) = next("parameter row")?;
                    let row = line
                        .split_whitespace()
                        .map(|t| {
                            t.parse::<f64>()
                                .ok()
                                .filter(|v| v.is_finite())
                                .ok_or_else(|| Error::parse(file, ln, format!("invalid value `{t}`")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if row.len() != fan_out {
                        return Err(Error::parse(
                            file,
                            ln,
                            format!("expected {fan_out} values, found {}", row.len()),
                        ));
                    }
                    flat.extend(row);
                }
            }
            blocks.push(flat);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(Error::parse(file, ln, "trailing content"));
        }
        let mut model = TwoTowerModel::init_params(dims, &mut substream(0, "ckpt"))?;
        model.set_params(&blocks[0])?;
        let adam_v = blocks.pop().unwrap_or_default();
        let adam_m = blocks.pop().unwrap_or_default();
        Ok(Self {
            model,
            adam: AdamState {
                m: adam_m,
                v: adam_v,
                t: adam_t,
            },
            epoch,
            seed,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = formats::read_text(path)?;
        Self::from_text(&path.display().to_string(), &text)
    }
}

fn layer_shapes(d: ModelDims) -> Vec<(usize, usize)> {
    let tower = |fan_in: usize| {
        if d.hidden == 0 {
            vec![(fan_in, d.joint)]
        } else {
            vec![(fan_in, d.hidden), (d.hidden, d.joint)]
        }
    };
    let mut v = tower(d.video_in);
    v.extend(tower(d.text_in));
    v
}

/// Encodes the given items and scores every video against every text.
pub fn similarity_for(model: &TwoTowerModel, pooled: &[Vec<f64>], ds: &Dataset, indices: &[usize]) -> Result<SimilarityMatrix> {
    let vids: Vec<&[f64]> = indices.iter().map(|&k| pooled[k].as_slice()).collect();
    let txts: Vec<&[f64]> = indices.iter().map(|&k| &ds.items[k].text[..]).collect();
    let fwd = model.forward(&vids, &txts)?;
    similarity_matrix(fwd.video_reprs(), fwd.text_reprs())
}

/// Retrieval metrics of `model` over the given items.
pub fn evaluate_model(model: &TwoTowerModel, ds: &Dataset, indices: &[usize], ks: &[usize]) -> Result<BidirectionalReport> {
    let pooled = ds.pooled_video()?;
    evaluate_bidirectional(&similarity_for(model, &pooled, ds, indices)?, ks)
}

/// Owns the mutable model and optimizer for one run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    pooled: Vec<Vec<f64>>,
    rescale: RescaleConfig,
    shuffle: StreamRng,
    pub model: TwoTowerModel,
    pub adam: AdamState,
    /// Last completed epoch.
    pub epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        let dims = ModelDims {
            video_in: data.video_dim(),
            text_in: data.text_dim(),
            hidden: cfg.hidden_dim,
            joint: cfg.joint_dim,
        };
        let model = TwoTowerModel::init_seeded(dims, cfg.seed)?;
        Self::with_model(cfg, data, model)
    }

    pub fn with_model(cfg: TrainConfig, data: &'a Dataset, model: TwoTowerModel) -> Result<Self> {
        cfg.validate(Some(data.train.len()))?;
        model.validate()?;
        let d = model.dims();
        if d.video_in != data.video_dim() || d.text_in != data.text_dim() {
            return Err(Error::ShapeMismatch(format!(
                "model expects inputs {}/{}, dataset has {}/{}",
                d.video_in,
                d.text_in,
                data.video_dim(),
                data.text_dim()
            )));
        }
        let rescale = RescaleConfig::new(cfg.alpha, cfg.beta)?;
        let adam = AdamState::new(model.num_params());
        Ok(Self {
            pooled: data.pooled_video()?,
            shuffle: substream(cfg.seed, "shuffle"),
            cfg,
            data,
            rescale,
            model,
            adam,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn mining_for(&self, epoch: usize) -> Mining {
        if epoch <= self.cfg.warmup_epochs {
            Mining::Mean
        } else {
            Mining::Hardest
        }
    }

    /// Shuffled training batches for the next epoch; batches smaller than
    /// two items are dropped.
    pub fn next_epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order = self.data.train.clone();
        order.shuffle(&mut self.shuffle);
        order
            .chunks(self.cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Distances and margins of every enabled expert on one batch, using
    /// the current model for the dynamic experts.
    pub fn expert_batches(&self, batch: &[usize]) -> Result<Vec<(ExpertKind, ExpertBatch)>> {
        let vids: Vec<&[f64]> = batch.iter().map(|&k| self.pooled[k].as_slice()).collect();
        let txts: Vec<&[f64]> = batch.iter().map(|&k| &self.data.items[k].text[..]).collect();
        let fwd = self.model.forward(&vids, &txts)?;
        self.expert_batches_from(batch, fwd.video_reprs(), fwd.text_reprs(), &ExpertToggles::ALL)
    }

    fn expert_batches_from(
        &self,
        batch: &[usize],
        video_reprs: &[Vec<f64>],
        text_reprs: &[Vec<f64>],
        toggles: &ExpertToggles,
    ) -> Result<Vec<(ExpertKind, ExpertBatch)>> {
        let ids = self.data.ids(batch);
        let mut out = Vec::with_capacity(4);
        for kind in ExpertKind::ALL {
            if !toggles.enabled(kind) {
                continue;
            }
            let distances = match kind {
                ExpertKind::DseText => pairwise_cosine_distances(text_reprs, kind)?,
                ExpertKind::DseVideo => pairwise_cosine_distances(video_reprs, kind)?,
                ExpertKind::SseText => self.data.sse_text.distances(&ids, kind)?,
                ExpertKind::SseVideo => self.data.sse_video.distances(&ids, kind)?,
            };
            let margins = rescale_margins(&distances, &self.rescale);
            out.push((kind, ExpertBatch { distances, margins }));
        }
        Ok(out)
    }

    fn loss_params(&self, epoch: usize, mining: Mining) -> LossParams {
        LossParams {
            alpha: self.cfg.alpha,
            lambda: lambda_schedule(epoch, &self.cfg),
            mining,
            criterion: self.cfg.mining_criterion,
        }
    }

    fn prepare(&self, batch: &[usize]) -> Result<(ForwardState, SimilarityMatrix, ExpertMargins, ExpertMargins)> {
        let vids: Vec<&[f64]> = batch.iter().map(|&k| self.pooled[k].as_slice()).collect();
        let txts: Vec<&[f64]> = batch.iter().map(|&k| &self.data.items[k].text[..]).collect();
        let fwd = self.model.forward(&vids, &txts)?;
        let s = similarity_matrix(fwd.video_reprs(), fwd.text_reprs())?;
        let mut dse = ExpertMargins::none();
        let mut sse = ExpertMargins::none();
        for (kind, eb) in self.expert_batches_from(batch, fwd.video_reprs(), fwd.text_reprs(), &self.cfg.experts)? {
            match kind {
                ExpertKind::DseText => dse.text = Some(eb.margins),
                ExpertKind::DseVideo => dse.video.push(eb.margins),
                ExpertKind::SseText => sse.text = Some(eb.margins),
                ExpertKind::SseVideo => sse.video.push(eb.margins),
            }
        }
        Ok((fwd, s, dse, sse))
    }

    /// Forward, loss and one optimizer step on `batch`.
    pub fn step(&mut self, batch: &[usize], epoch: usize) -> Result<(LossBreakdown, SimilarityMatrix)> {
        let params = self.loss_params(epoch, self.mining_for(epoch));
        let (fwd, s, dse, sse) = self.prepare(batch)?;
        let (loss, ds) = full_loss_with_similarity_grad(&s, &dse, &sse, &params)?;
        let grad = backprop_similarity(&self.model, &fwd, &ds)?;
        let mut flat = self.model.params();
        adam_step(&mut flat, &grad.params(), &mut self.adam, self.cfg.learning_rate)?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters after optimizer step"));
        }
        self.model.set_params(&flat)?;
        Ok((loss, s))
    }

    /// Objective of the current model over the training split in fixed
    /// order, averaged across batches. No parameters change.
    pub fn probe_loss(&self, epoch: usize, mining: Mining) -> Result<f64> {
        let params = self.loss_params(epoch, mining);
        let mut total = 0.0;
        let mut n = 0usize;
        for batch in self.fixed_batches() {
            let (_, s, dse, sse) = self.prepare(&batch)?;
            total += full_loss(&s, &dse, &sse, &params)?.total;
            n += 1;
        }
        Ok(total / n as f64)
    }

    /// Runs the next epoch over all training batches.
    pub fn train_epoch(&mut self) -> Result<EpochLoss> {
        let epoch = self.epoch + 1;
        let batches = self.next_epoch_batches();
        let mut acc = EpochLoss {
            lambda: lambda_schedule(epoch, &self.cfg),
            ..EpochLoss::default()
        };
        for (k, batch) in batches.iter().enumerate() {
            let (loss, _) = self.step(batch, epoch).map_err(|e| Error::Batch {
                batch: k,
                source: Box::new(e),
            })?;
            acc.total += loss.total;
            acc.hard += loss.hard_term;
            acc.dse += loss.dse_term;
            acc.sse += loss.sse_term;
            acc.batches += 1;
        }
        if acc.batches > 0 {
            let n = acc.batches as f64;
            acc.total /= n;
            acc.hard /= n;
            acc.dse /= n;
            acc.sse /= n;
        }
        self.epoch = epoch;
        Ok(acc)
    }

    pub fn evaluate(&self, ks: &[usize]) -> Result<BidirectionalReport> {
        let s = similarity_for(&self.model, &self.pooled, self.data, &self.data.val)?;
        evaluate_bidirectional(&s, ks)
    }

    /// Items of the training split in fixed order, cut into batches.
    pub fn fixed_batches(&self) -> Vec<Vec<usize>> {
        self.data
            .train
            .chunks(self.cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            seed: self.cfg.seed,
            config_hash: self.cfg.config_hash(),
        }
    }
}

pub const REPORT_FILE: &str = "report.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<EpochReport>,
}

/// Trains for `cfg.epochs` epochs from a fresh model.
pub fn run_training(cfg: &TrainConfig, ds: &Dataset, ks: &[usize], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg.clone(), ds)?;
    run_trainer(trainer, ks, out_dir)
}

/// Drives an existing trainer to `epochs`, writing `report.jsonl` and
/// `checkpoint.ckpt` under `out_dir` after every epoch.
pub fn run_trainer(mut trainer: Trainer<'_>, ks: &[usize], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut report_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(REPORT_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(trainer.config().epochs);
    while trainer.epoch < trainer.config().epochs {
        let loss = trainer.train_epoch()?;
        let eval = trainer.evaluate(ks)?;
        let report = EpochReport::new(trainer.epoch, &loss, &eval)?;
        if let (Some((path, w)), Some(dir)) = (report_file.as_mut(), out_dir) {
            writeln!(w, "{}", report.to_json_line()).map_err(|e| Error::io(path.as_path(), e))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        reports.push(report);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::objective::hard_triplet_loss;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn lambda_anchor_points() {
        let c = cfg();
        assert_eq!(lambda_schedule(1, &c), 0.0);
        assert_eq!(lambda_schedule(10, &c), 0.0);
        assert_eq!(lambda_schedule(19, &c), 0.0);
        assert_eq!(lambda_schedule(20, &c), 0.1);
        assert_eq!(lambda_schedule(50, &c), 1.0);
        assert_eq!(lambda_schedule(80, &c), 1.0);
        let mid = 0.1 * (0.5 * 10f64.ln()).exp();
        assert!((lambda_schedule(35, &c) - mid).abs() < 1e-15);
        assert!((lambda_schedule(35, &c) - 0.316228).abs() < 1e-6);
        let seq: Vec<f64> = (1..=70).map(|e| lambda_schedule(e, &c)).collect();
        assert!(seq.windows(2).all(|w| w[0] <= w[1]));
        assert!((lambda_schedule(49, &c) - 1.0).abs() < 0.08);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.02, 1e-3], &mut st, 0.01).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.01).abs() < 1e-7, "{x}");
        }
        assert!(adam_step(&mut p, &[1.0], &mut st, 0.01).is_err());
    }

    #[test]
    fn adam_descends_on_square() {
        // Reference values from a scalar Python recurrence: x = 1, lr = 0.1, g = 2x.
        let expected = [0.9000000005, 0.8004122286917927, 0.70158627294603];
        let mut x = [1.0];
        let mut st = AdamState::new(1);
        let mut prev = 1.0;
        for want in expected {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, 0.1).unwrap();
            assert!(x[0] * x[0] < prev);
            prev = x[0] * x[0];
            assert!((x[0] - want).abs() < 1e-12, "{} vs {want}", x[0]);
        }
    }

    fn tiny_data() -> Dataset {
        generate(&SynthConfig {
            n_items: 40,
            n_concepts: 30,
            latent_dim: 4,
            video_dim: 6,
            text_dim: 5,
            frames_per_video: 2,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            hidden_dim: 4,
            joint_dim: 6,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let ds = tiny_data();
        let mut t = Trainer::new(TrainConfig { learning_rate: 0.0, ..tiny_cfg() }, &ds).unwrap();
        let before = t.model.params();
        t.train_epoch().unwrap();
        assert_eq!(t.model.params(), before);
    }

    #[test]
    fn no_experts_reduces_to_hard_loss() {
        let ds = tiny_data();
        let c = TrainConfig {
            experts: ExpertToggles::NONE,
            beta: 0.0,
            lambda_start_epoch: 1,
            lambda_end_epoch: 2,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(c.clone(), &ds).unwrap();
        for epoch in 1..=3 {
            for batch in t.next_epoch_batches() {
                let mining = t.mining_for(epoch);
                let (loss, s) = t.step(&batch, epoch).unwrap();
                let hard = hard_triplet_loss(&s, c.alpha, mining).unwrap();
                assert!((loss.total - hard.total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warmup_uses_mean_mining() {
        let ds = tiny_data();
        let t = Trainer::new(TrainConfig { warmup_epochs: 2, ..tiny_cfg() }, &ds).unwrap();
        assert_eq!(t.mining_for(1), Mining::Mean);
        assert_eq!(t.mining_for(2), Mining::Mean);
        assert_eq!(t.mining_for(3), Mining::Hardest);
    }

    #[test]
    fn run_is_deterministic_and_writes_reports() {
        let ds = tiny_data();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let out = run_training(&tiny_cfg(), &ds, &[1, 5, 10], Some(d1.path())).unwrap();
        run_training(&tiny_cfg(), &ds, &[1, 5, 10], Some(d2.path())).unwrap();
        assert_eq!(out.reports.len(), 3);
        let r1 = fs::read(d1.path().join(REPORT_FILE)).unwrap();
        let r2 = fs::read(d2.path().join(REPORT_FILE)).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(String::from_utf8(r1).unwrap().lines().count(), 3);
        let c1 = fs::read(d1.path().join(CHECKPOINT_FILE)).unwrap();
        let c2 = fs::read(d2.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(c1, c2);
        let ck = Checkpoint::load(&d1.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck, out.checkpoint);
        assert_eq!(ck.epoch, 3);
    }

    #[test]
    fn zero_epochs_emits_initial_checkpoint_only() {
        let ds = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&TrainConfig { epochs: 0, ..tiny_cfg() }, &ds, &[1], Some(dir.path())).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap(), "");
        let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.epoch, 0);
        assert_eq!(ck.model, TwoTowerModel::init_seeded(ck.model.dims(), 0).unwrap());
    }

    #[test]
    fn checkpoint_text_round_trip_is_exact() {
        for hidden in [0, 3] {
            let model = TwoTowerModel::init_seeded(ModelDims { video_in: 4, text_in: 3, hidden, joint: 2 }, 4).unwrap();
            let n = model.num_params();
            let ck = Checkpoint {
                adam: AdamState {
                    m: (0..n).map(|k| (k as f64).sin() / 3.0).collect(),
                    v: (0..n).map(|k| 1e-9 * k as f64).collect(),
                    t: 17,
                },
                model,
                epoch: 4,
                seed: 99,
                config_hash: "00ff".into(),
            };
            let back = Checkpoint::from_text("ck", &ck.to_text()).unwrap();
            assert_eq!(back, ck);
        }
        assert!(Checkpoint::from_text("ck", "CKPT2\n").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 1, ..cfg() }.validate(None).is_err());
        assert!(TrainConfig { beta: -0.1, ..cfg() }.validate(None).is_err());
        assert!(cfg().validate(Some(10)).is_err());
        assert!(cfg().validate(Some(100)).is_ok());
    }
}
