//! Mini-batch training of the encoder under each objective variant.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{PackedCode, DEFAULT_THRESHOLD};
use crate::data::LabelSet;
use crate::encoder::{layer_dims, Encoder, Sgd, SgdConfig, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::loss::{batch_objective, triplet_losses, LossConfig, Weighting};
use crate::mining::{
    generate_triplets, mine_hard_negatives, mine_semi_hard, MiningStats, WeightedTriplet,
    DEFAULT_CAP_PER_QUERY,
};

/// Training objective and triplet selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// `Σ λ ℓ^γ` with the configured loss settings (γ = 2, order-aware by default).
    Full,
    /// `Σ λ ℓ`
    OrderWeightOnly,
    /// `Σ ℓ²`
    SquaredOnly,
    /// `Σ ℓ`
    TripletPlain,
    /// Plain warmup, then the top-n highest-loss negatives per anchor-positive pair.
    Hnm,
    /// One negative farther than the positive per anchor-positive pair, `Σ ℓ`.
    SemiHard,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Full,
        Method::OrderWeightOnly,
        Method::SquaredOnly,
        Method::TripletPlain,
        Method::Hnm,
        Method::SemiHard,
    ];
    pub const ABLATION: [Method; 4] = [
        Method::Full,
        Method::OrderWeightOnly,
        Method::SquaredOnly,
        Method::TripletPlain,
    ];
    pub const MINING: [Method; 4] = [Method::Full, Method::Hnm, Method::SemiHard, Method::TripletPlain];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::OrderWeightOnly => "order_weight_only",
            Method::SquaredOnly => "squared_only",
            Method::TripletPlain => "triplet_plain",
            Method::Hnm => "hnm",
            Method::SemiHard => "semi_hard",
        }
    }

    /// Effective loss settings; only `Full` takes γ and weighting from `base`.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let with = |gamma, weighting| LossConfig {
            margin: base.margin,
            gamma,
            weighting,
        };
        match self {
            Method::Full => *base,
            Method::OrderWeightOnly => with(1, Weighting::OrderAware),
            Method::SquaredOnly => with(2, Weighting::None),
            Method::TripletPlain | Method::Hnm | Method::SemiHard => with(1, Weighting::None),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnmConfig {
    pub warmup_epochs: usize,
    pub top_n: usize,
}

impl Default for HnmConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            top_n: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    /// Pairs sampled per query during triplet generation; `None` keeps all.
    pub cap_per_query: Option<usize>,
    pub threshold: f64,
    pub hnm: HnmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 100,
            hidden: vec![DEFAULT_HIDDEN],
            sgd: SgdConfig::default(),
            cap_per_query: Some(DEFAULT_CAP_PER_QUERY),
            threshold: DEFAULT_THRESHOLD,
            hnm: HnmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 3 {
            return Err(Error::Config("batch size must be at least 3".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer of width zero".into()));
        }
        if self.cap_per_query == Some(0) {
            return Err(Error::Config("cap_per_query must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0,1)", self.threshold)));
        }
        if self.hnm.top_n == 0 {
            return Err(Error::Config("hnm top_n must be at least 1".into()));
        }
        Ok(())
    }

    /// Also checks settings that only matter to `method`.
    pub fn validate_for(&self, method: Method) -> Result<()> {
        self.validate()?;
        if method == Method::Hnm && self.hnm.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "hnm warmup of {} epochs leaves no mining epoch out of {}",
                self.hnm.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Per-step record for the statistics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub arm: String,
    pub bits: usize,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub triplets: usize,
    pub zero_weight: usize,
    pub fallbacks: usize,
    pub empty_queries: usize,
    pub loss: f64,
    pub active_ratio: f64,
}

pub trait StatsSink: Sync {
    fn record(&self, stats: &StepStats);
}

/// Writes one JSON object per line.
pub struct JsonLinesSink<W: Write + Send>(Mutex<W>);

impl<W: Write + Send> JsonLinesSink<W> {
    pub fn new(w: W) -> Self {
        Self(Mutex::new(w))
    }

    pub fn into_inner(self) -> W {
        self.0.into_inner().unwrap()
    }
}

impl<W: Write + Send> StatsSink for JsonLinesSink<W> {
    fn record(&self, stats: &StepStats) {
        let mut w = self.0.lock().unwrap();
        // the stream is diagnostic; a failed write must not kill training
        if serde_json::to_writer(&mut *w, stats).is_ok() {
            let _ = w.write_all(b"\n");
        }
    }
}

/// What one training run needs to know about itself.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub arm: &'a str,
    pub method: Method,
    pub loss: LossConfig,
    pub bits: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    /// Parameter hash before the first update.
    pub init_hash: String,
    /// Summed batch objective per epoch.
    pub loss_curve: Vec<f64>,
    /// Mean fraction of active triplets per epoch.
    pub active_curve: Vec<f64>,
    pub mining: MiningStats,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    splitmix(splitmix(seed ^ 0x6d69_6e65) ^ ((epoch as u64) << 32 | step as u64))
}

/// Trains a fresh encoder on `features`/`labels` (one row per training item).
pub fn train(
    features: ArrayView2<'_, f64>,
    labels: &[LabelSet],
    run: &RunSpec<'_>,
    cfg: &TrainConfig,
    sink: Option<&dyn StatsSink>,
) -> Result<TrainOutcome> {
    cfg.validate_for(run.method)?;
    let loss_cfg = run.method.loss_config(&run.loss);
    loss_cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: features.nrows(),
            actual: labels.len(),
        });
    }
    if features.nrows() < 3 {
        return Err(Error::DegenerateBatch("fewer than 3 training items".into()));
    }
    if run.bits == 0 {
        return Err(Error::Config("code length must be positive".into()));
    }

    let mut enc = Encoder::random(&layer_dims(features.ncols(), &cfg.hidden, run.bits), run.seed)?;
    let init_hash = enc.param_hash();
    let mut sgd = Sgd::new(cfg.sgd, &enc)?;
    let mut order: Vec<usize> = (0..features.nrows()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(run.seed);
    shuffle_rng.set_stream(1);

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut active_curve = Vec::with_capacity(cfg.epochs);
    let mut mining = MiningStats::default();
    for epoch in 0..cfg.epochs {
        sgd.begin_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut active = Vec::new();
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            if rows.len() < 3 {
                continue;
            }
            let x = features.select(ndarray::Axis(0), rows);
            let batch_labels: Vec<LabelSet> = rows.iter().map(|&i| labels[i].clone()).collect();
            let trace = enc.forward_trace(x.view())?;
            let codes = trace.codes();
            let packed: Vec<PackedCode> = codes
                .rows()
                .into_iter()
                .map(|r| PackedCode::from_relaxed(r.as_slice().unwrap(), cfg.threshold))
                .collect::<Result<_>>()
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            let seed = batch_seed(run.seed, epoch, step);
            let (triplets, stats) = select_triplets(run.method, epoch, codes.view(), &packed, &batch_labels, &loss_cfg, cfg, seed)?;
            let locate = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{} epoch {epoch} step {step}: {msg}", run.arm)),
                other => other,
            };
            let obj = batch_objective(codes.view(), &triplets, &loss_cfg).map_err(locate)?;
            let grads = enc.backward(&trace, obj.grads.view())?;
            sgd.step(&mut enc, &grads).map_err(locate)?;

            epoch_loss += obj.total;
            active.push(obj.active_ratio());
            mining.merge(&stats);
            if let Some(sink) = sink {
                sink.record(&StepStats {
                    arm: run.arm.to_string(),
                    bits: run.bits,
                    seed: run.seed,
                    epoch,
                    step,
                    triplets: stats.triplets,
                    zero_weight: stats.zero_weight,
                    fallbacks: stats.fallbacks,
                    empty_queries: stats.empty_queries,
                    loss: obj.total,
                    active_ratio: obj.active_ratio(),
                });
            }
        }
        loss_curve.push(epoch_loss);
        active_curve.push(if active.is_empty() {
            0.0
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        });
    }
    Ok(TrainOutcome {
        encoder: enc,
        init_hash,
        loss_curve,
        active_curve,
        mining,
    })
}

#[allow(clippy::too_many_arguments)]
fn select_triplets(
    method: Method,
    epoch: usize,
    codes: ArrayView2<'_, f64>,
    packed: &[PackedCode],
    labels: &[LabelSet],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<WeightedTriplet>, MiningStats)> {
    match method {
        Method::Hnm if epoch >= cfg.hnm.warmup_epochs => {
            // mining needs every negative of a pair, so no cap here
            let (all, mut stats) = generate_triplets(packed, labels, None, seed)?;
            let losses = triplet_losses(codes, &all, loss_cfg.margin)?;
            let kept = mine_hard_negatives(&all, &losses, cfg.hnm.top_n)?;
            stats.triplets = kept.len();
            stats.zero_weight = kept.iter().filter(|t| t.weight == 0.0).count();
            Ok((kept, stats))
        }
        Method::SemiHard => {
            let (t, stats) = mine_semi_hard(packed, labels, seed)?;
            Ok((t.into_iter().map(WeightedTriplet::unweighted).collect(), stats))
        }
        _ => generate_triplets(packed, labels, cfg.cap_per_query, seed),
    }
}
