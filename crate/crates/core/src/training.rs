//! Mini-batch training shared by both pipelines: encoder-plus-heads
//! training, frozen-embedding extraction, and resampled ensemble heads.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamW, AutodiffError, Graph, NodeId, ParamCheckpoint, ParamStore, Tensor};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::heads::Mlp;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub k: usize,
    pub resample_fraction: f64,
    pub hidden: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            k: 5,
            resample_fraction: 0.2,
            hidden: 64,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k < 2 {
            return Err(TrainError::Config(format!("ensemble needs K >= 2, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.resample_fraction) {
            return Err(TrainError::Config(format!(
                "resample_fraction {} outside [0, 1]",
                self.resample_fraction
            )));
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// SplitMix64 step: decorrelated child seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed-length input windows stored row-major, one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSet {
    pub seq_len: usize,
    pub input_dim: usize,
    pub inputs: Vec<f32>,
}

impl SequenceSet {
    pub fn new(seq_len: usize, input_dim: usize) -> Self {
        Self {
            seq_len,
            input_dim,
            inputs: Vec::new(),
        }
    }

    pub fn push(&mut self, window: &[f64]) {
        assert_eq!(window.len(), self.seq_len * self.input_dim, "window size mismatch");
        self.inputs.extend(window.iter().map(|&v| v as f32));
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / (self.seq_len * self.input_dim).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `[idx.len()·seq_len, input_dim]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let w = self.seq_len * self.input_dim;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.inputs[i * w..(i + 1) * w]);
        }
        Tensor::from_vec(idx.len() * self.seq_len, self.input_dim, data)
    }
}

/// Regression targets with optional per-row loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub dim: usize,
    pub values: Vec<f32>,
    pub weights: Option<Vec<f32>>,
}

impl Target {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            values: Vec::new(),
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Option<Vec<f32>>) {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let w = self.weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect());
        (Tensor::from_vec(idx.len(), self.dim, data), w)
    }
}

fn loss_node(g: &mut Graph<f32>, pred: NodeId, target: &Target, idx: &[usize]) -> Result<NodeId, AutodiffError> {
    let (t, w) = target.batch(idx);
    match w {
        Some(w) => g.masked_mse_loss(pred, &t, w),
        None => g.mse_loss(pred, &t),
    }
}

/// One prediction head reading the pooled embedding, with its loss weight.
pub struct HeadTask<'a> {
    pub head: &'a Mlp,
    pub target: &'a Target,
    pub weight: f32,
}

/// Trains encoder and heads jointly on `Σ weight · MSE`. Returns the mean
/// batch loss of every epoch.
pub fn train_backbone(
    store: &mut ParamStore<f32>,
    encoder: &Encoder,
    tasks: &[HeadTask<'_>],
    data: &SequenceSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    if tasks.iter().any(|t| t.target.len() != n) {
        return Err(TrainError::Config("target count differs from window count".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer, store);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(data.batch(idx));
            let z = encoder.embed(&mut g, store, x, data.seq_len, Some(&mut *rng))?;
            let mut loss: Option<NodeId> = None;
            for t in tasks.iter().filter(|t| t.weight != 0.0) {
                let pred = t.head.forward(&mut g, store, z)?;
                let mut l = loss_node(&mut g, pred, t.target, idx)?;
                if t.weight != 1.0 {
                    l = g.scale(l, t.weight);
                }
                loss = Some(match loss {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
            let Some(loss) = loss else {
                return Err(TrainError::Config("every task has zero weight".into()));
            };
            total += f64::from(g.value(loss).item());
            batches += 1;
            g.backward(loss)?;
            let grads = g.param_grads(store);
            opt.step(store, &grads)?;
        }
        curve.push(total / batches as f64);
    }
    Ok(curve)
}

/// Pooled embeddings `[N, d_model]` of every window, dropout off.
pub fn embed_all(store: &ParamStore<f32>, encoder: &Encoder, data: &SequenceSet) -> Result<Tensor<f32>, TrainError> {
    const CHUNK: usize = 64;
    let d = encoder.config().d_model;
    let n = data.len();
    let mut out = Vec::with_capacity(n * d);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let mut g = Graph::inference();
        let x = g.constant(data.batch(chunk));
        let z = encoder.embed::<f32, ChaCha8Rng>(&mut g, store, x, data.seq_len, None)?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(Tensor::from_vec(n, d, out))
}

/// Positions of a batch to overwrite and the training rows that replace
/// them: `round(fraction · batch_len)` distinct positions, sources drawn
/// uniformly with replacement from `pool` rows.
pub fn replacement_plan<R: Rng + ?Sized>(
    batch_len: usize,
    fraction: f64,
    pool: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let m = ((fraction * batch_len as f64).round() as usize).min(batch_len);
    if m == 0 || pool == 0 {
        return Vec::new();
    }
    let mut positions = index::sample(rng, batch_len, m).into_vec();
    positions.sort_unstable();
    positions.into_iter().map(|p| (p, rng.random_range(0..pool))).collect()
}

/// Mean, population variance and mean variance of one prediction set.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub u: f64,
}

/// `preds[k]` is head `k`'s prediction vector.
pub fn ensemble_stats(preds: &[&[f64]]) -> EnsembleOutput {
    let k = preds.len() as f64;
    let dim = preds.first().map_or(0, |p| p.len());
    // Deviations are taken from the first head so identical heads give an
    // exactly zero variance.
    let mut mean = Vec::with_capacity(dim);
    let mut variance = Vec::with_capacity(dim);
    for j in 0..dim {
        let base = preds[0][j];
        let shift = preds.iter().map(|p| p[j] - base).sum::<f64>() / k;
        variance.push(preds.iter().map(|p| (p[j] - base - shift).powi(2)).sum::<f64>() / k);
        mean.push(base + shift);
    }
    let u = variance.iter().sum::<f64>() / dim.max(1) as f64;
    EnsembleOutput { mean, variance, u }
}

/// K independently parameterized heads over frozen embeddings.
#[derive(Clone, Debug)]
pub struct Ensemble {
    heads: Vec<(ParamStore<f32>, Mlp)>,
    seeds: Vec<u64>,
}

fn head_dims(input: usize, hidden: usize, output: usize) -> [usize; 3] {
    [input, hidden, output]
}

impl Ensemble {
    /// Untrained heads, one per seed.
    pub fn init(input: usize, output: usize, hidden: usize, seeds: &[u64]) -> Self {
        let heads = seeds
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut store = ParamStore::new();
                let mlp = Mlp::new(&mut store, "head", &head_dims(input, hidden, output), &mut rng);
                (store, mlp)
            })
            .collect();
        Self {
            heads,
            seeds: seeds.to_vec(),
        }
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn head_store(&self, k: usize) -> &ParamStore<f32> {
        &self.heads[k].0
    }

    pub fn head_store_mut(&mut self, k: usize) -> &mut ParamStore<f32> {
        &mut self.heads[k].0
    }

    pub fn output_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.1.output_dim())
    }

    /// Per-head predictions for embeddings `[N, d]`, as `f64` rows.
    pub fn predict(&self, z: &Tensor<f32>) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
        self.heads
            .iter()
            .map(|(store, mlp)| {
                let mut g = Graph::inference();
                let x = g.constant(z.clone());
                let y = mlp.forward(&mut g, store, x)?;
                let out = g.value(y);
                Ok((0..out.rows())
                    .map(|r| out.row(r).iter().map(|&v| f64::from(v)).collect())
                    .collect())
            })
            .collect()
    }

    /// Ensemble statistics for every row of `z`.
    pub fn stats(&self, z: &Tensor<f32>) -> Result<Vec<EnsembleOutput>, TrainError> {
        let preds = self.predict(z)?;
        Ok((0..z.rows())
            .map(|r| {
                let rows: Vec<&[f64]> = preds.iter().map(|p| p[r].as_slice()).collect();
                ensemble_stats(&rows)
            })
            .collect())
    }

    pub fn checkpoints(&self) -> Vec<ParamCheckpoint> {
        self.heads.iter().map(|(s, _)| ParamCheckpoint::from_store(s)).collect()
    }

    pub fn load(
        input: usize,
        output: usize,
        hidden: usize,
        seeds: &[u64],
        checkpoints: &[ParamCheckpoint],
    ) -> Result<Self, TrainError> {
        if seeds.len() != checkpoints.len() {
            return Err(TrainError::Config("seed and checkpoint counts differ".into()));
        }
        let mut e = Self::init(input, output, hidden, seeds);
        for ((store, _), c) in e.heads.iter_mut().zip(checkpoints) {
            c.load_into(store)?;
        }
        Ok(e)
    }
}

/// Trains one head per seed on the shared batch order from `order_seed`;
/// each head overwrites a fraction of every batch with pairs drawn by its
/// own random stream.
pub fn train_ensemble(
    embeddings: &Tensor<f32>,
    target: &Target,
    cfg: &EnsembleConfig,
    train: &TrainConfig,
    head_seeds: &[u64],
    order_seed: u64,
) -> Result<Ensemble, TrainError> {
    cfg.validate()?;
    train.validate()?;
    if head_seeds.len() != cfg.k {
        return Err(TrainError::Config(format!(
            "{} head seeds for K = {}",
            head_seeds.len(),
            cfg.k
        )));
    }
    let n = embeddings.rows();
    if n == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    if target.len() != n {
        return Err(TrainError::Config("target count differs from embedding count".into()));
    }
    let d = embeddings.cols();
    let mut ensemble = Ensemble::init(d, target.dim, cfg.hidden, head_seeds);
    for (k, (store, mlp)) in ensemble.heads.iter_mut().enumerate() {
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(head_seeds[k], 1));
        let mut order_rng = ChaCha8Rng::seed_from_u64(order_seed);
        let mut opt = AdamW::new(train.optimizer, store);
        let mut order: Vec<usize> = (0..n).collect();
        let mut zb = Vec::with_capacity(train.batch_size * d);
        for _ in 0..train.epochs {
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(train.batch_size) {
                let mut idx = chunk.to_vec();
                for (pos, src) in replacement_plan(idx.len(), cfg.resample_fraction, n, &mut head_rng) {
                    idx[pos] = src;
                }
                zb.clear();
                for &i in &idx {
                    zb.extend_from_slice(embeddings.row(i));
                }
                let mut g = Graph::new();
                let x = g.constant(Tensor::from_vec(idx.len(), d, zb.clone()));
                let pred = mlp.forward(&mut g, store, x)?;
                let loss = loss_node(&mut g, pred, target, &idx)?;
                g.backward(loss)?;
                let grads = g.param_grads(store);
                opt.step(store, &grads)?;
            }
        }
    }
    Ok(ensemble)
}

/// Encoder plus the heads trained jointly with it, in one parameter store.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub heads: Vec<Mlp>,
}

impl Backbone {
    /// `heads` lists `(name, output_dim)`; every head is `d_model → hidden → out`.
    pub fn new(
        config: EncoderConfig,
        input_dim: usize,
        heads: &[(&str, usize)],
        hidden: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config, input_dim, &mut store, &mut rng)?;
        let heads = heads
            .iter()
            .map(|&(name, out)| Mlp::new(&mut store, name, &head_dims(config.d_model, hidden, out), &mut rng))
            .collect();
        Ok(Self { store, encoder, heads })
    }

    pub fn load(
        config: EncoderConfig,
        input_dim: usize,
        heads: &[(&str, usize)],
        hidden: usize,
        checkpoint: &ParamCheckpoint,
    ) -> Result<Self, TrainError> {
        let mut b = Self::new(config, input_dim, heads, hidden, 0)?;
        checkpoint.load_into(&mut b.store)?;
        Ok(b)
    }

    pub fn embed_all(&self, data: &SequenceSet) -> Result<Tensor<f32>, TrainError> {
        embed_all(&self.store, &self.encoder, data)
    }
}

/// Serialized ensemble: head seeds, batch-order seed and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub name: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub order_seed: u64,
    pub heads: Vec<ParamCheckpoint>,
}

impl EnsembleRecord {
    pub fn new(name: &str, e: &Ensemble, input_dim: usize, hidden: usize, order_seed: u64) -> Self {
        Self {
            name: name.into(),
            input_dim,
            output_dim: e.output_dim(),
            hidden,
            seeds: e.seeds().to_vec(),
            order_seed,
            heads: e.checkpoints(),
        }
    }

    pub fn restore(&self) -> Result<Ensemble, TrainError> {
        Ensemble::load(self.input_dim, self.output_dim, self.hidden, &self.seeds, &self.heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, d: usize, seed: u64) -> (Tensor<f32>, Target) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Target::new(3);
        for r in 0..n {
            let row = &z[r * d..(r + 1) * d];
            t.values.extend([row[0] + row[1], row[2] * 0.5, -row[3]]);
        }
        (Tensor::from_vec(n, d, z), t)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            ..Default::default()
        }
    }

    #[test]
    fn brute_force_ensemble_stats() {
        let preds = [[1.0; 5], [3.0; 5]];
        let rows: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
        let out = ensemble_stats(&rows);
        assert_eq!(out.mean, vec![2.0; 5]);
        assert_eq!(out.variance, vec![1.0; 5]);
        assert_eq!(out.u, 1.0);
        let same = ensemble_stats(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(same.u, 0.0);
    }

    #[test]
    fn plan_sizes_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = replacement_plan(16, 0.2, 100, &mut rng);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&(pos, src)| pos < 16 && src < 100));
        assert!(p.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(replacement_plan(16, 0.0, 100, &mut rng).is_empty());
        assert_eq!(replacement_plan(5, 1.0, 10, &mut rng).len(), 5);
    }

    /// Simulated sampler: two heads on the same batch pick different
    /// replacement sets for nearly every seed pair.
    #[test]
    fn replacement_draws_are_head_independent() {
        let mut differ = 0;
        for s in 0..200u64 {
            let mut a = ChaCha8Rng::seed_from_u64(derive_seed(s, 1));
            let mut b = ChaCha8Rng::seed_from_u64(derive_seed(s + 10_000, 1));
            if replacement_plan(16, 0.2, 500, &mut a) != replacement_plan(16, 0.2, 500, &mut b) {
                differ += 1;
            }
        }
        assert!(differ >= 198, "{differ}");
    }

    #[test]
    fn zero_fraction_with_shared_seeds_gives_identical_heads() {
        let (z, t) = toy(64, 8, 0);
        let cfg = EnsembleConfig {
            k: 3,
            resample_fraction: 0.0,
            hidden: 16,
        };
        let e = train_ensemble(&z, &t, &cfg, &quick(), &[7, 7, 7], 3).unwrap();
        let stats = e.stats(&z).unwrap();
        assert!(stats.iter().all(|s| s.u < 1e-10));
        assert_eq!(e.head_store(0).checksum(), e.head_store(2).checksum());
    }

    #[test]
    fn distinct_seeds_with_resampling_diverge() {
        let (z, t) = toy(64, 8, 0);
        let cfg = EnsembleConfig {
            k: 2,
            resample_fraction: 0.2,
            hidden: 16,
        };
        let e = train_ensemble(&z, &t, &cfg, &quick(), &[1, 2], 3).unwrap();
        assert!(e.head_store(0).distance(e.head_store(1)) > 0.0);
        let mut u: Vec<f64> = e.stats(&z).unwrap().iter().map(|s| s.u).collect();
        u.sort_by(f64::total_cmp);
        assert!(u[u.len() / 2] > 0.0);
    }

    #[test]
    fn ensemble_rejects_bad_config() {
        let (z, t) = toy(8, 4, 0);
        let one = EnsembleConfig {
            k: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_ensemble(&z, &t, &one, &quick(), &[1], 0),
            Err(TrainError::Config(_))
        ));
        let empty = Tensor::<f32>::zeros(0, 4);
        let cfg = EnsembleConfig::default();
        assert!(matches!(
            train_ensemble(&empty, &Target::new(3), &cfg, &quick(), &[1, 2, 3, 4, 5], 0),
            Err(TrainError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn ensemble_checkpoint_round_trip() {
        let (z, t) = toy(32, 4, 5);
        let cfg = EnsembleConfig {
            k: 2,
            resample_fraction: 0.2,
            hidden: 8,
        };
        let e = train_ensemble(&z, &t, &cfg, &quick(), &[4, 9], 0).unwrap();
        let back = Ensemble::load(4, 3, 8, e.seeds(), &e.checkpoints()).unwrap();
        assert_eq!(back.stats(&z).unwrap(), e.stats(&z).unwrap());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
