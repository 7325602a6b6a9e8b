//! Federated rounds: client sampling, local Adam training, weighted averaging.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{heterogeneity_stats, partition_dirichlet, ClientPartition, Concentration, Dataset, HeterogeneityStats};
use crate::model::{evaluate_full, MlpModel};
use crate::ndcore::{DenseTensor, RngStream};
use crate::optim::{adam_step, init_state, state_memory_bytes, AdamHyper, AdamState, OptimizerMode};
use crate::quant::MemoryReport;
use crate::{Error, Result};

/// Stream ids for the non-client draws of a run. Clients use their own index.
pub mod streams {
    pub const PARTITION: u64 = 1 << 32;
    pub const MODEL_INIT: u64 = (1 << 32) + 1;
    pub const SERVER: u64 = (1 << 32) + 2;
    pub const TRAIN_DATA: u64 = (1 << 32) + 3;
    pub const TEST_DATA: u64 = (1 << 32) + 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedConfig {
    pub rounds: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub mode: OptimizerMode,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub block_size: usize,
    pub seed: u64,
    pub alpha: Concentration,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            num_clients: 10,
            clients_per_round: 5,
            local_epochs: 2,
            batch_size: 64,
            mode: OptimizerMode::QLocalAdam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            block_size: 64,
            seed: 42,
            alpha: Concentration::Dirichlet(0.1),
            hidden: vec![128, 64],
        }
    }
}

impl FederatedConfig {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, field: &'static str| {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive(self.rounds, "rounds")?;
        positive(self.num_clients, "clients")?;
        positive(self.clients_per_round, "per-round")?;
        positive(self.local_epochs, "epochs")?;
        positive(self.batch_size, "batch")?;
        positive(self.block_size, "block-size")?;
        if self.clients_per_round > self.num_clients {
            return Err(Error::config(
                "per-round",
                &format!("{} exceeds the {} clients", self.clients_per_round, self.num_clients),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive and finite"));
        }
        self.alpha.validate().map_err(|e| Error::config("alpha", &e.to_string()))?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn layer_dims(&self, features: usize, classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(features);
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }
}

/// One server round as written to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub selected_clients: Vec<usize>,
    pub per_client_state_bytes: Vec<u64>,
    pub per_client_steps: Vec<u64>,
    /// Wall-clock time of the round. Kept out of the metrics records so that
    /// they stay byte-reproducible.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: OptimizerMode,
    pub rounds: usize,
    pub param_count: usize,
    pub best_accuracy: f64,
    /// 1-based index of the first round that reached `best_accuracy`.
    pub best_round: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub state_bytes: u64,
    pub fp32_state_bytes: u64,
    pub compression_ratio: f64,
    pub memory: MemoryReport,
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub partitions: Vec<ClientPartition>,
    pub heterogeneity: HeterogeneityStats,
    pub rounds: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub model: MlpModel,
}

/// Uniform draw of `k` distinct client ids out of `num_clients`, sorted.
pub fn sample_clients(rng: &mut RngStream, num_clients: usize, k: usize) -> Result<Vec<usize>> {
    if k > num_clients {
        return Err(Error::Parameter(format!("cannot pick {k} of {num_clients} clients")));
    }
    Ok(rng.sample_without_replacement(num_clients, k))
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub model: MlpModel,
    pub state: AdamState,
    pub steps: u64,
}

/// Trains a copy of `global` on one client's samples.
///
/// Starts from a fresh zero optimizer state, runs `local_epochs` passes of
/// mini-batches in an order shuffled per epoch by `rng`, and keeps the last
/// short batch.
pub fn local_train(
    global: &MlpModel,
    partition: &ClientPartition,
    dataset: &Dataset,
    cfg: &FederatedConfig,
    rng: &mut RngStream,
) -> Result<LocalResult> {
    if partition.is_empty() {
        return Err(Error::config("partition", &format!("client {} holds no samples", partition.client_id)));
    }
    let mut model = global.clone();
    let mut state = init_state(&model.param_shapes(), cfg.mode, cfg.hyper(), cfg.block_size)?;
    let mut order = partition.sample_indices.clone();
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = dataset.gather(batch)?;
            let (_, grads) = model.loss_and_grads(&x, &y)?;
            adam_step(&mut state, model.params_mut(), &grads, cfg.mode)?;
        }
    }
    let steps = state.step_count();
    Ok(LocalResult { model, state, steps })
}

/// `θ = Σ_k (|D_k| / Σ_j |D_j|) · θ_k`, accumulated in f64 in the order given.
pub fn aggregate(client_params: &[Vec<DenseTensor>], client_sizes: &[usize]) -> Result<Vec<DenseTensor>> {
    if client_params.is_empty() {
        return Err(Error::Parameter("nothing to aggregate".into()));
    }
    if client_params.len() != client_sizes.len() {
        return Err(Error::Dimension(format!(
            "{} parameter sets for {} sizes",
            client_params.len(),
            client_sizes.len()
        )));
    }
    if client_sizes.contains(&0) {
        return Err(Error::Parameter("client with zero samples cannot be weighted".into()));
    }
    let reference = &client_params[0];
    for (k, params) in client_params.iter().enumerate() {
        if params.len() != reference.len()
            || params.iter().zip(reference).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Dimension(format!("client {k} parameter shapes differ")));
        }
    }
    let total: f64 = client_sizes.iter().map(|&n| n as f64).sum();
    reference
        .iter()
        .enumerate()
        .map(|(t, shape_ref)| {
            let mut acc = vec![0.0f64; shape_ref.len()];
            for (params, &n) in client_params.iter().zip(client_sizes) {
                let w = n as f64;
                for (a, &p) in acc.iter_mut().zip(params[t].data()) {
                    *a += w * f64::from(p);
                }
            }
            let data = acc.into_iter().map(|a| (a / total) as f32).collect();
            DenseTensor::new(data, shape_ref.shape().to_vec())
        })
        .collect()
}

/// [`aggregate`] over `(client id, params, sample count)` entries in any
/// order; entries are first sorted by client id so the sum is reproducible.
pub fn aggregate_clients(mut entries: Vec<(usize, Vec<DenseTensor>, usize)>) -> Result<Vec<DenseTensor>> {
    entries.sort_by_key(|e| e.0);
    let sizes: Vec<usize> = entries.iter().map(|e| e.2).collect();
    let params: Vec<Vec<DenseTensor>> = entries.into_iter().map(|e| e.1).collect();
    aggregate(&params, &sizes)
}

/// Aggregation weights `|D_k| / Σ_j |D_j|`.
pub fn aggregation_weights(client_sizes: &[usize]) -> Vec<f64> {
    let total: f64 = client_sizes.iter().map(|&n| n as f64).sum();
    client_sizes.iter().map(|&n| n as f64 / total).collect()
}

/// Runs every round and returns all metrics.
pub fn run_federated(
    cfg: &FederatedConfig,
    train: &Dataset,
    test: &Dataset,
    threads: Option<usize>,
) -> Result<FederatedRun> {
    run_federated_with(cfg, train, test, threads, |_| Ok(()))
}

/// Like [`run_federated`], calling `on_round` after each round completes.
pub fn run_federated_with(
    cfg: &FederatedConfig,
    train: &Dataset,
    test: &Dataset,
    threads: Option<usize>,
    mut on_round: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<FederatedRun> {
    cfg.validate()?;
    if train.num_features() != test.num_features() || train.num_classes != test.num_classes {
        return Err(Error::Dimension("train and test sets disagree on features or classes".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;

    let partitions = partition_dirichlet(
        &mut RngStream::new(cfg.seed, streams::PARTITION),
        train,
        cfg.num_clients,
        cfg.alpha,
    )?;
    let heterogeneity = heterogeneity_stats(&partitions);
    let dims = cfg.layer_dims(train.num_features(), train.num_classes);
    let mut global = MlpModel::new(&dims, &mut RngStream::new(cfg.seed, streams::MODEL_INIT))?;
    let mut server = RngStream::new(cfg.seed, streams::SERVER);

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut memory = MemoryReport::empty();
    for t in 0..cfg.rounds {
        let started = Instant::now();
        let selected = sample_clients(&mut server, cfg.num_clients, cfg.clients_per_round)?;
        let results: Vec<LocalResult> = pool.install(|| {
            selected
                .par_iter()
                .map(|&k| {
                    let mut rng = RngStream::for_round(cfg.seed, k as u64, t as u64);
                    local_train(&global, &partitions[k], train, cfg, &mut rng)
                })
                .collect::<Result<_>>()
        })?;

        let reports: Vec<MemoryReport> = results.iter().map(|r| state_memory_bytes(&r.state)).collect();
        let steps = results.iter().map(|r| r.steps).collect();
        let entries = selected
            .iter()
            .zip(results)
            .map(|(&k, r)| (k, r.model.into_params(), partitions[k].len()))
            .collect();
        global = MlpModel::from_params(aggregate_clients(entries)?)?;
        memory = reports[0];

        let eval = evaluate_full(&global, &test.x, &test.y)?;
        let metrics = RoundMetrics {
            round: t + 1,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            selected_clients: selected,
            per_client_state_bytes: reports.iter().map(|r| r.total_bytes).collect(),
            per_client_steps: steps,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_round(&metrics)?;
        rounds.push(metrics);
    }

    let (best_idx, best) = rounds
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r.test_accuracy > acc.1 { (i, r.test_accuracy) } else { acc });
    let last = rounds.last().expect("rounds >= 1");
    let summary = RunSummary {
        mode: cfg.mode,
        rounds: cfg.rounds,
        param_count: global.param_count(),
        best_accuracy: best,
        best_round: best_idx + 1,
        final_accuracy: last.test_accuracy,
        final_loss: last.test_loss,
        state_bytes: memory.total_bytes,
        fp32_state_bytes: memory.fp32_equivalent_bytes,
        compression_ratio: memory.compression_ratio,
        memory,
    };
    Ok(FederatedRun { partitions, heterogeneity, rounds, summary, model: global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny_config() -> FederatedConfig {
        FederatedConfig {
            rounds: 3,
            num_clients: 4,
            clients_per_round: 2,
            local_epochs: 1,
            batch_size: 16,
            hidden: vec![8],
            alpha: Concentration::Iid,
            ..FederatedConfig::default()
        }
    }

    fn blobs(seed: u64, n: usize) -> Dataset {
        generate_synthetic(&mut RngStream::new(seed, 0), n, 6, 3, 3.0).unwrap()
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = FederatedConfig::default();
        assert!(c.validate().is_ok());
        c.clients_per_round = 11;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "per-round"),
            other => panic!("unexpected {other:?}"),
        }
        let c = FederatedConfig { beta2: 1.0, ..FederatedConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "beta2"));
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let c: FederatedConfig = serde_json::from_str(r#"{"mode":"fp32","alpha":"iid"}"#).unwrap();
        assert_eq!(c.mode, OptimizerMode::Fp32);
        assert_eq!(c.alpha, Concentration::Iid);
        assert_eq!(c.block_size, 64);
        assert!(serde_json::from_str::<FederatedConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn sampling_all_and_without_replacement() {
        let mut rng = RngStream::new(1, streams::SERVER);
        assert_eq!(sample_clients(&mut rng, 7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        for _ in 0..1000 {
            let s = sample_clients(&mut rng, 10, 5).unwrap();
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(sample_clients(&mut rng, 3, 4).is_err());
    }

    #[test]
    fn step_count_rule() {
        let d = blobs(0, 50);
        let global = MlpModel::new(&[6, 8, 3], &mut RngStream::new(0, 9)).unwrap();
        let cfg = FederatedConfig { local_epochs: 3, batch_size: 16, ..tiny_config() };
        let one = ClientPartition { client_id: 0, sample_indices: vec![4], class_histogram: vec![0, 1, 0] };
        let r = local_train(&global, &one, &d, &FederatedConfig { local_epochs: 1, batch_size: 64, ..cfg.clone() }, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(r.steps, 1);
        let p = ClientPartition { client_id: 0, sample_indices: (0..37).collect(), class_histogram: vec![13, 12, 12] };
        let r = local_train(&global, &p, &d, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(r.steps, 3 * 3);
        let empty = ClientPartition { client_id: 2, sample_indices: vec![], class_histogram: vec![0; 3] };
        assert!(matches!(local_train(&global, &empty, &d, &cfg, &mut RngStream::new(0, 0)), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_gradient_client_returns_global() {
        // zero features and zero weights leave only the output bias with a
        // gradient, and a single output class makes that one vanish too
        let d = Dataset::new(DenseTensor::zeros(&[20, 6]), vec![0; 20], 1).unwrap();
        let global = MlpModel::zeros(&[6, 8, 1]).unwrap();
        let p = ClientPartition { client_id: 0, sample_indices: (0..20).collect(), class_histogram: vec![20] };
        for mode in OptimizerMode::ALL {
            let cfg = FederatedConfig { mode, local_epochs: 2, ..tiny_config() };
            let r = local_train(&global, &p, &d, &cfg, &mut RngStream::new(0, 0)).unwrap();
            assert_eq!(r.model, global);
            assert_eq!(r.steps, 4);
        }
    }

    #[test]
    fn aggregation_hand_cases() {
        let s = |v: f32| vec![DenseTensor::from_vec(vec![v]).unwrap()];
        let out = aggregate(&[s(0.0), s(4.0)], &[1, 3]).unwrap();
        assert_eq!(out[0].data(), &[3.0]);
        let same = aggregate(&[s(0.7), s(0.7), s(0.7)], &[5, 11, 2]).unwrap();
        assert_eq!(same[0].data(), &[0.7]);
        assert!(matches!(aggregate(&[s(1.0)], &[0]), Err(Error::Parameter(_))));
        assert!(matches!(aggregate(&[s(1.0)], &[1, 2]), Err(Error::Dimension(_))));
        assert!(matches!(aggregate(&[], &[]), Err(Error::Parameter(_))));
        let w = aggregation_weights(&[3, 7, 13]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_client_round_is_centralized_adam() {
        let train = blobs(1, 40);
        let test = blobs(2, 30);
        let cfg = FederatedConfig { rounds: 1, num_clients: 1, clients_per_round: 1, mode: OptimizerMode::Fp32, ..tiny_config() };
        let run = run_federated(&cfg, &train, &test, Some(1)).unwrap();

        let global = MlpModel::new(&cfg.layer_dims(6, 3), &mut RngStream::new(cfg.seed, streams::MODEL_INIT)).unwrap();
        let all = ClientPartition { client_id: 0, sample_indices: (0..40).collect(), class_histogram: train.class_counts() };
        let local = local_train(&global, &all, &train, &cfg, &mut RngStream::for_round(cfg.seed, 0, 0)).unwrap();
        assert_eq!(run.model, local.model);
    }

    #[test]
    fn runs_are_deterministic_across_threads() {
        let train = blobs(3, 120);
        let test = blobs(4, 30);
        let cfg = tiny_config();
        let a = run_federated(&cfg, &train, &test, Some(1)).unwrap();
        let b = run_federated(&cfg, &train, &test, Some(4)).unwrap();
        assert_eq!(a.model, b.model);
        let strip = |r: &FederatedRun| serde_json::to_string(&r.rounds).unwrap();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn state_bytes_constant_and_match_optimizer() {
        let train = blobs(5, 120);
        let test = blobs(6, 30);
        let cfg = tiny_config();
        let run = run_federated(&cfg, &train, &test, None).unwrap();
        let n = run.model.param_shapes();
        let fresh = init_state(&n, cfg.mode, cfg.hyper(), cfg.block_size).unwrap();
        let expect = state_memory_bytes(&fresh).total_bytes;
        for r in &run.rounds {
            assert!(r.per_client_state_bytes.iter().all(|&b| b == expect));
        }
        assert_eq!(run.summary.state_bytes, expect);
    }
}
