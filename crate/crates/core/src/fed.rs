//! Federated round loop: i.i.d. partitioning, participant sampling, local
//! mask-enforced SGD at each client, over-the-air aggregation and the
//! server update, with pruning events fired at scheduled rounds.

use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ota_aggregate, ChannelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, loss_and_grad, sgd_step, GradientVector, ModelSpec, ParameterVector};
use crate::pruning::{apply_mask, compute_magnitude_mask, mask_report, sparsity, PruneMask, PruningPlan};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticipationPolicy {
    num_clients: usize,
    fraction: f64,
}

impl ParticipationPolicy {
    pub fn new(num_clients: usize, fraction: f64) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::Domain("need at least one client".into()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Domain(format!("participation fraction must lie in (0, 1], got {fraction}")));
        }
        Ok(ParticipationPolicy { num_clients, fraction })
    }

    pub fn full(num_clients: usize) -> Result<Self> {
        Self::new(num_clients, 1.0)
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    /// `ceil(fraction * E)`, never below one.
    pub fn per_round(&self) -> usize {
        let k = (self.fraction * self.num_clients as f64 - 1e-9).ceil() as usize;
        k.clamp(1, self.num_clients)
    }
}

/// Shuffles sample indices with the seed and deals them out contiguously.
/// The first `N mod E` shards get one extra sample.
pub fn partition_iid(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = dataset.len();
    if num_clients == 0 || num_clients > n {
        return Err(Error::InfeasiblePartition {
            samples: n,
            clients: num_clients,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::domain::PARTITION]));
    let base = n / num_clients;
    let extra = n % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for e in 0..num_clients {
        let len = base + usize::from(e < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

/// Participants of one round in ascending id order, sampled without
/// replacement from a stream keyed by `(seed, round)`.
pub fn select_participants(policy: &ParticipationPolicy, round: usize, seed: u64) -> Vec<usize> {
    let e = policy.num_clients;
    let k = policy.per_round();
    if k == e {
        return (0..e).collect();
    }
    let mut s = rng::stream(seed, &[rng::domain::SELECT, round as u64]);
    let mut ids = index::sample(&mut s, e, k).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// SGD steps per round; `None` means one pass over the shard.
    pub local_steps: Option<usize>,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if self.local_steps == Some(0) {
            return Err(Error::Domain("local steps must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, shard_len: usize) -> usize {
        self.local_steps.unwrap_or_else(|| shard_len.div_ceil(self.batch_size))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Dataset,
    /// Seed that, together with the client id and round, keys the client's
    /// batch stream.
    pub seed: u64,
}

/// Mini-batches (as shard-local indices) a client trains on in one round.
/// The shard is reshuffled at the start of every pass; a pass ends with a
/// short batch when the batch size does not divide the shard.
pub fn local_batches(
    client_id: usize,
    seed: u64,
    round: usize,
    shard_len: usize,
    batch_size: usize,
    steps: usize,
) -> Vec<Vec<usize>> {
    let mut s = rng::stream(seed, &[rng::domain::CLIENT, round as u64, client_id as u64]);
    let mut order: Vec<usize> = (0..shard_len).collect();
    let mut pos = shard_len;
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        if pos >= shard_len {
            order.shuffle(&mut s);
            pos = 0;
        }
        let end = (pos + batch_size).min(shard_len);
        batches.push(order[pos..end].to_vec());
        pos = end;
    }
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    /// Pseudo-gradient `(global - local) / lr`, carried as the running sum
    /// of the masked gradients applied during local training.
    pub gv: GradientVector,
    /// Mean mini-batch loss over the local steps.
    pub train_loss: f64,
}

pub fn local_update(
    client: &ClientState,
    global: &ParameterVector,
    mask: &PruneMask,
    spec: &ModelSpec,
    training: &LocalTraining,
    round: usize,
) -> Result<LocalUpdate> {
    training.validate()?;
    let shard_len = client.shard.len();
    if shard_len == 0 {
        return Err(Error::NoData {
            client: client.client_id,
        });
    }
    if training.batch_size > shard_len {
        return Err(Error::BatchTooLarge {
            client: client.client_id,
            batch_size: training.batch_size,
            shard_size: shard_len,
        });
    }
    let steps = training.steps_for(shard_len);
    let batches = local_batches(client.client_id, client.seed, round, shard_len, training.batch_size, steps);

    let mut local = global.clone();
    let mut acc: Option<GradientVector> = None;
    let mut loss_sum = 0.0;
    for indices in &batches {
        let batch = client.shard.batch(indices)?;
        let (loss, mut grad) = loss_and_grad(&local, spec, &batch)?;
        for (g, &keep) in grad.values_mut().iter_mut().zip(mask.keep_flags()) {
            if !keep {
                *g = 0.0;
            }
        }
        local = sgd_step(&local, &grad, training.learning_rate, Some(mask))?;
        loss_sum += loss;
        acc = Some(match acc {
            None => grad,
            Some(mut a) => {
                a.values_mut().iter_mut().zip(grad.values()).for_each(|(a, g)| *a += g);
                a
            }
        });
    }
    Ok(LocalUpdate {
        client_id: client.client_id,
        gv: acc.expect("at least one local step"),
        train_loss: loss_sum / steps as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: ParameterVector,
    pub mask: PruneMask,
    /// Rounds completed so far.
    pub round: usize,
    pub plan: PruningPlan,
}

impl ServerState {
    pub fn new(global_params: ParameterVector, plan: PruningPlan) -> Self {
        let mask = PruneMask::all_keep(Arc::clone(global_params.layout()));
        ServerState {
            global_params,
            mask,
            round: 0,
            plan,
        }
    }
}

/// One row of the experiment output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub train_loss: f64,
    pub sparsity: f64,
    pub size_bytes_dense: u64,
    pub size_bytes_sparse: u64,
    pub participants_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    /// 1-based index of the completed round.
    pub round: usize,
    pub participants: Vec<usize>,
    pub metrics: MetricsRecord,
}

/// Everything that stays fixed across the rounds of one run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub spec: ModelSpec,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub policy: ParticipationPolicy,
    pub channel: ChannelConfig,
    pub training: LocalTraining,
    pub seed: u64,
}

impl Federation {
    /// Partitions `train` i.i.d. across the policy's clients.
    pub fn new(
        spec: ModelSpec,
        train: &Dataset,
        test: Dataset,
        policy: ParticipationPolicy,
        channel: ChannelConfig,
        training: LocalTraining,
        seed: u64,
    ) -> Result<Self> {
        let shards = partition_iid(train, policy.num_clients(), seed)?
            .iter()
            .map(|idx| train.subset(idx))
            .collect::<Result<Vec<_>>>()?;
        Self::from_shards(spec, shards, test, policy, channel, training, seed)
    }

    /// Client `e` receives `shards[e]`.
    pub fn from_shards(
        spec: ModelSpec,
        shards: Vec<Dataset>,
        test: Dataset,
        policy: ParticipationPolicy,
        channel: ChannelConfig,
        training: LocalTraining,
        seed: u64,
    ) -> Result<Self> {
        channel.validate()?;
        training.validate()?;
        if shards.len() != policy.num_clients() {
            return Err(Error::Domain(format!(
                "{} shards for {} clients",
                shards.len(),
                policy.num_clients()
            )));
        }
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(client_id, shard)| ClientState { client_id, shard, seed })
            .collect();
        Ok(Federation {
            spec,
            clients,
            test,
            policy,
            channel,
            training,
            seed,
        })
    }

    pub fn run_round(&self, mut server: ServerState) -> Result<(ServerState, RoundResult)> {
        let round = server.round;
        if let Some(target) = server.plan.sparsity_at(round) {
            server.mask = compute_magnitude_mask(&server.global_params, target, Some(&server.mask))?;
            server.global_params = apply_mask(&server.global_params, &server.mask)?;
        }

        let participants = select_participants(&self.policy, round, self.seed);
        let updates = participants
            .par_iter()
            .map(|&id| {
                local_update(
                    &self.clients[id],
                    &server.global_params,
                    &server.mask,
                    &self.spec,
                    &self.training,
                    round,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let train_loss = updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
        let gvs: Vec<GradientVector> = updates.into_iter().map(|u| u.gv).collect();

        let mut noise = rng::stream(self.seed, &[rng::domain::CHANNEL, round as u64]);
        let aggregated = ota_aggregate(&gvs, &self.channel, &mut noise)?;
        server.global_params = sgd_step(
            &server.global_params,
            &aggregated,
            self.training.learning_rate,
            Some(&server.mask),
        )?;
        server.round += 1;

        let eval = evaluate(&server.global_params, &self.spec, &self.test)?;
        let report = mask_report(&server.mask);
        let metrics = MetricsRecord {
            round: server.round,
            test_accuracy: eval.accuracy,
            test_loss: eval.mean_loss,
            train_loss,
            sparsity: sparsity(&server.mask)?,
            size_bytes_dense: report.size_bytes_dense,
            size_bytes_sparse: report.size_bytes_sparse,
            participants_count: participants.len(),
        };
        Ok((
            server,
            RoundResult {
                round: metrics.round,
                participants,
                metrics,
            },
        ))
    }
}
