//! The server/worker round engine.
//!
//! One logical server drives K workers. Per round: every worker receives the
//! current parameters, the cohort is dispatched one client per free worker
//! (exactly K in flight during prefill), and each completion triggers the
//! next dispatch. A failed client is re-dispatched to another worker once;
//! a second failure fails the round. Responses are reduced in client id
//! order, so results are bit-identical for any worker count and any
//! completion order. Workers run as threads over channels, or inline on the
//! calling thread for single-threaded runs.

use std::collections::BTreeSet;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use crate::aggregate::{server_step, ServerOptimizerState, WeightScheme};
use crate::client::{
    evaluate, local_train, pseudo_gradient, EvalMetrics, LocalTrainConfig, PseudoGradient,
};
use crate::compress::{self, SparsitySpec};
use crate::error::{Error, Result};
use crate::orchestrate::{
    stale_aggregate, stale_error_term, staleness_lr, RoundMetrics, RoundPlan, StaleBuffer,
};
use crate::params::model::Model;
use crate::params::shard::ClientShard;
use crate::params::vector::ParameterVector;
use crate::privacy::{apply_dp, apply_global_noise, DpConfig, DpMode, RdpAccountant};
use crate::rng;

/// Everything the server can say to a worker.
#[derive(Debug, Clone)]
pub enum WorkerMessage {
    /// Replace the worker's copy of the model parameters and client lr.
    Update { params: ParameterVector, lr: f64 },
    /// Train the given client from the worker's current parameters.
    Train { client_id: u32, round: u32 },
    /// Evaluate the worker's current parameters on the given client's data.
    Evaluate { client_id: u32 },
    /// Shut down.
    Terminate,
}

/// What a training call produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pg: PseudoGradient,
    pub final_local_loss: f64,
    pub payload_bytes: u64,
    pub idealized_bytes: f64,
}

enum ReplyBody {
    Trained(TrainOutcome),
    Evaluated(EvalMetrics),
}

struct WorkerReply {
    worker: usize,
    client_id: Option<u32>,
    body: Result<ReplyBody>,
}

/// The compute fabric a worker invokes. `worker` identifies the executing
/// worker, which the simulation ignores but failure-injection tests use.
pub trait ClientRunner: Send + Sync + 'static {
    fn train(
        &self,
        worker: usize,
        params: &ParameterVector,
        lr: f64,
        client_id: u32,
        round: u32,
    ) -> Result<TrainOutcome>;

    fn evaluate(
        &self,
        worker: usize,
        params: &ParameterVector,
        client_id: u32,
    ) -> Result<EvalMetrics>;
}

/// Client shards plus the global test set, addressable by client id. The id
/// one past the last shard selects the test set, so the server evaluates the
/// global model through the same worker path clients use.
#[derive(Debug)]
pub struct DataStore {
    shards: Vec<ClientShard>,
    global_test: ClientShard,
}

impl DataStore {
    pub fn new(shards: Vec<ClientShard>, global_test: ClientShard) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Config("no client shards".into()));
        }
        Ok(Self { shards, global_test })
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    /// The reserved id that evaluates against the global test set.
    pub fn test_client_id(&self) -> u32 {
        self.shards.len() as u32
    }

    pub fn shard(&self, client_id: u32) -> Result<&ClientShard> {
        self.shards.get(client_id as usize).ok_or_else(|| {
            Error::Config(format!(
                "client {client_id} out of range ({} clients)",
                self.shards.len()
            ))
        })
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn global_test(&self) -> &ClientShard {
        &self.global_test
    }

    fn eval_shard(&self, client_id: u32) -> Result<&ClientShard> {
        if client_id == self.test_client_id() {
            Ok(&self.global_test)
        } else {
            self.shard(client_id)
        }
    }
}

/// The standard simulation runner: local SGD on the client's shard, then
/// pseudo-gradient extraction and optional uplink compression. The shuffle
/// seed is derived from (seed, round, client id), never from the worker, so
/// scheduling cannot leak into results.
pub struct SimRunner {
    store: Arc<DataStore>,
    template: Model,
    epochs: usize,
    batch_size: usize,
    prox_mu: f64,
    bits: Option<u8>,
    sparsity: Option<SparsitySpec>,
    seed: u64,
}

impl SimRunner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: Arc<DataStore>,
        template: Model,
        epochs: usize,
        batch_size: usize,
        prox_mu: f64,
        bits: Option<u8>,
        sparsity: Option<SparsitySpec>,
        seed: u64,
    ) -> Self {
        Self {
            store,
            template,
            epochs,
            batch_size,
            prox_mu,
            bits,
            sparsity,
            seed,
        }
    }

    pub fn store(&self) -> &Arc<DataStore> {
        &self.store
    }
}

impl ClientRunner for SimRunner {
    fn train(
        &self,
        _worker: usize,
        params: &ParameterVector,
        lr: f64,
        client_id: u32,
        round: u32,
    ) -> Result<TrainOutcome> {
        let shard = self.store.shard(client_id)?;
        let seed_model = self.template.replace_params(params.clone())?;
        let cfg = LocalTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr,
            prox_mu: self.prox_mu,
            shuffle_seed: rng::derive(
                self.seed,
                &[rng::tag("shuffle"), u64::from(round), u64::from(client_id)],
            ),
        };
        let (trained, stats) = local_train(&seed_model, shard, &cfg)?;
        let mut pg = pseudo_gradient(params, &trained, client_id, stats.sample_count, round)?;
        let (payload, reconstructed) =
            compress::compress_pipeline(&pg.delta, self.bits, self.sparsity.as_ref())?;
        let payload_bytes = compress::payload_bytes(&payload);
        let idealized_bytes = compress::idealized_bytes(
            pg.delta.component_count(),
            self.bits,
            self.sparsity.map_or(0.0, |s| s.sparsity()),
        )?;
        pg.delta = reconstructed;
        Ok(TrainOutcome {
            pg,
            final_local_loss: stats.final_local_loss,
            payload_bytes,
            idealized_bytes,
        })
    }

    fn evaluate(
        &self,
        _worker: usize,
        params: &ParameterVector,
        client_id: u32,
    ) -> Result<EvalMetrics> {
        let shard = self.store.eval_shard(client_id)?;
        let model = self.template.replace_params(params.clone())?;
        evaluate(&model, shard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkerState {
    Idle,
    Ready,
}

/// Message handling shared by threaded and inline workers.
struct WorkerCore {
    index: usize,
    runner: Arc<dyn ClientRunner>,
    state: WorkerState,
    params: Option<(ParameterVector, f64)>,
}

enum Handled {
    Reply(WorkerReply),
    Silent,
    Shutdown,
}

impl WorkerCore {
    fn new(index: usize, runner: Arc<dyn ClientRunner>) -> Self {
        Self {
            index,
            runner,
            state: WorkerState::Idle,
            params: None,
        }
    }

    fn handle(&mut self, msg: WorkerMessage) -> Handled {
        match msg {
            WorkerMessage::Update { params, lr } => {
                self.params = Some((params, lr));
                self.state = WorkerState::Ready;
                Handled::Silent
            }
            WorkerMessage::Train { client_id, round } => {
                let body = match (&self.state, &self.params) {
                    (WorkerState::Ready, Some((params, lr))) => self
                        .runner
                        .train(self.index, params, *lr, client_id, round)
                        .map(ReplyBody::Trained),
                    _ => Err(Error::Protocol(format!(
                        "worker {}: train for client {client_id} before any parameter update",
                        self.index
                    ))),
                };
                Handled::Reply(WorkerReply {
                    worker: self.index,
                    client_id: Some(client_id),
                    body,
                })
            }
            WorkerMessage::Evaluate { client_id } => {
                let body = match (&self.state, &self.params) {
                    (WorkerState::Ready, Some((params, _))) => self
                        .runner
                        .evaluate(self.index, params, client_id)
                        .map(ReplyBody::Evaluated),
                    _ => Err(Error::Protocol(format!(
                        "worker {}: evaluate for client {client_id} before any parameter update",
                        self.index
                    ))),
                };
                Handled::Reply(WorkerReply {
                    worker: self.index,
                    client_id: Some(client_id),
                    body,
                })
            }
            WorkerMessage::Terminate => Handled::Shutdown,
        }
    }
}

fn worker_thread(mut core: WorkerCore, rx: Receiver<WorkerMessage>, tx: Sender<WorkerReply>) {
    while let Ok(msg) = rx.recv() {
        match core.handle(msg) {
            Handled::Reply(reply) => {
                if tx.send(reply).is_err() {
                    break;
                }
            }
            Handled::Silent => {}
            Handled::Shutdown => break,
        }
    }
}

/// How the worker pool executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// K worker threads over channels.
    Threaded,
    /// The same protocol run synchronously on the calling thread.
    Inline,
}

enum Pool {
    Threaded {
        senders: Vec<Sender<WorkerMessage>>,
        replies: Receiver<WorkerReply>,
        joins: Vec<JoinHandle<()>>,
    },
    Inline {
        cores: Vec<WorkerCore>,
        queue: std::collections::VecDeque<WorkerReply>,
    },
}

impl Pool {
    fn new(mode: ExecMode, workers: usize, runner: &Arc<dyn ClientRunner>) -> Pool {
        match mode {
            ExecMode::Threaded => {
                let (reply_tx, replies) = channel();
                let mut senders = Vec::with_capacity(workers);
                let mut joins = Vec::with_capacity(workers);
                for k in 0..workers {
                    let (tx, rx) = channel();
                    let core = WorkerCore::new(k, Arc::clone(runner));
                    let reply_tx = reply_tx.clone();
                    joins.push(std::thread::spawn(move || worker_thread(core, rx, reply_tx)));
                    senders.push(tx);
                }
                Pool::Threaded { senders, replies, joins }
            }
            ExecMode::Inline => Pool::Inline {
                cores: (0..workers)
                    .map(|k| WorkerCore::new(k, Arc::clone(runner)))
                    .collect(),
                queue: std::collections::VecDeque::new(),
            },
        }
    }

    fn workers(&self) -> usize {
        match self {
            Pool::Threaded { senders, .. } => senders.len(),
            Pool::Inline { cores, .. } => cores.len(),
        }
    }

    fn send(&mut self, worker: usize, msg: WorkerMessage) -> Result<()> {
        match self {
            Pool::Threaded { senders, .. } => senders[worker]
                .send(msg)
                .map_err(|_| Error::Protocol(format!("worker {worker} hung up"))),
            Pool::Inline { cores, queue } => {
                match cores[worker].handle(msg) {
                    Handled::Reply(reply) => queue.push_back(reply),
                    Handled::Silent | Handled::Shutdown => {}
                }
                Ok(())
            }
        }
    }

    fn recv(&mut self) -> Result<WorkerReply> {
        match self {
            Pool::Threaded { replies, .. } => replies
                .recv()
                .map_err(|_| Error::Protocol("all workers hung up".into())),
            Pool::Inline { queue, .. } => queue
                .pop_front()
                .ok_or_else(|| Error::Protocol("no pending worker replies".into())),
        }
    }

    fn shutdown(&mut self) {
        if let Pool::Threaded { senders, joins, .. } = self {
            for tx in senders.iter() {
                let _ = tx.send(WorkerMessage::Terminate);
            }
            for j in joins.drain(..) {
                let _ = j.join();
            }
        }
    }
}

/// Staleness simulation settings.
#[derive(Debug, Clone, Copy)]
pub struct StalenessConfig {
    /// Fraction of each round's responses deferred to the next round.
    pub fraction: f64,
    /// Replace the server lr with min(c_floor / delta, lr) as the model
    /// settles, so stale pushes shrink with the model's own movement.
    pub adaptive_lr: bool,
    pub c_floor: f64,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            adaptive_lr: false,
            c_floor: 1.0,
        }
    }
}

pub struct EngineConfig {
    pub workers: usize,
    pub mode: ExecMode,
    /// Client-side learning rate shipped in every parameter update.
    pub client_lr: f64,
    pub weight_scheme: WeightScheme,
    pub optimizer: ServerOptimizerState,
    pub dp: Option<DpConfig>,
    pub staleness: StalenessConfig,
    pub seed: u64,
}

/// The federated server: owns the global model, the worker pool, the stale
/// buffer, and the privacy accountant.
pub struct Engine {
    cfg: EngineConfig,
    pool: Pool,
    global: ParameterVector,
    optimizer: ServerOptimizerState,
    stale: StaleBuffer,
    accountant: Option<RdpAccountant>,
    round: u32,
    last_change: Option<ParameterVector>,
    last_delta: f64,
}

impl Engine {
    pub fn new(
        initial: ParameterVector,
        runner: Arc<dyn ClientRunner>,
        cfg: EngineConfig,
    ) -> Result<Self> {
        if cfg.workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if !cfg.client_lr.is_finite() || cfg.client_lr < 0.0 {
            return Err(Error::Config(format!(
                "client lr {} must be finite and >= 0",
                cfg.client_lr
            )));
        }
        if !(0.0..=1.0).contains(&cfg.staleness.fraction) {
            return Err(Error::Config(format!(
                "staleness fraction {} outside [0, 1]",
                cfg.staleness.fraction
            )));
        }
        let accountant = match &cfg.dp {
            Some(dp) => Some(RdpAccountant::new(dp.noise_multiplier()?)?),
            None => None,
        };
        let optimizer = cfg.optimizer.clone();
        let pool = Pool::new(cfg.mode, cfg.workers, &runner);
        Ok(Self {
            cfg,
            pool,
            global: initial,
            optimizer,
            stale: StaleBuffer::new(),
            accountant,
            round: 0,
            last_change: None,
            last_delta: 0.0,
        })
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn epsilon_spent(&self) -> Result<f64> {
        match (&self.accountant, &self.cfg.dp) {
            (Some(acc), Some(dp)) => acc.spend(dp.delta),
            _ => Ok(0.0),
        }
    }

    pub fn stale_pending(&self) -> usize {
        self.stale.len()
    }

    /// Runs one full round and advances the global model.
    pub fn run_round(&mut self, plan: &RoundPlan) -> Result<RoundMetrics> {
        if plan.round != self.round + 1 {
            return Err(Error::Protocol(format!(
                "round {} planned after round {}",
                plan.round, self.round
            )));
        }
        let start = Instant::now();
        let eta = self.effective_server_lr()?;

        let mut outcomes = self.dispatch_and_collect(plan)?;
        outcomes.sort_by_key(|o| o.pg.client_id);

        // Seeded deferral: these responses arrive one round late.
        let defer_count = ((plan.defer_fraction * outcomes.len() as f64).round() as usize)
            .min(outcomes.len());
        let defer_set: BTreeSet<usize> = if defer_count > 0 {
            rand::seq::index::sample(
                &mut rng::stream(self.cfg.seed, &[rng::tag("defer"), u64::from(plan.round)]),
                outcomes.len(),
                defer_count,
            )
            .iter()
            .collect()
        } else {
            BTreeSet::new()
        };
        let payload_bytes: u64 = outcomes.iter().map(|o| o.payload_bytes).sum();
        let idealized_bytes: f64 = outcomes.iter().map(|o| o.idealized_bytes).sum();
        let mut fresh = Vec::with_capacity(outcomes.len() - defer_count);
        let mut deferred = Vec::with_capacity(defer_count);
        for (i, o) in outcomes.into_iter().enumerate() {
            if defer_set.contains(&i) {
                deferred.push(o.pg);
            } else {
                fresh.push(o.pg);
            }
        }

        // Privacy applies where updates are produced, before any of them
        // (fresh or deferred) can reach an aggregate.
        if let Some(dp) = &self.cfg.dp {
            fresh = apply_dp(&fresh, dp)?;
            deferred = apply_dp(&deferred, dp)?;
        }

        let prior = self.stale.take(plan.round)?;
        let stale_used = prior.len() as u32;

        let mut stale_weight_sum = 0.0;
        let old_global = self.global.clone();
        if !fresh.is_empty() || !prior.is_empty() {
            let (mut agg, weights) =
                stale_aggregate(&fresh, &prior, &self.cfg.weight_scheme, plan.round)?;
            for pg in &prior {
                if !fresh.iter().any(|f| f.client_id == pg.client_id) {
                    stale_weight_sum += weights.get(pg.client_id).unwrap_or(0.0);
                }
            }
            if let Some(dp) = &self.cfg.dp {
                if dp.mode == DpMode::Global {
                    agg = apply_global_noise(&agg, dp, plan.round)?;
                }
            }
            let mut opt = self.optimizer.clone();
            opt.lr = eta;
            let (new_global, next_opt) = server_step(&opt, &self.global, &agg)?;
            self.optimizer = next_opt;
            self.global = new_global;
        }

        // Stale responses push along the previous round's change; their
        // worst-case displacement is eta times that change's norm.
        let (stale_error_norm, stale_error_bound) = match &self.last_change {
            Some(change) => {
                let (_, norm, bound) = stale_error_term(
                    eta,
                    change,
                    if stale_used > 0 { stale_weight_sum } else { 0.0 },
                )?;
                (norm, bound)
            }
            None => (0.0, 0.0),
        };

        let change = self.global.sub(&old_global)?;
        let delta_tau = change.l2_norm();
        self.last_change = Some(change);
        self.last_delta = delta_tau;

        if self.cfg.dp.is_some() {
            if let Some(acc) = self.accountant.take() {
                self.accountant = Some(acc.account_round());
            }
        }
        let epsilon_spent = self.epsilon_spent()?;

        self.stale.defer(deferred)?;
        self.round = plan.round;

        Ok(RoundMetrics {
            round: plan.round,
            cohort_size: plan.cohort.len() as u32,
            deferred: defer_count as u32,
            stale_used,
            delta_tau,
            eta_server: eta,
            stale_weight_sum,
            stale_error_norm,
            stale_error_bound,
            payload_bytes,
            idealized_bytes,
            epsilon_spent,
            wall: start.elapsed(),
        })
    }

    fn effective_server_lr(&self) -> Result<f64> {
        let configured = self.cfg.optimizer.lr;
        if self.cfg.staleness.adaptive_lr && self.round > 0 {
            staleness_lr(self.last_delta, self.cfg.staleness.c_floor, configured)
        } else {
            Ok(configured)
        }
    }

    /// Sends Update to every worker, prefills one Train per worker, then
    /// keeps every worker busy until the whole cohort has responded.
    fn dispatch_and_collect(&mut self, plan: &RoundPlan) -> Result<Vec<TrainOutcome>> {
        let k = self.pool.workers();
        for w in 0..k {
            self.pool.send(
                w,
                WorkerMessage::Update {
                    params: self.global.clone(),
                    lr: self.cfg.client_lr,
                },
            )?;
        }
        let mut pending = plan.cohort.iter().copied();
        let mut in_flight = 0usize;
        for w in 0..k {
            match pending.next() {
                Some(client_id) => {
                    self.pool
                        .send(w, WorkerMessage::Train { client_id, round: plan.round })?;
                    in_flight += 1;
                }
                None => break,
            }
        }
        let mut outcomes: Vec<TrainOutcome> = Vec::with_capacity(plan.cohort.len());
        let mut retried: BTreeSet<u32> = BTreeSet::new();
        while outcomes.len() < plan.cohort.len() {
            if in_flight == 0 {
                return Err(Error::Protocol("round stalled with no replies in flight".into()));
            }
            let reply = self.pool.recv()?;
            in_flight -= 1;
            match reply.body {
                Ok(ReplyBody::Trained(outcome)) => {
                    outcomes.push(outcome);
                    if let Some(client_id) = pending.next() {
                        self.pool.send(
                            reply.worker,
                            WorkerMessage::Train { client_id, round: plan.round },
                        )?;
                        in_flight += 1;
                    }
                }
                Ok(ReplyBody::Evaluated(_)) => {
                    return Err(Error::Protocol(
                        "evaluation reply during training round".into(),
                    ));
                }
                Err(err) => {
                    let client_id = reply.client_id.ok_or_else(|| {
                        Error::Protocol("failure reply without client id".into())
                    })?;
                    if !retried.insert(client_id) {
                        return Err(Error::Protocol(format!(
                            "round {}: client {client_id} failed twice, last error: {err}",
                            plan.round
                        )));
                    }
                    // One retry on the next worker over; it already holds
                    // this round's parameters. The failed worker takes the
                    // next pending client instead.
                    let target = (reply.worker + 1) % k;
                    self.pool
                        .send(target, WorkerMessage::Train { client_id, round: plan.round })?;
                    in_flight += 1;
                    if let Some(next_client) = pending.next() {
                        self.pool.send(
                            reply.worker,
                            WorkerMessage::Train { client_id: next_client, round: plan.round },
                        )?;
                        in_flight += 1;
                    }
                }
            }
        }
        // Exactly-once accounting: every cohort member answered, none twice.
        let mut got: Vec<u32> = outcomes.iter().map(|o| o.pg.client_id).collect();
        got.sort_unstable();
        let mut want = plan.cohort.clone();
        want.sort_unstable();
        if got != want {
            return Err(Error::Protocol(format!(
                "round {}: collected clients {got:?} do not match cohort {want:?}",
                plan.round
            )));
        }
        Ok(outcomes)
    }

    /// Evaluates the current global parameters on a client id (or the
    /// reserved test id) through worker 0.
    pub fn evaluate_on(&mut self, client_id: u32) -> Result<EvalMetrics> {
        self.pool.send(
            0,
            WorkerMessage::Update {
                params: self.global.clone(),
                lr: self.cfg.client_lr,
            },
        )?;
        self.pool.send(0, WorkerMessage::Evaluate { client_id })?;
        let reply = self.pool.recv()?;
        match reply.body {
            Ok(ReplyBody::Evaluated(metrics)) => Ok(metrics),
            Ok(ReplyBody::Trained(_)) => {
                Err(Error::Protocol("training reply during evaluation".into()))
            }
            Err(e) => Err(e),
        }
    }

    pub fn shutdown(&mut self) {
        self.pool.shutdown();
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.pool.shutdown();
    }
}
