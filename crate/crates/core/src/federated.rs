//! Federated training with partial transmission: each round every client
//! trains locally, then independently sends (or withholds) the real and the
//! imaginary half of its parameters. The server averages each half over the
//! clients that sent it.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctensor::ComplexTensor;
use crate::cvnn::{NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::training::{evaluate, local_train, sampler_seed, BatchSampler, EvalMetrics, Example, TrainConfig};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Parameter containers whose real and imaginary halves can be addressed
/// separately. Plane order must be stable for a given layout.
pub trait SplitParams: Clone + Send + Sync {
    fn real_planes(&self) -> Vec<&[f64]>;
    fn imag_planes(&self) -> Vec<&[f64]>;
    fn real_planes_mut(&mut self) -> Vec<&mut [f64]>;
    fn imag_planes_mut(&mut self) -> Vec<&mut [f64]>;
}

impl SplitParams for ComplexTensor {
    fn real_planes(&self) -> Vec<&[f64]> {
        vec![self.re()]
    }
    fn imag_planes(&self) -> Vec<&[f64]> {
        vec![self.im()]
    }
    fn real_planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.re_mut()]
    }
    fn imag_planes_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.im_mut()]
    }
}

/// modReLU offsets are real and travel with the real half.
impl SplitParams for NetParams {
    fn real_planes(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.tensors().into_iter().map(|t| t.re()).collect();
        v.push(&self.modrelu_q);
        v
    }
    fn imag_planes(&self) -> Vec<&[f64]> {
        self.tensors().into_iter().map(|t| t.im()).collect()
    }
    fn real_planes_mut(&mut self) -> Vec<&mut [f64]> {
        let NetParams {
            conv1_kernel,
            conv1_bias,
            conv2_kernel,
            conv2_bias,
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
            out_weight,
            out_bias,
            modrelu_q,
            ..
        } = self;
        vec![
            conv1_kernel.re_mut(),
            conv1_bias.re_mut(),
            conv2_kernel.re_mut(),
            conv2_bias.re_mut(),
            fc1_weight.re_mut(),
            fc1_bias.re_mut(),
            fc2_weight.re_mut(),
            fc2_bias.re_mut(),
            out_weight.re_mut(),
            out_bias.re_mut(),
            modrelu_q.as_mut_slice(),
        ]
    }
    fn imag_planes_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors_mut().into_iter().map(|t| t.im_mut()).collect()
    }
}

/// Per-client flags for one round: `r[u]` sends the real half, `m[u]` the imaginary half.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionMask {
    pub r: Vec<bool>,
    pub m: Vec<bool>,
}

impl TransmissionMask {
    pub fn full(clients: usize) -> Self {
        Self {
            r: vec![true; clients],
            m: vec![true; clients],
        }
    }

    pub fn none(clients: usize) -> Self {
        Self {
            r: vec![false; clients],
            m: vec![false; clients],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPolicy {
    #[default]
    AlwaysFull,
    Bernoulli {
        p_r: f64,
        p_m: f64,
    },
    FixedSchedule {
        masks: Vec<TransmissionMask>,
    },
}

impl MaskPolicy {
    pub fn validate(&self, clients: usize, rounds: usize) -> Result<()> {
        match self {
            MaskPolicy::AlwaysFull => Ok(()),
            MaskPolicy::Bernoulli { p_r, p_m } => {
                for (name, p) in [("p_r", p_r), ("p_m", p_m)] {
                    if !(0.0..=1.0).contains(p) {
                        return Err(Error::config(format!("mask probability {name} = {p} outside [0, 1]")));
                    }
                }
                Ok(())
            }
            MaskPolicy::FixedSchedule { masks } => {
                if masks.len() < rounds {
                    return Err(Error::config(format!(
                        "mask schedule has {} entries for {rounds} rounds",
                        masks.len()
                    )));
                }
                if let Some(bad) = masks.iter().position(|m| m.r.len() != clients || m.m.len() != clients) {
                    return Err(Error::config(format!(
                        "mask schedule entry {bad} does not have {clients} clients"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Produces the mask of each round from a policy and its own random stream.
#[derive(Clone, Debug)]
pub struct MaskSampler {
    policy: MaskPolicy,
    clients: usize,
    rng: ChaCha8Rng,
}

impl MaskSampler {
    pub fn new(policy: MaskPolicy, clients: usize, seed: u64) -> Self {
        Self {
            policy,
            clients,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x3A5C_0000_0000_0000),
        }
    }

    pub fn next(&mut self, t: usize) -> Result<TransmissionMask> {
        match &self.policy {
            MaskPolicy::AlwaysFull => Ok(TransmissionMask::full(self.clients)),
            MaskPolicy::Bernoulli { p_r, p_m } => {
                let (p_r, p_m) = (*p_r, *p_m);
                let mut mask = TransmissionMask::none(self.clients);
                for u in 0..self.clients {
                    mask.r[u] = self.rng.random_bool(p_r);
                    mask.m[u] = self.rng.random_bool(p_m);
                }
                Ok(mask)
            }
            MaskPolicy::FixedSchedule { masks } => masks
                .get(t.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| Error::config(format!("no scheduled mask for round {t}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Sample-weighted mean over the clients that transmitted a half.
    #[default]
    Weighted,
    /// Unweighted sum of transmitted halves divided by the transmitted sample count.
    Literal,
}

fn aggregate_half(previous: &[&[f64]], locals: &[Vec<&[f64]>], weights: &[Option<f64>], out: &mut [&mut [f64]]) {
    let senders: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter_map(|(u, w)| w.map(|w| (u, w)))
        .collect();
    for (p, dst) in out.iter_mut().enumerate() {
        if senders.is_empty() {
            dst.copy_from_slice(previous[p]);
            continue;
        }
        let (u0, w0) = senders[0];
        for (d, x) in dst.iter_mut().zip(locals[u0][p]) {
            *d = w0 * x;
        }
        for &(u, w) in &senders[1..] {
            for (d, x) in dst.iter_mut().zip(locals[u][p]) {
                *d += w * x;
            }
        }
    }
}

fn check_layout(a: &[&[f64]], b: &[&[f64]]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
}

/// Server-side aggregation of one round. With no sender for a half, that
/// half of `previous` is kept bit for bit.
pub fn aggregate<P: SplitParams>(
    locals: &[P],
    batch_sizes: &[usize],
    mask: &TransmissionMask,
    previous: &P,
    mode: AggregationMode,
) -> Result<P> {
    let u = locals.len();
    if batch_sizes.len() != u || mask.r.len() != u || mask.m.len() != u {
        return Err(Error::dim(
            "aggregate",
            format!(
                "{u} local models, {} batch sizes, mask lengths {} and {}",
                batch_sizes.len(),
                mask.r.len(),
                mask.m.len()
            ),
        ));
    }
    let (prev_re, prev_im) = (previous.real_planes(), previous.imag_planes());
    let local_re: Vec<Vec<&[f64]>> = locals.iter().map(|p| p.real_planes()).collect();
    let local_im: Vec<Vec<&[f64]>> = locals.iter().map(|p| p.imag_planes()).collect();
    if !local_re.iter().all(|l| check_layout(l, &prev_re)) || !local_im.iter().all(|l| check_layout(l, &prev_im)) {
        return Err(Error::dim(
            "aggregate",
            "local model layouts differ from the global model",
        ));
    }

    let weights = |flags: &[bool]| -> Vec<Option<f64>> {
        let total: usize = batch_sizes.iter().zip(flags).filter(|(_, &f)| f).map(|(b, _)| b).sum();
        batch_sizes
            .iter()
            .zip(flags)
            .map(|(&b, &f)| {
                (f && total > 0).then(|| match mode {
                    AggregationMode::Weighted => b as f64 / total as f64,
                    AggregationMode::Literal => 1.0 / total as f64,
                })
            })
            .collect()
    };
    let (w_re, w_im) = (weights(&mask.r), weights(&mask.m));

    let mut out = previous.clone();
    aggregate_half(&prev_re, &local_re, &w_re, &mut out.real_planes_mut());
    aggregate_half(&prev_im, &local_im, &w_im, &mut out.imag_planes_mut());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    /// Client count `U`.
    pub clients: usize,
    pub mask_policy: MaskPolicy,
    pub aggregation: AggregationMode,
    /// Seed of the mask stream.
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 6,
            mask_policy: MaskPolicy::AlwaysFull,
            aggregation: AggregationMode::Weighted,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, rounds: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("fed.clients must be at least 1"));
        }
        self.mask_policy.validate(self.clients, rounds)
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub params: NetParams,
    /// Samples used this round, `|B_u|`.
    pub batch_size: usize,
    /// Mean batch loss over the local steps.
    pub loss: f64,
}

/// One participant. Its shard never leaves the struct; the only way in is a
/// broadcast parameter set and the only way out is a [`ClientUpdate`].
#[derive(Debug)]
pub struct Client {
    id: usize,
    shard: Vec<Example>,
    sampler: BatchSampler,
    local: NetParams,
}

impl Client {
    pub fn new(id: usize, shard: Vec<Example>, train_seed: u64, init: NetParams) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Client {
                client: id,
                source: Box::new(Error::Contract("empty shard".into())),
            });
        }
        let sampler = BatchSampler::new(shard.len(), sampler_seed(train_seed, id));
        Ok(Self {
            id,
            shard,
            sampler,
            local: init,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }

    /// Hash of the client's private shard (ids and every value bit).
    pub fn data_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for ex in &self.shard {
            ex.id.hash(&mut h);
            for v in ex
                .input
                .re()
                .iter()
                .chain(ex.input.im())
                .chain(&ex.position)
                .chain([&ex.toa])
            {
                v.to_bits().hash(&mut h);
            }
            ex.los.hash(&mut h);
        }
        h.finish()
    }

    /// Trains from `broadcast` (or from the client's own initial parameters
    /// when nothing has been broadcast yet).
    pub fn train_round(
        &mut self,
        broadcast: Option<&NetParams>,
        net: &NetConfig,
        train: &TrainConfig,
        loss: &LossConfig,
        lr: f64,
    ) -> Result<ClientUpdate> {
        if let Some(g) = broadcast {
            self.local = g.clone();
        }
        let out = local_train(&self.local, net, &self.shard, train, loss, &mut self.sampler, lr).map_err(|e| {
            Error::Client {
                client: self.id,
                source: Box::new(e),
            }
        })?;
        self.local = out.params.clone();
        Ok(ClientUpdate {
            params: out.params,
            batch_size: out.samples,
            loss: out.losses.iter().sum::<f64>() / out.losses.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub lr: f64,
    /// Sample-weighted mean of the client losses.
    pub global_loss: f64,
    pub client_losses: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub r: Vec<bool>,
    pub m: Vec<bool>,
    /// Held-out metrics of the aggregated model, when an evaluation set is given.
    pub eval: Option<EvalMetrics>,
}

/// Server state between rounds.
#[derive(Debug)]
pub struct FedState {
    pub global: NetParams,
    clients: Vec<Client>,
    masks: MaskSampler,
    net: NetConfig,
    train: TrainConfig,
    loss: LossConfig,
    aggregation: AggregationMode,
    rounds_done: usize,
}

impl FedState {
    /// Every client starts from `init`, which is also the initial global model.
    pub fn new(
        net: &NetConfig,
        train: &TrainConfig,
        loss: &LossConfig,
        fed: &FedConfig,
        init: &NetParams,
        shards: Vec<Vec<Example>>,
    ) -> Result<Self> {
        fed.validate(train.iterations)?;
        if shards.len() != fed.clients {
            return Err(Error::config(format!(
                "{} shards for {} clients",
                shards.len(),
                fed.clients
            )));
        }
        init.check_layout(net)?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(u, s)| Client::new(u, s, train.seed, init.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            global: init.clone(),
            clients,
            masks: MaskSampler::new(fed.mask_policy.clone(), fed.clients, fed.seed),
            net: net.clone(),
            train: train.clone(),
            loss: loss.clone(),
            aggregation: fed.aggregation,
            rounds_done: 0,
        })
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    /// Runs round `t` (1-based, in order).
    pub fn run_round(&mut self, t: usize, eval_set: Option<&[Example]>) -> Result<RoundRecord> {
        if t != self.rounds_done + 1 {
            return Err(Error::Contract(format!(
                "round {t} requested after {} completed rounds",
                self.rounds_done
            )));
        }
        let lr = self.train.lr(t);
        let broadcast = (t > 1).then_some(&self.global);
        let (net, train, loss) = (&self.net, &self.train, &self.loss);
        let updates = self
            .clients
            .par_iter_mut()
            .map(|c| c.train_round(broadcast, net, train, loss, lr))
            .collect::<Result<Vec<_>>>()?;

        let mask = self.masks.next(t)?;
        let locals: Vec<NetParams> = updates.iter().map(|u| u.params.clone()).collect();
        let batch_sizes: Vec<usize> = updates.iter().map(|u| u.batch_size).collect();
        self.global = aggregate(&locals, &batch_sizes, &mask, &self.global, self.aggregation)?;
        self.rounds_done = t;

        let total: usize = batch_sizes.iter().sum();
        let global_loss = updates.iter().map(|u| u.loss * u.batch_size as f64).sum::<f64>() / total as f64;
        let eval = match eval_set {
            Some(d) if !d.is_empty() => Some(evaluate(&self.global, &self.net, &self.loss, d)?.0),
            _ => None,
        };
        Ok(RoundRecord {
            t,
            lr,
            global_loss,
            client_losses: updates.iter().map(|u| u.loss).collect(),
            batch_sizes,
            r: mask.r,
            m: mask.m,
            eval,
        })
    }
}

#[derive(Debug)]
pub struct FedOutcome {
    pub records: Vec<RoundRecord>,
    pub global: NetParams,
}

/// `train.iterations` rounds of federated training.
pub fn run_experiment(
    net: &NetConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    fed: &FedConfig,
    init: &NetParams,
    shards: Vec<Vec<Example>>,
    eval_set: Option<&[Example]>,
) -> Result<FedOutcome> {
    let mut state = FedState::new(net, train, loss, fed, init, shards)?;
    let mut records = Vec::with_capacity(train.iterations);
    for t in 1..=train.iterations {
        records.push(state.run_round(t, eval_set)?);
    }
    Ok(FedOutcome {
        records,
        global: state.global,
    })
}

// ---------------------------------------------------------------------------
// Trace files

fn flags(v: &[bool]) -> String {
    v.iter()
        .map(|&b| if b { "1" } else { "0" })
        .collect::<Vec<_>>()
        .join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const TRACE_CSV_HEADER: &str =
    "schema_version,t,lr,global_loss,mean_positioning_error,toa_mse,los_accuracy,client_losses,r_mask,m_mask";

pub fn trace_csv(records: &[RoundRecord]) -> String {
    let mut s = String::from(TRACE_CSV_HEADER);
    s.push('\n');
    for r in records {
        let e = r.eval.as_ref();
        let losses: Vec<String> = r.client_losses.iter().map(|l| l.to_string()).collect();
        s.push_str(&format!(
            "{TRACE_SCHEMA_VERSION},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.lr,
            r.global_loss,
            opt(e.and_then(|e| e.mean_positioning_error)),
            opt(e.and_then(|e| e.toa_mse)),
            opt(e.and_then(|e| e.los_accuracy)),
            losses.join(";"),
            flags(&r.r),
            flags(&r.m),
        ));
    }
    s
}

#[derive(Serialize)]
struct TraceLine<'a> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

pub fn trace_jsonl(records: &[RoundRecord]) -> String {
    records
        .iter()
        .map(|record| {
            let line = TraceLine {
                schema_version: TRACE_SCHEMA_VERSION,
                record,
            };
            serde_json::to_string(&line).expect("round records serialise") + "\n"
        })
        .collect()
}
