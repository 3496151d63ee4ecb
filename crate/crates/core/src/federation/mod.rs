//! Federated round loop: client selection, mask-pruned broadcast and upload,
//! sample-weighted averaging, mask arbitration, rank detection with module
//! freezing, and exact byte accounting.

mod payload;

pub use payload::{
    comm_prune_encode, decode_apply, pack_bits, unpack_bits, Layout, Payload, SiteShape, HEADER_BYTES, MAGIC,
    VERSION,
};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig, Method};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{dir_discrepancy, mag_discrepancy};
use crate::numerics::{Matrix, Rng};
use crate::rank_alloc::{arbitrate, gen_local_mask, BudgetSchedule, RankMask};
use crate::trainer::{self, local_train, round_lr, Adam, LocalTrainConfig, TinyModel, NUM_SITES, SITE_NAMES};

/// Uniform sample of `k` distinct ids from `0..all`, returned sorted.
pub fn clients_select(rng: &mut Rng, all: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::contract("must select at least one client"));
    }
    if k > all {
        return Err(Error::contract(format!("cannot select {k} of {all} clients")));
    }
    let mut ids: Vec<usize> = (0..all).collect();
    for i in 0..k {
        let j = i + rng.below(all - i);
        ids.swap(i, j);
    }
    let mut picked = ids[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Sample-weighted mean of retained values and head entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub sites: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

/// Weighted average with weights `n_k / sum n`, accumulated in `f64` in
/// ascending client-id order so the result does not depend on arrival order.
pub fn fedavg(payloads: &[(usize, Payload)], mask: &RankMask) -> Result<Aggregate> {
    let Some((_, first)) = payloads.first() else {
        return Err(Error::contract("fedavg needs at least one payload"));
    };
    if payloads.iter().any(|(_, p)| &p.mask != mask) {
        return Err(Error::contract("all payloads must carry the aggregation mask"));
    }
    let total: u64 = payloads.iter().map(|(_, p)| u64::from(p.sample_count)).sum();
    if total == 0 {
        return Err(Error::contract("aggregation weights sum to zero"));
    }
    let mut order: Vec<&(usize, Payload)> = payloads.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let mut sites: Vec<Vec<f64>> = first.sites.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut head = vec![0.0; first.head.len()];
    for (_, p) in order {
        let w = f64::from(p.sample_count) / total as f64;
        if p.sites.len() != sites.len() || p.head.len() != head.len() {
            return Err(Error::contract("payload sections differ in size"));
        }
        for (acc, vals) in sites.iter_mut().zip(&p.sites) {
            if acc.len() != vals.len() {
                return Err(Error::contract("payload sections differ in size"));
            }
            for (a, &v) in acc.iter_mut().zip(vals) {
                *a += w * f64::from(v);
            }
        }
        for (a, &v) in head.iter_mut().zip(&p.head) {
            *a += w * f64::from(v);
        }
    }
    Ok(Aggregate { sites, head })
}

/// Writes an aggregate into `model` at the positions retained by `mask`.
pub fn apply_aggregate(model: &mut TinyModel, agg: &Aggregate, mask: &RankMask) -> Result<()> {
    payload::write_values(model, mask, &agg.sites, &agg.head)
}

/// Prunes every site by `mask` and returns the sites whose live rank fell to
/// zero in this call. With `freeze`, every site with no live triplet is
/// flagged frozen.
pub fn rank_detect(model: &mut TinyModel, mask: &RankMask, freeze: bool) -> Result<Vec<usize>> {
    Layout::of(model).check_mask(mask)?;
    let before: Vec<usize> = model.sites().iter().map(|s| s.live_rank()).collect();
    for (n, site) in model.sites_mut().iter_mut().enumerate() {
        site.apply_mask(mask.site(n))?;
    }
    let newly: Vec<usize> = model
        .sites()
        .iter()
        .enumerate()
        .filter(|(n, s)| before[*n] > 0 && s.live_rank() == 0)
        .map(|(n, _)| n)
        .collect();
    if freeze {
        let frozen = model.sites().iter().map(|s| s.live_rank() == 0).collect();
        model.set_frozen(frozen)?;
    }
    Ok(newly)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundBytes {
    pub bytes_down: usize,
    pub bytes_up: usize,
    /// Retained-triplet bytes of one broadcast payload.
    pub adapter_param_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLedger {
    rounds: Vec<RoundBytes>,
    total_down: usize,
    total_up: usize,
}

impl CommLedger {
    pub fn record(&mut self, entry: RoundBytes) {
        self.total_down += entry.bytes_down;
        self.total_up += entry.bytes_up;
        self.rounds.push(entry);
    }

    pub fn rounds(&self) -> &[RoundBytes] {
        &self.rounds
    }

    pub fn total_down(&self) -> usize {
        self.total_down
    }

    pub fn total_up(&self) -> usize {
        self.total_up
    }

    pub fn total(&self) -> usize {
        self.total_down + self.total_up
    }
}

/// Protocol settings shared by every round of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub method: Method,
    pub clients_per_round: usize,
    pub total_rounds: usize,
    pub lr: f64,
    pub train: LocalTrainConfig,
    pub threshold: f64,
    pub schedule: BudgetSchedule,
    pub module_pruning: bool,
    pub eval_site: usize,
}

impl FederationConfig {
    pub fn from_experiment(c: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            method: c.method,
            clients_per_round: c.clients_per_round,
            total_rounds: c.total_rounds,
            lr: c.lr,
            train: c.train_config(),
            threshold: c.t_h,
            schedule: c.schedule()?,
            module_pruning: c.module_pruning,
            eval_site: c.eval_site,
        })
    }
}

pub struct ServerState {
    pub model: TinyModel,
    pub mask: RankMask,
    pub round: usize,
    pub ledger: CommLedger,
    rng: Rng,
    digest: Sha256,
}

impl ServerState {
    pub fn new(model: TinyModel, rng: Rng) -> Self {
        let mask = RankMask::from_adapters(model.sites());
        Self {
            model,
            mask,
            round: 0,
            ledger: CommLedger::default(),
            rng,
            digest: Sha256::new(),
        }
    }

    /// SHA-256 over every byte transmitted so far, in protocol order.
    pub fn payload_digest(&self) -> String {
        hex(&self.digest.clone().finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ClientState {
    pub id: usize,
    pub shard: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub avg_rank: f64,
    pub frozen_sites: usize,
    pub mag: f64,
    /// `None` when a compared update has zero norm.
    pub dir: Option<f64>,
    pub trainable_params: usize,
    pub adapter_param_bytes: usize,
    /// Retained triplets in the mask used for this round's traffic.
    pub mask_count: usize,
}

struct ClientResult {
    id: usize,
    upload: Vec<u8>,
    votes: Option<RankMask>,
    loss: f64,
    delta: Matrix,
}

/// Read-only state shared by the clients of one round.
struct RoundContext<'a> {
    template: &'a TinyModel,
    broadcast: &'a Payload,
    server_mask: &'a RankMask,
    layout: &'a Layout,
    cfg: &'a FederationConfig,
    t: usize,
    rng: &'a Rng,
}

fn client_round(id: usize, shard: &Dataset, ctx: &RoundContext<'_>) -> Result<ClientResult> {
    let RoundContext {
        template,
        broadcast,
        server_mask,
        layout,
        cfg,
        t,
        rng,
    } = *ctx;
    let mut local = template.clone();
    decode_apply(&mut local, broadcast, server_mask)?;
    if cfg.module_pruning {
        let frozen = local.sites().iter().map(|s| s.live_rank() == 0).collect();
        local.set_frozen(frozen)?;
    }
    let mut opt = Adam::new();
    let lr = round_lr(cfg.lr, t, cfg.total_rounds);
    let mut client_rng = rng.fork_str("client").fork(id as u64).fork(t as u64);
    let stats = local_train(&mut local, &mut opt, shard, &mut client_rng, cfg.train, lr)?;
    let votes = if cfg.method.adaptive() {
        Some(gen_local_mask(local.sites(), t, &cfg.schedule)?)
    } else {
        None
    };
    let samples = u32::try_from(shard.len()).map_err(|_| Error::contract("shard too large"))?;
    let mut upload = comm_prune_encode(&local, server_mask, samples, t as u32)?.to_bytes(layout)?;
    if let Some(v) = &votes {
        for site in v.sites() {
            pack_bits(site, &mut upload);
        }
    }
    Ok(ClientResult {
        id,
        upload,
        votes,
        loss: stats.mean_loss,
        delta: local.sites()[cfg.eval_site].delta_w(),
    })
}

/// Splits an upload into its payload and the optional trailing vote mask.
fn split_upload(bytes: &[u8], layout: &Layout, with_votes: bool) -> Result<(Payload, Option<RankMask>)> {
    if !with_votes {
        return Ok((Payload::from_bytes(bytes, layout)?, None));
    }
    let vote_len = layout.mask_bytes();
    if bytes.len() < vote_len {
        return Err(Error::CorruptPayload("upload shorter than its vote mask".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - vote_len);
    let payload = Payload::from_bytes(body, layout)?;
    let mut pos = 0;
    let mut sites = Vec::with_capacity(layout.sites.len());
    for s in &layout.sites {
        let len = s.r_init.div_ceil(8);
        sites.push(unpack_bits(&tail[pos..pos + len], s.r_init)?);
        pos += len;
    }
    Ok((payload, Some(RankMask::new(sites))))
}

/// Executes one communication round and returns its record.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientState],
    cfg: &FederationConfig,
    val: &Dataset,
) -> Result<RoundRecord> {
    let t = server.round;
    if t >= cfg.total_rounds {
        return Err(Error::contract("all rounds have already run"));
    }
    if cfg.eval_site >= NUM_SITES {
        return Err(Error::contract("eval_site out of range"));
    }
    let layout = Layout::of(&server.model);
    let mask = server.mask.clone();

    let selected = clients_select(&mut server.rng.fork_str("select").fork(t as u64), clients.len(), cfg.clients_per_round)?;
    let broadcast_bytes = comm_prune_encode(&server.model, &mask, 0, t as u32)?.to_bytes(&layout)?;
    let expected = layout.payload_size(&mask);
    if broadcast_bytes.len() != expected {
        return Err(Error::contract(format!(
            "broadcast is {} bytes, expected {expected}",
            broadcast_bytes.len()
        )));
    }
    let broadcast = Payload::from_bytes(&broadcast_bytes, &layout)?;

    let ctx = RoundContext {
        template: &server.model,
        broadcast: &broadcast,
        server_mask: &mask,
        layout: &layout,
        cfg,
        t,
        rng: &server.rng,
    };
    let results: Vec<ClientResult> = selected
        .par_iter()
        .map(|&id| client_round(id, &clients[id].shard, &ctx))
        .collect::<Result<_>>()?;

    let with_votes = cfg.method.adaptive();
    let vote_bytes = if with_votes { layout.mask_bytes() } else { 0 };
    let mut uploads = Vec::with_capacity(results.len());
    let mut votes = Vec::with_capacity(results.len());
    let mut bytes_up = 0;
    server.digest.update(&broadcast_bytes);
    for r in &results {
        if r.upload.len() != expected + vote_bytes {
            return Err(Error::contract(format!(
                "upload from client {} is {} bytes, expected {}",
                r.id,
                r.upload.len(),
                expected + vote_bytes
            )));
        }
        bytes_up += r.upload.len();
        server.digest.update(&r.upload);
        let (payload, v) = split_upload(&r.upload, &layout, with_votes)?;
        if v != r.votes {
            return Err(Error::contract("vote mask did not survive encoding"));
        }
        uploads.push((r.id, payload));
        votes.extend(v);
    }
    let bytes_down = broadcast_bytes.len() * selected.len();

    let agg = fedavg(&uploads, &mask)?;
    apply_aggregate(&mut server.model, &agg, &mask)?;

    let global_delta = server.model.sites()[cfg.eval_site].delta_w();
    let locals: Vec<Matrix> = results.iter().map(|r| r.delta.clone()).collect();
    let mag = mag_discrepancy(&global_delta, &locals)?;
    let dir = match dir_discrepancy(&global_delta, &locals) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };

    let next_mask = if with_votes {
        arbitrate(&votes, cfg.threshold, &mask)?
    } else {
        mask.clone()
    };
    rank_detect(&mut server.model, &next_mask, cfg.module_pruning)?;
    server.mask = next_mask;

    let entry = RoundBytes {
        bytes_down,
        bytes_up,
        adapter_param_bytes: layout.adapter_param_bytes(&mask),
    };
    server.ledger.record(entry);
    server.round += 1;

    let train_loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
    Ok(RoundRecord {
        round: t,
        bytes_up,
        bytes_down,
        train_loss,
        val_acc: trainer::evaluate(&server.model, val)?,
        avg_rank: server.model.average_live_rank(),
        frozen_sites: server.model.frozen().iter().filter(|f| **f).count(),
        mag,
        dir,
        trainable_params: server.model.trainable_param_count(),
        adapter_param_bytes: entry.adapter_param_bytes,
        mask_count: mask.count(),
    })
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub method: Method,
    pub records: Vec<RoundRecord>,
    pub final_model: TinyModel,
    pub final_mask: RankMask,
    pub test_accuracy: f64,
    pub pretrain_accuracy: f64,
    pub ledger: CommLedger,
    /// Hex SHA-256 over all transmitted bytes.
    pub payload_digest: String,
}

impl RunArtifact {
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round,method,bytes_up,bytes_down,train_loss,val_acc,avg_rank,frozen_sites,mag,dir\n");
        for r in &self.records {
            let dir = r.dir.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                self.method,
                r.bytes_up,
                r.bytes_down,
                r.train_loss,
                r.val_acc,
                r.avg_rank,
                r.frozen_sites,
                r.mag,
                dir
            ));
        }
        out
    }

    /// Final live rank of every adapter site.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("site,name,r_init,final_rank\n");
        for (n, site) in self.final_model.sites().iter().enumerate() {
            out.push_str(&format!("{n},{},{},{}\n", SITE_NAMES[n], site.r_init(), site.live_rank()));
        }
        out
    }

    pub fn summary(&self) -> String {
        let gb = self.ledger.total() as f64 / 1e9;
        format!(
            "method={} final_test_acc={} total_bytes={} total_gb={} up_bytes={} down_bytes={} final_mask_count={} payload_sha256={}\n",
            self.method,
            self.test_accuracy,
            self.ledger.total(),
            gb,
            self.ledger.total_up(),
            self.ledger.total_down(),
            self.final_mask.count(),
            self.payload_digest
        )
    }
}

/// Datasets and client shards derived from a config.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: data::Split,
    pub shards: Vec<Vec<usize>>,
}

const PRETRAIN_SAMPLES: usize = 2000;

/// Loads or generates the dataset, splits it 8:1:1 and partitions the
/// training rows across clients.
pub fn prepare_data(config: &ExperimentConfig) -> Result<Prepared> {
    let root = Rng::new(config.seed);
    let dataset = match &config.data {
        DataSource::Synthetic => data::gen_synthetic(
            &mut root.fork_str("data"),
            config.n,
            config.d,
            config.classes,
            config.margin,
        )?,
        DataSource::Csv(path) => {
            let ds = data::load_csv(path)?;
            if ds.dim() != config.d || ds.num_classes != config.classes {
                return Err(Error::Config(format!(
                    "{} has d={} and {} classes but the config says d={} and classes={}",
                    path.display(),
                    ds.dim(),
                    ds.num_classes,
                    config.d,
                    config.classes
                )));
            }
            ds
        }
    };
    let split = data::split(&dataset, &mut root.fork_str("split"))?;
    let train = dataset.subset(&split.train);
    let spec = config.partition_spec(root.fork_str("partition").next_u64());
    let shards = data::partition(&train, &spec)?;
    Ok(Prepared {
        dataset,
        split,
        shards,
    })
}

/// Runs all rounds of one experiment. Identical configs give identical
/// artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifact> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let prepared = prepare_data(config)?;
    let train = prepared.dataset.subset(&prepared.split.train);
    let val = prepared.dataset.subset(&prepared.split.val);
    let test = prepared.dataset.subset(&prepared.split.test);

    let pretrain_ds = data::gen_synthetic(
        &mut root.fork_str("pretrain-data"),
        PRETRAIN_SAMPLES,
        config.d,
        config.classes,
        config.margin,
    )?;
    let base = trainer::pretrain_base(&mut root.fork_str("base"), &pretrain_ds, config.pretrain_epochs)?;
    let model = TinyModel::new(
        &mut root.fork_str("adapters"),
        &base.weights,
        config.classes,
        &config.adapter_config(),
    )?;

    let clients: Vec<ClientState> = prepared
        .shards
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientState {
            id,
            shard: train.subset(idx),
        })
        .collect();
    let fed = FederationConfig::from_experiment(config)?;
    let mut server = ServerState::new(model, root.fork_str("federation"));
    let mut records = Vec::with_capacity(config.total_rounds);
    for _ in 0..config.total_rounds {
        records.push(run_round(&mut server, &clients, &fed, &val)?);
    }
    Ok(RunArtifact {
        method: config.method,
        records,
        test_accuracy: trainer::evaluate(&server.model, &test)?,
        pretrain_accuracy: base.accuracy,
        payload_digest: server.payload_digest(),
        final_mask: server.mask.clone(),
        ledger: server.ledger.clone(),
        final_model: server.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterConfig, Flavor};

    fn payload_with(value: f32, count: u32) -> Payload {
        Payload {
            round: 0,
            sample_count: count,
            mask: RankMask::new(vec![vec![true]]),
            sites: vec![vec![value; 3]],
            head: vec![value],
        }
    }

    #[test]
    fn select_full_and_distinct() {
        let mut rng = Rng::new(1);
        assert_eq!(clients_select(&mut rng, 7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        let s = clients_select(&mut rng, 100, 10).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(clients_select(&mut rng, 5, 0).is_err());
        assert!(clients_select(&mut rng, 5, 6).is_err());
    }

    #[test]
    fn select_frequencies_uniform() {
        let mut rng = Rng::new(2);
        let mut hits = vec![0usize; 100];
        for _ in 0..10_000 {
            for id in clients_select(&mut rng, 100, 10).unwrap() {
                hits[id] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&f), "{f}");
        }
    }

    #[test]
    fn fedavg_weighted_mean() {
        let mask = RankMask::new(vec![vec![true]]);
        let agg = fedavg(&[(0, payload_with(0.0, 1)), (1, payload_with(2.0, 3))], &mask).unwrap();
        assert_eq!(agg.sites[0], vec![1.5; 3]);
        assert_eq!(agg.head, vec![1.5]);
    }

    #[test]
    fn fedavg_order_independent_and_conserving() {
        let mask = RankMask::new(vec![vec![true]]);
        let a = (4, payload_with(0.1, 7));
        let b = (2, payload_with(0.7, 5));
        let c = (9, payload_with(-0.3, 11));
        let x = fedavg(&[a.clone(), b.clone(), c.clone()], &mask).unwrap();
        let y = fedavg(&[c, a, b], &mask).unwrap();
        assert_eq!(x, y);
        let same = fedavg(&[(0, payload_with(0.25, 3)), (1, payload_with(0.25, 9))], &mask).unwrap();
        assert_eq!(same.head, vec![0.25]);
    }

    #[test]
    fn fedavg_rejects_zero_weight_and_empty() {
        let mask = RankMask::new(vec![vec![true]]);
        assert!(fedavg(&[(0, payload_with(1.0, 0))], &mask).is_err());
        assert!(fedavg(&[], &mask).is_err());
    }

    fn small_model() -> TinyModel {
        let mut rng = Rng::new(5);
        let bases: Vec<Matrix> = (0..NUM_SITES)
            .map(|_| Matrix::gaussian(&mut rng, 8, 8, 0.3).unwrap())
            .collect();
        TinyModel::new(&mut rng, &bases, 3, &AdapterConfig::new(Flavor::TruncSvd, 4)).unwrap()
    }

    #[test]
    fn rank_detect_cases() {
        let mut m = small_model();
        let alive = RankMask::from_adapters(m.sites());
        assert!(rank_detect(&mut m, &alive, true).unwrap().is_empty());
        let mut sites = vec![vec![true; 4]; 4];
        sites[1] = vec![false; 4];
        sites[3][0] = false;
        let before = m.trainable_param_count();
        assert_eq!(rank_detect(&mut m, &RankMask::new(sites), true).unwrap(), vec![1]);
        assert_eq!(m.frozen(), &[false, true, false, false]);
        assert_eq!(before - m.trainable_param_count(), 4 * (8 + 8 + 1));
        let live: usize = m.sites().iter().map(|s| s.live_rank() * (8 + 8 + 1)).sum();
        assert_eq!(m.live_param_count(), live + m.head_len());
    }

    #[test]
    fn ledger_totals() {
        let mut l = CommLedger::default();
        l.record(RoundBytes {
            bytes_down: 10,
            bytes_up: 20,
            adapter_param_bytes: 4,
        });
        l.record(RoundBytes {
            bytes_down: 1,
            bytes_up: 2,
            adapter_param_bytes: 4,
        });
        assert_eq!((l.total_down(), l.total_up(), l.total()), (11, 22, 33));
        assert_eq!(l.rounds().len(), 2);
    }
}
