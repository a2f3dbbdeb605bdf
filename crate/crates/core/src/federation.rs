//! Federated rounds: data partitioning, benign and malicious local
//! training, defenses and FedAvg aggregation.

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AttackConfig;
use crate::data::{augment_pair, augment_view, Dataset};
use crate::defenses::{flame_lite, fltrust, foolsgold, krum, norm_clip, DefenseConfig};
use crate::encoder::{
    backward_accumulate, embed, forward, momentum_update_in_place, EncoderPair, ModelParams,
};
use crate::error::{FsslError, Result};
use crate::hallucination::{build_prototypes, generate_positives};
use crate::linalg::{axpy, norm, UnitVector};
use crate::losses::{info_nce, loss_bfe, loss_he, MemoryQueue};
use crate::poisoning::{
    embed_trigger, model_replace, project_eps_ball_in_place, selection_mask, update_zeta,
    GradStats, PoisonSet, TriggerSpec,
};
use crate::rng::RngStream;

const TAG_ATTACK: u64 = 0xa77ac;
const TAG_TRAIN: u64 = 0x7a1;
const TAG_SCHEDULE: u64 = 0x5c4e;
const TAG_DEFENSE: u64 = 0xdef;
const TAG_SERVER: u64 = 0x5e7;

/// Client index sets produced by a partitioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignment: Vec<Vec<usize>>,
    /// `None` for the stratified IID split.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(Vec::len).collect()
    }
}

fn class_pools(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    pools
}

/// Moves one sample at a time from the largest client (lowest index on
/// ties) into each empty client.
fn repair_empty(assignment: &mut [Vec<usize>]) -> Result<()> {
    let total: usize = assignment.iter().map(Vec::len).sum();
    if total < assignment.len() {
        return Err(FsslError::InvalidArgument(format!(
            "{total} samples cannot fill {} clients",
            assignment.len()
        )));
    }
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..assignment.len()).fold(0, |b, i| {
            if assignment[i].len() > assignment[b].len() {
                i
            } else {
                b
            }
        });
        let moved = assignment[largest]
            .pop()
            .expect("largest client is non-empty");
        assignment[empty].push(moved);
    }
    Ok(())
}

/// Integer counts summing to `n` proportional to `props`: floors first,
/// then the remainder to the largest fractional parts (lowest index on
/// ties).
pub fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per class, proportions `~ Dir(alpha 1_K)` split that class's shuffled
/// samples across clients.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    k: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(FsslError::InvalidArgument(
            "need at least one client".into(),
        ));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| FsslError::InvalidArgument(format!("alpha {alpha}: {e}")))?;
    let mut assignment = vec![Vec::new(); k];
    for mut pool in class_pools(labels, classes) {
        if pool.is_empty() {
            continue;
        }
        rng.shuffle(&mut pool);
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng.inner())).collect();
        let sum: f64 = draws.iter().sum();
        let props: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|d| d / sum).collect()
        } else {
            // Every draw underflowed: the whole class goes to one client.
            let pick = rng.below(k);
            (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()
        };
        let mut start = 0;
        for (c, n) in largest_remainder(&props, pool.len())
            .into_iter()
            .enumerate()
        {
            assignment[c].extend_from_slice(&pool[start..start + n]);
            start += n;
        }
    }
    repair_empty(&mut assignment)?;
    Ok(PartitionPlan {
        assignment,
        alpha: Some(alpha),
        seed: rng.seed(),
    })
}

/// Every client receives an equal share of every class (round-robin over
/// shuffled class pools, continuing where the previous class stopped).
pub fn iid_partition(
    labels: &[usize],
    classes: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(FsslError::InvalidArgument(
            "need at least one client".into(),
        ));
    }
    let mut assignment = vec![Vec::new(); k];
    let mut next = 0;
    for mut pool in class_pools(labels, classes) {
        rng.shuffle(&mut pool);
        for i in pool {
            assignment[next % k].push(i);
            next += 1;
        }
    }
    repair_empty(&mut assignment)?;
    Ok(PartitionPlan {
        assignment,
        alpha: None,
        seed: rng.seed(),
    })
}

/// Pearson chi-square of the client-by-class count table against the
/// counts expected if every client mirrored the global class mix.
pub fn chi_square_heterogeneity(plan: &PartitionPlan, labels: &[usize], classes: usize) -> f64 {
    let total: usize = plan.assignment.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut global = vec![0usize; classes];
    for a in &plan.assignment {
        for &i in a {
            global[labels[i]] += 1;
        }
    }
    let mut chi = 0.0;
    for a in &plan.assignment {
        let mut counts = vec![0usize; classes];
        for &i in a {
            counts[labels[i]] += 1;
        }
        for c in 0..classes {
            let expected = a.len() as f64 * global[c] as f64 / total as f64;
            if expected > 0.0 {
                chi += (counts[c] as f64 - expected).powi(2) / expected;
            }
        }
    }
    chi
}

/// Local optimisation hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub tau: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub aug_sigma: f64,
    pub aug_rho: f64,
}

/// Attack state private to a malicious client.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub stats: GradStats<f64>,
    /// Projection radius; unknown until calibrated in a warmup round.
    pub eps: Option<f64>,
    pub warmup_norms: Vec<f64>,
    /// Coordinates the attack gradient may touch in the current round.
    mask: Option<Vec<bool>>,
}

impl AttackState {
    pub fn new(dim: usize, cfg: &AttackConfig) -> Self {
        AttackState {
            stats: GradStats::new(dim, cfg.k_frac).with_tracking(cfg.track_frac, cfg.bottom_k_mode),
            eps: cfg.eps,
            warmup_norms: Vec::new(),
            mask: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub pair: EncoderPair<f64>,
    pub queue: MemoryQueue<f64>,
    pub data: Vec<usize>,
    pub malicious: bool,
    pub attack: Option<AttackState>,
}

impl ClientState {
    /// Starts from `global` with the queue filled by target-encoder keys
    /// of augmented local samples.
    pub fn new(
        id: usize,
        data: Vec<usize>,
        global: &ModelParams<f64>,
        train: &Dataset,
        hp: &TrainParams,
        queue_size: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let pair = EncoderPair::from_global(global, hp.momentum)?;
        let mut queue = MemoryQueue::new(queue_size);
        if !data.is_empty() {
            for j in 0..queue_size {
                let x = &train.samples[data[j % data.len()]];
                queue.push(embed(
                    &pair.target,
                    &augment_view(x, hp.aug_sigma, hp.aug_rho, rng),
                )?);
            }
        }
        Ok(ClientState {
            id,
            pair,
            queue,
            data,
            malicious: false,
            attack: None,
        })
    }
}

/// Everything a malicious step reads besides the client itself.
#[derive(Clone, Debug)]
pub struct AttackContext<'a> {
    pub cfg: &'a AttackConfig,
    pub trigger: &'a TriggerSpec,
    pub poison: &'a PoisonSet,
    /// Global model at the start of the round.
    pub global: &'a ModelParams<f64>,
}

/// Mean losses over the steps of a local run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSums {
    pub l_cl: f64,
    pub l_he: f64,
    pub l_bfe: f64,
    pub steps: usize,
    pub he_steps: usize,
    pub bfe_steps: usize,
}

impl LossSums {
    fn add(&mut self, o: &LossSums) {
        self.l_cl += o.l_cl;
        self.l_he += o.l_he;
        self.l_bfe += o.l_bfe;
        self.steps += o.steps;
        self.he_steps += o.he_steps;
        self.bfe_steps += o.bfe_steps;
    }

    pub fn mean_cl(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.l_cl / self.steps as f64
        }
    }

    pub fn mean_he(&self) -> f64 {
        if self.he_steps == 0 {
            0.0
        } else {
            self.l_he / self.he_steps as f64
        }
    }

    pub fn mean_bfe(&self) -> f64 {
        if self.bfe_steps == 0 {
            0.0
        } else {
            self.l_bfe / self.bfe_steps as f64
        }
    }
}

/// Mean InfoNCE gradient over the batch, the mean loss, and the detached
/// keys to enqueue afterwards.
fn clean_pass(
    pair: &EncoderPair<f64>,
    queue: &MemoryQueue<f64>,
    batch: &[&[f64]],
    hp: &TrainParams,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, f64, Vec<UnitVector<f64>>)> {
    let mut grad = vec![0.0; pair.online.len()];
    let mut loss = 0.0;
    let mut keys = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for x in batch {
        let (xq, xk) = augment_pair(x, hp.aug_sigma, hp.aug_rho, rng);
        let (vq, cache) = forward(&pair.online, &xq)?;
        let vk = embed(&pair.target, &xk)?;
        let lg = info_nce(&vq, &vk, queue, hp.tau)?;
        loss += lg.loss * scale;
        backward_accumulate(&pair.online, &cache, &lg.grad, scale, &mut grad)?;
        keys.push(vk);
    }
    Ok((grad, loss, keys))
}

fn finish_step(c: &mut ClientState, grad: &[f64], lr: f64, keys: Vec<UnitVector<f64>>) {
    axpy(c.pair.online.as_mut_slice(), -lr, grad);
    momentum_update_in_place(&mut c.pair);
    for k in keys {
        c.queue.push(k);
    }
}

/// One MoCo step: InfoNCE on two views per sample, SGD on the online
/// encoder, momentum update of the target, keys enqueued.
pub fn client_step_benign(
    c: &mut ClientState,
    batch: &[&[f64]],
    hp: &TrainParams,
    rng: &mut RngStream,
) -> Result<LossSums> {
    if batch.is_empty() {
        return Err(FsslError::InvalidArgument("empty batch".into()));
    }
    let (grad, loss, keys) = clean_pass(&c.pair, &c.queue, batch, hp, rng)?;
    finish_step(c, &grad, hp.lr, keys);
    Ok(LossSums {
        l_cl: loss,
        steps: 1,
        ..Default::default()
    })
}

/// Attack-loss gradient: hallucinated positives around poisoned anchors
/// and entanglement of every triggered query with the poisoned keys.
fn attack_pass(
    c: &ClientState,
    batch: &[&[f64]],
    hp: &TrainParams,
    ctx: &AttackContext,
    arng: &mut RngStream,
) -> Result<Option<(Vec<f64>, f64, Option<f64>)>> {
    let cfg = ctx.cfg;
    let hcfg = &cfg.hallucination;
    if ctx.poison.is_empty() {
        return Ok(None);
    }
    let protos = match build_prototypes(&c.queue, hcfg, arng) {
        Ok(p) => p,
        Err(FsslError::InsufficientQueue { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let online = &c.pair.online;
    let mut grad = vec![0.0; online.len()];

    // Poisoned anchors: their keys are the entanglement positives.
    let mut anchors = Vec::with_capacity(cfg.poison_batch);
    let mut pos_keys = Vec::with_capacity(cfg.poison_batch);
    for _ in 0..cfg.poison_batch {
        let x = &ctx.poison.samples[arng.below(ctx.poison.len())];
        let (xq, xk) = augment_pair(x, hp.aug_sigma, hp.aug_rho, arng);
        let vk = embed(&c.pair.target, &xk)?;
        anchors.push((xq, vk.clone()));
        pos_keys.push(vk);
    }

    let mut queries: Vec<Vec<f64>> = anchors.iter().map(|(xq, _)| xq.clone()).collect();
    let take = cfg.attack_queries.min(batch.len());
    for i in arng.choose_distinct(batch.len(), take) {
        let xt = embed_trigger(batch[i], ctx.trigger)?;
        queries.push(augment_view(&xt, hp.aug_sigma, hp.aug_rho, arng));
    }

    let mut he_sum = 0.0;
    let mut he_n = 0usize;
    let hallucinated: Vec<Vec<UnitVector<f64>>> = anchors
        .iter()
        .map(|(_, vk)| generate_positives(vk, &protos, hcfg, arng).map(|h| h.positives))
        .collect::<Result<_>>()?;
    let with_he = hallucinated.iter().filter(|h| !h.is_empty()).count();
    let mut bfe_sum = 0.0;
    let nq = queries.len() as f64;
    for (qi, xq) in queries.iter().enumerate() {
        let (vq, cache) = forward(online, xq)?;
        let bfe = loss_bfe(&vq, &pos_keys, &c.queue, hp.tau)?;
        bfe_sum += bfe.loss / nq;
        let mut d = bfe.grad.into_inner();
        d.iter_mut().for_each(|v| *v /= nq);
        if let Some(h) = hallucinated.get(qi).filter(|h| !h.is_empty()) {
            let he = loss_he(&vq, h, hp.tau)?;
            he_sum += he.loss;
            he_n += 1;
            axpy(&mut d, 1.0 / with_he as f64, &he.grad);
        }
        backward_accumulate(online, &cache, &d, 1.0, &mut grad)?;
    }
    let he = (he_n > 0).then(|| he_sum / he_n as f64);
    Ok(Some((grad, bfe_sum, he)))
}

/// One attack step. With `mu = 0` this is exactly [`client_step_benign`].
/// Otherwise the clean InfoNCE gradient is weighted by `1 - mu`, the attack
/// gradient by `mu` and (optionally) restricted to the bottom-k
/// coordinates; after the SGD step the online model is (optionally)
/// projected back into the epsilon ball around the round's global model.
pub fn client_step_malicious(
    c: &mut ClientState,
    batch: &[&[f64]],
    hp: &TrainParams,
    ctx: &AttackContext,
    rng: &mut RngStream,
    arng: &mut RngStream,
) -> Result<LossSums> {
    let mu = ctx.cfg.mu;
    if mu == 0.0 {
        return client_step_benign(c, batch, hp, rng);
    }
    if batch.is_empty() {
        return Err(FsslError::InvalidArgument("empty batch".into()));
    }
    let (g_clean, l_cl, keys) = clean_pass(&c.pair, &c.queue, batch, hp, rng)?;
    let Some((g_attack, l_bfe, l_he)) = attack_pass(c, batch, hp, ctx, arng)? else {
        finish_step(c, &g_clean, hp.lr, keys);
        return Ok(LossSums {
            l_cl,
            steps: 1,
            ..Default::default()
        });
    };
    let st = c
        .attack
        .get_or_insert_with(|| AttackState::new(g_clean.len(), ctx.cfg));
    if ctx.cfg.constrain_mask && st.mask.is_none() {
        st.stats = update_zeta(
            std::mem::replace(&mut st.stats, GradStats::new(0, 0.0)),
            &g_clean,
        )?;
        st.mask = Some(selection_mask(&st.stats));
    }
    let mut grad: Vec<f64> = g_clean.iter().map(|g| (1.0 - mu) * g).collect();
    match st.mask.as_ref().filter(|_| ctx.cfg.constrain_mask) {
        Some(mask) => {
            for ((g, &a), &keep) in grad.iter_mut().zip(&g_attack).zip(mask) {
                if keep {
                    *g += mu * a;
                }
            }
        }
        None => axpy(&mut grad, mu, &g_attack),
    }
    let eps = st.eps;
    finish_step(c, &grad, hp.lr, keys);
    if ctx.cfg.constrain_eps {
        let eps = eps.ok_or_else(|| {
            FsslError::config(
                "attack.eps",
                "radius not calibrated before the attack started",
            )
        })?;
        project_eps_ball_in_place(&mut c.pair.online, ctx.global, eps)?;
    }
    Ok(LossSums {
        l_cl,
        l_he: l_he.unwrap_or(0.0),
        l_bfe,
        steps: 1,
        he_steps: usize::from(l_he.is_some()),
        bfe_steps: 1,
    })
}

/// Outcome of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub client: usize,
    pub params: ModelParams<f64>,
    pub samples: usize,
    pub losses: LossSums,
    pub attacked: bool,
}

/// `e` epochs of shuffled minibatches from `global`.
pub fn local_train(
    c: &mut ClientState,
    global: &ModelParams<f64>,
    train: &Dataset,
    hp: &TrainParams,
    attack: Option<&AttackContext>,
    rng: &mut RngStream,
) -> Result<LocalResult> {
    c.pair = EncoderPair::from_global(global, hp.momentum)?;
    let mut arng = rng.derive(&[TAG_ATTACK]);
    if let Some(st) = c.attack.as_mut() {
        st.mask = None;
    }
    let mut sums = LossSums::default();
    let mut idx = c.data.clone();
    for _ in 0..hp.local_epochs {
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(hp.batch_size.max(1)) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| train.samples[i].as_slice()).collect();
            let s = match attack {
                Some(ctx) => client_step_malicious(c, &batch, hp, ctx, rng, &mut arng)?,
                None => client_step_benign(c, &batch, hp, rng)?,
            };
            sums.add(&s);
        }
    }
    Ok(LocalResult {
        client: c.id,
        params: c.pair.online.clone(),
        samples: c.data.len(),
        losses: sums,
        attacked: attack.is_some_and(|a| a.cfg.mu > 0.0),
    })
}

/// Weighted mean of flat parameter vectors, weights `n_i / sum n`.
pub fn fedavg(updates: &[&ModelParams<f64>], weights: &[usize]) -> Result<ModelParams<f64>> {
    let first = updates.first().ok_or(FsslError::EmptyUpdateSet)?;
    if weights.len() != updates.len() {
        return Err(FsslError::DimMismatch {
            expected: updates.len(),
            found: weights.len(),
        });
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(FsslError::InvalidArgument("weights sum to zero".into()));
    }
    let mut acc = vec![0.0; first.len()];
    for (u, &w) in updates.iter().zip(weights) {
        first.same_layout(u)?;
        axpy(&mut acc, w as f64 / total as f64, u.as_slice());
    }
    first.with_flat(acc)
}

/// What the server-side defense did this round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseVerdict {
    pub name: String,
    /// Client ids whose update received zero weight.
    pub excluded: Vec<usize>,
    /// Total aggregation weight on malicious uploads.
    pub malicious_weight: f64,
}

/// Server-owned state carried between rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ModelParams<f64>,
    /// Cumulative update per client id, for FoolsGold.
    pub history: Vec<Vec<f64>>,
    /// Clean root client used by FLTrust.
    pub root: Option<ClientState>,
}

/// Per-round schedule input and shared read-only data.
pub struct RoundContext<'a> {
    pub train: &'a Dataset,
    pub hp: TrainParams,
    pub attack: &'a AttackConfig,
    pub trigger: &'a TriggerSpec,
    pub poison: &'a PoisonSet,
    pub defense: &'a DefenseConfig,
    pub clients_per_round: Option<usize>,
    pub malicious_participation: f64,
    pub rng: &'a RngStream,
}

/// Aggregated outcome of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub participants: Vec<usize>,
    pub losses: LossSums,
    /// Attack-active malicious uploads only.
    pub attack_losses: LossSums,
    pub attack_active: bool,
    /// Mean distance of malicious uploads to the previous global model;
    /// zero when none took part.
    pub dist_to_global: f64,
    pub benign_dist: f64,
    pub verdict: DefenseVerdict,
}

impl<'a> RoundContext<'a> {
    fn attack_active(&self, round: usize) -> bool {
        self.attack.enabled
            && round >= self.attack.start_round
            && self.attack.stop_round.is_none_or(|s| round <= s)
    }

    fn removed(&self, round: usize) -> bool {
        self.attack.enabled && self.attack.stop_round.is_some_and(|s| round > s)
    }

    /// Participating client ids in ascending order. Malicious clients join
    /// with the configured probability (and never after removal); benign
    /// clients fill the remaining slots.
    pub fn schedule(&self, clients: &[ClientState], round: usize) -> Vec<usize> {
        let mut rng = self.rng.derive(&[TAG_SCHEDULE, round as u64]);
        let mut chosen: Vec<usize> = clients
            .iter()
            .filter(|c| c.malicious)
            .filter(|_| !self.removed(round))
            .filter(|_| {
                self.malicious_participation >= 1.0 || rng.uniform() < self.malicious_participation
            })
            .map(|c| c.id)
            .collect();
        let benign: Vec<usize> = clients
            .iter()
            .filter(|c| !c.malicious)
            .map(|c| c.id)
            .collect();
        let want = self.clients_per_round.map_or(benign.len(), |k| {
            k.saturating_sub(chosen.len()).min(benign.len())
        });
        let mut picks = if want == benign.len() {
            (0..benign.len()).collect()
        } else {
            rng.choose_distinct(benign.len(), want)
        };
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|i| benign[i]));
        chosen.sort_unstable();
        chosen
    }
}

/// Broadcast, concurrent local training, optional model replacement,
/// defense, aggregation.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    round: usize,
    ctx: &RoundContext,
) -> Result<RoundOutcome> {
    let participants = ctx.schedule(clients, round);
    let active = ctx.attack_active(round);
    let global = server.global.clone();
    let attack_ctx = AttackContext {
        cfg: ctx.attack,
        trigger: ctx.trigger,
        poison: ctx.poison,
        global: &global,
    };

    let mut results: Vec<LocalResult> = clients
        .par_iter_mut()
        .filter(|c| participants.contains(&c.id))
        .map(|c| {
            let mut rng = ctx.rng.derive(&[TAG_TRAIN, round as u64, c.id as u64]);
            let atk = (c.malicious && active).then_some(&attack_ctx);
            local_train(c, &global, ctx.train, &ctx.hp, atk, &mut rng)
        })
        .collect::<Result<_>>()?;

    // Attackers in a warmup round calibrate their radius from their own
    // benign update.
    if ctx.attack.enabled && !active && !ctx.removed(round) {
        for r in &results {
            let c = &mut clients[r.client];
            if c.malicious {
                let d = norm(&r.params.delta(&global)?);
                let st = c
                    .attack
                    .get_or_insert_with(|| AttackState::new(global.len(), ctx.attack));
                st.warmup_norms.push(d);
                if ctx.attack.eps.is_none() {
                    st.eps = Some(ctx.attack.eps_scale * median(&st.warmup_norms));
                }
            }
        }
    }

    let sizes: Vec<usize> = results.iter().map(|r| r.samples).collect();
    if ctx.attack.model_replacement && results.len() >= 2 {
        for k in 0..results.len() {
            if results[k].attacked {
                results[k].params = model_replace(&results[k].params, &global, &sizes, k)?;
            }
        }
    }

    let malicious: Vec<bool> = results
        .iter()
        .map(|r| clients[r.client].malicious)
        .collect();
    let deltas: Vec<Vec<f64>> = results
        .iter()
        .map(|r| r.params.delta(&global))
        .collect::<Result<_>>()?;
    let mut losses = LossSums::default();
    let mut attack_losses = LossSums::default();
    let (mut mal_dist, mut mal_n, mut ben_dist, mut ben_n) = (0.0, 0usize, 0.0, 0usize);
    for ((r, d), &m) in results.iter().zip(&deltas).zip(&malicious) {
        losses.add(&r.losses);
        if r.attacked {
            attack_losses.add(&r.losses);
        }
        if m {
            mal_dist += norm(d);
            mal_n += 1;
        } else {
            ben_dist += norm(d);
            ben_n += 1;
        }
    }

    let (agg_delta, weights) = aggregate(server, &results, &deltas, &global, round, ctx)?;
    let mut flat = global.as_slice().to_vec();
    axpy(&mut flat, 1.0, &agg_delta);
    server.global = global.with_flat(flat)?;
    for (r, d) in results.iter().zip(&deltas) {
        axpy(&mut server.history[r.client], 1.0, d);
    }

    let total_w: f64 = weights.iter().sum();
    let verdict = DefenseVerdict {
        name: ctx.defense.name().to_string(),
        excluded: results
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w == 0.0)
            .map(|(r, _)| r.client)
            .collect(),
        malicious_weight: if total_w > 0.0 {
            weights
                .iter()
                .zip(&malicious)
                .filter(|(_, &m)| m)
                .map(|(w, _)| w)
                .sum::<f64>()
                / total_w
        } else {
            0.0
        },
    };
    Ok(RoundOutcome {
        round,
        participants,
        losses,
        attack_losses,
        attack_active: active && results.iter().any(|r| r.attacked),
        dist_to_global: if mal_n > 0 {
            mal_dist / mal_n as f64
        } else {
            0.0
        },
        benign_dist: if ben_n > 0 {
            ben_dist / ben_n as f64
        } else {
            0.0
        },
        verdict,
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregate delta and the effective weight each upload received.
fn aggregate(
    server: &mut ServerState,
    results: &[LocalResult],
    deltas: &[Vec<f64>],
    global: &ModelParams<f64>,
    round: usize,
    ctx: &RoundContext,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if results.is_empty() {
        return Ok((vec![0.0; global.len()], Vec::new()));
    }
    let sizes: Vec<f64> = results.iter().map(|r| r.samples as f64).collect();
    let weighted = |ds: &[Vec<f64>], w: &[f64]| -> Vec<f64> {
        let total: f64 = w.iter().sum();
        let mut acc = vec![0.0; global.len()];
        if total > 0.0 {
            for (d, &wi) in ds.iter().zip(w) {
                axpy(&mut acc, wi / total, d);
            }
        }
        acc
    };
    match ctx.defense {
        DefenseConfig::None => {
            let params: Vec<&ModelParams<f64>> = results.iter().map(|r| &r.params).collect();
            let counts: Vec<usize> = results.iter().map(|r| r.samples).collect();
            let avg = fedavg(&params, &counts)?;
            Ok((avg.delta(global)?, sizes))
        }
        DefenseConfig::Krum { f } => {
            let pick = krum(deltas, *f)?;
            let w = (0..deltas.len())
                .map(|i| if i == pick { 1.0 } else { 0.0 })
                .collect();
            Ok((deltas[pick].clone(), w))
        }
        DefenseConfig::Foolsgold => {
            let hist: Vec<Vec<f64>> = results
                .iter()
                .zip(deltas)
                .map(|(r, d)| {
                    let mut h = server.history[r.client].clone();
                    axpy(&mut h, 1.0, d);
                    h
                })
                .collect();
            let w = if hist.len() >= 2 {
                foolsgold(&hist)?
            } else {
                vec![1.0]
            };
            Ok((weighted(deltas, &w), w))
        }
        DefenseConfig::Flame { noise_factor } => {
            let mut rng = ctx.rng.derive(&[TAG_DEFENSE, round as u64]);
            let out = flame_lite(deltas, *noise_factor, &mut rng)?;
            let w = (0..deltas.len())
                .map(|i| if out.kept.contains(&i) { 1.0 } else { 0.0 })
                .collect();
            Ok((out.aggregate, w))
        }
        DefenseConfig::Fltrust { .. } => {
            let root = server.root.as_mut().ok_or_else(|| {
                FsslError::config("defense.root_samples", "fltrust needs a root dataset")
            })?;
            let mut rng = ctx.rng.derive(&[TAG_SERVER, round as u64]);
            let res = local_train(root, global, ctx.train, &ctx.hp, None, &mut rng)?;
            let server_update = res.params.delta(global)?;
            match fltrust(deltas, &server_update) {
                Ok((agg, trust)) => Ok((agg, trust)),
                Err(FsslError::AllZeroTrust) => {
                    Ok((vec![0.0; global.len()], vec![0.0; deltas.len()]))
                }
                Err(e) => Err(e),
            }
        }
        DefenseConfig::NormClip { bound } => {
            let clipped = norm_clip(deltas, *bound);
            Ok((weighted(&clipped, &sizes), sizes))
        }
    }
}
