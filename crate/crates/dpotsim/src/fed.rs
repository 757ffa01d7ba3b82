//! The federated round protocol: distribute the global model, train locally,
//! collect parameter-difference updates, aggregate, evaluate.
//!
//! Malicious clients differ from benign ones **only in their data**: every
//! client runs the same [`local_train`] procedure on whatever its dataset
//! holds, mirroring attested client-side training. Per-round work is
//! parallelized over clients; results are bit-identical regardless of the
//! schedule because every client owns an independent derived seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::{
    apply_trigger, build_trigger_training_set, make_fixed_trigger, optimize_trigger,
    poison_dataset, split_distributed_trigger, Trigger,
};
use crate::data::{partition_noniid, Dataset, PartitionSpec};
use crate::defenses::{
    agg_fedavg, agg_flair, agg_flame, agg_flcert, agg_foolsgold, agg_median, agg_multi_krum,
    agg_rfa, agg_robustlr, agg_trimmed_mean, cosine, scale_update, AggregationResult,
    DefenseKind, DefenseParams, DefenseState, UpdateMatrix,
};
use crate::nn::{backward, flatten_params, forward, init_model, one_hot, sgd_step, unflatten_params, LossKind, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The three independent seed streams of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub round: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// No poisoning; attack metrics are measured against a fixed reference
    /// trigger.
    None,
    /// Per-round optimized trigger (placement + value optimization).
    Dpot,
    /// Fixed white corner patch.
    Ft,
    /// Fixed patch sliced across the malicious clients; evaluation always
    /// uses the global patch.
    Dft,
}

impl AttackKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => AttackKind::None,
            "dpot" => AttackKind::Dpot,
            "ft" => AttackKind::Ft,
            "dft" => AttackKind::Dft,
            other => {
                return Err(Error::config(format!(
                    "unknown attack '{other}'; valid: none, dpot, ft, dft"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Dpot => "dpot",
            AttackKind::Ft => "ft",
            AttackKind::Dft => "dft",
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone)]
pub struct FLConfig {
    pub n_clients: usize,
    /// Malicious client ratio; `ceil(mcr * n_clients)` clients are
    /// compromised once, before round one.
    pub mcr: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub poison_rate: f64,
    pub tri_size: usize,
    pub target_label: usize,
    pub defense: DefenseKind,
    pub defense_params: DefenseParams,
    pub attack: AttackKind,
    pub scaling_factor: f64,
    pub seeds: Seeds,
    pub arch: String,
    pub noniid_bias: f64,
    pub trigger_iters: usize,
    pub trigger_gamma0: f64,
}

impl FLConfig {
    /// Desk-scale defaults: 20 clients, one malicious, 30 rounds of the
    /// 16x16 ten-class task on the small reference MLP.
    pub fn desk_default() -> Self {
        FLConfig {
            n_clients: 20,
            mcr: 0.05,
            rounds: 30,
            local_epochs: 5,
            batch_size: 32,
            local_lr: 0.01,
            poison_rate: 0.5,
            tri_size: 16,
            target_label: 0,
            defense: DefenseKind::FedAvg,
            defense_params: DefenseParams::default(),
            attack: AttackKind::Dpot,
            scaling_factor: 1.0,
            seeds: Seeds {
                data: 101,
                model: 202,
                round: 303,
            },
            arch: "mlp-256-64-10".to_string(),
            noniid_bias: 0.5,
            trigger_iters: 10,
            trigger_gamma0: 5.0,
        }
    }

    pub fn n_malicious(&self) -> usize {
        (self.mcr * self.n_clients as f64).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 {
            return Err(Error::config("need clients and at least one round"));
        }
        if !(0.0..=1.0).contains(&self.mcr) {
            return Err(Error::config(format!("mcr {} outside [0,1]", self.mcr)));
        }
        if !(0.0..=1.0).contains(&self.poison_rate) {
            return Err(Error::config(format!(
                "poison_rate {} outside [0,1]",
                self.poison_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// One client's flattened parameter-difference update.
#[derive(Debug, Clone)]
pub struct ModelUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
}

/// Per-round metrics and telemetry.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// Main-task accuracy on the clean test set, measured on the new global
    /// model.
    pub ma: f64,
    /// Success rate of this round's trigger measured on the next global
    /// model.
    pub asr: f64,
    pub defense: &'static str,
    pub excluded: Vec<usize>,
    /// The trigger snapshot the ASR was measured with.
    pub trigger: Trigger,
    /// Cosine similarity between the mean malicious update and the mean
    /// benign update, when both sides exist.
    pub malicious_benign_cosine: Option<f64>,
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentLog {
    pub records: Vec<RoundRecord>,
    pub final_model: Model,
}

/// SplitMix64 finalizer; the seed-derivation backbone.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for (stream tag, index) under a base seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix(mix(base ^ tag.wrapping_mul(0xA24B_AED4_963E_E407)).wrapping_add(index))
}

const TAG_PARTITION: u64 = 1;
const TAG_MALICIOUS: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_POISON: u64 = 4;
const TAG_ROUND: u64 = 5;
const TAG_FLCERT: u64 = 6;
const TAG_FLAME: u64 = 7;

/// Seeded-shuffled mini-batch SGD with cross-entropy; returns the flattened
/// difference between the trained local model and the global snapshot.
pub fn local_train(
    global: &Model,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("client dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut model = global.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = data.pixels();
    let n_out = model.n_out();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut batch_data = Vec::with_capacity(chunk.len() * px);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch_data.extend_from_slice(data.examples[i].image.data());
                labels.push(data.examples[i].label);
            }
            let batch = Tensor::new(vec![chunk.len(), px], batch_data)?;
            let targets = one_hot(&labels, n_out);
            let (_, grads) = backward(&model, &batch, &targets, LossKind::CrossEntropy)?;
            model = sgd_step(&model, &grads, lr)?;
        }
    }
    let before = flatten_params(global);
    let after = flatten_params(&model);
    Ok(after
        .data()
        .iter()
        .zip(before.data())
        .map(|(a, b)| a - b)
        .collect())
}

/// Fraction of clean test images classified correctly.
pub fn evaluate_ma(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let preds = predict(model, test)?;
    let hits = preds
        .iter()
        .zip(test.labels())
        .filter(|(p, l)| **p == *l)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Fraction of trigger-embedded test images (true label != target) that the
/// model classifies as the target label.
pub fn evaluate_asr(model: &Model, test: &Dataset, trigger: &Trigger) -> Result<f64> {
    let triggered = triggered_subset(test, trigger)?;
    let preds = predict(model, &triggered)?;
    let hits = preds.iter().filter(|p| **p == trigger.target_label).count();
    Ok(hits as f64 / triggered.len() as f64)
}

fn triggered_subset(test: &Dataset, trigger: &Trigger) -> Result<Dataset> {
    if test.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let examples = test
        .examples
        .iter()
        .filter(|e| e.label != trigger.target_label)
        .map(|e| {
            Ok(crate::data::Example {
                image: apply_trigger(&e.image, trigger)?,
                label: e.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(Error::config(
            "every test image already carries the target label",
        ));
    }
    Dataset::new(examples, test.n_classes, test.image_shape)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let out = forward(model, &data.as_batch())?;
    Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
}

/// Majority-vote predictions across group models; ties go to the lowest
/// label.
fn predict_voting(models: &[Model], data: &Dataset) -> Result<Vec<usize>> {
    let n_out = models[0].n_out();
    let per_model: Vec<Vec<usize>> = models
        .iter()
        .map(|m| predict(m, data))
        .collect::<Result<_>>()?;
    Ok((0..data.len())
        .map(|i| {
            let mut votes = vec![0usize; n_out];
            for preds in &per_model {
                votes[preds[i]] += 1;
            }
            argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>())
        })
        .collect())
}

fn evaluate_asr_voting(models: &[Model], test: &Dataset, trigger: &Trigger) -> Result<f64> {
    let triggered = triggered_subset(test, trigger)?;
    let preds = predict_voting(models, &triggered)?;
    let hits = preds.iter().filter(|p| **p == trigger.target_label).count();
    Ok(hits as f64 / triggered.len() as f64)
}

/// Per-client training data for one round: benign clients keep their clean
/// data; malicious clients poison a fresh copy with their assigned trigger.
fn round_client_data(
    clients: &[Dataset],
    malicious: &[bool],
    triggers: &[Option<Trigger>],
    poison_rate: f64,
    round_seed: u64,
) -> Result<Vec<Dataset>> {
    clients
        .iter()
        .enumerate()
        .map(|(id, data)| {
            if let (true, Some(trigger)) = (malicious[id], &triggers[id]) {
                poison_dataset(
                    data,
                    trigger,
                    poison_rate,
                    derive_seed(round_seed, TAG_POISON, id as u64),
                )
            } else {
                Ok(data.clone())
            }
        })
        .collect()
}

/// Trains every client on its round data through the single shared
/// procedure and returns updates in client-id order.
pub fn collect_updates(
    global: &Model,
    round_data: &[Dataset],
    config: &FLConfig,
    round_seed: u64,
) -> Result<Vec<ModelUpdate>> {
    round_data
        .par_iter()
        .enumerate()
        .map(|(id, data)| {
            let delta = local_train(
                global,
                data,
                config.local_epochs,
                config.local_lr,
                config.batch_size,
                derive_seed(round_seed, TAG_TRAIN, id as u64),
            )?;
            Ok(ModelUpdate {
                client_id: id,
                delta,
            })
        })
        .collect()
}

fn aggregate(
    u: &UpdateMatrix,
    config: &FLConfig,
    state: &mut DefenseState,
    round_seed: u64,
    head_range: (usize, usize),
) -> Result<(AggregationResult, Option<Vec<AggregationResult>>)> {
    let p = &config.defense_params;
    let n = u.n_clients();
    let result = match config.defense {
        DefenseKind::FedAvg => agg_fedavg(u)?,
        DefenseKind::Median => agg_median(u)?,
        DefenseKind::TrimmedMean => agg_trimmed_mean(u, p.trim_ratio)?,
        DefenseKind::MultiKrum => {
            let f = p.krum_f.unwrap_or_else(|| config.n_malicious());
            let m = p.krum_m.unwrap_or(n.saturating_sub(f).max(1));
            agg_multi_krum(u, f, m)?
        }
        DefenseKind::RobustLr => {
            // Roughly the random-walk scale of a noise-dominated sign sum;
            // larger thresholds flip most coordinates of an honest round and
            // stall training.
            let threshold = p
                .vote_threshold
                .unwrap_or(((n as f64).sqrt().ceil() as usize).clamp(1, n));
            agg_robustlr(u, threshold, p.server_lr)?
        }
        DefenseKind::Rfa => agg_rfa(u, p.rfa_max_iter, p.rfa_eps, p.rfa_nu)?,
        DefenseKind::Flair => {
            let k = p.flair_n_malicious.unwrap_or_else(|| config.n_malicious());
            agg_flair(u, k, state)?
        }
        DefenseKind::Flame => agg_flame(
            u,
            p.flame_sigma,
            derive_seed(round_seed, TAG_FLAME, 0),
        )?,
        DefenseKind::FoolsGold => agg_foolsgold(u, state, Some(head_range))?,
        DefenseKind::FlCert => {
            // Group medians feed the vote-based evaluation; the global model
            // itself advances by the median over all clients.
            let seed = p
                .flcert_seed
                .unwrap_or_else(|| derive_seed(config.seeds.data, TAG_FLCERT, 0));
            let groups = agg_flcert(u, p.flcert_groups, seed)?;
            let global = agg_median(u)?;
            return Ok((global, Some(groups)));
        }
    };
    Ok((result, None))
}

fn add_update(model: &Model, update: &[f64]) -> Result<Model> {
    let flat = flatten_params(model);
    if flat.len() != update.len() {
        return Err(Error::shape(format!(
            "update dimension {} != parameter count {}",
            update.len(),
            flat.len()
        )));
    }
    let new_flat: Vec<f64> = flat.data().iter().zip(update).map(|(a, b)| a + b).collect();
    unflatten_params(model, &Tensor::new(vec![new_flat.len()], new_flat)?)
}

/// One full round: trigger construction, poisoning, local training,
/// aggregation, evaluation of this round's trigger on the new global model.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    global: &Model,
    clients: &[Dataset],
    malicious: &[bool],
    test: &Dataset,
    config: &FLConfig,
    round_index: usize,
    round_seed: u64,
    state: &mut DefenseState,
) -> Result<(Model, RoundRecord)> {
    let image_shape = clients
        .iter()
        .find(|c| !c.is_empty())
        .map(|c| c.image_shape)
        .unwrap_or(test.image_shape);
    let malicious_ids: Vec<usize> = (0..clients.len()).filter(|&i| malicious[i]).collect();

    // The trigger the attack trains with and the trigger ASR is measured
    // against (always the global pattern).
    let mut per_client_trigger: Vec<Option<Trigger>> = vec![None; clients.len()];
    let eval_trigger = match config.attack {
        AttackKind::None => make_fixed_trigger(image_shape, config.tri_size, config.target_label)?,
        AttackKind::Ft => {
            let t = make_fixed_trigger(image_shape, config.tri_size, config.target_label)?;
            for &id in &malicious_ids {
                per_client_trigger[id] = Some(t.clone());
            }
            t
        }
        AttackKind::Dft => {
            let t = make_fixed_trigger(image_shape, config.tri_size, config.target_label)?;
            let n_parts = malicious_ids.len().clamp(1, t.tri_size());
            let slices = split_distributed_trigger(&t, n_parts)?;
            for (k, &id) in malicious_ids.iter().enumerate() {
                per_client_trigger[id] = Some(slices[k % n_parts].clone());
            }
            t
        }
        AttackKind::Dpot => {
            let sources: Vec<&Dataset> = malicious_ids.iter().map(|&i| &clients[i]).collect();
            if sources.is_empty() {
                return Err(Error::config(
                    "dpot attack requires at least one malicious client",
                ));
            }
            let d = build_trigger_training_set(&sources, config.target_label)?;
            let (t, _) = optimize_trigger(
                global,
                &d,
                config.tri_size,
                config.trigger_iters,
                config.trigger_gamma0,
            )?;
            for &id in &malicious_ids {
                per_client_trigger[id] = Some(t.clone());
            }
            t
        }
    };

    let rate = if config.attack == AttackKind::None {
        0.0
    } else {
        config.poison_rate
    };
    let round_data = round_client_data(clients, malicious, &per_client_trigger, rate, round_seed)?;
    let mut updates = collect_updates(global, &round_data, config, round_seed)?;
    for up in &mut updates {
        if malicious[up.client_id] && config.scaling_factor != 1.0 {
            up.delta = scale_update(&up.delta, config.scaling_factor);
        }
    }

    // Concealment telemetry: how close the malicious mass sits to the benign
    // mean direction.
    let mean_of = |ids: &[usize]| -> Option<Vec<f64>> {
        if ids.is_empty() {
            return None;
        }
        let d = updates[0].delta.len();
        let mut acc = vec![0.0; d];
        for &i in ids {
            for (a, v) in acc.iter_mut().zip(&updates[i].delta) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= ids.len() as f64;
        }
        Some(acc)
    };
    let benign_ids: Vec<usize> = (0..clients.len()).filter(|&i| !malicious[i]).collect();
    let malicious_benign_cosine = match (mean_of(&malicious_ids), mean_of(&benign_ids)) {
        (Some(m), Some(b)) => Some(cosine(&m, &b)),
        _ => None,
    };

    // Aggregation sees canonical client-id ordering regardless of arrival.
    let u = UpdateMatrix::new(
        updates.iter().map(|u| u.delta.clone()).collect(),
        updates.iter().map(|u| u.client_id).collect(),
    )?;
    let head = global
        .layers()
        .last()
        .map(|l| l.weight.len() + l.bias.len())
        .unwrap_or(0);
    let head_range = (global.n_params() - head, global.n_params());
    let (agg, flcert_groups) = aggregate(&u, config, state, round_seed, head_range)?;
    state.round_index += 1;
    let new_global = add_update(global, &agg.global_update)?;

    // Under the vote-based defense the attack metric comes from the group
    // ensemble, while the main task is carried by the median-updated global
    // model.
    let (ma, asr) = if let Some(groups) = &flcert_groups {
        let group_models: Vec<Model> = groups
            .iter()
            .map(|g| add_update(global, &g.global_update))
            .collect::<Result<_>>()?;
        (
            evaluate_ma(&new_global, test)?,
            evaluate_asr_voting(&group_models, test, &eval_trigger)?,
        )
    } else {
        (
            evaluate_ma(&new_global, test)?,
            evaluate_asr(&new_global, test, &eval_trigger)?,
        )
    };

    Ok((
        new_global,
        RoundRecord {
            round: round_index,
            ma,
            asr,
            defense: config.defense.name(),
            excluded: agg.excluded,
            trigger: eval_trigger,
            malicious_benign_cosine,
        },
    ))
}

/// Partitions the training data, fixes the malicious set, and runs the
/// configured number of rounds from a seeded initial model.
pub fn run_experiment(config: &FLConfig, train: &Dataset, test: &Dataset) -> Result<ExperimentLog> {
    config.validate()?;
    let spec = PartitionSpec {
        n_clients: config.n_clients,
        bias: config.noniid_bias,
        seed: derive_seed(config.seeds.data, TAG_PARTITION, 0),
    };
    let clients = partition_noniid(train, &spec)?;

    // Compromised once: the first ceil(mcr*n) ids of a seeded shuffle.
    let mut ids: Vec<usize> = (0..config.n_clients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.data, TAG_MALICIOUS, 0));
    ids.shuffle(&mut rng);
    let mut malicious = vec![false; config.n_clients];
    for &id in ids.iter().take(config.n_malicious()) {
        malicious[id] = true;
    }
    if config.attack != AttackKind::None {
        for (id, &is_mal) in malicious.iter().enumerate() {
            if is_mal && clients[id].is_empty() {
                return Err(Error::config(format!(
                    "malicious client {id} received no data; choose another data seed"
                )));
            }
        }
    }

    let mut global = init_model(&config.arch, config.seeds.model)?;
    let mut state = DefenseState::default();
    let mut records = Vec::with_capacity(config.rounds);
    for round_index in 0..config.rounds {
        let round_seed = derive_seed(config.seeds.round, TAG_ROUND, round_index as u64);
        let (next, record) = run_round(
            &global,
            &clients,
            &malicious,
            test,
            config,
            round_index,
            round_seed,
            &mut state,
        )?;
        global = next;
        records.push(record);
    }
    Ok(ExperimentLog {
        records,
        final_model: global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny_task() -> (Dataset, Dataset) {
        let all = generate_synthetic(4, 30, (8, 8), 0.15, 55).unwrap();
        all.split_per_class(5).unwrap()
    }

    fn tiny_config() -> FLConfig {
        FLConfig {
            n_clients: 6,
            mcr: 0.2,
            rounds: 2,
            local_epochs: 2,
            batch_size: 16,
            local_lr: 0.05,
            poison_rate: 0.5,
            tri_size: 6,
            target_label: 0,
            defense: DefenseKind::FedAvg,
            defense_params: DefenseParams::default(),
            attack: AttackKind::Dpot,
            scaling_factor: 1.0,
            seeds: Seeds {
                data: 1,
                model: 2,
                round: 3,
            },
            arch: "mlp-64-16-4".to_string(),
            noniid_bias: 0.5,
            trigger_iters: 5,
            trigger_gamma0: 5.0,
        }
    }

    #[test]
    fn local_train_zero_epochs_is_zero_update() {
        let (train, _) = tiny_task();
        let model = init_model("mlp-64-16-4", 9).unwrap();
        let delta = local_train(&model, &train, 0, 0.05, 16, 7).unwrap();
        assert!(delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn local_train_is_deterministic() {
        let (train, _) = tiny_task();
        let model = init_model("mlp-64-16-4", 9).unwrap();
        let a = local_train(&model, &train, 2, 0.05, 16, 7).unwrap();
        let b = local_train(&model, &train, 2, 0.05, 16, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_train_reduces_training_loss() {
        let (train, _) = tiny_task();
        let model = init_model("mlp-64-16-4", 9).unwrap();
        let delta = local_train(&model, &train, 5, 0.05, 16, 7).unwrap();
        let trained = add_update(&model, &delta).unwrap();
        let batch = train.as_batch();
        let targets = one_hot(&train.labels(), 4);
        let (before, _) = backward(&model, &batch, &targets, LossKind::CrossEntropy).unwrap();
        let (after, _) = backward(&trained, &batch, &targets, LossKind::CrossEntropy).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn local_train_rejects_empty_data() {
        let model = init_model("mlp-64-16-4", 9).unwrap();
        let empty = Dataset::new(Vec::new(), 4, (8, 8)).unwrap();
        assert!(matches!(
            local_train(&model, &empty, 1, 0.05, 16, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn evaluate_ma_hand_tally() {
        // Constant classifier: predicts the bias argmax everywhere.
        use crate::nn::{Activation, Layer};
        let mut bias = Tensor::zeros(vec![4]);
        bias.data_mut()[2] = 5.0;
        let model = Model::from_layers(
            vec![Layer {
                weight: Tensor::zeros(vec![4, 4]),
                bias,
                activation: Activation::Softmax,
            }],
            "mlp-4-4",
        )
        .unwrap();
        let mk = |label: usize| crate::data::Example {
            image: Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            label,
        };
        let test = Dataset::new(vec![mk(2), mk(2), mk(0), mk(1), mk(3)], 4, (2, 2)).unwrap();
        let ma = evaluate_ma(&model, &test).unwrap();
        assert!((ma - 0.4).abs() < 1e-12);
        // Constant classifier hard-wired to the target label: ASR 1 over the
        // three non-target images.
        let trigger = Trigger::new(vec![0], vec![1.0], 2).unwrap();
        assert_eq!(evaluate_asr(&model, &test, &trigger).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_asr_excludes_target_label_images() {
        use crate::nn::{Activation, Layer};
        // Classifier that always answers 1; trigger targets 1.
        let mut bias = Tensor::zeros(vec![3]);
        bias.data_mut()[1] = 5.0;
        let model = Model::from_layers(
            vec![Layer {
                weight: Tensor::zeros(vec![3, 4]),
                bias,
                activation: Activation::Softmax,
            }],
            "mlp-4-3",
        )
        .unwrap();
        let mk = |label: usize| crate::data::Example {
            image: Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(),
            label,
        };
        // 2 of 5 images carry the target label and drop out of the
        // denominator; the other 3 all "succeed".
        let test = Dataset::new(vec![mk(1), mk(1), mk(0), mk(2), mk(2)], 3, (2, 2)).unwrap();
        let trigger = Trigger::new(vec![0], vec![1.0], 1).unwrap();
        assert_eq!(evaluate_asr(&model, &test, &trigger).unwrap(), 1.0);
        let all_target = Dataset::new(vec![mk(1), mk(1)], 3, (2, 2)).unwrap();
        assert!(evaluate_asr(&model, &all_target, &trigger).is_err());
    }

    #[test]
    fn run_round_dpot_produces_full_size_trigger() {
        let (train, test) = tiny_task();
        let config = tiny_config();
        let clients = partition_noniid(
            &train,
            &PartitionSpec {
                n_clients: config.n_clients,
                bias: 0.5,
                seed: 4,
            },
        )
        .unwrap();
        let malicious = vec![true, false, false, false, false, false];
        let model = init_model(&config.arch, 2).unwrap();
        let mut state = DefenseState::default();
        let (_, record) = run_round(
            &model, &clients, &malicious, &test, &config, 0, 77, &mut state,
        )
        .unwrap();
        assert_eq!(record.trigger.tri_size(), config.tri_size);
        assert!(record.ma >= 0.0 && record.ma <= 1.0);
        assert!(record.asr >= 0.0 && record.asr <= 1.0);
        assert!(record.malicious_benign_cosine.is_some());
    }

    #[test]
    fn malicious_and_benign_share_the_training_procedure() {
        // The update produced inside the round for any client is exactly
        // what local_train yields on that client's round data: one code
        // path, no attacker-specific training.
        let (train, test) = tiny_task();
        let config = tiny_config();
        let clients = partition_noniid(
            &train,
            &PartitionSpec {
                n_clients: config.n_clients,
                bias: 0.5,
                seed: 4,
            },
        )
        .unwrap();
        let malicious = vec![true, false, false, false, false, false];
        let model = init_model(&config.arch, 2).unwrap();
        let round_seed = 77;

        // Reproduce the round's data preparation.
        let sources: Vec<&Dataset> = vec![&clients[0]];
        let d = build_trigger_training_set(&sources, config.target_label).unwrap();
        let (trigger, _) = optimize_trigger(
            &model,
            &d,
            config.tri_size,
            config.trigger_iters,
            config.trigger_gamma0,
        )
        .unwrap();
        let mut triggers: Vec<Option<Trigger>> = vec![None; clients.len()];
        triggers[0] = Some(trigger);
        let round_data =
            round_client_data(&clients, &malicious, &triggers, config.poison_rate, round_seed)
                .unwrap();
        let updates = collect_updates(&model, &round_data, &config, round_seed).unwrap();

        for id in [0usize, 3] {
            let direct = local_train(
                &model,
                &round_data[id],
                config.local_epochs,
                config.local_lr,
                config.batch_size,
                derive_seed(round_seed, TAG_TRAIN, id as u64),
            )
            .unwrap();
            assert_eq!(updates[id].delta, direct, "client {id} took a different path");
        }
        // Benign clients' stored data is untouched by the attack path.
        let _ = run_round(
            &model, &clients, &malicious, &test, &config, 0, round_seed,
            &mut DefenseState::default(),
        )
        .unwrap();
        for id in 1..clients.len() {
            assert_eq!(clients[id], round_data[id], "benign data mutated");
        }
    }

    #[test]
    fn no_attack_asr_stays_near_chance() {
        let (train, test) = tiny_task();
        let mut config = tiny_config();
        config.attack = AttackKind::None;
        config.rounds = 6;
        let log = run_experiment(&config, &train, &test).unwrap();
        // 2/C chance-level bound for the reference trigger on a model that
        // never saw it.
        let last = log.records.last().unwrap();
        assert!(
            last.asr <= 2.0 / 4.0,
            "untrained reference trigger fired at {}",
            last.asr
        );
    }

    #[test]
    fn experiment_is_end_to_end_deterministic() {
        let (train, test) = tiny_task();
        let mut config = tiny_config();
        config.rounds = 2;
        let a = run_experiment(&config, &train, &test).unwrap();
        let b = run_experiment(&config, &train, &test).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.ma, rb.ma);
            assert_eq!(ra.asr, rb.asr);
            assert_eq!(ra.trigger, rb.trigger);
            assert_eq!(ra.excluded, rb.excluded);
        }
        assert_eq!(
            flatten_params(&a.final_model).data(),
            flatten_params(&b.final_model).data()
        );
    }

    #[test]
    fn single_round_config_yields_one_record() {
        let (train, test) = tiny_task();
        let mut config = tiny_config();
        config.rounds = 1;
        let log = run_experiment(&config, &train, &test).unwrap();
        assert_eq!(log.records.len(), 1);
    }

    #[test]
    fn desk_default_has_one_malicious_client() {
        let config = FLConfig::desk_default();
        assert_eq!(config.n_malicious(), 1);
    }

    #[test]
    fn malicious_set_is_constant_across_rounds() {
        // The compromised set is derived once from the data seed; rerunning
        // rounds cannot change it. Covered by determinism plus the fixed
        // derivation; here we pin the derivation itself.
        let a = derive_seed(11, TAG_MALICIOUS, 0);
        let b = derive_seed(11, TAG_MALICIOUS, 0);
        assert_eq!(a, b);
        assert_ne!(derive_seed(11, TAG_TRAIN, 0), a);
    }

    #[test]
    fn update_arrival_order_cannot_matter() {
        // Aggregation consumes updates keyed by client id in index order;
        // collect_updates returns them already canonical.
        let (train, _) = tiny_task();
        let config = tiny_config();
        let clients = partition_noniid(
            &train,
            &PartitionSpec {
                n_clients: config.n_clients,
                bias: 0.5,
                seed: 4,
            },
        )
        .unwrap();
        let model = init_model(&config.arch, 2).unwrap();
        let updates = collect_updates(&model, &clients, &config, 5).unwrap();
        for (i, u) in updates.iter().enumerate() {
            assert_eq!(u.client_id, i);
        }
    }
}
