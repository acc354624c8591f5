//! Training pipeline: anchor-loss pre-training, episodic training with the
//! full six-term objective, optimizer + cosine schedule, deterministic
//! stateless seeding, checkpointing, and the end-to-end `fit` loop with
//! periodic evaluation snapshots.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorSet};
use crate::checkpoint::{load_json, save_json, TensorArchive};
use crate::config::{OptimAlgorithm, OptimConfig, PrototypeSpace, RunConfig};
use crate::dataset::{band_normalize, ClassSplit, HsiCube, Patch};
use crate::eval::{self, EvalReport};
use crate::nn::{patches_to_batch, ExtractorConfig, FeatureExtractor};
use crate::prototypes::{self, PrototypeGroups, PrototypeSet};
use crate::sampler::{
    assign_positive_pairs, augment_episode, build_pretrain_pool_from, sample_episode_from_pool,
    split_pixels, PixelSplit,
};
use crate::{Dtype, Error, Real, Result};

// Independent deterministic seed streams derived from the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_POOL: u64 = 3;
const STREAM_PRETRAIN_EPOCH: u64 = 4;
const STREAM_EPISODE: u64 = 5;
const STREAM_AUGMENT: u64 = 6;
const STREAM_PAIRS: u64 = 7;
const STREAM_PROTO: u64 = 8;

const PRETRAIN_BATCH: usize = 64;
const EVAL_BATCH: usize = 256;

/// Stateless seed derivation (splitmix64 finalizer over mixed words), so
/// resuming at episode i replays exactly the same randomness as an
/// uninterrupted run.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Cosine-decayed step size over a fixed budget; step 0 gives the base.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with momentum or Adam over the named-parameter registry. State
/// buffers are created lazily per parameter name.
pub struct Optimizer<T: Real> {
    config: OptimConfig,
    velocity: BTreeMap<String, Vec<T>>,
    adam_m: BTreeMap<String, Vec<T>>,
    adam_v: BTreeMap<String, Vec<T>>,
    t: usize,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            velocity: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over every parameter the visitor reports.
    pub fn step<F>(&mut self, lr: f64, mut visit: F)
    where
        F: FnMut(crate::nn::ParamVisitor<T>),
    {
        self.t += 1;
        let lr_t = T::from_f64(lr);
        match self.config.algorithm {
            OptimAlgorithm::Sgd => {
                let mu = T::from_f64(self.config.momentum);
                let velocity = &mut self.velocity;
                visit(&mut |name, param, grad| {
                    let v = velocity
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); param.len()]);
                    debug_assert_eq!(v.len(), param.len());
                    for ((p, g), vi) in param.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                        *vi = mu * *vi + *g;
                        *p = *p - lr_t * *vi;
                    }
                });
            }
            OptimAlgorithm::Adam => {
                let (b1, b2) = (T::from_f64(0.9), T::from_f64(0.999));
                let eps = T::from_f64(1e-8);
                let bc1 = T::from_f64(1.0 - 0.9f64.powi(self.t as i32));
                let bc2 = T::from_f64(1.0 - 0.999f64.powi(self.t as i32));
                let (ms, vs) = (&mut self.adam_m, &mut self.adam_v);
                visit(&mut |name, param, grad| {
                    let m = ms
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); param.len()]);
                    let v = vs
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); param.len()]);
                    for i in 0..param.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        param[i] = param[i] - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                });
            }
        }
    }

    fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        for (name, v) in &self.velocity {
            archive.insert(&format!("velocity.{name}"), v);
        }
        for (name, v) in &self.adam_m {
            archive.insert(&format!("adam_m.{name}"), v);
        }
        for (name, v) in &self.adam_v {
            archive.insert(&format!("adam_v.{name}"), v);
        }
        archive
    }

    fn restore(&mut self, archive: &TensorArchive, t: usize) -> Result<()> {
        self.velocity.clear();
        self.adam_m.clear();
        self.adam_v.clear();
        self.t = t;
        for name in archive.names() {
            let values = archive.get(name).expect("listed name");
            let typed: Vec<T> = values.iter().map(|&v| T::from_f64(v)).collect();
            if let Some(rest) = name.strip_prefix("velocity.") {
                self.velocity.insert(rest.to_string(), typed);
            } else if let Some(rest) = name.strip_prefix("adam_m.") {
                self.adam_m.insert(rest.to_string(), typed);
            } else if let Some(rest) = name.strip_prefix("adam_v.") {
                self.adam_v.insert(rest.to_string(), typed);
            } else {
                return Err(Error::BadCheckpoint(format!(
                    "unknown optimizer tensor {name:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step loss values (weighted terms) and their mandated sums:
/// total = class + disc, class = osc + ca, disc = ps + pgs + reg + kcd.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub osc: f64,
    pub ca: f64,
    pub ps: f64,
    pub pgs: f64,
    pub reg: f64,
    pub kcd: f64,
    pub class: f64,
    pub disc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(osc: f64, ca: f64, ps: f64, pgs: f64, reg: f64, kcd: f64) -> Self {
        let class = osc + ca;
        let disc = ps + pgs + reg + kcd;
        LossBreakdown {
            osc,
            ca,
            ps,
            pgs,
            reg,
            kcd,
            class,
            disc,
            total: class + disc,
        }
    }

    /// Largest violation of the three decomposition identities.
    pub fn identity_error(&self) -> f64 {
        let e1 = (self.class - (self.osc + self.ca)).abs();
        let e2 = (self.disc - (self.ps + self.pgs + self.reg + self.kcd)).abs();
        let e3 = (self.total - (self.class + self.disc)).abs();
        e1.max(e2).max(e3)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    epoch: usize,
    episode: usize,
    optimizer_t: usize,
    kcd_skipped: u64,
    discover_fallbacks: u64,
    best_all_acc: Option<f64>,
    best_episode: Option<usize>,
}

/// Everything the training loop owns: network, anchors, prototypes, the
/// current prototype partition, optimizer state, and progress counters.
pub struct TrainState<T: Real> {
    pub config: RunConfig,
    pub split: ClassSplit,
    pub extractor: FeatureExtractor<T>,
    pub anchors: AnchorSet<T>,
    pub prototypes: PrototypeSet<T>,
    pub groups: PrototypeGroups,
    pub optimizer: Optimizer<T>,
    pub epoch: usize,
    pub episode: usize,
    pub kcd_skipped: u64,
    pub discover_fallbacks: u64,
    pub best_all_acc: Option<f64>,
    pub best_episode: Option<usize>,
    /// L1 norm of each parameter gradient on the most recent episode.
    pub last_grad_l1: BTreeMap<String, f64>,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: RunConfig, bands: usize) -> Result<Self> {
        config.validate()?;
        let split = ClassSplit::new(config.data.known.clone(), config.data.unknown.clone())?;
        let extractor_config = ExtractorConfig {
            bands,
            patch: config.model.patch,
            reduced_bands: config.model.reduced_bands,
            block_channels: (
                config.model.block_channels[0],
                config.model.block_channels[1],
            ),
            final_channels: config.model.final_channels,
            n_logits: split.n_logits(),
        };
        let mut net_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT, 0));
        let extractor = FeatureExtractor::new(extractor_config, &mut net_rng)?;
        let anchors = anchors::init_anchors::<T>(split.n_logits(), config.model.phi)?;
        let proto_dim = match config.model.prototype_space {
            PrototypeSpace::Penultimate => extractor.penult_dim(),
            PrototypeSpace::Logit => split.n_logits(),
        };
        let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PROTO, 0));
        let prototypes = PrototypeSet::new(
            config.model.n_prototypes,
            proto_dim,
            config.model.tau,
            &mut proto_rng,
        )?;
        let groups = PrototypeGroups::singletons(config.model.n_prototypes);
        let optimizer = Optimizer::new(config.optim);
        Ok(TrainState {
            config,
            split,
            extractor,
            anchors,
            prototypes,
            groups,
            optimizer,
            epoch: 0,
            episode: 0,
            kcd_skipped: 0,
            discover_fallbacks: 0,
            best_all_acc: None,
            best_episode: None,
            last_grad_l1: BTreeMap::new(),
        })
    }

    fn step_optimizer(&mut self, lr: f64) {
        let (opt, extractor, protos) =
            (&mut self.optimizer, &mut self.extractor, &mut self.prototypes);
        opt.step(lr, |f| {
            extractor.visit_params(f);
            protos.visit_params(f);
        });
        self.extractor.zero_grads();
        self.prototypes.zero_grads();
    }

    fn record_grad_norms(&mut self) {
        let mut norms = BTreeMap::new();
        let collect = &mut |name: &str, _param: &mut [T], grad: &mut [T]| {
            let l1: f64 = grad.iter().map(|&g| g.to_f64().abs()).sum();
            norms.insert(name.to_string(), l1);
        };
        self.extractor.visit_params(collect);
        self.prototypes.visit_params(collect);
        self.last_grad_l1 = norms;
    }

    /// Write the checkpoint directory: extractor (params + batch-norm
    /// buffers), anchors, prototypes, partition, optimizer, manifest.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut net = TensorArchive::new();
        self.extractor.visit_params(&mut |name, param, _| {
            net.insert(&format!("param.{name}"), param);
        });
        self.extractor.visit_buffers(&mut |name, buffer| {
            net.insert(&format!("buffer.{name}"), buffer);
        });
        net.save(&dir.join("extractor.bin"))?;

        let mut anchor_archive = TensorArchive::new();
        anchor_archive.insert("anchors", self.anchors.a.as_slice().expect("standard layout"));
        anchor_archive.save(&dir.join("anchors.bin"))?;

        let mut proto_archive = TensorArchive::new();
        proto_archive.insert(
            "prototypes",
            self.prototypes.c.as_slice().expect("standard layout"),
        );
        proto_archive.save(&dir.join("prototypes.bin"))?;

        self.optimizer.to_archive().save(&dir.join("optimizer.bin"))?;
        save_json(&self.groups, &dir.join("partition.json"))?;
        // Every checkpoint carries the exact config it was trained with.
        self.config.save(&dir.join("config.toml"))?;
        save_json(
            &Manifest {
                dtype: T::DTYPE.tag().to_string(),
                epoch: self.epoch,
                episode: self.episode,
                optimizer_t: self.optimizer.t,
                kcd_skipped: self.kcd_skipped,
                discover_fallbacks: self.discover_fallbacks,
                best_all_acc: self.best_all_acc,
                best_episode: self.best_episode,
            },
            &dir.join("manifest.json"),
        )
    }

    /// Restore a state saved by [`TrainState::save`]. The config must match
    /// the one the checkpoint was trained with.
    pub fn load(config: RunConfig, bands: usize, dir: &Path) -> Result<Self> {
        let manifest: Manifest = load_json(&dir.join("manifest.json"))?;
        if manifest.dtype != T::DTYPE.tag() {
            return Err(Error::BadCheckpoint(format!(
                "checkpoint is {} but this run uses {}",
                manifest.dtype,
                T::DTYPE.tag()
            )));
        }
        let mut state = TrainState::new(config, bands)?;

        let net = TensorArchive::load(&dir.join("extractor.bin"))?;
        let mut restore_err = None;
        state.extractor.visit_params(&mut |name, param, _| {
            if let Err(e) = net.restore_into(&format!("param.{name}"), param) {
                restore_err.get_or_insert(e);
            }
        });
        state.extractor.visit_buffers(&mut |name, buffer| {
            if let Err(e) = net.restore_into(&format!("buffer.{name}"), buffer) {
                restore_err.get_or_insert(e);
            }
        });
        if let Some(e) = restore_err {
            return Err(e);
        }

        let anchor_archive = TensorArchive::load(&dir.join("anchors.bin"))?;
        anchor_archive.restore_into(
            "anchors",
            state.anchors.a.as_slice_mut().expect("standard layout"),
        )?;
        let proto_archive = TensorArchive::load(&dir.join("prototypes.bin"))?;
        proto_archive.restore_into(
            "prototypes",
            state.prototypes.c.as_slice_mut().expect("standard layout"),
        )?;
        state
            .optimizer
            .restore(&TensorArchive::load(&dir.join("optimizer.bin"))?, manifest.optimizer_t)?;
        state.groups = load_json(&dir.join("partition.json"))?;
        state.groups.validate()?;
        state.epoch = manifest.epoch;
        state.episode = manifest.episode;
        state.kcd_skipped = manifest.kcd_skipped;
        state.discover_fallbacks = manifest.discover_fallbacks;
        state.best_all_acc = manifest.best_all_acc;
        state.best_episode = manifest.best_episode;
        Ok(state)
    }
}

/// Pre-training (anchor losses only) over a fixed pool of noisy support
/// replicas: per epoch, minibatch gradient descent on L_class followed by
/// the softmin anchor update for every known class. Returns the per-epoch
/// mean L_class.
pub fn pretrain<T: Real>(
    state: &mut TrainState<T>,
    cube: &HsiCube,
    train_pixels: &BTreeMap<u16, Vec<(usize, usize)>>,
    epochs: usize,
) -> Result<Vec<f64>> {
    let cfg = state.config.clone();
    let pool = build_pretrain_pool_from(
        cube,
        Some(train_pixels),
        &state.split,
        cfg.episode.shots,
        cfg.episode.pretrain_copies,
        cfg.augment.sigma_weak,
        cfg.model.patch,
        derive_seed(cfg.seed, STREAM_POOL, 0),
    )?;
    let labels: Vec<usize> = pool
        .iter()
        .map(|(_, class)| state.split.anchor_index(*class).expect("pool classes are known"))
        .collect();

    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let lr = if cfg.optim.cosine_decay {
            cosine_lr(cfg.optim.lr, state.epoch, cfg.episode.pretrain_epochs.max(1))
        } else {
            cfg.optim.lr
        };
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            STREAM_PRETRAIN_EPOCH,
            state.epoch as u64,
        ));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(PRETRAIN_BATCH) {
            let patches: Vec<&Patch> = chunk.iter().map(|&i| &pool[i].0).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = patches_to_batch::<T>(&patches);
            let (penult, logits) = state.extractor.forward(x, true);
            let (v_osc, d_osc) = anchors::loss_osc(&logits, &state.anchors, &y)?;
            let (v_ca, d_ca) = anchors::loss_ca(&logits, &state.anchors, &y, cfg.model.gamma)?;
            let batch_loss = cfg.loss.osc * v_osc.to_f64() + cfg.loss.ca * v_ca.to_f64();
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    context: "pre-training class loss".into(),
                    step: state.epoch,
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            seen += chunk.len();
            let w_osc = T::from_f64(cfg.loss.osc);
            let w_ca = T::from_f64(cfg.loss.ca);
            let d_logits = d_osc.mapv(|v| v * w_osc) + d_ca.mapv(|v| v * w_ca);
            let d_penult = Array2::<T>::zeros(penult.raw_dim());
            state.extractor.backward(d_penult, d_logits);
            state.step_optimizer(lr);
        }
        epoch_losses.push(loss_sum / seen.max(1) as f64);
        state.epoch += 1;
    }

    // Alg. 1 step 3, once after the optimization loop: the softmin anchor
    // update from eval-mode distances. Reapplying it every epoch compounds:
    // the update rebuilds each anchor from distance magnitudes, so anchor
    // scale multiplies by roughly (N−1)/√N per application, which diverges
    // for three or more anchors while the normalized network cannot chase.
    if epochs > 0 {
        let mut updates = Vec::new();
        for anchor_idx in 0..state.split.known_ids.len() {
            let rows: Vec<usize> =
                (0..pool.len()).filter(|&i| labels[i] == anchor_idx).collect();
            if rows.is_empty() {
                continue;
            }
            let mut dists = Array2::<T>::zeros((rows.len(), state.anchors.n()));
            for (out_row, chunk) in rows.chunks(EVAL_BATCH).enumerate() {
                let patches: Vec<&Patch> = chunk.iter().map(|&i| &pool[i].0).collect();
                let x = patches_to_batch::<T>(&patches);
                let (_, logits) = state.extractor.forward(x, false);
                let d = anchors::distances_batch(&logits, &state.anchors)?;
                let start = out_row * EVAL_BATCH;
                dists.slice_mut(s![start..start + chunk.len(), ..]).assign(&d);
            }
            updates.push((anchor_idx, dists));
        }
        anchors::update_known_anchors(&mut state.anchors, &updates)?;
    }
    Ok(epoch_losses)
}

/// Extra per-episode diagnostics alongside the loss breakdown.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpisodeStats {
    pub kcd_skipped: usize,
    pub self_paired: usize,
    pub n_groups: usize,
    pub lr: f64,
}

/// One episodic step, in order: sample + augment + pair, extract features
/// for all 2M views, anchor losses over all views, assignments + the four
/// discovery losses under the previous partition, regroup, then a single
/// optimizer step on the total objective.
pub fn train_episode<T: Real>(
    state: &mut TrainState<T>,
    cube: &HsiCube,
    train_pixels: &BTreeMap<u16, Vec<(usize, usize)>>,
) -> Result<(LossBreakdown, EpisodeStats)> {
    let cfg = state.config.clone();
    let idx = state.episode as u64;
    let episode = sample_episode_from_pool(
        cube,
        train_pixels,
        &state.split,
        cfg.episode.shots,
        cfg.queries(),
        cfg.model.patch,
        derive_seed(cfg.seed, STREAM_EPISODE, idx),
    )?;
    let m = episode.len();
    if episode.query_known.is_empty() && episode.query_unknown.is_empty() {
        return Err(Error::EmptySampleSet("episode has no query samples".into()));
    }

    let mut aug_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AUGMENT, idx));
    let mut pairs = augment_episode(&episode, &cfg.augment, &mut aug_rng);

    // Step 2: features for the 2M views (weak block first, then strong).
    let views: Vec<&Patch> = pairs
        .iter()
        .map(|p| &p.weak)
        .chain(pairs.iter().map(|p| &p.strong))
        .collect();
    let x = patches_to_batch::<T>(&views);
    let (penult, logits) = state.extractor.forward(x, true);

    // Step 3: anchor losses over all 2M views; unknown queries carry the
    // unknown-anchor pseudo-label.
    let y_anchor: Vec<usize> = episode
        .true_labels()
        .iter()
        .map(|&class| state.split.anchor_index(class).expect("episode classes are in the split"))
        .collect();
    let y_views: Vec<usize> = y_anchor.iter().chain(y_anchor.iter()).copied().collect();
    let (v_osc, d_osc) = anchors::loss_osc(&logits, &state.anchors, &y_views)?;
    let (v_ca, d_ca) = anchors::loss_ca(&logits, &state.anchors, &y_views, cfg.model.gamma)?;
    let w_osc = T::from_f64(cfg.loss.osc);
    let w_ca = T::from_f64(cfg.loss.ca);
    let mut d_logits = d_osc.mapv(|v| v * w_osc) + d_ca.mapv(|v| v * w_ca);

    // Step 4: prototype assignments and the similarity loss.
    let space = cfg.model.prototype_space;
    let embeddings = match space {
        PrototypeSpace::Penultimate => &penult,
        PrototypeSpace::Logit => &logits,
    };
    let e_weak = embeddings.slice(s![0..m, ..]).to_owned();
    let e_strong = embeddings.slice(s![m..2 * m, ..]).to_owned();
    let p_w = prototypes::assign(&e_weak, &state.prototypes)?;
    let p_s = prototypes::assign(&e_strong, &state.prototypes)?;

    let mut pair_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PAIRS, idx));
    let self_paired = assign_positive_pairs(
        &mut pairs,
        &episode.visible_labels(),
        e_weak.view(),
        e_strong.view(),
        &mut pair_rng,
    );
    let positives: Vec<usize> = pairs.iter().map(|p| p.positive_index).collect();
    let (v_ps, dpw_ps, dps_ps) = prototypes::loss_ps(&p_w, &p_s, &positives);

    // Steps 5–6: group losses under the previous partition, with a fresh
    // known-class alignment.
    let (v_pgs, dpw_pgs, dps_pgs) = prototypes::loss_pgs(&p_w, &p_s, &positives, &state.groups);
    let (v_reg, dpw_reg) = prototypes::loss_reg(&p_w, &state.groups);

    let n_sup = episode.support.len();
    let y_sup: Vec<usize> = y_anchor[0..n_sup].to_vec();
    let p_w_sup = p_w.slice(s![0..n_sup, ..]).to_owned();
    let p_s_sup = p_s.slice(s![0..n_sup, ..]).to_owned();
    let q_sup = prototypes::group_probabilities(&p_w_sup, &state.groups);
    state.groups.known_map = prototypes::match_known_groups(
        &q_sup,
        &y_sup,
        state.split.known_ids.len(),
        &state.groups,
    );
    let (v_kcd, dpw_kcd, dps_kcd, skipped) =
        prototypes::loss_kcd(&p_w_sup, &p_s_sup, &y_sup, &state.groups);

    // Combine assignment-space gradients with their weights.
    let (w_ps, w_pgs, w_reg, w_kcd) = (
        T::from_f64(cfg.loss.ps),
        T::from_f64(cfg.loss.pgs),
        T::from_f64(cfg.loss.reg),
        T::from_f64(cfg.loss.kcd),
    );
    let mut dp_w = dpw_ps.mapv(|v| v * w_ps)
        + dpw_pgs.mapv(|v| v * w_pgs)
        + dpw_reg.mapv(|v| v * w_reg);
    let mut dp_s = dps_ps.mapv(|v| v * w_ps) + dps_pgs.mapv(|v| v * w_pgs);
    for i in 0..n_sup {
        for k in 0..dp_w.ncols() {
            dp_w[[i, k]] = dp_w[[i, k]] + w_kcd * dpw_kcd[[i, k]];
            dp_s[[i, k]] = dp_s[[i, k]] + w_kcd * dps_kcd[[i, k]];
        }
    }
    let de_w = prototypes::assign_backward(&e_weak, &mut state.prototypes, &p_w, &dp_w);
    let de_s = prototypes::assign_backward(&e_strong, &mut state.prototypes, &p_s, &dp_s);

    let mut d_penult = Array2::<T>::zeros(penult.raw_dim());
    match space {
        PrototypeSpace::Penultimate => {
            d_penult.slice_mut(s![0..m, ..]).assign(&de_w);
            d_penult.slice_mut(s![m..2 * m, ..]).assign(&de_s);
        }
        PrototypeSpace::Logit => {
            d_logits
                .slice_mut(s![0..m, ..])
                .zip_mut_with(&de_w, |a, &b| *a = *a + b);
            d_logits
                .slice_mut(s![m..2 * m, ..])
                .zip_mut_with(&de_s, |a, &b| *a = *a + b);
        }
    }
    state.extractor.backward(d_penult, d_logits);

    let breakdown = LossBreakdown::compose(
        cfg.loss.osc * v_osc.to_f64(),
        cfg.loss.ca * v_ca.to_f64(),
        cfg.loss.ps * v_ps.to_f64(),
        cfg.loss.pgs * v_pgs.to_f64(),
        cfg.loss.reg * v_reg.to_f64(),
        cfg.loss.kcd * v_kcd.to_f64(),
    );
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            context: "episodic training loss".into(),
            step: state.episode,
        });
    }

    // Step 7: regroup prototypes from this episode's weak assignments.
    if (state.episode + 1) % cfg.grouping.regroup_every_n == 0 {
        let mut new_groups =
            prototypes::group_prototypes(&p_w, cfg.grouping.top_k, cfg.grouping.resolution);
        let q_new = prototypes::group_probabilities(&p_w_sup, &new_groups);
        new_groups.known_map = prototypes::match_known_groups(
            &q_new,
            &y_sup,
            state.split.known_ids.len(),
            &new_groups,
        );
        state.groups = new_groups;
    }

    // Step 8: one optimizer step on the total objective.
    state.record_grad_norms();
    let lr = if cfg.optim.cosine_decay {
        cosine_lr(cfg.optim.lr, state.episode, cfg.episode.episodes.max(1))
    } else {
        cfg.optim.lr
    };
    state.step_optimizer(lr);

    state.episode += 1;
    state.kcd_skipped += skipped as u64;
    let stats = EpisodeStats {
        kcd_skipped: skipped,
        self_paired,
        n_groups: state.groups.n_groups,
        lr,
    };
    Ok((breakdown, stats))
}

/// One evaluation snapshot in the metrics history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub record: String,
    pub episode: usize,
    pub known_acc: Option<f64>,
    pub unknown_acc: Option<f64>,
    pub all_acc: f64,
    pub predicted_class_count: usize,
    pub rejected_unknown_fraction: Option<f64>,
    pub false_reject_fraction: Option<f64>,
}

impl EvalRecord {
    fn from_report(episode: usize, report: &EvalReport) -> Self {
        EvalRecord {
            record: "eval".into(),
            episode,
            known_acc: report.known_acc,
            unknown_acc: report.unknown_acc,
            all_acc: report.all_acc,
            predicted_class_count: report.predicted_class_count,
            rejected_unknown_fraction: report.rejected_unknown_fraction,
            false_reject_fraction: report.false_reject_fraction,
        }
    }
}

#[derive(Serialize)]
struct EpisodeRecord<'a> {
    record: &'static str,
    episode: usize,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
    #[serde(flatten)]
    stats: &'a EpisodeStats,
}

pub struct FitOptions<'a> {
    /// Run directory for checkpoints + metrics log; in-memory only if None.
    pub out_dir: Option<&'a Path>,
    /// Resume from `out_dir/last` when present.
    pub resume: bool,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            out_dir: None,
            resume: false,
        }
    }
}

pub struct FitOutcome<T: Real> {
    pub state: TrainState<T>,
    /// Evaluation snapshots: one post-pretrain plus one per cadence point.
    pub history: Vec<EvalRecord>,
    pub final_report: EvalReport,
}

struct MetricsLog {
    file: Option<std::fs::File>,
}

impl MetricsLog {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        Ok(MetricsLog { file })
    }

    fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        if let Some(file) = &mut self.file {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::InvalidConfig(format!("serialize metrics record: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}

/// The deterministic preprocessing every run shares: band-normalize the
/// cube and split labeled pixels into train/test from the config seed.
pub fn prepare_data(config: &RunConfig, cube: &HsiCube) -> (HsiCube, PixelSplit) {
    let normalized = band_normalize(cube);
    let pixels = split_pixels(
        &normalized,
        config.data.test_fraction,
        derive_seed(config.seed, STREAM_SPLIT, 0),
    );
    (normalized, pixels)
}

/// Scalar width a checkpoint directory was written with.
pub fn checkpoint_dtype(dir: &Path) -> Result<Dtype> {
    let manifest: Manifest = load_json(&dir.join("manifest.json"))?;
    match manifest.dtype.as_str() {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(Error::BadCheckpoint(format!("unknown dtype tag {other:?}"))),
    }
}

/// Full training run: pre-train, then episodic training with periodic
/// held-out evaluation; tracks the best snapshot by ALL accuracy.
pub fn fit<T: Real>(config: RunConfig, cube: &HsiCube, options: FitOptions) -> Result<FitOutcome<T>> {
    config.validate()?;
    let (normalized, pixels) = prepare_data(&config, cube);

    let last_dir = options.out_dir.map(|d| d.join("last"));
    let best_dir = options.out_dir.map(|d| d.join("best"));
    let resume_dir = last_dir
        .as_ref()
        .filter(|d| options.resume && d.join("manifest.json").is_file());
    let mut state = match resume_dir {
        Some(dir) => TrainState::<T>::load(config.clone(), normalized.bands(), dir)?,
        None => TrainState::<T>::new(config.clone(), normalized.bands())?,
    };
    if let Some(dir) = options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        config.save(&dir.join("config.toml"))?;
    }
    let mut log = MetricsLog::open(options.out_dir)?;

    let test = eval::build_test_set(&normalized, &pixels.test, config.model.patch)?;
    let episodes = config.episode.episodes;
    let eval_every = config.episode.eval_every;
    let mut history: Vec<EvalRecord> = Vec::new();

    if state.epoch == 0 && state.episode == 0 {
        let losses = pretrain(
            &mut state,
            &normalized,
            &pixels.train,
            config.episode.pretrain_epochs,
        )?;
        for (i, loss) in losses.iter().enumerate() {
            log.write(&serde_json::json!({
                "record": "pretrain",
                "epoch": i,
                "class_loss": loss,
            }))?;
        }
    }

    let snapshot = |state: &mut TrainState<T>,
                    history: &mut Vec<EvalRecord>,
                    log: &mut MetricsLog|
     -> Result<EvalReport> {
        let report = eval::evaluate(state, &test)?;
        let record = EvalRecord::from_report(state.episode, &report);
        log.write(&record)?;
        history.push(record);
        let improved = state
            .best_all_acc
            .map(|best| report.all_acc > best)
            .unwrap_or(true);
        if improved {
            state.best_all_acc = Some(report.all_acc);
            state.best_episode = Some(state.episode);
            if let Some(dir) = &best_dir {
                state.save(dir)?;
            }
        }
        if let Some(dir) = &last_dir {
            state.save(dir)?;
        }
        Ok(report)
    };

    let mut last_report: Option<EvalReport> = None;
    if eval_every > 0 && state.episode == 0 {
        last_report = Some(snapshot(&mut state, &mut history, &mut log)?);
    }
    while state.episode < episodes {
        let (breakdown, stats) = train_episode(&mut state, &normalized, &pixels.train)?;
        debug_assert!(breakdown.identity_error() < 1e-9);
        log.write(&EpisodeRecord {
            record: "episode",
            episode: state.episode,
            losses: &breakdown,
            stats: &stats,
        })?;
        if eval_every > 0 && state.episode % eval_every == 0 {
            last_report = Some(snapshot(&mut state, &mut history, &mut log)?);
        }
    }
    let final_report = match (eval_every > 0 && episodes % eval_every == 0, last_report) {
        (true, Some(report)) => report,
        _ => snapshot(&mut state, &mut history, &mut log)?,
    };

    Ok(FitOutcome {
        state,
        history,
        final_report,
    })
}
