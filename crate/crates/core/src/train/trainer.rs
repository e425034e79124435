//! Training orchestration: alternating generator and discriminator updates,
//! EMA state maintenance, periodic evaluation, and checkpointing.
//!
//! Per step: (1) forward both domains, (2) update the generator on the
//! weighted objective with the discriminators frozen, (3) commit the memory
//! and prototype EMA updates, (4) update the discriminators on detached
//! self-information maps. Zero-weight terms are skipped outright, so a
//! source-only configuration never computes the target branch.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adv::{d_loss_branch, g_adv_loss, self_information_map};
use crate::data::{
    assemble_batch, draw_slice_indices, load_manifest, mix_seed, subject_split, BatchOptions,
    SliceDataset,
};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, dice_loss, seg_loss};
use crate::metrics::{evaluate_volume, EvalReport};
use crate::net::{
    BackboneKind, PatchDiscriminator, SegNetwork, SegNetworkCfg, HIGH_CHANNELS, SEM_CHANNELS,
};
use crate::net::segmenter::{ADAM_PREFIXES, SGD_PREFIXES};
use crate::nn::{ops, ParamStore};
use crate::proto::{batch_prototypes, proto_loss, pseudo_labels, Domain, PrototypeState};
use crate::text::{build_prompts, load_embedding_bank, stub_embeddings, PromptSpec};
use crate::train::checkpoint::{self, keys, Checkpoint, CheckpointHeader};
use crate::train::config::TrainConfig;
use crate::train::optim::{Adam, SgdMomentum};
use crate::types::{LabelBatch, Modality};
use crate::vlcol::{class_pixel_features, vlcol_loss, ClassFeatureMemory};

const SRC_STREAM: u64 = 1;
const TGT_STREAM: u64 = 2;
const AUG_STREAM: u64 = 3;
const GEN_INIT: u64 = 4;
const DISC_INIT: u64 = 5;

/// Train/test splits for both domains. Target training labels are stripped;
/// target test labels are kept for evaluation only.
pub struct TrainData {
    pub source_train: SliceDataset,
    pub source_test: SliceDataset,
    pub target_train: SliceDataset,
    pub target_test: SliceDataset,
}

impl TrainData {
    pub fn from_datasets(
        source: &SliceDataset,
        target: &SliceDataset,
        train_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        if !source.is_labeled() {
            return Err(Error::Config("source dataset must be labeled".into()));
        }
        source.validate()?;
        target.validate()?;
        let (s_train, s_test) = subject_split(source.subjects.len(), train_fraction, split_seed);
        let (t_train, t_test) = subject_split(target.subjects.len(), train_fraction, split_seed);
        Ok(TrainData {
            source_train: source.subset(&s_train)?,
            source_test: source.subset(&s_test)?,
            target_train: target.subset(&t_train)?.without_labels(),
            target_test: target.subset(&t_test)?,
        })
    }

    /// Load both manifest directories named by the config and split them.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let source = load_manifest(Path::new(&cfg.source_data))?;
        let target = load_manifest(Path::new(&cfg.target_data))?;
        for ds in [&source, &target] {
            if ds.num_classes != cfg.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, config expects {}",
                    ds.num_classes, cfg.num_classes
                )));
            }
        }
        Self::from_datasets(&source, &target, cfg.train_fraction, cfg.split_seed)
    }
}

/// Every objective term of one step, pre-weighting, plus the optimized
/// total. `None` marks a term that was disabled or skipped this step;
/// skipped terms contribute exactly zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr_sgd: f64,
    pub seg_ce: f64,
    pub seg_dice: f64,
    pub seg_aux: Option<f64>,
    pub adv: Option<f64>,
    pub vlcol: Option<f64>,
    pub vlcol_classes: Vec<usize>,
    pub proto: Option<f64>,
    pub proto_classes: Vec<usize>,
    pub total: f64,
    pub d_main: Option<f64>,
    pub d_aux: Option<f64>,
}

impl LossRecord {
    /// The weighted sum the record claims to have optimized; tests compare
    /// this against `total`.
    pub fn weighted_sum(&self, cfg: &TrainConfig) -> f64 {
        self.seg_ce
            + self.seg_dice
            + cfg.aux_seg_weight * self.seg_aux.unwrap_or(0.0)
            + cfg.lambda_adv * self.adv.unwrap_or(0.0)
            + cfg.lambda_vlcol * self.vlcol.unwrap_or(0.0)
            + cfg.lambda_proto * self.proto.unwrap_or(0.0)
    }
}

pub struct RunOutput {
    pub history: Vec<LossRecord>,
    /// (iteration, target-test mean foreground Dice) at each periodic eval.
    pub eval_history: Vec<(usize, f64)>,
    pub final_eval: Option<EvalReport>,
    pub best_dice: Option<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    device: Device,
    dtype: DType,
    pub gen: ParamStore,
    pub net: SegNetwork,
    pub disc: ParamStore,
    pub d_main: PatchDiscriminator,
    pub d_aux: PatchDiscriminator,
    sgd: SgdMomentum,
    adam_gen: Adam,
    adam_disc: Adam,
    pub memory: ClassFeatureMemory,
    pub prototypes: PrototypeState,
    pub bank_source: Tensor,
    pub bank_target: Tensor,
    source_modality: Modality,
    target_modality: Modality,
    pub iteration: usize,
    pub best_dice: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Extract a loss scalar, aborting with a diagnostic dump on NaN/inf.
fn checked_scalar(t: &Tensor, term: &str, seen: &[(&str, f64)]) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        let dump: Vec<String> = seen.iter().map(|(k, x)| format!("{k}={x}")).collect();
        return Err(Error::NonFinite(format!(
            "{term} = {v}; terms this step: [{}]",
            dump.join(", ")
        )));
    }
    Ok(v)
}

fn bank_for(
    cfg: &TrainConfig,
    modality: Modality,
    override_dir: &Option<String>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let bank = match override_dir {
        Some(dir) => load_embedding_bank(Path::new(dir), cfg.num_classes)?,
        None => {
            let terms: Vec<&str> = cfg.class_terms.iter().map(String::as_str).collect();
            let prompts = build_prompts(&PromptSpec::new(&cfg.dataset_name, modality, &terms))?;
            stub_embeddings(modality, &prompts, cfg.text_dim, cfg.text_seed)?
        }
    };
    if bank.dim() != cfg.text_dim {
        return Err(Error::Config(format!(
            "embedding bank width {} != configured text_dim {}",
            bank.dim(),
            cfg.text_dim
        )));
    }
    bank.to_tensor(dtype, device)
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        source_modality: Modality,
        target_modality: Modality,
    ) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let dtype = DType::F32;

        let mut gen = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[GEN_INIT, cfg.seed]));
        let net = SegNetwork::new(
            &mut gen,
            SegNetworkCfg {
                backbone: cfg.backbone.parse::<BackboneKind>()?,
                output_stride: cfg.output_stride,
                num_classes: cfg.num_classes,
                text_dim: cfg.text_dim,
            },
            &mut rng,
        )?;

        let mut disc = ParamStore::new(dtype);
        let mut rng_d = ChaCha8Rng::seed_from_u64(mix_seed(&[DISC_INIT, cfg.seed]));
        let d_main = PatchDiscriminator::new(&mut disc, "d_main", cfg.num_classes, &mut rng_d)?;
        let d_aux = PatchDiscriminator::new(&mut disc, "d_aux", cfg.num_classes, &mut rng_d)?;

        let bank_source = bank_for(&cfg, source_modality, &cfg.text_bank_source, dtype, &device)?;
        let bank_target = bank_for(&cfg, target_modality, &cfg.text_bank_target, dtype, &device)?;

        let sgd = SgdMomentum::new(
            cfg.sgd_lr,
            cfg.sgd_momentum,
            cfg.weight_decay,
            cfg.poly_power,
            cfg.iterations,
        );
        let adam_gen = Adam::new(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
        let adam_disc = Adam::new(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
        let memory =
            ClassFeatureMemory::new(cfg.num_classes, SEM_CHANNELS, cfg.memory_decay, dtype)?;
        let prototypes = PrototypeState::new(
            cfg.num_classes,
            HIGH_CHANNELS,
            cfg.prototype_momentum,
            cfg.swap_momentum,
            dtype,
        )?;

        Ok(Trainer {
            cfg,
            device,
            dtype,
            gen,
            net,
            disc,
            d_main,
            d_aux,
            sgd,
            adam_gen,
            adam_disc,
            memory,
            prototypes,
            bank_source,
            bank_target,
            source_modality,
            target_modality,
            iteration: 0,
            best_dice: None,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn modalities(&self) -> (Modality, Modality) {
        (self.source_modality, self.target_modality)
    }

    fn needs_target(&self) -> bool {
        self.cfg.lambda_adv > 0.0 || self.cfg.lambda_proto > 0.0
    }

    /// Auxiliary-branch probabilities at full resolution.
    fn aux_probs(&self, f_aux: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let up = ops::upsample_bilinear(f_aux, h, w)?;
        ops::softmax(&up, 1)
    }

    /// One optimization step on prepared batches. `tgt_images` is required
    /// exactly when an adversarial or prototype weight is active.
    pub fn train_step(
        &mut self,
        src_images: &Tensor,
        src_labels: &LabelBatch,
        tgt_images: Option<&Tensor>,
    ) -> Result<LossRecord> {
        let cfg = self.cfg.clone();
        let (_, _, in_h, in_w) = src_images.dims4()?;
        let mut seen: Vec<(&str, f64)> = Vec::new();

        // Source forward and supervised objective.
        let t_src = self.net.project_text(&self.bank_source)?;
        let src_fwd = self.net.forward(src_images, &t_src)?;
        let (_, _, fh, fw) = src_fwd.f_sem.dims4()?;

        // The total accumulates in f64 so the recorded value reproduces the
        // weighted sum of the recorded terms exactly; the f32 term tensors
        // still receive unit-scaled gradients through the casts.
        let ce_t = ce_loss(&src_fwd.probs, src_labels)?;
        let dice_t = dice_loss(&src_fwd.probs, src_labels)?;
        let seg_ce = checked_scalar(&ce_t, "seg_ce", &seen)?;
        seen.push(("seg_ce", seg_ce));
        let seg_dice = checked_scalar(&dice_t, "seg_dice", &seen)?;
        seen.push(("seg_dice", seg_dice));
        let mut total = (ce_t.to_dtype(DType::F64)? + dice_t.to_dtype(DType::F64)?)?;

        let mut seg_aux = None;
        if cfg.aux_seg_weight > 0.0 {
            let probs = self.aux_probs(&src_fwd.f_aux, in_h, in_w)?;
            let aux_t = seg_loss(&probs, src_labels)?;
            let v = checked_scalar(&aux_t, "seg_aux", &seen)?;
            seen.push(("seg_aux", v));
            seg_aux = Some(v);
            total = (total + (aux_t.to_dtype(DType::F64)? * cfg.aux_seg_weight)?)?;
        }

        // Target forward, needed by the adversarial and prototype terms.
        let tgt_fwd = if self.needs_target() {
            let images = tgt_images.ok_or_else(|| {
                Error::Config("active adversarial/prototype weights need a target batch".into())
            })?;
            let t_tgt = self.net.project_text(&self.bank_target)?;
            Some(self.net.forward(images, &t_tgt)?)
        } else {
            None
        };

        let mut adv = None;
        let mut i_tgt_main = None;
        let mut i_tgt_aux = None;
        if cfg.lambda_adv > 0.0 {
            let tgt = tgt_fwd.as_ref().expect("target forward exists");
            let main_map = self_information_map(&tgt.probs)?;
            let aux_map = self_information_map(&self.aux_probs(&tgt.f_aux, in_h, in_w)?)?;
            let adv_t = g_adv_loss(
                &self.d_main.forward(&main_map)?,
                &self.d_aux.forward(&aux_map)?,
                cfg.adv_aux_weight,
            )?;
            let v = checked_scalar(&adv_t, "adv", &seen)?;
            seen.push(("adv", v));
            adv = Some(v);
            total = (total + (adv_t.to_dtype(DType::F64)? * cfg.lambda_adv)?)?;
            i_tgt_main = Some(main_map);
            i_tgt_aux = Some(aux_map);
        }

        let labels_low = src_labels.downsample(fh, fw);
        let mut vlcol = None;
        let mut vlcol_classes = Vec::new();
        let mut vlcol_update = None;
        if cfg.lambda_vlcol > 0.0 {
            let (feats, present) = class_pixel_features(&src_fwd.f_sem, &labels_low)?;
            let outcome = vlcol_loss(&self.memory, &feats, &present, &t_src)?;
            vlcol_classes = outcome.used_classes.clone();
            if let Some(value) = outcome.value {
                let v = checked_scalar(&value, "vlcol", &seen)?;
                seen.push(("vlcol", v));
                vlcol = Some(v);
                total = (total + (value.to_dtype(DType::F64)? * cfg.lambda_vlcol)?)?;
            }
            vlcol_update = Some((feats, present));
        }

        let mut proto = None;
        let mut proto_classes = Vec::new();
        let mut proto_update = None;
        if cfg.lambda_proto > 0.0 {
            let tgt = tgt_fwd.as_ref().expect("target forward exists");
            let (src_protos, src_present) = batch_prototypes(&src_fwd.f_high, &labels_low)?;
            let pseudo = pseudo_labels(&tgt.probs)?.downsample(fh, fw);
            let (tgt_protos, tgt_present) = batch_prototypes(&tgt.f_high, &pseudo)?;
            let outcome = proto_loss(
                &self.prototypes,
                &src_protos,
                &src_present,
                &tgt_protos,
                &tgt_present,
            )?;
            proto_classes = outcome.common_classes.clone();
            if let Some(value) = outcome.value {
                let v = checked_scalar(&value, "proto", &seen)?;
                seen.push(("proto", v));
                proto = Some(v);
                total = (total + (value.to_dtype(DType::F64)? * cfg.lambda_proto)?)?;
            }
            proto_update = Some((src_protos, src_present, tgt_protos, tgt_present));
        }

        let total_v = checked_scalar(&total, "total", &seen)?;

        // Generator update; discriminator parameters receive gradients from
        // the adversarial term but are not stepped here.
        let grads = total.backward()?;
        self.sgd.step(
            &self.gen.vars_with_prefix(&SGD_PREFIXES),
            &grads,
            self.iteration,
        )?;
        self.adam_gen
            .step(&self.gen.vars_with_prefix(&ADAM_PREFIXES), &grads)?;
        drop(grads);

        // EMA commits after the generator update.
        if let Some((feats, present)) = vlcol_update {
            self.memory.update(&feats, &present)?;
        }
        if let Some((src_protos, src_present, tgt_protos, tgt_present)) = proto_update {
            self.prototypes
                .update(Domain::Source, &src_protos, &src_present)?;
            self.prototypes
                .update(Domain::Target, &tgt_protos, &tgt_present)?;
        }

        // Discriminator update on detached maps.
        let mut d_main_v = None;
        let mut d_aux_v = None;
        if cfg.lambda_adv > 0.0 {
            let i_src_main = self_information_map(&src_fwd.probs.detach())?;
            let i_src_aux =
                self_information_map(&self.aux_probs(&src_fwd.f_aux.detach(), in_h, in_w)?)?;
            let main_t = d_loss_branch(
                &self.d_main.forward(&i_src_main)?,
                &self.d_main.forward(&i_tgt_main.expect("map exists").detach())?,
            )?;
            let aux_t = d_loss_branch(
                &self.d_aux.forward(&i_src_aux)?,
                &self.d_aux.forward(&i_tgt_aux.expect("map exists").detach())?,
            )?;
            let vm = checked_scalar(&main_t, "d_main", &seen)?;
            seen.push(("d_main", vm));
            let va = checked_scalar(&aux_t, "d_aux", &seen)?;
            seen.push(("d_aux", va));
            let d_total = (main_t + aux_t)?;
            let d_grads = d_total.backward()?;
            self.adam_disc.step(&self.disc.all_vars(), &d_grads)?;
            d_main_v = Some(vm);
            d_aux_v = Some(va);
        }

        let record = LossRecord {
            iteration: self.iteration,
            lr_sgd: self.sgd.lr_at(self.iteration),
            seg_ce,
            seg_dice,
            seg_aux,
            adv,
            vlcol,
            vlcol_classes,
            proto,
            proto_classes,
            total: total_v,
            d_main: d_main_v,
            d_aux: d_aux_v,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Run the remaining iterations, sampling batches per step, logging one
    /// record per iteration, and (when configured) evaluating periodically
    /// and writing checkpoints under the config's output directory.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut on_record: impl FnMut(&LossRecord) -> Result<()>,
    ) -> Result<RunOutput> {
        if data.source_train.num_classes != self.cfg.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, trainer expects {}",
                data.source_train.num_classes, self.cfg.num_classes
            )));
        }
        let mut history = Vec::new();
        let mut eval_history = Vec::new();
        let cfg = self.cfg.clone();
        let out_dir = Path::new(&cfg.out_dir).to_path_buf();
        let can_eval = data.target_test.slice_count() > 0 && data.target_test.is_labeled();

        while self.iteration < cfg.iterations {
            let step = self.iteration as u64;
            let src_picks = draw_slice_indices(
                &data.source_train,
                mix_seed(&[SRC_STREAM, cfg.seed]),
                step,
                cfg.batch_size,
            )?;
            let src_opts = BatchOptions {
                augment: cfg.augment,
                seed: mix_seed(&[AUG_STREAM, cfg.seed]),
                step,
                dtype: self.dtype,
            };
            let (src_images, src_labels) =
                assemble_batch(&data.source_train, &src_picks, &src_opts, &self.device)?;
            let src_labels = src_labels
                .ok_or_else(|| Error::Config("source dataset must be labeled".into()))?;

            let tgt_images = if self.needs_target() {
                let picks = draw_slice_indices(
                    &data.target_train,
                    mix_seed(&[TGT_STREAM, cfg.seed]),
                    step,
                    cfg.batch_size,
                )?;
                let opts = BatchOptions::plain(self.dtype);
                let (images, _) = assemble_batch(&data.target_train, &picks, &opts, &self.device)?;
                Some(images.values)
            } else {
                None
            };

            let record = self.train_step(&src_images.values, &src_labels, tgt_images.as_ref())?;
            on_record(&record)?;
            history.push(record);

            let done = self.iteration;
            if cfg.eval_every > 0 && done % cfg.eval_every == 0 && can_eval {
                let report = self.evaluate(&data.target_test)?;
                let dice = report.mean_foreground_dice;
                eval_history.push((done, dice));
                if self.best_dice.map_or(true, |b| dice > b) {
                    self.best_dice = Some(dice);
                    if cfg.checkpoint_every > 0 {
                        self.save_checkpoint(&out_dir.join("checkpoints").join("best"))?;
                    }
                }
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                self.save_checkpoint(
                    &out_dir.join("checkpoints").join(format!("iter_{done:06}")),
                )?;
            }
        }

        let final_eval = if can_eval {
            let report = self.evaluate(&data.target_test)?;
            let dice = report.mean_foreground_dice;
            eval_history.push((self.iteration, dice));
            if self.best_dice.map_or(true, |b| dice > b) {
                self.best_dice = Some(dice);
            }
            Some(report)
        } else {
            None
        };
        if cfg.checkpoint_every > 0 {
            self.save_checkpoint(&out_dir.join("checkpoints").join("final"))?;
        }

        Ok(RunOutput {
            history,
            eval_history,
            final_eval,
            best_dice: self.best_dice,
        })
    }

    /// Bank for a dataset's modality; checkpointed banks keep evaluation
    /// self-contained.
    fn bank_for_modality(&self, modality: Modality) -> Result<&Tensor> {
        if modality == self.source_modality {
            Ok(&self.bank_source)
        } else if modality == self.target_modality {
            Ok(&self.bank_target)
        } else {
            Err(Error::Config(format!(
                "no embedding bank for modality {modality}; trained on {} and {}",
                self.source_modality, self.target_modality
            )))
        }
    }

    /// Projected per-class text features for one of the trained modalities.
    pub fn text_class_features(&self, modality: Modality) -> Result<Tensor> {
        let bank = self.bank_for_modality(modality)?;
        self.net.project_text(bank)
    }

    /// Main-branch inference and subject-level metrics on a labeled dataset.
    pub fn evaluate(&self, dataset: &SliceDataset) -> Result<EvalReport> {
        if !dataset.is_labeled() {
            return Err(Error::Config("evaluation needs ground-truth labels".into()));
        }
        let bank = self.bank_for_modality(dataset.modality)?;
        let t_class = self.net.project_text(bank)?;
        let (h, w) = (dataset.height, dataset.width);
        let chunk = self.cfg.batch_size.max(1);

        let mut subjects = Vec::with_capacity(dataset.subjects.len());
        for (si, subject) in dataset.subjects.iter().enumerate() {
            let mut preds: Vec<Vec<u8>> = Vec::with_capacity(subject.slices.len());
            let mut gts: Vec<Vec<u8>> = Vec::with_capacity(subject.slices.len());
            let indices: Vec<usize> = (0..subject.slices.len()).collect();
            for block in indices.chunks(chunk) {
                let picks: Vec<(usize, usize)> = block.iter().map(|&i| (si, i)).collect();
                let (images, _) = assemble_batch(
                    dataset,
                    &picks,
                    &BatchOptions::plain(self.dtype),
                    &self.device,
                )?;
                let fwd = self.net.forward(&images.values, &t_class)?;
                let flat = ops::argmax_channels(&fwd.probs)?;
                for (bi, &i) in block.iter().enumerate() {
                    preds.push(flat[bi * h * w..(bi + 1) * h * w].to_vec());
                    gts.push(subject.slices[i].label.clone().expect("labeled"));
                }
            }
            subjects.push(evaluate_volume(
                &subject.id,
                &preds,
                &gts,
                h,
                w,
                dataset.num_classes,
                dataset.spacing,
            )?);
        }
        EvalReport::from_subjects(subjects, dataset.num_classes, dataset.spacing)
    }

    pub fn export_checkpoint(&self) -> Result<(CheckpointHeader, BTreeMap<String, Tensor>)> {
        let mut tensors = BTreeMap::new();
        for (name, t) in self.gen.export_values()? {
            tensors.insert(format!("{}{name}", keys::GENERATOR), t);
        }
        for (name, t) in self.disc.export_values()? {
            tensors.insert(format!("{}{name}", keys::DISCRIMINATOR), t);
        }
        self.sgd.export_state(keys::SGD, &mut tensors)?;
        self.adam_gen.export_state(keys::ADAM_GEN, &mut tensors)?;
        self.adam_disc.export_state(keys::ADAM_DISC, &mut tensors)?;

        let (mem_rows, memory_flags) = self.memory.export()?;
        tensors.insert(keys::MEMORY_ROWS.to_string(), mem_rows);
        let (proto_src, proto_tgt, proto_source_flags, proto_target_flags) =
            self.prototypes.export()?;
        tensors.insert(keys::PROTO_SOURCE.to_string(), proto_src);
        tensors.insert(keys::PROTO_TARGET.to_string(), proto_tgt);
        tensors.insert(keys::BANK_SOURCE.to_string(), self.bank_source.clone());
        tensors.insert(keys::BANK_TARGET.to_string(), self.bank_target.clone());

        let header = CheckpointHeader {
            schema: checkpoint::SCHEMA_VERSION,
            iteration: self.iteration,
            backbone: self.cfg.backbone.clone(),
            output_stride: self.cfg.output_stride,
            num_classes: self.cfg.num_classes,
            text_dim: self.cfg.text_dim,
            config_digest: self.cfg.digest(),
            adam_gen_steps: self.adam_gen.steps_taken(),
            adam_disc_steps: self.adam_disc.steps_taken(),
            memory_flags,
            proto_source_flags,
            proto_target_flags,
            best_dice: self.best_dice,
            source_modality: self.source_modality.to_string(),
            target_modality: self.target_modality.to_string(),
        };
        Ok((header, tensors))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let (header, tensors) = self.export_checkpoint()?;
        checkpoint::save_checkpoint(dir, &header, &tensors)
    }

    /// Rebuild a trainer from a checkpoint. The config must describe the
    /// same architecture the checkpoint was trained with.
    pub fn from_checkpoint(cfg: TrainConfig, dir: &Path) -> Result<Self> {
        let ckpt = checkpoint::load_checkpoint(dir, &Device::Cpu)?;
        let h = &ckpt.header;
        if h.backbone != cfg.backbone
            || h.output_stride != cfg.output_stride
            || h.num_classes != cfg.num_classes
            || h.text_dim != cfg.text_dim
        {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint {}/stride {}/{} classes/text {} vs config {}/stride {}/{} classes/text {}",
                h.backbone,
                h.output_stride,
                h.num_classes,
                h.text_dim,
                cfg.backbone,
                cfg.output_stride,
                cfg.num_classes,
                cfg.text_dim
            )));
        }
        let source_modality = Modality::parse(&h.source_modality)?;
        let target_modality = Modality::parse(&h.target_modality)?;
        let mut trainer = Trainer::new(cfg, source_modality, target_modality)?;
        trainer.restore(&ckpt)?;
        Ok(trainer)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.gen.load_values(&ckpt.strip_prefix(keys::GENERATOR))?;
        self.disc.load_values(&ckpt.strip_prefix(keys::DISCRIMINATOR))?;
        self.sgd.load_state(keys::SGD, &ckpt.tensors);
        self.adam_gen
            .load_state(keys::ADAM_GEN, ckpt.header.adam_gen_steps, &ckpt.tensors)?;
        self.adam_disc
            .load_state(keys::ADAM_DISC, ckpt.header.adam_disc_steps, &ckpt.tensors)?;
        self.memory
            .load(ckpt.tensor(keys::MEMORY_ROWS)?, &ckpt.header.memory_flags)?;
        self.prototypes.load(
            ckpt.tensor(keys::PROTO_SOURCE)?,
            ckpt.tensor(keys::PROTO_TARGET)?,
            &ckpt.header.proto_source_flags,
            &ckpt.header.proto_target_flags,
        )?;
        self.bank_source = ckpt.tensor(keys::BANK_SOURCE)?.to_dtype(self.dtype)?;
        self.bank_target = ckpt.tensor(keys::BANK_TARGET)?.to_dtype(self.dtype)?;
        self.iteration = ckpt.header.iteration;
        self.best_dice = ckpt.header.best_dice;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, PhantomConfig};
    use candle_core::Var;

    fn tiny_cfg(iterations: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.backbone = "tiny".into();
        cfg.output_stride = 16;
        cfg.batch_size = 2;
        cfg.iterations = iterations;
        cfg.text_dim = 16;
        cfg.augment = false;
        cfg
    }

    fn tiny_data() -> TrainData {
        let mut pc = PhantomConfig::default();
        pc.subjects_per_domain = 3;
        pc.slices_per_subject = 2;
        pc.size = 32;
        let (src, tgt) = generate_phantoms(&pc).unwrap();
        TrainData::from_datasets(&src, &tgt, 0.67, 42).unwrap()
    }

    fn first_batch(
        trainer: &Trainer,
        data: &TrainData,
    ) -> (Tensor, LabelBatch, Tensor) {
        let cfg = trainer.cfg().clone();
        let picks = draw_slice_indices(
            &data.source_train,
            mix_seed(&[SRC_STREAM, cfg.seed]),
            0,
            cfg.batch_size,
        )
        .unwrap();
        let opts = BatchOptions::plain(trainer.dtype());
        let (imgs, lbls) =
            assemble_batch(&data.source_train, &picks, &opts, trainer.device()).unwrap();
        let tpicks = draw_slice_indices(
            &data.target_train,
            mix_seed(&[TGT_STREAM, cfg.seed]),
            0,
            cfg.batch_size,
        )
        .unwrap();
        let (timgs, _) =
            assemble_batch(&data.target_train, &tpicks, &opts, trainer.device()).unwrap();
        (imgs.values, lbls.unwrap(), timgs.values)
    }

    fn digest_tensors(map: &BTreeMap<String, Tensor>) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        };
        for (k, t) in map {
            eat(k.as_bytes());
            let vals = t
                .to_dtype(DType::F64)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            for v in vals {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    #[test]
    fn one_step_records_finite_nonnegative_terms() {
        let data = tiny_data();
        let mut trainer =
            Trainer::new(tiny_cfg(4), data.source_train.modality, data.target_train.modality)
                .unwrap();
        let (src, labels, tgt) = first_batch(&trainer, &data);
        let rec = trainer.train_step(&src, &labels, Some(&tgt)).unwrap();

        assert!(rec.seg_ce.is_finite() && rec.seg_ce >= 0.0);
        assert!(rec.seg_dice.is_finite() && rec.seg_dice >= 0.0);
        let adv = rec.adv.expect("adversarial weight is on by default");
        assert!(adv.is_finite() && adv >= 0.0);
        for v in [rec.vlcol, rec.proto].into_iter().flatten() {
            assert!(v.is_finite() && v >= 0.0);
        }
        let dm = rec.d_main.unwrap();
        let da = rec.d_aux.unwrap();
        assert!(dm.is_finite() && dm >= 0.0);
        assert!(da.is_finite() && da >= 0.0);
        assert!(rec.total.is_finite());
        assert_eq!(trainer.iteration, 1);
    }

    #[test]
    fn total_is_weighted_sum_of_recorded_terms() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(3);
        cfg.aux_seg_weight = 0.4;
        let mut trainer =
            Trainer::new(cfg.clone(), data.source_train.modality, data.target_train.modality)
                .unwrap();
        for _ in 0..3 {
            let (src, labels, tgt) = first_batch(&trainer, &data);
            let rec = trainer.train_step(&src, &labels, Some(&tgt)).unwrap();
            let expect = rec.weighted_sum(&cfg);
            assert!(
                (rec.total - expect).abs() <= 1e-6,
                "iteration {}: {} vs {}",
                rec.iteration,
                rec.total,
                expect
            );
        }
    }

    #[test]
    fn zero_weights_match_a_pure_supervised_step() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(2);
        cfg.lambda_adv = 0.0;
        cfg.lambda_vlcol = 0.0;
        cfg.lambda_proto = 0.0;

        let src_mod = data.source_train.modality;
        let tgt_mod = data.target_train.modality;
        let mut a = Trainer::new(cfg.clone(), src_mod, tgt_mod).unwrap();
        let b = Trainer::new(cfg.clone(), src_mod, tgt_mod).unwrap();
        assert_eq!(a.gen.digest().unwrap(), b.gen.digest().unwrap());

        let (src, labels, _) = first_batch(&a, &data);
        let rec = a.train_step(&src, &labels, None).unwrap();
        assert!(rec.adv.is_none() && rec.vlcol.is_none() && rec.proto.is_none());

        // Hand-rolled supervised step: CE + Dice only, same optimizers.
        let t_src = b.net.project_text(&b.bank_source).unwrap();
        let fwd = b.net.forward(&src, &t_src).unwrap();
        let loss = (ce_loss(&fwd.probs, &labels).unwrap()
            + dice_loss(&fwd.probs, &labels).unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        let mut sgd = SgdMomentum::new(
            cfg.sgd_lr,
            cfg.sgd_momentum,
            cfg.weight_decay,
            cfg.poly_power,
            cfg.iterations,
        );
        sgd.step(&b.gen.vars_with_prefix(&SGD_PREFIXES), &grads, 0)
            .unwrap();
        let mut adam = Adam::new(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
        adam.step(&b.gen.vars_with_prefix(&ADAM_PREFIXES), &grads)
            .unwrap();

        assert_eq!(a.gen.digest().unwrap(), b.gen.digest().unwrap());
        assert_eq!(a.disc.digest().unwrap(), b.disc.digest().unwrap());
    }

    #[test]
    fn discriminator_update_leaves_generator_unchanged() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(2);
        cfg.lambda_vlcol = 0.0;
        cfg.lambda_proto = 0.0;
        assert!(cfg.lambda_adv > 0.0);

        let src_mod = data.source_train.modality;
        let tgt_mod = data.target_train.modality;
        let mut a = Trainer::new(cfg.clone(), src_mod, tgt_mod).unwrap();
        let b = Trainer::new(cfg.clone(), src_mod, tgt_mod).unwrap();
        let disc_init = b.disc.digest().unwrap();

        let (src, labels, tgt) = first_batch(&a, &data);
        a.train_step(&src, &labels, Some(&tgt)).unwrap();

        // Hand-rolled generator-only step on the twin: everything the full
        // step does except updating the discriminators.
        let t_src = b.net.project_text(&b.bank_source).unwrap();
        let fwd = b.net.forward(&src, &t_src).unwrap();
        let (_, _, h, w) = src.dims4().unwrap();
        let t_tgt = b.net.project_text(&b.bank_target).unwrap();
        let tf = b.net.forward(&tgt, &t_tgt).unwrap();
        let main_map = self_information_map(&tf.probs).unwrap();
        let aux_up = ops::softmax(&ops::upsample_bilinear(&tf.f_aux, h, w).unwrap(), 1).unwrap();
        let aux_map = self_information_map(&aux_up).unwrap();
        let adv = g_adv_loss(
            &b.d_main.forward(&main_map).unwrap(),
            &b.d_aux.forward(&aux_map).unwrap(),
            cfg.adv_aux_weight,
        )
        .unwrap();
        let loss = ((ce_loss(&fwd.probs, &labels).unwrap()
            + dice_loss(&fwd.probs, &labels).unwrap())
        .unwrap()
            + (adv * cfg.lambda_adv).unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        let mut sgd = SgdMomentum::new(
            cfg.sgd_lr,
            cfg.sgd_momentum,
            cfg.weight_decay,
            cfg.poly_power,
            cfg.iterations,
        );
        sgd.step(&b.gen.vars_with_prefix(&SGD_PREFIXES), &grads, 0)
            .unwrap();
        let mut adam = Adam::new(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
        adam.step(&b.gen.vars_with_prefix(&ADAM_PREFIXES), &grads)
            .unwrap();

        // Generators agree although only the full step trained D, and only
        // the full step moved D away from initialization.
        assert_eq!(a.gen.digest().unwrap(), b.gen.digest().unwrap());
        assert_eq!(b.disc.digest().unwrap(), disc_init);
        assert_ne!(a.disc.digest().unwrap(), disc_init);
    }

    #[test]
    fn skipped_terms_contribute_exactly_zero() {
        // Finer feature grid so foreground classes survive the label
        // downsampling that feeds both alignment terms.
        let mut pc = PhantomConfig::default();
        pc.subjects_per_domain = 3;
        pc.slices_per_subject = 2;
        pc.size = 48;
        let (src_ds, tgt_ds) = generate_phantoms(&pc).unwrap();
        let data = TrainData::from_datasets(&src_ds, &tgt_ds, 0.67, 42).unwrap();
        let src_mod = data.source_train.modality;
        let tgt_mod = data.target_train.modality;

        // Alignment weights on, adversarial off: the first step has an empty
        // memory and empty prototype history, so both terms must skip.
        let mut cfg_on = tiny_cfg(2);
        cfg_on.output_stride = 8;
        cfg_on.lambda_adv = 0.0;
        cfg_on.lambda_vlcol = 1.0;
        cfg_on.lambda_proto = 0.1;
        let mut cfg_off = cfg_on.clone();
        cfg_off.lambda_vlcol = 0.0;
        cfg_off.lambda_proto = 0.0;

        let mut on = Trainer::new(cfg_on, src_mod, tgt_mod).unwrap();
        let mut off = Trainer::new(cfg_off, src_mod, tgt_mod).unwrap();
        let (src, labels, tgt) = first_batch(&on, &data);

        let rec_on = on.train_step(&src, &labels, Some(&tgt)).unwrap();
        let rec_off = off.train_step(&src, &labels, None).unwrap();
        assert!(rec_on.vlcol.is_none(), "first step must skip VLCoL");
        assert!(rec_on.proto.is_none(), "first step must skip prototypes");
        assert_eq!(rec_on.total.to_bits(), rec_off.total.to_bits());
        assert_eq!(on.gen.digest().unwrap(), off.gen.digest().unwrap());

        // Second step: the memory now covers the source classes, so VLCoL
        // activates. Untrained pseudo-labels need not overlap the source
        // classes, so the target prototype history is seeded by hand to
        // witness the prototype term activating too.
        let mut tgt_flags = vec![false; on.cfg().num_classes];
        tgt_flags[0] = true;
        tgt_flags[1] = true;
        let warm = Tensor::zeros(
            (on.cfg().num_classes, HIGH_CHANNELS),
            on.dtype(),
            on.device(),
        )
        .unwrap();
        on.prototypes
            .update(Domain::Target, &warm, &tgt_flags)
            .unwrap();

        let rec2 = on.train_step(&src, &labels, Some(&tgt)).unwrap();
        assert!(rec2.vlcol.is_some());
        assert!(!rec2.vlcol_classes.is_empty());
        assert!(rec2.proto.is_some());
        assert!(!rec2.proto_classes.is_empty());
    }

    #[test]
    fn non_finite_losses_abort_with_term_dump() {
        let data = tiny_data();
        let mut trainer =
            Trainer::new(tiny_cfg(2), data.source_train.modality, data.target_train.modality)
                .unwrap();
        let (src, labels, tgt) = first_batch(&trainer, &data);

        // Poison the classifier head so the loss terms go non-finite; NaN in
        // the input would be absorbed by ReLU's max semantics.
        let bias = trainer.gen.get("seg_head.conv.bias").unwrap();
        let poison = (Tensor::ones(bias.dims(), trainer.dtype(), trainer.device()).unwrap()
            * f64::NAN)
            .unwrap();
        bias.set(&poison).unwrap();

        let err = trainer
            .train_step(&src, &labels, Some(&tgt))
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)), "{msg}");
        assert!(msg.contains("seg_"), "{msg}");
        assert!(msg.contains("terms this step"), "{msg}");
    }

    #[test]
    fn missing_target_batch_is_rejected_when_needed() {
        let data = tiny_data();
        let mut trainer =
            Trainer::new(tiny_cfg(2), data.source_train.modality, data.target_train.modality)
                .unwrap();
        let (src, labels, _) = first_batch(&trainer, &data);
        assert!(trainer.train_step(&src, &labels, None).is_err());
    }

    #[test]
    fn run_logs_one_record_per_iteration_with_decaying_lr() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(3);
        cfg.lambda_vlcol = 0.0;
        cfg.lambda_proto = 0.0;
        cfg.lambda_adv = 0.0;
        let mut trainer =
            Trainer::new(cfg, data.source_train.modality, data.target_train.modality).unwrap();
        let mut seen = Vec::new();
        let out = trainer
            .run(&data, |r| {
                seen.push(r.iteration);
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(out.history.len(), 3);
        assert!(out.history[0].lr_sgd > out.history[2].lr_sgd);
        let line = serde_json::to_string(&out.history[0]).unwrap();
        let back: LossRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.iteration, 0);
    }

    #[test]
    fn checkpoint_resume_is_bitwise_identical() {
        let data = tiny_data();
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(4);
        cfg.checkpoint_every = 2;
        cfg.out_dir = tmp.path().to_str().unwrap().to_string();

        let src_mod = data.source_train.modality;
        let tgt_mod = data.target_train.modality;
        let mut full = Trainer::new(cfg.clone(), src_mod, tgt_mod).unwrap();
        full.run(&data, |_| Ok(())).unwrap();
        let (_, full_state) = full.export_checkpoint().unwrap();

        let mid = tmp.path().join("checkpoints").join("iter_000002");
        let mut resumed = Trainer::from_checkpoint(cfg.clone(), &mid).unwrap();
        assert_eq!(resumed.iteration, 2);
        resumed.run(&data, |_| Ok(())).unwrap();
        let (_, resumed_state) = resumed.export_checkpoint().unwrap();

        assert_eq!(digest_tensors(&full_state), digest_tensors(&resumed_state));
    }

    #[test]
    fn checkpoint_architecture_mismatch_is_rejected() {
        let data = tiny_data();
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(2);
        let trainer =
            Trainer::new(cfg.clone(), data.source_train.modality, data.target_train.modality)
                .unwrap();
        let dir = tmp.path().join("ck");
        trainer.save_checkpoint(&dir).unwrap();

        let mut other = cfg;
        other.num_classes = 4;
        other.class_terms.truncate(4);
        let err = match Trainer::from_checkpoint(other, &dir) {
            Err(e) => e,
            Ok(_) => panic!("mismatched class count must be rejected"),
        };
        assert!(err.to_string().contains("classes"), "{err}");
    }

    #[test]
    fn evaluation_is_deterministic_and_complete() {
        let data = tiny_data();
        let trainer = Trainer::new(
            tiny_cfg(2),
            data.source_train.modality,
            data.target_train.modality,
        )
        .unwrap();
        let r1 = trainer.evaluate(&data.target_test).unwrap();
        let r2 = trainer.evaluate(&data.target_test).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        assert_eq!(r1.subjects.len(), data.target_test.subjects.len());
        assert_eq!(r1.dice_percent.len(), data.target_test.num_classes);
        assert!(trainer.evaluate(&data.target_train).is_err());
    }

    #[test]
    fn updated_parameters_flow_into_later_forwards() {
        // Stepping the optimizer must change what the layer objects compute;
        // the layers hold clones of the same storage the store updates.
        let data = tiny_data();
        let mut cfg = tiny_cfg(2);
        cfg.lambda_adv = 0.0;
        cfg.lambda_vlcol = 0.0;
        cfg.lambda_proto = 0.0;
        let mut trainer =
            Trainer::new(cfg, data.source_train.modality, data.target_train.modality).unwrap();
        let (src, labels, _) = first_batch(&trainer, &data);

        let t = trainer.net.project_text(&trainer.bank_source).unwrap();
        let before = trainer.net.forward(&src, &t).unwrap();
        let before_ce = scalar(&ce_loss(&before.probs, &labels).unwrap()).unwrap();
        trainer.train_step(&src, &labels, None).unwrap();
        let t2 = trainer.net.project_text(&trainer.bank_source).unwrap();
        let after = trainer.net.forward(&src, &t2).unwrap();
        let after_ce = scalar(&ce_loss(&after.probs, &labels).unwrap()).unwrap();
        assert_ne!(before_ce, after_ce);
    }

    #[test]
    fn var_clones_share_storage() {
        let v = Var::from_tensor(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let alias = v.as_tensor().clone();
        v.set(&Tensor::full(2f32, 3, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(alias.to_vec1::<f32>().unwrap(), vec![2.0, 2.0, 2.0]);
    }
}
