//! Central finite-difference checks for every differentiable loss term.
//! Shared between the gradient suite and the acceptance gate.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodseg_core::adv::{d_loss_branch, g_adv_loss, self_information_map};
use xmodseg_core::error::{Error, Result};
use xmodseg_core::losses::seg_loss;
use xmodseg_core::net::{BackboneKind, PatchDiscriminator, SegNetwork, SegNetworkCfg};
use xmodseg_core::nn::{ops, ParamStore};
use xmodseg_core::proto::{batch_prototypes, proto_loss, Domain, PrototypeState};
use xmodseg_core::text::{stub_embeddings, TextProjection};
use xmodseg_core::types::{LabelBatch, Modality};
use xmodseg_core::vlcol::{class_pixel_features, vlcol_loss, ClassFeatureMemory};

const DEV: Device = Device::Cpu;

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn set_coord(var: &Var, idx: usize, value: f64) {
    let t = var.as_tensor();
    let mut flat = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    flat[idx] = value;
    var.set(&Tensor::from_vec(flat, t.shape().clone(), t.device()).unwrap())
        .unwrap();
}

/// Compares analytic gradients against central differences on at least
/// `min_coords` randomly sampled coordinates. A coordinate passes when
/// |analytic − fd| ≤ tol·max(|analytic|, |fd|) + 1e-8; the absolute floor
/// admits genuinely zero gradients without masking real mismatches.
///
/// A coordinate whose ±h window straddles a ReLU-family kink produces a
/// spurious mismatch, so failures retry at h/8 and h/64: the kink leaves
/// the window while a genuinely wrong gradient keeps failing.
pub fn check_against_fd<F>(
    name: &str,
    vars: &[(String, Var)],
    loss_fn: F,
    min_coords: usize,
    h: f64,
    tol: f64,
    seed: u64,
) where
    F: Fn() -> Result<Tensor>,
{
    let loss0 = loss_fn().unwrap();
    assert_eq!(
        loss0.dtype(),
        DType::F64,
        "{name}: checks run in double precision"
    );
    let grads = loss0.backward().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < min_coords {
        attempts += 1;
        assert!(
            attempts <= min_coords * 50,
            "{name}: could not find {min_coords} gradient-bearing coordinates"
        );
        let vi = rng.random_range(0..vars.len());
        let (vname, var) = &vars[vi];
        let n = var.as_tensor().elem_count();
        if n == 0 {
            continue;
        }
        let ei = rng.random_range(0..n);
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let analytic = g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[ei];
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[ei];

        let mut agreed = false;
        let mut worst = (0.0f64, 0.0f64);
        for step in [h, h / 8.0, h / 64.0] {
            set_coord(var, ei, base + step);
            let up = scalar(&loss_fn().unwrap());
            set_coord(var, ei, base - step);
            let down = scalar(&loss_fn().unwrap());
            set_coord(var, ei, base);

            let fd = (up - down) / (2.0 * step);
            let bound = tol * analytic.abs().max(fd.abs()) + 1e-8;
            if (analytic - fd).abs() <= bound {
                agreed = true;
                break;
            }
            worst = (fd, step);
        }
        assert!(
            agreed,
            "{name}: {vname}[{ei}]: analytic {analytic:.9e} vs finite difference {:.9e} at step {:.1e}",
            worst.0, worst.1
        );
        checked += 1;
    }
}

fn random_labels(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), classes: usize) -> LabelBatch {
    let (b, h, w) = dims;
    let values: Vec<u8> = (0..b * h * w)
        .map(|_| rng.random_range(0..classes) as u8)
        .collect();
    LabelBatch::new(values, dims, classes).unwrap()
}

/// Text projection parameters through a quadratic head.
pub fn check_projection() {
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let proj = TextProjection::new(&mut ps, 12, &mut rng).unwrap();
    let bank = Tensor::rand(-1f64, 1f64, (4, 12), &DEV).unwrap();
    check_against_fd(
        "projection",
        &ps.all_vars(),
        || {
            let t = proj.forward(&bank)?;
            Ok((t.sqr()?.sum_all()? * (1.0 / 256.0))?)
        },
        20,
        1e-5,
        1e-4,
        101,
    );
}

/// Supervised segmentation loss (CE + Dice) with respect to logits.
pub fn check_seg_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits =
        Var::from_tensor(&Tensor::rand(-2f64, 2f64, (2, 3, 6, 6), &DEV).unwrap()).unwrap();
    let labels = random_labels(&mut rng, (2, 6, 6), 3);
    check_against_fd(
        "seg_loss",
        &[("logits".to_string(), logits.clone())],
        || {
            let probs = ops::softmax(logits.as_tensor(), 1)?;
            seg_loss(&probs, &labels)
        },
        20,
        1e-6,
        1e-4,
        102,
    );
}

/// Covariance-alignment loss with respect to the semantic feature map.
pub fn check_vlcol() {
    let f_sem =
        Var::from_tensor(&Tensor::rand(-1f64, 1f64, (1, 4, 3, 3), &DEV).unwrap()).unwrap();
    let values = vec![0u8, 0, 1, 0, 1, 1, 1, 0, 1];
    let labels = LabelBatch::new(values, (1, 3, 3), 2).unwrap();
    let mut mem = ClassFeatureMemory::new(2, 4, 0.9, DType::F64).unwrap();
    let (warm, present) = class_pixel_features(&f_sem.as_tensor().detach(), &labels).unwrap();
    mem.update(&warm, &present).unwrap();
    let t_class = Tensor::rand(-1f64, 1f64, (2, 4), &DEV).unwrap();

    check_against_fd(
        "vlcol",
        &[("f_sem".to_string(), f_sem.clone())],
        || {
            let (feats, present) = class_pixel_features(f_sem.as_tensor(), &labels)?;
            let out = vlcol_loss(&mem, &feats, &present, &t_class)?;
            out.value
                .ok_or_else(|| Error::Config("vlcol unexpectedly skipped".into()))
        },
        20,
        1e-6,
        1e-4,
        103,
    );
}

/// Prototype alignment loss with respect to encoder features.
pub fn check_proto() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let f_high =
        Var::from_tensor(&Tensor::rand(-1f64, 1f64, (1, 6, 3, 3), &DEV).unwrap()).unwrap();
    let src_labels = random_labels(&mut rng, (1, 3, 3), 3);
    let tgt_feats = Tensor::rand(-1f64, 1f64, (1, 6, 3, 3), &DEV).unwrap();
    let tgt_labels = random_labels(&mut rng, (1, 3, 3), 3);

    let mut state = PrototypeState::new(3, 6, 0.01, false, DType::F64).unwrap();
    let (ws, ps_) = batch_prototypes(&f_high.as_tensor().detach(), &src_labels).unwrap();
    state.update(Domain::Source, &ws, &ps_).unwrap();
    let (wt, pt_) = batch_prototypes(&tgt_feats, &tgt_labels).unwrap();
    state.update(Domain::Target, &wt, &pt_).unwrap();

    check_against_fd(
        "proto",
        &[("f_high".to_string(), f_high.clone())],
        || {
            let (sp, spr) = batch_prototypes(f_high.as_tensor(), &src_labels)?;
            let (tp, tpr) = batch_prototypes(&tgt_feats, &tgt_labels)?;
            let out = proto_loss(&state, &sp, &spr, &tp, &tpr)?;
            out.value
                .ok_or_else(|| Error::Config("proto unexpectedly skipped".into()))
        },
        20,
        1e-6,
        1e-4,
        104,
    );
}

/// Discriminator objective with respect to discriminator parameters.
pub fn check_d_loss() {
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let disc = PatchDiscriminator::new(&mut ps, "d", 3, &mut rng).unwrap();
    let src_map = Tensor::rand(0f64, 0.4, (1, 3, 32, 32), &DEV).unwrap();
    let tgt_map = Tensor::rand(0f64, 0.4, (1, 3, 32, 32), &DEV).unwrap();
    check_against_fd(
        "d_loss",
        &ps.all_vars(),
        || d_loss_branch(&disc.forward(&src_map)?, &disc.forward(&tgt_map)?),
        20,
        1e-5,
        1e-4,
        105,
    );
}

/// Generator adversarial loss through the self-information maps, with
/// respect to the upstream logits of both branches.
pub fn check_g_adv() {
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d_main = PatchDiscriminator::new(&mut ps, "d_main", 3, &mut rng).unwrap();
    let d_aux = PatchDiscriminator::new(&mut ps, "d_aux", 3, &mut rng).unwrap();
    let main_logits =
        Var::from_tensor(&Tensor::rand(-1f64, 1f64, (1, 3, 32, 32), &DEV).unwrap()).unwrap();
    let aux_logits =
        Var::from_tensor(&Tensor::rand(-1f64, 1f64, (1, 3, 32, 32), &DEV).unwrap()).unwrap();
    check_against_fd(
        "g_adv",
        &[
            ("main_logits".to_string(), main_logits.clone()),
            ("aux_logits".to_string(), aux_logits.clone()),
        ],
        || {
            let pm = ops::softmax(main_logits.as_tensor(), 1)?;
            let pa = ops::softmax(aux_logits.as_tensor(), 1)?;
            g_adv_loss(
                &d_main.forward(&self_information_map(&pm)?)?,
                &d_aux.forward(&self_information_map(&pa)?)?,
                0.5,
            )
        },
        20,
        1e-5,
        1e-4,
        106,
    );
}

/// End-to-end main branch: encoder through dynamic convolution to the
/// segmentation loss, checked on parameters sampled across the whole model.
pub fn check_end_to_end() {
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let net = SegNetwork::new(
        &mut ps,
        SegNetworkCfg {
            backbone: BackboneKind::Tiny,
            output_stride: 16,
            num_classes: 3,
            text_dim: 16,
        },
        &mut rng,
    )
    .unwrap();
    let prompts = vec!["one".to_string(), "two".to_string(), "three".to_string()];
    let bank = stub_embeddings(Modality::Mri, &prompts, 16, 3)
        .unwrap()
        .to_tensor(DType::F64, &DEV)
        .unwrap();
    let images = Tensor::rand(-1f64, 1f64, (1, 1, 16, 16), &DEV).unwrap();
    let labels = random_labels(&mut rng, (1, 16, 16), 3);

    check_against_fd(
        "end_to_end",
        &ps.all_vars(),
        || {
            let t = net.project_text(&bank)?;
            let fwd = net.forward(&images, &t)?;
            seg_loss(&fwd.probs, &labels)
        },
        20,
        1e-5,
        1e-5,
        107,
    );
}

/// Every parameter participates in the segmentation objective once the
/// auxiliary branch is included: no dead subgraphs.
pub fn check_no_dead_params() {
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let net = SegNetwork::new(
        &mut ps,
        SegNetworkCfg {
            backbone: BackboneKind::Tiny,
            output_stride: 16,
            num_classes: 3,
            text_dim: 16,
        },
        &mut rng,
    )
    .unwrap();
    let prompts = vec!["one".to_string(), "two".to_string(), "three".to_string()];
    let bank = stub_embeddings(Modality::Ct, &prompts, 16, 4)
        .unwrap()
        .to_tensor(DType::F64, &DEV)
        .unwrap();
    let images = Tensor::rand(-1f64, 1f64, (1, 1, 16, 16), &DEV).unwrap();
    let labels = random_labels(&mut rng, (1, 16, 16), 3);

    let t = net.project_text(&bank).unwrap();
    let fwd = net.forward(&images, &t).unwrap();
    let main = seg_loss(&fwd.probs, &labels).unwrap();
    let aux_up = ops::upsample_bilinear(&fwd.f_aux, 16, 16).unwrap();
    let aux = seg_loss(&ops::softmax(&aux_up, 1).unwrap(), &labels).unwrap();
    let grads = (main + aux).unwrap().backward().unwrap();

    // Attention runs over a single global key, so its softmax is constant
    // and the query/key projections carry exactly zero gradient by
    // construction; they must still be graph-connected.
    let zero_by_design = ["fusion.mha.wq.", "fusion.mha.wk."];

    let mut bad = Vec::new();
    for (name, var) in ps.all_vars() {
        let expected_zero = zero_by_design.iter().any(|p| name.starts_with(p));
        match grads.get(var.as_tensor()) {
            None => bad.push(format!("{name} (disconnected)")),
            Some(g) => {
                let any_nonzero = g
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f64>()
                    .unwrap()
                    .iter()
                    .any(|&v| v != 0.0);
                if any_nonzero && expected_zero {
                    bad.push(format!("{name} (single-key score path must be constant)"));
                }
                if !any_nonzero && !expected_zero {
                    bad.push(format!("{name} (all-zero)"));
                }
            }
        }
    }
    assert!(bad.is_empty(), "gradient connectivity violations: {bad:?}");
}

/// Runs the whole suite; the acceptance gate wraps this in a timer.
pub fn run_all() {
    check_projection();
    check_seg_loss();
    check_vlcol();
    check_proto();
    check_d_loss();
    check_g_adv();
    check_end_to_end();
    check_no_dead_params();
}
