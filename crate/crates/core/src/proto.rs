//! Class prototypes: per-domain EMA of high-level pixel embeddings, pseudo
//! labels for the target domain, and the squared-distance alignment loss.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ops::argmax_channels;
use crate::types::LabelBatch;
use crate::vlcol::class_pixel_features;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn idx(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Per-pixel argmax of normalized probabilities; ties take the lowest index.
pub fn pseudo_labels(probs: &Tensor) -> Result<LabelBatch> {
    let (b, c, h, w) = probs.dims4()?;
    let values = argmax_channels(probs)?;
    LabelBatch::new(values, (b, h, w), c)
}

/// Mean high-level embedding per class present in the batch; identical
/// masked-mean computation as the semantic-feature pooling, at 2048 channels.
pub fn batch_prototypes(f_high: &Tensor, labels: &LabelBatch) -> Result<(Tensor, Vec<bool>)> {
    class_pixel_features(f_high, labels)
}

/// Per-domain, per-class EMA prototypes with explicit initialization flags.
pub struct PrototypeState {
    rows: [Vec<Tensor>; 2],
    flags: [Vec<bool>; 2],
    momentum: f64,
    swap_momentum: bool,
    dim: usize,
    dtype: DType,
}

impl PrototypeState {
    pub fn new(
        num_classes: usize,
        dim: usize,
        momentum: f64,
        swap_momentum: bool,
        dtype: DType,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "prototype momentum {momentum} outside [0,1]"
            )));
        }
        let mk = || -> Result<Vec<Tensor>> {
            (0..num_classes)
                .map(|_| Tensor::zeros(dim, dtype, &Device::Cpu).map_err(Into::into))
                .collect()
        };
        Ok(Self {
            rows: [mk()?, mk()?],
            flags: [vec![false; num_classes], vec![false; num_classes]],
            momentum,
            swap_momentum,
            dim,
            dtype,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rows[0].len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Weight on the stored prototype in the convex update.
    fn old_weight(&self) -> f64 {
        if self.swap_momentum {
            1.0 - self.momentum
        } else {
            self.momentum
        }
    }

    pub fn flags(&self, domain: Domain) -> &[bool] {
        &self.flags[domain.idx()]
    }

    pub fn row(&self, domain: Domain, cls: usize) -> &Tensor {
        &self.rows[domain.idx()][cls]
    }

    /// EMA update; first observation of a class adopts the batch prototype.
    /// Stored values are detached.
    pub fn update(&mut self, domain: Domain, protos: &Tensor, present: &[bool]) -> Result<()> {
        let (c, d) = protos.dims2()?;
        if c != self.num_classes() || d != self.dim {
            return Err(Error::Shape(format!(
                "prototype update {c}×{d}, expected {}×{}",
                self.num_classes(),
                self.dim
            )));
        }
        let w_old = self.old_weight();
        let di = domain.idx();
        for (cls, &here) in present.iter().enumerate() {
            if !here {
                continue;
            }
            let fresh = protos.narrow(0, cls, 1)?.reshape(d)?.detach();
            self.rows[di][cls] = if self.flags[di][cls] {
                ((&self.rows[di][cls] * w_old)? + (fresh * (1.0 - w_old))?)?.detach()
            } else {
                fresh
            };
            self.flags[di][cls] = true;
        }
        Ok(())
    }

    /// Loss-side prototype: stored history detached; when the class is in the
    /// current batch its contribution enters gradient-attached with the same
    /// convex weights as the update.
    fn effective(
        &self,
        domain: Domain,
        cls: usize,
        protos_current: &Tensor,
        present: &[bool],
    ) -> Result<Tensor> {
        let di = domain.idx();
        let stored = self.rows[di][cls].detach();
        if present[cls] {
            let cur = protos_current.narrow(0, cls, 1)?.reshape(self.dim)?;
            let w_old = self.old_weight();
            Ok(((stored * w_old)? + (cur * (1.0 - w_old))?)?)
        } else {
            Ok(stored)
        }
    }

    pub fn export(&self) -> Result<(Tensor, Tensor, Vec<bool>, Vec<bool>)> {
        Ok((
            Tensor::stack(&self.rows[0], 0)?,
            Tensor::stack(&self.rows[1], 0)?,
            self.flags[0].clone(),
            self.flags[1].clone(),
        ))
    }

    pub fn load(
        &mut self,
        z_src: &Tensor,
        z_tgt: &Tensor,
        flags_src: &[bool],
        flags_tgt: &[bool],
    ) -> Result<()> {
        for (di, (rows, flags)) in [(z_src, flags_src), (z_tgt, flags_tgt)].iter().enumerate() {
            let (c, d) = rows.dims2()?;
            if c != self.num_classes() || d != self.dim || flags.len() != c {
                return Err(Error::Checkpoint(format!(
                    "prototype state {c}×{d} does not match {}×{}",
                    self.num_classes(),
                    self.dim
                )));
            }
            for cls in 0..c {
                self.rows[di][cls] =
                    rows.narrow(0, cls, 1)?.reshape(d)?.to_dtype(self.dtype)?.detach();
            }
            self.flags[di] = flags.to_vec();
        }
        Ok(())
    }
}

/// Outcome of one prototype-alignment evaluation.
pub struct ProtoOutcome {
    pub value: Option<Tensor>,
    pub common_classes: Vec<usize>,
}

impl ProtoOutcome {
    pub fn skipped(&self) -> bool {
        self.value.is_none()
    }
}

/// Σ_c ‖z_c^src − z_c^tgt‖² over classes initialized in both domains.
/// Current-batch prototypes enter gradient-attached; history is constant.
pub fn proto_loss(
    state: &PrototypeState,
    src_protos: &Tensor,
    src_present: &[bool],
    tgt_protos: &Tensor,
    tgt_present: &[bool],
) -> Result<ProtoOutcome> {
    let c = state.num_classes();
    if src_present.len() != c || tgt_present.len() != c {
        return Err(Error::Shape(format!(
            "presence lengths {} / {} vs {c} classes",
            src_present.len(),
            tgt_present.len()
        )));
    }
    let common: Vec<usize> = (0..c)
        .filter(|&cls| state.flags(Domain::Source)[cls] && state.flags(Domain::Target)[cls])
        .collect();
    if common.is_empty() {
        return Ok(ProtoOutcome {
            value: None,
            common_classes: common,
        });
    }
    let mut total: Option<Tensor> = None;
    for &cls in &common {
        let zs = state.effective(Domain::Source, cls, src_protos, src_present)?;
        let zt = state.effective(Domain::Target, cls, tgt_protos, tgt_present)?;
        let term = (zs - zt)?.sqr()?.sum_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(ProtoOutcome {
        value: total,
        common_classes: common,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEV: &Device = &Device::Cpu;

    #[test]
    fn pseudo_labels_pick_argmax_with_low_ties() {
        let mut raw = vec![0.0f64; 4 * 4];
        // pixel 0: class 3 wins; pixel 1: tie between 1 and 2 → 1
        raw[3 * 4] = 0.9;
        raw[4 + 1] = 0.4;
        raw[2 * 4 + 1] = 0.4;
        raw[2] = 1.0;
        raw[3] = 1.0;
        let probs = Tensor::from_vec(raw, (1, 4, 2, 2), DEV).unwrap();
        let lab = pseudo_labels(&probs).unwrap();
        assert_eq!(lab.values()[0], 3);
        assert_eq!(lab.values()[1], 1);
        assert_eq!(lab.values()[2], 0);
        assert_eq!(lab.values()[3], 0);
    }

    #[test]
    fn pseudo_labels_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..3 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs = softmax(&Tensor::from_vec(raw, (1, 3, 4, 4), DEV).unwrap(), 1).unwrap();
        let lab = pseudo_labels(&probs).unwrap();
        let flat = probs.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for p in 0..16 {
            let mut best = 0usize;
            for c in 1..3 {
                if flat[c * 16 + p] > flat[best * 16 + p] {
                    best = c;
                }
            }
            assert_eq!(lab.values()[p] as usize, best);
        }
    }

    #[test]
    fn batch_prototypes_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..6 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f_high = Tensor::from_vec(raw.clone(), (1, 6, 3, 3), DEV).unwrap();
        let lab: Vec<u8> = vec![0, 1, 1, 0, 2, 2, 0, 1, 2];
        let labels = LabelBatch::new(lab.clone(), (1, 3, 3), 4).unwrap();
        let (protos, present) = batch_prototypes(&f_high, &labels).unwrap();
        assert_eq!(present, vec![true, true, true, false]);
        let rows = protos.to_vec2::<f64>().unwrap();
        for c in 0..3 {
            let pix: Vec<usize> = (0..9).filter(|&p| lab[p] as usize == c).collect();
            for ch in 0..6 {
                let want: f64 =
                    pix.iter().map(|&p| raw[ch * 9 + p]).sum::<f64>() / pix.len() as f64;
                assert!((rows[c][ch] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ema_boundaries_and_paper_default() {
        let mut st = PrototypeState::new(1, 3, 1.0, false, DType::F64).unwrap();
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], (1, 3), DEV).unwrap();
        let b = Tensor::from_vec(vec![7.0f64, 7.0, 7.0], (1, 3), DEV).unwrap();
        st.update(Domain::Source, &a, &[true]).unwrap();
        st.update(Domain::Source, &b, &[true]).unwrap();
        assert_eq!(
            st.row(Domain::Source, 0).to_vec1::<f64>().unwrap(),
            vec![1.0, 2.0, 3.0]
        );

        let mut st0 = PrototypeState::new(1, 3, 0.0, false, DType::F64).unwrap();
        st0.update(Domain::Target, &a, &[true]).unwrap();
        st0.update(Domain::Target, &b, &[true]).unwrap();
        assert_eq!(
            st0.row(Domain::Target, 0).to_vec1::<f64>().unwrap(),
            vec![7.0, 7.0, 7.0]
        );

        // β=0.01 on a 2-vector with a zero batch prototype → 0.02
        let mut stp = PrototypeState::new(1, 2, 0.01, false, DType::F64).unwrap();
        stp.update(Domain::Source, &Tensor::from_vec(vec![2.0f64, 2.0], (1, 2), DEV).unwrap(), &[true])
            .unwrap();
        stp.update(Domain::Source, &Tensor::zeros((1, 2), DType::F64, DEV).unwrap(), &[true])
            .unwrap();
        let row = stp.row(Domain::Source, 0).to_vec1::<f64>().unwrap();
        assert!(row.iter().all(|v| (v - 0.02).abs() < 1e-12));
    }

    #[test]
    fn swap_momentum_flips_convention() {
        let mut st = PrototypeState::new(1, 2, 0.01, true, DType::F64).unwrap();
        st.update(Domain::Source, &Tensor::from_vec(vec![2.0f64, 2.0], (1, 2), DEV).unwrap(), &[true])
            .unwrap();
        st.update(Domain::Source, &Tensor::zeros((1, 2), DType::F64, DEV).unwrap(), &[true])
            .unwrap();
        // old weight becomes 0.99: 0.99·2 + 0.01·0 = 1.98
        let row = st.row(Domain::Source, 0).to_vec1::<f64>().unwrap();
        assert!(row.iter().all(|v| (v - 1.98).abs() < 1e-12));
    }

    #[test]
    fn momentum_out_of_range_rejected() {
        assert!(PrototypeState::new(1, 2, 1.2, false, DType::F64).is_err());
    }

    #[test]
    fn loss_skips_without_common_classes() {
        let mut st = PrototypeState::new(2, 3, 0.5, false, DType::F64).unwrap();
        let p = Tensor::zeros((2, 3), DType::F64, DEV).unwrap();
        st.update(Domain::Source, &p, &[true, false]).unwrap();
        st.update(Domain::Target, &p, &[false, true]).unwrap();
        let out = proto_loss(&st, &p, &[false, false], &p, &[false, false]).unwrap();
        assert!(out.skipped());
    }

    #[test]
    fn loss_hand_oracle_and_zero_case() {
        let mut st = PrototypeState::new(1, 2, 0.5, false, DType::F64).unwrap();
        let zs = Tensor::zeros((1, 2), DType::F64, DEV).unwrap();
        let zt = Tensor::ones((1, 2), DType::F64, DEV).unwrap();
        st.update(Domain::Source, &zs, &[true]).unwrap();
        st.update(Domain::Target, &zt, &[true]).unwrap();
        // absent from the current batch → stored values are compared directly
        let out = proto_loss(&st, &zs, &[false], &zt, &[false]).unwrap();
        let v = out.value.unwrap().to_scalar::<f64>().unwrap();
        assert!((v - 2.0).abs() < 1e-12, "got {v}");
        assert_eq!(out.common_classes, vec![0]);

        let mut same = PrototypeState::new(1, 2, 0.5, false, DType::F64).unwrap();
        same.update(Domain::Source, &zt, &[true]).unwrap();
        same.update(Domain::Target, &zt, &[true]).unwrap();
        let out = proto_loss(&same, &zt, &[false], &zt, &[false]).unwrap();
        assert!(out.value.unwrap().to_scalar::<f64>().unwrap().abs() < 1e-12);
    }

    #[test]
    fn loss_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut st = PrototypeState::new(3, 4, 0.3, false, DType::F64).unwrap();
            let r = |rng: &mut ChaCha8Rng| -> Tensor {
                let v: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
                Tensor::from_vec(v, (3, 4), DEV).unwrap()
            };
            st.update(Domain::Source, &r(&mut rng), &[true, true, false]).unwrap();
            st.update(Domain::Target, &r(&mut rng), &[true, false, true]).unwrap();
            let out = proto_loss(
                &st,
                &r(&mut rng),
                &[true, true, true],
                &r(&mut rng),
                &[true, true, true],
            )
            .unwrap();
            let v = out.value.unwrap().to_scalar::<f64>().unwrap();
            assert!(v >= 0.0);
            assert_eq!(out.common_classes, vec![0]);
        }
    }
}
