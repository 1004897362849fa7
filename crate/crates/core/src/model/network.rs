use rand::Rng;

use super::layers::{Block, Init, Linear, Norm};
use super::{masked_mse, patchify, unpatchify, DenoMAEConfig, MaskPlan, Modality, ModelError};
use crate::numerics::{ParamId, ParamStore, Real, SeedKey, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct Embedder {
    patch: Linear,
    pos: ParamId,
    modality: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Vec<Embedder>,
    encoder: Vec<Block>,
    enc_norm: Norm,
    shared: Vec<(Linear, Norm)>,
    mask_token: ParamId,
    decoder: Vec<Block>,
    out_proj: Vec<Linear>,
    head_fc1: Linear,
    head_fc2: Linear,
}

/// Outputs of one pretraining forward pass.
#[derive(Clone, Debug)]
pub struct PretrainForward {
    pub total: Var,
    pub per_modality: Vec<Var>,
    /// Reconstructed patch matrices `[N, patch_dim]`, one per modality.
    pub recon: Vec<Var>,
}

/// Per-modality masking ratio for inference: 0 shows every patch, 1 hides
/// the modality completely.
#[derive(Clone, Debug, PartialEq)]
pub struct Visibility {
    pub mask_ratios: Vec<f64>,
}

impl Visibility {
    pub fn new(mask_ratios: Vec<f64>) -> Self {
        Visibility { mask_ratios }
    }

    /// Observed modalities masked at `observed_ratio`; everything else hidden.
    pub fn denoising(config: &DenoMAEConfig, observed_ratio: f64) -> Self {
        Visibility {
            mask_ratios: config
                .modalities
                .iter()
                .map(|m| if m.is_observed() { observed_ratio } else { 1.0 })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoised {
    /// Full decoder output as `[C, H, W]` images, one per modality.
    pub images: Vec<Tensor>,
    pub plans: Vec<MaskPlan>,
}

/// Which optimizer-visible part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Debug)]
pub struct DenoMAE {
    pub config: DenoMAEConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl DenoMAE {
    pub fn new(config: DenoMAEConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: SeedKey::new(seed).named("init").rng(),
        };
        let (d, n, pd) = (config.d_model, config.num_patches(), config.patch_dim());
        let embed = config
            .modalities
            .iter()
            .map(|m| Embedder {
                patch: Linear::new(&mut init, &format!("embed.{m}.patch"), pd, d, false),
                pos: init.normal(format!("embed.{m}.pos"), &[n, d]),
                modality: init.normal(format!("embed.{m}.modality"), &[1, d]),
            })
            .collect();
        let encoder = (0..config.encoder_layers)
            .map(|i| Block::new(&mut init, &format!("enc.{i}"), d, config.heads, config.mlp_ratio))
            .collect();
        let enc_norm = Norm::new(&mut init, "enc.norm", d);
        let shared = config
            .modalities
            .iter()
            .map(|m| {
                (
                    Linear::new(&mut init, &format!("shared.{m}.proj"), d, d, true),
                    Norm::new(&mut init, &format!("shared.{m}.norm"), d),
                )
            })
            .collect();
        let mask_token = init.normal("dec.mask_token".into(), &[1, d]);
        let decoder = (0..config.decoder_layers)
            .map(|i| Block::new(&mut init, &format!("dec.{i}"), d, config.heads, config.mlp_ratio))
            .collect();
        let out_proj = config
            .modalities
            .iter()
            .map(|m| Linear::new(&mut init, &format!("out.{m}"), d, pd, true))
            .collect();
        let c = &config.classifier;
        let head_fc1 = Linear::new(&mut init, "head.fc1", d, c.hidden, true);
        let head_fc2 = Linear::new(&mut init, "head.fc2", c.hidden, c.classes, true);
        let layout = Layout {
            embed,
            encoder,
            enc_norm,
            shared,
            mask_token,
            decoder,
            out_proj,
            head_fc1,
            head_fc2,
        };
        Ok(DenoMAE { config, params, layout })
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("embed.") || name.starts_with("enc.") {
            ParamGroup::Encoder
        } else if name.starts_with("head.") {
            ParamGroup::Head
        } else {
            ParamGroup::Decoder
        }
    }

    /// Marks every parameter outside `groups` as frozen.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for p in self.params.iter_mut() {
            p.frozen = !groups.contains(&Self::group_of(&p.name));
        }
    }

    /// Parameters of the shared encoder blocks and final encoder norm.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.get(id).name.starts_with("enc."))
            .collect()
    }

    fn check_slot(&self, slot: usize) -> Result<(), ModelError> {
        let count = self.config.n_modalities();
        if slot >= count {
            return Err(ModelError::ModalitySlot { slot, count });
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<(), ModelError> {
        let expected = self.config.image_shape();
        if image.shape() != expected {
            return Err(ModelError::ImageShape {
                expected: expected.to_vec(),
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Image to patch matrix `[N, patch_dim]`.
    pub fn patches<T: Real>(&self, image: &Tensor) -> Result<Tensor<T>, ModelError> {
        self.check_image(image)?;
        patchify(&image.cast::<T>(), self.config.patch_size)
    }

    /// Patch projection plus positional and modality embeddings: `[N, D]`.
    pub fn embed_modality<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, patches: Var, slot: usize) -> Result<Var, ModelError> {
        self.check_slot(slot)?;
        let e = &self.layout.embed[slot];
        let x = e.patch.forward(tape, store, patches)?;
        let pos = tape.param(store, e.pos);
        let x = tape.add(x, pos)?;
        let m = tape.param(store, e.modality);
        Ok(tape.add_row(x, m)?)
    }

    /// Shared encoder over a token sequence, followed by its final norm.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, tokens: Var) -> Result<Var, ModelError> {
        let mut x = tokens;
        for b in &self.layout.encoder {
            x = b.forward(tape, store, x)?;
        }
        self.layout.enc_norm.forward(tape, store, x)
    }

    /// Encodes only the `visible` rows of an embedded modality.
    pub fn encode_modality<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        embedded: Var,
        visible: &[usize],
    ) -> Result<Var, ModelError> {
        if visible.is_empty() {
            return Err(ModelError::Mask("encoder needs at least one visible patch".into()));
        }
        let x = tape.gather_rows(embedded, visible)?;
        self.encode(tape, store, x)
    }

    /// `LN(H W_m + b_m)` for modality `slot`.
    pub fn project_to_shared<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, slot: usize, encoded: Var) -> Result<Var, ModelError> {
        self.check_slot(slot)?;
        let (lin, norm) = &self.layout.shared[slot];
        let z = lin.forward(tape, store, encoded)?;
        norm.forward(tape, store, z)
    }

    /// Decoder input sequence `[n * N, D]`: per modality, projected visible
    /// tokens and mask tokens (plus positional and modality embeddings) put
    /// back in patch order.
    pub fn decoder_input<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        shared: &[Option<Var>],
        plans: &[MaskPlan],
    ) -> Result<Var, ModelError> {
        let n_mod = self.config.n_modalities();
        let n = self.config.num_patches();
        for len in [shared.len(), plans.len()] {
            if len != n_mod {
                return Err(ModelError::InputCount { expected: n_mod, got: len });
            }
        }
        let mut blocks = Vec::with_capacity(n_mod);
        for (slot, (z, plan)) in shared.iter().zip(plans).enumerate() {
            if plan.len() != n {
                return Err(ModelError::Mask(format!("plan covers {} of {n} patches", plan.len())));
            }
            let mut parts = Vec::with_capacity(2);
            match (z, plan.visible.is_empty()) {
                (Some(z), false) if tape.shape(*z)[0] == plan.visible.len() => parts.push(*z),
                (None, true) => {}
                _ => return Err(ModelError::Mask(format!("shared tokens do not match the plan of modality {slot}"))),
            }
            if !plan.masked.is_empty() {
                let e = &self.layout.embed[slot];
                let pos = tape.param(store, e.pos);
                let pos = tape.gather_rows(pos, &plan.masked)?;
                let tok = tape.param(store, self.layout.mask_token);
                let x = tape.add_row(pos, tok)?;
                let m = tape.param(store, e.modality);
                parts.push(tape.add_row(x, m)?);
            }
            let joined = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
            let mut order = vec![0usize; n];
            for (k, &i) in plan.visible.iter().chain(&plan.masked).enumerate() {
                order[i] = k;
            }
            blocks.push(tape.gather_rows(joined, &order)?);
        }
        Ok(if blocks.len() == 1 { blocks[0] } else { tape.concat(&blocks, 0)? })
    }

    /// Decoder blocks over the joint sequence, then per-modality output
    /// projections: one `[N, patch_dim]` matrix per modality.
    pub fn decode_sequence<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, seq: Var) -> Result<Vec<Var>, ModelError> {
        let n = self.config.num_patches();
        let expected = n * self.config.n_modalities();
        if tape.shape(seq)[0] != expected {
            return Err(ModelError::InputCount {
                expected,
                got: tape.shape(seq)[0],
            });
        }
        let mut x = seq;
        for b in &self.layout.decoder {
            x = b.forward(tape, store, x)?;
        }
        let mut out = Vec::with_capacity(self.config.n_modalities());
        for (slot, proj) in self.layout.out_proj.iter().enumerate() {
            let rows: Vec<usize> = (slot * n..(slot + 1) * n).collect();
            let part = if self.config.n_modalities() == 1 {
                x
            } else {
                tape.gather_rows(x, &rows)?
            };
            out.push(proj.forward(tape, store, part)?);
        }
        Ok(out)
    }

    pub fn decode_all<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        shared: &[Option<Var>],
        plans: &[MaskPlan],
    ) -> Result<Vec<Var>, ModelError> {
        let seq = self.decoder_input(tape, store, shared, plans)?;
        self.decode_sequence(tape, store, seq)
    }

    /// Embed, encode visible patches, project and decode every modality.
    /// Images for fully masked modalities may be absent.
    pub fn reconstruct<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        images: &[Option<&Tensor>],
        plans: &[MaskPlan],
    ) -> Result<Vec<Var>, ModelError> {
        let n_mod = self.config.n_modalities();
        for len in [images.len(), plans.len()] {
            if len != n_mod {
                return Err(ModelError::InputCount { expected: n_mod, got: len });
            }
        }
        if plans.iter().all(|p| p.visible.is_empty()) {
            return Err(ModelError::NothingVisible);
        }
        let mut shared = Vec::with_capacity(n_mod);
        for (slot, (img, plan)) in images.iter().zip(plans).enumerate() {
            if plan.visible.is_empty() {
                shared.push(None);
                continue;
            }
            let img = img.ok_or_else(|| ModelError::Mask(format!("modality {slot} has visible patches but no image")))?;
            let p = tape.constant(self.patches::<T>(img)?);
            let e = self.embed_modality(tape, store, p, slot)?;
            let h = self.encode_modality(tape, store, e, &plan.visible)?;
            shared.push(Some(self.project_to_shared(tape, store, slot, h)?));
        }
        self.decode_all(tape, store, &shared, plans)
    }

    /// Weighted masked-patch reconstruction loss for one sample.
    pub fn pretrain_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        images: &[Tensor],
        plans: &[MaskPlan],
    ) -> Result<PretrainForward, ModelError> {
        let refs: Vec<Option<&Tensor>> = images.iter().map(Some).collect();
        let recon = self.reconstruct(tape, store, &refs, plans)?;
        let mut per_modality = Vec::with_capacity(recon.len());
        let mut total: Option<Var> = None;
        for (slot, (&r, img)) in recon.iter().zip(images).enumerate() {
            let target = self.patches::<T>(img)?;
            let l = masked_mse(tape, r, &target, &plans[slot].masked)?;
            per_modality.push(l);
            let w = tape.scale(l, self.config.modality_weights[slot])?;
            total = Some(match total {
                Some(t) => tape.add(t, w)?,
                None => w,
            });
        }
        Ok(PretrainForward {
            total: total.expect("at least one modality"),
            per_modality,
            recon,
        })
    }

    /// Mask plans for one pretraining sample.
    pub fn pretrain_plans(&self, seed: u64) -> Result<Vec<MaskPlan>, ModelError> {
        let n = self.config.num_patches();
        let key = SeedKey::new(seed);
        (0..self.config.n_modalities())
            .map(|slot| {
                let s = if self.config.shared_mask {
                    key.value()
                } else {
                    key.child(slot as u64).value()
                };
                super::sample_mask(n, self.config.mask_ratio, s)
            })
            .collect()
    }

    /// Encoder over every patch of one image, then global average pooling:
    /// `[1, D]`.
    pub fn pooled_features<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore, image: &Tensor) -> Result<Var, ModelError> {
        let slot = self.config.classify_slot();
        let p = tape.constant(self.patches::<T>(image)?);
        let e = self.embed_modality(tape, store, p, slot)?;
        let h = self.encode(tape, store, e)?;
        Ok(tape.mean_axis(h, 0)?)
    }

    /// Classification logits `[1, classes]`. `dropout_rng == None` is
    /// evaluation mode.
    pub fn classify_logits<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        image: &Tensor,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var, ModelError> {
        let g = self.pooled_features(tape, store, image)?;
        self.head(tape, store, g, dropout_rng)
    }

    pub fn head<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        pooled: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var, ModelError> {
        let h = self.layout.head_fc1.forward(tape, store, pooled)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.config.classifier.dropout, dropout_rng)?;
        self.layout.head_fc2.forward(tape, store, h)
    }

    pub fn classification_loss<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        image: &Tensor,
        label: usize,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var, ModelError> {
        let classes = self.config.classifier.classes;
        if label >= classes {
            return Err(ModelError::Label { label, classes });
        }
        let logits = self.classify_logits(tape, store, image, dropout_rng)?;
        Ok(tape.cross_entropy(logits, label)?)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::<f32>::new();
        let l = self.classify_logits(&mut tape, &self.params, image, None::<&mut rand_chacha::ChaCha8Rng>)?;
        Ok(tape.value(l).data().to_vec())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize, ModelError> {
        let l = self.logits(image)?;
        Ok((0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best }))
    }

    /// Runs the autoencoder with per-modality visibility and returns every
    /// reconstruction as an image. Deterministic in `seed` and the weights.
    pub fn denoise(&self, inputs: &[Option<&Tensor>], visibility: &Visibility, seed: u64) -> Result<Denoised, ModelError> {
        let n_mod = self.config.n_modalities();
        if visibility.mask_ratios.len() != n_mod {
            return Err(ModelError::InputCount {
                expected: n_mod,
                got: visibility.mask_ratios.len(),
            });
        }
        let n = self.config.num_patches();
        let key = SeedKey::new(seed);
        let plans = visibility
            .mask_ratios
            .iter()
            .enumerate()
            .map(|(slot, &r)| MaskPlan::with_ratio(n, r, key.child(slot as u64).value()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tape = Tape::<f32>::new();
        let recon = self.reconstruct(&mut tape, &self.params, inputs, &plans)?;
        let [c, side, _] = self.config.image_shape();
        let images = recon
            .iter()
            .map(|&r| unpatchify(tape.value(r), c, side, self.config.patch_size))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Denoised { images, plans })
    }

    /// Index of `m` in this model's modality list.
    pub fn slot(&self, m: Modality) -> Option<usize> {
        self.config.slot(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, GradCheckOptions};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoMAEConfig {
        DenoMAEConfig {
            image_side: 8,
            patch_size: 4,
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            mask_ratio: 0.5,
            classifier: super::super::ClassifierConfig {
                hidden: 6,
                dropout: 0.5,
                classes: 3,
            },
            ..DenoMAEConfig::desk()
        }
    }

    fn image(cfg: &DenoMAEConfig, seed: u64) -> Tensor {
        let mut rng = SeedKey::new(seed).rng();
        Tensor::from_fn(&cfg.image_shape(), |_| rng.random::<f32>())
    }

    fn images(cfg: &DenoMAEConfig, seed: u64) -> Vec<Tensor> {
        (0..cfg.n_modalities()).map(|k| image(cfg, seed * 31 + k as u64)).collect()
    }

    #[test]
    fn embedding_of_zero_patches_is_zero() {
        let cfg = DenoMAEConfig::desk();
        let mut m = DenoMAE::new(cfg.clone(), 1).unwrap();
        for p in m.params.iter_mut() {
            if p.name.ends_with(".pos") || p.name.ends_with(".modality") {
                p.value.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros(&[16, 192]));
        let e = m.embed_modality(&mut tape, &m.params, z, 2).unwrap();
        assert_eq!(tape.shape(e), &[16, 64]);
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
        assert!(m.embed_modality(&mut tape, &m.params, z, 5).is_err());
    }

    #[test]
    fn modality_embeddings_differ_by_their_difference() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let img = image(&m.config, 3);
        let p = tape.constant(m.patches::<f64>(&img).unwrap());
        let a = m.embed_modality(&mut tape, &m.params, p, 0).unwrap();
        let b = m.embed_modality(&mut tape, &m.params, p, 1).unwrap();
        // identical patch projections are needed for the identity to hold
        let mut m2 = m.clone();
        let w0 = m2.params.find("embed.noisy_const.patch.w").unwrap();
        let w1 = m2.params.find("embed.clean_const.patch.w").unwrap();
        let p0 = m2.params.find("embed.noisy_const.pos").unwrap();
        let p1 = m2.params.find("embed.clean_const.pos").unwrap();
        m2.params.get_mut(w1).value = m2.params.value(w0).clone();
        m2.params.get_mut(p1).value = m2.params.value(p0).clone();
        let mut t2 = Tape::<f64>::new();
        let p = t2.constant(m2.patches::<f64>(&img).unwrap());
        let a2 = m2.embed_modality(&mut t2, &m2.params, p, 0).unwrap();
        let b2 = m2.embed_modality(&mut t2, &m2.params, p, 1).unwrap();
        let me0 = m2.params.value(m2.params.find("embed.noisy_const.modality").unwrap());
        let me1 = m2.params.value(m2.params.find("embed.clean_const.modality").unwrap());
        let (ta, tb) = (t2.value(a2), t2.value(b2));
        for r in 0..16 {
            for c in 0..64 {
                let lhs = tb.row(r)[c] - ta.row(r)[c];
                let rhs = f64::from(me1.data()[c]) - f64::from(me0.data()[c]);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn token_counts_through_the_pipeline() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 5).unwrap();
        let imgs = images(&m.config, 1);
        let plans = m.pretrain_plans(9).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut z = Vec::new();
        for (slot, img) in imgs.iter().enumerate() {
            let p = tape.constant(m.patches::<f32>(img).unwrap());
            let e = m.embed_modality(&mut tape, &m.params, p, slot).unwrap();
            let h = m.encode_modality(&mut tape, &m.params, e, &plans[slot].visible).unwrap();
            assert_eq!(tape.shape(h), &[4, 64]);
            z.push(m.project_to_shared(&mut tape, &m.params, slot, h).unwrap());
        }
        let joint = tape.concat(&z, 0).unwrap();
        assert_eq!(tape.shape(joint), &[20, 64]);
        let zs: Vec<Option<Var>> = z.into_iter().map(Some).collect();
        let seq = m.decoder_input(&mut tape, &m.params, &zs, &plans).unwrap();
        assert_eq!(tape.shape(seq), &[80, 64]);
        let out = m.decode_sequence(&mut tape, &m.params, seq).unwrap();
        assert_eq!(out.len(), 5);
        for o in out {
            let img = unpatchify(tape.value(o), 3, 32, 8).unwrap();
            assert_eq!(img.shape(), &[3, 32, 32]);
        }
        let e = tape.constant(Tensor::zeros(&[16, 64]));
        assert!(m.encode_modality(&mut tape, &m.params, e, &[]).is_err());
    }

    #[test]
    fn identity_projection_reduces_to_norm() {
        let mut m = DenoMAE::new(DenoMAEConfig::desk(), 6).unwrap();
        let w = m.params.find("shared.noise.proj.w").unwrap();
        m.params.get_mut(w).value = Tensor::from_fn(&[64, 64], |i| if i / 64 == i % 64 { 1.0 } else { 0.0 });
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn(&[4, 64], |i| (i as f64 * 0.37).sin()));
        let z = m.project_to_shared(&mut tape, &m.params, 4, h).unwrap();
        let ln = tape.layer_norm(h, 1e-6).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(tape.value(ln).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_weights_are_shared_across_modalities() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 7).unwrap();
        let imgs = images(&m.config, 2);
        let plans = m.pretrain_plans(1).unwrap();
        let mut first: Option<Vec<ParamId>> = None;
        for (slot, img) in imgs.iter().enumerate() {
            let mut tape = Tape::<f32>::new();
            let p = tape.constant(m.patches::<f32>(img).unwrap());
            let e = m.embed_modality(&mut tape, &m.params, p, slot).unwrap();
            m.encode_modality(&mut tape, &m.params, e, &plans[slot].visible).unwrap();
            let enc: Vec<ParamId> = tape
                .bound_params()
                .into_iter()
                .filter(|id| m.params.get(*id).name.starts_with("enc."))
                .collect();
            match &first {
                None => first = Some(enc),
                Some(f) => assert_eq!(f, &enc),
            }
        }
        assert_eq!(first.unwrap(), m.encoder_param_ids());
        // a joint pass binds each encoder tensor once
        let mut tape = Tape::<f32>::new();
        m.pretrain_forward(&mut tape, &m.params, &imgs, &plans).unwrap();
        let bound = tape.bound_params();
        let mut dedup = bound.clone();
        dedup.dedup();
        assert_eq!(bound, dedup);
    }

    #[test]
    fn projection_only_decoder_is_affine() {
        let mut cfg = DenoMAEConfig::desk();
        cfg.decoder_layers = 0;
        let m = DenoMAE::new(cfg, 8).unwrap();
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let s = tape.constant(x.clone());
            let out = m.decode_sequence(&mut tape, &m.params, s).unwrap();
            out.iter().flat_map(|&o| tape.value(o).data().to_vec()).collect::<Vec<f64>>()
        };
        let a = Tensor::<f64>::from_fn(&[80, 64], |i| (i as f64 * 0.11).sin());
        let b = Tensor::<f64>::from_fn(&[80, 64], |i| (i as f64 * 0.07).cos());
        let ab = Tensor::new(vec![80, 64], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let f0 = run(&Tensor::zeros(&[80, 64]));
        let (fa, fb, fab) = (run(&a), run(&b), run(&ab));
        for i in 0..f0.len() {
            let lhs = fab[i] - f0[i];
            let rhs = (fa[i] - f0[i]) + (fb[i] - f0[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_matches_direct_breakdown() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 9).unwrap();
        let imgs = images(&m.config, 3);
        let plans = m.pretrain_plans(4).unwrap();
        let mut tape = Tape::<f64>::new();
        let fwd = m.pretrain_forward(&mut tape, &m.params, &imgs, &plans).unwrap();
        let preds: Vec<Tensor> = fwd.recon.iter().map(|&r| tape.value(r).cast()).collect();
        let targets: Vec<Tensor> = imgs.iter().map(|i| m.patches::<f32>(i).unwrap()).collect();
        let direct = super::super::pretrain_loss(&preds, &targets, &plans, &m.config.modality_weights).unwrap();
        let total = tape.value(fwd.total).data()[0];
        let parts: f64 = fwd.per_modality.iter().map(|&l| tape.value(l).data()[0]).sum();
        assert!((total - parts).abs() < 1e-6);
        assert!((total - direct.total).abs() < 1e-6);
    }

    #[test]
    fn masked_index_order_does_not_matter() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 10).unwrap();
        let imgs = images(&m.config, 5);
        let plans = m.pretrain_plans(5).unwrap();
        let mut t1 = Tape::<f64>::new();
        let l1 = m.pretrain_forward(&mut t1, &m.params, &imgs, &plans).unwrap();
        let mut t2 = Tape::<f64>::new();
        let fwd = m.pretrain_forward(&mut t2, &m.params, &imgs, &plans).unwrap();
        let target = m.patches::<f64>(&imgs[0]).unwrap();
        let mut rev = plans[0].masked.clone();
        rev.reverse();
        let shuffled = masked_mse(&mut t2, fwd.recon[0], &target, &rev).unwrap();
        assert!((t2.value(shuffled).data()[0] - t1.value(l1.per_modality[0]).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn pretrain_gradients_match_finite_differences() {
        let m = DenoMAE::new(tiny(), 11).unwrap();
        let imgs = images(&m.config, 6);
        let plans = m.pretrain_plans(6).unwrap();
        let report = gradient_check(
            &m.params,
            |tape, store| {
                Ok(m.pretrain_forward(tape, store, &imgs, &plans)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?
                    .total)
            },
            GradCheckOptions::new(1e-3, 1e-3).sampled(3, 1),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let m = DenoMAE::new(tiny(), 12).unwrap();
        let img = image(&m.config, 7);
        let report = gradient_check(
            &m.params,
            |tape, store| {
                let mut rng = SeedKey::new(3).rng();
                m.classification_loss(tape, store, &img, 2, Some(&mut rng)).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            GradCheckOptions::new(1e-3, 1e-3).sampled(3, 2),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn eval_logits_are_repeatable() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 13).unwrap();
        let img = image(&m.config, 8);
        let a = m.logits(&img).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, m.logits(&img).unwrap());
        assert!(m
            .classification_loss(&mut Tape::<f32>::new(), &m.params, &img, 10, None::<&mut ChaCha8Rng>)
            .is_err());
        let wrong = Tensor::zeros(&[3, 16, 16]);
        assert!(m.logits(&wrong).is_err());
    }

    #[test]
    fn pooling_identical_tokens_returns_the_token() {
        let mut tape = Tape::<f64>::new();
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let h = tape.constant(Tensor::from_fn(&[6, 8], |i| v[i % 8]));
        let g = tape.mean_axis(h, 0).unwrap();
        assert_eq!(tape.value(g).data(), v.as_slice());
    }

    #[test]
    fn denoise_shapes_and_determinism() {
        let m = DenoMAE::new(DenoMAEConfig::desk(), 14).unwrap();
        let imgs = images(&m.config, 9);
        let inputs: Vec<Option<&Tensor>> = m
            .config
            .modalities
            .iter()
            .zip(&imgs)
            .map(|(md, i)| md.is_observed().then_some(i))
            .collect();
        let vis = Visibility::denoising(&m.config, 0.0);
        let a = m.denoise(&inputs, &vis, 1).unwrap();
        let clean = m.slot(Modality::CleanConstellation).unwrap();
        assert_eq!(a.images[clean].shape(), &[3, 32, 32]);
        assert_eq!(a.plans[clean].visible.len(), 0);
        let b = m.denoise(&inputs, &vis, 1).unwrap();
        assert_eq!(a.images, b.images);
        let none = Visibility::new(vec![1.0; 5]);
        assert!(matches!(m.denoise(&inputs, &none, 1), Err(ModelError::NothingVisible)));
        // a visible modality without an image is an error
        let all = Visibility::new(vec![0.0; 5]);
        assert!(m.denoise(&inputs, &all, 1).is_err());
    }

    #[test]
    fn trainable_groups() {
        let mut m = DenoMAE::new(DenoMAEConfig::desk(), 15).unwrap();
        m.set_trainable(&[ParamGroup::Head]);
        for p in m.params.iter() {
            assert_eq!(p.frozen, !p.name.starts_with("head."), "{}", p.name);
        }
        assert_eq!(DenoMAE::group_of("dec.mask_token"), ParamGroup::Decoder);
        assert_eq!(DenoMAE::group_of("shared.noise.norm.g"), ParamGroup::Decoder);
        assert_eq!(DenoMAE::group_of("embed.noise.pos"), ParamGroup::Encoder);
    }
}
