//! Vision and action encoders.
//!
//! The vision encoder is a small CNN that emits one sigmoid mask per object
//! slot, followed by an MLP shared across slots that maps each flattened mask
//! to an object latent. The action encoder maps a one-hot `(target, dir)`
//! code to a force latent.

use crate::config::ModelConfig;
use crate::env::{EnvAction, Image};
use crate::error::{Error, Result};
use crate::latent::Layout;
use crate::nn::{Conv2d, Mlp, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub to_masks: Conv2d,
    pub mlp: Mlp,
    pub slots: usize,
    pub image: [usize; 3],
    pub mask_hw: (usize, usize),
}

impl VisionEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, image: [usize; 3]) -> Result<Self> {
        let ch = cfg.encoder_channels;
        let conv1 = Conv2d::new(store, "enc.conv1", image[2], ch, 2, 2)?;
        let conv2 = Conv2d::new(store, "enc.conv2", ch, ch, 2, 2)?;
        let to_masks = Conv2d::new(store, "enc.masks", ch, cfg.objects, 1, 1)?;
        let h = (image[0] / 2) / 2;
        let w = (image[1] / 2) / 2;
        if h == 0 || w == 0 {
            return Err(Error::config(format!("image {image:?} too small for the encoder")));
        }
        let latent = Layout::object(cfg.sub_object).width();
        let mlp = Mlp::new(
            store,
            "enc.mlp",
            &[h * w, cfg.encoder_hidden, cfg.encoder_hidden, latent],
        )?;
        Ok(VisionEncoder {
            conv1,
            conv2,
            to_masks,
            mlp,
            slots: cfg.objects,
            image,
            mask_hw: (h, w),
        })
    }

    pub fn batch_tensor<T: Real>(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let [h, w, c] = self.image;
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != self.image {
                return Err(Error::input(format!(
                    "image shape {:?}, encoder expects {:?}",
                    img.shape(),
                    self.image
                )));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec(&[images.len(), h, w, c], data)
    }

    /// Object masks as `[B * slots, H' * W']`, slot-major within each image.
    pub fn extract<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let h = tape.relu(h);
        let m = self.to_masks.forward(tape, h)?;
        let m = tape.sigmoid(m);
        let hw = self.mask_hw.0 * self.mask_hw.1;
        let m = tape.permute_021(m, b, hw, self.slots)?;
        tape.reshape(m, &[b * self.slots, hw])
    }

    /// Object latents as `[B * slots, 8 * sub]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let masks = self.extract(tape, x)?;
        self.encode_masks(tape, masks)
    }

    pub fn encode_masks<T: Real>(&self, tape: &mut Tape<'_, T>, masks: Var) -> Result<Var> {
        self.mlp.forward(tape, masks)
    }

    pub fn encode_images<T: Real>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<Var> {
        let x = self.batch_tensor(images)?;
        let x = tape.constant(x);
        self.encode(tape, x)
    }
}

#[derive(Clone, Debug)]
pub struct ActionEncoder {
    pub mlp: Mlp,
    pub slots: usize,
}

impl ActionEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let latent = Layout::force(cfg.sub_force).width();
        let mlp = Mlp::new(store, "act.mlp", &[cfg.objects * 4, cfg.action_hidden, latent])?;
        Ok(ActionEncoder { mlp, slots: cfg.objects })
    }

    pub fn one_hot<T: Real>(&self, actions: &[EnvAction]) -> Result<Tensor<T>> {
        let width = self.slots * 4;
        let mut data = vec![T::zero(); actions.len() * width];
        for (r, a) in actions.iter().enumerate() {
            if a.target >= self.slots {
                return Err(Error::input(format!("action target {} beyond {} slots", a.target, self.slots)));
            }
            data[r * width + a.index()] = T::one();
        }
        Tensor::from_vec(&[actions.len(), width], data)
    }

    /// Force latents as `[B, 7 * sub]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, actions: &[EnvAction]) -> Result<Var> {
        let x = self.one_hot(actions)?;
        let x = tape.constant(x);
        self.mlp.forward(tape, x)
    }
}
