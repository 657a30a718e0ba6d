//! World models: encoders plus one of the transition functions, with their
//! parameter store and checkpointing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{Gnn, Modular};
use crate::config::ModelConfig;
use crate::cpm::{Choice, CpmNet};
use crate::encoders::{ActionEncoder, VisionEncoder};
use crate::env::{EnvAction, Image};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cpm,
    Gnn,
    Modular,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cpm, ModelKind::Gnn, ModelKind::Modular];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Cpm => "cpm",
            ModelKind::Gnn => "gnn",
            ModelKind::Modular => "modular",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpm" => Ok(ModelKind::Cpm),
            "gnn" => Ok(ModelKind::Gnn),
            "modular" => Ok(ModelKind::Modular),
            _ => Err(Error::input(format!("unknown model `{s}` (expected cpm, gnn or modular)"))),
        }
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Transition {
    Cpm(CpmNet),
    Gnn(Gnn),
    Modular(Modular),
}

/// How the CPM builds its step graph; ignored by the baselines.
pub enum GraphMode<'a> {
    Complete,
    Argmax,
    Sample(&'a mut ChaCha8Rng),
}

/// Parameter handles of a full model.
#[derive(Clone, Debug)]
pub struct Arch {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub image: [usize; 3],
    pub encoder: VisionEncoder,
    pub action: ActionEncoder,
    pub transition: Transition,
}

impl Arch {
    pub fn new<T: Real>(store: &mut ParamStore<T>, kind: ModelKind, config: &ModelConfig, image: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let encoder = VisionEncoder::new(store, config, image)?;
        let action = ActionEncoder::new(store, config)?;
        let ow = crate::latent::Layout::object(config.sub_object).width();
        let fw = crate::latent::Layout::force(config.sub_force).width();
        let transition = match kind {
            ModelKind::Cpm => Transition::Cpm(CpmNet::new(store, config)?),
            ModelKind::Gnn => Transition::Gnn(Gnn::new(store, ow, fw, config.baseline_hidden)?),
            ModelKind::Modular => {
                Transition::Modular(Modular::new(store, config.objects, ow, fw, config.baseline_hidden)?)
            }
        };
        Ok(Arch {
            kind,
            config: config.clone(),
            image,
            encoder,
            action,
            transition,
        })
    }

    pub fn slots(&self) -> usize {
        self.config.objects
    }

    pub fn cpm(&self) -> Option<&CpmNet> {
        match &self.transition {
            Transition::Cpm(net) => Some(net),
            _ => None,
        }
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<Var> {
        self.encoder.encode_images(tape, images)
    }

    pub fn forces<T: Real>(&self, tape: &mut Tape<'_, T>, actions: &[EnvAction]) -> Result<Var> {
        self.action.encode(tape, actions)
    }

    /// Next object latents `[B * slots, w]`.
    pub fn predict<T: Real>(&self, tape: &mut Tape<'_, T>, objects: Var, force: Var, mode: GraphMode<'_>) -> Result<Var> {
        let n = self.slots();
        match &self.transition {
            Transition::Cpm(net) => {
                let choice = match mode {
                    GraphMode::Complete => Choice::Complete,
                    GraphMode::Argmax => Choice::Argmax,
                    GraphMode::Sample(rng) => Choice::Sample(rng),
                };
                Ok(net.step(tape, objects, force, n, choice)?.objects)
            }
            Transition::Gnn(g) => g.forward(tape, objects, force, n),
            Transition::Modular(m) => m.forward(tape, objects, force, n),
        }
    }
}

/// Names of the controller parameters.
pub fn is_controller(name: &str) -> bool {
    name.starts_with("pi_")
}

/// Names of the reward-head parameters.
pub fn is_reward(name: &str) -> bool {
    name.starts_with("r_")
}

/// A model together with its parameter values.
#[derive(Clone, Debug)]
pub struct WorldModel {
    pub arch: Arch,
    pub store: ParamStore<f32>,
    /// Highest training stage completed.
    pub stage: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: ModelKind,
    model: ModelConfig,
    image: [usize; 3],
    #[serde(default)]
    run: serde_json::Value,
}

impl WorldModel {
    pub fn new(kind: ModelKind, config: &ModelConfig, image: [usize; 3], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let arch = Arch::new(&mut store, kind, config, image)?;
        Ok(WorldModel { arch, store, stage: 0 })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    /// Writes a checkpoint; `run` is embedded verbatim in the manifest.
    pub fn save(&self, path: &Path, run: serde_json::Value) -> Result<()> {
        let meta = Meta {
            kind: self.arch.kind,
            model: self.arch.config.clone(),
            image: self.arch.image,
            run,
        };
        checkpoint::save(path, &self.store, self.stage, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_value(manifest.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut model = WorldModel::new(meta.kind, &meta.model, meta.image, 0)?;
        checkpoint::restore(&mut model.store, &tensors)?;
        model.stage = manifest.stage;
        Ok(model)
    }

    /// Run metadata stored in a checkpoint.
    pub fn load_run_meta(path: &Path) -> Result<serde_json::Value> {
        let (manifest, _) = checkpoint::load(path)?;
        Ok(manifest.meta.get("run").cloned().unwrap_or(serde_json::Value::Null))
    }

    /// Encoded object latents `[B * slots, w]`, computed in chunks.
    pub fn encode(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let w = crate::latent::Layout::object(self.arch.config.sub_object).width();
        let mut data = Vec::with_capacity(images.len() * self.arch.slots() * w);
        for chunk in images.chunks(256) {
            let mut tape = Tape::new(&self.store);
            let z = self.arch.encode(&mut tape, chunk)?;
            data.extend_from_slice(tape.value(z).data());
        }
        Tensor::from_vec(&[images.len() * self.arch.slots(), w], data)
    }

    /// Rolls latents forward through `actions[t]` for each sample; `actions`
    /// is step-major with one action per sample per step.
    pub fn rollout(&self, objects: &Tensor<f32>, actions: &[Vec<EnvAction>], mode: &mut RolloutMode) -> Result<Tensor<f32>> {
        let mut z = objects.clone();
        for step in actions {
            let mut tape = Tape::new(&self.store);
            let o = tape.constant(z);
            let f = self.arch.forces(&mut tape, step)?;
            let gm = match mode {
                RolloutMode::Complete => GraphMode::Complete,
                RolloutMode::Argmax => GraphMode::Argmax,
                RolloutMode::Sample(rng) => GraphMode::Sample(rng),
            };
            let next = self.arch.predict(&mut tape, o, f, gm)?;
            z = tape.value(next).clone();
        }
        Ok(z)
    }

    /// Graph mode used for evaluation: the complete graph until the
    /// controllers have been trained, argmax afterwards.
    pub fn eval_mode(&self, sampled: Option<ChaCha8Rng>) -> RolloutMode {
        match (self.stage, sampled) {
            (s, _) if s < 2 => RolloutMode::Complete,
            (_, Some(rng)) => RolloutMode::Sample(rng),
            _ => RolloutMode::Argmax,
        }
    }
}

/// Owned counterpart of [`GraphMode`] for multi-step rollouts.
#[allow(clippy::large_enum_variant)]
pub enum RolloutMode {
    Complete,
    Argmax,
    Sample(ChaCha8Rng),
}
