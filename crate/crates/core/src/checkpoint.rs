//! Stage checkpoints: named parameters, Adam moments, schedule and the run
//! config, in one archive.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use autograd::optim::Adam;
use autograd::ParamStore;

use crate::archive::Archive;
use crate::config::RunConfig;
use crate::diffusion::{make_schedule, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::Model;

pub const SCHEMA: &str = "priorsr-checkpoint/v1";

const FIRST_MOMENT: &str = "optim.m/";
const SECOND_MOMENT: &str = "optim.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    One,
    Two,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "one",
            Stage::Two => "two",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" | "1" => Ok(Stage::One),
            "two" | "2" => Ok(Stage::Two),
            other => Err(Error::config(format!("unknown stage {other:?} (expected one or two)"))),
        }
    }
}

#[derive(Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: RunConfig,
    /// Completed optimisation steps of this stage.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    /// Present for stage two.
    pub schedule: Option<DiffusionSchedule>,
}

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Checkpoint")
            .field("stage", &self.stage)
            .field("step", &self.step)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Checkpoint {
    /// The model structure matching `params`.
    pub fn model(&self) -> Model {
        Model::init::<f32>(&self.config).1
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for (id, name, value) in self.params.iter() {
            a.insert(name, value.clone());
            if let Some((m, v)) = self.optimizer.moments(id) {
                a.insert(format!("{FIRST_MOMENT}{name}"), m.clone());
                a.insert(format!("{SECOND_MOMENT}{name}"), v.clone());
            }
        }
        let meta = &mut a.metadata;
        meta.insert("schema".into(), SCHEMA.into());
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("optimizer_steps".into(), self.optimizer.steps().to_string());
        // TOML rather than JSON: the config may hold an infinite blend weight.
        meta.insert("config".into(), self.config.to_toml_string());
        meta.insert("config_hash".into(), self.config.hash());
        if let Some(s) = &self.schedule {
            meta.insert("schedule".into(), serde_json::to_string(s).expect("schedule serializes"));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let schema = a.meta("schema")?;
        if schema != SCHEMA {
            return Err(Error::format("checkpoint", format!("schema {schema:?}, expected {SCHEMA:?}")));
        }
        let stage: Stage = a.meta("stage")?.parse().map_err(|e: Error| Error::format("checkpoint", e))?;
        let parse_u64 = |key: &str| -> Result<u64> {
            a.meta(key)?.parse().map_err(|e| Error::format("checkpoint", format!("{key}: {e}")))
        };
        let step = parse_u64("step")?;
        let config = RunConfig::from_toml_str(a.meta("config")?).map_err(|e| Error::format("checkpoint", e))?;
        let schedule = match a.metadata.get("schedule") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| Error::format("checkpoint", e))?),
            None => None,
        };
        let (mut params, _) = Model::init::<f32>(&config);
        let mut optimizer = Adam::new(params.len());
        optimizer.set_steps(parse_u64("optimizer_steps")?);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let value = a.get(&name)?;
            if value.shape() != params.get(id).shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: shape {:?}, model expects {:?}", value.shape(), params.get(id).shape()),
                ));
            }
            *params.get_mut(id) = value.clone();
            if let (Ok(m), Ok(v)) = (a.get(&format!("{FIRST_MOMENT}{name}")), a.get(&format!("{SECOND_MOMENT}{name}"))) {
                optimizer.set_moments(id, m.clone(), v.clone());
            }
        }
        Ok(Self { stage, config, step, params, optimizer, schedule })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// The diffusion schedule stored with the checkpoint, or the configured one.
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        match &self.schedule {
            Some(s) => Ok(s.clone()),
            None => {
                let d = &self.config.diffusion;
                make_schedule(d.steps, d.beta_start, d.beta_end)
            }
        }
    }
}
