use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{History, Precision};
use crate::acf::AcfStandardizer;
use crate::autodiff::{AdamConfig, AdamState, ParamStore, Real};
use crate::container::{Container, NamedArray};
use crate::error::{bail, Error, Result};
use crate::models::{
    build_baseline_cnn, build_dilated_cnn, build_session_lstm, BaselineCnn, BaselineCnnConfig, DilatedCnn,
    DilatedCnnConfig, SessionLstm, SessionLstmConfig,
};

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam_m/";
const ADAM_V_PREFIX: &str = "adam_v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DilatedCnn,
    BaselineCnn,
    SessionLstm,
}

/// Optimizer moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub learning_rate: f64,
    pub config: AdamConfig,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamSnapshot {
    pub fn capture<T: Real>(store: &ParamStore<T>, state: &AdamState<T>) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let widen = |v: &[T]| v.iter().map(|x| x.f64()).collect();
                (p.name.clone(), widen(&state.m[id.index()]), widen(&state.v[id.index()]))
            })
            .collect();
        Self {
            step: state.step,
            learning_rate: state.learning_rate,
            config: state.config,
            moments,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub architecture: Value,
    /// Parameter values (including batch-norm running statistics) by name.
    pub params: Vec<NamedArray>,
    pub standardizer: Option<AcfStandardizer>,
    pub adam: Option<AdamSnapshot>,
    pub history: Option<History>,
    pub seed: u64,
    pub precision: Precision,
    /// Free-form context recorded by the pipeline (feature source, ACF delay, ...).
    pub info: Value,
}

impl Checkpoint {
    pub fn new<T: Real, C: Serialize>(kind: ModelKind, architecture: &C, store: &ParamStore<T>, seed: u64) -> Result<Self> {
        let params = store
            .to_named_arrays()
            .into_iter()
            .map(|(name, shape, data)| NamedArray::new(name, shape, data))
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            architecture: serde_json::to_value(architecture)?,
            params,
            standardizer: None,
            adam: None,
            history: None,
            seed,
            precision: if T::BITS == 64 { Precision::Double } else { Precision::Single },
            info: Value::Null,
        })
    }

    pub fn architecture<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.architecture.clone())?)
    }

    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let arrays: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params
            .iter()
            .map(|a| (a.name.clone(), a.shape.clone(), a.data.clone()))
            .collect();
        store.load_named_arrays(&arrays)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            bail!(Format, "checkpoint holds a {:?} model, expected {:?}", self.kind, kind);
        }
        Ok(())
    }

    pub fn dilated_cnn<T: Real>(&self) -> Result<DilatedCnn<T>> {
        self.expect_kind(ModelKind::DilatedCnn)?;
        let mut m = build_dilated_cnn::<T>(&self.architecture::<DilatedCnnConfig>()?, self.seed)?;
        self.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn baseline_cnn<T: Real>(&self) -> Result<BaselineCnn<T>> {
        self.expect_kind(ModelKind::BaselineCnn)?;
        let mut m = build_baseline_cnn::<T>(&self.architecture::<BaselineCnnConfig>()?, self.seed)?;
        self.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn session_lstm<T: Real>(&self) -> Result<SessionLstm<T>> {
        self.expect_kind(ModelKind::SessionLstm)?;
        let mut m = build_session_lstm::<T>(&self.architecture::<SessionLstmConfig>()?, self.seed)?;
        self.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut meta = json!({
            "content": "checkpoint",
            "kind": self.kind,
            "architecture": self.architecture,
            "seed": self.seed,
            "precision": self.precision,
            "history": self.history,
            "info": self.info,
        });
        let mut c = Container::new(Value::Null);
        for p in &self.params {
            c.push(NamedArray::new(format!("{PARAM_PREFIX}{}", p.name), p.shape.clone(), p.data.clone())?);
        }
        if let Some(s) = &self.standardizer {
            meta["standardizer"] = json!({"rows": s.rows, "cols": s.cols, "fitted_on": s.fitted_on});
            c.push(NamedArray::new("standardizer/mean", vec![s.rows, s.cols], s.mean.clone())?);
            c.push(NamedArray::new("standardizer/std", vec![s.rows, s.cols], s.std.clone())?);
        }
        if let Some(a) = &self.adam {
            meta["adam"] = json!({"step": a.step, "learning_rate": a.learning_rate, "config": a.config});
            for (name, m, v) in &a.moments {
                c.push(NamedArray::new(format!("{ADAM_M_PREFIX}{name}"), vec![m.len()], m.clone())?);
                c.push(NamedArray::new(format!("{ADAM_V_PREFIX}{name}"), vec![v.len()], v.clone())?);
            }
        }
        c.metadata = meta;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        if meta["content"] != "checkpoint" {
            bail!(Format, "container does not hold a checkpoint");
        }
        let field = |k: &str| -> Result<Value> {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{k}'")))
        };
        let params = c
            .arrays
            .iter()
            .filter_map(|a| {
                a.name
                    .strip_prefix(PARAM_PREFIX)
                    .map(|n| NamedArray::new(n, a.shape.clone(), a.data.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let standardizer = match meta.get("standardizer") {
            Some(s) if !s.is_null() => Some(AcfStandardizer {
                mean: c.array("standardizer/mean")?.data.clone(),
                std: c.array("standardizer/std")?.data.clone(),
                rows: serde_json::from_value(s["rows"].clone())?,
                cols: serde_json::from_value(s["cols"].clone())?,
                fitted_on: serde_json::from_value(s["fitted_on"].clone())?,
            }),
            _ => None,
        };
        let adam = match meta.get("adam") {
            Some(a) if !a.is_null() => {
                let moments = c
                    .arrays
                    .iter()
                    .filter_map(|arr| arr.name.strip_prefix(ADAM_M_PREFIX).map(|n| (n, arr)))
                    .map(|(name, m)| {
                        let v = c.array(&format!("{ADAM_V_PREFIX}{name}"))?;
                        Ok((name.to_string(), m.data.clone(), v.data.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(AdamSnapshot {
                    step: serde_json::from_value(a["step"].clone())?,
                    learning_rate: serde_json::from_value(a["learning_rate"].clone())?,
                    config: serde_json::from_value(a["config"].clone())?,
                    moments,
                })
            }
            _ => None,
        };
        Ok(Self {
            kind: serde_json::from_value(field("kind")?)?,
            architecture: field("architecture")?,
            params,
            standardizer,
            adam,
            history: serde_json::from_value(field("history")?)?,
            seed: serde_json::from_value(field("seed")?)?,
            precision: serde_json::from_value(field("precision")?)?,
            info: meta.get("info").cloned().unwrap_or(Value::Null),
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path)?)
}
