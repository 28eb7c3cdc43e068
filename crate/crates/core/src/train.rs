//! Experiment configuration, the model registry, training and evaluation
//! loops, checkpointing, and the report types emitted by the CLI.
//!
//! Every model variant (pure flows, the latent variable model, and their
//! combinations) is registered by name and built from the same config, so
//! the trainer is a single code path over a `ModelInstance`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::conditioner::{build_conditioner, ConditionerSpec};
use crate::data::{self, SequenceBatch, Standardization};
use crate::error::{Error, Result};
use crate::flow::{flow_log_prob, flow_nll_tape, FlowStack};
use crate::latent::LatentFlow;
use crate::metrics::{self, CorrReport, GapReport, Unit};
use crate::nn::{self, Nonlin, ParamVars};
use crate::optim::AdamState;
use crate::rng::Prng;
use crate::slvm::{elbo, elbo_graph, SlvmModel};

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    8
}
fn default_iterations() -> usize {
    1000
}
fn default_eval_len() -> usize {
    10
}
fn default_k() -> usize {
    3
}
fn default_hidden_units() -> usize {
    32
}
fn default_hidden_layers() -> usize {
    2
}
fn default_z() -> usize {
    16
}
fn default_unit() -> Unit {
    Unit::PerStep
}
fn default_conditioner() -> String {
    "learned".into()
}
fn default_mc() -> usize {
    1
}

/// One experiment, fully determined together with the seed. Unknown JSON
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// one of: af1, af2, slvm, slvm-af1, slvm-dx, slvm-latent-af
    pub model: String,
    /// path to the dataset CSV
    pub dataset: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// defaults to `eval_len` plus the model's required context
    #[serde(default)]
    pub crop_len: Option<usize>,
    #[serde(default = "default_eval_len")]
    pub eval_len: usize,
    /// conditioner window
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    /// latent dimensionality
    #[serde(default = "default_z")]
    pub z: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_unit")]
    pub unit: Unit,
    /// conditioner kind for flow transforms (learned or linear)
    #[serde(default = "default_conditioner")]
    pub conditioner: String,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !MODEL_REGISTRY.iter().any(|(n, _)| *n == self.model) {
            return Err(Error::contract(format!(
                "unknown model `{}`; known: {}",
                self.model,
                model_names().join(", ")
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::contract("lr must be positive"));
        }
        if self.batch_size < 1 || self.eval_len < 1 || self.k < 1 || self.z < 1 {
            return Err(Error::contract(
                "batch_size, eval_len, k and z must all be >= 1",
            ));
        }
        if self.mc_samples < 1 {
            return Err(Error::contract("mc_samples must be >= 1"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A built model: an optional flow pre-processor and an optional latent
/// variable model on the (possibly transformed) signal. At least one is set.
pub struct ModelInstance {
    pub name: String,
    pub flow: Option<FlowStack>,
    pub slvm: Option<SlvmModel>,
}

impl ModelInstance {
    /// Context steps consumed by the flow stack before evaluation starts.
    pub fn required_context(&self) -> usize {
        self.flow
            .as_ref()
            .map(|f| f.transforms().iter().map(|c| c.window()).sum())
            .unwrap_or(0)
    }

    pub fn eval_start(&self) -> usize {
        self.required_context() + 1
    }

    /// Reports an upper bound on the NLL (latent variable models) rather
    /// than an exact value.
    pub fn is_bound(&self) -> bool {
        self.slvm.is_some()
    }

    pub fn collect_params(&self) -> IndexMap<String, DenseArray> {
        let mut out = IndexMap::new();
        if let Some(f) = &self.flow {
            out.extend(nn::collect_params(f));
        }
        if let Some(m) = &self.slvm {
            out.extend(nn::collect_params(m));
        }
        out
    }

    pub fn set_params(&mut self, values: &IndexMap<String, DenseArray>) -> Result<()> {
        if let Some(f) = &mut self.flow {
            nn::set_params(f, values)?;
        }
        if let Some(m) = &mut self.slvm {
            nn::set_params(m, values)?;
        }
        Ok(())
    }

    /// Training objective on `tape`: mean NLL per step for pure flows,
    /// negative mean ELBO per step otherwise.
    pub fn objective_graph(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        batch: &SequenceBatch,
        mc_samples: usize,
        rng: &mut Prng,
    ) -> Result<Var> {
        let eval_start = self.eval_start();
        match (&self.flow, &self.slvm) {
            (Some(f), None) => flow_nll_tape(f, tape, pv, batch, eval_start),
            (flow, Some(m)) => Ok(elbo_graph(
                m,
                tape,
                pv,
                batch,
                flow.as_ref(),
                eval_start,
                mc_samples,
                rng,
            )?
            .neg_elbo_per_step),
            (None, None) => Err(Error::contract("model has neither flow nor slvm")),
        }
    }

    /// Per-sequence NLL (or NLL bound) on full sequences, burn-in applied,
    /// in raw nats (not yet normalized).
    pub fn per_sequence_nll(
        &self,
        batch: &SequenceBatch,
        mc_samples: usize,
        rng: &mut Prng,
    ) -> Result<Vec<f64>> {
        let eval_start = self.eval_start();
        if eval_start > batch.num_steps() {
            return Err(Error::contract(format!(
                "sequences of length {} are too short for a context of {}",
                batch.num_steps(),
                eval_start - 1
            )));
        }
        match (&self.flow, &self.slvm) {
            (Some(f), None) => {
                let (lp, _) = flow_log_prob(f, batch, eval_start)?;
                Ok(lp.iter().map(|v| -v).collect())
            }
            (flow, Some(m)) => {
                let bd = elbo(m, batch, flow.as_ref(), eval_start, mc_samples, rng)?;
                Ok(bd.elbo.iter().map(|v| -v).collect())
            }
            (None, None) => Err(Error::contract("model has neither flow nor slvm")),
        }
    }
}

fn flow_of(kind: &str, depth: usize, cfg: &ExperimentConfig, dim: usize, rng: &mut Prng) -> Result<FlowStack> {
    let mut transforms = Vec::new();
    for i in 0..depth {
        let spec = ConditionerSpec {
            name: format!("af{i}"),
            window: cfg.k,
            dim,
            hidden_units: cfg.hidden_units,
            hidden_layers: cfg.hidden_layers,
            nonlin: Nonlin::Elu,
            rho: 0.0,
            noise_std: 1.0,
        };
        transforms.push(build_conditioner(kind, &spec, rng)?);
    }
    FlowStack::new(transforms, dim)
}

fn slvm_of(cfg: &ExperimentConfig, dim: usize, rng: &mut Prng) -> SlvmModel {
    SlvmModel::new_highway(cfg.z, dim, cfg.hidden_units, cfg.hidden_layers, rng)
}

type ModelBuilder = fn(&ExperimentConfig, usize, &mut Prng) -> Result<ModelInstance>;

/// Model variants by name; each builder yields a ready-to-train instance.
pub const MODEL_REGISTRY: &[(&str, ModelBuilder)] = &[
    ("af1", |cfg, dim, rng| {
        Ok(ModelInstance {
            name: "af1".into(),
            flow: Some(flow_of(&cfg.conditioner, 1, cfg, dim, rng)?),
            slvm: None,
        })
    }),
    ("af2", |cfg, dim, rng| {
        Ok(ModelInstance {
            name: "af2".into(),
            flow: Some(flow_of(&cfg.conditioner, 2, cfg, dim, rng)?),
            slvm: None,
        })
    }),
    ("slvm", |cfg, dim, rng| {
        Ok(ModelInstance {
            name: "slvm".into(),
            flow: None,
            slvm: Some(slvm_of(cfg, dim, rng)),
        })
    }),
    ("slvm-af1", |cfg, dim, rng| {
        Ok(ModelInstance {
            name: "slvm-af1".into(),
            flow: Some(flow_of(&cfg.conditioner, 1, cfg, dim, rng)?),
            slvm: Some(slvm_of(cfg, dim, rng)),
        })
    }),
    ("slvm-dx", |cfg, dim, rng| {
        let mut dx_cfg = cfg.clone();
        dx_cfg.k = 1;
        Ok(ModelInstance {
            name: "slvm-dx".into(),
            flow: Some(flow_of("difference", 1, &dx_cfg, dim, rng)?),
            slvm: Some(slvm_of(cfg, dim, rng)),
        })
    }),
    ("slvm-latent-af", |cfg, dim, rng| {
        let mut m = slvm_of(cfg, dim, rng);
        m.latent_flow = LatentFlow::learned(
            "lf",
            cfg.z,
            cfg.k,
            cfg.hidden_units,
            cfg.hidden_layers,
            rng,
        );
        Ok(ModelInstance {
            name: "slvm-latent-af".into(),
            flow: None,
            slvm: Some(m),
        })
    }),
];

pub fn model_names() -> Vec<&'static str> {
    MODEL_REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_model(cfg: &ExperimentConfig, dim: usize, rng: &mut Prng) -> Result<ModelInstance> {
    cfg.validate()?;
    for (name, builder) in MODEL_REGISTRY {
        if *name == cfg.model {
            return builder(cfg, dim, rng);
        }
    }
    unreachable!("validate checked the registry")
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned training artifact; `save -> load -> save` is byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub data_dim: usize,
    pub dim_names: Vec<String>,
    pub iteration: usize,
    pub standardization: Option<Standardization>,
    pub params: IndexMap<String, DenseArray>,
    pub optimizer: AdamState,
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt)?;
    fs::write(path, text.as_bytes())?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    #[derive(Deserialize)]
    struct VersionTag {
        version: Option<u64>,
    }
    let tag: VersionTag =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("corrupt checkpoint: {e}")))?;
    let version = tag
        .version
        .ok_or_else(|| Error::format("checkpoint missing version tag"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("corrupt checkpoint: {e}")))?;
    Ok(ckpt)
}

/// Rebuilds the trained model from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<ModelInstance> {
    let mut rng = Prng::seed_from(ckpt.config.seed);
    let mut inst = build_model(&ckpt.config, ckpt.data_dim, &mut rng)?;
    inst.set_params(&ckpt.params)?;
    Ok(inst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint_path: String,
    pub log_path: String,
    pub final_objective: Option<f64>,
}

/// Runs the training loop: crop → batch → objective → backward → Adam.
/// Logs the normalized objective every 100 iterations; on a non-finite loss,
/// saves the last good checkpoint and reports the offending iteration.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(Checkpoint, TrainOutcome)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let raw = data::load_csv(Path::new(&cfg.dataset))?;
    let standardized = data::standardize(&raw, None);
    let stats = standardized.standardization.clone();
    let d = standardized.dim();

    let mut rng = Prng::seed_from(cfg.seed);
    let mut inst = build_model(cfg, d, &mut rng)?;
    let required = inst.required_context();
    let crop_len = cfg.crop_len.unwrap_or(cfg.eval_len + required);
    if crop_len < cfg.eval_len + required {
        return Err(Error::contract(format!(
            "crop_len {crop_len} < eval_len {} + required context {required}",
            cfg.eval_len
        )));
    }
    if crop_len > standardized.num_steps() {
        return Err(Error::contract(format!(
            "crop_len {crop_len} exceeds sequence length {}",
            standardized.num_steps()
        )));
    }

    let mut params = inst.collect_params();
    let mut adam = AdamState::new(cfg.lr);
    let mut log_lines = vec!["iteration,objective".to_string()];
    let mut last_objective = None;
    let t_eval = crop_len - required;
    let ckpt_path = out_dir.join("checkpoint.json");
    let log_path = out_dir.join("train_log.csv");

    let make_ckpt = |params: &IndexMap<String, DenseArray>, adam: &AdamState, iter: usize| Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        data_dim: d,
        dim_names: standardized.dim_names.clone(),
        iteration: iter,
        standardization: stats.clone(),
        params: params.clone(),
        optimizer: adam.clone(),
    };

    for iter in 0..cfg.iterations {
        let cropped = data::crop_windows(&standardized, crop_len, &mut rng)?;
        let n = cropped.num_sequences();
        let bs = cfg.batch_size.min(n);
        let idx: Vec<usize> = (0..bs).map(|_| rng.usize_below(n)).collect();
        let batch = cropped.select(&idx);

        let mut tape = Tape::new();
        let pv = nn::inject_leaves_map(&mut tape, &params);
        let loss = inst.objective_graph(&mut tape, &pv, &batch, cfg.mc_samples, &mut rng)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            let ckpt = make_ckpt(&params, &adam, iter);
            checkpoint_save(&ckpt, &ckpt_path)?;
            fs::write(&log_path, log_lines.join("\n") + "\n")?;
            return Err(Error::numeric(format!(
                "non-finite objective at iteration {iter}; last good checkpoint saved"
            )));
        }
        tape.backward(loss)?;
        let mut grads = IndexMap::new();
        for (name, var) in &pv.0 {
            grads.insert(name.clone(), tape.grad(*var));
        }
        adam.step(&mut params, &grads)?;

        let normalized = match cfg.unit {
            Unit::PerStep => loss_val,
            Unit::PerDim => loss_val / d as f64,
        };
        last_objective = Some(normalized);
        if iter % 100 == 0 || iter + 1 == cfg.iterations {
            log_lines.push(format!("{iter},{normalized}"));
        }
    }
    let _ = t_eval;

    inst.set_params(&params)?;
    let ckpt = make_ckpt(&params, &adam, cfg.iterations);
    checkpoint_save(&ckpt, &ckpt_path)?;
    fs::write(&log_path, log_lines.join("\n") + "\n")?;
    Ok((
        ckpt,
        TrainOutcome {
            checkpoint_path: ckpt_path.to_string_lossy().into_owned(),
            log_path: log_path.to_string_lossy().into_owned(),
            final_objective: last_objective,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// true when the value is an upper bound on the NLL rather than exact
    pub bound: bool,
    pub unit: Unit,
    pub t_eval: usize,
    pub dim: usize,
    pub num_sequences: usize,
    pub mean: f64,
    pub per_sequence: Vec<f64>,
}

/// Per-sequence NLL (flows) or NLL bound (latent variable models) on a
/// dataset, normalized to the requested unit.
pub fn evaluate(ckpt: &Checkpoint, raw: &SequenceBatch, unit: Unit) -> Result<EvalReport> {
    if raw.dim() != ckpt.data_dim {
        return Err(Error::contract(format!(
            "dataset dim {} does not match checkpoint dim {}",
            raw.dim(),
            ckpt.data_dim
        )));
    }
    let batch = match &ckpt.standardization {
        Some(s) => data::standardize(raw, Some(s)),
        None => raw.clone(),
    };
    let inst = restore_model(ckpt)?;
    let t_eval = batch.num_steps() + 1 - inst.eval_start().min(batch.num_steps() + 1);
    let mut rng = Prng::seed_from(ckpt.config.seed ^ 0xE7A1);
    let totals = inst.per_sequence_nll(&batch, ckpt.config.mc_samples, &mut rng)?;
    let per_sequence: Result<Vec<f64>> = totals
        .iter()
        .map(|&v| metrics::nll_normalize(v, t_eval, batch.dim(), unit))
        .collect();
    let per_sequence = per_sequence?;
    let mean = per_sequence.iter().sum::<f64>() / per_sequence.len() as f64;
    Ok(EvalReport {
        model: inst.name.clone(),
        bound: inst.is_bound(),
        unit,
        t_eval,
        dim: batch.dim(),
        num_sequences: batch.num_sequences(),
        mean,
        per_sequence,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrAnalysis {
    /// correlation of the raw data
    pub corr_x: CorrReport,
    /// correlation after each flow stage (empty without a flow model)
    pub corr_stages: Vec<CorrReport>,
}

/// Lag-1 correlation of the data and, when a checkpoint with a flow is
/// given, of every transformed stage.
pub fn analyze_corr(raw: &SequenceBatch, ckpt: Option<&Checkpoint>) -> Result<CorrAnalysis> {
    let corr_x = metrics::temporal_correlation(raw)?;
    let mut corr_stages = Vec::new();
    if let Some(ckpt) = ckpt {
        let batch = match &ckpt.standardization {
            Some(s) => data::standardize(raw, Some(s)),
            None => raw.clone(),
        };
        let inst = restore_model(ckpt)?;
        if let Some(flow) = &inst.flow {
            let res = flow.inverse_transform(&batch)?;
            for stage in &res.stages[1..] {
                corr_stages.push(metrics::temporal_correlation(stage)?);
            }
        }
    }
    Ok(CorrAnalysis {
        corr_x,
        corr_stages,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub max_rel_error: f64,
    pub pass: bool,
    pub per_param: IndexMap<String, f64>,
}

/// Compares analytic gradients of the training objective against central
/// finite differences for every parameter, on a small deterministic batch
/// with randomized parameters and frozen noise.
pub fn gradcheck(cfg: &ExperimentConfig, threshold: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let raw = data::load_csv(Path::new(&cfg.dataset))?;
    let standardized = data::standardize(&raw, None);
    let d = standardized.dim();
    let mut rng = Prng::seed_from(cfg.seed);
    let inst = build_model(cfg, d, &mut rng)?;
    let required = inst.required_context();
    let t = (required + 3).min(standardized.num_steps());
    if t < required + 1 {
        return Err(Error::contract("dataset too short for gradcheck"));
    }
    let n = standardized.num_sequences().min(2);
    let idx: Vec<usize> = (0..n).collect();
    let small = data::crop_windows(&standardized.select(&idx), t, &mut rng)?;

    // randomize parameters so gradients flow through every head
    let mut params = inst.collect_params();
    for (_, v) in params.iter_mut() {
        let noise = rng.normal_array(v.shape().to_vec());
        *v = v.zip(&noise, |a, b| a + 0.1 * b);
    }

    let noise_seed = cfg.seed ^ 0x9ec4;
    let eval = |p: &IndexMap<String, DenseArray>, leaves: bool| -> Result<(Tape, ParamVars, Var)> {
        let mut tape = Tape::new();
        let pv = if leaves {
            nn::inject_leaves_map(&mut tape, p)
        } else {
            nn::inject_constants_map(&mut tape, p)
        };
        let loss = inst.objective_graph(
            &mut tape,
            &pv,
            &small,
            cfg.mc_samples,
            &mut Prng::seed_from(noise_seed),
        )?;
        Ok((tape, pv, loss))
    };

    let (mut tape, pv, loss) = eval(&params, true)?;
    tape.backward(loss)?;
    let names: Vec<String> = pv.0.keys().cloned().collect();
    let analytic: Vec<DenseArray> = names.iter().map(|n| tape.grad(pv.get(n))).collect();
    let flat: Vec<DenseArray> = names.iter().map(|n| params[n].clone()).collect();
    let fd = crate::autodiff::finite_difference_gradient(
        |p| {
            let mut map = params.clone();
            for (n, arr) in names.iter().zip(p) {
                map.insert(n.clone(), arr.clone());
            }
            let (t2, _, l2) = eval(&map, false)?;
            Ok(t2.value(l2).item())
        },
        &flat,
        1e-5,
    )?;
    let mut per_param = IndexMap::new();
    let mut worst = 0.0f64;
    for ((name, a), f) in names.iter().zip(&analytic).zip(&fd) {
        let mut e = 0.0f64;
        for (x, y) in a.data().iter().zip(f.data()) {
            e = e.max(crate::array::rel_error(*x, *y));
        }
        worst = worst.max(e);
        per_param.insert(name.clone(), e);
    }
    Ok(GradcheckReport {
        threshold,
        max_rel_error: worst,
        pass: worst < threshold,
        per_param,
    })
}

/// Generalization gap between per-sequence NLLs on two datasets.
pub fn gap(ckpt: &Checkpoint, train_data: &SequenceBatch, test_data: &SequenceBatch) -> Result<GapReport> {
    let unit = ckpt.config.unit;
    let train_eval = evaluate(ckpt, train_data, unit)?;
    let test_eval = evaluate(ckpt, test_data, unit)?;
    metrics::generalization_gap(&train_eval.per_sequence, &test_eval.per_sequence)
}

/// Draws sequences from the trained model and maps them back to data scale.
pub fn sample(ckpt: &Checkpoint, t_len: usize, n: usize, seed: u64) -> Result<SequenceBatch> {
    let inst = restore_model(ckpt)?;
    let mut rng = Prng::seed_from(seed);
    let raw = match (&inst.flow, &inst.slvm) {
        (Some(f), None) => crate::flow::flow_sample(f, n, t_len, &mut rng)?,
        (flow, Some(m)) => crate::slvm::slvm_sample(m, flow.as_ref(), t_len, n, &mut rng)?,
        (None, None) => return Err(Error::contract("model has neither flow nor slvm")),
    };
    let mut out = match &ckpt.standardization {
        Some(s) => data::unstandardize(&raw, s)?,
        None => raw,
    };
    out.dim_names = ckpt.dim_names.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dataset(dir: &Path, seed: u64) -> String {
        let b = data::gen_ar(&[0.8], 0.5, 24, 12, seed).unwrap();
        let p = dir.join("data.csv");
        data::save_csv(&b, &p).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn tiny_config(model: &str, dataset: String) -> ExperimentConfig {
        ExperimentConfig {
            model: model.into(),
            dataset,
            lr: 1e-3,
            batch_size: 4,
            iterations: 3,
            crop_len: None,
            eval_len: 6,
            k: 2,
            hidden_units: 6,
            hidden_layers: 1,
            z: 3,
            seed: 11,
            unit: Unit::PerStep,
            conditioner: "learned".into(),
            mc_samples: 1,
        }
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let text = r#"{"model": "af1", "dataset": "x.csv", "bogus": 1}"#;
        let r: std::result::Result<ExperimentConfig, _> = serde_json::from_str(text);
        assert!(r.is_err());
    }

    #[test]
    fn unknown_model_rejected() {
        let cfg = tiny_config("nope", "x.csv".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_variant_trains_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 1);
        for (name, _) in MODEL_REGISTRY {
            let cfg = tiny_config(name, dataset.clone());
            let out = dir.path().join(name);
            let (ckpt, _) = train(&cfg, &out).unwrap();
            assert_eq!(ckpt.iteration, 3);
            let loaded = checkpoint_load(&out.join("checkpoint.json")).unwrap();
            let raw = data::load_csv(Path::new(&dataset)).unwrap();
            let report = evaluate(&loaded, &raw, Unit::PerStep).unwrap();
            assert!(report.mean.is_finite());
            assert_eq!(report.bound, name.starts_with("slvm"));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 2);
        let cfg = tiny_config("slvm-af1", dataset);
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        train(&cfg, &out_a).unwrap();
        train(&cfg, &out_b).unwrap();
        let a = fs::read(out_a.join("checkpoint.json")).unwrap();
        let b = fs::read(out_b.join("checkpoint.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 3);
        let cfg = tiny_config("af1", dataset);
        let out = dir.path().join("run");
        train(&cfg, &out).unwrap();
        let path = out.join("checkpoint.json");
        let original = fs::read(&path).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        let resaved = dir.path().join("resaved.json");
        checkpoint_save(&loaded, &resaved).unwrap();
        assert_eq!(original, fs::read(&resaved).unwrap());
    }

    #[test]
    fn corrupt_and_mismatched_checkpoints_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(checkpoint_load(&p), Err(Error::Format(_))));
        fs::write(&p, r#"{"version": 99}"#).unwrap();
        let err = checkpoint_load(&p).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 4);
        let mut cfg = tiny_config("af1", dataset);
        cfg.iterations = 0;
        let (ckpt, _) = train(&cfg, &dir.path().join("run")).unwrap();
        // zero-initialized heads: the flow is the identity
        let mut rng = Prng::seed_from(cfg.seed);
        let fresh = build_model(&cfg, 1, &mut rng).unwrap();
        let init = fresh.collect_params();
        assert_eq!(ckpt.params, init);
    }

    #[test]
    fn evaluate_rejects_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 5);
        let cfg = tiny_config("af1", dataset);
        let (ckpt, _) = train(&cfg, &dir.path().join("run")).unwrap();
        let wrong = data::SequenceBatch::zeros(3, 10, 2);
        assert!(evaluate(&ckpt, &wrong, Unit::PerStep).is_err());
    }

    #[test]
    fn gradcheck_passes_for_every_variant() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 6);
        for (name, _) in MODEL_REGISTRY {
            let mut cfg = tiny_config(name, dataset.clone());
            cfg.hidden_units = 4;
            cfg.z = 2;
            let report = gradcheck(&cfg, 1e-3).unwrap();
            assert!(
                report.pass,
                "{name}: max rel error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn sampling_roundtrips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = write_dataset(dir.path(), 7);
        let cfg = tiny_config("af1", dataset);
        let (ckpt, _) = train(&cfg, &dir.path().join("run")).unwrap();
        let s = sample(&ckpt, 8, 3, 99).unwrap();
        let p = dir.path().join("samples.csv");
        data::save_csv(&s, &p).unwrap();
        let back = data::load_csv(&p).unwrap();
        assert_eq!(s.data(), back.data());
    }
}
