//! End-to-end experiment runner and ablation suites.
//!
//! A run walks the stream session by session: train (plain training at the
//! first session; boost then compress afterwards for the FOSTER family),
//! evaluate, refresh the exemplar memory, checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{plain_kd_compress, train_finetune, train_replay, weight_align_composite};
use crate::boosting::{train_boosting, BoostingConfig};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::compression::{train_compression, CompressionConfig, MixupConfig};
use crate::data::{BlobsConfig, Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::evaluation::{average_incremental_accuracy, emit_reports, evaluate_session, RunReport, SessionReport};
use crate::model::{CompositeModel, SingleModel};
use crate::nn::BackboneConfig;
use crate::task_stream::{
    build_class_order, build_stream, ExemplarMemory, MemoryPolicy, Protocol, SelectionStrategy, TaskStream,
};
use crate::train::{fit_supervised, mix_seed, EpochLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Foster,
    Finetune,
    Replay,
    /// Weight alignment after boosting instead of logits alignment.
    FosterWa,
    /// Boosting without the auxiliary head and without distillation.
    FosterNoFe,
    /// Unweighted distillation without mixup in compression.
    FosterPlainKd,
}

impl Method {
    pub fn is_foster(self) -> bool {
        !matches!(self, Method::Finetune | Method::Replay)
    }
}

/// Hidden widths and feature size; the input width comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

/// Which model's features drive herding at the end of a FOSTER session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HerdingFeatures {
    /// The compressed single-backbone model.
    #[default]
    Final,
    /// The boosted model's concatenated features.
    Boosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub protocol: Protocol,
    /// `None` keeps the dataset's class order.
    pub class_order_seed: Option<u64>,
    pub method: Method,
    pub network: NetworkConfig,
    /// First session, and every session of the single-model baselines.
    pub base_train: TrainConfig,
    pub boosting: BoostingConfig,
    pub compression: CompressionConfig,
    pub mixup: MixupConfig,
    pub selection: SelectionStrategy,
    #[serde(default)]
    pub herding_features: HerdingFeatures,
    pub seed: u64,
    /// Not part of the results snapshot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Blobs(BlobsConfig::default()),
            protocol: Protocol::b0(2, MemoryPolicy::FixedTotal, 100),
            class_order_seed: None,
            method: Method::Foster,
            network: NetworkConfig {
                hidden: vec![64],
                feature_dim: 32,
            },
            base_train: TrainConfig::default(),
            boosting: BoostingConfig::default(),
            compression: CompressionConfig::default(),
            mixup: MixupConfig::default(),
            selection: SelectionStrategy::Herding,
            herding_features: HerdingFeatures::Final,
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_train.validate()?;
        self.boosting.validate()?;
        self.compression.train.validate()?;
        if self.network.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.compression.beta) || !(self.compression.temperature > 0.0) {
            return Err(Error::InvalidArgument(
                "compression needs beta in [0, 1] and T > 0".into(),
            ));
        }
        if self.mixup.enabled && !(self.mixup.alpha > 0.0) {
            return Err(Error::InvalidArgument("mixup alpha must be positive".into()));
        }
        Ok(())
    }

    /// The configuration actually used for this method's stages.
    fn stage_configs(&self) -> (BoostingConfig, CompressionConfig, MixupConfig) {
        let mut b = self.boosting.clone();
        let mut c = self.compression.clone();
        let mut m = self.mixup;
        match self.method {
            Method::FosterWa => b.logits_alignment = false,
            Method::FosterNoFe => {
                b.feature_enhancement = false;
                b.distillation = false;
            }
            Method::FosterPlainKd => {
                c.balanced = false;
                m.enabled = false;
            }
            _ => {}
        }
        (b, c, m)
    }

    fn backbone(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            hidden: self.network.hidden.clone(),
            feature_dim: self.network.feature_dim,
        }
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(serde_json::to_value(c)?)
    }
}

pub fn build_experiment_stream(cfg: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<TaskStream> {
    let order = build_class_order(dataset.num_classes, cfg.class_order_seed)?;
    build_stream(dataset, cfg.protocol.clone(), order)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dataset = Arc::new(cfg.dataset.load()?);
    let stream = build_experiment_stream(cfg, dataset)?;
    run_on_stream(cfg, &stream)
}

struct Sink {
    dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl Sink {
    fn new(dir: Option<&Path>) -> Result<Self> {
        let log = match dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                Some(BufWriter::new(File::create(d.join("log.jsonl"))?))
            }
            None => None,
        };
        Ok(Sink {
            dir: dir.map(Path::to_path_buf),
            log,
        })
    }

    fn epochs(&mut self, logs: &[EpochLog]) -> Result<()> {
        if let Some(w) = &mut self.log {
            for l in logs {
                serde_json::to_writer(&mut *w, l)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    fn checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        if let Some(d) = &self.dir {
            ck.save(&d.join("checkpoints").join(format!("session_{}.json", ck.session)))?;
        }
        Ok(())
    }
}

/// Runs `cfg` on an already-built stream. The stream's session layout must
/// match `cfg.protocol`; memory policy and budget come from `cfg`.
pub fn run_on_stream(cfg: &ExperimentConfig, stream: &TaskStream) -> Result<RunReport> {
    cfg.validate()?;
    let sizes = cfg.protocol.session_sizes(stream.dataset.num_classes)?;
    if (0..stream.num_sessions())
        .map(|t| stream.session_bounds(t).1 - stream.session_bounds(t).0)
        .ne(sizes)
    {
        return Err(Error::InvalidProtocol(
            "stream layout does not match the configured protocol".into(),
        ));
    }
    let backbone = cfg.backbone(stream.dataset.input_dim());
    let (boost_cfg, comp_cfg, mixup_cfg) = cfg.stage_configs();
    let mut sink = Sink::new(cfg.output_dir.as_deref())?;
    let mut memory = ExemplarMemory::new(cfg.protocol.memory_policy, cfg.protocol.memory_budget, cfg.selection);
    let mut model: Option<SingleModel> = None;
    let mut reports: Vec<SessionReport> = Vec::with_capacity(stream.num_sessions());

    for t in 0..stream.num_sessions() {
        let seed_t = mix_seed(cfg.seed, t as u64 + 1);
        let session = stream.session(t, &memory).map_err(|e| e.at(t, "stream"))?;
        let mut boosted: Option<CompositeModel> = None;
        let next = match (cfg.method, model.as_ref()) {
            (Method::Finetune, prev) => {
                let (m, logs) = train_finetune(&session, prev, &backbone, &cfg.base_train, seed_t)
                    .map_err(|e| e.at(t, "finetune"))?;
                sink.epochs(&logs)?;
                m
            }
            (Method::Replay, prev) => {
                let (m, logs) =
                    train_replay(&session, prev, &backbone, &cfg.base_train, seed_t).map_err(|e| e.at(t, "replay"))?;
                sink.epochs(&logs)?;
                m
            }
            (_, None) => {
                let mut m = SingleModel::new(&backbone, session.num_new, seed_t);
                let logs = fit_supervised(&mut m, &session.combined, &cfg.base_train, 0, seed_t, "initial", t)
                    .map_err(|e| e.at(t, "initial"))?;
                sink.epochs(&logs)?;
                m
            }
            (method, Some(prev)) => {
                let (mut b, logs) = train_boosting(&session, prev, &boost_cfg, mix_seed(seed_t, 0xb0))
                    .map_err(|e| e.at(t, "boosting"))?;
                sink.epochs(&logs)?;
                if method == Method::FosterWa {
                    weight_align_composite(&mut b).map_err(|e| e.at(t, "weight_align"))?;
                }
                let comp_seed = mix_seed(seed_t, 0xc0);
                let (s, logs) = if method == Method::FosterPlainKd {
                    plain_kd_compress(&session, &b, &comp_cfg, comp_seed)
                } else {
                    train_compression(&session, &b, &comp_cfg, &mixup_cfg, comp_seed)
                }
                .map_err(|e| e.at(t, "compression"))?;
                sink.epochs(&logs)?;
                boosted = Some(b);
                s
            }
        };

        let mut report =
            evaluate_session(&next, &session.test_all_seen, t, session.num_old).map_err(|e| e.at(t, "evaluation"))?;
        if let Some(b) = &boosted {
            let br =
                evaluate_session(b, &session.test_all_seen, t, session.num_old).map_err(|e| e.at(t, "evaluation"))?;
            report.boosted_acc = Some(br.acc);
            report.gap = Some(br.acc - report.acc);
        }
        log::info!(
            "session {t}: acc {:.4} old {:?} new {:.4} boosted {:?}",
            report.acc,
            report.acc_old,
            report.acc_new,
            report.boosted_acc
        );
        reports.push(report);

        if cfg.method != Method::Finetune {
            let feats = match (&boosted, cfg.herding_features) {
                (Some(b), HerdingFeatures::Boosted) => {
                    let f = b.forward(session.new_train.x.view()).map_err(|e| e.at(t, "memory"))?;
                    ndarray::concatenate(ndarray::Axis(1), &[f.old_features.view(), f.new_features.view()])
                        .expect("same rows")
                }
                _ => next
                    .features(session.new_train.x.view())
                    .map_err(|e| e.at(t, "memory"))?,
            };
            memory = memory
                .update(&session, feats.view(), mix_seed(seed_t, 0x3e3))
                .map_err(|e| e.at(t, "memory"))?;
        }

        sink.checkpoint(&Checkpoint {
            version: CHECKPOINT_VERSION,
            session: t,
            method: format!("{:?}", cfg.method),
            model: next.clone(),
            boosted,
            memory: memory.clone(),
            class_order: stream.order.clone(),
        })?;
        model = Some(next);
    }

    let feature_dim = cfg.network.feature_dim;
    let backbone_sizes: Vec<usize> = reports
        .iter()
        .zip(stream_seen(stream))
        .map(|(r, seen)| r.params_total - feature_dim * seen)
        .collect();
    let size_law_holds = backbone_sizes.windows(2).all(|w| w[0] == w[1]);
    let run = RunReport {
        config: cfg.snapshot()?,
        seed: cfg.seed,
        avg_inc_acc: average_incremental_accuracy(&reports)?,
        sessions: reports,
        size_law_holds,
    };
    if let Some(dir) = &cfg.output_dir {
        emit_reports(&run, dir)?;
    }
    Ok(run)
}

fn stream_seen(stream: &TaskStream) -> impl Iterator<Item = usize> + '_ {
    (0..stream.num_sessions()).map(|t| stream.session_bounds(t).1)
}

/// A named modification of the base configuration, given as a JSON merge
/// patch (objects merge recursively, anything else replaces).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub patch: serde_json::Value,
}

impl Variant {
    pub fn new(name: impl Into<String>, patch: serde_json::Value) -> Self {
        Variant {
            name: name.into(),
            patch,
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut v = serde_json::to_value(base)?;
        merge_patch(&mut v, &self.patch);
        let cfg: ExperimentConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_patch(target: &mut serde_json::Value, patch: &serde_json::Value) {
    match (target, patch) {
        (serde_json::Value::Object(t), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(serde_json::Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

/// The β values of the sensitivity sweep.
pub const BETA_SWEEP: [f64; 6] = [0.93, 0.95, 0.97, 0.99, 0.995, 0.999];

/// Named variant sets for the `ablate` command.
pub fn suite(name: &str) -> Result<Vec<Variant>> {
    use serde_json::json;
    let method = |m: &str| Variant::new(m, json!({ "method": m }));
    Ok(match name {
        "methods" => vec![method("replay"), method("finetune")],
        "la_vs_wa" => vec![method("foster_wa")],
        "fe" => vec![method("foster_no_fe")],
        "bkd_vs_kd" => vec![method("foster_plain_kd")],
        "beta" => BETA_SWEEP
            .iter()
            .map(|b| {
                Variant::new(
                    format!("beta={b}"),
                    json!({ "boosting": { "beta": b }, "compression": { "beta": b } }),
                )
            })
            .collect(),
        "exemplars" => [5, 10, 20, 50]
            .iter()
            .map(|m| {
                Variant::new(
                    format!("exemplars={m}"),
                    json!({ "protocol": { "memory_policy": "per_class", "memory_budget": m } }),
                )
            })
            .collect(),
        "all" => ["methods", "la_vs_wa", "fe", "bkd_vs_kd", "beta", "exemplars"]
            .iter()
            .map(|s| suite(s))
            .collect::<Result<Vec<_>>>()?
            .concat(),
        other => return Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub avg_inc_acc: Option<f64>,
    pub final_acc: Option<f64>,
    pub final_acc_old: Option<f64>,
    pub final_acc_new: Option<f64>,
    pub max_gap: Option<f64>,
    pub size_law_holds: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(
            "variant,seed,avg_inc_acc,final_acc,final_acc_old,final_acc_new,max_gap,size_law_holds,error\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.seed,
                opt(r.avg_inc_acc),
                opt(r.final_acc),
                opt(r.final_acc_old),
                opt(r.final_acc_new),
                opt(r.max_gap),
                r.size_law_holds.map(|b| b.to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        s
    }

    pub fn get(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }
}

fn row_from(variant: &str, seed: u64, run: Result<RunReport>) -> AblationRow {
    match run {
        Ok(r) => {
            let last = r.sessions.last();
            AblationRow {
                variant: variant.to_string(),
                seed,
                avg_inc_acc: Some(r.avg_inc_acc),
                final_acc: last.map(|s| s.acc),
                final_acc_old: last.and_then(|s| s.acc_old),
                final_acc_new: last.map(|s| s.acc_new),
                max_gap: r.sessions.iter().filter_map(|s| s.gap).reduce(f64::max),
                size_law_holds: Some(r.size_law_holds),
                error: None,
            }
        }
        Err(e) => AblationRow {
            variant: variant.to_string(),
            seed,
            avg_inc_acc: None,
            final_acc: None,
            final_acc_old: None,
            final_acc_new: None,
            max_gap: None,
            size_law_holds: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs the base configuration and every variant for each seed. All runs
/// whose dataset, class order and session layout match the base share the
/// base stream. A failing variant yields a row with `error` set.
pub fn run_ablation_suite(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    let dataset = Arc::new(base.dataset.load()?);
    let stream = build_experiment_stream(base, dataset.clone())?;
    let base_sizes = base.protocol.session_sizes(dataset.num_classes)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let with_seed = |c: &ExperimentConfig| ExperimentConfig {
            seed,
            output_dir: None,
            ..c.clone()
        };
        rows.push(row_from("base", seed, run_on_stream(&with_seed(base), &stream)));
        for v in variants {
            let run = v.apply(base).and_then(|cfg| {
                let cfg = with_seed(&cfg);
                let same_layout = cfg.dataset == base.dataset
                    && cfg.class_order_seed == base.class_order_seed
                    && cfg.protocol.session_sizes(dataset.num_classes).ok().as_ref() == Some(&base_sizes);
                if same_layout {
                    run_on_stream(&cfg, &stream)
                } else {
                    run_experiment(&cfg)
                }
            });
            rows.push(row_from(&v.name, seed, run));
        }
    }
    Ok(AblationTable { rows })
}
