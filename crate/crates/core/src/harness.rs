//! End-to-end experiments: generate, train, adapt, evaluate, plus the
//! pooled (uniform) and per-group (oracle) reward-model baselines.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_from_neighbors, fallback_embedding, khop_positive_users, user_opt, AdaptConfig, UnseenUser};
use crate::error::{CoplError, Result};
use crate::export::{write_allocation_csv, write_embeddings_csv};
use crate::gcf::{predict_pair, train_gcf, EmbeddingTable, GcfHyperparams, GcfModel};
use crate::graph::build_graph;
use crate::json::{self, matrix};
use crate::mole::{
    allocation_purity, expert_allocation, feature_matrix, train_reward, MoleConfig, MoleRewardModel, RewardTrainConfig,
};
use crate::prefdata::{
    generate_dataset, generate_unseen, group_representatives, resolve_pair, tag_pairs, Annotation, Choice,
    GeneratorConfig, PairTag, PreferenceDataset, PreferencePair, ProfileSpec, UnseenCohort,
};
use crate::rng::{indexed_seed, rng_from, stage_seed};

pub const CONFIG_VERSION: u32 = 1;

/// File names of the artifacts written under an output directory.
pub mod artifact {
    pub const DATASET: &str = "dataset.json";
    pub const UNSEEN: &str = "unseen.json";
    pub const GCF_MODEL: &str = "gcf_model.json";
    pub const EMBEDDINGS: &str = "embeddings.json";
    pub const REWARD_MODEL: &str = "reward_model.json";
    pub const ADAPTED: &str = "adapted.json";
    pub const REPORT: &str = "report.json";
    pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
    pub const ALLOCATION_CSV: &str = "expert_allocation.csv";
}

/// Optional parts of the evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSelection {
    /// Train and score the uniform and group-oracle reward models.
    pub baselines: bool,
    /// Score naive-average, user-opt and random embeddings for unseen users.
    pub adaptation_ablation: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            baselines: true,
            adaptation_ablation: true,
        }
    }
}

/// Everything needed to reproduce a run. The `rng_seed` fields of the nested
/// configs are ignored: each stage seed is derived from `master_seed` and the
/// stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub master_seed: u64,
    pub generator: GeneratorConfig,
    pub gcf: GcfHyperparams,
    pub mole: MoleConfig,
    pub reward: RewardTrainConfig,
    pub adapt: AdaptConfig,
    pub metrics: MetricSelection,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            master_seed: 0,
            generator: GeneratorConfig::default(),
            gcf: GcfHyperparams::default(),
            mole: MoleConfig::default(),
            reward: RewardTrainConfig::default(),
            adapt: AdaptConfig::default(),
            metrics: MetricSelection::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Small configuration for quick end-to-end checks.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.generator.num_users = 50;
        cfg.generator.num_items = 200;
        cfg.generator.unseen.num_users = 10;
        cfg.gcf.dim = 8;
        cfg.gcf.layers = 2;
        cfg.gcf.epochs = 60;
        cfg.gcf.batch_size = 64;
        cfg.mole.hidden = 16;
        cfg.mole.depth = 2;
        cfg.mole.num_experts = 4;
        cfg.mole.rank = 4;
        cfg.mole.gate_hidden = 32;
        cfg.reward.epochs = 10;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CoplError::invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.generator.validate()?;
        if self.generator.test_pairs_per_user == 0 {
            return Err(CoplError::invalid("experiments need at least one test pair per user"));
        }
        if self.generator.unseen.num_users > 0 && self.generator.unseen.test_pairs_per_user == 0 {
            return Err(CoplError::invalid("unseen users need at least one test pair each"));
        }
        self.gcf.validate()?;
        self.reward.validate()?;
        self.adapt.validate()?;
        if self.adapt.opt_steps == 0 {
            return Err(CoplError::invalid("adapt.opt_steps must be >= 1"));
        }
        // builds and discards a model to check the mole dimensions
        MoleRewardModel::new(self.generator.num_dims, self.gcf.dim, &self.mole)?;
        Ok(())
    }

    fn seed(&self, stage: &str) -> u64 {
        stage_seed(self.master_seed, stage)
    }

    fn gcf_hyper(&self) -> GcfHyperparams {
        GcfHyperparams {
            rng_seed: self.seed("gcf"),
            ..self.gcf.clone()
        }
    }

    fn mole_config(&self, stage: &str) -> MoleConfig {
        MoleConfig {
            rng_seed: self.seed(stage),
            ..self.mole.clone()
        }
    }

    fn reward_config(&self, stage: &str) -> RewardTrainConfig {
        RewardTrainConfig {
            rng_seed: self.seed(stage),
            ..self.reward.clone()
        }
    }
}

/// Exact correct/total counts; divided only when reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn record(&mut self, correct: bool) {
        self.correct += u64::from(correct);
        self.total += 1;
    }

    pub fn fraction(self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Accuracy of one reward model on the seen (and optionally unseen) test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub seen_accuracy: f64,
    pub unseen_accuracy: Option<f64>,
    pub common_accuracy: Option<f64>,
    pub controversial_accuracy: Option<f64>,
    pub groupwise_accuracy: BTreeMap<usize, f64>,
}

/// Unseen-user accuracy of the reward model under each embedding strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationScores {
    pub weighted: f64,
    pub naive_average: f64,
    pub user_opt: f64,
    pub random: f64,
}

/// Metrics of one run. Pair-type and group breakdowns are over seen users'
/// test pairs. Wall time is kept out of the serialized form so that
/// identical runs produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seen_accuracy: f64,
    pub unseen_accuracy: Option<f64>,
    pub common_accuracy: Option<f64>,
    pub controversial_accuracy: Option<f64>,
    pub groupwise_accuracy: BTreeMap<usize, f64>,
    pub gnn_test_accuracy: f64,
    /// Per layer; absent without group labels.
    pub expert_allocation_purity: Option<Vec<f64>>,
    /// Unseen users whose positive neighborhood was empty.
    pub unseen_fallbacks: usize,
    pub uniform: Option<ModelScores>,
    pub group_oracle: Option<ModelScores>,
    pub adaptation: Option<AdaptationScores>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// Unseen-user embeddings under every strategy; row `i` belongs to `user_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedEmbeddings {
    pub user_ids: Vec<usize>,
    #[serde(with = "matrix")]
    pub weighted: Array2<f64>,
    #[serde(with = "matrix")]
    pub naive_average: Array2<f64>,
    #[serde(with = "matrix")]
    pub user_opt: Array2<f64>,
    #[serde(with = "matrix")]
    pub random: Array2<f64>,
    pub fallback_users: Vec<usize>,
}

impl AdaptedEmbeddings {
    fn row_of(&self, user: usize) -> Result<usize> {
        self.user_ids
            .binary_search(&user)
            .map_err(|_| CoplError::invalid(format!("unseen user {user} has no adapted embedding")))
    }
}

/// A user-agnostic reward model: one expert, constant zero gate input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformRewardModel {
    pub model: MoleRewardModel,
}

impl UniformRewardModel {
    pub fn margin(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        let e = Array1::zeros(self.model.user_dim());
        self.model.pair_margin(e.view(), a, b)
    }
}

/// One uniform model per group; users are routed by their true group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOracle {
    pub models: BTreeMap<usize, UniformRewardModel>,
}

fn train_pooled(
    pairs: &[PreferencePair],
    features: &Array2<f64>,
    mole: &MoleConfig,
    train: &RewardTrainConfig,
) -> Result<UniformRewardModel> {
    let cfg = MoleConfig {
        num_experts: 1,
        ..mole.clone()
    };
    let model = MoleRewardModel::new(features.ncols(), 1, &cfg)?;
    let rows = pairs.iter().map(|p| p.user + 1).max().unwrap_or(0);
    let zeros = Array2::zeros((rows, 1));
    let out = train_reward(&model, &zeros, features, pairs, train)?;
    Ok(UniformRewardModel { model: out.model })
}

/// Reward model trained on all users' pairs pooled together.
pub fn uniform_baseline(
    dataset: &PreferenceDataset,
    mole: &MoleConfig,
    train: &RewardTrainConfig,
) -> Result<UniformRewardModel> {
    train_pooled(
        &dataset.train_pairs()?,
        &feature_matrix(&dataset.responses),
        mole,
        train,
    )
}

/// A uniform model per group, each trained on its own group's pairs.
pub fn group_oracle_baseline(
    dataset: &PreferenceDataset,
    mole: &MoleConfig,
    train: &RewardTrainConfig,
) -> Result<GroupOracle> {
    if !dataset.has_groups() {
        return Err(CoplError::MissingGroups);
    }
    let features = feature_matrix(&dataset.responses);
    let pairs = dataset.train_pairs()?;
    let mut by_group: BTreeMap<usize, Vec<PreferencePair>> = BTreeMap::new();
    for p in pairs {
        let g = dataset.users[p.user].group_id.ok_or(CoplError::MissingGroups)?;
        by_group.entry(g).or_default().push(p);
    }
    let models = by_group
        .into_iter()
        .map(|(g, pairs)| Ok((g, train_pooled(&pairs, &features, mole, train)?)))
        .collect::<Result<_>>()?;
    Ok(GroupOracle { models })
}

/// Fraction of held-out pairs the GCF embeddings order correctly.
pub fn eval_gnn_testacc(embeddings: &EmbeddingTable, test_pairs: &[PreferencePair]) -> Result<f64> {
    let mut tally = Tally::default();
    for p in test_pairs {
        tally.record(predict_pair(embeddings, p.user, p.preferred, p.rejected)? == Choice::A);
    }
    tally
        .fraction()
        .ok_or_else(|| CoplError::invalid("no test pairs to evaluate"))
}

/// Accuracy over common-tagged and controversial-tagged items, from
/// `(item_id, correct)` outcomes. A type with no pairs is absent.
pub fn breakdown_common_controversial(
    outcomes: &[(usize, bool)],
    tags: &BTreeMap<usize, PairTag>,
) -> (Option<f64>, Option<f64>) {
    let mut common = Tally::default();
    let mut controversial = Tally::default();
    for &(item, ok) in outcomes {
        match tags.get(&item) {
            Some(PairTag::Common) => common.record(ok),
            Some(PairTag::Controversial) => controversial.record(ok),
            None => {}
        }
    }
    (common.fraction(), controversial.fraction())
}

/// Item tags, when the dataset has at least two groups.
fn item_tags(dataset: &PreferenceDataset) -> Result<Option<BTreeMap<usize, PairTag>>> {
    let reps = group_representatives(&dataset.users);
    if reps.len() < 2 {
        return Ok(None);
    }
    tag_pairs(&dataset.survey, &dataset.responses, &reps).map(Some)
}

#[derive(Default)]
struct Breakdown {
    all: Tally,
    groups: BTreeMap<usize, Tally>,
    outcomes: Vec<(usize, bool)>,
}

impl Breakdown {
    fn accuracy(&self) -> Result<f64> {
        self.all
            .fraction()
            .ok_or_else(|| CoplError::invalid("no test pairs to evaluate"))
    }

    fn groupwise(&self) -> BTreeMap<usize, f64> {
        self.groups
            .iter()
            .filter_map(|(&g, t)| t.fraction().map(|f| (g, f)))
            .collect()
    }
}

/// Scores `annotations` with `correct(pair)`, tracking group and item.
fn score_annotations(
    survey: &[crate::prefdata::SurveyItem],
    annotations: &[Annotation],
    group_of: impl Fn(usize) -> Option<usize>,
    mut correct: impl FnMut(&PreferencePair) -> Result<bool>,
) -> Result<Breakdown> {
    let mut b = Breakdown::default();
    for a in annotations {
        let pair = resolve_pair(survey, a)?;
        let ok = correct(&pair)?;
        b.all.record(ok);
        if let Some(g) = group_of(a.user_id) {
            b.groups.entry(g).or_default().record(ok);
        }
        b.outcomes.push((a.item_id, ok));
    }
    Ok(b)
}

/// Generates the seen dataset and the unseen cohort.
pub fn generate_stage(cfg: &ExperimentConfig) -> Result<(PreferenceDataset, UnseenCohort)> {
    let dataset = generate_dataset(&cfg.generator, cfg.seed("dataset"))?;
    let unseen = generate_unseen(&dataset, &cfg.generator.unseen, dataset.meta.seed)?;
    Ok((dataset, unseen))
}

/// Builds the training graph and trains the GCF embeddings.
pub fn gcf_stage(cfg: &ExperimentConfig, dataset: &PreferenceDataset) -> Result<(GcfModel, EmbeddingTable)> {
    let graph = build_graph(dataset)?;
    let hyper = cfg.gcf_hyper();
    let out = train_gcf(&graph, &dataset.train_pairs()?, &hyper)?;
    log::info!(
        "gcf loss {:.4} -> {:.4}",
        out.loss_trace.first().copied().unwrap_or(f64::NAN),
        out.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok((
        GcfModel {
            hyper,
            params: out.params,
        },
        out.embeddings,
    ))
}

/// Trains the user-conditioned reward model on frozen GCF user embeddings.
pub fn reward_stage(
    cfg: &ExperimentConfig,
    dataset: &PreferenceDataset,
    embeddings: &EmbeddingTable,
) -> Result<MoleRewardModel> {
    let model = MoleRewardModel::new(dataset.num_dims(), embeddings.dim(), &cfg.mole_config("mole-init"))?;
    let out = train_reward(
        &model,
        &embeddings.user_embeddings,
        &feature_matrix(&dataset.responses),
        &dataset.train_pairs()?,
        &cfg.reward_config("reward-train"),
    )?;
    log::info!(
        "reward loss {:.4} -> {:.4}",
        out.loss_trace.first().copied().unwrap_or(f64::NAN),
        out.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(out.model)
}

/// Zero-mean Gaussian draw with the per-dimension spread of the seen users.
fn random_embedding(std: &Array1<f64>, seed: u64) -> Array1<f64> {
    let mut rng = rng_from(seed);
    std.mapv(|s| {
        let z: f64 = StandardNormal.sample(&mut rng);
        s * z
    })
}

/// Embeds every unseen user with the weighted strategy and the comparison
/// strategies.
pub fn adapt_stage(
    cfg: &ExperimentConfig,
    dataset: &PreferenceDataset,
    unseen: &UnseenCohort,
    embeddings: &EmbeddingTable,
) -> Result<AdaptedEmbeddings> {
    cfg.adapt.validate()?;
    let graph = build_graph(dataset)?;
    let d = embeddings.dim();
    let n = unseen.users.len();
    let mut by_user: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for a in &unseen.annotations {
        let p = resolve_pair(&dataset.survey, a)?;
        by_user.entry(a.user_id).or_default().push((p.preferred, p.rejected));
    }
    let std = embeddings.user_embeddings.std_axis(Axis(0), 0.0);
    let random_seed = cfg.seed("random-embeddings");
    let mut out = AdaptedEmbeddings {
        user_ids: unseen.users.iter().map(|u| u.user_id).collect(),
        weighted: Array2::zeros((n, d)),
        naive_average: Array2::zeros((n, d)),
        user_opt: Array2::zeros((n, d)),
        random: Array2::zeros((n, d)),
        fallback_users: Vec::new(),
    };
    if !out.user_ids.windows(2).all(|w| w[0] < w[1]) {
        return Err(CoplError::invalid("unseen user ids must be strictly increasing"));
    }
    for (i, profile) in unseen.users.iter().enumerate() {
        let uid = profile.user_id;
        let user = UnseenUser::new(by_user.remove(&uid).unwrap_or_default());
        let neighbors = khop_positive_users(&graph, &user, cfg.adapt.k)?;
        let (weighted, naive) = if neighbors.is_empty() {
            out.fallback_users.push(uid);
            let e = fallback_embedding(embeddings, cfg.adapt.fallback)?;
            (e.clone(), e)
        } else {
            let (w, _, _) = adapt_from_neighbors(embeddings, &neighbors, &user, cfg.adapt.kappa)?;
            let naive = neighbors
                .iter()
                .fold(Array1::zeros(d), |acc, &u| acc + embeddings.user_embeddings.row(u))
                / neighbors.len() as f64;
            (w, naive)
        };
        out.weighted.row_mut(i).assign(&weighted);
        out.naive_average.row_mut(i).assign(&naive);
        out.user_opt
            .row_mut(i)
            .assign(&user_opt(embeddings, &user, cfg.adapt.opt_steps, cfg.adapt.opt_lr)?);
        out.random
            .row_mut(i)
            .assign(&random_embedding(&std, indexed_seed(random_seed, uid as u64)));
    }
    if !out.fallback_users.is_empty() {
        log::warn!("{} unseen users had no positive neighbors", out.fallback_users.len());
    }
    Ok(out)
}

/// Computes the report from trained artifacts; trains baselines if selected.
pub fn evaluate(
    cfg: &ExperimentConfig,
    dataset: &PreferenceDataset,
    unseen: &UnseenCohort,
    embeddings: &EmbeddingTable,
    reward: &MoleRewardModel,
    adapted: &AdaptedEmbeddings,
) -> Result<MetricsReport> {
    let features = feature_matrix(&dataset.responses);
    let tags = item_tags(dataset)?;
    let seen_group = |u: usize| dataset.users.get(u).and_then(|p| p.group_id);
    let unseen_group = |u: usize| unseen.users.iter().find(|p| p.user_id == u).and_then(|p| p.group_id);
    let user_margin = |model: &MoleRewardModel, e: ArrayView1<f64>, p: &PreferencePair| {
        model.pair_margin(e, features.row(p.preferred), features.row(p.rejected))
    };

    let copl = score_annotations(&dataset.survey, &dataset.test_annotations, seen_group, |p| {
        Ok(user_margin(reward, embeddings.user_embeddings.row(p.user), p)? > 0.0)
    })?;
    let unseen_scores = |strategy: &Array2<f64>| -> Result<Option<f64>> {
        if unseen.test_annotations.is_empty() {
            return Ok(None);
        }
        let b = score_annotations(&dataset.survey, &unseen.test_annotations, unseen_group, |p| {
            let row = adapted.row_of(p.user)?;
            Ok(user_margin(reward, strategy.row(row), p)? > 0.0)
        })?;
        b.accuracy().map(Some)
    };
    let (common, controversial) = match &tags {
        Some(t) => breakdown_common_controversial(&copl.outcomes, t),
        None => (None, None),
    };

    let purity = if dataset.has_groups() {
        let users: Vec<usize> = (0..dataset.users.len()).collect();
        let alloc = expert_allocation(reward, &embeddings.user_embeddings, &users)?;
        Some(
            alloc
                .iter()
                .map(|a| allocation_purity(a, seen_group).unwrap_or(0.0))
                .collect(),
        )
    } else {
        None
    };

    let baseline_scores = |margin: &dyn Fn(&PreferencePair) -> Result<f64>| -> Result<ModelScores> {
        let seen = score_annotations(&dataset.survey, &dataset.test_annotations, seen_group, |p| {
            Ok(margin(p)? > 0.0)
        })?;
        let unseen_acc = if unseen.test_annotations.is_empty() {
            None
        } else {
            let b = score_annotations(&dataset.survey, &unseen.test_annotations, unseen_group, |p| {
                Ok(margin(p)? > 0.0)
            })?;
            Some(b.accuracy()?)
        };
        let (common, controversial) = match &tags {
            Some(t) => breakdown_common_controversial(&seen.outcomes, t),
            None => (None, None),
        };
        Ok(ModelScores {
            seen_accuracy: seen.accuracy()?,
            unseen_accuracy: unseen_acc,
            common_accuracy: common,
            controversial_accuracy: controversial,
            groupwise_accuracy: seen.groupwise(),
        })
    };

    let (uniform, group_oracle) = if cfg.metrics.baselines {
        let mole = cfg.mole_config("uniform-init");
        let train = cfg.reward_config("uniform-train");
        let uni = uniform_baseline(dataset, &mole, &train)?;
        let uni_scores = baseline_scores(&|p| uni.margin(features.row(p.preferred), features.row(p.rejected)))?;
        let oracle_scores = match group_oracle_baseline(dataset, &mole, &train) {
            Ok(oracle) => {
                let group_of = |u: usize| seen_group(u).or_else(|| unseen_group(u));
                Some(baseline_scores(&|p| {
                    let g = group_of(p.user).ok_or(CoplError::MissingGroups)?;
                    let m = oracle
                        .models
                        .get(&g)
                        .ok_or_else(|| CoplError::invalid(format!("no oracle model for group {g}")))?;
                    m.margin(features.row(p.preferred), features.row(p.rejected))
                })?)
            }
            Err(CoplError::MissingGroups) => None,
            Err(e) => return Err(e),
        };
        (Some(uni_scores), oracle_scores)
    } else {
        (None, None)
    };

    let unseen_accuracy = unseen_scores(&adapted.weighted)?;
    let adaptation = match (cfg.metrics.adaptation_ablation, unseen_accuracy) {
        (true, Some(weighted)) => Some(AdaptationScores {
            weighted,
            naive_average: unseen_scores(&adapted.naive_average)?.unwrap_or(0.0),
            user_opt: unseen_scores(&adapted.user_opt)?.unwrap_or(0.0),
            random: unseen_scores(&adapted.random)?.unwrap_or(0.0),
        }),
        _ => None,
    };

    Ok(MetricsReport {
        seen_accuracy: copl.accuracy()?,
        unseen_accuracy,
        common_accuracy: common,
        controversial_accuracy: controversial,
        groupwise_accuracy: copl.groupwise(),
        gnn_test_accuracy: eval_gnn_testacc(embeddings, &dataset.test_pairs()?)?,
        expert_allocation_purity: purity,
        unseen_fallbacks: adapted.fallback_users.len(),
        uniform,
        group_oracle,
        adaptation,
        runtime_seconds: 0.0,
    })
}

/// Writes the embedding and expert-allocation CSVs.
pub fn write_exports(
    dir: &Path,
    dataset: &PreferenceDataset,
    unseen: &UnseenCohort,
    embeddings: &EmbeddingTable,
    reward: &MoleRewardModel,
    adapted: Option<&AdaptedEmbeddings>,
) -> Result<()> {
    let extra = adapted.map(|a| (&a.weighted, unseen.users.as_slice()));
    write_embeddings_csv(
        BufWriter::new(File::create(dir.join(artifact::EMBEDDINGS_CSV))?),
        embeddings,
        &dataset.users,
        extra,
    )?;
    let users: Vec<usize> = (0..dataset.users.len()).collect();
    let alloc = expert_allocation(reward, &embeddings.user_embeddings, &users)?;
    write_allocation_csv(
        BufWriter::new(File::create(dir.join(artifact::ALLOCATION_CSV))?),
        &alloc,
        |u| dataset.users.get(u).and_then(|p| p.group_id),
    )
}

fn save<T: Serialize>(dir: Option<&Path>, name: &str, value: &T) -> Result<()> {
    if let Some(dir) = dir {
        json::write_file(dir.join(name), value)?;
    }
    Ok(())
}

/// Full pipeline. With an output directory, each artifact is written as soon
/// as its stage finishes, so a failing stage leaves earlier ones on disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    cfg.validate()?;
    let dir = cfg.output_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }

    let (dataset, unseen) = generate_stage(cfg).map_err(|e| e.in_stage("generate"))?;
    save(dir, artifact::DATASET, &dataset)?;
    save(dir, artifact::UNSEEN, &unseen)?;

    let (gcf_model, embeddings) = gcf_stage(cfg, &dataset).map_err(|e| e.in_stage("train-gcf"))?;
    save(dir, artifact::GCF_MODEL, &gcf_model)?;
    save(dir, artifact::EMBEDDINGS, &embeddings)?;

    let reward = reward_stage(cfg, &dataset, &embeddings).map_err(|e| e.in_stage("train-reward"))?;
    save(dir, artifact::REWARD_MODEL, &reward)?;

    let adapted = adapt_stage(cfg, &dataset, &unseen, &embeddings).map_err(|e| e.in_stage("adapt"))?;
    save(dir, artifact::ADAPTED, &adapted)?;

    let mut report =
        evaluate(cfg, &dataset, &unseen, &embeddings, &reward, &adapted).map_err(|e| e.in_stage("eval"))?;
    save(dir, artifact::REPORT, &report)?;
    if let Some(d) = dir {
        write_exports(d, &dataset, &unseen, &embeddings, &reward, Some(&adapted)).map_err(|e| e.in_stage("export"))?;
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One run of an imbalance sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratios: Vec<f64>,
    pub report: MetricsReport,
}

/// Subdirectory name for a ratio, e.g. `ratio_1_9`.
pub fn ratio_label(ratios: &[f64]) -> String {
    let parts: Vec<String> = ratios.iter().map(|r| r.to_string().replace('.', "p")).collect();
    format!("ratio_{}", parts.join("_"))
}

/// The config for one sweep point: same master seed, different group sizes.
pub fn sweep_config(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<ExperimentConfig> {
    if !matches!(cfg.generator.profile, ProfileSpec::Groups { ref ratios } if ratios.len() == 2) {
        return Err(CoplError::invalid("imbalance sweep needs a 2-group config"));
    }
    if ratios.len() != 2 {
        return Err(CoplError::invalid(format!(
            "sweep ratio needs 2 parts, got {}",
            ratios.len()
        )));
    }
    let mut point = cfg.clone();
    point.generator.profile = ProfileSpec::Groups {
        ratios: ratios.to_vec(),
    };
    point.output_dir = cfg.output_dir.as_ref().map(|d| d.join(ratio_label(ratios)));
    point.validate()?;
    Ok(point)
}

/// Reruns the pipeline once per group-size ratio.
pub fn imbalance_sweep(cfg: &ExperimentConfig, ratios: &[Vec<f64>]) -> Result<Vec<SweepPoint>> {
    let configs = ratios
        .iter()
        .map(|r| sweep_config(cfg, r))
        .collect::<Result<Vec<_>>>()?;
    configs
        .into_iter()
        .zip(ratios)
        .map(|(c, r)| {
            log::info!("sweep ratio {r:?}");
            Ok(SweepPoint {
                ratios: r.clone(),
                report: run_experiment(&c)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_is_exact() {
        let mut t = Tally::default();
        assert_eq!(t.fraction(), None);
        for i in 0..10 {
            t.record(i % 3 == 0);
        }
        assert_eq!(t.fraction(), Some(0.4));
    }

    #[test]
    fn breakdown_examples() {
        let tags = BTreeMap::from([(0, PairTag::Common), (1, PairTag::Controversial), (2, PairTag::Common)]);
        let perfect = [(0, true), (1, true), (2, true)];
        assert_eq!(breakdown_common_controversial(&perfect, &tags), (Some(1.0), Some(1.0)));
        let common_only = [(0, true), (2, false)];
        assert_eq!(breakdown_common_controversial(&common_only, &tags), (Some(0.5), None));
    }

    #[test]
    fn gnn_accuracy_examples() {
        use ndarray::array;
        let emb = EmbeddingTable {
            user_embeddings: array![[1.0, 0.0], [0.0, 1.0]],
            response_embeddings: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let pairs = [
            PreferencePair {
                user: 0,
                preferred: 0,
                rejected: 1,
            },
            PreferencePair {
                user: 1,
                preferred: 1,
                rejected: 0,
            },
        ];
        assert_eq!(eval_gnn_testacc(&emb, &pairs).unwrap(), 1.0);
        assert!(eval_gnn_testacc(&emb, &[]).is_err());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = ExperimentConfig::smoke();
        cfg.validate().unwrap();
        let text = json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad: std::result::Result<ExperimentConfig, _> = serde_json::from_str(r#"{"verison": 1}"#);
        assert!(bad.is_err());
        let mut wrong = cfg.clone();
        wrong.version = 2;
        assert!(wrong.validate().is_err());
        let mut odd = cfg;
        odd.adapt.k = 3;
        assert!(odd.validate().is_err());
    }

    #[test]
    fn ratio_labels() {
        assert_eq!(ratio_label(&[1.0, 9.0]), "ratio_1_9");
        assert_eq!(ratio_label(&[0.5, 2.0]), "ratio_0p5_2");
    }

    #[test]
    fn sweep_rejects_non_binary_ratios() {
        let cfg = ExperimentConfig::smoke();
        assert!(sweep_config(&cfg, &[1.0, 1.0, 1.0]).is_err());
        let mut three = cfg;
        three.generator.profile = ProfileSpec::Groups {
            ratios: vec![1.0, 1.0, 1.0],
        };
        assert!(sweep_config(&three, &[1.0, 9.0]).is_err());
    }
}
