//! Preference-data domain model and synthetic dataset generation.
//!
//! A survey is a fixed pool of response pairs. Each response carries a vector
//! of latent attribute scores, and each user scores a response by a weighted
//! sum of those attributes. One-hot weights make a "group" user; Dirichlet
//! weights make a mixed user. Users annotate a random subset of the survey,
//! preferring the response with the higher weighted score.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoplError, Result};
use crate::rng::{indexed_seed, rng_from, stage_seed};

/// Rejection-sampling budget per controversial item.
const MAX_PAIR_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn flipped(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyItem {
    pub item_id: usize,
    pub response_a_id: usize,
    pub response_b_id: usize,
    pub question_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFeatures {
    pub response_id: usize,
    pub attributes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: usize,
    pub weights: Vec<f64>,
    pub group_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub user_id: usize,
    pub item_id: usize,
    pub preferred: Choice,
}

/// A resolved `(preferred ≻ rejected)` response pair for one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub user: usize,
    pub preferred: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    /// One-hot users split by ratio, group g weighting dimension g.
    Groups { ratios: Vec<f64> },
    /// Symmetric Dirichlet mixture weights.
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum Regime {
    /// Exactly `n` annotations per user.
    All(usize),
    /// Uniform on `[1, 2n - 1]`, mean `n`.
    Avg(usize),
}

impl Regime {
    pub fn max_count(self) -> usize {
        match self {
            Regime::All(n) => n,
            Regime::Avg(n) => 2 * n - 1,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Regime::All(0) | Regime::Avg(0) => Err(CoplError::invalid("annotation regime needs n >= 1")),
            _ => Ok(()),
        }
    }

    fn draw<R: Rng>(self, rng: &mut R) -> usize {
        match self {
            Regime::All(n) => n,
            Regime::Avg(n) => rng.gen_range(1..=2 * n - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnseenSpec {
    pub num_users: usize,
    pub regime: Regime,
    pub test_pairs_per_user: usize,
}

impl Default for UnseenSpec {
    fn default() -> Self {
        Self {
            num_users: 100,
            regime: Regime::All(8),
            test_pairs_per_user: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_items: usize,
    pub num_dims: usize,
    pub controversial_only: bool,
    pub num_users: usize,
    pub profile: ProfileSpec,
    pub regime: Regime,
    pub test_pairs_per_user: usize,
    pub noise: f64,
    pub unseen: UnseenSpec,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_items: 500,
            num_dims: 2,
            controversial_only: true,
            num_users: 200,
            profile: ProfileSpec::Groups { ratios: vec![1.0, 1.0] },
            regime: Regime::All(8),
            test_pairs_per_user: 10,
            noise: 0.0,
            unseen: UnseenSpec::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.num_dims == 0 {
            return Err(CoplError::invalid("num_items and num_dims must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(CoplError::invalid(format!("noise {} outside [0, 0.5)", self.noise)));
        }
        self.regime.validate()?;
        self.unseen.regime.validate()?;
        if let ProfileSpec::Groups { ratios } = &self.profile {
            if ratios.len() != self.num_dims {
                return Err(CoplError::invalid(format!(
                    "{} groups requested but num_dims = {}",
                    ratios.len(),
                    self.num_dims
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub survey: Vec<SurveyItem>,
    pub responses: Vec<ResponseFeatures>,
    pub users: Vec<UserProfile>,
    pub annotations: Vec<Annotation>,
    pub test_annotations: Vec<Annotation>,
    pub meta: DatasetMeta,
}

/// Users held out of graph construction, annotated on the same survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenCohort {
    pub users: Vec<UserProfile>,
    pub annotations: Vec<Annotation>,
    pub test_annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairTag {
    Common,
    Controversial,
}

fn is_controversial(a: &[f64], b: &[f64]) -> bool {
    let a_wins = a.iter().zip(b).any(|(x, y)| x > y);
    let b_wins = a.iter().zip(b).any(|(x, y)| x < y);
    a_wins && b_wins
}

fn sample_attributes<R: Rng>(dims: usize, rng: &mut R) -> Vec<f64> {
    (0..dims).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `num_items` response pairs with i.i.d. standard-normal attributes.
///
/// Item `i` owns responses `2i` and `2i + 1`. With `controversial_only`,
/// pairs where one response wins on every dimension are redrawn.
pub fn generate_survey(
    num_items: usize,
    num_dims: usize,
    rng_seed: u64,
    controversial_only: bool,
) -> Result<(Vec<SurveyItem>, Vec<ResponseFeatures>)> {
    if num_items == 0 || num_dims == 0 {
        return Err(CoplError::invalid("survey needs num_items >= 1 and num_dims >= 1"));
    }
    let mut rng = rng_from(rng_seed);
    let mut survey = Vec::with_capacity(num_items);
    let mut responses = Vec::with_capacity(2 * num_items);
    for item_id in 0..num_items {
        let mut attempts = 0;
        let (a, b) = loop {
            let a = sample_attributes(num_dims, &mut rng);
            let b = sample_attributes(num_dims, &mut rng);
            if !controversial_only || is_controversial(&a, &b) {
                break (a, b);
            }
            attempts += 1;
            if attempts >= MAX_PAIR_ATTEMPTS {
                return Err(CoplError::Generation(format!(
                    "no controversial pair found for item {item_id} after {MAX_PAIR_ATTEMPTS} draws (num_dims = {num_dims})"
                )));
            }
        };
        let (ra, rb) = (2 * item_id, 2 * item_id + 1);
        responses.push(ResponseFeatures {
            response_id: ra,
            attributes: a,
        });
        responses.push(ResponseFeatures {
            response_id: rb,
            attributes: b,
        });
        survey.push(SurveyItem {
            item_id,
            response_a_id: ra,
            response_b_id: rb,
            question_id: item_id,
        });
    }
    Ok((survey, responses))
}

/// Splits `total` by `ratios` with largest-remainder rounding.
pub fn apportion(total: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let sum: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || !sum.is_finite() {
        return Err(CoplError::invalid(format!(
            "group ratios must be positive and finite, got {ratios:?}"
        )));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| total as f64 * r / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // largest fractional part first, lower index on ties
    order.sort_by(|&i, &j| {
        let fi = quotas[i] - quotas[i].floor();
        let fj = quotas[j] - quotas[j].floor();
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &g in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[g] += 1;
        remaining -= 1;
    }
    Ok(counts)
}

fn one_hot_group(weights: &[f64]) -> Option<usize> {
    let ones: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = weights.iter().filter(|&&w| w == 0.0).count();
    (ones.len() == 1 && zeros == weights.len() - 1).then(|| ones[0])
}

/// Draws user profiles. Ids start at `first_id`.
pub fn generate_users_from(
    first_id: usize,
    num_users: usize,
    profile_spec: &ProfileSpec,
    num_dims: usize,
    rng_seed: u64,
) -> Result<Vec<UserProfile>> {
    match profile_spec {
        ProfileSpec::Groups { ratios } => {
            if ratios.len() != num_dims {
                return Err(CoplError::invalid(format!(
                    "{} groups requested but num_dims = {num_dims}",
                    ratios.len()
                )));
            }
            let counts = apportion(num_users, ratios)?;
            let mut users = Vec::with_capacity(num_users);
            for (group, &count) in counts.iter().enumerate() {
                for _ in 0..count {
                    let mut weights = vec![0.0; num_dims];
                    weights[group] = 1.0;
                    users.push(UserProfile {
                        user_id: first_id + users.len(),
                        weights,
                        group_id: Some(group),
                    });
                }
            }
            Ok(users)
        }
        ProfileSpec::Dirichlet { alpha } => {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(CoplError::invalid(format!("dirichlet alpha must be > 0, got {alpha}")));
            }
            let gamma = Gamma::new(*alpha, 1.0).map_err(|e| CoplError::invalid(e.to_string()))?;
            (0..num_users)
                .map(|i| {
                    let user_id = first_id + i;
                    let mut rng = rng_from(indexed_seed(rng_seed, user_id as u64));
                    let weights = loop {
                        let draws: Vec<f64> = (0..num_dims).map(|_| gamma.sample(&mut rng)).collect();
                        let total: f64 = draws.iter().sum();
                        if total > 0.0 && total.is_finite() {
                            break draws.into_iter().map(|g| g / total).collect::<Vec<_>>();
                        }
                    };
                    Ok(UserProfile {
                        user_id,
                        group_id: one_hot_group(&weights),
                        weights,
                    })
                })
                .collect()
        }
    }
}

pub fn generate_users(
    num_users: usize,
    profile_spec: &ProfileSpec,
    num_dims: usize,
    rng_seed: u64,
) -> Result<Vec<UserProfile>> {
    generate_users_from(0, num_users, profile_spec, num_dims, rng_seed)
}

fn weighted_score(weights: &[f64], attributes: &[f64]) -> f64 {
    weights.iter().zip(attributes).map(|(w, x)| w * x).sum()
}

/// Label a user would give without noise. Ties go to A.
pub fn noise_free_choice(weights: &[f64], a: &ResponseFeatures, b: &ResponseFeatures) -> Choice {
    if weighted_score(weights, &a.attributes) >= weighted_score(weights, &b.attributes) {
        Choice::A
    } else {
        Choice::B
    }
}

/// One user's label on one item; flips with probability `noise`.
///
/// `responses` is indexed by response id. No randomness is consumed when
/// `noise == 0`.
pub fn annotate<R: Rng>(
    profile: &UserProfile,
    item: &SurveyItem,
    responses: &[ResponseFeatures],
    noise: f64,
    rng: &mut R,
) -> Annotation {
    let a = &responses[item.response_a_id];
    let b = &responses[item.response_b_id];
    let mut preferred = noise_free_choice(&profile.weights, a, b);
    if noise > 0.0 && rng.gen_bool(noise) {
        preferred = preferred.flipped();
    }
    Annotation {
        user_id: profile.user_id,
        item_id: item.item_id,
        preferred,
    }
}

/// Samples each user's training items (per `regime`) plus `test_per_user`
/// held-out items, all without replacement, so the two sets never overlap.
pub fn sample_train_test(
    users: &[UserProfile],
    survey: &[SurveyItem],
    responses: &[ResponseFeatures],
    regime: Regime,
    test_per_user: usize,
    noise: f64,
    rng_seed: u64,
) -> Result<(Vec<Annotation>, Vec<Annotation>)> {
    regime.validate()?;
    if !(0.0..0.5).contains(&noise) {
        return Err(CoplError::invalid(format!("noise {noise} outside [0, 0.5)")));
    }
    let needed = regime.max_count() + test_per_user;
    if survey.len() < needed {
        return Err(CoplError::invalid(format!(
            "survey has {} items but {regime:?} with {test_per_user} test pairs needs {needed}",
            survey.len()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for user in users {
        let mut rng = rng_from(indexed_seed(rng_seed, user.user_id as u64));
        let count = regime.draw(&mut rng);
        let picks = index::sample(&mut rng, survey.len(), count + test_per_user).into_vec();
        for (k, &item_idx) in picks.iter().enumerate() {
            let ann = annotate(user, &survey[item_idx], responses, noise, &mut rng);
            if k < count {
                train.push(ann);
            } else {
                test.push(ann);
            }
        }
    }
    Ok((train, test))
}

pub fn sample_annotations(
    users: &[UserProfile],
    survey: &[SurveyItem],
    responses: &[ResponseFeatures],
    regime: Regime,
    noise: f64,
    rng_seed: u64,
) -> Result<Vec<Annotation>> {
    sample_train_test(users, survey, responses, regime, 0, noise, rng_seed).map(|(train, _)| train)
}

/// One representative one-hot profile per distinct group, ordered by group id.
pub fn group_representatives(users: &[UserProfile]) -> Vec<UserProfile> {
    let mut seen = BTreeMap::new();
    for u in users {
        if let Some(g) = u.group_id {
            seen.entry(g).or_insert_with(|| u.clone());
        }
    }
    seen.into_values().collect()
}

/// Tags each item common (all groups agree, noise-free) or controversial.
pub fn tag_pairs(
    survey: &[SurveyItem],
    responses: &[ResponseFeatures],
    group_profiles: &[UserProfile],
) -> Result<BTreeMap<usize, PairTag>> {
    if group_profiles.len() < 2 {
        return Err(CoplError::invalid("tagging pairs needs at least 2 group profiles"));
    }
    Ok(survey
        .iter()
        .map(|item| {
            let a = &responses[item.response_a_id];
            let b = &responses[item.response_b_id];
            let first = noise_free_choice(&group_profiles[0].weights, a, b);
            let agree = group_profiles[1..]
                .iter()
                .all(|p| noise_free_choice(&p.weights, a, b) == first);
            let tag = if agree { PairTag::Common } else { PairTag::Controversial };
            (item.item_id, tag)
        })
        .collect())
}

impl PreferenceDataset {
    pub fn num_dims(&self) -> usize {
        self.responses.first().map_or(0, |r| r.attributes.len())
    }

    pub fn has_groups(&self) -> bool {
        !self.users.is_empty() && self.users.iter().all(|u| u.group_id.is_some())
    }

    pub fn num_groups(&self) -> usize {
        self.users
            .iter()
            .filter_map(|u| u.group_id)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Resolves annotations into `(preferred, rejected)` response pairs.
    pub fn pairs(&self, annotations: &[Annotation]) -> Result<Vec<PreferencePair>> {
        annotations.iter().map(|a| resolve_pair(&self.survey, a)).collect()
    }

    pub fn train_pairs(&self) -> Result<Vec<PreferencePair>> {
        self.pairs(&self.annotations)
    }

    pub fn test_pairs(&self) -> Result<Vec<PreferencePair>> {
        self.pairs(&self.test_annotations)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.num_dims();
        for (i, r) in self.responses.iter().enumerate() {
            if r.response_id != i {
                return Err(CoplError::invalid(format!(
                    "response at position {i} has id {}",
                    r.response_id
                )));
            }
            if r.attributes.len() != dims || dims == 0 {
                return Err(CoplError::DimensionMismatch(format!(
                    "response {i} has {} attributes, expected {dims}",
                    r.attributes.len()
                )));
            }
            if r.attributes.iter().any(|x| !x.is_finite()) {
                return Err(CoplError::invalid(format!("response {i} has non-finite attributes")));
            }
        }
        for (i, item) in self.survey.iter().enumerate() {
            if item.item_id != i {
                return Err(CoplError::invalid(format!(
                    "survey item at position {i} has id {}",
                    item.item_id
                )));
            }
            if item.response_a_id == item.response_b_id {
                return Err(CoplError::invalid(format!("item {i} compares a response with itself")));
            }
            for r in [item.response_a_id, item.response_b_id] {
                if r >= self.responses.len() {
                    return Err(CoplError::IndexOutOfRange {
                        what: "response",
                        index: r,
                        len: self.responses.len(),
                    });
                }
            }
        }
        for (i, u) in self.users.iter().enumerate() {
            if u.user_id != i {
                return Err(CoplError::invalid(format!("user at position {i} has id {}", u.user_id)));
            }
            validate_profile(u, dims)?;
        }
        let mut train_keys = HashSet::new();
        for a in &self.annotations {
            self.check_annotation(a)?;
            if !train_keys.insert((a.user_id, a.item_id)) {
                return Err(CoplError::invalid(format!(
                    "duplicate annotation for user {} item {}",
                    a.user_id, a.item_id
                )));
            }
        }
        let mut test_keys = HashSet::new();
        for a in &self.test_annotations {
            self.check_annotation(a)?;
            let key = (a.user_id, a.item_id);
            if train_keys.contains(&key) || !test_keys.insert(key) {
                return Err(CoplError::invalid(format!(
                    "test annotation for user {} item {} overlaps training or repeats",
                    a.user_id, a.item_id
                )));
            }
        }
        Ok(())
    }

    fn check_annotation(&self, a: &Annotation) -> Result<()> {
        if a.user_id >= self.users.len() {
            return Err(CoplError::IndexOutOfRange {
                what: "user",
                index: a.user_id,
                len: self.users.len(),
            });
        }
        if a.item_id >= self.survey.len() {
            return Err(CoplError::IndexOutOfRange {
                what: "item",
                index: a.item_id,
                len: self.survey.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn validate_profile(u: &UserProfile, dims: usize) -> Result<()> {
    if u.weights.len() != dims {
        return Err(CoplError::DimensionMismatch(format!(
            "user {} has {} weights, expected {dims}",
            u.user_id,
            u.weights.len()
        )));
    }
    let sum: f64 = u.weights.iter().sum();
    if u.weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CoplError::invalid(format!(
            "user {} weights are not on the simplex",
            u.user_id
        )));
    }
    if one_hot_group(&u.weights) != u.group_id {
        return Err(CoplError::invalid(format!(
            "user {} group label disagrees with its weights",
            u.user_id
        )));
    }
    Ok(())
}

pub fn resolve_pair(survey: &[SurveyItem], a: &Annotation) -> Result<PreferencePair> {
    let item = survey.get(a.item_id).ok_or(CoplError::IndexOutOfRange {
        what: "item",
        index: a.item_id,
        len: survey.len(),
    })?;
    let (preferred, rejected) = match a.preferred {
        Choice::A => (item.response_a_id, item.response_b_id),
        Choice::B => (item.response_b_id, item.response_a_id),
    };
    Ok(PreferencePair {
        user: a.user_id,
        preferred,
        rejected,
    })
}

/// Full dataset for `cfg` under `seed`. Each part draws from its own stage stream.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<PreferenceDataset> {
    cfg.validate()?;
    let (survey, responses) = generate_survey(
        cfg.num_items,
        cfg.num_dims,
        stage_seed(seed, "survey"),
        cfg.controversial_only,
    )?;
    let users = generate_users(cfg.num_users, &cfg.profile, cfg.num_dims, stage_seed(seed, "users"))?;
    let (annotations, test_annotations) = sample_train_test(
        &users,
        &survey,
        &responses,
        cfg.regime,
        cfg.test_pairs_per_user,
        cfg.noise,
        stage_seed(seed, "annotations"),
    )?;
    let dataset = PreferenceDataset {
        survey,
        responses,
        users,
        annotations,
        test_annotations,
        meta: DatasetMeta {
            generator: cfg.clone(),
            seed,
        },
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Unseen users for `dataset`: same preference family (groups split evenly),
/// ids continuing after the seen users.
pub fn generate_unseen(dataset: &PreferenceDataset, spec: &UnseenSpec, seed: u64) -> Result<UnseenCohort> {
    let cfg = &dataset.meta.generator;
    let profile = match &cfg.profile {
        ProfileSpec::Groups { ratios } => ProfileSpec::Groups {
            ratios: vec![1.0; ratios.len()],
        },
        other => other.clone(),
    };
    let users = generate_users_from(
        dataset.users.len(),
        spec.num_users,
        &profile,
        cfg.num_dims,
        stage_seed(seed, "unseen-users"),
    )?;
    let (annotations, test_annotations) = sample_train_test(
        &users,
        &dataset.survey,
        &dataset.responses,
        spec.regime,
        spec.test_pairs_per_user,
        cfg.noise,
        stage_seed(seed, "unseen-annotations"),
    )?;
    Ok(UnseenCohort {
        users,
        annotations,
        test_annotations,
    })
}

impl UnseenCohort {
    /// Annotations of one unseen user, resolved to response pairs.
    pub fn pairs_for(&self, survey: &[SurveyItem], user_id: usize, test: bool) -> Result<Vec<PreferencePair>> {
        let source = if test {
            &self.test_annotations
        } else {
            &self.annotations
        };
        source
            .iter()
            .filter(|a| a.user_id == user_id)
            .map(|a| resolve_pair(survey, a))
            .collect()
    }
}
