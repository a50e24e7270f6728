//! Acceptance gate. Runs every criterion in sequence, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{central_diff, dense_propagate, max_abs_diff, random_instance, random_model, rel_err, top_two_gap};
use copl_core::adapt::{adapt_from_neighbors, UnseenUser};
use copl_core::gcf::{gcf_loss, gcf_loss_and_grad, propagate, GcfParams};
use copl_core::harness::{artifact, eval_gnn_testacc, gcf_stage, generate_stage};
use copl_core::mole::{top1_weights, MoleConfig, MoleRewardModel};
use copl_core::rng::rng_from;
use copl_core::{run_experiment, EmbeddingTable, ExperimentConfig, MetricsReport, ProfileSpec, Regime};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: f64, detail: String) -> Verdict {
    let secs = elapsed.as_secs_f64();
    check(secs < limit_secs, format!("{detail}, {secs:.1}s (limit {limit_secs}s)"))
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let graphs = 150;
    for seed in 0..graphs {
        let inst = random_instance(seed, 8, 8, 16, 3, 4);
        let sparse = propagate(&inst.graph, &inst.params, &inst.hyper).map_err(|e| e.to_string())?;
        let (du, dr) = dense_propagate(
            inst.num_users,
            inst.num_responses,
            &inst.pairs,
            &inst.params,
            &inst.hyper,
        );
        worst = worst
            .max(max_abs_diff(&sparse.user_embeddings, &du))
            .max(max_abs_diff(&sparse.response_embeddings, &dr));
    }
    let detail = format!("{graphs} graphs, max |sparse - dense| = {worst:.2e}");
    check(worst <= 1e-10, detail.clone())?;
    within(start.elapsed(), 10.0, detail)
}

fn gcf_gradient_error(seed: u64) -> f64 {
    let inst = random_instance(seed, 5, 6, 6, 2, 3);
    let lambda = 0.05;
    let (_, grads) = gcf_loss_and_grad(&inst.graph, &inst.params, &inst.hyper, &inst.pairs, lambda, 1.0).unwrap();
    let objective = |p: &GcfParams| {
        let emb = propagate(&inst.graph, p, &inst.hyper).unwrap();
        gcf_loss(&emb, p, &inst.hyper, &inst.pairs, lambda).unwrap()
    };
    let with_t = inst.hyper.use_transform;
    let analytic = grads.tensors(with_t);
    let mut worst = 0.0f64;
    for (t, g) in analytic.iter().enumerate() {
        for (idx, &a) in g.iter().enumerate() {
            let mut probe = inst.params.clone();
            let x0 = probe.tensors(with_t)[t].as_slice().unwrap()[idx];
            let numeric = central_diff(
                1e-5,
                |x| {
                    probe.tensors_mut(with_t)[t].as_slice_mut().unwrap()[idx] = x;
                    objective(&probe)
                },
                x0,
            );
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

fn mole_gradient_error(seed: u64) -> Option<f64> {
    let (model, e_u, a, b) = random_model(seed);
    if top_two_gap(&model, &e_u) < 1e-3 {
        return None;
    }
    let routing = model.allocation(e_u.view()).unwrap();
    let (_, grads) = model.pair_loss_and_grad(e_u.view(), a.view(), b.view()).unwrap();
    let mut worst = 0.0f64;
    for (t, g) in grads.trainable().iter().enumerate() {
        for (idx, &an) in g.iter().enumerate() {
            let mut probe = model.clone();
            let x0 = probe.trainable()[t].as_slice().unwrap()[idx];
            let mut rerouted = false;
            let numeric = central_diff(
                1e-5,
                |x| {
                    probe.trainable_mut()[t].as_slice_mut().unwrap()[idx] = x;
                    rerouted |= probe.allocation(e_u.view()).unwrap() != routing;
                    probe.pair_loss(e_u.view(), a.view(), b.view()).unwrap()
                },
                x0,
            );
            if rerouted {
                return None;
            }
            worst = worst.max(rel_err(an, numeric));
        }
    }
    Some(worst)
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let instances = 20;
    let gcf_worst = (0..instances).map(|s| gcf_gradient_error(2000 + s)).fold(0.0, f64::max);
    let mut mole_worst = 0.0f64;
    let mut checked = 0;
    let mut seed = 3000;
    while checked < instances {
        if let Some(e) = mole_gradient_error(seed) {
            mole_worst = mole_worst.max(e);
            checked += 1;
        }
        seed += 1;
    }
    let detail = format!("{instances} instances each, max rel err gcf {gcf_worst:.2e}, mole {mole_worst:.2e}");
    check(gcf_worst < 1e-4 && mole_worst < 1e-4, detail.clone())?;
    within(start.elapsed(), 30.0, detail)
}

/// The 2-group controversial-only run shared by criteria 3, 4 and 6.
struct SeparationRun {
    report: MetricsReport,
    elapsed: Duration,
}

fn separation_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.generator.num_users = 200;
    cfg.generator.num_items = 500;
    cfg.generator.controversial_only = true;
    cfg.generator.regime = Regime::All(8);
    cfg.generator.noise = 0.0;
    cfg.generator.profile = ProfileSpec::Groups { ratios: vec![1.0, 1.0] };
    cfg.generator.unseen.num_users = 100;
    cfg.generator.unseen.regime = Regime::All(8);
    cfg.gcf.dim = 32;
    cfg.gcf.layers = 4;
    cfg.adapt.k = 2;
    cfg.adapt.kappa = 0.07;
    cfg
}

fn separation_run() -> &'static SeparationRun {
    static RUN: OnceLock<SeparationRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let report = run_experiment(&separation_config()).expect("separation pipeline");
        SeparationRun {
            report,
            elapsed: start.elapsed(),
        }
    })
}

fn separation() -> Verdict {
    let run = separation_run();
    let gnn = run.report.gnn_test_accuracy;
    let uniform = run
        .report
        .uniform
        .as_ref()
        .ok_or("uniform baseline missing")?
        .seen_accuracy;
    let detail = format!("gnn test acc {gnn:.4}, uniform acc {uniform:.4}");
    check(gnn >= 0.85 && (0.45..=0.55).contains(&uniform), detail.clone())?;
    within(run.elapsed, 300.0, detail)
}

fn unseen_parity() -> Verdict {
    let r = &separation_run().report;
    let unseen = r.unseen_accuracy.ok_or("unseen accuracy missing")?;
    let gap = pts((r.seen_accuracy - unseen).abs());
    check(
        gap <= 3.0,
        format!("seen {:.4}, unseen {unseen:.4}, gap {gap:.2} pts", r.seen_accuracy),
    )
}

fn four_group_config(seed: u64) -> ExperimentConfig {
    let mut cfg = separation_config();
    cfg.master_seed = seed;
    cfg.generator.num_dims = 4;
    cfg.generator.profile = ProfileSpec::Groups { ratios: vec![1.0; 4] };
    cfg.generator.regime = Regime::All(16);
    cfg.metrics.baselines = false;
    cfg
}

fn adaptation_ablation() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let report = run_experiment(&four_group_config(seed)).map_err(|e| e.to_string())?;
        let a = report.adaptation.ok_or("adaptation scores missing")?;
        ok &= a.weighted >= a.naive_average && a.naive_average >= a.random;
        lines.push(format!(
            "seed {seed}: weighted {:.4} naive {:.4} random {:.4}",
            a.weighted, a.naive_average, a.random
        ));
    }
    check(ok, lines.join("; "))
}

fn negative_edge_ablation() -> Verdict {
    let full = separation_run().report.gnn_test_accuracy;
    let mut cfg = separation_config();
    cfg.gcf.use_negative_edges = false;
    let (dataset, _) = generate_stage(&cfg).map_err(|e| e.to_string())?;
    let (_, emb) = gcf_stage(&cfg, &dataset).map_err(|e| e.to_string())?;
    let test = dataset.test_pairs().map_err(|e| e.to_string())?;
    let ablated = eval_gnn_testacc(&emb, &test).map_err(|e| e.to_string())?;
    let drop = pts(full - ablated);
    check(
        drop >= 3.0,
        format!("full {full:.4}, without negative edges {ablated:.4}, drop {drop:.2} pts"),
    )
}

fn gating_invariants() -> Verdict {
    let start = Instant::now();
    let mut rng = rng_from(77);
    let inputs = 1500;
    for case in 0..inputs {
        let m = rng.gen_range(1..=8);
        let tau = rng.gen_range(0.05..5.0);
        let mut logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-6.0..6.0)).collect();
        if m > 1 && case % 4 == 0 {
            // force a tie at the maximum
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let i = rng.gen_range(0..m);
            let j = (i + 1 + rng.gen_range(0..m - 1)) % m;
            logits[i] = max + 1.0;
            logits[j] = max + 1.0;
        }
        let w = top1_weights(&logits, tau);
        let routed: Vec<usize> = (0..m).filter(|&k| w[k] != 0.0).collect();
        if routed.len() != 1 {
            return Err(format!("case {case}: {} experts routed", routed.len()));
        }
        let k = routed[0];
        if !(w[k] > 0.0 && w[k] <= 1.0) {
            return Err(format!("case {case}: weight {} outside (0, 1]", w[k]));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first_max = logits.iter().position(|&z| z == max).unwrap();
        if k != first_max {
            return Err(format!("case {case}: routed {k}, lowest maximal index {first_max}"));
        }
        if m == 1 && w[0] != 1.0 {
            return Err(format!("case {case}: single expert weight {}", w[0]));
        }
        let colder = top1_weights(&logits, tau * 0.5);
        if colder[k] < w[k] - 1e-15 {
            return Err(format!("case {case}: lower temperature shrank weight"));
        }
    }
    // the same checks through trained-shape gates on random user embeddings
    let mut gated = 0;
    for seed in 0..100 {
        let experts = rng.gen_range(1..=6);
        let model = MoleRewardModel::new(
            3,
            4,
            &MoleConfig {
                hidden: 4,
                depth: 2,
                num_experts: experts,
                rank: 2,
                gate_hidden: 8,
                temperature: rng.gen_range(0.2..3.0),
                rng_seed: seed,
            },
        )
        .map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let e = Array1::from_shape_simple_fn(4, || rng.gen_range(-3.0..3.0));
            for layer in &model.layers {
                let w = layer.gate_weights(e.view()).map_err(|e| e.to_string())?;
                let nonzero: Vec<f64> = w.iter().copied().filter(|&x| x != 0.0).collect();
                if nonzero.len() != 1 || !(nonzero[0] > 0.0 && nonzero[0] <= 1.0) {
                    return Err(format!("gate seed {seed}: weights {w:?}"));
                }
                if experts == 1 && nonzero[0] != 1.0 {
                    return Err(format!("gate seed {seed}: single expert weight {}", nonzero[0]));
                }
                gated += 1;
            }
        }
    }
    within(
        start.elapsed(),
        5.0,
        format!("{inputs} logit vectors and {gated} gate evaluations"),
    )
}

fn random_table<R: Rng>(rng: &mut R, users: usize, responses: usize, d: usize) -> EmbeddingTable {
    EmbeddingTable {
        user_embeddings: Array2::from_shape_simple_fn((users, d), || rng.gen_range(-2.0..2.0)),
        response_embeddings: Array2::from_shape_simple_fn((responses, d), || rng.gen_range(-2.0..2.0)),
    }
}

fn adaptation_invariants() -> Verdict {
    let start = Instant::now();
    let mut rng = rng_from(91);
    let toys = 600;
    for toy in 0..toys {
        let users = rng.gen_range(1..=8);
        let responses = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=4);
        let table = random_table(&mut rng, users, responses, d);
        let annotations = (0..rng.gen_range(1..=5))
            .map(|_| (rng.gen_range(0..responses), rng.gen_range(0..responses)))
            .collect();
        let unseen = UnseenUser::new(annotations);
        let kappa = rng.gen_range(0.01..2.0);
        let mut neighbors: Vec<usize> = (0..users).filter(|_| rng.gen_bool(0.6)).collect();
        if neighbors.is_empty() {
            neighbors.push(rng.gen_range(0..users));
        }
        let (e, ids, w) = adapt_from_neighbors(&table, &neighbors, &unseen, kappa).map_err(|e| e.to_string())?;
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || w.iter().any(|&x| x < 0.0) {
            return Err(format!("toy {toy}: weights {w:?}"));
        }
        for k in 0..d {
            let col: Vec<f64> = ids.iter().map(|&u| table.user_embeddings[[u, k]]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let rebuilt: f64 = ids
                .iter()
                .zip(&w)
                .map(|(&u, &wi)| wi * table.user_embeddings[[u, k]])
                .sum();
            if e[k] < lo - 1e-12 || e[k] > hi + 1e-12 || (e[k] - rebuilt).abs() > 1e-12 {
                return Err(format!("toy {toy}: coordinate {k} outside the neighbor hull"));
            }
        }
        let mut shuffled = neighbors.clone();
        shuffled.shuffle(&mut rng);
        let (e2, _, _) = adapt_from_neighbors(&table, &shuffled, &unseen, kappa).map_err(|e| e.to_string())?;
        if e.iter().zip(&e2).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format!("toy {toy}: neighbor order changed the result"));
        }
        let single = neighbors[0];
        let (e1, _, _) = adapt_from_neighbors(&table, &[single], &unseen, kappa).map_err(|e| e.to_string())?;
        if e1 != table.user_embeddings.row(single) {
            return Err(format!("toy {toy}: single neighbor not copied"));
        }
    }
    // a neighbor at margin -50 on every pair is negligible at kappa = 0.07
    let mut worst = 0.0f64;
    for toy in 0..100 {
        let good = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=4);
        let responses = 6;
        let mut table = random_table(&mut rng, good + 1, responses, d);
        // first coordinate: even responses +1, odd -1; other coordinates inert
        for r in 0..responses {
            table.response_embeddings.row_mut(r).fill(0.0);
            table.response_embeddings[[r, 0]] = if r % 2 == 0 { 1.0 } else { -1.0 };
        }
        table.user_embeddings[[good, 0]] = -25.0;
        let pairs = (0..rng.gen_range(1..=4))
            .map(|i| (2 * (i % 3), 2 * (i % 3) + 1))
            .collect();
        let unseen = UnseenUser::new(pairs);
        let base: Vec<usize> = (0..good).collect();
        let with_bad: Vec<usize> = (0..=good).collect();
        let (e0, _, _) = adapt_from_neighbors(&table, &base, &unseen, 0.07).map_err(|e| e.to_string())?;
        let (e1, _, _) = adapt_from_neighbors(&table, &with_bad, &unseen, 0.07).map_err(|e| e.to_string())?;
        let diff = e0.iter().zip(&e1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff >= 1e-8 {
            return Err(format!("toy {toy}: misaligned neighbor moved the result by {diff:.2e}"));
        }
        worst = worst.max(diff);
    }
    within(
        start.elapsed(),
        5.0,
        format!("{toys} toys, misaligned-neighbor shift <= {worst:.1e}"),
    )
}

fn same_bytes(a: &Path, b: &Path, name: &str) -> Result<(), String> {
    let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
    let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
    if x != y {
        return Err(format!("{name} differs between runs"));
    }
    Ok(())
}

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for dir in &dirs {
        let mut cfg = ExperimentConfig::smoke();
        cfg.master_seed = 11;
        cfg.output_dir = Some(dir.path().to_path_buf());
        reports.push(run_experiment(&cfg).map_err(|e| e.to_string())?);
    }
    let files = [
        artifact::DATASET,
        artifact::UNSEEN,
        artifact::GCF_MODEL,
        artifact::EMBEDDINGS,
        artifact::REWARD_MODEL,
        artifact::ADAPTED,
        artifact::REPORT,
        artifact::EMBEDDINGS_CSV,
        artifact::ALLOCATION_CSV,
    ];
    for f in files {
        same_bytes(dirs[0].path(), dirs[1].path(), f)?;
    }
    let mut r0 = reports[0].clone();
    r0.runtime_seconds = reports[1].runtime_seconds;
    check(
        r0 == reports[1],
        format!("{} artifacts byte-identical across two runs", files.len()),
    )
}

fn common_controversial() -> Verdict {
    let mut cfg = separation_config();
    cfg.generator.controversial_only = false;
    cfg.metrics.adaptation_ablation = false;
    let r = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let uni = r.uniform.as_ref().ok_or("uniform baseline missing")?;
    let (Some(cc), Some(uc), Some(cm), Some(um)) = (
        r.controversial_accuracy,
        uni.controversial_accuracy,
        r.common_accuracy,
        uni.common_accuracy,
    ) else {
        return Err("mixed dataset lacks one of the pair types".into());
    };
    let lead = pts(cc - uc);
    let common_gap = pts((cm - um).abs());
    check(
        lead >= 10.0 && common_gap <= 5.0,
        format!(
            "controversial copl {cc:.4} vs uniform {uc:.4} (+{lead:.2} pts); common copl {cm:.4} vs uniform {um:.4} ({common_gap:.2} pts apart)"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient correctness", gradient_correctness),
        ("separation experiment", separation),
        ("unseen-user parity", unseen_parity),
        ("adaptation ablation direction", adaptation_ablation),
        ("negative-edge ablation direction", negative_edge_ablation),
        ("gating invariants", gating_invariants),
        ("adaptation invariants", adaptation_invariants),
        ("determinism", determinism),
        ("common/controversial breakdown", common_controversial),
    ];
    // list mode used by `cargo test -- --list`
    if std::env::args().any(|a| a == "--list") {
        for (i, (name, _)) in criteria.iter().enumerate() {
            println!("criterion {}: {name}: test", i + 1);
        }
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
