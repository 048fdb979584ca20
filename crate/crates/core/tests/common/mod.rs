//! Shared oracles and checks for the integration tests and the acceptance
//! suite. Every check returns `Err(description)` on the first violation.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foster_core::baselines::weight_align;
use foster_core::boosting::{train_boosting, BoostingConfig};
use foster_core::compression::{train_compression, CompressionConfig, MixupConfig};
use foster_core::data::{gaussian_blobs, BlobsConfig, Dataset};
use foster_core::losses::{
    balanced_targets, bkd_weights, cross_entropy, loss_bkd, loss_fe, loss_kd, loss_la, softmax_rows, GammaPair,
};
use foster_core::model::{expand, BranchInit, CompositeModel, OInitStrategy, SingleModel};
use foster_core::nn::BackboneConfig;
use foster_core::task_stream::{
    build_class_order, build_stream, herding_select, ExemplarMemory, MemoryPolicy, Protocol, SelectionStrategy,
    SessionData, TaskStream,
};
use foster_core::train::TrainConfig;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

// ---------------------------------------------------------------- oracles

/// Greedy herding written from the definition: at every step the mean of
/// each candidate subset is recomputed from scratch.
pub fn herding_oracle(v: ArrayView2<'_, f64>, m: usize) -> Vec<usize> {
    let n = v.nrows();
    let d = v.ncols();
    let mu: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| v[[i, j]]).sum::<f64>() / n as f64)
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let mut best: Option<(f64, usize)> = None;
        for cand in (0..n).filter(|i| !chosen.contains(i)) {
            let mut subset = chosen.clone();
            subset.push(cand);
            let k = subset.len() as f64;
            let dist: f64 = (0..d)
                .map(|j| {
                    let mean = subset.iter().map(|&i| v[[i, j]]).sum::<f64>() / k;
                    (mu[j] - mean).powi(2)
                })
                .sum();
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, cand));
            }
        }
        chosen.push(best.expect("candidate").1);
    }
    chosen
}

/// Composite logits computed as one dense product `[Φ_old ; φ]ᵀ W`, plus the
/// AZB bias on the new-class columns.
pub fn dense_logits_oracle(model: &CompositeModel, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let phi_old = model.old_branch.forward(x).unwrap();
    let phi_new = model.new_branch.forward(x).unwrap();
    let feats = ndarray::concatenate(Axis(1), &[phi_old.view(), phi_new.view()]).unwrap();
    let mut z = feats.dot(&model.dense_classifier());
    if model.strategy == OInitStrategy::Azb {
        let mut lower = z.slice_mut(s![.., model.num_old..]);
        lower += &model.blocks.bias;
    }
    z
}

/// `diag(γ)` as an explicit matrix, applied by a matrix product.
pub fn diag_gamma_oracle(logits: ArrayView2<'_, f64>, num_old: usize, g: GammaPair) -> Array2<f64> {
    let k = logits.ncols();
    let mut dmat = Array2::<f64>::zeros((k, k));
    for c in 0..k {
        dmat[[c, c]] = if c < num_old { g.old } else { g.new };
    }
    logits.dot(&dmat)
}

/// `mean_i Σ_c p_ic (ln p_ic − ln q_ic)` with both sides computed directly.
pub fn kl_oracle(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        for (&a, &b) in pr.iter().zip(qr.iter()) {
            if a > 0.0 {
                total += a * (a.ln() - b.ln());
            }
        }
    }
    total / p.nrows() as f64
}

/// Plain softmax with explicit max subtraction, no shared code with the crate.
pub fn softmax_oracle(z: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
    let mut out = z.mapv(|v| v / t);
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

// ---------------------------------------------------------------- fixtures

pub fn tiny_blobs(num_classes: usize, seed: u64) -> Arc<Dataset> {
    Arc::new(
        gaussian_blobs(&BlobsConfig {
            num_classes,
            dim: 5,
            train_per_class: 24,
            test_per_class: 8,
            modes_per_class: 1,
            center_scale: 2.0,
            noise: 0.5,
            seed,
        })
        .unwrap(),
    )
}

pub fn tiny_backbone(input_dim: usize) -> BackboneConfig {
    BackboneConfig {
        input_dim,
        hidden: vec![6],
        feature_dim: 4,
    }
}

pub fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 0.05,
        ..TrainConfig::default()
    }
}

/// A two-class model plus the session that adds two more classes to it.
pub fn boosting_fixture(seed: u64) -> (SingleModel, SessionData) {
    let data = tiny_blobs(4, seed);
    let stream = build_stream(
        data.clone(),
        Protocol::b0(2, MemoryPolicy::PerClass, 5),
        build_class_order(4, None).unwrap(),
    )
    .unwrap();
    let empty = ExemplarMemory::new(MemoryPolicy::PerClass, 5, SelectionStrategy::Herding);
    let s0 = stream.session(0, &empty).unwrap();
    let mut prev = SingleModel::new(&tiny_backbone(5), 2, seed);
    foster_core::train::fit_supervised(&mut prev, &s0.combined, &quick_train(3), 0, seed, "initial", 0).unwrap();
    let mem = empty
        .update(&s0, prev.features(s0.new_train.x.view()).unwrap().view(), seed)
        .unwrap();
    let s1 = stream.session(1, &mem).unwrap();
    (prev, s1)
}

pub fn composite_fixture(strategy: OInitStrategy, seed: u64) -> CompositeModel {
    let prev = SingleModel::new(&tiny_backbone(5), 3, seed);
    let mut m = expand(&prev, 2, strategy, BranchInit::Fresh, seed + 1).unwrap();
    let mut r = rng(seed + 2);
    // non-zero O and bias so that their contribution is visible to the oracle
    m.blocks.o = uniform(m.blocks.o.nrows(), m.blocks.o.ncols(), 0.5, &mut r);
    m.blocks.bias = Array1::from_shape_fn(m.blocks.bias.len(), |_| r.random_range(-1.0..1.0));
    if strategy != OInitStrategy::Ft {
        m.blocks.o.fill(0.0);
    }
    m
}

/// All streams used by the stream and memory checks.
pub fn stream_zoo() -> Vec<TaskStream> {
    let mut out = Vec::new();
    let ten = tiny_blobs(10, 3);
    let protocols = [
        Protocol::b0(1, MemoryPolicy::FixedTotal, 7),
        Protocol::b0(2, MemoryPolicy::FixedTotal, 20),
        Protocol::b0(5, MemoryPolicy::PerClass, 3),
        Protocol::with_base(4, 2, MemoryPolicy::FixedTotal, 13),
        Protocol::with_base(5, 1, MemoryPolicy::PerClass, 4),
        Protocol::with_base(6, 4, MemoryPolicy::FixedTotal, 1),
    ];
    for p in protocols {
        for order_seed in [None, Some(1), Some(7)] {
            let order = build_class_order(10, order_seed).unwrap();
            out.push(build_stream(ten.clone(), p.clone(), order).unwrap());
        }
    }
    out
}

// ---------------------------------------------------------------- checks

/// Session label sets are disjoint, cover everything, and each session's
/// parts carry the expected labels; memory respects its budget and covers
/// every seen class.
pub fn check_stream_and_memory(stream: &TaskStream, strategy: SelectionStrategy) -> Check {
    let c = stream.dataset.num_classes;
    let mut seen_ids = BTreeSet::new();
    let mut memory = ExemplarMemory::new(stream.protocol.memory_policy, stream.protocol.memory_budget, strategy);
    for t in 0..stream.num_sessions() {
        let ids: BTreeSet<usize> = stream.session_classes(t).into_iter().collect();
        ensure!(seen_ids.is_disjoint(&ids), "session {t} repeats a class");
        seen_ids.extend(ids.iter().copied());
        let s = stream.session(t, &memory).map_err(|e| e.to_string())?;
        let (start, end) = stream.session_bounds(t);
        ensure!(s.num_old == start && s.num_seen() == end, "session {t} bounds");
        ensure!(
            s.new_train.y.iter().all(|&y| (start..end).contains(&y)),
            "session {t} new data outside its slice"
        );
        ensure!(
            s.memory.y.iter().all(|&y| y < start),
            "session {t} memory holds a non-old class"
        );
        let test_labels: BTreeSet<usize> = s.test_all_seen.y.iter().copied().collect();
        ensure!(
            test_labels == (0..end).collect(),
            "session {t} test set does not cover exactly the seen classes"
        );
        for &id in &ids {
            ensure!(
                (start..end).contains(&stream.label_of(id)),
                "class {id} relabelled outside its session"
            );
        }
        memory = memory
            .update(&s, s.new_train.x.view(), 11 + t as u64)
            .map_err(|e| e.to_string())?;
        let budget = stream.protocol.memory_budget;
        match stream.protocol.memory_policy {
            MemoryPolicy::FixedTotal => ensure!(memory.len() <= budget, "session {t}: {} > {budget}", memory.len()),
            MemoryPolicy::PerClass => ensure!(
                memory.per_class.values().all(|v| v.len() <= budget),
                "session {t}: per-class budget exceeded"
            ),
        }
        let covered: BTreeSet<usize> = memory
            .per_class
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&k, _)| k)
            .collect();
        let quota_ok = (0..end).all(|l| memory.quota(l, end) >= 1);
        if quota_ok {
            ensure!(
                covered == (0..end).collect(),
                "session {t}: memory does not cover all seen classes"
            );
        }
    }
    ensure!(
        seen_ids == (0..c).collect(),
        "union of sessions is not the full class set"
    );
    Ok(())
}

pub fn check_disjointness_and_budget() -> Check {
    for stream in stream_zoo() {
        for strategy in [SelectionStrategy::Herding, SelectionStrategy::Random] {
            check_stream_and_memory(&stream, strategy)?;
        }
    }
    Ok(())
}

/// Brute-force equivalence for every n ≤ 25 and every m ≤ n, plus prefixes.
pub fn check_herding_oracle() -> Check {
    let mut r = rng(42);
    for n in 1..=25 {
        let d = 1 + n % 4;
        let v = uniform(n, d, 1.0, &mut r);
        let full = herding_select(v.view(), n).map_err(|e| e.to_string())?;
        let mut sorted = full.clone();
        sorted.sort_unstable();
        ensure!(
            sorted == (0..n).collect::<Vec<_>>(),
            "n={n}: full selection is not a permutation"
        );
        for m in 0..=n {
            let got = herding_select(v.view(), m).map_err(|e| e.to_string())?;
            ensure!(
                got == herding_oracle(v.view(), m),
                "n={n} m={m}: differs from brute force"
            );
            ensure!(got[..] == full[..m], "n={n} m={m}: not a prefix of the full order");
        }
    }
    Ok(())
}

pub fn check_frozen_checksums() -> Check {
    for strategy in [OInitStrategy::Az, OInitStrategy::Azb, OInitStrategy::Ft] {
        let (prev, session) = boosting_fixture(5);
        let before = expand(&prev, session.num_new, strategy, BranchInit::Fresh, 9).unwrap();
        let cfg = BoostingConfig {
            train: quick_train(3),
            o_strategy: strategy,
            ..BoostingConfig::default()
        };
        let (after, _) = train_boosting(&session, &prev, &cfg, 9).map_err(|e| e.to_string())?;
        ensure!(
            after.frozen_checksum() == before.frozen_checksum(),
            "{strategy:?}: frozen branch changed during boosting"
        );
        ensure!(
            after.blocks.w_old == prev.classifier,
            "{strategy:?}: W_old differs from the previous classifier"
        );
        ensure!(
            after.old_branch.layers == prev.backbone.layers,
            "{strategy:?}: old backbone changed"
        );
        if strategy != OInitStrategy::Ft {
            ensure!(after.o_checksum() == before.o_checksum(), "{strategy:?}: O changed");
            ensure!(after.blocks.o.iter().all(|&v| v == 0.0), "{strategy:?}: O is not zero");
        }
        ensure!(
            after.checksum() != before.checksum(),
            "{strategy:?}: nothing was trained"
        );
        // teacher immutability under compression
        let teacher_sum = after.checksum();
        let comp = CompressionConfig {
            train: TrainConfig {
                weight_decay: 0.0,
                ..quick_train(2)
            },
            ..CompressionConfig::default()
        };
        train_compression(&session, &after, &comp, &MixupConfig::default(), 3).map_err(|e| e.to_string())?;
        ensure!(
            after.checksum() == teacher_sum,
            "{strategy:?}: compression modified the teacher"
        );
    }
    Ok(())
}

/// Block composition equals the dense product on 100 random instances.
pub fn check_block_composition() -> Check {
    for strategy in [OInitStrategy::Az, OInitStrategy::Azb, OInitStrategy::Ft] {
        let m = composite_fixture(strategy, 17);
        let x = uniform(100, 5, 2.0, &mut rng(18));
        let got = m.forward(x.view()).map_err(|e| e.to_string())?.logits;
        let want = dense_logits_oracle(&m, x.view());
        ensure!(got.dim() == (100, m.num_old + m.num_new), "{strategy:?}: logit shape");
        for (i, (g, w)) in got.rows().into_iter().zip(want.rows()).enumerate() {
            let e = rel_err(&g.to_vec(), &w.to_vec());
            ensure!(e <= 1e-6, "{strategy:?}: instance {i} rel err {e:e}");
        }
        if strategy == OInitStrategy::Az {
            // O contributes nothing: perturbing the old features' route through O is invisible
            let mut m2 = m.clone();
            m2.blocks.o.fill(123.0);
            let z2 = m2.forward(x.view()).unwrap().logits;
            ensure!(z2 == got, "AZ: O leaked into the logits");
        }
    }
    Ok(())
}

pub fn check_probability_normalization() -> Check {
    let mut r = rng(5);
    for strategy in [OInitStrategy::Az, OInitStrategy::Azb, OInitStrategy::Ft] {
        let m = composite_fixture(strategy, 23);
        let x = uniform(50, 5, 5.0, &mut r);
        let p = softmax_rows(m.forward(x.view()).unwrap().logits.view(), 1.0);
        for row in p.rows() {
            ensure!(
                row.iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{strategy:?}: probability outside [0,1]"
            );
            ensure!(
                (row.sum() - 1.0).abs() <= 1e-6,
                "{strategy:?}: row sums to {}",
                row.sum()
            );
        }
    }
    let z = uniform(40, 6, 30.0, &mut r);
    let w = bkd_weights(&[3, 50, 7, 200, 1, 9], 0.97).unwrap();
    for t in [0.5, 1.0, 2.0, 5.0] {
        for q in [softmax_rows(z.view(), t), balanced_targets(z.view(), &w, t)] {
            for row in q.rows() {
                ensure!(row.iter().all(|&v| v >= 0.0), "negative probability");
                ensure!((row.sum() - 1.0).abs() <= 1e-6, "T={t}: row sums to {}", row.sum());
            }
        }
    }
    Ok(())
}

pub fn check_loss_nonnegativity_and_zeros() -> Check {
    let mut r = rng(77);
    let gammas = [GammaPair::IDENTITY, GammaPair { old: 0.2, new: 0.8 }];
    for trial in 0..50 {
        let z = uniform(8, 5, 4.0, &mut r);
        let t = uniform(8, 5, 4.0, &mut r);
        let y: Vec<usize> = (0..8).map(|_| r.random_range(0..5)).collect();
        let w: Vec<f64> = (0..5).map(|_| r.random_range(0.1..3.0)).collect();
        let g = gammas[trial % 2];
        for (name, v) in [
            ("LA", loss_la(z.view(), &y, 2, g).unwrap().loss),
            ("FE", loss_fe(z.view(), &y).unwrap().loss),
            ("KD", loss_kd(t.view(), z.view(), 2.0).unwrap().loss),
            ("BKD", loss_bkd(t.view(), z.view(), &w, 2.0).unwrap().loss),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), "trial {trial}: {name} = {v}");
        }
        ensure!(
            loss_kd(t.view(), t.view(), 2.0).unwrap().loss.abs() < 1e-12,
            "KD(t, t) is not zero"
        );
    }
    // analytic zeros: a one-hot target matched with an overwhelming margin
    let mut big = Array2::<f64>::zeros((3, 4));
    let y = [0usize, 2, 3];
    for (i, &c) in y.iter().enumerate() {
        big[[i, c]] = 1e4;
    }
    ensure!(cross_entropy(big.view(), &y).unwrap().loss < 1e-12, "CE zero case");
    ensure!(loss_fe(big.view(), &y).unwrap().loss < 1e-12, "FE zero case");
    ensure!(
        loss_la(big.view(), &y, 2, GammaPair { old: 0.3, new: 0.7 })
            .unwrap()
            .loss
            < 1e-12,
        "LA zero case"
    );
    // BKD zero case: a student that already matches the reweighted teacher
    let teacher = uniform(4, 3, 2.0, &mut r);
    let w = [2.0, 0.5, 0.5];
    let target = balanced_targets(teacher.view(), &w, 2.0);
    let student = target.mapv(|p| 2.0 * p.ln());
    ensure!(
        loss_bkd(teacher.view(), student.view(), &w, 2.0).unwrap().loss.abs() < 1e-12,
        "BKD zero case"
    );
    Ok(())
}

pub fn check_bkd_reduces_to_kd() -> Check {
    let mut r = rng(9);
    for _ in 0..20 {
        let t = uniform(6, 7, 5.0, &mut r);
        let s = uniform(6, 7, 5.0, &mut r);
        let a = loss_bkd(t.view(), s.view(), &[1.0; 7], 2.0).unwrap();
        let b = loss_kd(t.view(), s.view(), 2.0).unwrap();
        ensure!(
            (a.loss - b.loss).abs() <= 1e-12 * b.loss.max(1.0),
            "loss {} vs {}",
            a.loss,
            b.loss
        );
        ensure!(
            rel_err(a.grad.as_slice().unwrap(), b.grad.as_slice().unwrap()) <= 1e-12,
            "gradients differ"
        );
    }
    Ok(())
}

pub fn check_wa_postcondition() -> Check {
    let mut r = rng(31);
    for trial in 0..30 {
        let k = 2 + trial % 6;
        let num_old = 1 + trial % (k - 1);
        let w = uniform(8, k, 1.0 + trial as f64, &mut r);
        let (a, _) = weight_align(&w, num_old).map_err(|e| e.to_string())?;
        let norms: Vec<f64> = a.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
        let old = norms[..num_old].iter().sum::<f64>() / num_old as f64;
        let new = norms[num_old..].iter().sum::<f64>() / (k - num_old) as f64;
        ensure!(
            (old - new).abs() <= 1e-6 * old,
            "trial {trial}: mean norms {old} vs {new}"
        );
        ensure!(
            a.slice(s![.., ..num_old]) == w.slice(s![.., ..num_old]),
            "old columns changed"
        );
    }
    Ok(())
}

pub fn invariant_checks() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        (
            "disjointness, memory budget and coverage",
            check_disjointness_and_budget,
        ),
        ("herding brute-force oracle and prefix", check_herding_oracle),
        ("frozen-parameter checksums", check_frozen_checksums),
        ("block-composition equivalence", check_block_composition),
        ("probability normalization", check_probability_normalization),
        (
            "loss nonnegativity and analytic zeros",
            check_loss_nonnegativity_and_zeros,
        ),
        ("BKD reduces to KD with unit weights", check_bkd_reduces_to_kd),
        ("WA post-condition", check_wa_postcondition),
    ]
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

/// Central differences of `f` over every trainable parameter of `model`.
pub fn finite_difference(model: &CompositeModel, f: &dyn Fn(&CompositeModel) -> f64) -> Vec<f64> {
    let sizes: Vec<usize> = model.clone().trainable_params_mut().iter().map(|p| p.len()).collect();
    let mut out = Vec::new();
    for (g, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let mut plus = model.clone();
            plus.trainable_params_mut()[g][i] += FD_STEP;
            let mut minus = model.clone();
            minus.trainable_params_mut()[g][i] -= FD_STEP;
            out.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
        }
    }
    out
}

/// A 2-layer toy composite with FT so that `O` is trainable too.
pub fn gradient_fixture(seed: u64) -> (CompositeModel, Array2<f64>, Vec<usize>) {
    let cfg = BackboneConfig {
        input_dim: 3,
        hidden: vec![5],
        feature_dim: 4,
    };
    let prev = SingleModel::new(&cfg, 2, seed);
    let mut m = expand(&prev, 2, OInitStrategy::Ft, BranchInit::Fresh, seed + 1).unwrap();
    let mut r = rng(seed + 2);
    m.blocks.o = uniform(m.blocks.o.nrows(), m.blocks.o.ncols(), 0.5, &mut r);
    let x = uniform(6, 3, 1.5, &mut r);
    let y = vec![0, 1, 2, 3, 2, 0];
    (m, x, y)
}

/// Relative error of the analytic gradient of one boosting term.
pub fn boosting_term_gradient_error(term: &str, seed: u64) -> f64 {
    let (m, x, y) = gradient_fixture(seed);
    let gamma = GammaPair { old: 0.3, new: 0.7 };
    let num_old = m.num_old;
    let value = |mm: &CompositeModel| -> f64 {
        let f = mm.forward(x.view()).unwrap();
        match term {
            "LA" => loss_la(f.logits.view(), &y, num_old, gamma).unwrap().loss,
            "FE" => loss_fe(f.aux.view(), &y).unwrap().loss,
            "KD" => {
                loss_kd(f.old_logits.view(), f.logits.slice(s![.., ..num_old]), 2.0)
                    .unwrap()
                    .loss
            }
            _ => unreachable!(),
        }
    };
    let (fwd, tape) = m.forward_train(x.view()).unwrap();
    let zeros = Array2::<f64>::zeros(fwd.logits.dim());
    let grad = match term {
        "LA" => {
            let g = loss_la(fwd.logits.view(), &y, num_old, gamma).unwrap().grad;
            m.backward(&fwd, &tape, &g, None)
        }
        "FE" => {
            let g = loss_fe(fwd.aux.view(), &y).unwrap().grad;
            m.backward(&fwd, &tape, &zeros, Some(&g))
        }
        "KD" => {
            let kd = loss_kd(fwd.old_logits.view(), fwd.logits.slice(s![.., ..num_old]), 2.0).unwrap();
            let mut g = zeros.clone();
            g.slice_mut(s![.., ..num_old]).assign(&kd.grad);
            m.backward(&fwd, &tape, &g, None)
        }
        _ => unreachable!(),
    };
    let analytic: Vec<f64> = grad.slices().concat();
    let numeric = finite_difference(&m, &value);
    rel_err(&analytic, &numeric)
}

/// Relative error of the BKD gradient for a 2-layer student.
pub fn bkd_gradient_error(seed: u64) -> f64 {
    let cfg = BackboneConfig {
        input_dim: 3,
        hidden: vec![5],
        feature_dim: 4,
    };
    let student = SingleModel::new(&cfg, 4, seed);
    let mut r = rng(seed + 3);
    let x = uniform(6, 3, 1.5, &mut r);
    let teacher = uniform(6, 4, 3.0, &mut r);
    let w = bkd_weights(&[5, 5, 40, 40], 0.97).unwrap();
    let value = |s: &SingleModel| -> f64 {
        let (_, z, _) = s.forward_train(x.view()).unwrap();
        loss_bkd(teacher.view(), z.view(), &w, 2.0).unwrap().loss
    };
    let (f, z, tape) = student.forward_train(x.view()).unwrap();
    let g = loss_bkd(teacher.view(), z.view(), &w, 2.0).unwrap().grad;
    let analytic: Vec<f64> = student.backward(&f, &tape, &g).slices().concat();
    let sizes: Vec<usize> = student.clone().params_mut().iter().map(|p| p.len()).collect();
    let mut numeric = Vec::new();
    for (gi, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let mut plus = student.clone();
            plus.params_mut()[gi][i] += FD_STEP;
            let mut minus = student.clone();
            minus.params_mut()[gi][i] -= FD_STEP;
            numeric.push((value(&plus) - value(&minus)) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for term in ["LA", "FE", "KD"] {
        let worst = (0..3)
            .map(|s| boosting_term_gradient_error(term, 100 + s))
            .fold(0.0, f64::max);
        out.push((term, worst));
    }
    out.push(("BKD", (0..3).map(|s| bkd_gradient_error(200 + s)).fold(0.0, f64::max)));
    out
}

pub fn noisy_sine(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut r = rng(seed);
    let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / (n - 1) as f64 * 6.0);
    let y = x.column(0).mapv(|v| v.sin() + r.random_range(-0.1..0.1));
    (x, y)
}
