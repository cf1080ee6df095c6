//! Acceptance criteria. Each test prints one `PASS` or `FAIL` line with the
//! measured value and its tolerance, then asserts.
//!
//! Criteria 7-10 share a single run of the desk-scale pipeline.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wssnet_core::baselines::somp_detect;
use wssnet_core::federation::{
    aggregate, local_rng, run_ftl, FtlConfig, GradientUpload, InProcessTransport, LocalConfig,
    ModelBroadcast, SecondaryUser, SocketTransport, Transport,
};
use wssnet_core::harness::{
    run_pipeline, tl_scheme, ExperimentConfig, PipelineReport, SCHEME_FTL, SCHEME_RT, SCHEME_SOMP,
    SCHEME_ZERO_SHOT,
};
use wssnet_core::multicoset::{build_measurement_matrix, CMatrix, CosetPattern};
use wssnet_core::pruning::{apply_pruning, prune_model, pruning_threshold};
use wssnet_core::signal_model::OccupancyVector;
use wssnet_core::tensornet::gradcheck::finite_difference_check;
use wssnet_core::tensornet::{
    batch_gradient, init_weights, sgd_step, train_epoch, DomainSpecific, DropoutRates,
    LabeledDataset, ModelWeights, Padding, Sample, Scope, Tensor, WssNetSpec,
};
use wssnet_core::Result;

fn verdict(id: u32, what: &str, ok: bool, detail: String) {
    println!(
        "{} criterion {id}: {what}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} failed: {what}: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Measurement-matrix orthogonality
// ---------------------------------------------------------------------------

#[test]
fn c01_measurement_matrix_orthogonality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 1.0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let l = rng.random_range(4..=64usize);
        let p = rng.random_range(1..l);
        let mut offsets: Vec<usize> = rand::seq::index::sample(&mut rng, l, p).into_vec();
        offsets.sort_unstable();
        let a = build_measurement_matrix(&CosetPattern::new(offsets, l, t).unwrap());
        let m = a.matrix();
        let gram = m * m.adjoint();
        let target = 1.0 / (l as f64 * t * t);
        for i in 0..p {
            for j in 0..p {
                let expect = if i == j { target } else { 0.0 };
                worst = worst.max((gram[(i, j)] - Complex64::new(expect, 0.0)).norm());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "max |A A^H - I/(L T^2)| over 1000 patterns, L in 4..=64",
        worst < 1e-9 && elapsed < Duration::from_secs(5),
        format!(
            "{worst:.3e} (< 1e-9) in {:.2}s (< 5s)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn c02_gradient_check() {
    let start = Instant::now();
    let spec = WssNetSpec {
        subbands: 4,
        snapshots: 8,
        conv1_kernels: 3,
        conv2_kernels: 2,
        hidden_units: 5,
        padding: Padding::Same,
        dropout: DropoutRates::NONE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: ModelWeights<f64> = init_weights(&spec, &mut rng).unwrap();
    let x = Tensor::new(
        vec![4, 8, 2],
        (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let label = OccupancyVector::from_indices(4, [1, 3]).unwrap();
    let all: Vec<usize> = (0..w.param_count()).collect();
    let err = finite_difference_check(&w, &x, &label, 1e-5, &all, None).unwrap();
    let elapsed = start.elapsed();
    verdict(
        2,
        &format!(
            "finite differences over all {} parameters (L=4, N=8, f64)",
            all.len()
        ),
        err < 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "max relative error {err:.3e} (< 1e-6) in {:.2}s (< 30s)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Pruning accounting
// ---------------------------------------------------------------------------

fn toy_spec(dropout: DropoutRates) -> WssNetSpec {
    WssNetSpec {
        subbands: 5,
        snapshots: 5,
        conv1_kernels: 2,
        conv2_kernels: 1,
        hidden_units: 4,
        padding: Padding::Valid,
        dropout,
    }
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, l: usize, snapshots: usize) -> LabeledDataset {
    let samples = (0..n)
        .map(|_| Sample {
            feature: Tensor::new(
                vec![l, snapshots, 2],
                (0..l * snapshots * 2)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap(),
            label: OccupancyVector::from_bits((0..l).map(|_| rng.random_bool(0.4)).collect()),
        })
        .collect();
    LabeledDataset::new(samples).unwrap()
}

#[test]
fn c03_pruning_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut trials = 0;
    for _ in 0..100 {
        let n = rng.random_range(10..500usize);
        let mut mags: Vec<f64> = (1..=n).map(|i| i as f64 * 0.01).collect();
        mags.shuffle(&mut rng);
        let weights: Vec<f64> = mags
            .iter()
            .map(|&m| if rng.random_bool(0.5) { m } else { -m })
            .collect();
        for step in 1..=9 {
            let kappa = step as f64 / 10.0;
            let gamma = pruning_threshold(&weights, kappa).unwrap();
            let (pruned, mask) = apply_pruning(&weights, gamma);
            let expected = (step * n).div_ceil(10) - 1;
            let zeros = pruned.iter().filter(|v| **v == 0.0).count();
            trials += 1;
            if mask.pruned_count() != expected || zeros != expected {
                mismatches += 1;
            }
        }
    }

    // Mask survival: three full epochs over all layers.
    let spec = WssNetSpec {
        hidden_units: 16,
        ..toy_spec(DropoutRates {
            conv1: 0.1,
            conv2: 0.1,
            hidden: 0.2,
        })
    };
    let mut w: ModelWeights<f64> = init_weights(&spec, &mut rng).unwrap();
    let report = prune_model(&mut w, 0.5).unwrap();
    let data = random_dataset(&mut rng, 40, 5, 5);
    let pruned: Vec<usize> = (0..w.ds.hidden.weight.len())
        .filter(|&i| !w.mask().unwrap().keep()[i])
        .collect();
    let before: Vec<f64> = w.ds.hidden.weight.clone();
    for _ in 0..3 {
        train_epoch(&mut w, &data, 0.5, 8, Scope::All, &mut rng).unwrap();
    }
    let leaked = pruned
        .iter()
        .filter(|&&i| w.ds.hidden.weight[i] != 0.0)
        .count();
    let survivors_moved = (0..before.len())
        .filter(|i| !pruned.contains(i))
        .any(|i| w.ds.hidden.weight[i] != before[i]);
    verdict(
        3,
        "zeroed_count = ceil(kappa N) - 1 and mask survives 3 epochs",
        mismatches == 0 && leaked == 0 && survivors_moved && report.zeroed_count == pruned.len(),
        format!(
            "{mismatches}/{trials} count mismatches (0), {leaked}/{} pruned weights leaked (0)",
            pruned.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Federated rounds versus a straight-line replay
// ---------------------------------------------------------------------------

struct Recording<T> {
    inner: T,
    broadcasts: Vec<ModelWeights<f32>>,
}

impl<T: Transport> Transport for Recording<T> {
    fn su_ids(&self) -> Vec<u32> {
        self.inner.su_ids()
    }

    fn exchange(
        &mut self,
        broadcast: &ModelBroadcast,
        timeout: Duration,
    ) -> Result<Vec<GradientUpload>> {
        self.broadcasts.push(broadcast.weights.clone());
        self.inner.exchange(broadcast, timeout)
    }
}

/// The federated procedure written out in one process: every SU trains in
/// turn from the broadcast model, then the server takes the size-weighted step.
fn replay(
    init: &ModelWeights<f32>,
    users: &[SecondaryUser],
    cfg: &FtlConfig,
) -> Vec<ModelWeights<f32>> {
    let mut global = init.clone();
    let mut history = vec![global.clone()];
    let total: u64 = users.iter().map(|u| u.data.len() as u64).sum();
    let lr = cfg.local.learning_rate as f32;
    for t in 0..cfg.rounds as u32 {
        let mut weighted = DomainSpecific::<f32>::zeros(global.spec());
        for su in users {
            let mut rng = local_rng(cfg.local.seed, su.id, t);
            let mut local = global.clone();
            let mut acc = DomainSpecific::<f32>::zeros(global.spec());
            let mut order: Vec<usize> = (0..su.data.len()).collect();
            for _ in 0..cfg.local.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.local.batch_size) {
                    let batch: Vec<&Sample> =
                        chunk.iter().map(|&i| &su.data.samples()[i]).collect();
                    let (_, g) =
                        batch_gradient(&local, &batch, Scope::DsOnly, Some(&mut rng)).unwrap();
                    acc.add_scaled(&g.ds, 1.0);
                    sgd_step(&mut local, &g, lr, Scope::DsOnly).unwrap();
                }
            }
            weighted.add_scaled(&acc, (su.data.len() as f64 / total as f64) as f32);
        }
        let mut ds = global.ds.clone();
        ds.add_scaled(&weighted, -(cfg.server_rate() as f32));
        global = global.with_ds(ds).unwrap();
        history.push(global.clone());
    }
    history
}

fn bits(w: &ModelWeights<f32>) -> Vec<u32> {
    w.slices()
        .iter()
        .flat_map(|s| s.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn c04_federation_matches_replay() {
    let spec = toy_spec(DropoutRates {
        conv1: 0.1,
        conv2: 0.1,
        hidden: 0.25,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init: ModelWeights<f32> = init_weights(&spec, &mut rng).unwrap();
    assert!(
        init.param_count() <= 100,
        "toy model has {} parameters",
        init.param_count()
    );
    let users: Vec<SecondaryUser> = [(0u32, 7usize), (1, 12), (2, 5)]
        .into_iter()
        .map(|(id, n)| SecondaryUser {
            id,
            data: random_dataset(&mut rng, n, 5, 5),
        })
        .collect();
    let cfg = FtlConfig {
        rounds: 5,
        local: LocalConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 0.1,
            seed: 99,
        },
        server_learning_rate: Some(0.3),
        timeout: Duration::from_secs(30),
        retries: 0,
    };
    let expected = replay(&init, &users, &cfg);
    let gf = init.gf_digest();

    let mut in_process = Recording {
        inner: InProcessTransport::spawn(users.clone(), cfg.local).unwrap(),
        broadcasts: Vec::new(),
    };
    let a = run_ftl(&cfg, &init, &mut in_process).unwrap();
    let mut socket = Recording {
        inner: SocketTransport::spawn_local(users, cfg.local).unwrap(),
        broadcasts: Vec::new(),
    };
    let b = run_ftl(&cfg, &init, &mut socket).unwrap();

    let mut rounds_equal = 0;
    for (t, want) in expected.iter().enumerate().take(cfg.rounds) {
        if bits(&in_process.broadcasts[t]) == bits(want)
            && bits(&socket.broadcasts[t]) == bits(want)
        {
            rounds_equal += 1;
        }
    }
    let final_in_process = bits(&a.weights) == bits(&expected[cfg.rounds]);
    let ulp_socket = bits(&b.weights)
        .iter()
        .zip(bits(&expected[cfg.rounds]))
        .map(|(x, y)| (*x as i64 - y as i64).unsigned_abs())
        .max()
        .unwrap_or(0);
    let gf_frozen = in_process
        .broadcasts
        .iter()
        .chain(&socket.broadcasts)
        .all(|w| w.gf_digest() == gf)
        && a.weights.gf_digest() == gf
        && b.weights.gf_digest() == gf;
    let moved = bits(&a.weights) != bits(&init);
    verdict(
        4,
        &format!("3 SUs x 5 rounds, {}-parameter model, replay oracle", init.param_count()),
        rounds_equal == cfg.rounds && final_in_process && ulp_socket == 0 && gf_frozen && moved,
        format!(
            "{rounds_equal}/5 broadcasts bit-equal, final in-process bit-equal: {final_in_process}, \
             socket max ULP {ulp_socket} (0), general-feature layers frozen: {gf_frozen}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Aggregation weighted-mean oracle
// ---------------------------------------------------------------------------

#[test]
fn c05_aggregation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = WssNetSpec {
        hidden_units: 7,
        ..toy_spec(DropoutRates::NONE)
    };
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let global: ModelWeights<f64> = init_weights(&spec, &mut rng).unwrap();
        let n_su = rng.random_range(1..=8);
        let alpha: f64 = rng.random_range(0.001..1.0);
        let mut uploads: Vec<GradientUpload<f64>> = (0..n_su)
            .map(|i| {
                let mut g = DomainSpecific::zeros(&spec);
                for s in g.slices_mut() {
                    s.iter_mut()
                        .for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
                }
                GradientUpload {
                    round: trial,
                    su_id: i as u32 * 3 + 1,
                    sample_count: rng.random_range(1..10_000),
                    gradient: g,
                }
            })
            .collect();
        uploads.shuffle(&mut rng);
        let out = aggregate(&global, trial, &uploads, alpha).unwrap();

        let total: f64 = uploads.iter().map(|u| u.sample_count as f64).sum();
        let before = global.ds.slices();
        let after = out.ds.slices();
        for tensor in 0..4 {
            for (k, &theta) in before[tensor].iter().enumerate() {
                let mean: f64 = uploads
                    .iter()
                    .rev()
                    .map(|u| u.sample_count as f64 / total * u.gradient.slices()[tensor][k])
                    .sum();
                worst = worst.max((after[tensor][k] - (theta - alpha * mean)).abs());
            }
        }
        assert_eq!(out.gf_digest(), global.gf_digest());
    }
    verdict(
        5,
        "aggregate = theta_ds - alpha sum(w_i g_i) over 50 random rounds (f64)",
        worst < 1e-12,
        format!("max abs diff {worst:.3e} (< 1e-12)"),
    );
}

// ---------------------------------------------------------------------------
// 6. SOMP exact recovery
// ---------------------------------------------------------------------------

fn somp_recovery_rate(k: usize, trials: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (l, p, n) = (16, 6, 32);
    let mut hits = 0;
    for _ in 0..trials {
        let mut offsets = rand::seq::index::sample(rng, l, p).into_vec();
        offsets.sort_unstable();
        let a = build_measurement_matrix(&CosetPattern::new(offsets, l, 1.0).unwrap());
        let mut support = rand::seq::index::sample(rng, l, k).into_vec();
        support.sort_unstable();
        let mut x = CMatrix::zeros(l, n);
        for &row in &support {
            for c in 0..n {
                x[(row, c)] =
                    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            }
        }
        let y: DMatrix<Complex64> = a.matrix() * &x;
        let r = somp_detect(&y, &a, k).unwrap();
        let mut found: Vec<usize> = r.support.iter().map(|s| s - 1).collect();
        found.sort_unstable();
        if found == support {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

#[test]
fn c06_somp_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rates: Vec<(usize, f64)> = (1..=6)
        .map(|k| (k, somp_recovery_rate(k, 200, &mut rng)))
        .collect();
    let over = somp_recovery_rate(9, 200, &mut rng);
    let exact = rates.iter().all(|&(_, r)| r == 1.0);
    let listed: Vec<String> = rates
        .iter()
        .map(|(k, r)| format!("K={k}: {r:.3}"))
        .collect();
    verdict(
        6,
        "noiseless SOMP support recovery, L=16, P=6, random patterns, 200 trials per K",
        exact && over < 0.5,
        format!("{} (all 1.0); K=9: {over:.3} (< 0.5)", listed.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 7-10. Desk-scale pipeline
// ---------------------------------------------------------------------------

struct DeskRun {
    config: ExperimentConfig,
    report: PipelineReport,
    elapsed: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = ExperimentConfig::desk();
        let start = Instant::now();
        let report = run_pipeline(&config, None).expect("desk pipeline");
        DeskRun {
            config,
            report,
            elapsed: start.elapsed(),
        }
    })
}

const SNR: f64 = 10.0;

fn acc(run: &DeskRun, domain: &str, scheme: &str) -> f64 {
    run.report
        .accuracy(domain, scheme, SNR)
        .unwrap_or_else(|| panic!("no {scheme} row for {domain} at {SNR} dB"))
}

fn by_occupancy(run: &DeskRun) -> (String, String) {
    let mut targets = run.config.targets.clone();
    targets.sort_by_key(|d| d.num_pus);
    (targets[0].id.clone(), targets[targets.len() - 1].id.clone())
}

#[test]
fn c07_regular_training() {
    let run = desk_run();
    let mut ok = run.elapsed < Duration::from_secs(15 * 60);
    let mut parts = Vec::new();
    for d in &run.config.targets {
        let p = acc(run, &d.id, SCHEME_RT);
        let zero = run.report.facts.all_zero[&d.id];
        let pass = p >= 0.95 && p - zero >= 0.05;
        ok &= pass;
        parts.push(format!(
            "{} (K={}) {p:.4} vs all-zero {zero:.4}",
            d.id, d.num_pus
        ));
    }
    verdict(
        7,
        "RT WSSNet at 10 dB >= 0.95 and >= all-zero + 0.05 on every target; pipeline < 15 min",
        ok,
        format!(
            "{}; pipeline {:.0}s",
            parts.join(", "),
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c08_pruning_retains_accuracy() {
    let run = desk_run();
    let f = &run.report.facts;
    let drop = f.source_acc_unpruned - f.source_acc_pruned;
    verdict(
        8,
        &format!(
            "source accuracy after kappa={} pruning and fine-tune",
            run.config.pruning.kappa
        ),
        drop < 0.02 && f.prune.val_loss_tuned <= f.prune.val_loss_pruned,
        format!(
            "{:.4} -> {:.4}, drop {drop:.4} (< 0.02); val loss {:.4} -> {:.4} after fine-tune",
            f.source_acc_unpruned,
            f.source_acc_pruned,
            f.prune.val_loss_pruned,
            f.prune.val_loss_tuned
        ),
    );
}

#[test]
fn c09_ftl_trend() {
    let run = desk_run();
    let (lowest, highest) = by_occupancy(run);
    let tl = tl_scheme(&run.config);
    let ftl_high = acc(run, &highest, SCHEME_FTL);
    let tl_high = acc(run, &highest, &tl);
    let somp_high = acc(run, &highest, SCHEME_SOMP);
    let best_low = [SCHEME_FTL, tl.as_str(), SCHEME_RT, SCHEME_SOMP]
        .iter()
        .map(|s| acc(run, &lowest, s))
        .fold(f64::NEG_INFINITY, f64::max);
    let ftl_low = acc(run, &lowest, SCHEME_FTL);
    verdict(
        9,
        "FTL beats TL and SOMP on the highest-occupancy target and is within 0.05 of best on the lowest",
        ftl_high > tl_high && ftl_high > somp_high && best_low - ftl_low <= 0.05,
        format!(
            "{highest}: FTL {ftl_high:.4} vs TL {tl_high:.4}, SOMP {somp_high:.4}; \
             {lowest}: FTL {ftl_low:.4} vs best {best_low:.4} (gap <= 0.05)"
        ),
    );
}

#[test]
fn c10_zero_shot() {
    let run = desk_run();
    let excluded = run
        .report
        .facts
        .zero_shot_domain
        .clone()
        .expect("zero-shot domain configured");
    let p = acc(run, &excluded, SCHEME_ZERO_SHOT);
    let zero = run.report.facts.all_zero[&excluded];
    verdict(
        10,
        &format!("global model with SU {excluded} excluded, evaluated on {excluded}"),
        p - zero >= 0.05,
        format!("{p:.4} vs all-zero {zero:.4} (margin >= 0.05)"),
    );
}
