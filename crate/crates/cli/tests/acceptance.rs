//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use emospace_core::bank::PrototypeBank;
use emospace_core::data::{self, Checkpoint, SynthConfig};
use emospace_core::fusion::{FusionConfig, FusionNet};
use emospace_core::guidance::{
    attention, blend, multi_prototype_guidance, reweight_attention, AttentionInputs, BlendSchedule, GuidanceConfig,
    Tensor4,
};
use emospace_core::linalg::{cosine_sim, normalize, orthogonal_init, Mat};
use emospace_core::mapper::{mean_cosine, synthetic_linear_pairs, train_mapper, MapperLossWeights};
use emospace_core::refine::{refine, LexiconStub, StopReason, DEFAULT_EPS_CONV};
use emospace_core::stats::{chi2_sf, cohen_kappa, friedman_statistic, friedman_test, RatingMatrix};
use emospace_core::training::{
    assignments, composite_loss_with, gradients_with, train, LossWeights, Sample, TrainConfig,
};
use emospace_core::{EmoError, Rng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("{e:?}"))
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    normalize(&rng.normal_vec(d)).expect("gaussian draw is nonzero")
}

// 1 ------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let cfg = FusionConfig {
        visual_dim: 8,
        text_dim: 8,
        head_hidden: 6,
        gate_hidden: 5,
        classes: 3,
    };
    let mut net = ok(FusionNet::init(&cfg, &mut rng))?;
    let mut protos = ok(orthogonal_init(4, 8, &mut rng))?;
    let vis: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 8)).collect();
    let txt: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 8)).collect();
    let labels = [0usize, 1, 2, 1];
    let batch: Vec<Sample<'_>> = (0..4)
        .map(|i| Sample {
            visual: &vis[i],
            text: &txt[i],
            label: labels[i],
        })
        .collect();
    let w = LossWeights::default();
    let tc = TrainConfig::default();
    let assigned = ok(assignments(&batch, &net, &protos))?;
    let (_, grads) = ok(gradients_with(&batch, &net, &protos, &assigned, &w, &tc))?;

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let loss = |net: &FusionNet, protos: &Mat| {
        composite_loss_with(&batch, net, protos, Some(&assigned), &w, &tc)
            .expect("loss evaluates")
            .total
    };
    let mut compare = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
        checked += 1;
    };

    macro_rules! check_slice {
        ($field:expr, $grad:expr) => {
            for i in 0..$grad.len() {
                let orig = $field[i];
                $field[i] = orig + h;
                let up = loss(&net, &protos);
                $field[i] = orig - h;
                let down = loss(&net, &protos);
                $field[i] = orig;
                compare($grad[i], (up - down) / (2.0 * h));
            }
        };
    }
    check_slice!(net.w1.as_mut_slice(), grads.w1.as_slice());
    check_slice!(net.w2.as_mut_slice(), grads.w2.as_slice());
    check_slice!(net.ug.as_mut_slice(), grads.ug.as_slice());
    check_slice!(net.wg, grads.wg);
    check_slice!(protos.as_mut_slice(), grads.prototypes.as_slice());

    let elapsed = start.elapsed();
    ensure!(worst < 1e-4, "max relative error {worst:.3e} over {checked} parameters");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{checked} parameters, max relative error {worst:.2e}, {elapsed:.2?}"))
}

// 2 ------------------------------------------------------------------------

fn synthetic_training() -> Outcome {
    let ds = ok(data::generate_synthetic(&SynthConfig::default()))?;
    ensure!(ds.len() == 800 && ds.classes() == 8, "harness shape {} x {}", ds.len(), ds.classes());
    let start = Instant::now();
    let model = ok(train(&ds, &TrainConfig::default(), &LossWeights::default()))?;
    let elapsed = start.elapsed();
    let r = &model.report;
    let worst_div = r.epochs.iter().map(|e| e.diversity).fold(0.0, f64::max);
    ensure!(r.epochs.len() == 200, "{} epochs recorded", r.epochs.len());
    ensure!(r.final_accuracy >= 0.95, "final accuracy {}", r.final_accuracy);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    ensure!(worst_div < 0.05, "diversity reached {worst_div}");
    Ok(format!(
        "accuracy {:.4}, max diversity {worst_div:.4}, K {} -> {}, {elapsed:.2?}",
        r.final_accuracy,
        r.k_trajectory[0],
        model.bank.len()
    ))
}

// 3 ------------------------------------------------------------------------

fn merge_split_dynamics() -> Outcome {
    let mut rng = Rng::new(9);
    let basis = ok(orthogonal_init(16, 32, &mut rng))?;
    let mut rows: Vec<Vec<f64>> = basis.row_iter().map(<[f64]>::to_vec).collect();
    rows[5] = rows[3].iter().zip(&rows[8]).map(|(a, b)| a + 0.01 * b).collect();
    let mut bank = ok(PrototypeBank::from_rows(&rows, 0.3, 0.7))?;
    let dup = ok(cosine_sim(bank.prototype(3), bank.prototype(5)))?;
    ensure!(dup > 0.999, "duplicate cosine {dup}");
    let usage: Vec<usize> = (0..16).flat_map(|i| std::iter::repeat(i).take(i + 1)).collect();
    ok(bank.update_usage(&usage))?;
    let before = bank.total_usage();
    let report = bank.merge_step();
    ensure!(bank.len() == 15, "merge left {} prototypes", bank.len());
    ensure!(report.merged_groups == vec![vec![3, 5]], "merged {:?}", report.merged_groups);
    ensure!(bank.total_usage() == before, "usage {} -> {}", before, bank.total_usage());

    let mut ortho = ok(PrototypeBank::orthogonal(16, 32, 0.3, 0.7, &mut rng))?;
    let snapshot = ortho.prototypes().clone();
    let report = ortho.merge_step();
    ensure!(report.merged_groups.is_empty(), "orthonormal bank merged {:?}", report.merged_groups);
    ensure!(ortho.prototypes() == &snapshot, "orthonormal bank changed");

    let mut small = ok(PrototypeBank::orthogonal(4, 8, 0.3, 0.7, &mut rng))?;
    ok(small.update_usage(&[0; 10]))?;
    ensure!(small.usage() == [10, 0, 0, 0], "usage {:?}", small.usage());
    let report = ok(small.split_step(&mut rng, 0.1))?;
    ensure!(report.split_indices == vec![0], "split {:?}", report.split_indices);
    ensure!(small.len() == 5 && small.total_usage() == 10, "after split K={} usage={}", small.len(), small.total_usage());
    Ok("duplicate pair merged 16 -> 15, orthonormal bank untouched, index 0 split, usage conserved".into())
}

// 4 ------------------------------------------------------------------------

fn guidance_contracts() -> Outcome {
    let mut rng = Rng::new(31);
    let rows: Vec<Vec<f64>> = (0..16).map(|_| unit(&mut rng, 32)).collect();
    let bank = ok(PrototypeBank::from_rows(&rows, 0.3, 0.7))?;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let q = rng.normal_vec(32);
        let scale = 0.01 + 50.0 * rng.uniform();
        let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
        for k in [1, 4, 16] {
            let cfg = GuidanceConfig {
                k_pos: k,
                ..GuidanceConfig::new(32, 8, &mut rng)
            };
            let r = ok(multi_prototype_guidance(&q, &bank, &cfg))?;
            worst_sum = worst_sum.max((r.weights.iter().sum::<f64>() - 1.0).abs());
            let r2 = ok(multi_prototype_guidance(&scaled, &bank, &cfg))?;
            ensure!(r.indices == r2.indices, "rescaling by {scale} changed the selection");
            if k == 1 {
                let argmax = (0..16)
                    .max_by(|&a, &b| {
                        let da: f64 = q.iter().zip(bank.prototype(a)).map(|(x, y)| x * y).sum();
                        let db: f64 = q.iter().zip(bank.prototype(b)).map(|(x, y)| x * y).sum();
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                ensure!(r.indices == vec![argmax] && r.weights == vec![1.0], "k=1 picked {:?}", r.indices);
            }
        }
    }
    ensure!(worst_sum < 1e-9, "weight sum off by {worst_sum:e}");

    let ortho = ok(PrototypeBank::orthogonal(4, 4, 0.3, 0.7, &mut rng))?;
    let cfg = GuidanceConfig {
        k_pos: 2,
        ..GuidanceConfig::new(4, 2, &mut rng)
    };
    let r = ok(multi_prototype_guidance(ortho.prototype(0), &ortho, &cfg))?;
    // Extended-precision values of softmax([1, 0] / 0.1).
    let oracle = [0.999_954_602_131_297_6, 4.539_786_870_243_439e-5];
    let err = (r.weights[0] - oracle[0]).abs().max((r.weights[1] - oracle[1]).abs());
    ensure!(r.indices[0] == 0 && err < 1e-7, "weights {:?}", r.weights);
    Ok(format!("weight sums within {worst_sum:.1e}, two-prototype oracle error {err:.1e}"))
}

// 5 ------------------------------------------------------------------------

fn attention_reweighting() -> Outcome {
    let mut rng = Rng::new(77);
    let shape = [2, 8, 5, 6];
    let inputs = AttentionInputs {
        q: Tensor4::random([2, 8, 5, 4], &mut rng),
        k: Tensor4::random([2, 8, 6, 4], &mut rng),
        v: Tensor4::random([2, 8, 6, 4], &mut rng),
    };
    let (_, weights) = ok(attention(&inputs))?;
    ensure!(weights.shape() == shape, "shape {:?}", weights.shape());
    let p_t = unit(&mut rng, 16);

    let zero = GuidanceConfig {
        wp: Mat::zeros(8, 16),
        ..GuidanceConfig::new(16, 8, &mut rng)
    };
    let same = ok(reweight_attention(&weights, &p_t, &zero))?;
    let identity_err = max_diff(same.as_slice(), weights.as_slice());
    ensure!(identity_err < 1e-12, "zero projection changed weights by {identity_err:e}");

    let cfg = GuidanceConfig {
        wp: Mat::gaussian(8, 16, 0.5, &mut rng),
        ..GuidanceConfig::new(16, 8, &mut rng)
    };
    let bias = ok(cfg.wp.matvec(&p_t))?;
    let out = ok(reweight_attention(&weights, &p_t, &cfg))?;
    let mut sum_err: f64 = 0.0;
    for b in 0..2 {
        for (h, bh) in bias.iter().enumerate() {
            for q in 0..5 {
                let s: f64 = out.row(b, h, q).iter().sum();
                sum_err = sum_err.max((s - (1.0 + 1.5 * bh.tanh())).abs());
            }
        }
    }
    ensure!(sum_err < 1e-9, "row sums off by {sum_err:e}");

    let renorm = GuidanceConfig {
        renormalize_rows: true,
        ..cfg
    };
    let out = ok(reweight_attention(&weights, &p_t, &renorm))?;
    let mut unit_err: f64 = 0.0;
    for b in 0..2 {
        for h in 0..8 {
            for q in 0..5 {
                unit_err = unit_err.max((out.row(b, h, q).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let cancel_err = max_diff(out.as_slice(), weights.as_slice());
    ensure!(unit_err < 1e-9, "renormalized rows off by {unit_err:e}");
    ensure!(cancel_err < 1e-12, "per-head factor did not cancel: {cancel_err:e}");
    Ok(format!("identity {identity_err:.1e}, row sums {sum_err:.1e}, cancellation {cancel_err:.1e}"))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 6 ------------------------------------------------------------------------

fn temporal_blending() -> Outcome {
    let sched = BlendSchedule::default();
    let mut rng = Rng::new(5);
    let basis = ok(orthogonal_init(2, 16, &mut rng))?;
    let (c, e) = (basis.row(0).to_vec(), basis.row(1).to_vec());
    let mut prev_w = -1.0;
    let mut prev_cos = -2.0;
    for step in 0..sched.total_steps {
        let w = sched.weight(step);
        ensure!(w >= prev_w, "weight decreased at step {step}");
        prev_w = w;
        let p = ok(blend(step, &sched, &c, &e))?;
        let cos = ok(cosine_sim(&p, &e))?;
        ensure!(cos >= prev_cos, "cosine to emotion decreased at step {step}");
        prev_cos = cos;
    }
    let scaled_c: Vec<f64> = c.iter().map(|x| 3.0 * x).collect();
    let scaled_e: Vec<f64> = e.iter().map(|x| 0.5 * x).collect();
    let first = ok(blend(0, &sched, &scaled_c, &scaled_e))?;
    let last = ok(blend(sched.total_steps - 1, &sched, &scaled_c, &scaled_e))?;
    ensure!(first == ok(normalize(&scaled_c))?, "first step is not the normalized content");
    ensure!(last == ok(normalize(&scaled_e))?, "last step is not the normalized emotion");
    Ok(format!("{} steps monotone, endpoints exact", sched.total_steps))
}

// 7 ------------------------------------------------------------------------

fn prompt_refinement() -> Outcome {
    let lex = ok(LexiconStub::builtin())?;
    let target = ok(lex.embedding("rage"))?.to_vec();
    let trace = ok(refine("an angry scene", &target, &lex, &lex, 5, DEFAULT_EPS_CONV))?;
    ensure!(trace.final_emotion() == Some("rage"), "ended on {:?}", trace.final_emotion());
    ensure!(trace.iterations.len() <= 3, "{} iterations", trace.iterations.len());
    ensure!(trace.converged, "did not converge: {:?}", trace.stop_reason);
    let mut prev = trace.initial_similarity;
    for s in &trace.iterations {
        ensure!(s.similarity > prev, "similarity did not increase at iteration {}", s.iteration);
        prev = s.similarity;
    }
    for max_iters in 1..=4 {
        for (prompt, word) in [("an angry scene", "serenity"), ("a quiet street", "grief"), ("so scared", "awe")] {
            let t = ok(refine(prompt, ok(lex.embedding(word))?, &lex, &lex, max_iters, DEFAULT_EPS_CONV))?;
            ensure!(t.rounds <= max_iters && t.iterations.len() <= max_iters, "budget {max_iters} exceeded");
            ensure!(
                t.stop_reason != StopReason::MaxIters || t.rounds == max_iters,
                "stopped on budget after {} of {max_iters} rounds",
                t.rounds
            );
        }
    }
    Ok(format!(
        "{:?} in {} accepted rewrite(s), similarity {:.3} -> {:.3}, offline lexicon",
        trace.final_prompt(),
        trace.iterations.len(),
        trace.initial_similarity,
        prev
    ))
}

// 8 ------------------------------------------------------------------------

fn latent_mapper() -> Outcome {
    let pairs = ok(synthetic_linear_pairs(1000, 64, 48, 0.01, &mut Rng::new(8)))?;
    let (train_set, held_out) = pairs.split_at(800);
    let cfg = TrainConfig {
        epochs: 500,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (mapper, _) = ok(train_mapper(train_set, &cfg, &MapperLossWeights::default()))?;
    let elapsed = start.elapsed();
    let cos = ok(mean_cosine(&mapper, held_out))?;
    ensure!(cos >= 0.99, "held-out cosine {cos}");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("held-out cosine {cos:.4}, {elapsed:.2?}"))
}

// 9 ------------------------------------------------------------------------

fn statistics_oracles() -> Outcome {
    ensure!(ok(cohen_kappa(&[0, 1, 1, 0, 1], &[0, 1, 1, 0, 1], 2))? == 1.0, "identical kappa");
    ensure!(ok(cohen_kappa(&[0, 0, 1, 1], &[1, 1, 0, 0], 2))? == -1.0, "complement kappa");
    let third = ok(cohen_kappa(&[0, 1, 0, 1, 0, 1], &[0, 1, 1, 1, 0, 0], 2))?;
    ensure!((third - 1.0 / 3.0).abs() < 1e-12, "kappa {third}");
    let hand = friedman_test(&ok(RatingMatrix::new(vec![vec![1.0, 2.0, 3.0]; 3]))?);
    ensure!((hand.chi2 - 6.0).abs() < 1e-9, "chi2 {}", hand.chi2);

    for x in [0.5, 3.0, 9.0] {
        let closed = (-x / 2.0f64).exp();
        ensure!((chi2_sf(x, 2.0) - closed).abs() < 1e-12, "chi-square survival at {x}");
    }

    let mut rng = Rng::new(99);
    let mut worst_exact: f64 = 0.0;
    let mut worst_asymptotic: f64 = 0.0;
    for _ in 0..10 {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4)).collect();
        let m = ok(RatingMatrix::new(rows.clone()))?;
        let observed = friedman_test(&m);
        let exact = observed.p_exact.ok_or("6x4 design should have an exact p-value")?;
        let p_perm = permutation_p(&rows, observed.chi2, 100_000, &mut rng);
        worst_exact = worst_exact.max((p_perm - exact).abs());
        worst_asymptotic = worst_asymptotic.max((p_perm - observed.p_value).abs());
    }
    ensure!(worst_exact <= 0.02, "exact p differs from the permutation oracle by {worst_exact:.4}");
    Ok(format!(
        "kappa exact, chi2 {:.1}, exact p within {worst_exact:.4} of the permutation oracle \
         (chi-square approximation within {worst_asymptotic:.4})",
        hand.chi2
    ))
}

/// Share of within-subject shuffles whose statistic reaches the observed one.
fn permutation_p(rows: &[Vec<f64>], observed: f64, draws: usize, rng: &mut Rng) -> f64 {
    let mut work = rows.to_vec();
    let mut hits = 0;
    for _ in 0..draws {
        for row in work.iter_mut() {
            rng.shuffle(row);
        }
        let m = RatingMatrix::new(work.clone()).expect("valid shape");
        if friedman_statistic(&m) >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

// 10 -----------------------------------------------------------------------

fn cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_emospace"))
        .args(args)
        .current_dir(dir)
        .env_remove("EMOSPACE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`emospace {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out.stdout)
}

fn determinism_and_round_trips() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let runs: [&[&str]; 7] = [
        &["synth", "--seed", "7", "--out", "data.emo"],
        &["train", "--seed", "7", "--epochs", "12", "--dataset", "data.emo", "--out", "model.emo"],
        &["guide", "--checkpoint", "model.emo", "--word", "rage", "--k", "4"],
        &["refine", "--prompt", "an angry scene", "--target", "rage"],
        &["trace", "--checkpoint", "model.emo", "--word", "grief", "--steps", "10"],
        &["stats", "kappa", "ann.csv"],
        &["stats", "friedman", "ratings.csv"],
    ];
    let files = ["data.emo", "model.emo", "model.emo.report.json"];
    let mut first: Option<Vec<Vec<u8>>> = None;
    for round in ["r0", "r1"] {
        let d = dir.path().join(round);
        std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
        std::fs::write(d.join("ann.csv"), "annotator,a,b,c,d\nx,0,1,2,1\ny,0,1,1,1\nz,2,1,2,0\n")
            .map_err(|e| e.to_string())?;
        std::fs::write(d.join("ratings.csv"), "subject,t1,t2,t3\ns1,1,2,3\ns2,2,1,3\ns3,1,3,2\ns4,1,2,3\n")
            .map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for args in &runs {
            outputs.push(cli(&d, args)?);
        }
        for f in files {
            outputs.push(std::fs::read(d.join(f)).map_err(|e| e.to_string())?);
        }
        match &first {
            None => first = Some(outputs),
            Some(reference) => {
                for (i, (a, b)) in reference.iter().zip(&outputs).enumerate() {
                    ensure!(a == b, "output {i} differs between identical runs");
                }
            }
        }
    }
    let d = dir.path();

    let ds = ok(data::load_dataset(d.join("r0/data.emo")))?;
    let again = ok(data::dataset_from_bytes(&data::dataset_to_bytes(&ds)))?;
    ensure!(again == ds, "dataset round trip changed values");
    let raw = std::fs::read(d.join("r0/model.emo")).map_err(|e| e.to_string())?;
    let ck = ok(data::checkpoint_from_bytes(&raw))?;
    ensure!(data::checkpoint_to_bytes(&ck) == raw, "checkpoint round trip changed bytes");
    ensure!(ck.train_config.seed == 7, "checkpoint echoes seed {}", ck.train_config.seed);

    let corrupt = corrupt_prototype(&ck);
    match data::checkpoint_from_bytes(&corrupt) {
        Err(EmoError::InvariantViolation(_)) => {}
        other => return Err(format!("corrupted checkpoint accepted: {other:?}")),
    }
    Ok(format!("{} commands byte-identical across runs, round trips bit-exact, corruption rejected", runs.len()))
}

/// Serialize a checkpoint whose first prototype is scaled off the unit sphere.
fn corrupt_prototype(ck: &Checkpoint) -> Vec<u8> {
    let good = data::checkpoint_to_bytes(ck);
    let row: Vec<u8> = ck.bank.prototype(0).iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    let at = good
        .windows(row.len())
        .position(|w| w == row.as_slice())
        .expect("prototype row present in payload");
    let mut bad = good;
    for chunk in bad[at..at + row.len()].chunks_exact_mut(4) {
        let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) * 1.5;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    bad
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("synthetic training", synthetic_training),
        ("merge/split dynamics", merge_split_dynamics),
        ("guidance contracts", guidance_contracts),
        ("attention reweighting", attention_reweighting),
        ("temporal blending", temporal_blending),
        ("prompt refinement", prompt_refinement),
        ("latent mapper", latent_mapper),
        ("statistics oracles", statistics_oracles),
        ("determinism and round trips", determinism_and_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
