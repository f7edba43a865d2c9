//! One pass/fail line per acceptance criterion. Runs as its own harness so
//! the shared desk study is trained once for criteria 6 to 8.
//!
//! Criteria 1 to 5 and 9 are correctness checks and fail the run. Criteria
//! 6 to 8 are measured outcomes of training; they are reported but only fail
//! the run when `GABN_STRICT_DESK=1`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::loss_oracles::{ce_oracle, random_logits, to_tensor, uniform_oracle, AngleCase};
use common::{central_differences, rel_error, uniform};
use gabn::config::RunConfig;
use gabn::data::{generate_synthetic_dataset, Split, SyntheticSpec};
use gabn::erasure::{apply_masks, erase_top_n, random_centers, top_n_centers, MaskConfig};
use gabn::evaluation::{run_arm, ArmResult};
use gabn::gam::{compute_gam, compute_gam_batch, GamMap};
use gabn::losses::{
    adversarial_uniform_loss, arcface_loss, combined_loss, confidence_balance_loss,
    discriminator_ce_loss, BatchConfidence, LossConfig, PenaltyK,
};
use gabn::metrics::{fairness_ser, fairness_std};
use gabn::models::{build_recognizer, forward, DiscriminatorConfig, Network, RecognizerConfig};
use gabn::training::{network_configs, sgd_update, train, BatchSampler, Method, TrainConfig};
use gabn::{ParamId, Targets, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn metric_reproduction() -> Outcome {
    let gabn = [95.78, 95.21, 94.51, 94.71];
    let base = [96.18, 94.67, 93.72, 93.98];
    let std = fairness_std(&gabn).map_err(|e| e.to_string())?;
    let base_std = fairness_std(&base).map_err(|e| e.to_string())?;
    let ser = fairness_ser(&gabn).map_err(|e| e.to_string())?;
    let base_ser = fairness_ser(&base).map_err(|e| e.to_string())?;
    // the printed 0.56 is the value cut at two decimals
    let std_2dp = (std * 100.0).floor() / 100.0;
    let ok = std_2dp == 0.56
        && (ser - 1.30).abs() <= 0.01
        && (base_ser - 1.65).abs() <= 0.01
        && (base_std - 1.11).abs() <= 0.02;
    require(
        ok,
        format!(
            "GABN STD {std:.6} (2dp {std_2dp:.2}) SER {ser:.4}; baseline STD {base_std:.4} SER {base_ser:.4}"
        ),
    )
}

fn loss_oracles() -> Outcome {
    const CASES: usize = 24;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut bad = Vec::new();
    for case in 0..CASES {
        let (n, races) = (1 + case % 5, 2 + case % 4);
        let rows = random_logits(&mut rng, n, races);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..races)).collect();
        let want: f64 =
            rows.iter().zip(&labels).map(|(z, &y)| ce_oracle(z, y)).sum::<f64>() / n as f64;
        let got = discriminator_ce_loss(&to_tensor(&rows), &labels).unwrap();
        if !close(got, want) {
            bad.push(format!("discriminator CE case {case}"));
        }

        let want = rows.iter().map(|z| uniform_oracle(z)).sum::<f64>() / n as f64;
        let got = adversarial_uniform_loss(&to_tensor(&rows)).unwrap();
        if !close(got, want) {
            bad.push(format!("uniform case {case}"));
        }
        for z in &rows {
            let l = adversarial_uniform_loss(&Tensor::new(vec![races], z.clone()).unwrap()).unwrap();
            if l < (races as f64).ln() - 1e-9 {
                bad.push(format!("Gibbs bound case {case}"));
            }
        }
        let flat = Tensor::new(vec![races], vec![rng.gen_range(-5.0..5.0); races]).unwrap();
        if (adversarial_uniform_loss(&flat).unwrap() - (races as f64).ln()).abs() > 1e-9 {
            bad.push(format!("uniform equality case {case}"));
        }

        let t = rng.gen_range(0.1..0.9);
        let p: Vec<f64> = (0..=case).map(|_| rng.gen_range(0.0..1.0)).collect();
        let want = p.iter().filter(|&&v| v >= t).count() as f64 / p.len() as f64;
        if !close(confidence_balance_loss(&BatchConfidence::new(p, t)).unwrap(), want) {
            bad.push(format!("confidence case {case}"));
        }

        let c = AngleCase::random(&mut rng, 0.0);
        let (e, w) = c.tensors();
        let arc = arcface_loss(&e, &w, &c.labels, &c.cfg).unwrap();
        if !close(arc, c.oracle()) {
            bad.push(format!("arcface case {case}"));
        }
        let plain = combined_loss(&e, &w, &c.labels, PenaltyK(0.0), &c.cfg).unwrap();
        if (plain - arc).abs() > 1e-12 {
            bad.push(format!("K = 0 identity case {case}"));
        }

        let k = rng.gen_range(0.0..2.0);
        let c = AngleCase::random(&mut rng, k);
        let (e, w) = c.tensors();
        let got = combined_loss(&e, &w, &c.labels, PenaltyK(k), &c.cfg).unwrap();
        if !close(got, c.oracle()) {
            bad.push(format!("combined case {case}"));
        }
    }
    require(
        bad.is_empty(),
        format!("{CASES} cases per loss, failures {bad:?}"),
    )
}

fn tiny_recognizer() -> RecognizerConfig {
    RecognizerConfig {
        input_channels: 2,
        input_height: 6,
        input_width: 6,
        stage_widths: vec![3, 4],
        embedding_dim: 5,
        num_classes: 4,
        scale: 4.0,
        margin: 0.3,
    }
}

fn gradient_suite() -> Outcome {
    let (checked, mut bad) = common::op_cases::op_gradient_failures(3, 1e-4);
    let rec = build_recognizer::<f64>(&tiny_recognizer(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for draw in 0..4 {
        let x = uniform(&mut rng, 2 * 36, -1.0, 1.0);
        let label = (draw % 2 == 1).then_some(draw % 4);
        let t_gam = |xs: &[f64]| {
            let img = Tensor::new(vec![1, 2, 6, 6], xs.to_vec()).unwrap();
            let labels = label.map(|l| vec![l]);
            compute_gam_batch(&rec, img, labels.as_deref()).unwrap().t_gam[0]
        };
        let numeric = central_differences(&x, t_gam);
        let want: Vec<f64> = (0..36).map(|p| numeric[p].abs().max(numeric[36 + p].abs())).collect();
        let img = Tensor::new(vec![2, 6, 6], x.clone()).unwrap();
        let map = compute_gam(&rec, &img, label).unwrap();
        worst = worst.max(rel_error(map.values(), &want));
    }
    if worst >= 1e-4 {
        bad.push(format!("end-to-end GAM: {worst:.3e}"));
    }
    require(
        bad.is_empty(),
        format!("{checked} op cases, 4 end-to-end draws (worst {worst:.2e}), failures {bad:?}"),
    )
}

fn erasure_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let levels = rng.gen_range(2..50);
        let values: Vec<f64> =
            (0..h * w).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let n = rng.gen_range(0..=(h * w).min(6));
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let want: Vec<_> = idx[..n].iter().map(|&i| (i / w, i % w)).collect();
        let map = GamMap::new(h, w, values).unwrap();
        if top_n_centers(&map, n).unwrap() != want {
            return Err(format!("top-N differs from sort on map {case}"));
        }
    }
    let span = |c: usize, len: usize, limit: usize| {
        let lo = c as i64 - (len / 2) as i64;
        let hi = c as i64 + (len - 1 - len / 2) as i64;
        (lo.max(0), hi.min(limit as i64 - 1))
    };
    for case in 0..300 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(3..24), rng.gen_range(3..24));
        let cfg = MaskConfig {
            n_mask: rng.gen_range(1..5),
            h_mask: rng.gen_range(1..=h),
            w_mask: rng.gen_range(1..=w),
            fill_value: -7.5,
        };
        let img =
            Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| 1.0 + i as f64).collect()).unwrap();
        let centers = random_centers(h, w, cfg.n_mask, &mut rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(case);
        let (out, placements) = apply_masks(&img, &centers, &cfg, &mut mask_rng).unwrap();
        for r in 0..h {
            for col in 0..w {
                let inside = placements.iter().any(|p| {
                    let (r0, r1) = span(p.center.0, p.height, h);
                    let (c0, c1) = span(p.center.1, p.width, w);
                    (r0..=r1).contains(&(r as i64)) && (c0..=c1).contains(&(col as i64))
                });
                for ch in 0..c {
                    let i = (ch * h + r) * w + col;
                    let ok = if inside {
                        out.data()[i] == -7.5
                    } else {
                        out.data()[i].to_bits() == img.data()[i].to_bits()
                    };
                    if !ok {
                        return Err(format!("mask case {case} pixel ({ch},{r},{col})"));
                    }
                }
            }
        }
    }
    let img = Tensor::new(vec![3, 16, 16], (0..768).map(|i| i as f64).collect()).unwrap();
    let map = GamMap::new(16, 16, (0..256).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
    let cfg = MaskConfig::for_image(16, 16);
    let run = |seed| erase_top_n(&img, &map, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    require(
        run(5) == run(5),
        "1000 maps against sort, 300 images against pixel scan, seeded repeat".into(),
    )
}

fn ablation_identity() -> Outcome {
    let ds = generate_synthetic_dataset(&SyntheticSpec {
        groups: 2,
        ids_per_group: 4,
        eval_ids_per_group: 1,
        images_per_id: 4,
        side: 16,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let rec = RecognizerConfig {
        stage_widths: vec![4, 8],
        embedding_dim: 8,
        ..RecognizerConfig::default()
    };
    let disc = DiscriminatorConfig {
        stage_widths: vec![4, 4],
        hidden: 8,
        ..DiscriminatorConfig::default()
    };
    let cfg = Method::Baseline.configure(&TrainConfig {
        epochs: 1,
        steps_per_epoch: 20,
        batch_size: 8,
        lr: 0.05,
        milestones: vec![],
        seed: 11,
        mask: MaskConfig::for_image(16, 16),
        loss: LossConfig {
            scale: 16.0,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    });
    let out = train(&cfg, &ds, &rec, &disc, None).map_err(|e| e.to_string())?;

    let (rec_cfg, _) = network_configs(&ds, &rec, &disc, &cfg);
    let mut net = build_recognizer::<f32>(&rec_cfg, cfg.seed).unwrap();
    let classes = ds.train_classes();
    let mut sampler = BatchSampler::new(ds.indices(Split::Train), cfg.seed);
    let mut velocity: BTreeMap<ParamId, Tensor<f32>> = BTreeMap::new();
    for _ in 0..cfg.steps_per_epoch {
        let idx = sampler.next_batch(cfg.batch_size);
        let labels: Vec<usize> = idx.iter().map(|&i| classes[&ds.identities[i]]).collect();
        let mut pass = forward(&net, ds.batch(&idx)).unwrap();
        let tape = &mut pass.tape;
        let head = tape.l2_normalize(pass.params[net.head().0]).unwrap();
        let cos = tape.matmul_nt(pass.output, head).unwrap();
        let logits = tape
            .margin_logits(cos, Some(&labels), rec_cfg.scale as f32, rec_cfg.margin as f32, 0.0)
            .unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss, Targets::PARAMS).unwrap().params;
        let ids: Vec<ParamId> = net.params().ids().collect();
        for id in ids {
            let p = net.params_mut().get_mut(id);
            let v = velocity.entry(id).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let g = grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
            sgd_update(p, &g, v, cfg.lr, cfg.momentum, cfg.weight_decay).unwrap();
        }
    }
    let mut tensors = 0;
    for ((_, name, a), (_, _, b)) in out.state.recognizer.params().iter().zip(net.params().iter()) {
        if !a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            return Err(format!("parameter {name} differs after 20 steps"));
        }
        tensors += 1;
    }
    Ok(format!("20 steps, {tensors} parameter tensors bitwise equal"))
}

/// Trains every method on five seeds of the desk configuration.
fn desk_study() -> Result<Vec<ArmResult>, String> {
    let run = RunConfig::parse(include_str!("../../../configs/desk.conf")).map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for seed in 0..5 {
        for method in Method::ALL {
            let r = run_arm(&run, method, seed).map_err(|e| e.to_string())?;
            println!(
                "  seed {seed} {:>8}: STD {:.2} gap {:.3} support {} ({:.0}s)",
                method.name(),
                r.report.std,
                r.confidence_gap,
                r.support[&r.focus_group],
                r.seconds
            );
            results.push(r);
        }
    }
    Ok(results)
}

fn per_method(study: &[ArmResult], f: impl Fn(&ArmResult) -> f64) -> BTreeMap<&'static str, f64> {
    Method::ALL
        .iter()
        .map(|&m| {
            let v = study.iter().filter(|r| r.method == m).map(&f).collect();
            (m.name(), median(v))
        })
        .collect()
}

fn debias_effect(study: &[ArmResult]) -> Outcome {
    let std = per_method(study, |r| r.report.std);
    let ok = std["gabn"] < std["baseline"] && std["sfre"] < std["random"];
    require(
        ok,
        format!(
            "median STD gabn {:.3} vs baseline {:.3}; sfre {:.3} vs random {:.3}",
            std["gabn"], std["baseline"], std["sfre"], std["random"]
        ),
    )
}

fn confidence_gap(study: &[ArmResult]) -> Outcome {
    let gap = per_method(study, |r| r.confidence_gap);
    require(
        gap["gabn"] < gap["baseline"],
        format!("median final gap gabn {:.4} vs baseline {:.4}", gap["gabn"], gap["baseline"]),
    )
}

fn support_expansion(study: &[ArmResult]) -> Outcome {
    let support = per_method(study, |r| r.support[&r.focus_group] as f64);
    require(
        support["gabn"] > support["baseline"],
        format!(
            "median support on the most localized group gabn {:.0} vs baseline {:.0}",
            support["gabn"], support["baseline"]
        ),
    )
}

const MICRO: &str = "\
side = 32
ids_per_group = 4
eval_ids_per_group = 2
images_per_id = 4
stage_widths = 4, 8
embedding_dim = 16
disc_widths = 4, 4
disc_hidden = 8
epochs = 1
steps_per_epoch = 3
batch_size = 8
s = 16
pairs_per_group = 20
";

fn gabn_cmd(args: &[&str], paths: &[&Path]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gabn"));
    cmd.env_remove("GABN_OUT_DIR").env("RUST_LOG", "warn").args(args).args(paths);
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn end_to_end_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conf = dir.path().join("micro.conf");
    std::fs::write(&conf, MICRO).map_err(|e| e.to_string())?;
    let run_dir = dir.path().join("run");
    let start = Instant::now();
    gabn_cmd(&["train", "--config"], &[&conf, Path::new("--out"), &run_dir])?;
    let took = start.elapsed();
    let ckpt = run_dir.join("final.gabn");
    gabn_cmd(&["eval", "--synthetic", "--checkpoint"], &[&ckpt])?;
    if !run_dir.join("report.csv").exists() {
        return Err("eval wrote no report.csv".into());
    }
    let images = dir.path().join("images");
    let spec = SyntheticSpec {
        side: 32,
        ids_per_group: 4,
        eval_ids_per_group: 2,
        images_per_id: 2,
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(&spec)
        .and_then(|ds| ds.export(&images))
        .map_err(|e| e.to_string())?;
    let gam_dir = dir.path().join("gam");
    gabn_cmd(
        &["gam", "--average-by-group", "--checkpoint"],
        &[&ckpt, Path::new("--images"), &images, Path::new("--out"), &gam_dir],
    )?;
    if !gam_dir.join("average_group0.pgm").exists() {
        return Err("gam wrote no group average".into());
    }
    require(
        took < Duration::from_secs(60),
        format!("train exit 0 in {} ms, eval and gam succeeded", took.as_millis()),
    )
}

fn main() {
    let started = Instant::now();
    let strict_desk = std::env::var("GABN_STRICT_DESK").is_ok_and(|v| v == "1");
    let (mut failed, mut fatal) = (0, 0);
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                if !(6..=8).contains(&n) || strict_desk {
                    fatal += 1;
                }
                ("FAIL", d)
            }
        };
        println!("criterion {n} {name}: {verdict} ({detail})");
    };
    report(1, "metric reproduction", metric_reproduction());
    report(2, "loss oracles", loss_oracles());
    report(3, "gradient suite", gradient_suite());
    report(4, "erasure properties", erasure_properties());
    report(5, "ablation identity", ablation_identity());
    let study = desk_study();
    match &study {
        Ok(s) => {
            report(6, "desk de-bias effect", debias_effect(s));
            report(7, "confidence gap narrowing", confidence_gap(s));
            report(8, "GAM support expansion", support_expansion(s));
        }
        Err(e) => {
            report(6, "desk de-bias effect", Err(e.clone()));
            report(7, "confidence gap narrowing", Err(e.clone()));
            report(8, "GAM support expansion", Err(e.clone()));
        }
    }
    report(9, "end-to-end smoke", end_to_end_smoke());
    println!("acceptance: {} of 9 passed in {:.0}s", 9 - failed, started.elapsed().as_secs_f64());
    if fatal > 0 {
        std::process::exit(1);
    }
}
