//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nar_core::data::{make_examples, Generator, Split, SyntheticSpec};
use nar_core::model::{
    build_loss_on, forward_logits, read_checkpoint, write_checkpoint, SequencePlan,
};
use nar_core::numerics::{grad_check, Tensor};
use nar_core::sample::{
    apply_cfg, generate, generate_batch, generate_batch_uncached, generate_raster, mix_logits,
    position_rng, sample_token, SamplingConfig,
};
use nar_core::tokens::{decode_tokens, encode_tokens};
use nar_core::train::{ablate_single_head, overlap_nll, train_loop, TrainConfig};
use nar_core::{
    build_mask, build_schedule, step_count, GridShape, Mode, ModelConfig, ModelParams, TokenGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn config(mode: Mode, dims: &[usize], vocab: usize, dim: usize, blocks: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        num_classes: 3,
        embed_dim: dim,
        num_blocks: blocks,
        num_heads: 2,
        mode,
        shape: GridShape::new(dims).unwrap(),
        dropout: 0.0,
    }
}

fn scaled<T: nar_core::numerics::Scalar>(
    c: &ModelConfig,
    seed: u64,
    factor: f64,
) -> ModelParams<T> {
    let p = ModelParams::<T>::init(c, seed).unwrap();
    let tensors = p
        .tensors()
        .iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .map(|&x| T::from_f64(x.as_f64() * factor))
                .collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect();
    ModelParams::from_tensors(c.clone(), tensors).unwrap()
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn random_grid(shape: &GridShape, vocab: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    let tokens = (0..shape.num_tokens())
        .map(|_| rng.random_range(0..vocab) as u16)
        .collect();
    TokenGrid::new(shape.clone(), tokens).unwrap()
}

fn shapes_up_to(max: usize) -> Vec<GridShape> {
    let mut out = Vec::new();
    for a in 1..=max {
        for b in 1..=max {
            out.push(GridShape::new(&[a, b]).unwrap());
            for c in 1..=max {
                out.push(GridShape::new(&[a, b, c]).unwrap());
            }
        }
    }
    out
}

fn step_counts() -> Outcome {
    let mut report = Vec::new();
    for (dims, want) in [(vec![16, 16], 31), (vec![4, 16, 16], 34)] {
        let c = config(Mode::Nar, &dims, 16, 16, 1);
        let p = ModelParams::<f32>::init(&c, 0).unwrap();
        let (_, stats) = generate(&p, 0, &c.shape, &SamplingConfig::for_shape(&c.shape, 0))
            .map_err(|e| e.to_string())?;
        ensure(
            stats.forward_passes == want,
            format!("{dims:?}: {} passes", stats.forward_passes),
        )?;
        report.push(format!("{}={}", c.shape, stats.forward_passes));
    }
    let c = config(Mode::Raster, &[16, 16], 16, 16, 1);
    let p = ModelParams::<f32>::init(&c, 0).unwrap();
    let (_, stats) = generate_raster(&p, 0, &c.shape, &SamplingConfig::for_shape(&c.shape, 0))
        .map_err(|e| e.to_string())?;
    ensure(
        stats.forward_passes == 256,
        format!("raster {} passes", stats.forward_passes),
    )?;
    report.push(format!("raster 16x16={}", stats.forward_passes));
    Ok(report.join(", "))
}

fn schedule_oracle() -> Outcome {
    let shapes = shapes_up_to(6);
    for shape in &shapes {
        let mut oracle: Vec<Vec<usize>> = shape
            .raster_positions()
            .map(|p| p.coords().to_vec())
            .collect();
        oracle.sort_by_key(|c| (c.iter().sum::<usize>(), c.clone()));
        let got: Vec<Vec<usize>> = build_schedule(shape)
            .order()
            .iter()
            .map(|p| p.coords().to_vec())
            .collect();
        ensure(got == oracle, format!("order differs on {shape}"))?;
        let closed = shape.dims().iter().sum::<usize>() - shape.ndim() + 1;
        ensure(
            step_count(shape) == closed && build_schedule(shape).num_steps() == closed,
            format!("step count on {shape}"),
        )?;
    }
    Ok(format!("{} shapes", shapes.len()))
}

fn mask_oracle() -> Outcome {
    for dims in [vec![6, 6], vec![3, 4, 4]] {
        let shape = GridShape::new(&dims).unwrap();
        let schedule = build_schedule(&shape);
        let mask = build_mask(&schedule);
        let step = |slot: usize| -> usize { schedule.order()[slot - 1].coords().iter().sum() };
        let n = shape.num_tokens() + 1;
        ensure(mask.size() == n, "mask size")?;
        for q in 0..n {
            for k in 0..n {
                let want = match (q, k) {
                    (0, k) => k == 0,
                    (_, 0) => true,
                    (q, k) => step(k) <= step(q),
                };
                ensure(mask.allow(q, k) == want, format!("{shape} allow[{q}][{k}]"))?;
            }
        }
    }

    let c = config(Mode::Nar, &[4, 4], 8, 16, 2);
    let p = scaled::<f32>(&c, 5, 10.0);
    let plan = SequencePlan::nar(&c.shape);
    let schedule = build_schedule(&c.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cases = 0;
    while cases < 20 {
        let grid = random_grid(&c.shape, 8, &mut rng);
        let q = rng.random_range(1..plan.seq_len());
        let qs = schedule.slot_step(q).unwrap();
        let later: Vec<usize> = (1..plan.seq_len())
            .filter(|&k| schedule.slot_step(k).unwrap() > qs)
            .collect();
        if later.is_empty() {
            continue;
        }
        let k = later[rng.random_range(0..later.len())];
        let mut other = grid.clone();
        let pos = plan.position(k).unwrap().clone();
        other.set(&pos, (grid.get(&pos) + 1 + rng.random_range(0..7)) % 8);
        let a = forward_logits(&p, &plan.inputs(&grid, 1), plan.mask(), 1).unwrap();
        let b = forward_logits(&p, &plan.inputs(&other, 1), plan.mask(), 1).unwrap();
        for (ha, hb) in a.iter().zip(&b) {
            let same = ha
                .row(q)
                .iter()
                .zip(hb.row(q))
                .all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, format!("slot {q} saw slot {k}"))?;
        }
        cases += 1;
    }
    Ok("6x6 and 3x4x4 exhaustive, 20 leakage cases".into())
}

fn gradients() -> Outcome {
    let c = config(Mode::Nar, &[3, 3], 8, 32, 2);
    let plan = SequencePlan::for_config(&c);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let spec = SyntheticSpec {
            shape: c.shape.clone(),
            vocab_size: c.vocab_size,
            num_classes: c.num_classes,
            generator: Generator::Potts {
                coupling: 0.3,
                sweeps: 1,
                anisotropy: 1.0,
            },
            seed,
        };
        let examples = make_examples(&spec, Split::Train, 0, 2);
        let params = scaled::<f64>(&c, seed, 5.0);
        let wrt: Vec<usize> = (0..params.tensors().len()).collect();
        let err = grad_check(params.tensors(), &wrt, 1e-5, 64, seed, |g, ids| {
            Ok(build_loss_on(g, &c, ids.to_vec(), &examples, &plan, None)?.loss)
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    Ok(format!(
        "max relative error {worst:.2e} over 5 seeds x 64 coords"
    ))
}

fn kv_cache() -> Outcome {
    for dims in [vec![4, 4], vec![2, 3, 3]] {
        let c = config(Mode::Nar, &dims, 12, 16, 2);
        for seed in 0..10 {
            let p = scaled::<f32>(&c, seed, 25.0);
            let s = SamplingConfig {
                greedy: true,
                seed,
                ..SamplingConfig::default()
            };
            let classes = [0, 1, 2];
            let (a, _) = generate_batch(&p, &classes, &c.shape, &s).map_err(|e| e.to_string())?;
            let (b, _) =
                generate_batch_uncached(&p, &classes, &c.shape, &s).map_err(|e| e.to_string())?;
            ensure(a == b, format!("{dims:?} seed {seed}"))?;
        }
    }
    Ok("4x4 and 2x3x3, 10 seeds".into())
}

fn seeded(config: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = config.clone();
    c.seed = seed;
    c.data.seed = seed;
    c
}

fn learning(trained: &mut Option<(TrainConfig, ModelParams<f32>)>) -> Outcome {
    let base = TrainConfig::load(config_path("shapes8x8.json")).map_err(|e| e.to_string())?;
    let bound = 0.8 * (base.model.vocab_size as f64).ln();
    let mut nlls = Vec::new();
    for seed in 0..3 {
        let c = seeded(&base, seed);
        let (params, metrics) = train_loop(&c).map_err(|e| e.to_string())?;
        let nll = metrics.final_eval_nll().unwrap();
        nlls.push(nll);
        if trained.is_none() {
            *trained = Some((c, params));
        }
    }
    let text = format!(
        "eval NLL {} vs bound {bound:.3}",
        nlls.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(nlls.iter().all(|&x| x <= bound), text.clone())?;
    Ok(text)
}

fn ablation() -> Outcome {
    let base = TrainConfig::load(config_path("bars_ablation.json")).map_err(|e| e.to_string())?;
    let mut pairs = Vec::new();
    for seed in 0..3 {
        let r = ablate_single_head(&seeded(&base, seed)).map_err(|e| e.to_string())?;
        pairs.push((r.dimension_heads_nll, r.single_head_nll));
    }
    let text = format!(
        "per-axis heads vs shared head: {}",
        pairs
            .iter()
            .map(|(a, b)| format!("{a:.3}/{b:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(pairs.iter().all(|(a, b)| a <= b), text.clone())?;
    Ok(text)
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn mixing(trained: &Option<(TrainConfig, ModelParams<f32>)>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let v: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let abc = mix_logits(&[&v[0], &v[1], &v[2]]).unwrap();
        let cab = mix_logits(&[&v[2], &v[0], &v[1]]).unwrap();
        let bca = mix_logits(&[&v[1], &v[2], &v[0]]).unwrap();
        ensure(close(&abc, &cab, 1e-6) && close(&abc, &bca, 1e-6), "order")?;
        let twice = mix_logits(&[&v[0], &v[0]]).unwrap();
        let once = mix_logits(&[&v[0]]).unwrap();
        ensure(close(&twice, &once, 1e-12), "idempotence")?;
        let n = normalized(&v[0]);
        ensure(close(&mix_logits(&[&n]).unwrap(), &n, 1e-12), "identity")?;
    }

    let (config, params) = trained
        .as_ref()
        .ok_or("no trained checkpoint from the learning run")?;
    let eval = config.eval_set();
    let r = overlap_nll(params, &eval).map_err(|e| e.to_string())?;
    let text = format!(
        "mixed {:.4} vs best single {:.4} on {} targets",
        r.mixed_nll,
        r.best_single(),
        r.targets
    );
    ensure(r.mixed_nll <= r.best_single() + 0.05, text.clone())?;
    Ok(text)
}

fn sampler() -> Outcome {
    let uniform = SamplingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts = [0usize; 4];
    let draws = 40_000;
    for _ in 0..draws {
        counts[sample_token(&[0.0; 4], &uniform, &mut rng).unwrap() as usize] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    ensure(
        freqs.iter().all(|f| (f - 0.25).abs() <= 0.01),
        format!("frequencies {freqs:?}"),
    )?;

    let top1 = SamplingConfig {
        top_k: 1,
        ..SamplingConfig::default()
    };
    for _ in 0..1000 {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let argmax = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        ensure(
            sample_token(&v, &top1, &mut rng).unwrap() as usize == argmax,
            "top-1 differs from argmax",
        )?;
    }
    Ok(format!(
        "frequencies {}",
        freqs
            .iter()
            .map(|f| format!("{f:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    ))
}

fn cfg() -> Outcome {
    let sampling = SamplingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let cond: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
        let uncond: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
        for (scale, want) in [(1.0, &cond), (0.0, &uncond)] {
            let got = apply_cfg(&cond, &uncond, scale).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(&got) == bits(want), format!("scale {scale}"))?;
            let a = sample_token(&got, &sampling, &mut position_rng(trial, 0, 1, 2)).unwrap();
            let b = sample_token(want, &sampling, &mut position_rng(trial, 0, 1, 2)).unwrap();
            ensure(a == b, format!("scale {scale} sampled differently"))?;
        }
    }
    let out = apply_cfg(&[2.0, 0.0], &[0.0, 0.0], 2.0).unwrap();
    ensure(out == [4.0, 0.0], format!("arithmetic case {out:?}"))?;
    Ok("scale 1, scale 0 and [2,0]/[0,0]/2 -> [4,0]".into())
}

fn round_trips() -> Outcome {
    let c = config(Mode::Nar, &[3, 4], 9, 16, 2);
    let p = scaled::<f32>(&c, 3, 3.0);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &p).unwrap();
    let back = read_checkpoint(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure(back.config() == p.config(), "config changed")?;
    let same = p.tensors().iter().zip(back.tensors()).all(|(a, b)| {
        a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure(same, "tensors changed")?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for dims in [vec![5, 7], vec![2, 3, 4], vec![1, 1]] {
        let shape = GridShape::new(&dims).unwrap();
        let grid = random_grid(&shape, 60_000, &mut rng);
        let encoded = encode_tokens(&grid);
        let decoded = decode_tokens(&encoded).map_err(|e| e.to_string())?;
        ensure(decoded == grid, format!("tokens {dims:?}"))?;
        ensure(encode_tokens(&decoded) == encoded, "re-encoding differs")?;
    }

    let mut bad = bytes.clone();
    bad[20] ^= 1;
    ensure(
        read_checkpoint(bad.as_slice()).is_err(),
        "corruption accepted",
    )?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    fs::write(&path, &bad).unwrap();
    let code = Command::new(env!("CARGO_BIN_EXE_nar"))
        .args(["inspect", "--checkpoint", path.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .code();
    ensure(code == Some(2), format!("exit code {code:?}"))?;
    Ok("checkpoint and tokens lossless, corrupted checkpoint exits 2".into())
}

fn run(n: usize, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {n}: PASS ({detail}; {secs:.1}s)"),
        Err(detail) => println!("criterion {n}: FAIL ({detail}; {secs:.1}s)"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut trained = None;
    let results = [
        run(1, step_counts),
        run(2, schedule_oracle),
        run(3, mask_oracle),
        run(4, gradients),
        run(5, kv_cache),
        run(6, || learning(&mut trained)),
        run(7, ablation),
        run(8, || mixing(&trained)),
        run(9, sampler),
        run(10, cfg),
        run(11, round_trips),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
