use nar_core::data::{make_examples, Generator, Split, SyntheticSpec};
use nar_core::model::{
    forward_incremental, forward_logits, forward_train, raster_forward_train, KvCache, ModelParams,
    ParamLayout, SequencePlan, SlotInput,
};
use nar_core::{build_schedule, Error, GridShape, Mode, ModelConfig, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mode: Mode, dims: &[usize], vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        num_classes: 3,
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        mode,
        shape: GridShape::new(dims).unwrap(),
        dropout: 0.0,
    }
}

fn random_grid(shape: &GridShape, vocab: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    let tokens = (0..shape.num_tokens())
        .map(|_| rng.random_range(0..vocab as u16))
        .collect();
    TokenGrid::new(shape.clone(), tokens).unwrap()
}

#[test]
fn zeroed_heads_give_ln_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for vocab in [4, 9] {
        let c = config(Mode::Nar, &[3, 3], vocab);
        let mut p = ModelParams::<f64>::init(&c, 1).unwrap();
        p.zero_output_layers();
        let grid = random_grid(&c.shape, vocab, &mut rng);
        let out = forward_train(&p, &grid, 2, &SequencePlan::nar(&c.shape)).unwrap();
        assert!((out.loss - (vocab as f64).ln()).abs() < 1e-5);

        let rc = c.with_mode(Mode::Raster);
        let mut r = ModelParams::<f64>::init(&rc, 1).unwrap();
        r.zero_output_layers();
        let loss = raster_forward_train(&r, &grid, 0).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-5);
    }
}

#[test]
fn loss_term_count() {
    let c = config(Mode::Nar, &[2, 2], 4);
    let p = ModelParams::<f32>::init(&c, 0).unwrap();
    let grid = TokenGrid::filled(c.shape.clone(), 1);
    let out = forward_train(&p, &grid, 0, &SequencePlan::nar(&c.shape)).unwrap();
    let terms: usize = out.head_entries.iter().map(Vec::len).sum();
    assert_eq!(terms, 4 + 2);
    assert_eq!(out.head_logits.len(), 2);
    assert!(out.head_entries.iter().all(|e| e.len() == 3));
}

#[test]
fn mode_checks() {
    let c = config(Mode::Raster, &[2, 2], 4);
    let p = ModelParams::<f32>::init(&c, 0).unwrap();
    let grid = TokenGrid::filled(c.shape.clone(), 1);
    assert!(matches!(
        forward_train(&p, &grid, 0, &SequencePlan::nar(&c.shape)),
        Err(Error::ModeMismatch(_))
    ));
    let n = ModelParams::<f32>::init(&c.with_mode(Mode::Nar), 0).unwrap();
    assert!(raster_forward_train(&n, &grid, 0).is_err());
    let wrong = TokenGrid::filled(GridShape::new(&[3, 2]).unwrap(), 1);
    assert!(forward_train(&n, &wrong, 0, &SequencePlan::nar(&c.shape)).is_err());
}

#[test]
fn parameter_count_closed_form() {
    for mode in [Mode::Nar, Mode::NarSharedHead, Mode::Raster] {
        for dims in [vec![4, 4], vec![2, 3, 5]] {
            let c = config(mode, &dims, 11);
            let (v, cl, d, l) = (11, 3, 16, 2);
            let h = if mode == Mode::Nar { dims.len() } else { 1 };
            let block = 12 * d * d + 13 * d;
            let expected = v * d
                + (cl + 1) * d
                + dims.iter().sum::<usize>() * d
                + l * block
                + h * (block + 2 * d + d * v + v);
            assert_eq!(ParamLayout::new(&c).num_params(), expected);
            assert_eq!(
                ModelParams::<f32>::init(&c, 0).unwrap().num_params(),
                expected
            );
        }
    }
}

#[test]
fn disallowed_tokens_never_leak() {
    let c = config(Mode::Nar, &[4, 4], 8);
    let p = ModelParams::<f32>::init(&c, 5).unwrap();
    let plan = SequencePlan::nar(&c.shape);
    let schedule = build_schedule(&c.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let grid = random_grid(&c.shape, 8, &mut rng);
        let q = rng.random_range(1..plan.seq_len() - 1);
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
        other.set(&pos, (grid.get(&pos) + 1) % 8);
        let a = forward_logits(&p, &plan.inputs(&grid, 1), plan.mask(), 1).unwrap();
        let b = forward_logits(&p, &plan.inputs(&other, 1), plan.mask(), 1).unwrap();
        for (ha, hb) in a.iter().zip(&b) {
            for s in 0..plan.seq_len() {
                if schedule.slot_step(s).is_some_and(|x| x <= qs) || s == 0 {
                    assert_eq!(ha.row(s), hb.row(s), "slot {s} saw slot {k}");
                }
            }
        }
    }
}

fn incremental_matches_full(dims: &[usize], batch: usize) {
    let c = config(Mode::Nar, dims, 6);
    let p = ModelParams::<f32>::init(&c, 3).unwrap();
    let plan = SequencePlan::nar(&c.shape);
    let schedule = build_schedule(&c.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grids: Vec<TokenGrid> = (0..batch)
        .map(|_| random_grid(&c.shape, 6, &mut rng))
        .collect();
    let all: Vec<SlotInput> = grids
        .iter()
        .enumerate()
        .flat_map(|(i, g)| plan.inputs(g, i % 3))
        .collect();
    let full = forward_logits(&p, &all, plan.mask(), batch).unwrap();
    let seq = plan.seq_len();

    let mut cache = KvCache::new(&c, batch);
    let steps = (0..schedule.num_steps()).map(|s| schedule.step_slots(s));
    for slots in std::iter::once(0..1).chain(steps) {
        let inputs: Vec<SlotInput> = (0..batch)
            .flat_map(|b| all[b * seq + slots.start..b * seq + slots.end].to_vec())
            .collect();
        let mask = plan.mask().submask(slots.clone(), slots.end);
        let inc = forward_incremental(&p, &inputs, &mask, &mut cache).unwrap();
        for (hi, hf) in inc.iter().zip(&full) {
            for b in 0..batch {
                for (j, slot) in slots.clone().enumerate() {
                    let x = hi.row(b * slots.len() + j);
                    let y = hf.row(b * seq + slot);
                    for (u, v) in x.iter().zip(y) {
                        assert!((u - v).abs() < 1e-5, "slot {slot}: {u} vs {v}");
                    }
                }
            }
        }
    }
    assert_eq!(cache.rows(), seq);
}

#[test]
fn kv_cache_matches_full_forward() {
    incremental_matches_full(&[3, 3], 1);
    incremental_matches_full(&[3, 3], 3);
    incremental_matches_full(&[2, 3, 3], 2);
}

#[test]
fn incremental_rejects_bad_input() {
    let c = config(Mode::Nar, &[2, 2], 4);
    let p = ModelParams::<f32>::init(&c, 0).unwrap();
    let plan = SequencePlan::nar(&c.shape);
    let mut cache = KvCache::new(&c, 1);
    let mask = plan.mask().submask(0..1, 1);
    assert!(forward_incremental(&p, &[], &mask, &mut cache).is_err());
    let wrong = plan.mask().submask(1..2, 2);
    let cond = [SlotInput::Condition { class: 0 }];
    assert!(matches!(
        forward_incremental(&p, &cond, &wrong, &mut cache),
        Err(Error::CacheDesync(_))
    ));
    assert!(forward_incremental(&p, &cond, &mask, &mut cache).is_ok());
}

#[test]
fn null_class_and_token_ranges() {
    let c = config(Mode::Nar, &[2, 2], 4);
    let p = ModelParams::<f32>::init(&c, 0).unwrap();
    let mask = nar_core::AttentionMask::causal(1);
    assert!(forward_logits(&p, &[SlotInput::Condition { class: 3 }], &mask, 1).is_ok());
    assert!(forward_logits(&p, &[SlotInput::Condition { class: 4 }], &mask, 1).is_err());
}

#[test]
fn backbone_shared_between_modes() {
    let spec = SyntheticSpec {
        shape: GridShape::new(&[3, 3]).unwrap(),
        vocab_size: 6,
        num_classes: 3,
        generator: Generator::Shapes {
            max_rects: 2,
            bars: false,
        },
        seed: 0,
    };
    let ex = make_examples(&spec, Split::Eval, 0, 2);
    assert_eq!(ex.len(), 2);
    let nar = ParamLayout::new(&config(Mode::Nar, &[3, 3], 6));
    let raster = ParamLayout::new(&config(Mode::Raster, &[3, 3], 6));
    assert_eq!(nar.blocks.len(), raster.blocks.len());
    let shapes = |l: &ParamLayout| -> Vec<Vec<usize>> {
        l.entries
            .iter()
            .filter(|(n, _)| !n.starts_with("head."))
            .map(|(_, s)| s.clone())
            .collect()
    };
    assert_eq!(shapes(&nar), shapes(&raster));
}
