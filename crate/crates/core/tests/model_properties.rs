mod common;

use common::grad::{randomized, sample};
use nextshot::caci::{caci_plan, modulation_set, ConditioningMode, PooledPrompts};
use nextshot::diffusion::{train_two_stage, StageMode, TrainConfig};
use nextshot::ham::build_ham;
use nextshot::layout::{build_layout, SegmentKind};
use nextshot::model::{block_forward, model_forward, read_checkpoint, write_checkpoint, ModelConfig, ModelWeights};
use nextshot::tensor::{masked_attention_blocks, Rng, Tensor};
use nextshot::world::{generate_dataset, PatternMix, Split};

fn perturb_rows(x: &Tensor, rows: std::ops::Range<usize>, rng: &mut Rng) -> Tensor {
    let mut y = x.clone();
    for r in rows {
        for v in y.row_mut(r) {
            *v += rng.normal();
        }
    }
    y
}

fn rows_equal(a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> bool {
    rows.into_iter().all(|r| a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

#[test]
fn one_block_isolates_text_segments() {
    use SegmentKind::*;
    let config = ModelConfig::tiny();
    let w = randomized(&config, 5);
    let s = sample(&w, 9, 0.6);
    let layout = &s.input.layout;
    let mask = build_ham(layout);
    let pooled = PooledPrompts::from_tokens(&s.input.tokens, layout);
    let mods = modulation_set(&caci_plan(ConditioningMode::Caci), layout, 0.6, &pooled, &w.adaln).unwrap();
    let d = config.hidden;
    let mut rng = Rng::new(1);
    let x = Tensor::randn(&[layout.total(), d], 1.0, &mut rng);
    let base = block_forward(&x, &mask, &mods, 0, &w.blocks[0], config.heads).unwrap();
    let cases =
        [(IndCond, vec![Rel, IndTgt, VisTgt]), (IndTgt, vec![Rel, IndCond, VisCond]), (Rel, vec![IndCond, IndTgt])];
    for (source, shielded) in cases {
        let moved = perturb_rows(&x, layout.range(source).unwrap(), &mut rng);
        let out = block_forward(&moved, &mask, &mods, 0, &w.blocks[0], config.heads).unwrap();
        for k in shielded {
            assert!(rows_equal(&base, &out, layout.range(k).unwrap()), "{source} leaked into {k}");
        }
        assert_ne!(base, out);
    }
}

#[test]
fn fresh_blocks_are_identity_maps() {
    let config = ModelConfig::tiny();
    let w = ModelWeights::init(&config, 3).unwrap();
    let s = sample(&w, 4, 0.8);
    let layout = &s.input.layout;
    let pooled = PooledPrompts::from_tokens(&s.input.tokens, layout);
    let mods = modulation_set(&caci_plan(ConditioningMode::SyncCond), layout, 0.8, &pooled, &w.adaln).unwrap();
    let x = Tensor::randn(&[layout.total(), config.hidden], 1.0, &mut Rng::new(2));
    for (b, bw) in w.blocks.iter().enumerate() {
        assert_eq!(block_forward(&x, &build_ham(layout), &mods, b, bw, config.heads).unwrap(), x);
    }
}

#[test]
fn fresh_model_ignores_the_noise_level() {
    let w = ModelWeights::init(&ModelConfig::tiny(), 3).unwrap();
    let mut s = sample(&w, 4, 0.2);
    let plan = caci_plan(ConditioningMode::SyncCond);
    let a = model_forward(&s.input, &plan, &w).unwrap();
    s.input.diffusion_t = 0.9;
    assert_eq!(model_forward(&s.input, &plan, &w).unwrap(), a);
}

#[test]
fn attention_is_equivariant_to_swaps_within_a_segment() {
    let layout = build_layout(2, 3, 3, 5, 5).unwrap();
    let mask = build_ham(&layout);
    let mut rng = Rng::new(4);
    let n = layout.total();
    let q = Tensor::randn(&[n, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[n, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[n, 4], 1.0, &mut rng);
    for kind in SegmentKind::ALL {
        let r = layout.range(kind).unwrap();
        let (i, j) = (r.start, r.end - 1);
        let swap = |t: &Tensor| {
            let mut u = t.clone();
            let (a, b) = (t.row(i).to_vec(), t.row(j).to_vec());
            u.row_mut(i).copy_from_slice(&b);
            u.row_mut(j).copy_from_slice(&a);
            u
        };
        let out = masked_attention_blocks(&q, &k, &v, mask.as_ref()).unwrap();
        let out_swapped = masked_attention_blocks(&swap(&q), &swap(&k), &swap(&v), mask.as_ref()).unwrap();
        assert!(swap(&out).max_abs_diff(&out_swapped) < 1e-5, "{kind}");
    }
}

#[test]
fn training_leaves_the_base_model_frozen() {
    let config = ModelConfig::tiny();
    let init = ModelWeights::init(&config, 2).unwrap();
    let data = generate_dataset(8, &PatternMix::uniform(), 2, Split::Train, config.image_size).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        raw_steps: Some(3),
        curated_steps: 0,
        stage: StageMode::RawOnly,
        ..TrainConfig::default()
    };
    let trained = train_two_stage(init.clone(), &data, &[], &cfg).unwrap().weights;
    let trainable: Vec<String> = init.trainable().into_iter().map(|(n, _)| n).collect();
    for ((name, before), (_, after)) in init.named_tensors().into_iter().zip(trained.named_tensors()) {
        if trainable.contains(&name) {
            assert_ne!(before, after, "{name} did not move");
        } else {
            assert_eq!(before, after, "{name} changed");
        }
    }
}

#[test]
fn trainable_set_is_adapters_and_modulation() {
    let w = ModelWeights::init(&ModelConfig::tiny(), 0).unwrap();
    let names: Vec<String> = w.trainable().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 2 * 4 * 2 + 2 * 2 + 2);
    assert!(names.iter().all(|n| n.contains("lora_") || n.starts_with("adaln.blocks") || n.starts_with("adaln.final")));
    let frozen = ModelWeights::init(&ModelConfig { train_adaln: false, ..ModelConfig::tiny() }, 0).unwrap();
    assert_eq!(frozen.trainable().len(), 16);
}

#[test]
fn checkpoint_reload_reproduces_outputs() {
    let w = randomized(&ModelConfig { use_rel: false, ..ModelConfig::tiny() }, 8);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &w).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    let s = sample(&w, 1, 0.5);
    let plan = caci_plan(ConditioningMode::Caci);
    assert_eq!(model_forward(&s.input, &plan, &w).unwrap(), model_forward(&s.input, &plan, &back).unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        ModelConfig { patch_size: 3, ..ModelConfig::tiny() },
        ModelConfig { heads: 3, ..ModelConfig::tiny() },
        ModelConfig { lora_rank: 0, ..ModelConfig::tiny() },
    ] {
        assert!(ModelWeights::init(&bad, 0).is_err());
    }
}
