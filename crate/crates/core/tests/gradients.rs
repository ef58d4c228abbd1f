use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_pager::model::{grad_check, gradients, FreezeMask, Model, ModelConfig, SelectionPlan};
use retro_pager::paging::{AugmentedSequence, TokenId};
use retro_pager::retriever::SelectionPolicy;
use retro_pager::training::{stage1_loss_tape, stage2_loss_tape, TrainConfig};

fn micro(seed: u64) -> Model {
    let cfg = ModelConfig { vocab_size: 13, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, page_size: 4, seed, ..Default::default() };
    Model::init(cfg).unwrap()
}

fn seq(model: &Model, n: usize, seed: u64) -> AugmentedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toks: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..12)).collect();
    AugmentedSequence::from_segments(&[&toks], 4, model.config.bookmark_token()).unwrap()
}

const EPS: f64 = 1e-5;

#[test]
fn stage1_loss_gradients_match_finite_differences() {
    let t = Instant::now();
    let model = micro(1);
    let s = seq(&model, 18, 2);
    let cfg = TrainConfig { policy: SelectionPolicy { k_pages: 2, sink_count: 1, local_count: 1 }, ..TrainConfig::stage1() };
    let mask = FreezeMask::stage1(&model.params);
    let r = grad_check(&model, Some(&mask), EPS, |tape, vars, m| Ok(stage1_loss_tape(tape, m, vars, &s, 2, &cfg)?.0)).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_err < 1e-3, "{} in {}", r.max_rel_err, r.worst);
    assert_eq!(r.frozen_max_abs, 0.0);
    assert!(t.elapsed().as_secs() < 30);
}

#[test]
fn stage2_loss_gradients_match_finite_differences() {
    let t = Instant::now();
    let model = micro(3);
    let s = seq(&model, 15, 4);
    let plans = [
        SelectionPlan::Retrieval(SelectionPolicy { k_pages: 1, sink_count: 1, local_count: 1 }),
        SelectionPlan::Full,
        SelectionPlan::Decode {
            base: Box::new(SelectionPlan::Retrieval(SelectionPolicy { k_pages: 1, sink_count: 1, local_count: 0 })),
            query_page: 2,
        },
    ];
    for plan in &plans {
        let r = grad_check(&model, None, EPS, |tape, vars, m| stage2_loss_tape(tape, m, vars, &s, plan, 0)).unwrap();
        assert!(r.max_rel_err < 1e-3, "{plan:?}: {} in {}", r.max_rel_err, r.worst);
    }
    assert!(t.elapsed().as_secs() < 30);
}

#[test]
fn frozen_backbone_gradient_is_exactly_zero() {
    let model = micro(5);
    let s = seq(&model, 20, 6);
    let cfg = TrainConfig { policy: SelectionPolicy { k_pages: 2, sink_count: 1, local_count: 0 }, ..TrainConfig::stage1() };
    let mask = FreezeMask::stage1(&model.params);
    let (_, g) = gradients(&model, Some(&mask), |tape, vars| Ok(stage1_loss_tape(tape, &model, vars, &s, 1, &cfg)?.0)).unwrap();
    for (i, t) in model.params.tensors.iter().enumerate() {
        if mask.is_trainable(i) {
            continue;
        }
        assert!(g.tensors[i].data.iter().all(|&x| x == 0.0), "{} has a gradient", t.name);
    }
    let moved = model.params.tensors.iter().enumerate().any(|(i, _)| mask.is_trainable(i) && g.max_abs(i) > 0.0);
    assert!(moved);
}
