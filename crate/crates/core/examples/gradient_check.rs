//! Compare analytic gradients of both training losses against central
//! finite differences on a micro model.
//!
//! `cargo run --release --example gradient_check`

use retro_pager::model::{grad_check, FreezeMask, Model, ModelConfig, SelectionPlan};
use retro_pager::paging::AugmentedSequence;
use retro_pager::retriever::SelectionPolicy;
use retro_pager::training::{stage1_loss_tape, stage2_loss_tape, TrainConfig};

fn main() -> retro_pager::Result<()> {
    let model = Model::init(ModelConfig { vocab_size: 13, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, page_size: 4, ..Default::default() })?;
    let tokens: Vec<u32> = (0..18).map(|i| (i * 7 + 3) % 12).collect();
    let seq = AugmentedSequence::from_segments(&[&tokens], 4, model.config.bookmark_token())?;
    let policy = SelectionPolicy { k_pages: 2, sink_count: 1, local_count: 1 };

    let cfg = TrainConfig { policy, ..TrainConfig::stage1() };
    let mask = FreezeMask::stage1(&model.params);
    let l1 = grad_check(&model, Some(&mask), 1e-5, |tape, vars, m| Ok(stage1_loss_tape(tape, m, vars, &seq, 2, &cfg)?.0))?;
    println!(
        "stage 1: {} entries checked, max rel err {:.2e} at {}, frozen gradient max {}",
        l1.checked, l1.max_rel_err, l1.worst, l1.frozen_max_abs
    );

    let plan = SelectionPlan::Retrieval(policy);
    let l2 = grad_check(&model, None, 1e-5, |tape, vars, m| stage2_loss_tape(tape, m, vars, &seq, &plan, 0))?;
    println!("stage 2: {} entries checked, max rel err {:.2e} at {}", l2.checked, l2.max_rel_err, l2.worst);
    Ok(())
}
