use std::time::Instant;
use voxdiff::diffusion::{DualDiffusionModel, ModelConfig, Phase, TrainConfig, Trainer};
use voxdiff::nn::Ctx;
use voxdiff::scene::gen::{generate_scene, GeneratorSpec};

#[test]
#[ignore]
fn profile_phase2_step() {
    let cfg = ModelConfig {
        base_channels: 16,
        visual_width: 16,
        attn_dim: 32,
        cond_width: 32,
        enc_hidden: 32,
        temb_dim: 32,
        ..ModelConfig::default()
    };
    let mut model = DualDiffusionModel::<f32>::new(cfg, 1).unwrap();
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(i, &GeneratorSpec::default()).unwrap()).collect();

    let scene = &scenes[0];
    let t0 = Instant::now();
    let (v_fg, v_bg) = model.render_features(scene, 0).unwrap();
    println!("render_features: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let mut cx = Ctx::new(&model.store, false);
    let conds = model.encoders.encode_scene(&mut cx, scene, 0).unwrap();
    println!("encode_scene: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let fused = model.fuse(&mut cx, &conds, &v_fg, &v_bg).unwrap();
    println!("fuse (embed+sfa fwd): {:?}", t0.elapsed());

    let t0 = Instant::now();
    let z = cx.g.constant(voxdiff::tensor::Tensor::zeros(&[3, 32, 32]));
    let pred = model.conditioned_eps(&mut cx, z, 500, &conds, &fused).unwrap();
    println!("conditioned_eps fwd (branches+unet): {:?}", t0.elapsed());

    let t0 = Instant::now();
    let loss = cx.g.mean(pred, None).unwrap();
    let _grads = cx.backward_collect(loss).unwrap();
    println!("backward: {:?}", t0.elapsed());
    println!("graph nodes: {}", cx.g.len());
    drop(cx);

    let tc = TrainConfig { phase: Phase::BranchTrain, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
    let mut tr = Trainer::new(&mut model, scenes, tc, 1).unwrap();
    tr.apply_phase();
    tr.step(0).unwrap();
    let t0 = Instant::now();
    for s in 1..4 {
        tr.step(s).unwrap();
    }
    println!("full step avg: {:?}", t0.elapsed() / 3);
}
