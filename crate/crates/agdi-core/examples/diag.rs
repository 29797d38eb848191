//! Dev harness: probe gradient flow and attainable loss for one trigger.

use std::path::Path;

use agdi_core::forge::{build_trigger_specs, forge_with_aux, ForgeConfig, StepObs};
use agdi_core::model::{encode_image, generate, load_checkpoint, DecodeParams, Tokenizer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let eps_num: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16.0);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let spec_idx: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let gamma: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let tok = Tokenizer::standard();
    let base = load_checkpoint(Path::new("/tmp/agdi-cal/base.ckpt")).unwrap();
    let specs = build_trigger_specs(2, 42).unwrap();
    let spec = &specs[spec_idx];

    // What does the base currently say?
    let dp = DecodeParams {
        max_new_tokens: 10,
        ..DecodeParams::greedy()
    };
    let out = generate(&base, &spec.x_cle, &spec.q_trig, &dp).unwrap();
    println!(
        "q = {:?}\nbase answers: {:?} (target {:?})",
        tok.detokenize(&spec.q_trig).unwrap(),
        tok.detokenize(&out).unwrap(),
        tok.detokenize(&spec.a_tar).unwrap()
    );

    let cfg = ForgeConfig {
        steps,
        epsilon: eps_num / 255.0,
        gamma,
        lambda: 1.0,
        ..ForgeConfig::default()
    };
    let mut aux = base.clone_params();
    let mut last_print = 0usize;
    let mut obs = |o: &StepObs| {
        if o.step == 0 || o.step + 1 - last_print >= steps / 12 || o.step + 1 == steps {
            last_print = o.step + 1;
            println!(
                "step {:4}: res {:8.3} sem {:7.3} trig {:8.3}",
                o.step, o.l_res, o.l_sem, o.l_trig
            );
        }
    };
    let artifact = forge_with_aux(&mut aux, &base, spec, &cfg, Some(&mut obs)).unwrap();
    println!("converged: {}", artifact.converged);
    let out = generate(&base, &artifact.x_trig, &spec.q_trig, &dp).unwrap();
    println!("decode on trigger: {:?}", tok.detokenize(&out).unwrap());

    let e0 = encode_image(&base, &spec.x_cle).unwrap();
    let e1 = encode_image(&base, &artifact.x_trig).unwrap();
    let dot: f64 = e0.data().iter().zip(e1.data()).map(|(a, b)| a * b).sum();
    println!("embedding cos(clean, trig) = {dot:.4}");
    let linf = artifact
        .x_trig
        .data()
        .iter()
        .zip(spec.x_cle.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("|x_trig - x_cle|_inf = {:.4} ({:.1}/255)", linf, linf * 255.0);
}
