//! Dev harness: forge triggers against a cached base model and report
//! convergence and loss trajectories.

use std::path::Path;
use std::time::Instant;

use agdi_core::data::gen_pretrain_data;
use agdi_core::forge::{build_trigger_specs, forge_batch, ForgeConfig};
use agdi_core::model::{
    load_checkpoint, pretrain_base, save_checkpoint, Arch, PretrainSchedule, Tokenizer,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let n_images: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let gamma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let path = Path::new("/tmp/agdi-cal/base.ckpt");
    let base = if path.exists() {
        println!("loading cached base");
        load_checkpoint(path).unwrap()
    } else {
        let tok = Tokenizer::standard();
        let arch = Arch::toy(tok.vocab_size());
        let data = gen_pretrain_data(650, 40, 42);
        let sched = PretrainSchedule {
            epochs: 34,
            lr: 2.5e-3,
            ..PretrainSchedule::default()
        };
        let t0 = Instant::now();
        let (params, report) = pretrain_base(&arch, &data, &sched, 42).unwrap();
        println!(
            "pretrained in {:.0}s, holdout {:.3}",
            t0.elapsed().as_secs_f64(),
            report.holdout_accuracy
        );
        save_checkpoint(&params, path).unwrap();
        params
    };

    let specs = build_trigger_specs(n_images, 42).unwrap();
    println!("forging {} triggers, K={steps}, gamma={gamma}, lambda={lambda}", specs.len());
    let cfg = ForgeConfig {
        steps,
        gamma,
        lambda,
        ..ForgeConfig::default()
    };
    let t0 = Instant::now();
    let results = forge_batch(&base, &specs, &cfg);
    let dt = t0.elapsed().as_secs_f64();
    let mut converged = 0;
    for (spec, r) in specs.iter().zip(&results) {
        match r {
            Ok(a) => {
                if a.converged {
                    converged += 1;
                }
                println!(
                    "{}: converged={} trig[0]={:.3} trig[K-1]={:.3} sem[K-1]={:.3}",
                    spec.id,
                    a.converged,
                    a.trace.trig.first().unwrap_or(&f64::NAN),
                    a.trace.trig.last().unwrap_or(&f64::NAN),
                    a.trace.sem.last().unwrap_or(&f64::NAN),
                );
            }
            Err(e) => println!("{}: ERROR {e}", spec.id),
        }
    }
    println!(
        "converged {}/{} in {:.1}s ({:.2}s per trigger)",
        converged,
        results.len(),
        dt,
        dt / results.len() as f64
    );
}
