//! Dev harness: times pretraining and reports held-out accuracy and
//! encoder retrieval quality for candidate schedules.

use std::time::Instant;

use agdi_core::data::{gen_pretrain_data, gen_scene};
use agdi_core::model::{
    encode_image, encode_text, pretrain_base, Arch, PretrainSchedule, Role, TokenSeq, Tokenizer,
};
use agdi_core::rng::stream;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(250);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let tok = Tokenizer::standard();
    let arch = Arch::toy(tok.vocab_size());
    let data = gen_pretrain_data(scenes, 40, 42);
    println!(
        "scenes={} qa={} pairs={} holdout={}",
        scenes,
        data.qa.len(),
        data.pairs.len(),
        data.holdout.len()
    );

    let sched = PretrainSchedule {
        epochs,
        lr,
        accuracy_floor: 0.0,
        ..PretrainSchedule::default()
    };
    let t0 = Instant::now();
    let (params, report) = pretrain_base(&arch, &data, &sched, 42).unwrap();
    let dt = t0.elapsed();
    println!("pretrain took {:.1}s", dt.as_secs_f64());
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {i}: loss {l:.4}");
    }
    println!("holdout accuracy: {:.3}", report.holdout_accuracy);

    // Retrieval property: matched caption beats a random caption.
    let mut rng = stream(7, "retrieval");
    let mut wins = 0;
    let total = 60;
    let scenes: Vec<_> = (0..total).map(|_| gen_scene(&mut rng)).collect();
    for i in 0..total {
        let ei = encode_image(&params, &scenes[i].image).unwrap();
        let cap = agdi_core::data::caption_text(&scenes[i].facts);
        let other = agdi_core::data::caption_text(&scenes[(i + 17) % total].facts);
        if cap == other {
            wins += 1;
            continue;
        }
        let et = encode_text(&params, &tok.tokenize(&cap).unwrap()).unwrap();
        let eo = encode_text(&params, &tok.tokenize(&other).unwrap()).unwrap();
        let dot = |a: &agdi_core::Tensor, b: &agdi_core::Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        if dot(&ei, &et) > dot(&ei, &eo) {
            wins += 1;
        }
    }
    println!("retrieval: {wins}/{total}");

    // Accuracy by question type.
    let dp = agdi_core::model::DecodeParams::greedy();
    let mut by_type: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for s in &data.holdout {
        let q = TokenSeq::new(s.question.clone(), Role::Question);
        let out = agdi_core::model::generate(&params, &s.image, &q, &dp).unwrap();
        let q_text = tok.detokenize(&q).unwrap();
        let key = q_text.split_whitespace().take(2).collect::<Vec<_>>().join(" ");
        let e = by_type.entry(key).or_insert((0, 0));
        e.1 += 1;
        if out.ids == s.answer {
            e.0 += 1;
        }
    }
    for (k, (hit, tot)) in by_type {
        println!("  {k}: {hit}/{tot}");
    }
}
