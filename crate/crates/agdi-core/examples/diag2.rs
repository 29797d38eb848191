//! Dev harness: measure the image-token channel into the decoder.

use std::path::Path;

use agdi_core::forge::build_trigger_specs;
use agdi_core::model::{encode_image, generate, load_checkpoint, DecodeParams, Tokenizer};
use agdi_core::Tensor;

fn main() {
    let tok = Tokenizer::standard();
    let base = load_checkpoint(Path::new("/tmp/agdi-cal/base.ckpt")).unwrap();
    let arch = base.arch.clone();
    let specs = build_trigger_specs(2, 42).unwrap();
    let spec = &specs[0];

    // Magnitudes: token embedding rows vs connector output.
    let emb = &base.get("tok_emb").unwrap().tensor;
    let w = arch.width;
    let row_norm = |id: u32| -> f64 {
        let r = &emb.data()[id as usize * w..(id as usize + 1) * w];
        r.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let iclr = tok.id("iclr").unwrap();
    let circle = tok.id("circle").unwrap();
    println!("|emb[iclr]| = {:.3}, |emb[circle]| = {:.3}", row_norm(iclr), row_norm(circle));

    let e = encode_image(&base, &spec.x_cle).unwrap();
    let conn_w = &base.get("connector.w").unwrap().tensor;
    let conn_b = &base.get("connector.b").unwrap().tensor;
    let d = arch.embed_dim;
    let mut img_tok = vec![0.0; w];
    for j in 0..w {
        let mut s = conn_b.data()[j];
        for i in 0..d {
            s += e.data()[i] * conn_w.data()[i * w + j];
        }
        img_tok[j] = s;
    }
    let img_norm: f64 = img_tok.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("|connector(E(x_cle))| = {img_norm:.3}");
    // Largest achievable connector output over the unit sphere: singular
    // values of connector.w bound it.
    let mut col_sq = vec![0.0; w];
    for i in 0..d {
        for j in 0..w {
            let v = conn_w.data()[i * w + j];
            col_sq[j] += v * v;
        }
    }
    let frob: f64 = col_sq.iter().sum::<f64>();
    println!("|connector.w|_F = {:.3}", frob.sqrt());

    // Channel probe: force the image token to equal emb[w] for a few words
    // by zeroing connector.w and setting connector.b to the embedding row.
    for word in ["iclr", "conference", "circle", "games"] {
        let id = tok.id(word).unwrap();
        let mut hacked = base.clone_params();
        {
            let cw = &mut hacked.get_mut("connector.w").unwrap().tensor;
            for v in cw.data_mut() {
                *v = 0.0;
            }
        }
        {
            let row: Vec<f64> = emb.data()[id as usize * w..(id as usize + 1) * w].to_vec();
            let cb = &mut hacked.get_mut("connector.b").unwrap().tensor;
            cb.data_mut().copy_from_slice(&row);
        }
        let dp = DecodeParams {
            max_new_tokens: 8,
            ..DecodeParams::greedy()
        };
        // Question: the trigger question (non-echo) and an echo-style probe.
        let out1 = generate(&hacked, &spec.x_cle, &spec.q_trig, &dp).unwrap();
        let q2 = tok.tokenize("say").unwrap();
        let out2 = generate(&hacked, &spec.x_cle, &q2, &dp).unwrap();
        println!(
            "img_tok=emb[{word}]: trigger-q -> {:?} | 'say' -> {:?}",
            tok.detokenize(&out1).unwrap(),
            tok.detokenize(&out2).unwrap()
        );
    }

    // Also: how big can E move under the epsilon ball? One-pixel probe.
    let mut x2 = spec.x_cle.clone();
    for v in x2.data_mut().iter_mut() {
        *v = (*v + 16.0 / 255.0).min(1.0);
    }
    let e2 = encode_image(&base, &x2).unwrap();
    let cos: f64 = e.data().iter().zip(e2.data()).map(|(a, b)| a * b).sum();
    println!("cos(E(x), E(x + eps*1)) = {cos:.4}");
    let _ = Tensor::zeros(&[1]);
}
