#![allow(dead_code)]

use std::net::TcpListener;

use serde_json::{json, Value};

use s2s::optim::Optimizer;
use s2s::runner::{parse_config, Config};

/// Copy-task toy: vocab 16, length 8, batch 32, hidden 64, Adam 1e-3.
pub fn copy_config() -> Value {
    json!({
        "batch_size_per_gpu": 32,
        "optimizer": "Adam",
        "lr_policy": "constant",
        "lr_policy_params": {"learning_rate": 0.001},
        "encoder": "rnn",
        "encoder_params": {"hidden": 64, "src_emb_size": 64},
        "decoder": "rnn_attention",
        "decoder_params": {"hidden": 64, "tgt_emb_size": 64},
        "data_layer": "copy_task",
        "data_layer_params": {"vocab_size": 16, "seq_len": 8, "seed": 7},
        "max_steps": 3000,
        "max_decode_len": 12,
        "seed": 1
    })
}

/// Reverse task with variable lengths 1..=6 over 8 content tokens.
pub fn reverse_config() -> Value {
    json!({
        "batch_size_per_gpu": 32,
        "optimizer": "Adam",
        "lr_policy": "constant",
        "lr_policy_params": {"learning_rate": 0.003},
        "encoder": "rnn",
        "encoder_params": {"hidden": 48, "src_emb_size": 48},
        "decoder": "rnn_attention",
        "decoder_params": {"hidden": 48, "tgt_emb_size": 48},
        "data_layer": "reverse_task",
        "data_layer_params": {"vocab_size": 12, "seq_len": 6, "min_len": 1, "seed": 7, "eval_seed": 99},
        "max_steps": 400,
        "eval_examples": 200,
        "max_decode_len": 10,
        "seed": 1
    })
}

/// Shallow merge of `extra` into `base`.
pub fn merged(mut base: Value, extra: Value) -> Value {
    let m = base.as_object_mut().unwrap();
    for (k, v) in extra.as_object().unwrap() {
        m.insert(k.clone(), v.clone());
    }
    base
}

pub fn config(v: Value) -> Config {
    parse_config(&serde_json::to_vec(&v).unwrap()).unwrap()
}

/// Addresses on ports that were free a moment ago.
pub fn free_addresses(n: usize) -> Vec<String> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    listeners
        .iter()
        .map(|l| l.local_addr().unwrap().to_string())
        .collect()
}

/// Optimizer step count and slot bytes, for bit-exact comparisons.
pub fn optimizer_bytes(opt: &dyn Optimizer) -> (u64, Vec<(String, Vec<u8>)>) {
    (
        opt.steps(),
        opt.slots()
            .into_iter()
            .map(|(k, t)| (k, t.to_le_bytes()))
            .collect(),
    )
}
