use lgca::config::Config;
use lgca::eval::evaluate;
use lgca::model::SegModel;
use lgca::train::{eval_set, train, training_set};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let mut cfg = Config::desk();
    cfg.set("train.iterations", &iters.to_string()).unwrap();
    for kv in &args[2..] {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    let model = SegModel::new(&cfg).unwrap();
    let c = model.complexity(cfg.data.tile, cfg.data.tile);
    println!("params: {}  macs per forward at {}px: {:.3} G", c.params, cfg.data.tile, c.macs as f64 / 1e9);
    let data = training_set(&cfg).unwrap();
    println!("train tiles: {}", data.len());
    let t0 = Instant::now();
    let out = train(&model, &data, &cfg, None, |s, l, lr| {
        println!("step {s:5}  loss {l:.4}  lr {lr:.5}  [{:.1}s]", t0.elapsed().as_secs_f64());
    }).unwrap();
    println!("trained {iters} iters in {:.1}s ({:.2} s/iter)", t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64() / iters as f64);
    let ev = eval_set(&cfg).unwrap();
    let t1 = Instant::now();
    let res = evaluate(&model, &ev, &cfg).unwrap();
    println!("eval {} images in {:.1}s -> {}", ev.len(), t1.elapsed().as_secs_f64(), res.report.summary_line());
    let _ = out;
}
