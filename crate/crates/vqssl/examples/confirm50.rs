// 50-epoch confirmation of the final defaults: full and no-momentum
use vqssl::config::TrainConfig;
use vqssl::datagen::load_corpus;
use vqssl::evalsuite::linear_probe;
use vqssl::trainer::{fit, MetricsLog};

fn main() {
    let dir = std::env::temp_dir().join("vqssl_pilot_corpus");
    let corpus = load_corpus(&dir).unwrap();
    for variant in [None, Some("no-momentum")] {
        let mut cfg = TrainConfig::default();
        cfg.threads = 2;
        cfg.epochs = 50;
        cfg.probe.fractions = vec![0.05];
        cfg.probe.seeds = 3;
        if let Some(v) = variant {
            cfg.apply_variant_preset(v).unwrap();
        }
        let tag = variant.unwrap_or("full");
        let out = std::env::temp_dir().join(format!("confirm_{tag}.ckpt"));
        let mut metrics = MetricsLog::in_memory();
        let t0 = std::time::Instant::now();
        let state = fit(&cfg, &corpus, &out, &mut metrics).unwrap();
        let em = |e: usize| {
            let r: Vec<f64> = metrics.records.iter().filter(|r| r.epoch == e).map(|r| r.loss.l_total).collect();
            r.iter().sum::<f64>() / r.len() as f64
        };
        let lp = linear_probe(&state, &corpus, &cfg.probe).unwrap();
        println!(
            "{tag}: wall {:.0}s | e0 {:.4} e49 {:.4} ratio {:.4} | ppl ({:.2},{:.2},{:.2}) | LP@5% {:.4} {:?}",
            t0.elapsed().as_secs_f64(),
            em(0), em(49), em(49) / em(0),
            state.last_ppl[0], state.last_ppl[1], state.last_ppl[2],
            lp[0].mean(),
            lp[0].per_seed.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
