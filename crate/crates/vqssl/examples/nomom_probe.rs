// quick probe of the shared-weights variant dynamics
use vqssl::config::TrainConfig;
use vqssl::datagen::load_corpus;
use vqssl::evalsuite::linear_probe;
use vqssl::trainer::{fit, MetricsLog};

fn main() {
    let dir = std::env::temp_dir().join("vqssl_pilot_corpus");
    let corpus = load_corpus(&dir).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.threads = 2;
    cfg.probe.fractions = vec![0.05];
    cfg.probe.seeds = 3;
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    cfg.epochs = epochs;
    cfg.apply_variant_preset("no-momentum").unwrap();
    let out = std::env::temp_dir().join("nomom_probe.ckpt");
    let mut metrics = MetricsLog::in_memory();
    let state = fit(&cfg, &corpus, &out, &mut metrics).unwrap();
    for r in metrics.records.iter().step_by(32) {
        println!(
            "ep {:>2} l_total {:.4} l_sim {:.4} l_vq {:.4} ppl ({:.1},{:.1},{:.1})",
            r.epoch, r.loss.l_total, r.loss.l_sim, r.loss.l_vq, r.ppl[0], r.ppl[1], r.ppl[2]
        );
    }
    let lp = linear_probe(&state, &corpus, &cfg.probe).unwrap();
    println!("nomom LP@5%: {:.4} {:?}", lp[0].mean(), lp[0].per_seed);
    println!("final ppl {:?}", state.last_ppl);
}
