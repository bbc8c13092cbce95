// compare serf gradient-routing modes at reduced epochs
use vqssl::config::TrainConfig;
use vqssl::datagen::load_corpus;
use vqssl::evalsuite::linear_probe;
use vqssl::trainer::{fit, MetricsLog};

fn main() {
    let dir = std::env::temp_dir().join("vqssl_pilot_corpus");
    let corpus = load_corpus(&dir).unwrap();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    for (name, mutate) in [
        ("full-align", Box::new(|_c: &mut TrainConfig| {}) as Box<dyn Fn(&mut TrainConfig)>),
        ("full-vq_only", Box::new(|c: &mut TrainConfig| c.serf.grad_mode = vqssl::serf::SerfGradMode::VqOnly)),
        ("hphi-only", Box::new(|c: &mut TrainConfig| c.apply_variant_preset("hphi-only").unwrap())),
    ] {
        let mut cfg = TrainConfig::default();
        cfg.threads = 2;
        cfg.epochs = epochs;
        cfg.probe.fractions = vec![0.05];
        cfg.probe.seeds = 3;
        mutate(&mut cfg);
        let out = std::env::temp_dir().join(format!("serfprobe_{name}.ckpt"));
        let mut metrics = MetricsLog::in_memory();
        let state = fit(&cfg, &corpus, &out, &mut metrics).unwrap();
        let last = metrics.records.last().unwrap();
        let lp = linear_probe(&state, &corpus, &cfg.probe).unwrap();
        println!(
            "{name:<14}: LP@5% {:.4} {:?} | end l_hphi {:.4} l_qt {:.4} ppl ({:.1},{:.1},{:.1})",
            lp[0].mean(),
            lp[0].per_seed.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            last.loss.l_reg_hphi,
            last.loss.l_reg_qt,
            last.ppl[0], last.ppl[1], last.ppl[2]
        );
    }
}
