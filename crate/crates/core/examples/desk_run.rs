//! Runs the desk pipeline for the seeds given on the command line and
//! prints the metrics, e.g. `cargo run --example desk_run -p zsq-core -- 0 1 2`.

use std::time::Instant;

use zsq_core::train::{load_datasets, pretrain_fp, run_after_pretrain, TrainConfig};

fn main() -> zsq_core::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|s| s.parse().ok())
        .collect();
    let base = match std::env::var("ZSQ_CONFIG") {
        Ok(p) => TrainConfig::from_json(&std::fs::read_to_string(p)?)?,
        Err(_) => TrainConfig::desk(),
    };
    for seed in if seeds.is_empty() { vec![0] } else { seeds } {
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        let t = Instant::now();
        let (train, test) = load_datasets(&cfg)?;
        let pre = pretrain_fp(&cfg, &train, &test)?;
        println!("seed {seed}: fp {:.4} in {:.1?}", pre.fp_top1, t.elapsed());
        let out = run_after_pretrain(&cfg, &pre, &test)?;
        let g = &out.gen_log;
        println!(
            "  gen bns {:.3} -> {:.3}, ama {:.3} -> {:.3}",
            g[0].bns,
            g[g.len() - 1].bns,
            g[0].ama,
            g[g.len() - 1].ama
        );
        let f = &out.ft_log;
        for r in f.iter().step_by((f.len() / 6).max(1)) {
            println!(
                "  ft {} lr {:.4} ce {:.4} tckd {:.4} nckd {:.4}",
                r.step, r.lr, r.ce, r.tckd, r.nckd
            );
        }
        let m = &out.metrics;
        println!(
            "  fp {:.4} pre {:.4} post {:.4} agree {:.3} disp {:.4}",
            m.fp_top1,
            m.q_top1_prefinetune,
            m.q_top1_postfinetune,
            m.synthetic.label_agreement,
            m.synthetic.dispersion
        );
        println!("  total {:.1?}", t.elapsed());
    }
    Ok(())
}
