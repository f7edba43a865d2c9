//! Trains each method on several seeds of the synthetic groups and prints
//! fairness, confidence-gap and attention-support summaries.
//!
//! Usage: `desk_study <config> <seeds> [methods] [key=value ...]`

use gabn::config::RunConfig;
use gabn::evaluation::run_arm;
use gabn::training::Method;

fn main() -> gabn::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let text = match args.get(1) {
        Some(path) => std::fs::read_to_string(path).expect("readable config"),
        None => String::new(),
    };
    let mut run = RunConfig::parse(&text)?;
    let seeds: u64 = args.get(2).map_or(Ok(5), |s| s.parse()).expect("seed count");
    let methods = match args.get(3) {
        Some(list) => list.split(',').map(Method::parse).collect::<gabn::Result<Vec<_>>>()?,
        None => Method::ALL.to_vec(),
    };
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').expect("override must be key=value");
        run.set(k, v)?;
    }
    for seed in 0..seeds {
        for &method in &methods {
            let r = run_arm(&run, method, seed)?;
            let acc: Vec<String> = r.report.accuracies.iter().map(|a| format!("{a:.1}")).collect();
            println!(
                "seed {seed} {:>8} {:4.0}s acc {} avg {:.2} std {:.2} gap {:.3} support {:?} ({}) L_ID {:.3}",
                method.name(),
                r.seconds,
                acc.join("/"),
                r.report.average,
                r.report.std,
                r.confidence_gap,
                r.support.values().collect::<Vec<_>>(),
                r.focus_group,
                r.final_l_id,
            );
        }
    }
    Ok(())
}
