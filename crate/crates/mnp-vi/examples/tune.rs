//! Scratch harness: fit one simulated dataset under a chosen schedule and
//! print recovery diagnostics. Drive it with key=value args, e.g.
//!
//! cargo run -p mnp-vi --example tune -- seed=1 epochs=400 bs=0.1 be=0.01

use mnp_vi::eval::{rmse, train_test_split};
use mnp_vi::model::ChoiceDataset;
use mnp_vi::sim::{DesignLayout, SimConfig};
use mnp_vi::surrogate::SurrogateScheme;
use mnp_vi::train::{fit, TrainConfig};

fn main() {
    let mut seed = 1u64;
    let mut n = 5000usize;
    let mut d = 3usize;
    let mut epochs = 400usize;
    let mut bs = 0.1f64;
    let mut be = 0.01f64;
    let mut tol = 1e-12f64;
    let mut window = 200usize;
    let mut scheme = SurrogateScheme::Combined;
    let mut lr = 0.001f64;
    let mut batch = 500usize;
    let mut draws: Option<usize> = None;
    let mut split = true;

    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("args are key=value");
        match k {
            "seed" => seed = v.parse().unwrap(),
            "n" => n = v.parse().unwrap(),
            "d" => d = v.parse().unwrap(),
            "epochs" => epochs = v.parse().unwrap(),
            "bs" => bs = v.parse().unwrap(),
            "be" => be = v.parse().unwrap(),
            "tol" => tol = v.parse().unwrap(),
            "window" => window = v.parse().unwrap(),
            "scheme" => scheme = v.parse().unwrap(),
            "lr" => lr = v.parse().unwrap(),
            "batch" => batch = v.parse().unwrap(),
            "draws" => draws = Some(v.parse().unwrap()),
            "split" => split = v.parse().unwrap(),
            other => panic!("unknown key {other}"),
        }
    }

    let layout = if d == 3 { DesignLayout::Paper3Alt } else { DesignLayout::Generic };
    let sim = SimConfig { n, d, layout, seed, true_a: None, true_delta_sigma: None };
    let (data, truth) = mnp_vi::sim::simulate(&sim).expect("simulate");

    let train_data: ChoiceDataset = if split {
        let (train_idx, _) = train_test_split(n, seed);
        data.subset(&train_idx)
    } else {
        data.clone()
    };

    let config = TrainConfig {
        learning_rate: lr,
        beta_start: bs,
        beta_end: be,
        batch_size: batch,
        utility_samples: draws,
        max_epochs: epochs,
        window,
        tolerance: tol,
        seed,
        ..TrainConfig::default()
    };

    let fitres = fit(&train_data, scheme, &config).expect("fit");
    let est = fitres.model_params();
    let r = rmse(&est, &truth).expect("rmse");

    let t = fitres.trace.len();
    let w = window.min(t / 2).max(1);
    let first = fitres.trace.mean_total(0..w);
    let last = fitres.trace.mean_total(t - w..t);
    let bar = est.delta_sigma_bar();
    println!(
        "seed={seed} scheme={scheme} bs={bs} be={be} epochs={epochs} steps={} conv={} secs={:.1} \
         rmse={:.4}",
        fitres.steps_run, fitres.converged, fitres.seconds, r
    );
    println!("  a       = {:?}", est.a.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("  a_true  = {:?}", truth.a);
    println!(
        "  dsb     = {:?}",
        bar.as_slice().iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
    println!(
        "  dsb_true= {:?}",
        truth.delta_sigma_bar().as_slice().iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
    println!(
        "  loss first_w={:.1} last_w={:.1} l1_last={:.3} l2_last={:.1} clamped={}",
        first,
        last,
        fitres.trace.records[t - 1].l1,
        fitres.trace.records[t - 1].l2,
        fitres.clamped_draws
    );
}
