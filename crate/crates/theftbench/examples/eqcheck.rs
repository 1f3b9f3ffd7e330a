//! Scratch diagnostics: gradcheck failure census + VA1 detection anatomy.
use theftbench::attack::vanilla_scale;
use theftbench::dataio::{load_dataset, DailyLoadVector, Label, Origin, SLOTS_PER_DAY};
use theftbench::nnengine::{architecture, finite_difference_check, TrainedModel};
use theftbench::rng::stream_rng;
use rand::Rng;

fn main() {
    // Part 1: replicate criterion 1's sampling, count failures per preset.
    let presets = ["f_fnn", "fp_fnn", "f_cnn", "fp_cnn", "f_rnn_small", "fp_rnn_small"];
    for (pi, preset) in presets.iter().enumerate() {
        let model =
            TrainedModel::new_initialized(architecture(preset).unwrap(), 42 + pi as u64).unwrap();
        let mut fails = Vec::new();
        let mut worst: f64 = 0.0;
        for input in 0..20u64 {
            let mut rng = stream_rng(4100 + input, pi as u64);
            let scale = if input % 4 == 0 { 0.05 } else { 2.0 };
            let x = DailyLoadVector::new(
                (0..SLOTS_PER_DAY).map(|_| rng.random_range(0.0..scale)).collect(),
                Origin::Unspecified,
            )
            .unwrap();
            let y = if input % 2 == 0 { Label::Theft } else { Label::Normal };
            let err = finite_difference_check(&model, &x, y, 1e-4).unwrap();
            if err >= 1e-4 {
                fails.push(format!("{input}:{err:.1e}"));
            }
            worst = worst.max(err);
        }
        println!("{preset}: fails [{}] worst {worst:.2e}", fails.join(" "));
    }

    // Part 2: VA1 detection by alpha, split away-ish vs occupied base days.
    let model = TrainedModel::load(std::path::Path::new(
        "/root/crate/target/tmp/acceptance/f_fnn.json",
    ))
    .unwrap();
    let ds = load_dataset(std::path::Path::new(
        "/root/crate/target/tmp/acceptance/d_eval.csv",
    ))
    .unwrap();
    let normals: Vec<&DailyLoadVector> = ds
        .samples
        .iter()
        .filter(|(_, l)| *l == Label::Normal)
        .map(|(v, _)| v)
        .take(1000)
        .collect();
    for k in 1..=9 {
        let alpha = k as f64 / 10.0;
        let (mut det_low, mut n_low, mut det_high, mut n_high) = (0, 0, 0, 0);
        for v in &normals {
            let scaled = vanilla_scale(v, alpha).unwrap();
            let theft = model.classify(&scaled).unwrap() == Label::Theft;
            if v.l1() < 6.0 {
                n_low += 1;
                det_low += theft as usize;
            } else {
                n_high += 1;
                det_high += theft as usize;
            }
        }
        println!(
            "alpha {alpha}: away-base det {det_low}/{n_low}, occupied-base det {det_high}/{n_high}"
        );
    }
}
