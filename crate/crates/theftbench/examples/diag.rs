//! Scratch diagnostics (not part of the suite): FP breakdown by normal L1
//! band and VA2 detection on a fine u grid for a given model.

use theftbench::attack::vanilla_uniform;
use theftbench::dataio::{load_dataset, Label};
use theftbench::nnengine::TrainedModel;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = TrainedModel::load(std::path::Path::new(&args[1])).unwrap();
    let ds = load_dataset(std::path::Path::new(&args[2])).unwrap();

    let mut bands = [(0usize, 0usize); 4]; // [0,2), [2,6), [6,15), [15,inf)
    for (v, l) in &ds.samples {
        if *l != Label::Normal {
            continue;
        }
        let idx = match v.l1() {
            x if x < 2.0 => 0,
            x if x < 6.0 => 1,
            x if x < 15.0 => 2,
            _ => 3,
        };
        bands[idx].1 += 1;
        if model.classify(v).unwrap() == Label::Theft {
            bands[idx].0 += 1;
        }
    }
    for (name, (fp, n)) in ["l1<2", "2-6", "6-15", ">=15"].iter().zip(bands) {
        println!("normals {name:>5}: fp {fp}/{n} = {:.3}", fp as f64 / n.max(1) as f64);
    }

    for u in [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0] {
        let mut theft = 0usize;
        let n = 400;
        for i in 0..n {
            let v = vanilla_uniform(u, 500 + i as u64).unwrap();
            if model.classify(&v).unwrap() == Label::Theft {
                theft += 1;
            }
        }
        println!("va2 u={u:<4}: det {:.3}", theft as f64 / n as f64);
    }
}
