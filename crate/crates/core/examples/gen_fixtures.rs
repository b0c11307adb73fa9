//! Writes the synthetic datasets under `fixtures/datasets/`.
//!
//! cargo run -p naq-core --example gen_fixtures -- <fixtures/datasets>

use std::f64::consts::PI;
use std::path::PathBuf;

use naq_core::dataset::{save_dataset, Labels, Split, Task, TimeSeriesDataset};

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn jitter(i: usize, t: usize, f: usize) -> f64 {
    0.05 * ((i as f64) * 7.13 + (t as f64) * 0.37 + (f as f64) * 1.91).sin()
}

fn har_split(per_class: usize, offset: usize) -> Split {
    let (t_len, d) = (206, 3);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..6 {
        for k in 0..per_class {
            let i = offset + c * per_class + k;
            let freq = 0.5 + c as f64 * 0.35;
            let amp = if c < 3 { 1.0 + 0.3 * c as f64 } else { 0.1 };
            let mut sample = Vec::with_capacity(t_len * d);
            for t in 0..t_len {
                for f in 0..d {
                    let phase = f as f64 * PI / 3.0 + k as f64 * 0.2;
                    let base = if c == 5 && f == 2 { 1.0 } else { 0.2 * (c as f64 - 2.5) };
                    let v = amp * (2.0 * PI * freq * t as f64 / 50.0 + phase).sin() + base + jitter(i, t, f);
                    sample.push(round4(v));
                }
            }
            x.push(sample);
            y.push(c);
        }
    }
    Split { x, y: Labels::Classes(y) }
}

fn har_tiny() -> TimeSeriesDataset {
    TimeSeriesDataset {
        name: "har_tiny".into(),
        task: Task::Classification,
        seq_length: 206,
        n_features: 3,
        train: har_split(4, 0),
        test: har_split(2, 100),
        class_names: Some(
            ["walking", "walking_upstairs", "walking_downstairs", "sitting", "standing", "laying"]
                .map(String::from)
                .to_vec(),
        ),
        description: "Synthetic tri-axial body acceleration windows for six daily activities.".into(),
        feature_descriptions: vec!["acc_x".into(), "acc_y".into(), "acc_z".into()],
    }
}

fn bidmc_split(n: usize, offset: usize) -> Split {
    let (t_len, d) = (400, 2);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for k in 0..n {
        let i = offset + k;
        let rate = 12.0 + (i % 8) as f64 * 1.5;
        let mut sample = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            let secs = t as f64 / 25.0;
            let resp = (2.0 * PI * rate / 60.0 * secs).sin();
            let ppg = (2.0 * PI * 1.2 * secs).sin() * (1.0 + 0.3 * resp);
            let ecg = (2.0 * PI * 1.2 * secs).cos().powi(9) + 0.1 * resp;
            sample.push(round4(ppg + jitter(i, t, 0)));
            sample.push(round4(ecg + jitter(i, t, 1)));
        }
        x.push(sample);
        y.push(rate);
    }
    Split { x, y: Labels::Values(y) }
}

fn bidmc_tiny() -> TimeSeriesDataset {
    TimeSeriesDataset {
        name: "bidmc_tiny".into(),
        task: Task::Regression,
        seq_length: 400,
        n_features: 2,
        train: bidmc_split(16, 0),
        test: bidmc_split(6, 50),
        class_names: None,
        description: "Synthetic PPG and ECG windows with the respiratory rate (breaths per minute) as target.".into(),
        feature_descriptions: vec!["PPG".into(), "ECG".into()],
    }
}

fn main() {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures/datasets"));
    for ds in [har_tiny(), bidmc_tiny()] {
        let dir = root.join(&ds.name);
        save_dataset(&dir, &ds).expect("fixture writes");
        println!("wrote {}", dir.display());
    }
}
