//! Independent brute-force oracles for the profiler, shape inference and
//! representative-series aggregation.

use proptest::prelude::*;

use naq_core::archir::{
    infer_shapes, layer_output, window_out_len, Activation, ArchitectureIR, LayerKind, LayerSpec, Padding, Shape,
    ShapeError, ALL_KINDS,
};
use naq_core::dataset::{quantile_bins, representative_series, Labels, Split, Task, TimeSeriesDataset};
use naq_core::profiler::{count_macs, count_params, layer_macs, layer_params};

const CASES: u32 = 256;

/// Counts every stored weight by walking the kernel tensors.
fn brute_params(spec: &LayerSpec, input: Shape) -> u64 {
    let c_in = input.channels;
    let units = spec.units.unwrap_or(0);
    let k = spec.kernel_size.unwrap_or(0);
    let mut n = 0u64;
    match spec.kind {
        LayerKind::Conv1D => {
            for _f in 0..units {
                for _c in 0..c_in {
                    for _t in 0..k {
                        n += 1;
                    }
                }
                n += 1;
            }
        }
        LayerKind::DepthwiseConv1D => {
            for _c in 0..c_in {
                for _t in 0..k {
                    n += 1;
                }
                n += 1;
            }
        }
        LayerKind::SeparableConv1D => {
            for _c in 0..c_in {
                for _t in 0..k {
                    n += 1;
                }
            }
            for _f in 0..units {
                for _c in 0..c_in {
                    n += 1;
                }
                n += 1;
            }
        }
        LayerKind::Lstm => {
            for _gate in 0..4 {
                for _u in 0..units {
                    for _x in 0..c_in {
                        n += 1;
                    }
                    for _h in 0..units {
                        n += 1;
                    }
                    n += 1;
                }
            }
        }
        LayerKind::Dense => {
            for _o in 0..units {
                for _i in 0..input.len * input.channels {
                    n += 1;
                }
                n += 1;
            }
        }
        LayerKind::BatchNorm => {
            for _c in 0..c_in {
                n += 4;
            }
        }
        _ => {}
    }
    n
}

/// Counts every multiply of one forward pass.
fn brute_macs(spec: &LayerSpec, input: Shape, output: Shape) -> u64 {
    let c_in = input.channels;
    let units = spec.units.unwrap_or(0);
    let k = spec.kernel_size.unwrap_or(0);
    let mut n = 0u64;
    match spec.kind {
        LayerKind::Conv1D => {
            for _pos in 0..output.len {
                for _f in 0..units {
                    for _t in 0..k {
                        for _c in 0..c_in {
                            n += 1;
                        }
                    }
                }
            }
        }
        LayerKind::DepthwiseConv1D => {
            for _pos in 0..output.len {
                for _c in 0..c_in {
                    for _t in 0..k {
                        n += 1;
                    }
                }
            }
        }
        LayerKind::SeparableConv1D => {
            for _pos in 0..output.len {
                for _c in 0..c_in {
                    for _t in 0..k {
                        n += 1;
                    }
                }
                for _f in 0..units {
                    for _c in 0..c_in {
                        n += 1;
                    }
                }
            }
        }
        LayerKind::Lstm => {
            for _step in 0..input.len {
                for _gate in 0..4 {
                    for _u in 0..units {
                        n += (c_in + units) as u64;
                    }
                }
            }
        }
        LayerKind::Dense => {
            for _o in 0..units {
                n += (input.len * input.channels) as u64;
            }
        }
        LayerKind::BatchNorm => {
            for _t in 0..output.len {
                n += output.channels as u64;
            }
        }
        _ => {}
    }
    n
}

fn layer_for(kind: LayerKind, units: usize, k: usize) -> LayerSpec {
    match kind {
        LayerKind::Conv1D => LayerSpec::conv1d(units, k),
        LayerKind::DepthwiseConv1D => LayerSpec::depthwise(k),
        LayerKind::SeparableConv1D => LayerSpec::separable(units, k),
        LayerKind::Lstm => LayerSpec::lstm(units, true),
        LayerKind::Dense => LayerSpec::dense(units, Activation::Relu),
        LayerKind::MaxPool1D => LayerSpec::max_pool(k),
        LayerKind::AvgPool1D => LayerSpec::avg_pool(k),
        other => LayerSpec::new(other),
    }
}

fn check_kind(kind: LayerKind, len: usize, c_in: usize, units: usize, k: usize, temporal: bool) {
    let spec = layer_for(kind, units, k);
    let input = if temporal { Shape::sequence(len, c_in) } else { Shape::flat(c_in) };
    let Ok(output) = layer_output(0, &spec, input) else {
        return;
    };
    assert_eq!(layer_params(&spec, input, output), brute_params(&spec, input), "{kind:?} params");
    assert_eq!(layer_macs(&spec, input, output), brute_macs(&spec, input, output), "{kind:?} macs");
}

macro_rules! formula_oracle {
    ($name:ident, $kind:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(CASES))]
            #[test]
            fn $name(len in 1usize..120, c_in in 1usize..24, units in 1usize..48, k in 1usize..9) {
                check_kind($kind, len, c_in, units, k, true);
            }
        }
    };
}

formula_oracle!(conv1d_matches_brute_force, LayerKind::Conv1D);
formula_oracle!(depthwise_matches_brute_force, LayerKind::DepthwiseConv1D);
formula_oracle!(separable_matches_brute_force, LayerKind::SeparableConv1D);
formula_oracle!(lstm_matches_brute_force, LayerKind::Lstm);
formula_oracle!(dense_on_sequence_matches_brute_force, LayerKind::Dense);
formula_oracle!(max_pool_matches_brute_force, LayerKind::MaxPool1D);
formula_oracle!(avg_pool_matches_brute_force, LayerKind::AvgPool1D);
formula_oracle!(global_pool_matches_brute_force, LayerKind::GlobalAvgPool1D);
formula_oracle!(batch_norm_matches_brute_force, LayerKind::BatchNorm);
formula_oracle!(dropout_matches_brute_force, LayerKind::Dropout);
formula_oracle!(flatten_matches_brute_force, LayerKind::Flatten);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]
    #[test]
    fn dense_on_flat_matches_brute_force(c_in in 1usize..512, units in 1usize..128) {
        check_kind(LayerKind::Dense, 1, c_in, units, 1, false);
    }
}

#[test]
fn formula_anchors() {
    let conv = LayerSpec::conv1d(16, 3);
    let input = Shape::sequence(206, 3);
    let out = layer_output(0, &conv, input).unwrap();
    assert_eq!(layer_params(&conv, input, out), 160);

    let dense = LayerSpec::dense(32, Activation::Relu);
    let input = Shape::flat(32);
    let out = layer_output(0, &dense, input).unwrap();
    assert_eq!(layer_params(&dense, input, out), 1056);
    assert_eq!(layer_macs(&dense, input, out), 1024);
}

fn chain_strategy() -> impl Strategy<Value = Vec<LayerSpec>> {
    let kind = prop::sample::select(ALL_KINDS.to_vec());
    let layer = (kind, 1usize..16, 1usize..6, 1usize..3, any::<bool>()).prop_map(|(kind, u, k, s, same)| {
        let mut l = layer_for(kind, u, k);
        if matches!(
            kind,
            LayerKind::Conv1D
                | LayerKind::DepthwiseConv1D
                | LayerKind::SeparableConv1D
                | LayerKind::MaxPool1D
                | LayerKind::AvgPool1D
        ) {
            l = l.with_strides(s).with_padding(if same { Padding::Same } else { Padding::Valid });
        }
        l
    });
    prop::collection::vec(layer, 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn valid_unit_stride_window_length(in_len in 1usize..500, k in 1usize..64) {
        let spec = LayerSpec::conv1d(4, k);
        match layer_output(0, &spec, Shape::sequence(in_len, 2)) {
            Ok(out) => prop_assert_eq!(out.len + k - 1, in_len),
            Err(ShapeError::ShapeUnderflow { kernel, in_len: got, .. }) => {
                prop_assert!(k > in_len);
                prop_assert_eq!((kernel, got), (k, in_len));
            }
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn strided_window_bounds(in_len in 1usize..500, k in 1usize..32, s in 1usize..8) {
        match window_out_len(in_len, k, s, Padding::Valid) {
            Some(out) => {
                prop_assert!((out - 1) * s + k <= in_len);
                prop_assert!(in_len < out * s + k);
            }
            None => prop_assert!(k > in_len),
        }
        prop_assert_eq!(window_out_len(in_len, k, s, Padding::Same), Some(in_len.div_ceil(s)));
    }

    #[test]
    fn shape_chain_is_consistent(layers in chain_strategy(), len in 1usize..80, c in 1usize..6) {
        let arch = ArchitectureIR::new(layers, (len, c), 2, Task::Classification);
        let mut cur = arch.input();
        let mut expected = Vec::new();
        let mut first_err = None;
        for (i, spec) in arch.layers.iter().enumerate() {
            match layer_output(i, spec, cur) {
                Ok(out) => {
                    expected.push((cur, out));
                    cur = out;
                }
                Err(e) => {
                    first_err = Some(e);
                    break;
                }
            }
        }
        match (infer_shapes(&arch), first_err) {
            (Ok(shapes), None) => {
                prop_assert_eq!(shapes.len(), arch.layers.len());
                for (s, (i, o)) in shapes.iter().zip(&expected) {
                    prop_assert_eq!((s.input, s.output), (*i, *o));
                }
                for w in shapes.windows(2) {
                    prop_assert_eq!(w[0].output, w[1].input);
                }
                let (per, total) = count_params(&arch).unwrap();
                prop_assert_eq!(per.iter().sum::<u64>(), total);
                let brute: u64 = arch.layers.iter().zip(&shapes).map(|(l, s)| brute_params(l, s.input)).sum();
                prop_assert_eq!(total, brute);
                let brute: u64 = arch.layers.iter().zip(&shapes).map(|(l, s)| brute_macs(l, s.input, s.output)).sum();
                prop_assert_eq!(count_macs(&arch).unwrap().1, brute);
            }
            (Err(e), Some(first)) => prop_assert_eq!(e, first),
            (got, want) => prop_assert!(false, "infer_shapes {got:?} vs stepwise {want:?}"),
        }
    }
}

fn dataset(task: Task, x: Vec<Vec<f64>>, y: Labels, t: usize, d: usize, classes: Option<Vec<String>>) -> TimeSeriesDataset {
    let test = Split {
        x: vec![x[0].clone()],
        y: match &y {
            Labels::Classes(c) => Labels::Classes(vec![c[0]]),
            Labels::Values(v) => Labels::Values(vec![v[0]]),
        },
    };
    TimeSeriesDataset {
        name: "synthetic".into(),
        task,
        seq_length: t,
        n_features: d,
        train: Split { x, y },
        test,
        class_names: classes,
        description: String::new(),
        feature_descriptions: (0..d).map(|f| format!("f{f}")).collect(),
    }
}

/// Per-timestamp mean and population std computed one cell at a time.
fn brute_mean_std(samples: &[&Vec<f64>], t: usize, f: usize, d: usize) -> (f64, f64) {
    let vals: Vec<f64> = samples.iter().map(|s| s[t * d + f]).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sample_strategy(t: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, t * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_representatives_match_brute_force(
        (t, d, n_classes, xs, ys) in (1usize..12, 1usize..4, 1usize..4).prop_flat_map(|(t, d, k)| {
            let n = 2 * k + 3;
            (
                Just(t),
                Just(d),
                Just(k),
                prop::collection::vec(sample_strategy(t, d), n),
                prop::collection::vec(0..k, n),
            )
        })
    ) {
        let mut ys = ys;
        for (c, y) in ys.iter_mut().take(n_classes).enumerate() {
            *y = c;
        }
        let names: Vec<String> = (0..n_classes).map(|c| format!("class{c}")).collect();
        let ds = dataset(Task::Classification, xs.clone(), Labels::Classes(ys.clone()), t, d, Some(names.clone()));
        let reps = representative_series(&ds, 4).unwrap();
        prop_assert_eq!(reps.len(), n_classes);
        for (c, rep) in reps.iter().enumerate() {
            prop_assert_eq!(&rep.group_label, &names[c]);
            let members: Vec<&Vec<f64>> = xs.iter().zip(&ys).filter(|(_, &y)| y == c).map(|(x, _)| x).collect();
            prop_assert_eq!(rep.support_count, members.len());
            for ti in 0..t {
                for f in 0..d {
                    let (m, s) = brute_mean_std(&members, ti, f, d);
                    prop_assert!((rep.mean_at(ti, f) - m).abs() <= 1e-9);
                    prop_assert!((rep.std_at(ti, f) - s).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn quantile_bins_partition_sorted_targets(
        ys in prop::collection::vec((0u32..40).prop_map(|v| v as f64 / 2.0), 1..60),
        k in 1usize..8,
    ) {
        let bins = quantile_bins(&ys, k);
        prop_assert!(!bins.is_empty() && bins.len() <= k);
        let mut seen: Vec<usize> = bins.iter().flat_map(|b| b.members.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ys.len()).collect::<Vec<_>>());
        for b in &bins {
            prop_assert!(!b.members.is_empty());
            prop_assert!(b.members.iter().all(|&i| ys[i] >= b.lo && ys[i] <= b.hi));
        }
        for w in bins.windows(2) {
            let max_prev = w[0].members.iter().map(|&i| ys[i]).fold(f64::MIN, f64::max);
            let min_next = w[1].members.iter().map(|&i| ys[i]).fold(f64::MAX, f64::min);
            prop_assert!(max_prev < min_next, "ties split across bins");
        }
        let mut sorted = ys.clone();
        sorted.sort_by(f64::total_cmp);
        let flattened: Vec<f64> = bins
            .iter()
            .flat_map(|b| {
                let mut v: Vec<f64> = b.members.iter().map(|&i| ys[i]).collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        prop_assert_eq!(flattened, sorted);
    }

    #[test]
    fn regression_representatives_follow_bins(
        (t, xs, ys) in (1usize..8).prop_flat_map(|t| {
            (Just(t), prop::collection::vec(sample_strategy(t, 2), 12), prop::collection::vec(0.0f64..30.0, 12))
        }),
        k in 1usize..5,
    ) {
        let ds = dataset(Task::Regression, xs.clone(), Labels::Values(ys.clone()), t, 2, None);
        let reps = representative_series(&ds, k).unwrap();
        let bins = quantile_bins(&ys, k);
        prop_assert_eq!(reps.len(), bins.len());
        for (rep, bin) in reps.iter().zip(&bins) {
            prop_assert_eq!(&rep.group_label, &bin.label);
            let members: Vec<&Vec<f64>> = bin.members.iter().map(|&i| &xs[i]).collect();
            for ti in 0..t {
                for f in 0..2 {
                    let (m, s) = brute_mean_std(&members, ti, f, 2);
                    prop_assert!((rep.mean_at(ti, f) - m).abs() <= 1e-9);
                    prop_assert!((rep.std_at(ti, f) - s).abs() <= 1e-9);
                }
            }
        }
    }
}
