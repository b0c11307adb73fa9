//! Fixed-length CSV text of representative series.

use crate::dataset::RepresentativeSeries;

pub const DEFAULT_FIXED_LENGTH: usize = 128;

/// Formats with at most four decimals, trailing zeros trimmed.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".to_string()
    } else {
        s
    }
}

/// Segment boundaries `floor(i * t / rows)` for `rows` segments over `t` steps.
pub fn segments(t: usize, rows: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .map(|i| (i * t / rows, (i + 1) * t / rows))
        .collect()
}

/// Mean values as CSV, one column per (group, feature). When `T > L` each row
/// is the mean over a contiguous segment and its timestamp is the segment
/// start.
pub fn serialize_numeric(reps: &[RepresentativeSeries], fixed_length: usize) -> String {
    let fixed_length = fixed_length.max(1);
    let t_max = reps.iter().map(|r| r.seq_length).max().unwrap_or(0);
    let rows = t_max.min(fixed_length);

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["timestamp".to_string()];
    for rep in reps {
        for f in 0..rep.n_features {
            header.push(format!("{}_f{f}", rep.group_label));
        }
    }
    w.write_record(&header).expect("in-memory write");

    let pooled: Vec<Vec<Vec<f64>>> = reps
        .iter()
        .map(|rep| {
            segments(rep.seq_length, rows)
                .into_iter()
                .map(|(a, b)| {
                    (0..rep.n_features)
                        .map(|f| {
                            if b > a {
                                (a..b).map(|t| rep.mean_at(t, f)).sum::<f64>() / (b - a) as f64
                            } else {
                                rep.mean_at(a.min(rep.seq_length - 1), f)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    for (i, (start, _)) in segments(t_max, rows).into_iter().enumerate() {
        let mut row = vec![start.to_string()];
        for group in &pooled {
            row.extend(group[i].iter().map(|&v| format_value(v)));
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}
