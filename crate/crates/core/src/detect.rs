//! Online anomaly scoring: `S = 1 − max_k π_k` from the fused expert
//! decisions, plus a newline-delimited JSON service around it.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{DpoeError, Result};
use crate::latent::{expert_probs, fuse};
use crate::model::DpoeModel;
use crate::networks::{encode_view, Mode};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub score: f64,
    pub cluster_probs: Vec<f64>,
    /// `m × K`, one row per view.
    pub per_expert: Vec<Vec<f64>>,
    pub argmax_cluster: usize,
}

impl ScoredInstance {
    fn from_rows(pi: &[f64], experts: Vec<Vec<f64>>) -> Self {
        Self {
            score: score_from_probs(pi),
            cluster_probs: pi.to_vec(),
            per_expert: experts,
            argmax_cluster: argmax(pi),
        }
    }
}

/// First index of the largest probability.
pub fn argmax(pi: &[f64]) -> usize {
    pi.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
        .0
}

/// Anomaly score `1 − max_k π_k` of a normalized `π`, summed over the
/// non-maximal entries so confident rows keep their precision instead of
/// rounding to 0.
pub fn score_from_probs(pi: &[f64]) -> f64 {
    let top = argmax(pi);
    pi.iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &p)| p)
        .sum()
}

/// Score a batch given one `B × D_v` matrix per view. Only the encoders and
/// the fusion rule run; nothing is sampled.
pub fn score_views<T: Scalar>(model: &DpoeModel<T>, views: &[ArrayView2<'_, T>]) -> Result<Vec<ScoredInstance>> {
    let n = model.check_views(views)?;
    let experts: Vec<Array2<T>> = model
        .encoders
        .iter()
        .zip(views)
        .map(|(enc, x)| {
            let e = encode_view(enc, &model.params, &model.buffers, x.reborrow(), Mode::Eval)?;
            Ok(expert_probs(e.expert_logits.view()))
        })
        .collect::<Result<_>>()?;
    let expert_views: Vec<ArrayView2<'_, T>> = experts.iter().map(|e| e.view()).collect();
    let pi = fuse(&expert_views, model.config.ablation.use_poe)?;
    let to_f64 = |row: ndarray::ArrayView1<'_, T>| row.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    Ok((0..n)
        .map(|i| {
            let per_expert = experts.iter().map(|e| to_f64(e.row(i))).collect();
            ScoredInstance::from_rows(&to_f64(pi.row(i)), per_expert)
        })
        .collect())
}

/// Score one instance given one `D_v` vector per view.
pub fn anomaly_score<T: Scalar>(model: &DpoeModel<T>, instance: &[&[T]]) -> Result<ScoredInstance> {
    if instance.len() != model.num_views() {
        return Err(DpoeError::Input(format!(
            "expected {} views, got {}",
            model.num_views(),
            instance.len()
        )));
    }
    let rows: Vec<ArrayView2<'_, T>> = instance
        .iter()
        .zip(&model.config.views)
        .map(|(x, spec)| {
            ArrayView2::from_shape((1, x.len()), x).map_err(|_| DpoeError::Shape(format!("view '{}'", spec.name)))
        })
        .collect::<Result<_>>()?;
    Ok(score_views(model, &rows)?.remove(0))
}

/// Rows scored per encoder pass in [`score_batch`].
pub const SCORE_CHUNK: usize = 256;

/// Score every instance of `data`.
pub fn score_batch<T: Scalar>(model: &DpoeModel<T>, data: &MultiViewDataset<T>) -> Result<Vec<ScoredInstance>> {
    if data.specs != model.config.views {
        return Err(DpoeError::Input("dataset views do not match the model".into()));
    }
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let chunk: Vec<ArrayView2<'_, T>> = data
            .views
            .iter()
            .map(|v| v.slice_axis(Axis(0), (start..end).into()))
            .collect();
        out.extend(score_views(model, &chunk)?);
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    views: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct ErrorResponse {
    error: String,
}

/// Answer one request line with one response line (without newline).
pub fn respond<T: Scalar>(model: &DpoeModel<T>, line: &str) -> String {
    let result = serde_json::from_str::<Request>(line)
        .map_err(|_| "parse".to_string())
        .and_then(|req| score_request(model, req).map_err(|e| e.to_string()));
    match result {
        Ok(scored) => serde_json::to_string(&scored),
        Err(error) => serde_json::to_string(&ErrorResponse { error }),
    }
    .expect("serializable response")
}

fn score_request<T: Scalar>(model: &DpoeModel<T>, req: Request) -> Result<ScoredInstance> {
    if let Some(name) = req.views.keys().find(|k| !model.config.views.iter().any(|s| &s.name == *k)) {
        return Err(DpoeError::Input(format!("unknown view '{name}'")));
    }
    let mut rows = Vec::with_capacity(model.num_views());
    for spec in &model.config.views {
        let x = req
            .views
            .get(&spec.name)
            .ok_or_else(|| DpoeError::Input(format!("missing view '{}'", spec.name)))?;
        if x.len() != spec.input_dim() {
            return Err(DpoeError::Shape(format!(
                "view '{}' has {} values, expected {}",
                spec.name,
                x.len(),
                spec.input_dim()
            )));
        }
        rows.push(x.iter().map(|&v| T::lit(v)).collect::<Vec<T>>());
    }
    let refs: Vec<&[T]> = rows.iter().map(Vec::as_slice).collect();
    anomaly_score(model, &refs)
}

/// Serve newline-delimited JSON until `input` is exhausted. Blank lines are
/// skipped; every other line gets exactly one response line.
pub fn serve_lines<T: Scalar, R: BufRead, W: Write>(model: &DpoeModel<T>, input: R, mut output: W) -> Result<usize> {
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", respond(model, &line))?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Serve stdin to stdout.
pub fn serve_stdio<T: Scalar>(model: &DpoeModel<T>) -> Result<usize> {
    let stdin = std::io::stdin();
    serve_lines(model, stdin.lock(), std::io::stdout().lock())
}

/// Accept TCP connections forever, one thread per connection, all sharing
/// one immutable model.
pub fn serve_tcp<T: Scalar, A: ToSocketAddrs>(model: Arc<DpoeModel<T>>, addr: A) -> Result<()> {
    serve_listener(model, TcpListener::bind(addr)?)
}

pub fn serve_listener<T: Scalar>(model: Arc<DpoeModel<T>>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let model = Arc::clone(&model);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(r) => BufReader::new(r),
                Err(_) => return,
            };
            if let Err(e) = serve_lines(&model, reader, BufWriter::new(stream)) {
                eprintln!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, ViewSpec};
    use crate::data::make_synthetic;
    use crate::latent::poe_combine;
    use ndarray::array;
    use proptest::{prop_assert, proptest};

    fn model(k: usize) -> DpoeModel<f32> {
        let mut cfg = ModelConfig::new(vec![ViewSpec::vector("v1", 4), ViewSpec::vector("v2", 4)], k);
        cfg.architecture.hidden_width = 16;
        DpoeModel::new(&cfg).unwrap()
    }

    #[test]
    fn confident_rows_keep_distinct_scores() {
        let a = score_from_probs(&[1.0 - 1e-12, 1e-12, 0.0]);
        let b = score_from_probs(&[1.0 - 1e-9, 5e-10, 5e-10]);
        assert!(a > 0.0 && b > a);
        assert!((a - (1.0 - (1.0 - 1e-12))).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_from_probs(&[0.0, 1.0, 0.0]), 0.0);
        assert!((score_from_probs(&[0.25; 4]) - 0.75).abs() < 1e-15);
        let a = array![[0.9, 0.1]];
        let b = array![[0.1, 0.9]];
        let pi = poe_combine(&[a.view(), b.view()]).unwrap();
        assert!((score_from_probs(pi.row(0).as_slice().unwrap()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_scores_equal_single_instance_scores() {
        let m = model(3);
        let mut d = make_synthetic::<f32>(2, 3, 1000, 4, 2);
        d.normalize();
        let batch = score_batch(&m, &d).unwrap();
        for (i, s) in batch.iter().enumerate() {
            let rows: Vec<&[f32]> = d.views.iter().map(|v| v.row(i).to_slice().unwrap()).collect();
            assert_eq!(&anomaly_score(&m, &rows).unwrap(), s, "instance {i}");
        }
        let order: Vec<usize> = (0..1000).rev().collect();
        let reversed = score_batch(&m, &d.subset(&order)).unwrap();
        for (i, s) in reversed.iter().enumerate() {
            assert_eq!(s, &batch[999 - i]);
        }
    }

    #[test]
    fn protocol_errors_keep_the_stream_alive() {
        let m = model(3);
        let good = r#"{"views":{"v1":[0.1,0.2,0.3,0.4],"v2":[1,0,0,1]}}"#;
        let input = format!(
            "{good}\nnot json\n\n{}\n{}\n{}\n{good}\n",
            r#"{"views":{"v1":[0,0,0,0],"v2":[0,0,0,0],"v9":[1]}}"#,
            r#"{"views":{"v1":[0,0,0,0]}}"#,
            r#"{"views":{"v1":[0,0,0],"v2":[0,0,0,0]}}"#
        );
        let mut out = Vec::new();
        assert_eq!(serve_lines(&m, input.as_bytes(), &mut out).unwrap(), 6);
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(lines[0]["score"].is_number());
        assert_eq!(lines[0]["per_expert"].as_array().unwrap().len(), 2);
        assert_eq!(lines[1]["error"], "parse");
        assert!(lines[2]["error"].as_str().unwrap().contains("unknown view 'v9'"));
        assert!(lines[3]["error"].as_str().unwrap().contains("missing view 'v2'"));
        assert!(lines[4]["error"].as_str().unwrap().contains("expected 4"));
        assert_eq!(lines[5], lines[0]);
    }

    proptest! {
        #[test]
        fn scores_stay_in_bounds(xs in proptest::collection::vec(-50.0f32..50.0, 8)) {
            let m = model(4);
            let s = anomaly_score(&m, &[&xs[..4], &xs[4..]]).unwrap();
            prop_assert!(s.score >= -1e-6 && s.score <= 0.75 + 1e-6);
            let total: f64 = s.cluster_probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
        }
    }
}
