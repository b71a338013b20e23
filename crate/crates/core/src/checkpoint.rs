//! Plain-text parameter checkpoints.
//!
//! ```text
//! hetero-gnn-checkpoint 1
//! hyper {"lr":0.01,...}
//! run_seed 42
//! split train 0110...
//! split val 1000...
//! split test 0001...
//! tensor q 2 1703 16
//! <values separated by spaces>
//! tensor w0x 2 1703 32
//! ...
//! tensor w 1 256
//! ...
//! end
//! ```
//!
//! Values use the shortest decimal form that parses back to the same
//! `f64`, so a save/load round trip is exact. Tensors are row-major. The
//! thresholded support is not stored; it is rebuilt from `q`, `eps` and
//! the graph.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::SplitMasks;
use crate::model::GcnSlParams;
use crate::structure::SimilarityHead;
use crate::train::{HyperParams, PreparedGraph, TrainedModel};

pub const MAGIC: &str = "hetero-gnn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: HyperParams,
    pub run_seed: u64,
    pub split: SplitMasks,
    pub head: SimilarityHead,
    pub params: GcnSlParams,
}

impl Checkpoint {
    pub fn from_model(hyper: &HyperParams, model: &TrainedModel) -> Self {
        Self {
            hyper: hyper.clone(),
            run_seed: model.run_seed,
            split: model.split.clone(),
            head: model.head.clone(),
            params: model.params.clone(),
        }
    }

    /// Rebuilds the trained model, including its support, on `prep`.
    pub fn into_model(self, prep: &PreparedGraph<'_>) -> Result<TrainedModel> {
        let n = prep.graph.n_nodes();
        if self.split.train.len() != n {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {} nodes, graph has {n}",
                self.split.train.len()
            )));
        }
        self.params.check_shapes(prep.x_aug.ncols(), prep.spectral.c())?;
        let support = prep.support(&self.head, self.hyper.branches)?;
        Ok(TrainedModel {
            head: self.head,
            params: self.params,
            support,
            split: self.split,
            run_seed: self.run_seed,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let hyper = serde_json::to_string(&self.hyper).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "hyper {hyper}");
        let _ = writeln!(out, "run_seed {}", self.run_seed);
        for (name, mask) in [("train", &self.split.train), ("val", &self.split.val), ("test", &self.split.test)] {
            let bits: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
            let _ = writeln!(out, "split {name} {bits}");
        }
        write_tensor(&mut out, "q", &[self.head.q.nrows(), self.head.q.ncols()], self.head.q.iter());
        for (name, t) in [("w0x", &self.params.w0x), ("w0f", &self.params.w0f), ("w1", &self.params.w1)] {
            write_tensor(&mut out, name, &[t.nrows(), t.ncols()], t.iter());
        }
        write_tensor(&mut out, "w", &[self.params.w.len()], self.params.w.iter());
        out.push_str("end\n");
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |msg: String| Error::Checkpoint(msg);
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v.parse() == Ok(VERSION) => {}
            _ => return Err(bad(format!("unrecognised header '{header}'"))),
        }

        let mut hyper: Option<HyperParams> = None;
        let mut run_seed = None;
        let (mut train, mut val, mut test) = (None, None, None);
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut ended = false;
        while let Some(line) = lines.next() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "hyper" => hyper = Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?),
                "run_seed" => run_seed = Some(rest.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "split" => {
                    let (which, bits) = rest.split_once(' ').ok_or_else(|| bad("malformed split".into()))?;
                    let mask = bits
                        .chars()
                        .map(|ch| match ch {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            other => Err(bad(format!("bad split character '{other}'"))),
                        })
                        .collect::<Result<Vec<bool>>>()?;
                    match which {
                        "train" => train = Some(mask),
                        "val" => val = Some(mask),
                        "test" => test = Some(mask),
                        other => return Err(bad(format!("unknown split '{other}'"))),
                    }
                }
                "tensor" => {
                    let mut parts = rest.split_whitespace();
                    let name = parts.next().ok_or_else(|| bad("tensor without name".into()))?.to_string();
                    let dims = parts
                        .map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                    let (&ndim, shape) = dims.split_first().ok_or_else(|| bad(format!("tensor {name} has no rank")))?;
                    if shape.len() != ndim {
                        return Err(bad(format!("tensor {name}: rank {ndim} with {} dimensions", shape.len())));
                    }
                    let body = lines.next().ok_or_else(|| bad(format!("tensor {name} has no values")))?;
                    let values = body
                        .split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|e| bad(format!("tensor {name}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    if values.len() != shape.iter().product::<usize>() {
                        return Err(bad(format!("tensor {name}: {} values for shape {shape:?}", values.len())));
                    }
                    tensors.push((name, shape.to_vec(), values));
                }
                "end" => {
                    ended = true;
                    break;
                }
                "" => {}
                other => return Err(bad(format!("unknown record '{other}'"))),
            }
        }
        if !ended {
            return Err(bad("truncated file: missing 'end'".into()));
        }

        let hyper = hyper.ok_or_else(|| bad("missing hyper record".into()))?;
        let mut take = |name: &str| {
            tensors
                .iter()
                .position(|t| t.0 == name)
                .map(|i| tensors.swap_remove(i))
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let matrix = |(name, shape, values): (String, Vec<usize>, Vec<f64>)| -> Result<Array2<f64>> {
            match shape[..] {
                [r, c] => Array2::from_shape_vec((r, c), values).map_err(|e| bad(e.to_string())),
                _ => Err(bad(format!("tensor {name} must be a matrix"))),
            }
        };
        let q = matrix(take("q")?)?;
        let w0x = matrix(take("w0x")?)?;
        let w0f = matrix(take("w0f")?)?;
        let w1 = matrix(take("w1")?)?;
        let (_, w_shape, w_values) = take("w")?;
        if w_shape.len() != 1 {
            return Err(bad("tensor w must be a vector".into()));
        }
        let params = GcnSlParams {
            w0x,
            w0f,
            w: Array1::from(w_values),
            w1,
            combine: hyper.combine,
            rounds: hyper.k,
        };
        params.check_shapes(params.w0x.nrows(), params.w0f.nrows())?;
        let split = SplitMasks {
            train: train.ok_or_else(|| bad("missing train split".into()))?,
            val: val.ok_or_else(|| bad("missing val split".into()))?,
            test: test.ok_or_else(|| bad("missing test split".into()))?,
        };
        if split.val.len() != split.train.len() || split.test.len() != split.train.len() {
            return Err(bad("split masks differ in length".into()));
        }
        Ok(Self {
            head: SimilarityHead::new(q, hyper.eps)?,
            run_seed: run_seed.ok_or_else(|| bad("missing run_seed".into()))?,
            split,
            params,
            hyper,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn write_tensor<'a>(out: &mut String, name: &str, shape: &[usize], values: impl Iterator<Item = &'a f64>) {
    let _ = write!(out, "tensor {name} {}", shape.len());
    for d in shape {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}
