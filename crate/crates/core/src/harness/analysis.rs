use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::LayerKind;
use crate::harness::model::Model;
use crate::hyper::{selection_embedding, SelectionMlp};
use crate::tensor::{Tape, Tensor};

/// Pairwise distances between expert embeddings and between their
/// leave-one-out selection embeddings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingDump {
    pub metric: &'static str,
    pub layer: usize,
    pub experts: Vec<Vec<f64>>,
    pub selection: Vec<Vec<f64>>,
}

/// Euclidean distances between rows; `d[i][j]` is computed once and mirrored.
pub fn distance_matrix(rows: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, _) = rows.dims2()?;
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = rows
                .row(i)
                .iter()
                .zip(rows.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(d)
}

/// Row `i` is the selection embedding built from every expert except `i`.
pub fn leave_one_out_selection(experts: &Tensor, mlp: &[Tensor; 4]) -> Result<Tensor> {
    let (n, _) = experts.dims2()?;
    let mut mask = Tensor::full([n, n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mut tape = Tape::new();
    let s = tape.constant(experts.clone());
    let [w1, b1, w2, b2] = mlp.clone().map(|t| tape.constant(t));
    let mlp = SelectionMlp { w1, b1, w2, b2 };
    let p = selection_embedding(&mut tape, &mask, s, &mlp)?;
    Ok(tape.value(p).clone())
}

pub fn analyze_embeddings(model: &Model, layer: usize) -> Result<EmbeddingDump> {
    let cfg = model.config();
    if cfg.layer_kind != LayerKind::Hypermoe {
        return Err(Error::config(format!(
            "model is `{}`; embedding analysis needs a hypermoe model",
            cfg.layer_kind.name()
        )));
    }
    if layer >= cfg.num_layers {
        return Err(Error::config(format!(
            "layer {layer} out of range for {} layers",
            cfg.num_layers
        )));
    }
    let (Some(experts), Some(mlp)) = (model.expert_embeddings(layer)?, model.selection_mlp()) else {
        return Err(Error::config(
            "model has no expert embeddings (embedding_source = none)",
        ));
    };
    let selection = leave_one_out_selection(&experts, &mlp)?;
    Ok(EmbeddingDump {
        metric: "euclidean",
        layer,
        experts: distance_matrix(&experts)?,
        selection: distance_matrix(&selection)?,
    })
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..m.len()).map(|i| format!("e{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

impl EmbeddingDump {
    /// Writes `experts_dist.csv` and `selection_dist.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("experts_dist.csv"), matrix_csv(&self.experts))?;
        std::fs::write(dir.join("selection_dist.csv"), matrix_csv(&self.selection))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_mlp(t: usize) -> [Tensor; 4] {
        [
            Tensor::identity(t),
            Tensor::zeros([1, t]),
            Tensor::identity(t),
            Tensor::zeros([1, t]),
        ]
    }

    #[test]
    fn two_experts_swap() {
        // relu∘identity keeps nonnegative rows unchanged
        let s = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]).unwrap();
        let sel = leave_one_out_selection(&s, &identity_mlp(2)).unwrap();
        assert_eq!(sel.row(0), &[0.0, 3.0]);
        assert_eq!(sel.row(1), &[1.0, 0.0]);
        let d = distance_matrix(&sel).unwrap();
        assert_eq!(d[0][0], 0.0);
        assert!((d[0][1] - 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(d[0][1], d[1][0]);
    }

    #[test]
    fn identical_embeddings_collapse() {
        let s = Tensor::full([4, 3], 0.7);
        let sel = leave_one_out_selection(&s, &identity_mlp(3)).unwrap();
        for d in [distance_matrix(&s).unwrap(), distance_matrix(&sel).unwrap()] {
            assert!(d.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_hyper_model_is_rejected() {
        let cfg = crate::harness::config::ModelConfig {
            layer_kind: LayerKind::Moe,
            ..Default::default()
        };
        let m = Model::from_config(&cfg).unwrap();
        assert!(matches!(analyze_embeddings(&m, 0), Err(Error::Config(_))));
    }
}
