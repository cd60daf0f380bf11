//! Analysis exports: attention maps next to channel-wise DTW and step-wise
//! Euclidean distance matrices, gate-weight statistics, and embedding /
//! post-gate feature dumps for external projection tools.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MtsSample, Split};
use crate::error::{GtnError, Result};
use crate::model::Gtn;
use crate::tensor::Tensor;

/// Unconstrained DTW with absolute-difference local cost:
/// `D(i,j) = |a_i - b_j| + min(D(i-1,j), D(i,j-1), D(i-1,j-1))`.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(GtnError::Empty("dtw input series"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    #[serde(rename = "dtw-channel")]
    DtwChannel,
    #[serde(rename = "euclid-step")]
    EuclidStep,
}

/// Symmetric, non-negative, zero-diagonal `n×n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub kind: DistanceKind,
    pub values: Tensor,
}

/// Pairwise DTW between the channels of `sample`.
pub fn channel_dtw_matrix(sample: &MtsSample) -> Result<DistanceMatrix> {
    let c = sample.n_channels();
    let channels: Vec<Vec<f64>> = (0..c).map(|i| sample.channel(i)).collect();
    let mut values = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in i + 1..c {
            let d = dtw(&channels[i], &channels[j])?;
            values.data_mut()[i * c + j] = d;
            values.data_mut()[j * c + i] = d;
        }
    }
    Ok(DistanceMatrix {
        kind: DistanceKind::DtwChannel,
        values,
    })
}

/// L2 distance between the channel cross-sections of every pair of steps.
pub fn step_euclid_matrix(sample: &MtsSample) -> DistanceMatrix {
    let t = sample.true_len();
    let mut values = Tensor::zeros(&[t, t]);
    for s in 0..t {
        for u in s + 1..t {
            let d = sample
                .values
                .row(s)
                .iter()
                .zip(sample.values.row(u))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            values.data_mut()[s * t + u] = d;
            values.data_mut()[u * t + s] = d;
        }
    }
    DistanceMatrix {
        kind: DistanceKind::EuclidStep,
        values,
    }
}

/// Entrywise mean of equally shaped matrices.
pub fn mean_map(maps: &[Tensor]) -> Tensor {
    let mut out = Tensor::zeros(maps[0].shape());
    for m in maps {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    let n = maps.len() as f64;
    out.map(|v| v / n)
}

pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| GtnError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GtnError::io(path, e))
}

/// One exported matrix, as listed in the sidecar manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub file: String,
    /// `attention` or `distance`
    pub kind: String,
    /// `step` or `channel`
    pub tower: String,
    pub layer: Option<usize>,
    /// Head index; `None` for head-averaged maps and distance matrices.
    pub head: Option<usize>,
    pub metric: Option<DistanceKind>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionManifest {
    pub sample_id: usize,
    pub split: Split,
    pub label: usize,
    pub predicted: usize,
    pub gate_weights: Option<(f64, f64)>,
    pub matrices: Vec<MatrixEntry>,
}

/// Writes per-layer attention (every head plus the head mean) for each
/// tower, the channel DTW and step Euclidean matrices, and `manifest.json`
/// into `dir`. Step-tower maps and the step distance matrix share row order;
/// so do the channel maps and the DTW matrix.
pub fn export_attention(
    model: &Gtn,
    sample: &MtsSample,
    sample_id: usize,
    split: Split,
    dir: &Path,
) -> Result<AttentionManifest> {
    create_dir(dir)?;
    let inf = model.infer(&sample.values, sample.true_len())?;
    let mut matrices = Vec::new();
    let towers = [
        ("step", &inf.record.step_attention),
        ("channel", &inf.record.channel_attention),
    ];
    for (tower, layers) in towers {
        for (l, heads) in layers.iter().enumerate() {
            let mut emit = |file: String, head: Option<usize>, m: &Tensor| -> Result<()> {
                write(&dir.join(&file), &matrix_csv(m))?;
                matrices.push(MatrixEntry {
                    file,
                    kind: "attention".into(),
                    tower: tower.into(),
                    layer: Some(l),
                    head,
                    metric: None,
                    rows: m.shape()[0],
                    cols: m.shape()[1],
                });
                Ok(())
            };
            emit(
                format!("attention_{tower}_layer{l}_mean.csv"),
                None,
                &mean_map(heads),
            )?;
            for (h, m) in heads.iter().enumerate() {
                emit(
                    format!("attention_{tower}_layer{l}_head{h}.csv"),
                    Some(h),
                    m,
                )?;
            }
        }
    }

    let distances = [
        (
            "channel",
            "distance_channel_dtw.csv",
            channel_dtw_matrix(sample)?,
        ),
        (
            "step",
            "distance_step_euclid.csv",
            step_euclid_matrix(sample),
        ),
    ];
    for (tower, file, d) in distances {
        write(&dir.join(file), &matrix_csv(&d.values))?;
        matrices.push(MatrixEntry {
            file: file.into(),
            kind: "distance".into(),
            tower: tower.into(),
            layer: None,
            head: None,
            metric: Some(d.kind),
            rows: d.values.shape()[0],
            cols: d.values.shape()[1],
        });
    }

    let manifest = AttentionManifest {
        sample_id,
        split,
        label: sample.label,
        predicted: inf.predicted(),
        gate_weights: inf.record.gate_weights,
        matrices,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

/// Per-sample gate pairs `(g1, g2)` and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub pairs: Vec<(f64, f64)>,
    pub mean: (f64, f64),
}

impl GateStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,g1_channel,g2_step\n");
        for (i, (a, b)) in self.pairs.iter().enumerate() {
            let _ = writeln!(out, "{i},{a:?},{b:?}");
        }
        out
    }
}

pub fn gate_stats(model: &Gtn, samples: &[MtsSample]) -> Result<GateStats> {
    if samples.is_empty() {
        return Err(GtnError::Empty("gate statistics split"));
    }
    let mut session = model.session();
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let pair = session
            .infer(&s.values, s.true_len())?
            .record
            .gate_weights
            .ok_or_else(|| {
                GtnError::Config(format!("variant {} has no gate", model.config.variant))
            })?;
        pairs.push(pair);
    }
    let n = pairs.len() as f64;
    let g1 = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let g2 = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(GateStats {
        pairs,
        mean: (g1, g2),
    })
}

/// CSV bodies produced by [`export_embeddings`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    /// `sample,step,label,e0..` with one row per real time step.
    pub embeddings: Option<String>,
    /// `sample,label,f0..` with the classifier input of every sample.
    pub features: String,
}

/// Step-embedding rows (after positional encoding) and post-gate feature
/// vectors for `samples`. Embeddings are absent for channel-only variants.
pub fn export_embeddings(model: &Gtn, samples: &[MtsSample]) -> Result<EmbeddingExport> {
    let mut session = model.session();
    let d = model.config.d_model;
    let width = model.config.fused_width();
    let mut emb = String::from("sample,step,label");
    for j in 0..d {
        let _ = write!(emb, ",e{j}");
    }
    emb.push('\n');
    let mut feat = String::from("sample,label");
    for j in 0..width {
        let _ = write!(feat, ",f{j}");
    }
    feat.push('\n');

    for (i, s) in samples.iter().enumerate() {
        let rec = session.infer(&s.values, s.true_len())?.record;
        if let Some(e) = &rec.embedding_outputs {
            for (t, row) in e.rows().enumerate() {
                let _ = write!(emb, "{i},{t},{}", s.label);
                for v in row {
                    let _ = write!(emb, ",{v:?}");
                }
                emb.push('\n');
            }
        }
        let _ = write!(feat, "{i},{}", s.label);
        for v in &rec.fused_feature {
            let _ = write!(feat, ",{v:?}");
        }
        feat.push('\n');
    }
    Ok(EmbeddingExport {
        embeddings: model.config.variant.has_step_tower().then_some(emb),
        features: feat,
    })
}

/// Writes [`export_embeddings`] output as `embeddings.csv` / `features.csv`.
pub fn write_embeddings(model: &Gtn, samples: &[MtsSample], dir: &Path) -> Result<EmbeddingExport> {
    create_dir(dir)?;
    let export = export_embeddings(model, samples)?;
    if let Some(e) = &export.embeddings {
        write(&dir.join("embeddings.csv"), e)?;
    }
    write(&dir.join("features.csv"), &export.features)?;
    Ok(export)
}
