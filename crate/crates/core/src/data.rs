//! Labeled multivariate series, the dataset directory format, padded
//! batching and a synthetic generator.
//!
//! Directory layout:
//!
//! ```text
//! <dataset>/
//!   meta.json            {"name", "n_channels", "n_classes", "max_len",
//!                         "class_names"?, "splits": {"train": "train", "test": "test"}}
//!   train/labels.csv     header `file,label`, one row per sample
//!   train/000000.csv     rows = time steps, comma-separated columns = channels
//!   test/...
//! ```
//!
//! Values are read and written verbatim; no scaling or centering.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtnError, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const LABELS_FILE: &str = "labels.csv";

/// One labeled series, `T×C`, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsSample {
    pub values: Tensor,
    pub label: usize,
}

impl MtsSample {
    pub fn new(values: Tensor, label: usize) -> Result<Self> {
        values.dims2()?;
        if !values.is_finite() {
            return Err(GtnError::NonFinite("sample values".into()));
        }
        Ok(MtsSample { values, label })
    }

    pub fn true_len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Values of channel `c` over time.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.rows().map(|r| r[c]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtsDataset {
    pub name: String,
    pub n_channels: usize,
    pub n_classes: usize,
    pub max_len: usize,
    pub train: Vec<MtsSample>,
    pub test: Vec<MtsSample>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(GtnError::Config(format!(
                "unknown split {s:?}; expected train or test"
            ))),
        }
    }
}

impl MtsDataset {
    pub fn split(&self, split: Split) -> &[MtsSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.max_len == 0 {
            return Err(GtnError::Data("n_channels and max_len must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(GtnError::Data("n_classes must be >= 2".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return Err(GtnError::Data(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.n_classes
                )));
            }
        }
        for split in [Split::Train, Split::Test] {
            for (i, s) in self.split(split).iter().enumerate() {
                let at = || format!("{} sample {i}", split.name());
                if s.n_channels() != self.n_channels {
                    return Err(GtnError::Data(format!(
                        "{}: {} channels, dataset declares {}",
                        at(),
                        s.n_channels(),
                        self.n_channels
                    )));
                }
                if s.true_len() > self.max_len {
                    return Err(GtnError::Data(format!(
                        "{}: length {} exceeds max_len {}",
                        at(),
                        s.true_len(),
                        self.max_len
                    )));
                }
                if s.label >= self.n_classes {
                    return Err(GtnError::Data(format!(
                        "{}: label {} out of range for {} classes",
                        at(),
                        s.label,
                        self.n_classes
                    )));
                }
                if !s.values.is_finite() {
                    return Err(GtnError::Data(format!("{}: non-finite value", at())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    name: String,
    n_channels: usize,
    n_classes: usize,
    max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    splits: BTreeMap<String, String>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GtnError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| GtnError::io(path, e))
}

fn parse_series(path: &Path, text: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                let v: f64 = field.trim().parse().map_err(|_| {
                    GtnError::Data(format!(
                        "{}:{}: cannot parse {field:?} as a number",
                        path.display(),
                        ln + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(GtnError::Data(format!(
                        "{}:{}: non-finite value {field:?}",
                        path.display(),
                        ln + 1
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GtnError::Data(format!("{}: empty series", path.display())));
    }
    Tensor::from_rows(&rows).map_err(|_| {
        GtnError::Data(format!(
            "{}: rows have differing channel counts",
            path.display()
        ))
    })
}

fn load_split(dir: &Path, meta: &Meta) -> Result<Vec<MtsSample>> {
    let labels_path = dir.join(LABELS_FILE);
    let text = read_to_string(&labels_path)?;
    let mut samples = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| {
            GtnError::Data(format!(
                "{}:{}: expected file,label",
                labels_path.display(),
                ln + 1
            ))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            GtnError::Data(format!(
                "{}:{}: bad label {label:?}",
                labels_path.display(),
                ln + 1
            ))
        })?;
        if label >= meta.n_classes {
            return Err(GtnError::Data(format!(
                "{}:{}: label {label} out of range for {} classes",
                labels_path.display(),
                ln + 1,
                meta.n_classes
            )));
        }
        let path = dir.join(file.trim());
        let values = parse_series(&path, &read_to_string(&path)?)?;
        if values.shape()[1] != meta.n_channels {
            return Err(GtnError::Data(format!(
                "{}: {} channels, dataset declares {}",
                path.display(),
                values.shape()[1],
                meta.n_channels
            )));
        }
        samples.push(MtsSample { values, label });
    }
    Ok(samples)
}

/// Reads a dataset directory. Values are returned exactly as written.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MtsDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    if !meta_path.is_file() {
        return Err(GtnError::Data(format!(
            "missing manifest {}",
            meta_path.display()
        )));
    }
    let meta: Meta = serde_json::from_str(&read_to_string(&meta_path)?)
        .map_err(|e| GtnError::json(&meta_path, e))?;
    let split_dir = |name: &str| {
        meta.splits
            .get(name)
            .map(|d| dir.join(d))
            .ok_or_else(|| GtnError::Data(format!("{}: no {name:?} split", meta_path.display())))
    };
    let train = load_split(&split_dir("train")?, &meta)?;
    let test = load_split(&split_dir("test")?, &meta)?;
    let ds = MtsDataset {
        name: meta.name,
        n_channels: meta.n_channels,
        n_classes: meta.n_classes,
        max_len: meta.max_len,
        train,
        test,
        class_names: meta.class_names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` in the directory format read by [`load_dataset`].
pub fn write_dataset(ds: &MtsDataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    let mut splits = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| GtnError::io(&sub, e))?;
        let mut labels = String::from("file,label\n");
        for (i, s) in ds.split(split).iter().enumerate() {
            let file = format!("{i:06}.csv");
            let mut body = String::new();
            for row in s.values.rows() {
                let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                body.push_str(&fields.join(","));
                body.push('\n');
            }
            write_file(&sub.join(&file), &body)?;
            labels.push_str(&format!("{file},{}\n", s.label));
        }
        write_file(&sub.join(LABELS_FILE), &labels)?;
        splits.insert(split.name().to_string(), split.name().to_string());
    }
    let meta = Meta {
        name: ds.name.clone(),
        n_channels: ds.n_channels,
        n_classes: ds.n_classes,
        max_len: ds.max_len,
        class_names: ds.class_names.clone(),
        splits,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_file(&dir.join(META_FILE), &(json + "\n"))
}

/// Samples zero-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×L×C`, `L` the longest true length in the batch.
    pub values: Tensor,
    pub true_lens: Vec<usize>,
    pub labels: Vec<usize>,
    /// Positions of the samples in the list given to [`batchify`].
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.values.shape()[1]
    }

    /// Padded `L×C` matrix of sample `i`.
    pub fn sample(&self, i: usize) -> Tensor {
        let (l, c) = (self.values.shape()[1], self.values.shape()[2]);
        let data = self.values.data()[i * l * c..(i + 1) * l * c].to_vec();
        Tensor::new(vec![l, c], data).expect("batch slice")
    }

    /// Sample `i` with padding removed.
    pub fn unpadded(&self, i: usize) -> Tensor {
        let c = self.values.shape()[2];
        let t = self.true_lens[i];
        let full = self.sample(i);
        Tensor::new(vec![t, c], full.data()[..t * c].to_vec()).expect("batch slice")
    }
}

/// Groups samples into batches of at most `batch_size`, each zero-padded to
/// its longest member. Order is shuffled with `rng` when `shuffle` is set.
pub fn batchify(
    samples: &[MtsSample],
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(GtnError::Empty("sample list"));
    }
    if batch_size == 0 {
        return Err(GtnError::Param("batch_size must be >= 1".into()));
    }
    let channels = samples[0].n_channels();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let len = idx.iter().map(|&i| samples[i].true_len()).max().unwrap();
            let mut data = vec![0.0; idx.len() * len * channels];
            for (b, &i) in idx.iter().enumerate() {
                let s = &samples[i];
                if s.n_channels() != channels {
                    return Err(GtnError::Data(format!(
                        "sample {i} has {} channels, expected {channels}",
                        s.n_channels()
                    )));
                }
                let dst = b * len * channels;
                data[dst..dst + s.values.numel()].copy_from_slice(s.values.data());
            }
            Ok(Batch {
                values: Tensor::new(vec![idx.len(), len, channels], data)?,
                true_lens: idx.iter().map(|&i| samples[i].true_len()).collect(),
                labels: idx.iter().map(|&i| samples[i].label).collect(),
                indices: idx.to_vec(),
            })
        })
        .collect()
}

/// Parameters of a synthetic classification set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub n_classes: usize,
    pub n_channels: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synthetic".into(),
            n_classes: 2,
            n_channels: 4,
            min_len: 20,
            max_len: 30,
            noise: 0.1,
            train_per_class: 100,
            test_per_class: 50,
        }
    }
}

/// Clean value of channel `c` at step `t` for class `k`. All channels share
/// the class frequency and phase, offset per channel, so channels are
/// correlated within a sample.
pub fn synth_signal(spec: &SynthSpec, k: usize, c: usize, t: usize) -> f64 {
    use std::f64::consts::PI;
    let freq = 0.04 + 0.06 * k as f64;
    let phase = PI * k as f64 / spec.n_classes as f64;
    let amp = 1.0 + 0.25 * c as f64;
    amp * (2.0 * PI * freq * t as f64 + phase + 0.5 * c as f64).sin()
}

/// Class-`k` samples are channel-correlated sinusoids with class-specific
/// frequency and phase plus Gaussian noise.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut Rng) -> Result<MtsDataset> {
    if spec.n_classes < 2
        || spec.n_channels == 0
        || spec.min_len == 0
        || spec.min_len > spec.max_len
    {
        return Err(GtnError::Param(format!("invalid synthetic spec {spec:?}")));
    }
    if !(spec.noise >= 0.0) {
        return Err(GtnError::Param("noise must be >= 0".into()));
    }
    let mut make = |per_class: usize| -> Result<Vec<MtsSample>> {
        let mut out = Vec::with_capacity(per_class * spec.n_classes);
        for k in 0..spec.n_classes {
            for _ in 0..per_class {
                let len = rng.int_inclusive(spec.min_len, spec.max_len);
                let mut data = Vec::with_capacity(len * spec.n_channels);
                for t in 0..len {
                    for c in 0..spec.n_channels {
                        data.push(synth_signal(spec, k, c, t) + spec.noise * rng.normal());
                    }
                }
                out.push(MtsSample::new(
                    Tensor::new(vec![len, spec.n_channels], data)?,
                    k,
                )?);
            }
        }
        rng.shuffle(&mut out);
        Ok(out)
    };
    let train = make(spec.train_per_class)?;
    let test = make(spec.test_per_class)?;
    Ok(MtsDataset {
        name: spec.name.clone(),
        n_channels: spec.n_channels,
        n_classes: spec.n_classes,
        max_len: spec.max_len,
        train,
        test,
        class_names: None,
    })
}

/// Synthetic set drawn from the dedicated synth stream of `seed`.
pub fn synth_with_seed(spec: &SynthSpec, seed: u64) -> Result<MtsDataset> {
    synth_dataset(spec, &mut Rng::new(seed, Purpose::Synth))
}
