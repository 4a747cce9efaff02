use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RegressionModel, Setting};
use crate::error::{config, usage, Result};
use crate::seed::{rng, standard_normal};

/// Provenance written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub setting: Setting,
    pub noise_sd: f64,
    /// The generating model.
    pub model: RegressionModel,
}

/// `n` i.i.d. pairs `(X_i, Y_i)`; `x` is row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.meta.dim;
        &self.x[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(self.meta.dim.max(1))
    }

    /// Sidecar path: `data.csv` → `data.meta.json`.
    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    /// Writes `x_1..x_d,y` rows to `path` and the metadata sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.dim()).map(|k| format!("x_{k}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (x, y) in self.rows().zip(&self.y) {
            let rec: Vec<String> = x.iter().chain(std::iter::once(y)).map(f64::to_string).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        std::fs::write(Self::meta_path(path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta_path = Self::meta_path(path);
        let meta: DatasetMeta = match std::fs::read_to_string(&meta_path) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(e) => return config(format!("cannot read dataset metadata {}: {e}", meta_path.display())),
        };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() != meta.dim + 1 {
            return config(format!("{} has {} columns, metadata says dim {}", path.display(), header.len(), meta.dim));
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| crate::Error::Config(format!("row {}: bad number {field:?}", line + 2)))?;
                if k < meta.dim {
                    x.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        if y.len() != meta.n {
            return config(format!("{} has {} rows, metadata says {}", path.display(), y.len(), meta.n));
        }
        Ok(Self { x, y, meta })
    }
}

/// Draws `n` pairs from `model`, deterministically in `seed`.
///
/// Each sample draws `X_i` from the input law and then one standard normal
/// `z_i`, with `Y_i = f(X_i) + ν z_i`. Two models with the same dimension and
/// input law therefore see identical covariates and noise for the same seed.
pub fn gen_dataset(model: &RegressionModel, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return usage("dataset size must be at least 1");
    }
    model.validate()?;
    let d = model.dim();
    let eval = model.evaluator();
    let mut r = rng(seed);
    let mut x = vec![0.0; n * d];
    let mut y = Vec::with_capacity(n);
    for row in x.chunks_exact_mut(d) {
        model.input_law.sample_into(&mut r, row);
        let z = standard_normal(&mut r);
        y.push(eval.eval(row) + model.noise_sd * z);
    }
    Ok(Dataset {
        x,
        y,
        meta: DatasetMeta {
            n,
            dim: d,
            seed,
            setting: model.measure.setting(),
            noise_sd: model.noise_sd,
            model: model.clone(),
        },
    })
}
